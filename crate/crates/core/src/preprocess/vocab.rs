use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercases and splits on whitespace and punctuation.
pub fn words(sentence: &str) -> Vec<String> {
    sentence
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let id_to_token: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if id_to_token.len() < RESERVED.len()
            || id_to_token[..RESERVED.len()].iter().zip(RESERVED).any(|(a, b)| a != b)
        {
            return Err(Error::Format(format!(
                "vocabulary must start with {}",
                RESERVED.join(", ")
            )));
        }
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (i, t) in id_to_token.iter().enumerate() {
            if token_to_id.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self {
            token_to_id,
            id_to_token,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = self.id_to_token.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Frequency-descending, ties lexicographic, reserved ids first.
pub fn build_vocabulary<S: AsRef<str>>(corpus: &[S], min_freq: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::Invalid("cannot build a vocabulary from an empty corpus".into()));
    }
    if min_freq < 1 {
        return Err(Error::Invalid("min_freq must be at least 1".into()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for sentence in corpus {
        for w in words(sentence.as_ref()) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut kept: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocabulary::from_tokens(RESERVED.iter().map(|s| s.to_string()).chain(kept.into_iter().map(|(w, _)| w)))
}

/// Token ids with a validity mask and the source text.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub text: String,
}

impl TokenSequence {
    pub fn from_ids(ids: Vec<usize>, text: impl Into<String>) -> Self {
        let mask = ids.iter().map(|&i| i != PAD).collect();
        Self {
            ids,
            mask,
            text: text.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Ids strictly between `<bos>` and the first `<eos>`.
    pub fn content(&self) -> Vec<usize> {
        content_ids(&self.ids)
    }
}

pub(crate) fn content_ids(ids: &[usize]) -> Vec<usize> {
    ids.iter()
        .copied()
        .skip_while(|&i| i == BOS)
        .take_while(|&i| i != EOS)
        .filter(|&i| i != PAD && i != BOS)
        .collect()
}

/// `<bos> w1 .. wk <eos>`, truncated to `max_len` (minimum 3) while keeping
/// `<eos>`. Out-of-vocabulary words map to `<unk>`.
pub fn tokenize(sentence: &str, vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    let max_len = max_len.max(3);
    let mut ids = vec![BOS];
    ids.extend(
        words(sentence)
            .iter()
            .take(max_len - 2)
            .map(|w| vocab.id(w).unwrap_or(UNK)),
    );
    ids.push(EOS);
    TokenSequence::from_ids(ids, sentence)
}

/// Drops `<bos>`/`<pad>`, stops at the first `<eos>`, joins with spaces.
pub fn detokenize(ids: &[usize], vocab: &Vocabulary) -> Result<String> {
    let mut out = Vec::new();
    for &id in ids {
        if id == EOS {
            break;
        }
        if id == BOS || id == PAD {
            continue;
        }
        let tok = vocab
            .token(id)
            .ok_or_else(|| Error::Invalid(format!("token id {id} outside vocabulary of {}", vocab.len())))?;
        out.push(tok);
    }
    Ok(out.join(" "))
}

/// Reads `id<TAB>caption` lines. Lines without a tab get their line number
/// as id.
pub fn read_captions(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| match l.split_once('\t') {
            Some((id, cap)) => (id.to_string(), cap.to_string()),
            None => (i.to_string(), l.to_string()),
        })
        .collect())
}

pub fn write_captions(path: &Path, rows: &[(String, String)]) -> Result<()> {
    let mut text = String::new();
    for (id, cap) in rows {
        text.push_str(id);
        text.push('\t');
        text.push_str(cap);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
