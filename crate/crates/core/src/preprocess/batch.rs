use xmodal_tensor::Tensor;

use super::visual::VisualTokens;
use super::vocab::TokenSequence;
use crate::error::{Error, Result};

/// One training or evaluation item. Only the fields a task needs are set.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub visual: VisualTokens,
    pub text: TokenSequence,
    /// Reference captions as content ids (no `<bos>`/`<eos>`).
    pub refs: Vec<Vec<usize>>,
    pub question: Option<TokenSequence>,
    pub answer: Option<usize>,
    pub choices: Vec<TokenSequence>,
}

impl Example {
    pub fn caption(id: impl Into<String>, visual: VisualTokens, text: TokenSequence) -> Self {
        let refs = vec![text.content()];
        Self {
            id: id.into(),
            visual,
            text,
            refs,
            question: None,
            answer: None,
            choices: Vec::new(),
        }
    }
}

/// Examples padded to common region and token counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    /// Features padded with zero rows; `global` and `edges` are untouched.
    pub visual: Vec<VisualTokens>,
    pub region_mask: Vec<Vec<bool>>,
    pub text: Vec<TokenSequence>,
    pub refs: Vec<Vec<Vec<usize>>>,
    pub questions: Vec<Option<TokenSequence>>,
    pub answers: Vec<Option<usize>>,
    pub choices: Vec<Vec<TokenSequence>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn max_regions(&self) -> usize {
        self.region_mask.first().map_or(0, Vec::len)
    }

    pub fn max_len(&self) -> usize {
        self.text.first().map_or(0, TokenSequence::len)
    }
}

fn pad_text(t: &TokenSequence, len: usize, pad_id: usize) -> TokenSequence {
    let mut ids = t.ids.clone();
    let mut mask = t.mask.clone();
    ids.resize(len, pad_id);
    mask.resize(len, false);
    TokenSequence {
        ids,
        mask,
        text: t.text.clone(),
    }
}

pub fn collate(examples: &[&Example], pad_id: usize) -> Result<Batch> {
    let first = examples
        .first()
        .ok_or_else(|| Error::Invalid("cannot collate an empty list".into()))?;
    let d = first.visual.dim();
    if let Some(bad) = examples.iter().find(|e| e.visual.dim() != d) {
        return Err(Error::Invalid(format!(
            "example `{}` has feature dim {} but `{}` has {d}",
            bad.id,
            bad.visual.dim(),
            first.id
        )));
    }
    let n_max = examples.iter().map(|e| e.visual.regions()).max().unwrap_or(0);
    let t_max = examples.iter().map(|e| e.text.len()).max().unwrap_or(0);
    let mut batch = Batch {
        ids: Vec::new(),
        visual: Vec::new(),
        region_mask: Vec::new(),
        text: Vec::new(),
        refs: Vec::new(),
        questions: Vec::new(),
        answers: Vec::new(),
        choices: Vec::new(),
    };
    for e in examples {
        let n = e.visual.regions();
        let mut data = e.visual.features.data().to_vec();
        data.resize(n_max * d, 0.0);
        batch.visual.push(VisualTokens {
            features: Tensor::matrix(n_max, d, data)?,
            edges: e.visual.edges.clone(),
            global: e.visual.global.clone(),
        });
        batch.region_mask.push((0..n_max).map(|i| i < n).collect());
        batch.text.push(pad_text(&e.text, t_max, pad_id));
        batch.ids.push(e.id.clone());
        batch.refs.push(e.refs.clone());
        batch.questions.push(e.question.clone());
        batch.answers.push(e.answer);
        batch.choices.push(e.choices.clone());
    }
    Ok(batch)
}
