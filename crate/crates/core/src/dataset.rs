//! Caption datasets on disk: `captions.tsv` with `id<TAB>caption` lines
//! (an id may repeat, one line per reference) and `features/<id>.xtns`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::preprocess::{
    load_visual_features, read_captions, save_visual_features, tokenize, Example, VisualTokens, Vocabulary,
};

pub const CAPTIONS: &str = "captions.tsv";
pub const FEATURES: &str = "features";

/// One image with its reference captions.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionRecord {
    pub id: String,
    pub visual: VisualTokens,
    pub captions: Vec<String>,
}

fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id != "."
        && id != ".."
        && id.bytes().all(|b| b.is_ascii_alphanumeric() || b"_-.".contains(&b));
    if ok {
        Ok(())
    } else {
        Err(Error::Format(format!("`{id}` is not a valid example id")))
    }
}

pub fn write_caption_dir(dir: &Path, records: &[CaptionRecord]) -> Result<()> {
    let features = dir.join(FEATURES);
    std::fs::create_dir_all(&features).map_err(|e| Error::io(&features, e))?;
    let mut rows = Vec::new();
    for r in records {
        check_id(&r.id)?;
        save_visual_features(&features.join(format!("{}.xtns", r.id)), &r.visual)?;
        rows.extend(r.captions.iter().map(|c| (r.id.clone(), c.clone())));
    }
    crate::preprocess::write_captions(&dir.join(CAPTIONS), &rows)
}

/// Records in order of first appearance in `captions.tsv`.
pub fn read_caption_dir(dir: &Path) -> Result<Vec<CaptionRecord>> {
    let rows = read_captions(&dir.join(CAPTIONS))?;
    let mut out: Vec<CaptionRecord> = Vec::new();
    for (id, caption) in rows {
        match out.iter_mut().find(|r| r.id == id) {
            Some(r) => r.captions.push(caption),
            None => {
                check_id(&id)?;
                let visual = load_visual_features(&dir.join(FEATURES).join(format!("{id}.xtns")))?;
                out.push(CaptionRecord {
                    id,
                    visual,
                    captions: vec![caption],
                });
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Format(format!("{} has no captions", dir.join(CAPTIONS).display())));
    }
    Ok(out)
}

/// One example per caption; each carries every reference of its image.
pub fn caption_examples(records: &[CaptionRecord], vocab: &Vocabulary, max_len: usize) -> Vec<Example> {
    let mut out = Vec::new();
    for r in records {
        let refs: Vec<Vec<usize>> = r.captions.iter().map(|c| tokenize(c, vocab, max_len).content()).collect();
        for (k, c) in r.captions.iter().enumerate() {
            let mut ex = Example::caption(format!("{}#{k}", r.id), r.visual.clone(), tokenize(c, vocab, max_len));
            ex.refs = refs.clone();
            out.push(ex);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::{build_vocabulary, make_synthetic_dataset};

    fn records() -> Vec<CaptionRecord> {
        make_synthetic_dataset(2, 3, 2)
            .unwrap()
            .into_iter()
            .enumerate()
            .map(|(i, (visual, c))| CaptionRecord {
                id: format!("img{i}"),
                visual,
                captions: vec![c, "a thing".into()],
            })
            .collect()
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let recs = records();
        write_caption_dir(dir.path(), &recs).unwrap();
        assert_eq!(read_caption_dir(dir.path()).unwrap(), recs);
    }

    #[test]
    fn examples_share_references() {
        let recs = records();
        let all: Vec<&str> = recs.iter().flat_map(|r| r.captions.iter().map(String::as_str)).collect();
        let vocab = build_vocabulary(&all, 1).unwrap();
        let ex = caption_examples(&recs, &vocab, 16);
        assert_eq!(ex.len(), 6);
        assert_eq!(ex[0].refs, ex[1].refs);
        assert_eq!(ex[1].text.content(), ex[0].refs[1]);
    }

    #[test]
    fn bad_ids_and_missing_features() {
        let dir = tempfile::tempdir().unwrap();
        let mut recs = records();
        recs[0].id = "../x".into();
        assert!(write_caption_dir(dir.path(), &recs).is_err());
        std::fs::write(dir.path().join(CAPTIONS), "ghost\ta red circle\n").unwrap();
        let msg = read_caption_dir(dir.path()).unwrap_err().to_string();
        assert!(msg.contains("ghost.xtns"), "{msg}");
    }
}
