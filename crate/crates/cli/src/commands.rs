use std::fs;
use std::path::{Path, PathBuf};

use xmodal_core::checkpoint::load_checkpoint;
use xmodal_core::config::{parse_config, PipelineConfig, Task, Value};
use xmodal_core::dataset::{caption_examples, read_caption_dir, write_caption_dir, CaptionRecord};
use xmodal_core::metrics::corpus_scores;
use xmodal_core::pipeline::{build_pipeline, Pipeline};
use xmodal_core::preprocess::{
    build_vocabulary, detokenize, load_visual_features, read_captions, shape_world, tokenize, words, Example,
    ShapeWorldOptions, Vocabulary,
};
use xmodal_core::registry::ModuleRegistry;
use xmodal_core::tasks::{recall_at_k, retrieval_scores, synthetic_items, vcr_score, vqa_predict, TaskItem};
use xmodal_core::training::train_loop_with;
use xmodal_core::{Error, Result};

pub const VOCAB_FILE: &str = "vocab.txt";
pub const THREADS_VAR: &str = "XMODAL_THREADS";

pub fn preprocess(corpus: &Path, out: &Path, min_freq: usize, max_len: usize) -> Result<()> {
    if min_freq == 0 {
        return Err(Error::Invalid("--min-freq must be at least 1".into()));
    }
    let rows = read_captions(corpus)?;
    if rows.is_empty() {
        return Err(Error::Format(format!("{} has no captions", corpus.display())));
    }
    let captions: Vec<&str> = rows.iter().map(|(_, c)| c.as_str()).collect();
    let vocab = build_vocabulary(&captions, min_freq)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    vocab.write(&out.join(VOCAB_FILE))?;
    let mut text = String::new();
    for (id, caption) in &rows {
        let ids: Vec<String> = tokenize(caption, &vocab, max_len).ids.iter().map(usize::to_string).collect();
        text.push_str(&format!("{id}\t{}\n", ids.join(" ")));
    }
    let path = out.join("tokens.tsv");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    println!("vocab size {}", vocab.len());
    Ok(())
}

fn read_config(path: &Path) -> Result<PipelineConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

fn workers() -> Result<usize> {
    match std::env::var(THREADS_VAR) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Invalid(format!("{THREADS_VAR} must be a positive integer, got `{v}`"))),
        },
    }
}

/// Training and held-out splits named by the `[data]` section.
struct Splits {
    vocab: Vocabulary,
    train: Vec<Example>,
    val: Vec<Example>,
    /// Held-out captioning records, written for `eval`.
    val_records: Vec<CaptionRecord>,
}

fn load_splits(cfg: &PipelineConfig, config_path: &Path) -> Result<Splits> {
    let data = cfg.section("data");
    let prep = cfg.section("preprocessing");
    let max_len = prep.positive("max_len", 16)?;
    let min_freq = prep.positive("min_freq", 1)?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    let resolve = |p: String| -> PathBuf { base.join(p) };

    if let Some(dir) = data.get("dir").cloned() {
        if cfg.task != Task::Captioning {
            return Err(Error::config("data", "dir", "dataset directories hold captioning data"));
        }
        let Value::Str(dir) = dir else {
            return Err(Error::config("data", "dir", "expected a path"));
        };
        let train_records = read_caption_dir(&resolve(dir))?;
        let val_records = match data.get("val_dir") {
            Some(Value::Str(v)) => read_caption_dir(&resolve(v.clone()))?,
            Some(_) => return Err(Error::config("data", "val_dir", "expected a path")),
            None => Vec::new(),
        };
        let corpus: Vec<&str> = train_records.iter().flat_map(|r| r.captions.iter().map(String::as_str)).collect();
        let vocab = build_vocabulary(&corpus, min_freq)?;
        return Ok(Splits {
            train: caption_examples(&train_records, &vocab, max_len),
            val: caption_examples(&val_records, &vocab, max_len),
            vocab,
            val_records,
        });
    }

    let n_train = data.positive("n_train", 32)?;
    let n_val = data.usize("n_val", 64)?;
    let n_regions = data.positive("n_regions", 2)?;
    let seed = data.int("seed", 7)? as u64;
    let opts = ShapeWorldOptions::default();
    if cfg.task == Task::Captioning {
        let records: Vec<CaptionRecord> = shape_world(seed, n_train + n_val, n_regions, &opts)?
            .into_iter()
            .enumerate()
            .map(|(i, s)| CaptionRecord {
                id: format!("scene{i:05}"),
                visual: s.visual,
                captions: vec![s.caption],
            })
            .collect();
        let (train_records, val_records) = records.split_at(n_train);
        let corpus: Vec<&str> = train_records.iter().flat_map(|r| r.captions.iter().map(String::as_str)).collect();
        let vocab = build_vocabulary(&corpus, min_freq)?;
        return Ok(Splits {
            train: caption_examples(train_records, &vocab, max_len),
            val: caption_examples(val_records, &vocab, max_len),
            vocab,
            val_records: val_records.to_vec(),
        });
    }
    let items = synthetic_items(cfg.task, seed, n_train + n_val, n_regions, &opts)?;
    let (train_items, val_items) = items.split_at(n_train);
    let corpus: Vec<&str> = train_items.iter().flat_map(TaskItem::texts).collect();
    let vocab = build_vocabulary(&corpus, min_freq)?;
    Ok(Splits {
        train: train_items.iter().map(|it| it.to_example(&vocab, max_len)).collect(),
        val: val_items.iter().map(|it| it.to_example(&vocab, max_len)).collect(),
        vocab,
        val_records: Vec::new(),
    })
}

fn with_vocab(mut cfg: PipelineConfig, vocab: &Vocabulary) -> Result<PipelineConfig> {
    cfg.set("preprocessing", "vocab_size", Value::Int(vocab.len() as i64))?;
    Ok(cfg)
}

/// Held-out score reported after training, when the task has one.
fn held_out(p: &Pipeline, val: &[Example]) -> Result<Option<(&'static str, f64)>> {
    if val.is_empty() {
        return Ok(None);
    }
    let accuracy = |hits: usize| hits as f64 / val.len() as f64;
    Ok(match p.task() {
        Task::Vqa => {
            let mut hits = 0;
            for ex in val {
                let q = ex.question.as_ref().ok_or_else(|| Error::Invalid(format!("{} has no question", ex.id)))?;
                hits += usize::from(Some(vqa_predict(p, &ex.visual, q)?.0) == ex.answer);
            }
            Some(("accuracy", accuracy(hits)))
        }
        Task::Vcr => {
            let mut hits = 0;
            for ex in val {
                let q = ex.question.as_ref().ok_or_else(|| Error::Invalid(format!("{} has no question", ex.id)))?;
                hits += usize::from(Some(vcr_score(p, &ex.visual, q, &ex.choices)?.0) == ex.answer);
            }
            Some(("accuracy", accuracy(hits)))
        }
        Task::Retrieval => {
            let images: Vec<_> = val.iter().map(|e| &e.visual).collect();
            let captions: Vec<_> = val.iter().map(|e| &e.text).collect();
            Some(("recall@1", recall_at_k(&retrieval_scores(p, &images, &captions)?, 1)))
        }
        Task::Captioning | Task::Vlp => None,
    })
}

pub fn train(config: &Path, out: &Path, seed: u64) -> Result<()> {
    let cfg = read_config(config)?;
    let splits = load_splits(&cfg, config)?;
    let cfg = with_vocab(cfg, &splits.vocab)?;
    let mut p = build_pipeline(&cfg, &ModuleRegistry::with_defaults(), seed)?;
    match cfg.section("training").get("init_from") {
        Some(Value::Str(path)) => {
            let base = config.parent().unwrap_or(Path::new("."));
            load_checkpoint(&mut p, &base.join(path))?;
        }
        Some(_) => return Err(Error::config("training", "init_from", "expected a checkpoint path")),
        None => {}
    }
    let mut opts = p.train_options.clone();
    opts.workers = workers()?;

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    splits.vocab.write(&out.join(VOCAB_FILE))?;
    let rendered = out.join("config.txt");
    fs::write(&rendered, cfg.render()).map_err(|e| Error::io(&rendered, e))?;
    if !splits.val_records.is_empty() {
        write_caption_dir(&out.join("eval_data"), &splits.val_records)?;
    }

    println!(
        "task {} | {} training examples | vocab size {} | {} parameters",
        cfg.task.as_str(),
        splits.train.len(),
        splits.vocab.len(),
        p.params.num_scalars()
    );
    let outcome = train_loop_with(&mut p, &splits.train, &opts, Some(out))?;
    if let Some(last) = outcome.records.last() {
        println!("step {} loss {:.4}", last.step, last.loss);
    }
    if let Some((name, value)) = held_out(&p, &splits.val)? {
        println!("held-out {name} {value:.4}");
    }
    if let Some(path) = outcome.checkpoint {
        println!("checkpoint {}", path.display());
    }
    Ok(())
}

/// Pipeline for `config` with parameters from `ckpt`; the vocabulary is
/// read from the checkpoint's directory.
fn load_trained(config: &Path, ckpt: &Path) -> Result<(Pipeline, Vocabulary)> {
    let cfg = read_config(config)?;
    let dir = ckpt.parent().unwrap_or(Path::new("."));
    let vocab = Vocabulary::read(&dir.join(VOCAB_FILE))?;
    let cfg = with_vocab(cfg, &vocab)?;
    if cfg.task != Task::Captioning {
        return Err(Error::config("pipeline", "task", "eval and infer produce captions; use task = captioning"));
    }
    let mut p = build_pipeline(&cfg, &ModuleRegistry::with_defaults(), 0)?;
    load_checkpoint(&mut p, ckpt)?;
    Ok((p, vocab))
}

fn strategy(p: &Pipeline, beam: Option<usize>) -> Result<xmodal_core::decode::DecodeStrategy> {
    match beam {
        Some(width) => p.decode.with_beam(width),
        None => Ok(p.decode.clone()),
    }
}

pub fn eval(config: &Path, ckpt: &Path, data: &Path, beam: Option<usize>) -> Result<()> {
    let (p, vocab) = load_trained(config, ckpt)?;
    let decode = strategy(&p, beam)?;
    let records = read_caption_dir(data)?;
    let mut candidates = Vec::with_capacity(records.len());
    let mut references = Vec::with_capacity(records.len());
    for r in &records {
        let ids = p.generate(&r.visual, &decode)?;
        candidates.push(words(&detokenize(&ids, &vocab)?));
        references.push(r.captions.iter().map(|c| words(c)).collect::<Vec<_>>());
    }
    let scores = corpus_scores(&candidates, &references)?;
    println!("BLEU4 {:.4}", scores.bleu4);
    println!("ROUGEL {:.4}", scores.rouge_l);
    println!("CIDEr {:.4}", scores.cider_d);
    Ok(())
}

pub fn infer(config: &Path, ckpt: &Path, inputs: &[PathBuf], beam: Option<usize>) -> Result<()> {
    let (p, vocab) = load_trained(config, ckpt)?;
    let decode = strategy(&p, beam)?;
    let visuals: Vec<_> = inputs.iter().map(|path| load_visual_features(path)).collect::<Result<_>>()?;
    for v in &visuals {
        let ids = p.generate(v, &decode)?;
        println!("{}", detokenize(&ids, &vocab)?);
    }
    Ok(())
}
