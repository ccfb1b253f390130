//! Small pipelines and data for unit tests.

use crate::config::{parse_config, PipelineConfig, Task, Value};
use crate::pipeline::{build_pipeline, Pipeline};
use crate::preprocess::{Example, ShapeWorldOptions, Vocabulary};
use crate::registry::ModuleRegistry;
use crate::tasks::{build_examples, synthetic_items};

pub struct Fixture {
    pub vocab: Vocabulary,
    pub data: Vec<Example>,
}

pub fn data(task: Task, seed: u64, n: usize, n_regions: usize) -> Fixture {
    let items = synthetic_items(task, seed, n, n_regions, &ShapeWorldOptions::default()).unwrap();
    let (vocab, data) = build_examples(&items, 1, 16).unwrap();
    Fixture { vocab, data }
}

/// Config with the given stage choices, `hidden` everywhere and `extra`
/// appended verbatim.
pub fn config(task: Task, stages: [&str; 3], hidden: usize, vocab_size: usize, extra: &str) -> PipelineConfig {
    let [enc, inter, dec] = stages;
    let pre = if task == Task::Vlp { "pretraining = vlp\n" } else { "" };
    let text = format!(
        "[pipeline]\ntask = {}\nencoder = {enc}\ninteraction = {inter}\ndecoder = {dec}\n{pre}\
         [encoder]\nhidden = {hidden}\nlayers = 1\nheads = 2\n[decoder]\nhidden = {hidden}\nlayers = 1\nheads = 2\n\
         [interaction]\nheads = 2\n{extra}",
        task.as_str()
    );
    let mut cfg = parse_config(&text).unwrap();
    cfg.set("preprocessing", "vocab_size", Value::Int(vocab_size as i64)).unwrap();
    cfg
}

pub fn pipeline(cfg: &PipelineConfig, seed: u64) -> Pipeline {
    build_pipeline(cfg, &ModuleRegistry::with_defaults(), seed).unwrap()
}

/// Captioning pipeline and data with the default stage choices.
pub fn captioning(stages: [&str; 3], hidden: usize, extra: &str) -> (Pipeline, Fixture) {
    let f = data(Task::Captioning, 3, 6, 2);
    let cfg = config(Task::Captioning, stages, hidden, f.vocab.len(), extra);
    (pipeline(&cfg, 1), f)
}

/// Gradient check of `f` over every parameter of `p`.
pub fn check_pipeline<F>(p: &mut Pipeline, f: F) -> f64
where
    F: Fn(&Pipeline, &mut xmodal_tensor::Graph) -> crate::Result<xmodal_tensor::Var>,
{
    let mut store = std::mem::take(&mut p.params);
    let err = xmodal_tensor::gradient_check(&mut store, 1e-5, |g| f(p, g)).unwrap();
    p.params = store;
    err
}
