//! Task heads over the shared stages: VQA, retrieval, VCR and the
//! vision-language pre-training objectives, plus synthetic data for each.

use rand::seq::index::sample;
use rand::Rng;
use xmodal_tensor::rng::{stream, SplitMix64};
use xmodal_tensor::{Graph, Tensor, Var};

use crate::config::{PipelineConfig, SectionView, Task};
use crate::encoders::EncoderOutput;
use crate::error::{Error, Result};
use crate::nn::{Linear, ParamInit};
use crate::pipeline::Pipeline;
use crate::preprocess::synthetic::render_scene;
use crate::preprocess::{
    shape_world, tokenize, Example, ShapeWorldOptions, TokenSequence, VisualTokens, Vocabulary, COLORS, EOS, RESERVED,
    SHAPES, UNK,
};
use crate::training::cross_entropy_loss;

/// Weights and corruption rates of the pre-training objectives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VlpObjectives {
    pub w_mlm: f64,
    pub w_msg: f64,
    pub w_vsm: f64,
    pub mask_rate: f64,
    pub span_rate: f64,
}

impl VlpObjectives {
    pub fn from_section(s: &SectionView) -> Result<Self> {
        let weight = |k: &str| -> Result<f64> {
            let w = s.real(k, 1.0)?;
            if w < 0.0 {
                return Err(Error::config(s.name(), k, "objective weights must be nonnegative"));
            }
            Ok(w)
        };
        let rate = |k: &str, d: f64| -> Result<f64> {
            let r = s.real(k, d)?;
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::config(s.name(), k, "must be in (0, 1)"));
            }
            Ok(r)
        };
        Ok(Self {
            w_mlm: weight("w_mlm")?,
            w_msg: weight("w_msg")?,
            w_vsm: weight("w_vsm")?,
            mask_rate: rate("mask_rate", 0.15)?,
            span_rate: rate("span_rate", 0.3)?,
        })
    }

    pub fn weights(&self) -> [f64; 3] {
        [self.w_mlm, self.w_msg, self.w_vsm]
    }
}

/// Task-specific parameters on top of the shared stages.
#[derive(Clone, Debug)]
pub enum TaskHead {
    /// Captioning and pre-training reuse the vocabulary head.
    None,
    /// Single affine layer over `[attended visual; question]`.
    Vqa { classifier: Linear, n_answers: usize },
    Retrieval { temperature: f64 },
    /// Scalar score per `(question ⊕ choice)` pairing.
    Vcr { scorer: Linear },
}

impl TaskHead {
    pub fn new(init: &mut ParamInit, cfg: &PipelineConfig, width: usize) -> Result<Self> {
        Ok(match cfg.task {
            Task::Captioning | Task::Vlp => TaskHead::None,
            Task::Vqa => {
                let n_answers = cfg.section("vqa").positive("n_answers", COLORS.len())?;
                TaskHead::Vqa {
                    classifier: Linear::new(init, "vqa.classifier", 2 * width, n_answers, true)?,
                    n_answers,
                }
            }
            Task::Retrieval => {
                let s = cfg.section("retrieval");
                let temperature = s.real("temperature", 1.0)?;
                if temperature <= 0.0 {
                    return Err(Error::config("retrieval", "temperature", "must be positive"));
                }
                TaskHead::Retrieval { temperature }
            }
            Task::Vcr => TaskHead::Vcr {
                scorer: Linear::new(init, "vcr.scorer", 2 * width, 1, true)?,
            },
        })
    }
}

/// `[attend(question, visual); question]` after cross-modal fusion.
fn joint_representation(p: &Pipeline, g: &mut Graph, visual: &VisualTokens, text: &[usize]) -> Result<Var> {
    let v = p.encode_visual(g, visual, None)?;
    let t = p.encode_text(g, text)?;
    let (v, t) = p.interaction.fuse(g, v, t)?;
    let att = p.interaction.attend(g, t.global, &v)?;
    Ok(g.concat(&[att.context, t.global], 0)?)
}

fn argmax_low(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// VQA answer logits, `[n_answers]`.
pub fn vqa_logits(p: &Pipeline, g: &mut Graph, visual: &VisualTokens, question: &TokenSequence) -> Result<Var> {
    let TaskHead::Vqa { classifier, .. } = &p.task_head else {
        return Err(Error::Invalid("pipeline was not built for vqa".into()));
    };
    let rep = joint_representation(p, g, visual, &question.ids)?;
    classifier.forward(g, rep)
}

/// Answer id (lowest id on ties) and the softmax scores.
pub fn vqa_predict(p: &Pipeline, visual: &VisualTokens, question: &TokenSequence) -> Result<(usize, Vec<f64>)> {
    let mut g = Graph::new(&p.params);
    let logits = vqa_logits(p, &mut g, visual, question)?;
    let probs = g.softmax(logits, 0, None)?;
    let scores = g.value(probs).to_vec();
    Ok((argmax_low(&scores), scores))
}

fn require<'e, T>(v: &'e Option<T>, what: &str, id: &str) -> Result<&'e T> {
    v.as_ref().ok_or_else(|| Error::Invalid(format!("example {id} has no {what}")))
}

/// Mean answer cross entropy over `examples`.
pub fn vqa_loss(p: &Pipeline, g: &mut Graph, examples: &[&Example]) -> Result<Var> {
    let mut rows = Vec::with_capacity(examples.len());
    let mut targets = Vec::with_capacity(examples.len());
    for ex in examples {
        let q = require(&ex.question, "question", &ex.id)?;
        let logits = vqa_logits(p, g, &ex.visual, q)?;
        let n = g.shape(logits)[0];
        rows.push(g.reshape(logits, &[1, n])?);
        targets.push(*require(&ex.answer, "answer", &ex.id)?);
    }
    let logits = g.concat(&rows, 0)?;
    cross_entropy_loss(g, logits, &targets, &vec![true; targets.len()])
}

/// Pooled image representation used for matching.
pub fn pooled_visual(p: &Pipeline, g: &mut Graph, visual: &VisualTokens) -> Result<Var> {
    Ok(p.encode_visual(g, visual, None)?.global)
}

/// Pooled sentence representation used for matching.
pub fn pooled_text(p: &Pipeline, g: &mut Graph, ids: &[usize]) -> Result<Var> {
    Ok(p.encode_text(g, ids)?.global)
}

/// `S[i][j] = dot(visual_i, sentence_j)` from stacked `[B x d]` rows.
pub fn similarity(g: &mut Graph, visual: Var, text: Var) -> Result<Var> {
    let tt = g.transpose(text)?;
    Ok(g.matmul(visual, tt)?)
}

/// Symmetric in-batch cross entropy with the diagonal as targets.
pub fn matching_loss(g: &mut Graph, scores: Var) -> Result<Var> {
    let b = g.shape(scores)[0];
    let targets: Vec<usize> = (0..b).collect();
    let mask = vec![true; b];
    let rows = cross_entropy_loss(g, scores, &targets, &mask)?;
    let st = g.transpose(scores)?;
    let cols = cross_entropy_loss(g, st, &targets, &mask)?;
    let both = g.add(rows, cols)?;
    Ok(g.scale(both, 0.5)?)
}

fn stack(g: &mut Graph, rows: &[Var]) -> Result<Var> {
    crate::nn::stack_rows(g, rows)
}

/// Retrieval score matrix over all image/caption pairs.
pub fn retrieval_scores(p: &Pipeline, images: &[&VisualTokens], captions: &[&TokenSequence]) -> Result<Tensor> {
    if images.is_empty() || captions.is_empty() {
        return Err(Error::Invalid("retrieval needs at least one image and one caption".into()));
    }
    let mut g = Graph::new(&p.params);
    let v: Vec<Var> = images.iter().map(|im| pooled_visual(p, &mut g, im)).collect::<Result<_>>()?;
    let t: Vec<Var> = captions.iter().map(|c| pooled_text(p, &mut g, &c.ids)).collect::<Result<_>>()?;
    let (v, t) = (stack(&mut g, &v)?, stack(&mut g, &t)?);
    let s = similarity(&mut g, v, t)?;
    Ok(g.tensor(s))
}

/// Fraction of rows whose diagonal entry ranks in the top `k`; equal scores
/// rank the lower column first.
pub fn recall_at_k(scores: &Tensor, k: usize) -> f64 {
    let [n, m] = *scores.shape() else { return 0.0 };
    let rows = n.min(m);
    if rows == 0 {
        return 0.0;
    }
    let hits = (0..rows)
        .filter(|&i| {
            let r = scores.row(i);
            let rank = (0..m).filter(|&j| r[j] > r[i] || (r[j] == r[i] && j < i)).count();
            rank < k
        })
        .count();
    hits as f64 / rows as f64
}

/// In-batch matching loss over paired images and captions.
pub fn retrieval_loss(p: &Pipeline, g: &mut Graph, examples: &[&Example]) -> Result<Var> {
    let temperature = match &p.task_head {
        TaskHead::Retrieval { temperature } => *temperature,
        _ => 1.0,
    };
    let s = batch_similarity(p, g, examples)?;
    let s = g.scale(s, 1.0 / temperature)?;
    matching_loss(g, s)
}

fn batch_similarity(p: &Pipeline, g: &mut Graph, examples: &[&Example]) -> Result<Var> {
    let v: Vec<Var> = examples.iter().map(|e| pooled_visual(p, g, &e.visual)).collect::<Result<_>>()?;
    let t: Vec<Var> = examples.iter().map(|e| pooled_text(p, g, &e.text.ids)).collect::<Result<_>>()?;
    let (v, t) = (stack(g, &v)?, stack(g, &t)?);
    similarity(g, v, t)
}

/// `question ⊕ choice`: the question without its `<eos>`, then the choice.
pub fn pair_ids(question: &TokenSequence, choice: &TokenSequence) -> Vec<usize> {
    let mut ids: Vec<usize> = question.ids.iter().copied().take_while(|&t| t != EOS).collect();
    ids.extend(choice.content());
    ids.push(EOS);
    ids
}

/// Raw scores for the four choices, `[4]`.
pub fn vcr_logits(
    p: &Pipeline,
    g: &mut Graph,
    visual: &VisualTokens,
    question: &TokenSequence,
    choices: &[TokenSequence],
) -> Result<Var> {
    let TaskHead::Vcr { scorer } = &p.task_head else {
        return Err(Error::Invalid("pipeline was not built for vcr".into()));
    };
    if choices.len() != 4 {
        return Err(Error::Invalid(format!("vcr needs exactly 4 choices, got {}", choices.len())));
    }
    let mut scores = Vec::with_capacity(4);
    for c in choices {
        let rep = joint_representation(p, g, visual, &pair_ids(question, c))?;
        scores.push(scorer.forward(g, rep)?);
    }
    Ok(g.concat(&scores, 0)?)
}

/// Chosen slot (lowest on ties) and softmax scores over the four choices.
pub fn vcr_score(
    p: &Pipeline,
    visual: &VisualTokens,
    question: &TokenSequence,
    choices: &[TokenSequence],
) -> Result<(usize, Vec<f64>)> {
    let mut g = Graph::new(&p.params);
    let logits = vcr_logits(p, &mut g, visual, question, choices)?;
    let probs = g.softmax(logits, 0, None)?;
    let scores = g.value(probs).to_vec();
    Ok((argmax_low(&scores), scores))
}

pub fn vcr_loss(p: &Pipeline, g: &mut Graph, examples: &[&Example]) -> Result<Var> {
    let mut rows = Vec::with_capacity(examples.len());
    let mut targets = Vec::with_capacity(examples.len());
    for ex in examples {
        let q = require(&ex.question, "question", &ex.id)?;
        let logits = vcr_logits(p, g, &ex.visual, q, &ex.choices)?;
        rows.push(g.reshape(logits, &[1, 4])?);
        targets.push(*require(&ex.answer, "answer", &ex.id)?);
    }
    let logits = g.concat(&rows, 0)?;
    cross_entropy_loss(g, logits, &targets, &vec![true; targets.len()])
}

fn content_positions(ids: &[usize]) -> Vec<usize> {
    (0..ids.len()).filter(|&i| ids[i] >= RESERVED.len()).collect()
}

/// Masked-token corruption: `min(ceil(rate * L), L - 1)` content positions,
/// each replaced by `<unk>` (80%), a random content token (10%) or kept.
pub fn mlm_corrupt(ids: &[usize], rate: f64, vocab_size: usize, rng: &mut SplitMix64) -> (Vec<usize>, Vec<usize>) {
    let content = content_positions(ids);
    let l = content.len();
    let count = ((rate * l as f64).ceil() as usize).min(l.saturating_sub(1));
    let mut picked: Vec<usize> = sample(rng, l, count).into_iter().map(|i| content[i]).collect();
    picked.sort_unstable();
    let mut out = ids.to_vec();
    for &i in &picked {
        let u: f64 = rng.gen();
        if u < 0.8 {
            out[i] = UNK;
        } else if u < 0.9 && vocab_size > RESERVED.len() {
            out[i] = rng.gen_range(RESERVED.len()..vocab_size);
        }
    }
    (out, picked)
}

/// Masked language modelling on one sentence; 0 when nothing is masked.
pub fn mlm_loss(p: &Pipeline, g: &mut Graph, visual: &VisualTokens, ids: &[usize], rate: f64, rng: &mut SplitMix64) -> Result<Var> {
    let (corrupted, positions) = mlm_corrupt(ids, rate, p.vocab_size(), rng);
    if positions.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let v = p.encode_visual(g, visual, None)?;
    let t = p.encode_text(g, &corrupted)?;
    let (_, t) = p.interaction.fuse(g, v, t)?;
    let rows: Vec<Var> = positions
        .iter()
        .map(|&i| crate::nn::row(g, t.states, i))
        .collect::<Result<_>>()?;
    let h = stack(g, &rows)?;
    let logits = p.head.project(g, h)?;
    let targets: Vec<usize> = positions.iter().map(|&i| ids[i]).collect();
    cross_entropy_loss(g, logits, &targets, &vec![true; targets.len()])
}

/// `(start, len)` over content tokens: `len = ceil(rate * L)`, start uniform.
pub fn msg_span(content_len: usize, rate: f64, rng: &mut SplitMix64) -> (usize, usize) {
    let len = ((rate * content_len as f64).ceil() as usize).min(content_len);
    let start = rng.gen_range(0..=content_len - len);
    (start, len)
}

/// Reconstructs `ids` from the image and a copy of the sentence whose
/// content tokens `span.0 .. span.0 + span.1` are replaced by `<unk>`.
pub fn msg_loss_with_span(p: &Pipeline, g: &mut Graph, visual: &VisualTokens, ids: &[usize], span: (usize, usize)) -> Result<Var> {
    let content = content_positions(ids);
    if span.0 + span.1 > content.len() {
        return Err(Error::Invalid(format!(
            "span {span:?} outside {} content tokens",
            content.len()
        )));
    }
    let mut corrupted = ids.to_vec();
    for &i in &content[span.0..span.0 + span.1] {
        corrupted[i] = UNK;
    }
    let v = p.encode_visual(g, visual, None)?;
    let t = p.encode_text(g, &corrupted)?;
    let (v, t) = p.interaction.fuse(g, v, t)?;
    let states = g.concat(&[v.states, t.states], 0)?;
    let mask: Vec<bool> = v.mask.iter().chain(&t.mask).copied().collect();
    let memory = EncoderOutput::new(g, states, mask)?;
    caption_loss_on(p, g, &memory, ids)
}

pub fn msg_loss(p: &Pipeline, g: &mut Graph, visual: &VisualTokens, ids: &[usize], rate: f64, rng: &mut SplitMix64) -> Result<Var> {
    let span = msg_span(content_positions(ids).len(), rate, rng);
    msg_loss_with_span(p, g, visual, ids, span)
}

/// Teacher-forced token cross entropy of `ids` given `memory`.
pub fn caption_loss_on(p: &Pipeline, g: &mut Graph, memory: &EncoderOutput, ids: &[usize]) -> Result<Var> {
    if ids.len() < 2 {
        return Err(Error::Invalid("caption needs at least <bos> and one token".into()));
    }
    let logits = p.caption_logits(g, memory, &ids[..ids.len() - 1])?;
    let targets = &ids[1..];
    let mask: Vec<bool> = targets.iter().map(|&t| t != crate::preprocess::PAD).collect();
    cross_entropy_loss(g, logits, targets, &mask)
}

/// Visual-sentence matching over a batch of aligned pairs.
pub fn vsm_loss(p: &Pipeline, g: &mut Graph, examples: &[&Example]) -> Result<Var> {
    let s = batch_similarity(p, g, examples)?;
    matching_loss(g, s)
}

fn mean(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let parts: Vec<Var> = terms
        .iter()
        .map(|&t| g.reshape(t, &[1]))
        .collect::<std::result::Result<_, _>>()?;
    let all = g.concat(&parts, 0)?;
    Ok(g.mean(all)?)
}

/// The three objectives on a batch, each drawing from its own stream keyed
/// by `(seed, step, example)`. Objectives with weight 0 are skipped.
pub fn vlp_objectives(
    p: &Pipeline,
    g: &mut Graph,
    examples: &[&Example],
    weights: [f64; 3],
    seed: u64,
    step: usize,
) -> Result<[Option<Var>; 3]> {
    let obj = p.pretraining.unwrap_or(VlpObjectives {
        w_mlm: 1.0,
        w_msg: 1.0,
        w_vsm: 1.0,
        mask_rate: 0.15,
        span_rate: 0.3,
    });
    let mut out = [None, None, None];
    if weights[0] != 0.0 {
        let mut terms = Vec::with_capacity(examples.len());
        for (i, ex) in examples.iter().enumerate() {
            let mut rng = stream(seed, "mlm", &[step as u64, i as u64]);
            terms.push(mlm_loss(p, g, &ex.visual, &ex.text.ids, obj.mask_rate, &mut rng)?);
        }
        out[0] = Some(mean(g, &terms)?);
    }
    if weights[1] != 0.0 {
        let mut terms = Vec::with_capacity(examples.len());
        for (i, ex) in examples.iter().enumerate() {
            let mut rng = stream(seed, "msg", &[step as u64, i as u64]);
            terms.push(msg_loss(p, g, &ex.visual, &ex.text.ids, obj.span_rate, &mut rng)?);
        }
        out[1] = Some(mean(g, &terms)?);
    }
    if weights[2] != 0.0 {
        out[2] = Some(vsm_loss(p, g, examples)?);
    }
    Ok(out)
}

/// `w_mlm * MLM + w_msg * MSG + w_vsm * VSM`.
pub fn vlp_pretrain_step(
    p: &Pipeline,
    g: &mut Graph,
    examples: &[&Example],
    weights: [f64; 3],
    seed: u64,
    step: usize,
) -> Result<Var> {
    if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
        return Err(Error::Invalid(format!("objective weights must be nonnegative, got {weights:?}")));
    }
    let losses = vlp_objectives(p, g, examples, weights, seed, step)?;
    let mut total: Option<Var> = None;
    for (l, w) in losses.iter().zip(weights) {
        if let Some(l) = l {
            let term = g.scale(*l, w)?;
            total = Some(match total {
                None => term,
                Some(t) => g.add(t, term)?,
            });
        }
    }
    Ok(total.unwrap_or_else(|| g.constant(Tensor::scalar(0.0))))
}

/// One synthetic item before tokenization.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskItem {
    pub id: String,
    pub visual: VisualTokens,
    pub caption: String,
    pub question: Option<String>,
    pub answer: Option<usize>,
    pub choices: Vec<String>,
}

impl TaskItem {
    /// Every sentence the item contributes to a vocabulary.
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.caption.as_str())
            .chain(self.question.as_deref())
            .chain(self.choices.iter().map(String::as_str))
    }

    pub fn to_example(&self, vocab: &Vocabulary, max_len: usize) -> Example {
        let mut ex = Example::caption(self.id.clone(), self.visual.clone(), tokenize(&self.caption, vocab, max_len));
        ex.question = self.question.as_ref().map(|q| tokenize(q, vocab, max_len));
        ex.answer = self.answer;
        ex.choices = self.choices.iter().map(|c| tokenize(c, vocab, max_len)).collect();
        ex
    }
}

/// Shape-world items for `task`. Item `i` depends only on `(seed, i)`.
pub fn synthetic_items(task: Task, seed: u64, n: usize, n_regions: usize, opts: &ShapeWorldOptions) -> Result<Vec<TaskItem>> {
    if n < 1 || n_regions < 2 {
        return Err(Error::Invalid(format!(
            "synthetic data needs n >= 1 and n_regions >= 2, got n = {n}, n_regions = {n_regions}"
        )));
    }
    match task {
        Task::Captioning | Task::Vlp | Task::Retrieval => Ok(shape_world(seed, n, n_regions, opts)?
            .into_iter()
            .enumerate()
            .map(|(i, s)| TaskItem {
                id: format!("scene{i:05}"),
                visual: s.visual,
                caption: s.caption,
                question: None,
                answer: None,
                choices: Vec::new(),
            })
            .collect()),
        Task::Vqa => (0..n).map(|i| vqa_item(seed, i, n_regions, opts)).collect(),
        Task::Vcr => {
            if n_regions > COLORS.len() * SHAPES.len() - 3 {
                return Err(Error::Invalid(format!("vcr scenes need at most 6 regions, got {n_regions}")));
            }
            (0..n).map(|i| vcr_item(seed, i, n_regions, opts)).collect()
        }
    }
}

/// "what color is the <shape>" where the shape occurs exactly once.
fn vqa_item(seed: u64, i: usize, n_regions: usize, opts: &ShapeWorldOptions) -> Result<TaskItem> {
    let mut rng = stream(seed, "vqa", &[i as u64]);
    let target = rng.gen_range(0..n_regions);
    let shape = rng.gen_range(0..SHAPES.len());
    let colors: Vec<usize> = (0..n_regions).map(|_| rng.gen_range(0..COLORS.len())).collect();
    let shapes: Vec<usize> = (0..n_regions)
        .map(|r| {
            if r == target {
                shape
            } else {
                (shape + rng.gen_range(1..SHAPES.len())) % SHAPES.len()
            }
        })
        .collect();
    let answer = colors[target];
    let scene = render_scene(colors, shapes, opts, &mut rng)?;
    Ok(TaskItem {
        id: format!("vqa{i:05}"),
        visual: scene.visual,
        caption: scene.caption,
        question: Some(format!("what color is the {}", SHAPES[shape])),
        answer: Some(answer),
        choices: Vec::new(),
    })
}

/// "which object is shown" with one present and three absent objects.
fn vcr_item(seed: u64, i: usize, n_regions: usize, opts: &ShapeWorldOptions) -> Result<TaskItem> {
    let mut rng = stream(seed, "vcr", &[i as u64]);
    let colors: Vec<usize> = (0..n_regions).map(|_| rng.gen_range(0..COLORS.len())).collect();
    let shapes: Vec<usize> = (0..n_regions).map(|_| rng.gen_range(0..SHAPES.len())).collect();
    let present: Vec<(usize, usize)> = colors.iter().copied().zip(shapes.iter().copied()).collect();
    let target = present[rng.gen_range(0..n_regions)];
    let absent: Vec<(usize, usize)> = (0..COLORS.len())
        .flat_map(|c| (0..SHAPES.len()).map(move |s| (c, s)))
        .filter(|pair| !present.contains(pair))
        .collect();
    let mut options: Vec<(usize, usize)> = sample(&mut rng, absent.len(), 3).into_iter().map(|k| absent[k]).collect();
    let answer = rng.gen_range(0..4);
    options.insert(answer, target);
    let scene = render_scene(colors, shapes, opts, &mut rng)?;
    Ok(TaskItem {
        id: format!("vcr{i:05}"),
        visual: scene.visual,
        caption: scene.caption,
        question: Some("which object is shown".into()),
        answer: Some(answer),
        choices: options.iter().map(|&(c, s)| format!("a {} {}", COLORS[c], SHAPES[s])).collect(),
    })
}

/// Vocabulary over every sentence of `items`, and the tokenized examples.
pub fn build_examples(items: &[TaskItem], min_freq: usize, max_len: usize) -> Result<(Vocabulary, Vec<Example>)> {
    let corpus: Vec<&str> = items.iter().flat_map(TaskItem::texts).collect();
    let vocab = crate::preprocess::build_vocabulary(&corpus, min_freq)?;
    let examples = items.iter().map(|it| it.to_example(&vocab, max_len)).collect();
    Ok((vocab, examples))
}
