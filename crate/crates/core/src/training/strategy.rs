//! Per-batch losses for each training strategy and task.

use rand::Rng;
use xmodal_tensor::rng::stream;
use xmodal_tensor::{Graph, Var};

use super::loss::{cross_entropy_loss, label_smoothing_loss};
use super::{Reward, TrainingStrategy};
use crate::config::Task;
use crate::decode::{best_allowed, greedy_decode, sample_decode, StepModel};
use crate::error::{Error, Result};
use crate::metrics::{bleu4, cider_d, CiderIdf};
use crate::pipeline::Pipeline;
use crate::preprocess::{Example, BOS, EOS, PAD};
use crate::tasks::{retrieval_loss, vcr_loss, vlp_pretrain_step, vqa_loss};

/// Token cross entropy (or label smoothing when `epsilon > 0`) of each
/// example's caption, fed `inputs[i]` instead of the ground truth prefix
/// when given. The mean runs over every real target token in the batch.
pub fn caption_batch_loss(
    p: &Pipeline,
    g: &mut Graph,
    examples: &[&Example],
    inputs: Option<&[Vec<usize>]>,
    epsilon: f64,
) -> Result<Var> {
    if examples.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let mut rows = Vec::with_capacity(examples.len());
    let mut targets = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        let ids = &ex.text.ids;
        if ids.len() < 2 {
            return Err(Error::Invalid(format!("caption of {} has no target tokens", ex.id)));
        }
        let input = match inputs {
            Some(all) => all[i].as_slice(),
            None => &ids[..ids.len() - 1],
        };
        let enc = p.encode_visual(g, &ex.visual, None)?;
        rows.push(p.caption_logits(g, &enc, input)?);
        targets.extend_from_slice(&ids[1..]);
    }
    let logits = g.concat(&rows, 0)?;
    let mask: Vec<bool> = targets.iter().map(|&t| t != PAD).collect();
    if epsilon == 0.0 {
        cross_entropy_loss(g, logits, &targets, &mask)
    } else {
        label_smoothing_loss(g, logits, &targets, &mask, epsilon)
    }
}

/// Decoder inputs under scheduled sampling: position 0 is `<bos>`; each
/// later input is the ground truth token with probability `p_tf`, otherwise
/// the argmax of the model's previous-step distribution.
pub fn scheduled_sampling_inputs<R: Rng>(p: &Pipeline, ex: &Example, p_tf: f64, rng: &mut R) -> Result<Vec<usize>> {
    let ids = &ex.text.ids;
    let n = ids.len() - 1;
    if p_tf >= 1.0 {
        return Ok(ids[..n].to_vec());
    }
    let mut model = p.stepper(&ex.visual)?;
    let mut state = model.start()?;
    let mut inputs = vec![ids[0]];
    for t in 0..n - 1 {
        let (logp, next) = model.step(&state, inputs[t])?;
        let coin: f64 = rng.gen();
        inputs.push(if coin < p_tf { ids[t + 1] } else { best_allowed(&logp)? });
        state = next;
    }
    Ok(inputs)
}

pub fn scheduled_sampling_loss(
    p: &Pipeline,
    g: &mut Graph,
    examples: &[&Example],
    p_tf: f64,
    seed: u64,
    step: usize,
) -> Result<Var> {
    let inputs: Vec<Vec<usize>> = examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut rng = stream(seed, "scheduled_sampling", &[step as u64, i as u64]);
            scheduled_sampling_inputs(p, ex, p_tf, &mut rng)
        })
        .collect::<Result<_>>()?;
    caption_batch_loss(p, g, examples, Some(&inputs), 0.0)
}

/// Sentence reward against content-id references.
#[derive(Clone, Debug)]
pub struct RewardFn {
    kind: Reward,
    idf: CiderIdf<usize>,
}

impl RewardFn {
    /// `corpus` holds each training image's references; CIDEr-D takes its
    /// document frequencies from it.
    pub fn new(kind: Reward, corpus: &[Vec<Vec<usize>>]) -> Result<Self> {
        Ok(Self {
            kind,
            idf: CiderIdf::new(corpus)?,
        })
    }

    pub fn score(&self, candidate: &[usize], refs: &[Vec<usize>]) -> f64 {
        match self.kind {
            Reward::CiderD => cider_d(candidate, refs, &self.idf),
            Reward::Bleu4 => bleu4(candidate, refs),
        }
    }
}

/// Content ids of a decoded sequence.
pub fn content_of(ids: &[usize]) -> Vec<usize> {
    ids.iter()
        .copied()
        .skip_while(|&t| t == BOS)
        .take_while(|&t| t != EOS)
        .collect()
}

/// Runs `f` over `items` on up to `workers` threads; results keep input order.
pub fn parallel_map<T: Sync, U: Send, F: Fn(&T) -> U + Sync>(items: &[T], workers: usize, f: F) -> Vec<U> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<U>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("reward worker panicked"))
            .collect()
    })
}

/// `-(r_sampled - r_greedy) * log_prob` for one example.
pub fn self_critical_term(g: &mut Graph, log_prob: Var, sampled_reward: f64, greedy_reward: f64) -> Result<Var> {
    Ok(g.scale(log_prob, -(sampled_reward - greedy_reward))?)
}

/// Self-critical loss: per example a sampled caption scored against the
/// greedy caption, `-(r_s - r_g) * sum_t log p(w_t)`, averaged. Returns the
/// loss and the mean sampled reward.
#[allow(clippy::too_many_arguments)]
pub fn scst_loss<F>(
    p: &Pipeline,
    g: &mut Graph,
    examples: &[&Example],
    reward: F,
    seed: u64,
    step: usize,
    workers: usize,
) -> Result<(Var, f64)>
where
    F: Fn(&[usize], &[Vec<usize>]) -> f64 + Sync,
{
    let max_len = p.decode.max_len;
    let mut pairs = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let mut rng = stream(seed, "scst", &[step as u64, i as u64]);
        let sampled = sample_decode(&mut p.stepper(&ex.visual)?, max_len, &mut rng)?;
        let greedy = greedy_decode(&mut p.stepper(&ex.visual)?, max_len)?;
        pairs.push((sampled, greedy, &ex.refs));
    }
    let rewards = parallel_map(&pairs, workers, |(s, gr, refs)| {
        (reward(&content_of(s), refs), reward(&content_of(gr), refs))
    });
    let mut terms = Vec::with_capacity(examples.len());
    for (((sampled, _, _), (r_s, r_g)), ex) in pairs.iter().zip(&rewards).zip(examples) {
        let enc = p.encode_visual(g, &ex.visual, None)?;
        let logits = p.caption_logits(g, &enc, &sampled[..sampled.len() - 1])?;
        let lsm = g.log_softmax(logits, 1)?;
        let v = p.vocab_size();
        let idx: Vec<usize> = sampled[1..].iter().enumerate().map(|(t, &w)| t * v + w).collect();
        let picked = g.pick(lsm, &idx)?;
        let logp = g.sum(picked)?;
        let term = self_critical_term(g, logp, *r_s, *r_g)?;
        terms.push(g.reshape(term, &[1])?);
    }
    let all = g.concat(&terms, 0)?;
    let loss = g.mean(all)?;
    let mean_reward = rewards.iter().map(|r| r.0).sum::<f64>() / rewards.len() as f64;
    Ok((loss, mean_reward))
}

/// The loss a training step minimizes for the pipeline's task and strategy.
pub struct StepLoss {
    pub loss: Var,
    pub reward: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn batch_loss(
    p: &Pipeline,
    g: &mut Graph,
    examples: &[&Example],
    p_tf: f64,
    reward: Option<&RewardFn>,
    seed: u64,
    step: usize,
    workers: usize,
) -> Result<StepLoss> {
    let plain = |loss| Ok(StepLoss { loss, reward: None });
    match p.task() {
        Task::Vqa => plain(vqa_loss(p, g, examples)?),
        Task::Vcr => plain(vcr_loss(p, g, examples)?),
        Task::Retrieval => plain(retrieval_loss(p, g, examples)?),
        Task::Vlp => {
            let w = p.pretraining.map(|o| o.weights()).unwrap_or([1.0; 3]);
            plain(vlp_pretrain_step(p, g, examples, w, seed, step)?)
        }
        Task::Captioning => match p.training {
            TrainingStrategy::CrossEntropy => plain(caption_batch_loss(p, g, examples, None, 0.0)?),
            TrainingStrategy::LabelSmoothing { epsilon } => plain(caption_batch_loss(p, g, examples, None, epsilon)?),
            TrainingStrategy::ScheduledSampling { .. } => {
                plain(scheduled_sampling_loss(p, g, examples, p_tf, seed, step)?)
            }
            TrainingStrategy::Scst { .. } => {
                let r = reward.ok_or_else(|| Error::Invalid("scst needs a reward function".into()))?;
                let (loss, mean) = scst_loss(p, g, examples, |c, refs| r.score(c, refs), seed, step, workers)?;
                Ok(StepLoss { loss, reward: Some(mean) })
            }
        },
    }
}

/// Reference corpus of a dataset, one document per example.
pub fn reference_corpus(data: &[Example]) -> Vec<Vec<Vec<usize>>> {
    data.iter().map(|e| e.refs.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::greedy_decode;
    use crate::test_support::captioning;
    use xmodal_tensor::{ParamStore, Tensor};

    const STAGES: [&str; 3] = ["self_attention", "attention", "lstm"];

    fn grads(p: &mut Pipeline, f: impl FnOnce(&Pipeline, &mut Graph) -> Var) -> (f64, Vec<Vec<f64>>) {
        p.params.zero_grads();
        let mut g = Graph::new(&p.params);
        let loss = f(p, &mut g);
        let value = g.scalar(loss);
        g.into_tape().backward(loss, &mut p.params).unwrap();
        let out = p
            .params
            .iter()
            .map(|(_, t)| t.grad().map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
            .collect();
        p.params.zero_grads();
        (value, out)
    }

    #[test]
    fn full_teacher_forcing_is_cross_entropy() {
        let (mut p, f) = captioning(STAGES, 8, "");
        let ex: Vec<&Example> = f.data[..4].iter().collect();
        let ce = grads(&mut p, |p, g| caption_batch_loss(p, g, &ex, None, 0.0).unwrap());
        let ss = grads(&mut p, |p, g| scheduled_sampling_loss(p, g, &ex, 1.0, 3, 1).unwrap());
        assert_eq!(ce.0.to_bits(), ss.0.to_bits());
        assert_eq!(ce.1, ss.1);
        let ls = grads(&mut p, |p, g| caption_batch_loss(p, g, &ex, None, 0.0).unwrap());
        assert_eq!(ce, ls);
    }

    #[test]
    fn free_running_inputs_follow_greedy() {
        let (p, f) = captioning(STAGES, 8, "");
        let ex = &f.data[0];
        let n = ex.text.ids.len() - 1;
        let mut rng = stream(0, "t", &[]);
        let inputs = scheduled_sampling_inputs(&p, ex, 0.0, &mut rng).unwrap();
        assert_eq!(inputs.len(), n);
        let greedy = greedy_decode(&mut p.stepper(&ex.visual).unwrap(), n - 1).unwrap();
        let upto = greedy.iter().position(|&t| t == EOS).map_or(greedy.len(), |i| i + 1);
        assert_eq!(inputs[..upto.min(n)], greedy[..upto.min(n)]);
        let again = scheduled_sampling_inputs(&p, ex, 0.5, &mut stream(4, "t", &[])).unwrap();
        assert_eq!(again, scheduled_sampling_inputs(&p, ex, 0.5, &mut stream(4, "t", &[])).unwrap());
        assert_eq!(again[0], BOS);
    }

    #[test]
    fn self_critical_hand_example() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let logp = g.constant(Tensor::scalar(-2.0));
        let term = self_critical_term(&mut g, logp, 0.8, 0.5).unwrap();
        assert!((g.scalar(term) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn constant_reward_gives_zero_gradients() {
        let (mut p, f) = captioning(STAGES, 8, "");
        let ex: Vec<&Example> = f.data.iter().collect();
        let (value, g) = grads(&mut p, |p, g| scst_loss(p, g, &ex, |_, _| 0.7, 5, 1, 1).unwrap().0);
        assert_eq!(value, 0.0);
        assert!(g.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn scst_is_deterministic_and_worker_independent() {
        let (mut p, f) = captioning(STAGES, 8, "");
        let ex: Vec<&Example> = f.data.iter().collect();
        let reward = RewardFn::new(Reward::CiderD, &reference_corpus(&f.data)).unwrap();
        let run = |p: &mut Pipeline, workers| {
            grads(p, |p, g| scst_loss(p, g, &ex, |c, r| reward.score(c, r), 5, 2, workers).unwrap().0)
        };
        let a = run(&mut p, 1);
        let b = run(&mut p, 3);
        assert_eq!(a, b);
        assert!(a.1.iter().flatten().any(|&x| x != 0.0));
    }

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<u32> = (0..23).collect();
        for workers in [1, 2, 5, 40] {
            assert_eq!(parallel_map(&items, workers, |x| x * 2), items.iter().map(|x| x * 2).collect::<Vec<_>>());
        }
        assert!(parallel_map(&[] as &[u32], 4, |x| *x).is_empty());
    }

    #[test]
    fn content_strips_markers() {
        assert_eq!(content_of(&[BOS, 5, 6, EOS, 7]), [5, 6]);
        assert_eq!(content_of(&[BOS, 5]), [5]);
    }
}
