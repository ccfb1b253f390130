//! The deterministic training loop.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use xmodal_tensor::rng::{derive_seed, name_hash, stream};
use xmodal_tensor::{Graph, TensorError};

use super::loss::scheduled_sampling_prob;
use super::optim::Adam;
use super::strategy::{batch_loss, reference_corpus, RewardFn};
use super::{TrainOptions, TrainRecord, TrainingStrategy};
use crate::checkpoint::save_checkpoint;
use crate::config::Task;
use crate::error::{Error, Result};
use crate::pipeline::Pipeline;
use crate::preprocess::Example;

#[derive(Debug)]
pub struct TrainOutcome {
    pub records: Vec<TrainRecord>,
    /// Final checkpoint, when an output directory was given.
    pub checkpoint: Option<PathBuf>,
}

/// Example order: a fresh permutation per epoch, keyed by `(seed, epoch)`.
struct Sampler {
    n: usize,
    seed: u64,
    epoch: usize,
    order: Vec<usize>,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self { n, seed, epoch: usize::MAX, order: Vec::new() };
        s.load(0);
        s
    }

    fn load(&mut self, epoch: usize) {
        if self.epoch != epoch {
            let mut rng = stream(self.seed, "shuffle", &[epoch as u64]);
            self.order = (0..self.n).collect();
            self.order.shuffle(&mut rng);
            self.epoch = epoch;
        }
    }

    /// Dataset indices at global positions `start .. start + len`.
    fn take(&mut self, start: usize, len: usize) -> Vec<usize> {
        (start..start + len)
            .map(|q| {
                self.load(q / self.n);
                self.order[q % self.n]
            })
            .collect()
    }
}

fn numeric(step: usize, e: impl std::fmt::Display) -> Error {
    Error::Numeric {
        step,
        message: e.to_string(),
    }
}

/// Trains with the pipeline's own `[training]` settings.
pub fn train_loop(p: &mut Pipeline, data: &[Example], out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let opts = p.train_options.clone();
    train_loop_with(p, data, &opts, out_dir)
}

pub fn train_loop_with(p: &mut Pipeline, data: &[Example], opts: &TrainOptions, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    if p.task() != Task::Captioning && p.training != TrainingStrategy::CrossEntropy {
        return Err(Error::config(
            "training",
            "strategy",
            format!("`{}` applies to captioning; task {} trains with ce", p.training.name(), p.task().as_str()),
        ));
    }
    let reward = match p.training {
        TrainingStrategy::Scst { reward } => Some(RewardFn::new(reward, &reference_corpus(data))?),
        _ => None,
    };
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("train_log.tsv");
            Some((BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?), path))
        }
        None => None,
    };
    let seed = p.seed;
    let mut sampler = Sampler::new(data.len(), seed);
    let mut adam = Adam::new(opts.lr).with_clip(opts.clip);
    let mut records = Vec::with_capacity(opts.steps);
    for step in 1..=opts.steps {
        let start = (step - 1) * opts.batch_size;
        let epoch = start / data.len();
        let batch: Vec<&Example> = sampler.take(start, opts.batch_size).into_iter().map(|i| &data[i]).collect();
        let p_tf = match p.training {
            TrainingStrategy::ScheduledSampling { k, p_min } => scheduled_sampling_prob(epoch, k, p_min),
            _ => 1.0,
        };
        let mut g = Graph::training(&p.params, derive_seed(seed, &[name_hash("dropout"), step as u64]));
        let out = batch_loss(p, &mut g, &batch, p_tf, reward.as_ref(), seed, step, opts.workers).map_err(|e| match e {
            Error::Tensor(TensorError::NonFinite(m)) => numeric(step, m),
            other => other,
        })?;
        let loss = g.scalar(out.loss);
        if !loss.is_finite() {
            return Err(numeric(step, format!("loss is {loss}")));
        }
        let mut tape = g.into_tape();
        tape.backward(out.loss, &mut p.params).map_err(|e| match e {
            TensorError::NonFinite(m) => numeric(step, m),
            other => other.into(),
        })?;
        adam.step(&mut p.params).map_err(|e| match e {
            Error::Numeric { message, .. } => numeric(step, message),
            other => other,
        })?;
        let record = TrainRecord {
            step,
            loss,
            learning_rate: opts.lr,
            teacher_forcing_prob: p_tf,
            reward_mean: out.reward,
        };
        if let Some((w, path)) = log.as_mut() {
            writeln!(w, "{}", record.to_line()).map_err(|e| Error::io(&*path, e))?;
        }
        records.push(record);
        if let Some(dir) = out_dir {
            if opts.save_every > 0 && step % opts.save_every == 0 {
                save_checkpoint(p, step, &dir.join(format!("ckpt_{step:06}.xtns")))?;
            }
        }
    }
    if let Some((mut w, path)) = log {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    let checkpoint = match out_dir {
        Some(dir) => {
            let path = dir.join("final.xtns");
            save_checkpoint(p, opts.steps, &path)?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainOutcome { records, checkpoint })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::checkpoint_bytes;
    use crate::test_support::captioning;

    const STAGES: [&str; 3] = ["self_attention", "attention", "lstm"];
    const TRAIN: &str = "[training]\nsteps = 6\nbatch_size = 4\nlr = 0.01\n";

    #[test]
    fn same_seed_same_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let (mut a, f) = captioning(STAGES, 8, &format!("{TRAIN}save_every = 3\n"));
        let (mut b, _) = captioning(STAGES, 8, &format!("{TRAIN}save_every = 3\n"));
        let ra = train_loop(&mut a, &f.data, Some(dir.path())).unwrap();
        let rb = train_loop(&mut b, &f.data, None).unwrap();
        assert_eq!(checkpoint_bytes(&a, 6).unwrap(), checkpoint_bytes(&b, 6).unwrap());
        let la: Vec<u64> = ra.records.iter().map(|r| r.loss.to_bits()).collect();
        let lb: Vec<u64> = rb.records.iter().map(|r| r.loss.to_bits()).collect();
        assert_eq!(la, lb);
        for name in ["ckpt_000003.xtns", "ckpt_000006.xtns", "final.xtns", "train_log.tsv"] {
            assert!(dir.path().join(name).exists(), "{name}");
        }
        let log = std::fs::read_to_string(dir.path().join("train_log.tsv")).unwrap();
        assert_eq!(log.lines().count(), 6);
        assert!(log.lines().all(|l| l.split('\t').count() == 5));
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let (mut p, f) = captioning(STAGES, 8, "[training]\nsteps = 3\nlr = 0.0\n");
        let before = p.parameter_snapshot();
        train_loop(&mut p, &f.data, None).unwrap();
        let after = p.parameter_snapshot();
        for ((n, a), (_, b)) in before.iter().zip(&after) {
            assert_eq!(a.data(), b.data(), "{n}");
        }
    }

    #[test]
    fn loss_decreases_on_a_small_set() {
        let (mut p, f) = captioning(STAGES, 16, "[training]\nsteps = 60\nbatch_size = 6\nlr = 0.01\n");
        let out = train_loop(&mut p, &f.data, None).unwrap();
        assert!(out.records.last().unwrap().loss < out.records[0].loss / 2.0);
    }

    #[test]
    fn non_finite_loss_reports_the_step() {
        let (mut p, f) = captioning(STAGES, 8, TRAIN);
        let name = "head.w".to_string();
        p.params.get_mut(&name).unwrap().data_mut()[0] = f64::NAN;
        let err = train_loop(&mut p, &f.data, None).unwrap_err();
        assert!(matches!(err, Error::Numeric { step: 1, .. }), "{err}");
    }

    #[test]
    fn strategies_are_checked_against_the_task() {
        let (mut p, f) = captioning(STAGES, 8, TRAIN);
        p.training = TrainingStrategy::LabelSmoothing { epsilon: 0.1 };
        assert!(train_loop(&mut p, &f.data, None).is_ok());
        assert!(train_loop(&mut p, &[], None).is_err());
    }
}
