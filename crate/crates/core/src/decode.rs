//! Inference-time search: greedy decoding and beam search over any model
//! exposing a step function.

use std::cmp::Ordering;

use rand::Rng;

use crate::config::SectionView;
use crate::error::{Error, Result};
use crate::preprocess::{BOS, EOS, PAD, UNK};

/// Ids that are never produced by a search.
pub const EXCLUDED: [usize; 3] = [PAD, BOS, UNK];

pub trait StepModel {
    type State: Clone;

    fn start(&mut self) -> Result<Self::State>;

    /// Log-probabilities of the next token after feeding `token`.
    fn step(&mut self, state: &Self::State, token: usize) -> Result<(Vec<f64>, Self::State)>;
}

#[derive(Clone, Debug)]
pub struct Hypothesis<S> {
    pub ids: Vec<usize>,
    pub logp: f64,
    pub finished: bool,
    pub state: S,
}

impl<S> Hypothesis<S> {
    /// `logp / generated_len^alpha`.
    pub fn score(&self, alpha: f64) -> f64 {
        normalized(self.logp, self.ids.len() - 1, alpha)
    }
}

fn normalized(logp: f64, len: usize, alpha: f64) -> f64 {
    if alpha == 0.0 {
        logp
    } else {
        logp / (len.max(1) as f64).powf(alpha)
    }
}

fn allowed(id: usize) -> bool {
    !EXCLUDED.contains(&id)
}

/// Higher score first, then lexicographically smaller ids.
fn rank(a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Picks the most probable allowed token at every step (ties go to the
/// lowest id) until `<eos>` or `max_len` generated tokens.
pub fn greedy_decode<M: StepModel>(model: &mut M, max_len: usize) -> Result<Vec<usize>> {
    let mut ids = vec![BOS];
    let mut state = model.start()?;
    for _ in 0..max_len {
        let (logp, next) = model.step(&state, *ids.last().expect("starts with bos"))?;
        let tok = best_allowed(&logp)?;
        ids.push(tok);
        state = next;
        if tok == EOS {
            break;
        }
    }
    Ok(ids)
}

/// Highest-scoring allowed token, lowest id on ties.
pub fn best_allowed(logp: &[f64]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (tok, &lp) in logp.iter().enumerate() {
        if allowed(tok) && best.map_or(true, |b| lp > logp[b]) {
            best = Some(tok);
        }
    }
    best.ok_or_else(|| Error::Invalid("no selectable token in vocabulary".into()))
}

/// Draws each token from the model distribution restricted to allowed ids.
pub fn sample_decode<M: StepModel, R: Rng>(model: &mut M, max_len: usize, rng: &mut R) -> Result<Vec<usize>> {
    let mut ids = vec![BOS];
    let mut state = model.start()?;
    for _ in 0..max_len {
        let (logp, next) = model.step(&state, *ids.last().expect("starts with bos"))?;
        let m = best_allowed(&logp)?;
        let weights: Vec<f64> = logp
            .iter()
            .enumerate()
            .map(|(t, &lp)| if allowed(t) { (lp - logp[m]).exp() } else { 0.0 })
            .collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        let mut tok = m;
        for (t, &w) in weights.iter().enumerate() {
            if w > 0.0 {
                if u < w {
                    tok = t;
                    break;
                }
                u -= w;
            }
        }
        ids.push(tok);
        state = next;
        if tok == EOS {
            break;
        }
    }
    Ok(ids)
}

#[derive(Clone, Debug)]
pub struct BeamOutput {
    pub best: Vec<usize>,
    /// Completed and live hypotheses with their normalized scores, best first.
    pub nbest: Vec<(Vec<usize>, f64)>,
}

/// Beam search keeping the `width` best partial sequences by accumulated
/// log-probability. Finished sequences move to a pool; the search ends when
/// no live hypothesis can still beat the best finished one.
pub fn beam_search<M: StepModel>(model: &mut M, width: usize, max_len: usize, alpha: f64) -> Result<BeamOutput> {
    if width < 1 {
        return Err(Error::config("decode", "beam", "beam width must be at least 1"));
    }
    if !(alpha >= 0.0) {
        return Err(Error::config("decode", "alpha", "must be non-negative"));
    }
    let mut live = vec![Hypothesis {
        ids: vec![BOS],
        logp: 0.0,
        finished: false,
        state: model.start()?,
    }];
    let mut done: Vec<Hypothesis<M::State>> = Vec::new();
    for _ in 0..max_len {
        let mut cands = Vec::new();
        for h in &live {
            let (logp, next) = model.step(&h.state, *h.ids.last().expect("starts with bos"))?;
            for (tok, &lp) in logp.iter().enumerate() {
                if !allowed(tok) {
                    continue;
                }
                let mut ids = h.ids.clone();
                ids.push(tok);
                cands.push(Hypothesis {
                    ids,
                    logp: h.logp + lp,
                    finished: tok == EOS,
                    state: next.clone(),
                });
            }
        }
        cands.sort_by(|a, b| rank((a.logp, &a.ids), (b.logp, &b.ids)));
        cands.truncate(width);
        live.clear();
        for c in cands {
            if c.finished {
                done.push(c);
            } else {
                live.push(c);
            }
        }
        if live.is_empty() {
            break;
        }
        let best_done = done.iter().map(|h| h.score(alpha)).fold(f64::NEG_INFINITY, f64::max);
        let bound = live
            .iter()
            .map(|h| normalized(h.logp, max_len, alpha))
            .fold(f64::NEG_INFINITY, f64::max);
        if bound < best_done {
            break;
        }
    }
    let mut pool: Vec<(Vec<usize>, f64)> = done
        .into_iter()
        .chain(live)
        .map(|h| {
            let s = h.score(alpha);
            (h.ids, s)
        })
        .collect();
    pool.sort_by(|a, b| rank((a.1, &a.0), (b.1, &b.0)));
    let best = pool.first().map(|p| p.0.clone()).unwrap_or_else(|| vec![BOS]);
    Ok(BeamOutput { best, nbest: pool })
}

#[derive(Clone, Debug, PartialEq)]
pub enum SearchKind {
    Greedy,
    Beam { width: usize, alpha: f64 },
}

/// Configured decoding strategy (`[decode]`).
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeStrategy {
    pub kind: SearchKind,
    pub max_len: usize,
}

impl DecodeStrategy {
    pub fn from_section(name: &str, s: &SectionView) -> Result<Self> {
        let max_len = s.positive("max_len", 16)?;
        let alpha = s.real("alpha", 0.0)?;
        if alpha < 0.0 {
            return Err(Error::config(s.name(), "alpha", "must be non-negative"));
        }
        let kind = match name {
            "greedy" => SearchKind::Greedy,
            "beam" => {
                let width = s.int("beam", 3)?;
                if width < 1 {
                    return Err(Error::config(s.name(), "beam", format!("beam width must be at least 1, got {width}")));
                }
                SearchKind::Beam {
                    width: width as usize,
                    alpha,
                }
            }
            other => {
                return Err(Error::UnknownModule {
                    stage: "decode".into(),
                    name: other.into(),
                    available: "beam, greedy".into(),
                })
            }
        };
        Ok(Self { kind, max_len })
    }

    /// Width 1 and zero alpha select greedy decoding.
    pub fn with_beam(&self, width: usize) -> Result<Self> {
        if width < 1 {
            return Err(Error::config("decode", "beam", "beam width must be at least 1"));
        }
        let alpha = match self.kind {
            SearchKind::Beam { alpha, .. } => alpha,
            SearchKind::Greedy => 0.0,
        };
        Ok(Self {
            kind: SearchKind::Beam { width, alpha },
            max_len: self.max_len,
        })
    }

    pub fn run<M: StepModel>(&self, model: &mut M) -> Result<Vec<usize>> {
        match self.kind {
            SearchKind::Greedy => greedy_decode(model, self.max_len),
            SearchKind::Beam { width, alpha } => Ok(beam_search(model, width, self.max_len, alpha)?.best),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use xmodal_tensor::rng::{derive_seed, mix};

    /// Log-probabilities are a pseudo-random function of the prefix.
    struct Toy {
        vocab: usize,
        seed: u64,
    }

    impl StepModel for Toy {
        type State = Vec<usize>;

        fn start(&mut self) -> Result<Vec<usize>> {
            Ok(Vec::new())
        }

        fn step(&mut self, prefix: &Vec<usize>, token: usize) -> Result<(Vec<f64>, Vec<usize>)> {
            let mut p = prefix.clone();
            p.push(token);
            let path: Vec<u64> = p.iter().map(|&t| t as u64).collect();
            let h = derive_seed(self.seed, &path);
            let logits: Vec<f64> = (0..self.vocab)
                .map(|i| (mix(h ^ i as u64) >> 11) as f64 / (1u64 << 53) as f64 * 4.0)
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            Ok((logits.iter().map(|x| x - lse).collect(), p))
        }
    }

    /// Fixed per-step logits, independent of the prefix.
    struct Fixed(Vec<Vec<f64>>);

    impl StepModel for Fixed {
        type State = usize;

        fn start(&mut self) -> Result<usize> {
            Ok(0)
        }

        fn step(&mut self, t: &usize, _token: usize) -> Result<(Vec<f64>, usize)> {
            let row = &self.0[(*t).min(self.0.len() - 1)];
            let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
            Ok((row.iter().map(|x| x - lse).collect(), t + 1))
        }
    }

    fn exhaustive<M: StepModel>(model: &mut M, max_len: usize) -> (Vec<usize>, f64) {
        fn walk<M: StepModel>(
            model: &mut M,
            state: M::State,
            ids: Vec<usize>,
            logp: f64,
            max_len: usize,
            best: &mut Option<(Vec<usize>, f64)>,
        ) {
            let done = ids.len() - 1 == max_len || ids.last() == Some(&EOS);
            if done {
                let better = match best {
                    None => true,
                    Some((b, s)) => rank((logp, &ids), (*s, b)) == Ordering::Less,
                };
                if better {
                    *best = Some((ids, logp));
                }
                return;
            }
            let (lp, next) = model.step(&state, *ids.last().unwrap()).unwrap();
            for tok in 0..lp.len() {
                if allowed(tok) {
                    let mut more = ids.clone();
                    more.push(tok);
                    walk(model, next.clone(), more, logp + lp[tok], max_len, best);
                }
            }
        }
        let mut best = None;
        let s = model.start().unwrap();
        walk(model, s, vec![BOS], 0.0, max_len, &mut best);
        best.unwrap()
    }

    #[test]
    fn greedy_on_fixed_logits() {
        // ids: 0 pad, 1 bos, 2 eos, 3 unk, 4 a, 5 b
        let mut m = Fixed(vec![
            vec![9.0, 9.0, 0.0, 9.0, 1.0, 2.0],
            vec![0.0, 0.0, 0.5, 0.0, 3.0, 3.0],
            vec![0.0, 0.0, 5.0, 0.0, 1.0, 1.0],
        ]);
        assert_eq!(greedy_decode(&mut m, 10).unwrap(), [BOS, 5, 4, EOS]);
        assert_eq!(greedy_decode(&mut m, 2).unwrap(), [BOS, 5, 4]);
        let mut eos = Fixed(vec![vec![0.0, 0.0, 3.0, 0.0, 1.0]]);
        assert_eq!(greedy_decode(&mut eos, 5).unwrap(), [BOS, EOS]);
    }

    #[test]
    fn width_one_is_greedy() {
        for seed in 0..40 {
            let mut m = Toy { vocab: 7, seed };
            let g = greedy_decode(&mut m, 6).unwrap();
            for alpha in [0.0, 0.7] {
                assert_eq!(beam_search(&mut m, 1, 6, alpha).unwrap().best, g, "seed {seed}");
            }
        }
    }

    #[test]
    fn three_token_vocab_matches_enumeration() {
        // Selectable: eos (2), a (4), b (5).
        for seed in 0..30 {
            let mut m = Toy { vocab: 6, seed };
            let (want, _) = exhaustive(&mut m, 3);
            assert_eq!(beam_search(&mut m, 3usize.pow(3), 3, 0.0).unwrap().best, want);
        }
    }

    #[test]
    fn rejects_zero_width() {
        let mut m = Toy { vocab: 6, seed: 0 };
        assert!(matches!(beam_search(&mut m, 0, 3, 0.0), Err(Error::Config { .. })));
    }

    fn well_formed(ids: &[usize]) -> bool {
        ids[0] == BOS
            && ids[1..].iter().all(|&t| allowed(t))
            && ids.iter().filter(|&&t| t == EOS).count() <= 1
            && ids.iter().position(|&t| t == EOS).map_or(true, |p| p == ids.len() - 1)
    }

    proptest! {
        #[test]
        fn wide_beam_is_exhaustive(seed in any::<u64>(), extra in 1usize..3, max_len in 1usize..5) {
            let mut m = Toy { vocab: 4 + extra, seed };
            let v = 1 + extra;
            let (want, _) = exhaustive(&mut m, max_len);
            let got = beam_search(&mut m, v.pow(max_len as u32), max_len, 0.0).unwrap();
            prop_assert_eq!(&got.best, &want);
            prop_assert!(well_formed(&got.best));
        }

        #[test]
        fn searches_are_deterministic_and_well_formed(seed in any::<u64>(), width in 1usize..5, alpha in 0.0f64..1.5) {
            let mut m = Toy { vocab: 8, seed };
            let a = beam_search(&mut m, width, 5, alpha).unwrap();
            let b = beam_search(&mut m, width, 5, alpha).unwrap();
            prop_assert_eq!(&a.best, &b.best);
            prop_assert!(well_formed(&a.best));
            prop_assert!(a.best.len() <= 6);
        }
    }

    #[test]
    fn strategy_from_config() {
        let cfg = crate::config::parse_config("[pipeline]\n[decode]\nname = beam\nbeam = 0\n").unwrap();
        assert!(DecodeStrategy::from_section("beam", &cfg.section("decode")).is_err());
        let cfg = crate::config::parse_config("[pipeline]\n[decode]\nmax_len = 7\n").unwrap();
        let s = DecodeStrategy::from_section("greedy", &cfg.section("decode")).unwrap();
        assert_eq!(s.max_len, 7);
        assert_eq!(s.with_beam(2).unwrap().kind, SearchKind::Beam { width: 2, alpha: 0.0 });
    }

    #[test]
    fn sampling_follows_allowed_probabilities() {
        use xmodal_tensor::rng::stream;
        // Excluded ids get large logits and must never appear.
        let row = vec![5.0, 5.0, 0.0, 5.0, 1.0, 2.0];
        let allowed_p: Vec<f64> = {
            let e: Vec<f64> = [0.0f64, 1.0, 2.0].iter().map(|x| x.exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|x| x / z).collect()
        };
        let mut model = Fixed(vec![row]);
        let mut rng = stream(3, "sample", &[]);
        let mut counts = [0usize; 6];
        let n = 20000;
        for _ in 0..n {
            let ids = sample_decode(&mut model, 3, &mut rng).unwrap();
            assert!(ids.len() <= 4);
            assert!(ids[1..].iter().all(|t| !EXCLUDED.contains(t)));
            if let Some(i) = ids.iter().position(|&t| t == EOS) {
                assert_eq!(i, ids.len() - 1);
            }
            counts[ids[1]] += 1;
        }
        for (k, &t) in [EOS, 4, 5].iter().enumerate() {
            let freq = counts[t] as f64 / n as f64;
            assert!((freq - allowed_p[k]).abs() < 0.02, "token {t}: {freq} vs {}", allowed_p[k]);
        }
        let a = sample_decode(&mut model, 3, &mut stream(9, "sample", &[])).unwrap();
        let b = sample_decode(&mut model, 3, &mut stream(9, "sample", &[])).unwrap();
        assert_eq!(a, b);
    }
}
