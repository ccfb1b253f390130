//! Cross-modal interaction stage: attention modules connecting encoder
//! states with decoder queries.

use xmodal_tensor::{Graph, Tensor, Var};

use crate::config::SectionView;
use crate::encoders::EncoderOutput;
use crate::error::{Error, Result};
use crate::nn::{as_row, masked_mean, row, stack_rows, FeedForward, LayerNorm, Linear, LstmCell, MultiHead, ParamInit};

/// `context` is `[d]`; `weights` is `[N]`, zero at masked positions.
#[derive(Clone, Copy, Debug)]
pub struct AttentionResult {
    pub context: Var,
    pub weights: Var,
}

pub trait Interaction: Send + Sync {
    fn name(&self) -> &'static str;

    /// Transforms encoder states before any decoder reads them.
    fn refine(&self, _g: &mut Graph, enc: EncoderOutput) -> Result<EncoderOutput> {
        Ok(enc)
    }

    /// Lets two streams exchange information (visual, textual). By default
    /// each textual state adds its context over the visual states.
    fn fuse(&self, g: &mut Graph, a: EncoderOutput, b: EncoderOutput) -> Result<(EncoderOutput, EncoderOutput)> {
        let ctx = self.attend_rows(g, b.states, &a)?;
        let states = g.add(b.states, ctx)?;
        let b = EncoderOutput::new(g, states, b.mask)?;
        Ok((a, b))
    }

    /// Context for one `[d]` query over the encoder states.
    fn attend(&self, g: &mut Graph, query: Var, enc: &EncoderOutput) -> Result<AttentionResult>;

    /// Contexts for each row of `queries` (`[T x d]`), stacked to `[T x d]`.
    fn attend_rows(&self, g: &mut Graph, queries: Var, enc: &EncoderOutput) -> Result<Var> {
        let t = g.shape(queries)[0];
        let mut rows = Vec::with_capacity(t);
        for i in 0..t {
            let q = row(g, queries, i)?;
            rows.push(self.attend(g, q, enc)?.context);
        }
        stack_rows(g, &rows)
    }

    fn as_top_down(&self) -> Option<&TopDown> {
        None
    }
}

#[derive(Clone, Debug)]
pub struct InteractionSpec {
    pub width: usize,
    pub att_hidden: usize,
    pub heads: usize,
    pub memory_slots: usize,
    pub ffn: usize,
    pub tie_streams: bool,
}

impl InteractionSpec {
    pub fn from_section(s: &SectionView, width: usize) -> Result<Self> {
        Ok(Self {
            width,
            att_hidden: s.positive("att_hidden", width)?,
            heads: s.positive("heads", 2)?,
            memory_slots: s.usize("memory_slots", 4)?,
            ffn: s.positive("ffn", 2 * width)?,
            tie_streams: s.bool("tie_streams", false)?,
        })
    }
}

/// `e_i = w . tanh(W_q q + W_k k_i)`, softmax over unmasked `i`.
#[derive(Clone, Debug)]
pub struct Additive {
    wq: Linear,
    wk: Linear,
    w: String,
}

impl Additive {
    pub fn new(init: &mut ParamInit, prefix: &str, d_query: usize, d_key: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            wq: Linear::new(init, &format!("{prefix}.wq"), d_query, hidden, false)?,
            wk: Linear::new(init, &format!("{prefix}.wk"), d_key, hidden, false)?,
            w: init.xavier(&format!("{prefix}.score"), hidden, 1)?,
        })
    }

    pub fn scores(&self, g: &mut Graph, query: Var, keys: Var) -> Result<Var> {
        let n = g.shape(keys)[0];
        let q = self.wq.forward(g, query)?;
        let q = g.broadcast_rows(q, n)?;
        let k = self.wk.forward(g, keys)?;
        let s = g.add(q, k)?;
        let s = g.tanh(s)?;
        let w = g.param(&self.w)?;
        let e = g.matmul(s, w)?;
        Ok(g.reshape(e, &[n])?)
    }

    pub fn forward(&self, g: &mut Graph, query: Var, keys: Var, values: Var, mask: &[bool]) -> Result<AttentionResult> {
        let e = self.scores(g, query, keys)?;
        let weights = g.softmax(e, 0, Some(mask))?;
        let context = g.matmul(weights, values)?;
        Ok(AttentionResult { context, weights })
    }
}

pub struct AdditiveAttention {
    inner: Additive,
}

impl AdditiveAttention {
    pub fn new(init: &mut ParamInit, prefix: &str, spec: &InteractionSpec) -> Result<Self> {
        Ok(Self {
            inner: Additive::new(init, &format!("{prefix}.att"), spec.width, spec.width, spec.att_hidden)?,
        })
    }
}

impl Interaction for AdditiveAttention {
    fn name(&self) -> &'static str {
        "attention"
    }

    fn attend(&self, g: &mut Graph, query: Var, enc: &EncoderOutput) -> Result<AttentionResult> {
        self.inner.forward(g, query, enc.states, enc.states, &enc.mask)
    }
}

/// Attention LSTM feeding object-level attention; recurrent decoders use
/// [`TopDown::step`] in place of plain attention.
pub struct TopDown {
    lstm: LstmCell,
    att: Additive,
    width: usize,
}

impl TopDown {
    pub fn new(init: &mut ParamInit, prefix: &str, spec: &InteractionSpec) -> Result<Self> {
        let d = spec.width;
        Ok(Self {
            lstm: LstmCell::new(init, &format!("{prefix}.lstm"), 3 * d, d)?,
            att: Additive::new(init, &format!("{prefix}.att"), d, d, spec.att_hidden)?,
            width: d,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Consumes `[h_lang; global; word]`, then queries the regions with the
    /// new attention hidden. Returns the attended feature and `(h, c)`.
    pub fn step(
        &self,
        g: &mut Graph,
        h_lang: Var,
        word: Var,
        enc: &EncoderOutput,
        state: (Var, Var),
    ) -> Result<(AttentionResult, (Var, Var))> {
        let input = g.concat(&[h_lang, enc.global, word], 0)?;
        let (h, c) = self.lstm.step(g, input, state.0, state.1)?;
        let att = self.att.forward(g, h, enc.states, enc.states, &enc.mask)?;
        Ok((att, (h, c)))
    }
}

impl Interaction for TopDown {
    fn name(&self) -> &'static str {
        "top_down"
    }

    fn attend(&self, g: &mut Graph, query: Var, enc: &EncoderOutput) -> Result<AttentionResult> {
        self.att.forward(g, query, enc.states, enc.states, &enc.mask)
    }

    fn as_top_down(&self) -> Option<&TopDown> {
        Some(self)
    }
}

fn mean_heads(g: &mut Graph, weights: &[Var]) -> Result<Var> {
    let mut acc = weights[0];
    for &w in &weights[1..] {
        acc = g.add(acc, w)?;
    }
    let n = g.value(acc).len();
    let acc = g.scale(acc, 1.0 / weights.len() as f64)?;
    Ok(g.reshape(acc, &[n])?)
}

#[derive(Clone, Debug)]
struct CrossBlock {
    attn: MultiHead,
    norm1: LayerNorm,
    ffn: FeedForward,
    norm2: LayerNorm,
}

impl CrossBlock {
    fn new(init: &mut ParamInit, prefix: &str, spec: &InteractionSpec) -> Result<Self> {
        let d = spec.width;
        Ok(Self {
            attn: MultiHead::new(init, &format!("{prefix}.attn"), "interaction", d, spec.heads)?,
            norm1: LayerNorm::new(init, &format!("{prefix}.norm1"), d)?,
            ffn: FeedForward::new(init, &format!("{prefix}.ffn"), d, spec.ffn)?,
            norm2: LayerNorm::new(init, &format!("{prefix}.norm2"), d)?,
        })
    }

    fn forward(&self, g: &mut Graph, x: Var, other: Var, other_mask: &[bool]) -> Result<Var> {
        let a = self.attn.forward(g, x, other, other_mask, false, None)?.out;
        let h = g.add(x, a)?;
        let h = self.norm1.forward(g, h)?;
        let f = self.ffn.forward(g, h)?;
        let h2 = g.add(h, f)?;
        self.norm2.forward(g, h2)
    }
}

/// Two parallel cross-attention blocks, one per stream.
pub struct CoAttention {
    a: CrossBlock,
    b: CrossBlock,
}

impl CoAttention {
    pub fn new(init: &mut ParamInit, prefix: &str, spec: &InteractionSpec) -> Result<Self> {
        let a = CrossBlock::new(init, &format!("{prefix}.stream_a"), spec)?;
        let b = if spec.tie_streams {
            a.clone()
        } else {
            CrossBlock::new(init, &format!("{prefix}.stream_b"), spec)?
        };
        Ok(Self { a, b })
    }

    /// Stream A queries B and B queries A.
    pub fn block(&self, g: &mut Graph, xa: Var, xb: Var, mask_a: &[bool], mask_b: &[bool]) -> Result<(Var, Var)> {
        let ya = self.a.forward(g, xa, xb, mask_b)?;
        let yb = self.b.forward(g, xb, xa, mask_a)?;
        Ok((ya, yb))
    }
}

impl Interaction for CoAttention {
    fn name(&self) -> &'static str {
        "co_attention"
    }

    fn fuse(&self, g: &mut Graph, a: EncoderOutput, b: EncoderOutput) -> Result<(EncoderOutput, EncoderOutput)> {
        let (ya, yb) = self.block(g, a.states, b.states, &a.mask, &b.mask)?;
        Ok((EncoderOutput::new(g, ya, a.mask)?, EncoderOutput::new(g, yb, b.mask)?))
    }

    fn attend(&self, g: &mut Graph, query: Var, enc: &EncoderOutput) -> Result<AttentionResult> {
        let q = as_row(g, query)?;
        let out = self.a.attn.forward(g, q, enc.states, &enc.mask, false, None)?;
        let d = g.shape(out.out)[1];
        let context = g.reshape(out.out, &[d])?;
        let weights = mean_heads(g, &out.weights)?;
        Ok(AttentionResult { context, weights })
    }

    fn attend_rows(&self, g: &mut Graph, queries: Var, enc: &EncoderOutput) -> Result<Var> {
        Ok(self.a.attn.forward(g, queries, enc.states, &enc.mask, false, None)?.out)
    }
}

/// Self-attention over encoder states extended with learned memory rows,
/// followed by multi-head cross-attention for decoder queries.
pub struct MeshedMemory {
    self_attn: MultiHead,
    norm: LayerNorm,
    memory: Option<(String, String)>,
    cross: MultiHead,
}

impl MeshedMemory {
    pub fn new(init: &mut ParamInit, prefix: &str, spec: &InteractionSpec) -> Result<Self> {
        let d = spec.width;
        let memory = if spec.memory_slots > 0 {
            Some((
                init.xavier(&format!("{prefix}.mem_k"), spec.memory_slots, d)?,
                init.xavier(&format!("{prefix}.mem_v"), spec.memory_slots, d)?,
            ))
        } else {
            None
        };
        Ok(Self {
            self_attn: MultiHead::new(init, &format!("{prefix}.self_attn"), "interaction", d, spec.heads)?,
            norm: LayerNorm::new(init, &format!("{prefix}.norm"), d)?,
            memory,
            cross: MultiHead::new(init, &format!("{prefix}.cross"), "interaction", d, spec.heads)?,
        })
    }

    #[cfg(test)]
    fn self_attn_key(&self, g: &mut Graph, x: Var) -> Var {
        self.self_attn.key(g, x).unwrap()
    }

    /// Weights normalize over the `N` inputs plus the memory rows.
    pub fn memory_attention(&self, g: &mut Graph, x: Var, mask: &[bool]) -> Result<(Var, Vec<Var>)> {
        let memory = match &self.memory {
            Some((k, v)) => Some((g.param(k)?, g.param(v)?)),
            None => None,
        };
        let out = self.self_attn.forward(g, x, x, mask, false, memory)?;
        Ok((out.out, out.weights))
    }
}

impl Interaction for MeshedMemory {
    fn name(&self) -> &'static str {
        "meshed_memory"
    }

    fn refine(&self, g: &mut Graph, enc: EncoderOutput) -> Result<EncoderOutput> {
        let (a, _) = self.memory_attention(g, enc.states, &enc.mask)?;
        let h = g.add(enc.states, a)?;
        let h = self.norm.forward(g, h)?;
        EncoderOutput::new(g, h, enc.mask)
    }

    fn attend(&self, g: &mut Graph, query: Var, enc: &EncoderOutput) -> Result<AttentionResult> {
        let q = as_row(g, query)?;
        let out = self.cross.forward(g, q, enc.states, &enc.mask, false, None)?;
        let d = g.shape(out.out)[1];
        let context = g.reshape(out.out, &[d])?;
        let weights = mean_heads(g, &out.weights)?;
        Ok(AttentionResult { context, weights })
    }

    fn attend_rows(&self, g: &mut Graph, queries: Var, enc: &EncoderOutput) -> Result<Var> {
        Ok(self.cross.forward(g, queries, enc.states, &enc.mask, false, None)?.out)
    }
}

/// Single-block bilinear attention with spatial and channel-wise weighting.
pub struct XLinear {
    wk: Linear,
    wq: Linear,
    wb: Linear,
    w: String,
    wc: Linear,
    wv: Linear,
    wq_value: Linear,
}

impl XLinear {
    pub fn new(init: &mut ParamInit, prefix: &str, spec: &InteractionSpec) -> Result<Self> {
        let (d, a) = (spec.width, spec.att_hidden);
        Ok(Self {
            wk: Linear::new(init, &format!("{prefix}.wk"), d, d, false)?,
            wq: Linear::new(init, &format!("{prefix}.wq"), d, d, false)?,
            wb: Linear::new(init, &format!("{prefix}.wb"), d, a, false)?,
            w: init.xavier(&format!("{prefix}.score"), a, 1)?,
            wc: Linear::new(init, &format!("{prefix}.wc"), a, d, false)?,
            wv: Linear::new(init, &format!("{prefix}.wv"), d, d, false)?,
            wq_value: Linear::new(init, &format!("{prefix}.wq_value"), d, d, false)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, query: Var, keys: Var, values: Var, mask: &[bool]) -> Result<AttentionResult> {
        let n = g.shape(keys)[0];
        let k = self.wk.forward(g, keys)?;
        let k = g.sigmoid(k)?;
        let q = self.wq.forward(g, query)?;
        let q = g.sigmoid(q)?;
        let q = g.broadcast_rows(q, n)?;
        let joint = g.mul(k, q)?;
        let r = self.wb.forward(g, joint)?;
        let r = g.relu(r)?;
        let w = g.param(&self.w)?;
        let e = g.matmul(r, w)?;
        let e = g.reshape(e, &[n])?;
        let beta = g.softmax(e, 0, Some(mask))?;
        let pooled = masked_mean(g, r, mask)?;
        let gamma = self.wc.forward(g, pooled)?;
        let gamma = g.sigmoid(gamma)?;
        let v = self.wv.forward(g, values)?;
        let qv = self.wq_value.forward(g, query)?;
        let qv = g.sigmoid(qv)?;
        let qv = g.broadcast_rows(qv, n)?;
        let gated = g.mul(v, qv)?;
        let spatial = g.matmul(beta, gated)?;
        let context = g.mul(gamma, spatial)?;
        Ok(AttentionResult { context, weights: beta })
    }
}

impl Interaction for XLinear {
    fn name(&self) -> &'static str {
        "x_linear"
    }

    fn attend(&self, g: &mut Graph, query: Var, enc: &EncoderOutput) -> Result<AttentionResult> {
        self.forward(g, query, enc.states, enc.states, &enc.mask)
    }
}

pub const INTERACTIONS: [&str; 5] = ["attention", "co_attention", "meshed_memory", "top_down", "x_linear"];

pub fn build_interaction(name: &str, init: &mut ParamInit, prefix: &str, spec: &InteractionSpec) -> Result<Box<dyn Interaction>> {
    Ok(match name {
        "attention" => Box::new(AdditiveAttention::new(init, prefix, spec)?),
        "top_down" => Box::new(TopDown::new(init, prefix, spec)?),
        "co_attention" => Box::new(CoAttention::new(init, prefix, spec)?),
        "meshed_memory" => Box::new(MeshedMemory::new(init, prefix, spec)?),
        "x_linear" => Box::new(XLinear::new(init, prefix, spec)?),
        other => {
            return Err(Error::UnknownModule {
                stage: "interaction".into(),
                name: other.into(),
                available: INTERACTIONS.join(", "),
            })
        }
    })
}

/// Constant encoder output for tests and tools that bypass the encoder.
pub fn constant_states(g: &mut Graph, states: &Tensor, mask: &[bool]) -> Result<EncoderOutput> {
    let s = g.constant(states.clone());
    EncoderOutput::new(g, s, mask.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::probe;
    use xmodal_tensor::{gradient_check, ParamStore};

    fn spec(d: usize, slots: usize) -> InteractionSpec {
        InteractionSpec {
            width: d,
            att_hidden: d,
            heads: 2,
            memory_slots: slots,
            ffn: 2 * d,
            tie_streams: false,
        }
    }

    fn mat(n: usize, d: usize, salt: f64) -> Tensor {
        Tensor::matrix(n, d, (0..n * d).map(|i| ((i as f64 + salt) * 0.83).cos()).collect()).unwrap()
    }

    fn raw(g: &mut Graph, states: &Tensor, mask: &[bool]) -> EncoderOutput {
        let s = g.constant(states.clone());
        let global = masked_mean(g, s, mask).unwrap();
        EncoderOutput { states: s, global, mask: mask.to_vec() }
    }

    #[test]
    fn additive_hand_weights() {
        let mut store = ParamStore::new();
        let att = Additive::new(&mut ParamInit::new(&mut store, 1), "a", 1, 1, 1).unwrap();
        store.get_mut("a.wq.w").unwrap().data_mut()[0] = 0.0;
        store.get_mut("a.wk.w").unwrap().data_mut()[0] = 1.0;
        store.get_mut("a.score").unwrap().data_mut()[0] = 4.0;
        let mut g = Graph::new(&store);
        let q = g.constant(Tensor::vector(vec![0.3]));
        let keys = g.constant(Tensor::matrix(2, 1, vec![0.25f64.atanh(), 0.5f64.atanh()]).unwrap());
        let r = att.forward(&mut g, q, keys, keys, &[true, true]).unwrap();
        let w = g.value(r.weights);
        assert!((w[0] - 0.268941421).abs() < 1e-8 && (w[1] - 0.731058579).abs() < 1e-8);
        let r = att.forward(&mut g, q, keys, keys, &[false, true]).unwrap();
        assert_eq!(g.value(r.weights), &[0.0, 1.0]);
        assert!(att.forward(&mut g, q, keys, keys, &[false, false]).is_err());

        let e = att.scores(&mut g, q, keys).unwrap();
        let shifted = g.add_scalar(e, 3.5).unwrap();
        let argmax = |v: &[f64]| (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
        let (a, b) = (g.softmax(e, 0, None).unwrap(), g.softmax(shifted, 0, None).unwrap());
        assert_eq!(argmax(g.value(a)), argmax(g.value(b)));
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        for name in ["attention", "x_linear", "top_down"] {
            let mut store = ParamStore::new();
            let m = build_interaction(name, &mut ParamInit::new(&mut store, 3), "i", &spec(4, 0)).unwrap();
            let mut g = Graph::new(&store);
            let same = Tensor::from_rows(&vec![vec![0.2, -0.4, 0.9, 0.1]; 3]).unwrap();
            let enc = raw(&mut g, &same, &[true; 3]);
            let q = g.constant(Tensor::vector(vec![0.5, 0.5, -1.0, 0.0]));
            let r = m.attend(&mut g, q, &enc).unwrap();
            for &w in g.value(r.weights) {
                assert!((w - 1.0 / 3.0).abs() < 1e-12, "{name}");
            }
            if name == "attention" {
                for (c, v) in g.value(r.context).iter().zip([0.2, -0.4, 0.9, 0.1]) {
                    assert!((c - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn x_linear_common_value_is_gated() {
        let mut store = ParamStore::new();
        let x = XLinear::new(&mut ParamInit::new(&mut store, 3), "x", &spec(3, 0)).unwrap();
        let mut g = Graph::new(&store);
        let same = g.constant(Tensor::from_rows(&vec![vec![0.3, -0.1, 0.7]; 4]).unwrap());
        let q = g.constant(Tensor::vector(vec![0.1, 0.2, 0.3]));
        let r = x.forward(&mut g, q, same, same, &[true; 4]).unwrap();
        let v = x.wv.forward(&mut g, same).unwrap();
        let v0 = row(&mut g, v, 0).unwrap();
        let qv = x.wq_value.forward(&mut g, q).unwrap();
        let qv = g.sigmoid(qv).unwrap();
        let gated = g.mul(v0, qv).unwrap();
        let ctx = g.value(r.context).to_vec();
        let gv = g.value(gated).to_vec();
        // context / gated value must be the same sigmoid gate in (0, 1).
        for (c, v) in ctx.iter().zip(&gv) {
            let gamma = c / v;
            assert!(gamma > 0.0 && gamma < 1.0);
        }

        let rand = g.constant(mat(4, 3, 0.7));
        let r = x.forward(&mut g, q, rand, rand, &[true; 4]).unwrap();
        assert!((g.value(r.weights).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn top_down_single_region() {
        let mut store = ParamStore::new();
        let td = TopDown::new(&mut ParamInit::new(&mut store, 5), "t", &spec(3, 0)).unwrap();
        let mut g = Graph::new(&store);
        let region = Tensor::matrix(1, 3, vec![0.4, -0.2, 0.8]).unwrap();
        let enc = raw(&mut g, &region, &[true]);
        let z = g.constant(Tensor::zeros(&[3]));
        let w = g.constant(Tensor::vector(vec![1.0, 0.0, -1.0]));
        let (att, _) = td.step(&mut g, z, w, &enc, (z, z)).unwrap();
        assert_eq!(g.value(att.context), region.data());
    }

    #[test]
    fn co_attention_symmetry_and_single_source() {
        let mut store = ParamStore::new();
        let tied = CoAttention::new(&mut ParamInit::new(&mut store, 5), "c", &InteractionSpec { tie_streams: true, ..spec(4, 0) }).unwrap();
        let mut g = Graph::new(&store);
        let x = g.constant(mat(3, 4, 0.0));
        let (a, b) = tied.block(&mut g, x, x, &[true; 3], &[true; 3]).unwrap();
        assert_eq!(g.value(a), g.value(b));

        let one = g.constant(mat(1, 4, 2.0));
        let out = tied.a.attn.forward(&mut g, x, one, &[true], false, None).unwrap();
        for w in out.weights {
            assert_eq!(g.value(w), &[1.0, 1.0, 1.0]);
        }
    }

    #[test]
    fn meshed_memory_degenerate_and_symmetric() {
        let mut s0 = ParamStore::new();
        let mm = MeshedMemory::new(&mut ParamInit::new(&mut s0, 6), "m", &spec(4, 0)).unwrap();
        let mut s1 = ParamStore::new();
        let plain = MultiHead::new(&mut ParamInit::new(&mut s1, 6), "m.self_attn", "interaction", 4, 2).unwrap();
        let x = mat(3, 4, 1.0);
        let mask = [true, true, false];
        let mut g0 = Graph::new(&s0);
        let xv = g0.constant(x.clone());
        let (a, _) = mm.memory_attention(&mut g0, xv, &mask).unwrap();
        let mut g1 = Graph::new(&s1);
        let xv1 = g1.constant(x.clone());
        let b = plain.forward(&mut g1, xv1, xv1, &mask, false, None).unwrap().out;
        assert_eq!(g0.value(a), g1.value(b));

        let mut store = ParamStore::new();
        let mm = MeshedMemory::new(&mut ParamInit::new(&mut store, 6), "m", &spec(4, 1)).unwrap();
        let x1 = mat(1, 4, 0.0);
        let key = {
            let mut g = Graph::new(&store);
            let xv = g.constant(x1.clone());
            let k = mm.self_attn_key(&mut g, xv);
            g.value(k).to_vec()
        };
        store.get_mut("m.mem_k").unwrap().data_mut().copy_from_slice(&key);
        let mut g = Graph::new(&store);
        let xv = g.constant(x1);
        let (_, weights) = mm.memory_attention(&mut g, xv, &[true]).unwrap();
        for w in weights {
            assert_eq!(g.value(w), &[0.5, 0.5]);
        }
    }

    #[test]
    fn memory_rows_receive_gradient() {
        let mut store = ParamStore::new();
        let mm = MeshedMemory::new(&mut ParamInit::new(&mut store, 6), "m", &spec(4, 2)).unwrap();
        let mut g = Graph::new(&store);
        let x = g.constant(mat(3, 4, 0.5));
        let (a, _) = mm.memory_attention(&mut g, x, &[true; 3]).unwrap();
        let loss = probe(&mut g, a).unwrap();
        let mut tape = g.into_tape();
        tape.backward(loss, &mut store).unwrap();
        for name in ["m.mem_k", "m.mem_v"] {
            assert!(store.get(name).unwrap().grad().unwrap().iter().any(|&x| x != 0.0), "{name}");
        }
    }

    #[test]
    fn masked_sources_never_influence() {
        for name in INTERACTIONS {
            let mut store = ParamStore::new();
            let m = build_interaction(name, &mut ParamInit::new(&mut store, 8), "i", &spec(4, 2)).unwrap();
            let mask = [true, false, true, false];
            let a = mat(4, 4, 0.0);
            let mut b = a.clone();
            for j in 0..4 {
                b.data_mut()[4 + j] = 50.0;
                b.data_mut()[12 + j] = -3.0;
            }
            let run = |states: &Tensor| {
                let mut g = Graph::new(&store);
                let enc = raw(&mut g, states, &mask);
                let enc = m.refine(&mut g, enc).unwrap();
                let q = g.constant(Tensor::vector(vec![0.1, -0.3, 0.2, 0.4]));
                let r = m.attend(&mut g, q, &enc).unwrap();
                let w = g.value(r.weights).to_vec();
                (g.value(r.context).to_vec(), w)
            };
            let (ca, wa) = run(&a);
            let (cb, wb) = run(&b);
            assert_eq!(ca, cb, "{name}");
            assert_eq!(wa, wb, "{name}");
            assert_eq!((wa[1], wa[3]), (0.0, 0.0), "{name}");
            assert!((wa.iter().sum::<f64>() - 1.0).abs() < 1e-12, "{name}");
        }
    }

    #[test]
    fn outputs_are_locally_lipschitz() {
        for name in INTERACTIONS {
            let mut store = ParamStore::new();
            let m = build_interaction(name, &mut ParamInit::new(&mut store, 8), "i", &spec(4, 2)).unwrap();
            let base = mat(3, 4, 0.25);
            let q0 = vec![0.1, -0.3, 0.2, 0.4];
            let run = |states: &Tensor, q: &[f64]| {
                let mut g = Graph::new(&store);
                let enc = raw(&mut g, states, &[true; 3]);
                let enc = m.refine(&mut g, enc).unwrap();
                let q = g.constant(Tensor::vector(q.to_vec()));
                let r = m.attend(&mut g, q, &enc).unwrap();
                g.value(r.context).to_vec()
            };
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let y0 = run(&base, &q0);
            let rel = 1e-6;
            let mut moved = base.clone();
            moved.data_mut().iter_mut().enumerate().for_each(|(i, x)| *x *= 1.0 + rel * if i % 2 == 0 { 1.0 } else { -1.0 });
            let q1: Vec<f64> = q0.iter().map(|x| x * (1.0 + rel)).collect();
            let y1 = run(&moved, &q1);
            let diff: Vec<f64> = y0.iter().zip(&y1).map(|(a, b)| a - b).collect();
            assert!(norm(&diff) / norm(&y0) <= 10.0 * rel, "{name}");
        }
    }

    #[test]
    fn every_interaction_passes_gradient_check() {
        for name in INTERACTIONS {
            let mut store = ParamStore::new();
            let m = build_interaction(name, &mut ParamInit::new(&mut store, 12), "i", &spec(4, 2)).unwrap();
            let states = mat(3, 4, 0.1);
            let other = mat(3, 4, 5.0);
            let err = gradient_check(&mut store, 1e-5, |g| -> Result<Var> {
                let enc = raw(g, &states, &[true, true, false]);
                let enc = m.refine(g, enc)?;
                let txt = raw(g, &other, &[true; 3]);
                let (enc, txt) = m.fuse(g, enc, txt)?;
                let q = g.constant(Tensor::vector(vec![0.3, -0.6, 0.2, 0.8]));
                let ctx = if let Some(td) = m.as_top_down() {
                    let z = g.constant(Tensor::zeros(&[4]));
                    let (att, (h, _)) = td.step(g, q, q, &enc, (z, z))?;
                    let (att2, _) = td.step(g, h, q, &enc, (h, z))?;
                    g.add(att.context, att2.context)?
                } else {
                    m.attend(g, q, &enc)?.context
                };
                let a = probe(g, ctx)?;
                let b = probe(g, txt.states)?;
                Ok(g.add(a, b)?)
            })
            .unwrap();
            assert!(err < 1e-4, "{name}: {err}");
        }
    }
}
