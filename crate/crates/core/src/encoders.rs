//! Token embeddings and the encoder stage.

use xmodal_tensor::{Graph, Tensor, Var};

use crate::config::SectionView;
use crate::error::{Error, Result};
use crate::nn::{masked_mean, mask_rows, stack_rows, FeedForward, LayerNorm, Linear, LstmCell, MultiHead, ParamInit};
use crate::preprocess::Edge;

/// Encoded sequence. Rows at masked positions are exactly zero and `global`
/// is the mean of the unmasked rows.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub states: Var,
    pub global: Var,
    pub mask: Vec<bool>,
}

impl EncoderOutput {
    pub fn new(g: &mut Graph, states: Var, mask: Vec<bool>) -> Result<Self> {
        let states = mask_rows(g, states, &mask)?;
        let global = masked_mean(g, states, &mask)?;
        Ok(Self { states, global, mask })
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

/// Visual projection and word embedding front-end, each with a learned
/// positional table.
#[derive(Clone, Debug)]
pub struct Embeddings {
    visual: Linear,
    visual_norm: Option<LayerNorm>,
    visual_pos: Option<String>,
    word: String,
    text_pos: String,
    pub feature_dim: usize,
    pub visual_dim: usize,
    pub word_dim: usize,
    pub vocab_size: usize,
    pub max_regions: usize,
    pub max_len: usize,
}

pub struct EmbeddingSpec {
    pub feature_dim: usize,
    pub visual_dim: usize,
    pub word_dim: usize,
    pub vocab_size: usize,
    pub max_regions: usize,
    pub max_len: usize,
    pub visual_norm: bool,
    pub visual_positions: bool,
}

impl Embeddings {
    pub fn new(init: &mut ParamInit, spec: &EmbeddingSpec) -> Result<Self> {
        let visual = Linear::new(init, "embed.visual", spec.feature_dim, spec.visual_dim, true)?;
        let visual_norm = if spec.visual_norm {
            Some(LayerNorm::new(init, "embed.visual_norm", spec.visual_dim)?)
        } else {
            None
        };
        let visual_pos = if spec.visual_positions {
            Some(init.xavier("embed.visual_pos", spec.max_regions, spec.visual_dim)?)
        } else {
            None
        };
        Ok(Self {
            visual,
            visual_norm,
            visual_pos,
            word: init.xavier("embed.word", spec.vocab_size, spec.word_dim)?,
            text_pos: init.xavier("embed.text_pos", spec.max_len, spec.word_dim)?,
            feature_dim: spec.feature_dim,
            visual_dim: spec.visual_dim,
            word_dim: spec.word_dim,
            vocab_size: spec.vocab_size,
            max_regions: spec.max_regions,
            max_len: spec.max_len,
        })
    }

    pub fn word_table(&self) -> &str {
        &self.word
    }

    /// `[N x d_v]` features to `[N x d]`.
    pub fn embed_visual(&self, g: &mut Graph, features: &Tensor) -> Result<Var> {
        let [n, d] = *features.shape() else {
            return Err(Error::Invalid(format!("features must be a matrix, got {:?}", features.shape())));
        };
        if d != self.feature_dim {
            return Err(Error::DimensionMismatch {
                left: "input feature dim".into(),
                left_dim: d,
                right: "[preprocessing] feature_dim".into(),
                right_dim: self.feature_dim,
            });
        }
        if n > self.max_regions && self.visual_pos.is_some() {
            return Err(Error::Invalid(format!(
                "{n} regions exceed [encoder] max_regions = {}",
                self.max_regions
            )));
        }
        let x = g.constant(features.clone());
        let mut h = self.visual.forward(g, x)?;
        if let Some(ln) = &self.visual_norm {
            h = ln.forward(g, h)?;
        }
        if let Some(pos) = &self.visual_pos {
            let table = g.param(pos)?;
            let ids: Vec<usize> = (0..n).collect();
            let p = g.embedding(table, &ids)?;
            h = g.add(h, p)?;
        }
        Ok(h)
    }

    fn check_ids(&self, ids: &[usize], start: usize) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(Error::Invalid(format!("token id {bad} outside vocabulary of {}", self.vocab_size)));
        }
        if start + ids.len() > self.max_len {
            return Err(Error::Invalid(format!(
                "sequence of {} tokens exceeds [preprocessing] max_len = {}",
                start + ids.len(),
                self.max_len
            )));
        }
        Ok(())
    }

    /// Word embedding plus positional embedding, `[T x d]`.
    pub fn embed_text(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        self.embed_text_at(g, ids, 0)
    }

    /// Embedding of a single token at position `pos`, `[d]`.
    pub fn embed_token(&self, g: &mut Graph, id: usize, pos: usize) -> Result<Var> {
        let e = self.embed_text_at(g, &[id], pos)?;
        Ok(g.reshape(e, &[self.word_dim])?)
    }

    fn embed_text_at(&self, g: &mut Graph, ids: &[usize], start: usize) -> Result<Var> {
        self.check_ids(ids, start)?;
        let table = g.param(&self.word)?;
        let w = g.embedding(table, ids)?;
        let pos = g.param(&self.text_pos)?;
        let positions: Vec<usize> = (start..start + ids.len()).collect();
        let p = g.embedding(pos, &positions)?;
        Ok(g.add(w, p)?)
    }
}

pub trait Encoder: Send + Sync {
    fn name(&self) -> &'static str;

    /// Encodes `x` (`[N x d]`). Rows with a false `mask` entry are padding.
    fn encode(&self, g: &mut Graph, x: Var, mask: &[bool], edges: &[Edge]) -> Result<EncoderOutput>;
}

/// Settings read from an `[encoder]`-style section.
#[derive(Clone, Debug)]
pub struct EncoderSpec {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub kernel: usize,
    pub ffn: usize,
    pub relations: usize,
    pub dropout: f64,
}

impl EncoderSpec {
    pub fn from_section(s: &SectionView) -> Result<Self> {
        let hidden = s.positive("hidden", 32)?;
        let dropout = s.real("dropout", 0.0)?;
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::config(s.name(), "dropout", "must be in [0, 1)"));
        }
        Ok(Self {
            hidden,
            layers: s.positive("layers", 1)?,
            heads: s.positive("heads", 2)?,
            kernel: s.positive("kernel", 3)?,
            ffn: s.positive("ffn", 2 * hidden)?,
            relations: s.positive("relations", 4)?,
            dropout,
        })
    }
}

fn check_input(g: &Graph, x: Var, mask: &[bool], d: usize) -> Result<usize> {
    let shape = g.shape(x);
    if shape.len() != 2 || shape[1] != d || shape[0] != mask.len() {
        return Err(Error::Invalid(format!(
            "encoder expects [{} x {d}] input, got {shape:?}",
            mask.len()
        )));
    }
    Ok(shape[0])
}

pub struct LstmEncoder {
    cells: Vec<LstmCell>,
    hidden: usize,
    dropout: f64,
}

impl LstmEncoder {
    pub fn new(init: &mut ParamInit, prefix: &str, spec: &EncoderSpec) -> Result<Self> {
        let cells = (0..spec.layers)
            .map(|l| LstmCell::new(init, &format!("{prefix}.layer{l}"), spec.hidden, spec.hidden))
            .collect::<Result<_>>()?;
        Ok(Self {
            cells,
            hidden: spec.hidden,
            dropout: spec.dropout,
        })
    }
}

impl Encoder for LstmEncoder {
    fn name(&self) -> &'static str {
        "lstm"
    }

    /// Padding steps leave `(h, c)` untouched.
    fn encode(&self, g: &mut Graph, x: Var, mask: &[bool], _edges: &[Edge]) -> Result<EncoderOutput> {
        let n = check_input(g, x, mask, self.hidden)?;
        let zero = g.constant(Tensor::zeros(&[self.hidden]));
        let mut input = x;
        for cell in &self.cells {
            let (mut h, mut c) = (zero, zero);
            let mut rows = Vec::with_capacity(n);
            for (t, &m) in mask.iter().enumerate() {
                if m {
                    let xt = crate::nn::row(g, input, t)?;
                    (h, c) = cell.step(g, xt, h, c)?;
                    rows.push(h);
                } else {
                    rows.push(zero);
                }
            }
            let states = stack_rows(g, &rows)?;
            input = g.dropout(states, self.dropout)?;
        }
        EncoderOutput::new(g, input, mask.to_vec())
    }
}

struct GcnLayer {
    self_map: Linear,
    relation_maps: Vec<Linear>,
}

pub struct GcnEncoder {
    layers: Vec<GcnLayer>,
    hidden: usize,
    relations: usize,
    dropout: f64,
}

impl GcnEncoder {
    pub fn new(init: &mut ParamInit, prefix: &str, spec: &EncoderSpec) -> Result<Self> {
        let mut layers = Vec::with_capacity(spec.layers);
        for l in 0..spec.layers {
            let p = format!("{prefix}.layer{l}");
            layers.push(GcnLayer {
                self_map: Linear::new(init, &format!("{p}.self"), spec.hidden, spec.hidden, true)?,
                relation_maps: (0..spec.relations)
                    .map(|r| Linear::new(init, &format!("{p}.rel{r}"), spec.hidden, spec.hidden, false))
                    .collect::<Result<_>>()?,
            });
        }
        Ok(Self {
            layers,
            hidden: spec.hidden,
            relations: spec.relations,
            dropout: spec.dropout,
        })
    }

    /// Per-relation `[N x N]` mean-aggregation matrices. Edges touching a
    /// padded node are ignored.
    fn aggregators(&self, n: usize, mask: &[bool], edges: &[Edge]) -> Result<Vec<Option<Tensor>>> {
        if let Some(e) = edges.iter().find(|e| e.relation >= self.relations) {
            return Err(Error::Invalid(format!(
                "unknown relation id {} (encoder has {} relations)",
                e.relation, self.relations
            )));
        }
        if let Some(e) = edges.iter().find(|e| e.from >= n || e.to >= n) {
            return Err(Error::Invalid(format!("edge ({}, {}) outside {n} nodes", e.from, e.to)));
        }
        let live: Vec<&Edge> = edges.iter().filter(|e| mask[e.from] && mask[e.to]).collect();
        let mut degree = vec![0usize; n];
        for e in &live {
            degree[e.from] += 1;
        }
        let mut mats: Vec<Option<Vec<f64>>> = vec![None; self.relations];
        for e in &live {
            let m = mats[e.relation].get_or_insert_with(|| vec![0.0; n * n]);
            m[e.from * n + e.to] += 1.0 / degree[e.from] as f64;
        }
        mats.into_iter()
            .map(|m| m.map(|d| Tensor::matrix(n, n, d).map_err(Error::from)).transpose())
            .collect()
    }
}

impl Encoder for GcnEncoder {
    fn name(&self) -> &'static str {
        "gcn"
    }

    fn encode(&self, g: &mut Graph, x: Var, mask: &[bool], edges: &[Edge]) -> Result<EncoderOutput> {
        let n = check_input(g, x, mask, self.hidden)?;
        let aggs = self.aggregators(n, mask, edges)?;
        let mut h = x;
        for layer in &self.layers {
            let mut acc = layer.self_map.forward(g, h)?;
            for (agg, map) in aggs.iter().zip(&layer.relation_maps) {
                let Some(a) = agg else { continue };
                let a = g.constant(a.clone());
                let gathered = g.matmul(a, h)?;
                let msg = map.forward(g, gathered)?;
                acc = g.add(acc, msg)?;
            }
            let act = g.relu(acc)?;
            let act = mask_rows(g, act, mask)?;
            h = g.dropout(act, self.dropout)?;
        }
        EncoderOutput::new(g, h, mask.to_vec())
    }
}

/// Stacks `k` shifted copies of `x` (`[N x d]`, zero padded by `left` rows
/// before and `right` after) into `[N x k*d]`.
pub(crate) fn unfold(g: &mut Graph, x: Var, k: usize, left: usize, right: usize) -> Result<Var> {
    let (n, d) = (g.shape(x)[0], g.shape(x)[1]);
    let mut parts = Vec::new();
    if left > 0 {
        parts.push(g.constant(Tensor::zeros(&[left, d])));
    }
    parts.push(x);
    if right > 0 {
        parts.push(g.constant(Tensor::zeros(&[right, d])));
    }
    let padded = if parts.len() == 1 { x } else { g.concat(&parts, 0)? };
    let shifted = (0..k)
        .map(|o| g.slice(padded, 0, o, n))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(if k == 1 { shifted[0] } else { g.concat(&shifted, 1)? })
}

/// Gated linear unit convolution layer: `(X*W_a) . sigmoid(X*W_b)`.
#[derive(Clone, Debug)]
pub(crate) struct GluConv {
    a: Linear,
    b: Linear,
    kernel: usize,
}

impl GluConv {
    pub(crate) fn new(init: &mut ParamInit, prefix: &str, d: usize, kernel: usize) -> Result<Self> {
        Ok(Self {
            a: Linear::new(init, &format!("{prefix}.a"), kernel * d, d, true)?,
            b: Linear::new(init, &format!("{prefix}.b"), kernel * d, d, true)?,
            kernel,
        })
    }

    pub(crate) fn forward(&self, g: &mut Graph, x: Var, causal: bool) -> Result<Var> {
        let k = self.kernel;
        let (left, right) = if causal { (k - 1, 0) } else { ((k - 1) / 2, (k - 1) / 2) };
        let u = unfold(g, x, k, left, right)?;
        let a = self.a.forward(g, u)?;
        let b = self.b.forward(g, u)?;
        let gate = g.sigmoid(b)?;
        Ok(g.mul(a, gate)?)
    }
}

pub struct ConvEncoder {
    layers: Vec<GluConv>,
    hidden: usize,
    dropout: f64,
}

impl ConvEncoder {
    pub fn new(init: &mut ParamInit, prefix: &str, section: &str, spec: &EncoderSpec) -> Result<Self> {
        if spec.kernel % 2 == 0 {
            return Err(Error::config(section, "kernel", format!("kernel size must be odd, got {}", spec.kernel)));
        }
        let layers = (0..spec.layers)
            .map(|l| GluConv::new(init, &format!("{prefix}.layer{l}"), spec.hidden, spec.kernel))
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            hidden: spec.hidden,
            dropout: spec.dropout,
        })
    }
}

impl Encoder for ConvEncoder {
    fn name(&self) -> &'static str {
        "conv"
    }

    fn encode(&self, g: &mut Graph, x: Var, mask: &[bool], _edges: &[Edge]) -> Result<EncoderOutput> {
        check_input(g, x, mask, self.hidden)?;
        let mut h = x;
        for layer in &self.layers {
            h = mask_rows(g, h, mask)?;
            let y = layer.forward(g, h, false)?;
            let y = g.dropout(y, self.dropout)?;
            h = g.add(y, h)?;
        }
        EncoderOutput::new(g, h, mask.to_vec())
    }
}

#[derive(Clone, Debug)]
pub(crate) struct TransformerBlock {
    attn: MultiHead,
    norm1: LayerNorm,
    ffn: FeedForward,
    norm2: LayerNorm,
}

impl TransformerBlock {
    pub(crate) fn new(init: &mut ParamInit, prefix: &str, section: &str, d: usize, heads: usize, ffn: usize) -> Result<Self> {
        Ok(Self {
            attn: MultiHead::new(init, &format!("{prefix}.attn"), section, d, heads)?,
            norm1: LayerNorm::new(init, &format!("{prefix}.norm1"), d)?,
            ffn: FeedForward::new(init, &format!("{prefix}.ffn"), d, ffn)?,
            norm2: LayerNorm::new(init, &format!("{prefix}.norm2"), d)?,
        })
    }

    /// Post-norm block; `memory` is forwarded to the attention.
    pub(crate) fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        mask: &[bool],
        memory: Option<(Var, Var)>,
        dropout: f64,
    ) -> Result<Var> {
        let a = self.attn.forward(g, x, x, mask, false, memory)?.out;
        let a = g.dropout(a, dropout)?;
        let h = g.add(x, a)?;
        let h = self.norm1.forward(g, h)?;
        let f = self.ffn.forward(g, h)?;
        let f = g.dropout(f, dropout)?;
        let h2 = g.add(h, f)?;
        self.norm2.forward(g, h2)
    }
}

pub struct SelfAttentionEncoder {
    blocks: Vec<TransformerBlock>,
    hidden: usize,
    dropout: f64,
}

impl SelfAttentionEncoder {
    pub fn new(init: &mut ParamInit, prefix: &str, section: &str, spec: &EncoderSpec) -> Result<Self> {
        let blocks = (0..spec.layers)
            .map(|l| TransformerBlock::new(init, &format!("{prefix}.layer{l}"), section, spec.hidden, spec.heads, spec.ffn))
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            hidden: spec.hidden,
            dropout: spec.dropout,
        })
    }
}

impl Encoder for SelfAttentionEncoder {
    fn name(&self) -> &'static str {
        "self_attention"
    }

    fn encode(&self, g: &mut Graph, x: Var, mask: &[bool], _edges: &[Edge]) -> Result<EncoderOutput> {
        check_input(g, x, mask, self.hidden)?;
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(g, h, mask, None, self.dropout)?;
        }
        EncoderOutput::new(g, h, mask.to_vec())
    }
}

/// Builds a registered encoder family by name.
pub fn build_encoder(
    name: &str,
    init: &mut ParamInit,
    prefix: &str,
    section: &str,
    spec: &EncoderSpec,
) -> Result<Box<dyn Encoder>> {
    Ok(match name {
        "lstm" => Box::new(LstmEncoder::new(init, prefix, spec)?),
        "gcn" => Box::new(GcnEncoder::new(init, prefix, spec)?),
        "conv" => Box::new(ConvEncoder::new(init, prefix, section, spec)?),
        "self_attention" => Box::new(SelfAttentionEncoder::new(init, prefix, section, spec)?),
        other => {
            return Err(Error::UnknownModule {
                stage: "encoder".into(),
                name: other.into(),
                available: ENCODERS.join(", "),
            })
        }
    })
}

pub const ENCODERS: [&str; 4] = ["conv", "gcn", "lstm", "self_attention"];
