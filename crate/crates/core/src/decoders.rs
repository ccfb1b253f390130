//! Decoder stage and the vocabulary projection head.

use xmodal_tensor::{Graph, Tensor, Var};

use crate::config::SectionView;
use crate::encoders::{EncoderOutput, GluConv};
use crate::error::{Error, Result};
use crate::interaction::Interaction;
use crate::nn::{row, stack_rows, FeedForward, GruCell, LayerNorm, Linear, LstmCell, MultiHead, ParamInit};

/// Per-sequence decoding state.
#[derive(Clone, Debug)]
pub enum DecoderState {
    /// `(h, c)` per layer (GRU layers keep `c` unused), plus the attention
    /// LSTM state when the interaction is top-down.
    Recurrent {
        layers: Vec<(Var, Var)>,
        top_down: Option<(Var, Var)>,
        pos: usize,
    },
    /// Input rows seen so far; each step re-reads the whole prefix.
    Cached { inputs: Vec<Var>, pos: usize },
}

impl DecoderState {
    pub fn position(&self) -> usize {
        match self {
            DecoderState::Recurrent { pos, .. } | DecoderState::Cached { pos, .. } => *pos,
        }
    }
}

pub trait Decoder: Send + Sync {
    fn name(&self) -> &'static str;

    fn hidden(&self) -> usize;

    fn init_state(&self, g: &mut Graph, enc: &EncoderOutput, interaction: &dyn Interaction) -> Result<DecoderState>;

    /// Consumes one `[d]` word embedding; returns the `[d]` output row.
    fn step(
        &self,
        g: &mut Graph,
        state: &DecoderState,
        word: Var,
        enc: &EncoderOutput,
        interaction: &dyn Interaction,
    ) -> Result<(Var, DecoderState)>;

    /// Teacher-forced pass over `[T x d]` embeddings, giving `[T x d]`.
    fn forward(&self, g: &mut Graph, words: Var, enc: &EncoderOutput, interaction: &dyn Interaction) -> Result<Var> {
        let t = g.shape(words)[0];
        let mut state = self.init_state(g, enc, interaction)?;
        let mut rows = Vec::with_capacity(t);
        for i in 0..t {
            let w = row(g, words, i)?;
            let (h, next) = self.step(g, &state, w, enc, interaction)?;
            rows.push(h);
            state = next;
        }
        stack_rows(g, &rows)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderSpec {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub kernel: usize,
    pub ffn: usize,
    pub dropout: f64,
    pub tie_weights: bool,
}

impl DecoderSpec {
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
            dropout,
            tie_weights: s.bool("tie_weights", false)?,
        })
    }
}

enum Cells {
    Lstm(Vec<LstmCell>),
    Gru(Vec<GruCell>),
}

/// LSTM or GRU decoder reading `[word; context]` each step, or
/// `[attended; h_att]` under a top-down interaction.
pub struct RecurrentDecoder {
    cells: Cells,
    hidden: usize,
    dropout: f64,
}

impl RecurrentDecoder {
    pub fn new(init: &mut ParamInit, prefix: &str, spec: &DecoderSpec, gru: bool) -> Result<Self> {
        let d = spec.hidden;
        let input = |l: usize| if l == 0 { 2 * d } else { d };
        let cells = if gru {
            Cells::Gru(
                (0..spec.layers)
                    .map(|l| GruCell::new(init, &format!("{prefix}.layer{l}"), input(l), d))
                    .collect::<Result<_>>()?,
            )
        } else {
            Cells::Lstm(
                (0..spec.layers)
                    .map(|l| LstmCell::new(init, &format!("{prefix}.layer{l}"), input(l), d))
                    .collect::<Result<_>>()?,
            )
        };
        Ok(Self {
            cells,
            hidden: d,
            dropout: spec.dropout,
        })
    }

    fn layers(&self) -> usize {
        match &self.cells {
            Cells::Lstm(c) => c.len(),
            Cells::Gru(c) => c.len(),
        }
    }
}

impl Decoder for RecurrentDecoder {
    fn name(&self) -> &'static str {
        match self.cells {
            Cells::Lstm(_) => "lstm",
            Cells::Gru(_) => "gru",
        }
    }

    fn hidden(&self) -> usize {
        self.hidden
    }

    fn init_state(&self, g: &mut Graph, _enc: &EncoderOutput, interaction: &dyn Interaction) -> Result<DecoderState> {
        let z = g.constant(Tensor::zeros(&[self.hidden]));
        Ok(DecoderState::Recurrent {
            layers: vec![(z, z); self.layers()],
            top_down: interaction.as_top_down().map(|_| (z, z)),
            pos: 0,
        })
    }

    fn step(
        &self,
        g: &mut Graph,
        state: &DecoderState,
        word: Var,
        enc: &EncoderOutput,
        interaction: &dyn Interaction,
    ) -> Result<(Var, DecoderState)> {
        let DecoderState::Recurrent { layers, top_down, pos } = state else {
            return Err(Error::Invalid("recurrent decoder given a cached state".into()));
        };
        let h_top = layers.last().expect("at least one layer").0;
        let (mut input, top_down) = match (interaction.as_top_down(), top_down) {
            (Some(td), Some(td_state)) => {
                let (att, next) = td.step(g, h_top, word, enc, *td_state)?;
                (g.concat(&[att.context, next.0], 0)?, Some(next))
            }
            _ => {
                let ctx = interaction.attend(g, h_top, enc)?.context;
                (g.concat(&[word, ctx], 0)?, None)
            }
        };
        let mut next = Vec::with_capacity(layers.len());
        for (l, &(h, c)) in layers.iter().enumerate() {
            let (h2, c2) = match &self.cells {
                Cells::Lstm(cells) => cells[l].step(g, input, h, c)?,
                Cells::Gru(cells) => (cells[l].step(g, input, h)?, c),
            };
            next.push((h2, c2));
            input = g.dropout(h2, self.dropout)?;
        }
        let out = next.last().expect("at least one layer").0;
        Ok((
            out,
            DecoderState::Recurrent {
                layers: next,
                top_down,
                pos: pos + 1,
            },
        ))
    }
}

/// Shared stepping for decoders that are causal functions of their inputs.
fn cached_step<D: Decoder + ?Sized>(
    dec: &D,
    g: &mut Graph,
    state: &DecoderState,
    word: Var,
    enc: &EncoderOutput,
    interaction: &dyn Interaction,
) -> Result<(Var, DecoderState)> {
    let DecoderState::Cached { inputs, pos } = state else {
        return Err(Error::Invalid("cached decoder given a recurrent state".into()));
    };
    let mut inputs = inputs.clone();
    inputs.push(word);
    let x = stack_rows(g, &inputs)?;
    let out = dec.forward(g, x, enc, interaction)?;
    let last = row(g, out, inputs.len() - 1)?;
    Ok((last, DecoderState::Cached { inputs, pos: pos + 1 }))
}

struct DecoderBlock {
    self_attn: MultiHead,
    norm1: LayerNorm,
    norm2: LayerNorm,
    ffn: FeedForward,
    norm3: LayerNorm,
}

/// Causal self-attention, cross-attention through the interaction module,
/// and a feed-forward layer, each wrapped in residual + layer norm.
pub struct TransformerDecoder {
    blocks: Vec<DecoderBlock>,
    hidden: usize,
    dropout: f64,
}

impl TransformerDecoder {
    pub fn new(init: &mut ParamInit, prefix: &str, spec: &DecoderSpec) -> Result<Self> {
        let d = spec.hidden;
        let blocks = (0..spec.layers)
            .map(|l| {
                let p = format!("{prefix}.layer{l}");
                Ok(DecoderBlock {
                    self_attn: MultiHead::new(init, &format!("{p}.self_attn"), "decoder", d, spec.heads)?,
                    norm1: LayerNorm::new(init, &format!("{p}.norm1"), d)?,
                    norm2: LayerNorm::new(init, &format!("{p}.norm2"), d)?,
                    ffn: FeedForward::new(init, &format!("{p}.ffn"), d, spec.ffn)?,
                    norm3: LayerNorm::new(init, &format!("{p}.norm3"), d)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            hidden: d,
            dropout: spec.dropout,
        })
    }
}

impl Decoder for TransformerDecoder {
    fn name(&self) -> &'static str {
        "transformer"
    }

    fn hidden(&self) -> usize {
        self.hidden
    }

    fn init_state(&self, _g: &mut Graph, _enc: &EncoderOutput, _i: &dyn Interaction) -> Result<DecoderState> {
        Ok(DecoderState::Cached { inputs: Vec::new(), pos: 0 })
    }

    fn step(
        &self,
        g: &mut Graph,
        state: &DecoderState,
        word: Var,
        enc: &EncoderOutput,
        interaction: &dyn Interaction,
    ) -> Result<(Var, DecoderState)> {
        cached_step(self, g, state, word, enc, interaction)
    }

    fn forward(&self, g: &mut Graph, words: Var, enc: &EncoderOutput, interaction: &dyn Interaction) -> Result<Var> {
        let t = g.shape(words)[0];
        let all = vec![true; t];
        let mut h = words;
        for b in &self.blocks {
            let a = b.self_attn.forward(g, h, h, &all, true, None)?.out;
            let a = g.dropout(a, self.dropout)?;
            let x = g.add(h, a)?;
            let x = b.norm1.forward(g, x)?;
            let c = interaction.attend_rows(g, x, enc)?;
            let c = g.dropout(c, self.dropout)?;
            let y = g.add(x, c)?;
            let y = b.norm2.forward(g, y)?;
            let f = b.ffn.forward(g, y)?;
            let f = g.dropout(f, self.dropout)?;
            let z = g.add(y, f)?;
            h = b.norm3.forward(g, z)?;
        }
        Ok(h)
    }
}

/// Left-padded GLU convolutions with a residual and an attention read after
/// every layer.
pub struct ConvDecoder {
    layers: Vec<GluConv>,
    hidden: usize,
    dropout: f64,
}

impl ConvDecoder {
    pub fn new(init: &mut ParamInit, prefix: &str, spec: &DecoderSpec) -> Result<Self> {
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

impl Decoder for ConvDecoder {
    fn name(&self) -> &'static str {
        "conv"
    }

    fn hidden(&self) -> usize {
        self.hidden
    }

    fn init_state(&self, _g: &mut Graph, _enc: &EncoderOutput, _i: &dyn Interaction) -> Result<DecoderState> {
        Ok(DecoderState::Cached { inputs: Vec::new(), pos: 0 })
    }

    fn step(
        &self,
        g: &mut Graph,
        state: &DecoderState,
        word: Var,
        enc: &EncoderOutput,
        interaction: &dyn Interaction,
    ) -> Result<(Var, DecoderState)> {
        cached_step(self, g, state, word, enc, interaction)
    }

    fn forward(&self, g: &mut Graph, words: Var, enc: &EncoderOutput, interaction: &dyn Interaction) -> Result<Var> {
        let mut h = words;
        for layer in &self.layers {
            let y = layer.forward(g, h, true)?;
            let y = g.dropout(y, self.dropout)?;
            let x = g.add(h, y)?;
            let c = interaction.attend_rows(g, x, enc)?;
            h = g.add(x, c)?;
        }
        Ok(h)
    }
}

pub const DECODERS: [&str; 4] = ["conv", "gru", "lstm", "transformer"];

pub fn build_decoder(name: &str, init: &mut ParamInit, prefix: &str, spec: &DecoderSpec) -> Result<Box<dyn Decoder>> {
    Ok(match name {
        "lstm" => Box::new(RecurrentDecoder::new(init, prefix, spec, false)?),
        "gru" => Box::new(RecurrentDecoder::new(init, prefix, spec, true)?),
        "transformer" => Box::new(TransformerDecoder::new(init, prefix, spec)?),
        "conv" => {
            if spec.kernel == 0 {
                return Err(Error::config("decoder", "kernel", "must be positive"));
            }
            Box::new(ConvDecoder::new(init, prefix, spec)?)
        }
        other => {
            return Err(Error::UnknownModule {
                stage: "decoder".into(),
                name: other.into(),
                available: DECODERS.join(", "),
            })
        }
    })
}

/// Affine map from decoder outputs to vocabulary logits. With tied weights
/// the word embedding table is reused as the projection.
#[derive(Clone, Debug)]
pub struct LogitsHead {
    w: Option<String>,
    tied: Option<String>,
    b: String,
    pub vocab_size: usize,
}

impl LogitsHead {
    pub fn new(init: &mut ParamInit, prefix: &str, hidden: usize, vocab_size: usize, tied_table: Option<&str>) -> Result<Self> {
        let w = match tied_table {
            Some(_) => None,
            None => Some(init.xavier(&format!("{prefix}.w"), hidden, vocab_size)?),
        };
        Ok(Self {
            w,
            tied: tied_table.map(str::to_string),
            b: init.zeros(&format!("{prefix}.b"), vocab_size)?,
            vocab_size,
        })
    }

    /// `[d] -> [V]` or `[T x d] -> [T x V]`.
    pub fn project(&self, g: &mut Graph, hidden: Var) -> Result<Var> {
        let w = match (&self.w, &self.tied) {
            (Some(w), _) => g.param(w)?,
            (None, Some(table)) => {
                let t = g.param(table)?;
                g.transpose(t)?
            }
            (None, None) => unreachable!("head has either weights or a tied table"),
        };
        let y = g.matmul(hidden, w)?;
        let b = g.param(&self.b)?;
        Ok(match g.shape(y).len() {
            1 => g.add(y, b)?,
            _ => {
                let n = g.shape(y)[0];
                let bb = g.broadcast_rows(b, n)?;
                g.add(y, bb)?
            }
        })
    }
}

/// Linear map between encoder and decoder widths.
pub fn adapter(init: &mut ParamInit, from: usize, to: usize) -> Result<Linear> {
    Linear::new(init, "adapter", from, to, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interaction::{build_interaction, InteractionSpec, INTERACTIONS};
    use crate::nn::probe;
    use xmodal_tensor::{gradient_check, ParamStore};

    fn dspec(d: usize) -> DecoderSpec {
        DecoderSpec {
            hidden: d,
            layers: 2,
            heads: 2,
            kernel: 3,
            ffn: 2 * d,
            dropout: 0.0,
            tie_weights: false,
        }
    }

    fn ispec(d: usize) -> InteractionSpec {
        InteractionSpec {
            width: d,
            att_hidden: d,
            heads: 2,
            memory_slots: 2,
            ffn: 2 * d,
            tie_streams: false,
        }
    }

    fn mat(n: usize, d: usize, salt: f64) -> Tensor {
        Tensor::matrix(n, d, (0..n * d).map(|i| ((i as f64 + salt) * 0.71).sin()).collect()).unwrap()
    }

    fn setup(dec: &str, inter: &str, d: usize) -> (ParamStore, Box<dyn Decoder>, Box<dyn Interaction>) {
        let mut store = ParamStore::new();
        let mut init = ParamInit::new(&mut store, 21);
        let i = build_interaction(inter, &mut init, "interaction", &ispec(d)).unwrap();
        let dd = build_decoder(dec, &mut init, "decoder", &dspec(d)).unwrap();
        (store, dd, i)
    }

    fn encoded(g: &mut Graph, d: usize) -> EncoderOutput {
        let s = g.constant(mat(3, d, 9.0));
        EncoderOutput::new(g, s, vec![true, true, false]).unwrap()
    }

    #[test]
    fn stepwise_matches_full_forward() {
        for dec in DECODERS {
            for inter in INTERACTIONS {
                let (store, d, i) = setup(dec, inter, 4);
                let mut g = Graph::new(&store);
                let enc = encoded(&mut g, 4);
                let enc = i.refine(&mut g, enc).unwrap();
                let words = g.constant(mat(4, 4, 0.0));
                let full = d.forward(&mut g, words, &enc, i.as_ref()).unwrap();
                let full = g.value(full).to_vec();
                let mut state = d.init_state(&mut g, &enc, i.as_ref()).unwrap();
                for t in 0..4 {
                    let w = row(&mut g, words, t).unwrap();
                    let (h, next) = d.step(&mut g, &state, w, &enc, i.as_ref()).unwrap();
                    for (a, b) in g.value(h).iter().zip(&full[t * 4..(t + 1) * 4]) {
                        assert!((a - b).abs() < 1e-9, "{dec}/{inter} t={t}");
                    }
                    state = next;
                }
                assert_eq!(state.position(), 4);
            }
        }
    }

    #[test]
    fn future_tokens_never_influence_the_past() {
        for dec in ["transformer", "conv"] {
            for inter in ["attention", "x_linear", "meshed_memory"] {
                let (store, d, i) = setup(dec, inter, 4);
                let base = mat(5, 4, 1.0);
                let run = |x: &Tensor| {
                    let mut g = Graph::new(&store);
                    let enc = encoded(&mut g, 4);
                    let w = g.constant(x.clone());
                    let out = d.forward(&mut g, w, &enc, i.as_ref()).unwrap();
                    g.tensor(out)
                };
                let y0 = run(&base);
                for s in [1, 3, 4] {
                    let mut x = base.clone();
                    for j in 0..4 {
                        x.data_mut()[s * 4 + j] += 0.75;
                    }
                    let y = run(&x);
                    for t in 0..5 {
                        assert_eq!(y.row(t) == y0.row(t), t < s, "{dec}/{inter} s={s} t={t}");
                    }
                }
            }
        }
    }

    #[test]
    fn zero_lstm_decoder_hidden_is_zero() {
        let (mut store, d, i) = setup("lstm", "attention", 3);
        for (name, t) in store.iter_mut() {
            if name.starts_with("decoder") {
                t.data_mut().fill(0.0);
            }
        }
        let mut g = Graph::new(&store);
        let enc = encoded(&mut g, 3);
        let words = g.constant(mat(3, 3, 2.0));
        let out = d.forward(&mut g, words, &enc, i.as_ref()).unwrap();
        assert!(g.value(out).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn conv_kernel_one_is_position_wise() {
        let mut store = ParamStore::new();
        let mut init = ParamInit::new(&mut store, 2);
        let i = build_interaction("attention", &mut init, "interaction", &ispec(3)).unwrap();
        let d = ConvDecoder::new(&mut init, "decoder", &DecoderSpec { kernel: 1, layers: 1, ..dspec(3) }).unwrap();
        let run = |x: &Tensor| {
            let mut g = Graph::new(&store);
            let s = g.constant(Tensor::zeros(&[2, 3]));
            let enc = EncoderOutput::new(&mut g, s, vec![true; 2]).unwrap();
            let w = g.constant(x.clone());
            let out = d.forward(&mut g, w, &enc, i.as_ref()).unwrap();
            g.tensor(out)
        };
        let a = mat(3, 3, 0.0);
        let mut b = a.clone();
        b.data_mut()[0] += 1.0;
        let (ya, yb) = (run(&a), run(&b));
        assert_ne!(ya.row(0), yb.row(0));
        assert_eq!(ya.row(1), yb.row(1));
        assert_eq!(ya.row(2), yb.row(2));
    }

    #[test]
    fn logits_head_contracts() {
        let mut store = ParamStore::new();
        let head = LogitsHead::new(&mut ParamInit::new(&mut store, 1), "head", 3, 5, None).unwrap();
        store.get_mut("head.w").unwrap().data_mut().fill(0.0);
        store.get_mut("head.b").unwrap().data_mut().copy_from_slice(&[0.5, -1.0, 2.0, 0.0, 3.0]);
        let mut g = Graph::new(&store);
        let h = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = head.project(&mut g, h).unwrap();
        assert_eq!(g.value(y), &[0.5, -1.0, 2.0, 0.0, 3.0]);
        let lp = g.log_softmax(y, 0).unwrap();
        let total: f64 = g.value(lp).iter().map(|x| x.exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);

        let mut store = ParamStore::new();
        let mut init = ParamInit::new(&mut store, 1);
        let table = init.xavier("embed.word", 5, 3).unwrap();
        let tied = LogitsHead::new(&mut init, "head", 3, 5, Some(&table)).unwrap();
        assert!(!store.contains("head.w"));
        let err = gradient_check(&mut store, 1e-5, |g| -> Result<Var> {
            let h = g.constant(mat(2, 3, 0.0));
            let y = tied.project(g, h)?;
            probe(g, y)
        })
        .unwrap();
        assert!(err < 1e-4);
    }

    #[test]
    fn every_decoder_passes_gradient_check() {
        for dec in DECODERS {
            for inter in ["attention", "top_down"] {
                let (mut store, d, i) = setup(dec, inter, 4);
                let mut init = ParamInit::new(&mut store, 5);
                let head = LogitsHead::new(&mut init, "head", 4, 6, None).unwrap();
                let err = gradient_check(&mut store, 1e-5, |g| -> Result<Var> {
                    let enc = encoded(g, 4);
                    let words = g.constant(mat(3, 4, 0.0));
                    let out = d.forward(g, words, &enc, i.as_ref())?;
                    let logits = head.project(g, out)?;
                    probe(g, logits)
                })
                .unwrap();
                assert!(err < 1e-4, "{dec}/{inter}: {err}");
            }
        }
    }
}
