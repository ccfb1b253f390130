//! Layers shared by the stage modules.

use xmodal_tensor::{Graph, Init, ParamStore, Var};

use crate::error::{Error, Result};

/// Creates named parameters from the global seed.
pub struct ParamInit<'a> {
    store: &'a mut ParamStore,
    seed: u64,
}

impl<'a> ParamInit<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self { store, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn store(&mut self) -> &mut ParamStore {
        self.store
    }

    pub fn xavier(&mut self, name: &str, rows: usize, cols: usize) -> Result<String> {
        self.store.init(name, &[rows, cols], Init::Xavier, self.seed)?;
        Ok(name.to_string())
    }

    pub fn zeros(&mut self, name: &str, n: usize) -> Result<String> {
        self.store.init(name, &[n], Init::Zeros, self.seed)?;
        Ok(name.to_string())
    }

    pub fn ones(&mut self, name: &str, n: usize) -> Result<String> {
        self.store.init(name, &[n], Init::Ones, self.seed)?;
        Ok(name.to_string())
    }
}

/// `[n x in] -> [n x out]` (or `[in] -> [out]`).
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: String,
    pub b: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(init: &mut ParamInit, prefix: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let w = init.xavier(&format!("{prefix}.w"), in_dim, out_dim)?;
        let b = if bias {
            Some(init.zeros(&format!("{prefix}.b"), out_dim)?)
        } else {
            None
        };
        Ok(Self { w, b, in_dim, out_dim })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&self.w)?;
        let y = g.matmul(x, w)?;
        let Some(b) = &self.b else { return Ok(y) };
        let b = g.param(b)?;
        let y = match g.shape(y).len() {
            1 => g.add(y, b)?,
            _ => {
                let n = g.shape(y)[0];
                let bb = g.broadcast_rows(b, n)?;
                g.add(y, bb)?
            }
        };
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: String,
    bias: String,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(init: &mut ParamInit, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: init.ones(&format!("{prefix}.gain"), d)?,
            bias: init.zeros(&format!("{prefix}.bias"), d)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(&self.gain)?;
        let bias = g.param(&self.bias)?;
        Ok(g.layer_norm(x, gain, bias, Self::EPS)?)
    }
}

/// Position-wise two-layer ReLU network.
#[derive(Clone, Debug)]
pub struct FeedForward {
    l1: Linear,
    l2: Linear,
}

impl FeedForward {
    pub fn new(init: &mut ParamInit, prefix: &str, d: usize, inner: usize) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(init, &format!("{prefix}.l1"), d, inner, true)?,
            l2: Linear::new(init, &format!("{prefix}.l2"), inner, d, true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.l1.forward(g, x)?;
        let h = g.relu(h)?;
        self.l2.forward(g, h)
    }
}

/// Output of multi-head attention: `[Tq x d]` plus one `[Tq x N]` weight
/// map per head.
pub struct HeadsOutput {
    pub out: Var,
    pub weights: Vec<Var>,
}

/// Scaled dot-product multi-head attention with input and output projections.
#[derive(Clone, Debug)]
pub struct MultiHead {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    d: usize,
}

impl MultiHead {
    pub fn new(init: &mut ParamInit, prefix: &str, section: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(
                section,
                "heads",
                format!("width {d} is not divisible by {heads} heads"),
            ));
        }
        Ok(Self {
            q: Linear::new(init, &format!("{prefix}.q"), d, d, true)?,
            k: Linear::new(init, &format!("{prefix}.k"), d, d, true)?,
            v: Linear::new(init, &format!("{prefix}.v"), d, d, true)?,
            o: Linear::new(init, &format!("{prefix}.o"), d, d, true)?,
            heads,
            d,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Projected keys of `source`.
    pub fn key(&self, g: &mut Graph, source: Var) -> Result<Var> {
        self.k.forward(g, source)
    }

    /// `queries` attend over `source` rows whose `key_mask` entry is true.
    /// With `causal`, query `i` only sees source rows `j <= i`. `memory`
    /// appends already-projected key and value rows that are always visible.
    pub fn forward(
        &self,
        g: &mut Graph,
        queries: Var,
        source: Var,
        key_mask: &[bool],
        causal: bool,
        memory: Option<(Var, Var)>,
    ) -> Result<HeadsOutput> {
        let tq = g.shape(queries)[0];
        let q = self.q.forward(g, queries)?;
        let mut k = self.k.forward(g, source)?;
        let mut v = self.v.forward(g, source)?;
        let mut mask_row = key_mask.to_vec();
        if let Some((mk, mv)) = memory {
            let m = g.shape(mk)[0];
            k = g.concat(&[k, mk], 0)?;
            v = g.concat(&[v, mv], 0)?;
            mask_row.extend(std::iter::repeat(true).take(m));
        }
        let n = mask_row.len();
        let mut mask = Vec::with_capacity(tq * n);
        for i in 0..tq {
            mask.extend(mask_row.iter().enumerate().map(|(j, &m)| m && (!causal || j <= i)));
        }
        let dh = self.d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctx = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice(q, 1, h * dh, dh)?,
                    g.slice(k, 1, h * dh, dh)?,
                    g.slice(v, 1, h * dh, dh)?,
                )
            };
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let s = g.scale(s, scale)?;
            let w = g.softmax(s, 1, Some(&mask))?;
            ctx.push(g.matmul(w, vh)?);
            weights.push(w);
        }
        let cat = if ctx.len() == 1 { ctx[0] } else { g.concat(&ctx, 1)? };
        Ok(HeadsOutput {
            out: self.o.forward(g, cat)?,
            weights,
        })
    }
}

#[derive(Clone, Debug)]
pub struct LstmCell {
    x: Linear,
    h: Linear,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(init: &mut ParamInit, prefix: &str, input: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            x: Linear::new(init, &format!("{prefix}.wx"), input, 4 * hidden, true)?,
            h: Linear::new(init, &format!("{prefix}.wh"), hidden, 4 * hidden, false)?,
            hidden,
        })
    }

    /// Gate order in the packed projections: input, forget, output, candidate.
    pub fn step(&self, g: &mut Graph, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let d = self.hidden;
        let zx = self.x.forward(g, x)?;
        let zh = self.h.forward(g, h)?;
        let z = g.add(zx, zh)?;
        let i = g.slice(z, 0, 0, d)?;
        let f = g.slice(z, 0, d, d)?;
        let o = g.slice(z, 0, 2 * d, d)?;
        let cand = g.slice(z, 0, 3 * d, d)?;
        let i = g.sigmoid(i)?;
        let f = g.sigmoid(f)?;
        let o = g.sigmoid(o)?;
        let cand = g.tanh(cand)?;
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c2 = g.add(keep, write)?;
        let tc = g.tanh(c2)?;
        let h2 = g.mul(o, tc)?;
        Ok((h2, c2))
    }
}

#[derive(Clone, Debug)]
pub struct GruCell {
    x: Linear,
    h: Linear,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(init: &mut ParamInit, prefix: &str, input: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            x: Linear::new(init, &format!("{prefix}.wx"), input, 3 * hidden, true)?,
            h: Linear::new(init, &format!("{prefix}.wh"), hidden, 3 * hidden, true)?,
            hidden,
        })
    }

    /// Gate order: reset, update, candidate. `h' = h + z * (n - h)`, so an
    /// update gate of zero keeps the previous hidden state.
    pub fn step(&self, g: &mut Graph, x: Var, h: Var) -> Result<Var> {
        let d = self.hidden;
        let zx = self.x.forward(g, x)?;
        let zh = self.h.forward(g, h)?;
        let rx = g.slice(zx, 0, 0, d)?;
        let rh = g.slice(zh, 0, 0, d)?;
        let ux = g.slice(zx, 0, d, d)?;
        let uh = g.slice(zh, 0, d, d)?;
        let nx = g.slice(zx, 0, 2 * d, d)?;
        let nh = g.slice(zh, 0, 2 * d, d)?;
        let r = g.add(rx, rh)?;
        let r = g.sigmoid(r)?;
        let z = g.add(ux, uh)?;
        let z = g.sigmoid(z)?;
        let gated = g.mul(r, nh)?;
        let n = g.add(nx, gated)?;
        let n = g.tanh(n)?;
        let delta = g.sub(n, h)?;
        let upd = g.mul(z, delta)?;
        Ok(g.add(h, upd)?)
    }
}

/// Weighted sum of all entries with fixed pseudo-random weights. Used as a
/// scalar probe in gradient checks, where plain sums can be nearly constant
/// (e.g. after layer normalization).
#[cfg(test)]
pub(crate) fn probe(g: &mut Graph, x: Var) -> Result<Var> {
    let n = g.value(x).len();
    let shape = g.shape(x).to_vec();
    let w = (0..n).map(|i| ((i as f64 + 1.0) * 1.37).sin()).collect();
    let w = g.constant_from(&shape, w)?;
    let p = g.mul(x, w)?;
    Ok(g.sum(p)?)
}

/// Row `i` of a matrix as a rank-1 vector.
pub fn row(g: &mut Graph, x: Var, i: usize) -> Result<Var> {
    let d = g.shape(x)[1];
    let r = g.slice(x, 0, i, 1)?;
    Ok(g.reshape(r, &[d])?)
}

/// A rank-1 vector as a `[1 x d]` matrix.
pub fn as_row(g: &mut Graph, x: Var) -> Result<Var> {
    let d = g.shape(x)[0];
    Ok(g.reshape(x, &[1, d])?)
}

pub fn stack_rows(g: &mut Graph, rows: &[Var]) -> Result<Var> {
    let mats = rows
        .iter()
        .map(|&r| as_row(g, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(g.concat(&mats, 0)?)
}

/// Zeroes rows whose mask entry is false.
pub fn mask_rows(g: &mut Graph, x: Var, mask: &[bool]) -> Result<Var> {
    if mask.iter().all(|&m| m) {
        return Ok(x);
    }
    let d = g.shape(x)[1];
    let data = mask
        .iter()
        .flat_map(|&m| std::iter::repeat(if m { 1.0 } else { 0.0 }).take(d))
        .collect();
    let m = g.constant_from(&[mask.len(), d], data)?;
    Ok(g.mul(x, m)?)
}

/// Mean over rows whose mask entry is true.
pub fn masked_mean(g: &mut Graph, x: Var, mask: &[bool]) -> Result<Var> {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Tensor(xmodal_tensor::TensorError::Degenerate("mean over zero rows")));
    }
    let w = mask
        .iter()
        .map(|&m| if m { 1.0 / count as f64 } else { 0.0 })
        .collect();
    let w = g.constant_from(&[mask.len()], w)?;
    Ok(g.matmul(w, x)?)
}
