//! Parameterized building blocks: embeddings, linear maps, the LSTM cell
//! and dropout, plus the initialization rules they use.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamRole, ParamStore, Tensor, Var};

/// Parameter initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum InitSpec {
    /// U(-0.05, 0.05).
    UniformPm05,
    /// U(-k·d^-1/2, k·d^-1/2) for kernel width `k` and fan-in `d`.
    ConvFanIn { kernel_width: usize, fan_in: usize },
}

impl InitSpec {
    pub fn bound(&self) -> f64 {
        match *self {
            InitSpec::UniformPm05 => 0.05,
            InitSpec::ConvFanIn {
                kernel_width,
                fan_in,
            } => kernel_width as f64 / (fan_in as f64).sqrt(),
        }
    }
}

pub fn initialize(param: &mut Tensor, spec: InitSpec, rng: &mut dyn RngCore) {
    let bound = spec.bound();
    for v in param.data_mut() {
        *v = rng.gen_range(-bound..=bound);
    }
}

/// Forward-pass mode. Training carries the dropout rate and its RNG.
pub enum Mode<'r> {
    Eval,
    Train {
        dropout: f64,
        rng: &'r mut dyn RngCore,
    },
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }

    /// Applies dropout when training; identity otherwise.
    pub fn dropout(&mut self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        match self {
            Mode::Eval => Ok(x),
            Mode::Train { dropout, rng } => self::dropout(g, x, *dropout, true, &mut **rng),
        }
    }
}

/// Inverted dropout: zero each entry with probability `rate` and scale the
/// survivors by `1 / (1 - rate)`. Identity when not training.
pub fn dropout(
    g: &mut Graph<'_>,
    x: Var,
    rate: f64,
    training: bool,
    rng: &mut dyn RngCore,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} must lie in [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let mask = (0..g.value(x).len())
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    g.apply_mask(x, mask)
}

/// Word (or position) lookup table.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub table: ParamId,
    pub pad: Option<usize>,
    pub vocab: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        dim: usize,
        pad: Option<usize>,
        rng: &mut dyn RngCore,
    ) -> Self {
        let mut t = Tensor::zeros(&[vocab, dim]);
        initialize(&mut t, InitSpec::UniformPm05, rng);
        if let Some(p) = pad {
            t.row_mut(p).iter_mut().for_each(|v| *v = 0.0);
        }
        let table = store.add(name, t, ParamRole::Embedding { pad });
        Self {
            table,
            pad,
            vocab,
            dim,
        }
    }

    /// Looks up `ids`, producing `prefix ++ [dim]`.
    pub fn embed(&self, g: &mut Graph<'_>, ids: &[usize], prefix: &[usize]) -> Result<Var> {
        let t = g.param(self.table);
        g.gather(t, ids, prefix, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl LinearLayer {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut dyn RngCore) -> Self {
        let mut layer = Self::without_bias(store, name, d_in, d_out, rng);
        let mut b = Tensor::zeros(&[d_out]);
        initialize(&mut b, InitSpec::UniformPm05, rng);
        layer.b = Some(store.add(format!("{name}.bias"), b, ParamRole::Dense));
        layer
    }

    /// `x·W` only; for outputs consumed solely through a softmax over
    /// positions, where a shared bias cancels.
    pub fn without_bias(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut dyn RngCore) -> Self {
        let mut w = Tensor::zeros(&[d_in, d_out]);
        initialize(&mut w, InitSpec::UniformPm05, rng);
        Self {
            w: store.add(format!("{name}.weight"), w, ParamRole::Dense),
            b: None,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// LSTM cell with fused gates in (input, forget, candidate, output) order,
/// no peepholes.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, rng: &mut dyn RngCore) -> Self {
        let mut w_x = Tensor::zeros(&[d_in, 4 * hidden]);
        let mut w_h = Tensor::zeros(&[hidden, 4 * hidden]);
        let mut b = Tensor::zeros(&[4 * hidden]);
        for t in [&mut w_x, &mut w_h, &mut b] {
            initialize(t, InitSpec::UniformPm05, rng);
        }
        Self {
            w_x: store.add(format!("{name}.w_x"), w_x, ParamRole::Dense),
            w_h: store.add(format!("{name}.w_h"), w_h, ParamRole::Dense),
            b: store.add(format!("{name}.bias"), b, ParamRole::Dense),
            d_in,
            hidden,
        }
    }

    /// Input projection `x·W_x + b` for any leading shape.
    pub fn project_input(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w_x), g.param(self.b));
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }

    /// One step on `[B, d_in]` inputs with `[B, hidden]` state.
    pub fn step(&self, g: &mut Graph<'_>, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let xw = self.project_input(g, x)?;
        self.step_projected(g, xw, h, c)
    }

    /// One step given the already projected input `x·W_x + b`.
    pub fn step_projected(&self, g: &mut Graph<'_>, xw: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let n = self.hidden;
        let w_h = g.param(self.w_h);
        let hw = g.matmul(h, w_h)?;
        let pre = g.add(xw, hw)?;
        let i = g.slice_last(pre, 0, n)?;
        let i = g.sigmoid(i);
        let f = g.slice_last(pre, n, n)?;
        let f = g.sigmoid(f);
        let cand = g.slice_last(pre, 2 * n, n)?;
        let cand = g.tanh(cand);
        let o = g.slice_last(pre, 3 * n, n)?;
        let o = g.sigmoid(o);
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c_next = g.add(keep, write)?;
        let squashed = g.tanh(c_next);
        let h_next = g.mul(o, squashed)?;
        Ok((h_next, c_next))
    }
}
