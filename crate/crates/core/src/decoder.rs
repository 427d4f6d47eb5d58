//! Attentional LSTM decoder.
//!
//! One step embeds the previous target token `y_i`, attends over the
//! encoder output with the top-layer state `h_i`, advances the LSTM stack on
//! `[g_i; c_i]`, and maps the new top state through a linear layer of width
//! `E` and the output projection to vocabulary scores.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::data::PAD;
use crate::encoders::EncoderOutput;
use crate::error::{Error, Result};
use crate::layers::{initialize, EmbeddingTable, InitSpec, LinearLayer, LstmCell, Mode};
use crate::numerics::{Graph, ParamId, ParamRole, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub layers: usize,
    pub hidden: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { layers: 1, hidden: 512 }
    }
}

/// Per-layer `(h, c)`, each `[B, hidden]`, on some graph.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
}

/// Graph-independent copy of a [`DecoderState`].
#[derive(Clone, Debug, PartialEq)]
pub struct StateSnapshot {
    pub h: Vec<Tensor>,
    pub c: Vec<Tensor>,
}

impl DecoderState {
    pub fn snapshot(&self, g: &Graph<'_>) -> StateSnapshot {
        StateSnapshot {
            h: self.h.iter().map(|&v| g.value(v).clone()).collect(),
            c: self.c.iter().map(|&v| g.value(v).clone()).collect(),
        }
    }

    pub fn top_h(&self) -> Var {
        *self.h.last().unwrap()
    }
}

impl StateSnapshot {
    pub fn zeros(layers: usize, batch: usize, hidden: usize) -> Self {
        let z = Tensor::zeros(&[batch, hidden]);
        Self {
            h: vec![z.clone(); layers],
            c: vec![z; layers],
        }
    }

    /// Places the snapshot on `g` as gradient-free constants.
    pub fn restore(&self, g: &mut Graph<'_>) -> DecoderState {
        DecoderState {
            h: self.h.iter().map(|t| g.constant(t.clone())).collect(),
            c: self.c.iter().map(|t| g.constant(t.clone())).collect(),
        }
    }

    /// Concatenates the rows of `parts` in order.
    pub fn stack(parts: &[&StateSnapshot]) -> Self {
        let layers = parts.first().map_or(0, |p| p.h.len());
        let join = |get: &dyn Fn(&StateSnapshot) -> &Tensor| {
            let d = get(parts[0]).last_dim();
            let data: Vec<f64> = parts.iter().flat_map(|p| get(p).data().iter().copied()).collect();
            Tensor::new(vec![data.len() / d, d], data).unwrap()
        };
        Self {
            h: (0..layers).map(|l| join(&|p| &p.h[l])).collect(),
            c: (0..layers).map(|l| join(&|p| &p.c[l])).collect(),
        }
    }

    /// Rows `rows` of every tensor, in that order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let pick = |t: &Tensor| {
            let d = t.last_dim();
            let data = rows.iter().flat_map(|&r| t.row(r).iter().copied()).collect();
            Tensor::new(vec![rows.len(), d], data).unwrap()
        };
        Self {
            h: self.h.iter().map(pick).collect(),
            c: self.c.iter().map(pick).collect(),
        }
    }
}

/// Output of one decoder step.
pub struct Step {
    pub state: DecoderState,
    /// `[B, V]`, or `[B, |candidates|]` when restricted.
    pub logits: Var,
    /// Attention weights `[B, m]`.
    pub attention: Var,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub embed: EmbeddingTable,
    pub attn: LinearLayer,
    pub cells: Vec<LstmCell>,
    pub pre_out: LinearLayer,
    /// Output projection rows, `[V, E]`.
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub vocab: usize,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, config: DecoderConfig, embed_dim: usize, vocab: usize, rng: &mut dyn RngCore) -> Result<Self> {
        if config.layers == 0 || config.hidden == 0 {
            return Err(Error::Config("decoder layers and hidden must be positive".into()));
        }
        let (e, h) = (embed_dim, config.hidden);
        let embed = EmbeddingTable::new(store, "dec.words", vocab, e, Some(PAD), rng);
        let attn = LinearLayer::new(store, "dec.attn", h, e, rng);
        let cells = (0..config.layers)
            .map(|l| LstmCell::new(store, &format!("dec.l{l}"), if l == 0 { 2 * e } else { h }, h, rng))
            .collect();
        let pre_out = LinearLayer::new(store, "dec.pre_out", h, e, rng);
        let mut w = Tensor::zeros(&[vocab, e]);
        let mut b = Tensor::zeros(&[vocab]);
        initialize(&mut w, InitSpec::UniformPm05, rng);
        initialize(&mut b, InitSpec::UniformPm05, rng);
        Ok(Self {
            config,
            embed,
            attn,
            cells,
            pre_out,
            out_w: store.add("dec.out.weight", w, ParamRole::Dense),
            out_b: store.add("dec.out.bias", b, ParamRole::Dense),
            vocab,
        })
    }

    pub fn initial_state(&self, g: &mut Graph<'_>, batch: usize) -> DecoderState {
        StateSnapshot::zeros(self.config.layers, batch, self.config.hidden).restore(g)
    }

    /// Dot-product attention: `d = W_d h + b_d + g`, `a = softmax(z·d)`
    /// over real source positions, `c = Σ_j a_j agg_j`. Returns `(a, c)`.
    /// An encoder batch of 1 is shared by every query row.
    pub fn attend(&self, g: &mut Graph<'_>, h: Var, emb: Var, enc: &EncoderOutput) -> Result<(Var, Var)> {
        let proj = self.attn.forward(g, h)?;
        let d = g.add(proj, emb)?;
        let scores = g.batch_dot(enc.z, d)?;
        let rows = g.shape(scores)[0];
        let mut mask = enc.mask();
        if enc.batch() == 1 && rows > 1 {
            mask = mask.repeat(rows);
        }
        let a = if mask.iter().all(|&m| m) {
            g.softmax_rows(scores)?
        } else {
            let masked = g.mask_fill(scores, &mask)?;
            g.softmax_rows(masked)?
        };
        let c = g.batch_weighted(a, enc.agg)?;
        Ok((a, c))
    }

    /// Advances every row of `state` by one token of `prev`.
    pub fn step(
        &self,
        g: &mut Graph<'_>,
        state: &DecoderState,
        prev: &[usize],
        enc: &EncoderOutput,
        mode: &mut Mode<'_>,
        candidates: Option<&[usize]>,
    ) -> Result<Step> {
        let emb = self.embed.embed(g, prev, &[prev.len()])?;
        let emb = mode.dropout(g, emb)?;
        let (attention, ctx) = self.attend(g, state.top_h(), emb, enc)?;
        let mut x = g.concat(emb, ctx)?;
        let mut next = DecoderState {
            h: Vec::with_capacity(self.cells.len()),
            c: Vec::with_capacity(self.cells.len()),
        };
        for (l, cell) in self.cells.iter().enumerate() {
            let (h, c) = cell.step(g, x, state.h[l], state.c[l])?;
            next.h.push(h);
            next.c.push(c);
            x = h;
        }
        let top = mode.dropout(g, x)?;
        let o = self.pre_out.forward(g, top)?;
        let logits = self.project(g, o, candidates)?;
        Ok(Step {
            state: next,
            logits,
            attention,
        })
    }

    /// `o·W_oᵀ + b_o`, restricted to the rows in `candidates` if given.
    pub fn project(&self, g: &mut Graph<'_>, o: Var, candidates: Option<&[usize]>) -> Result<Var> {
        let (w, b) = (g.param(self.out_w), g.param(self.out_b));
        let Some(ids) = candidates else {
            let y = g.matmul_nt(o, w)?;
            return g.add_bias(y, b);
        };
        let rows = g.gather(w, ids, &[ids.len()], None)?;
        let column = g.reshape(b, &[self.vocab, 1])?;
        let picked = g.gather(column, ids, &[ids.len()], None)?;
        let bias = g.reshape(picked, &[ids.len()])?;
        let y = g.matmul_nt(o, rows)?;
        g.add_bias(y, bias)
    }
}

/// Padded target ids `[batch, steps]`, each row `<s> … </s>`.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub steps: usize,
    pub lengths: Vec<usize>,
}

impl TargetBatch {
    pub fn new(seqs: &[Vec<usize>]) -> Result<Self> {
        if seqs.is_empty() || seqs.iter().any(|s| s.len() < 2) {
            return Err(Error::Data("target needs at least <s> and </s>".into()));
        }
        let steps = seqs.iter().map(Vec::len).max().unwrap();
        let mut ids = vec![PAD; seqs.len() * steps];
        for (b, s) in seqs.iter().enumerate() {
            ids[b * steps..b * steps + s.len()].copy_from_slice(s);
        }
        Ok(Self {
            ids,
            batch: seqs.len(),
            steps,
            lengths: seqs.iter().map(Vec::len).collect(),
        })
    }

    /// Number of prediction steps (inputs `0..steps-1`).
    pub fn predictions(&self) -> usize {
        self.steps - 1
    }

    /// Input ids at step `t`.
    pub fn inputs(&self, t: usize) -> Vec<usize> {
        (0..self.batch).map(|b| self.ids[b * self.steps + t]).collect()
    }

    /// Gold ids for step `t` and their loss weights (0 past the end).
    pub fn targets(&self, t: usize) -> (Vec<usize>, Vec<f64>) {
        (0..self.batch)
            .map(|b| {
                let live = t + 1 < self.lengths[b];
                (self.ids[b * self.steps + t + 1], if live { 1.0 } else { 0.0 })
            })
            .unzip()
    }

    /// Predicted tokens in steps `range`.
    pub fn token_count(&self, range: std::ops::Range<usize>) -> usize {
        self.lengths
            .iter()
            .map(|&l| range.clone().filter(|&t| t + 1 < l).count())
            .sum()
    }
}

impl Decoder {
    /// Teacher-forced summed negative log-likelihood over prediction steps
    /// `range`, starting from `state`. Returns the loss and the state after
    /// the last step.
    pub fn teacher_forced(
        &self,
        g: &mut Graph<'_>,
        enc: &EncoderOutput,
        tgt: &TargetBatch,
        range: std::ops::Range<usize>,
        state: DecoderState,
        mode: &mut Mode<'_>,
    ) -> Result<(Var, DecoderState)> {
        let mut state = state;
        let mut total: Option<Var> = None;
        for t in range {
            let step = self.step(g, &state, &tgt.inputs(t), enc, mode, None)?;
            let (gold, weights) = tgt.targets(t);
            let nll = g.cross_entropy(step.logits, &gold, &weights)?;
            total = Some(match total {
                None => nll,
                Some(acc) => g.add(acc, nll)?,
            });
            state = step.state;
        }
        let loss = total.ok_or_else(|| Error::Data("empty decoding range".into()))?;
        Ok((loss, state))
    }
}
