//! Source encoders. Every family maps a padded `[B, T]` id batch to
//! attention keys `z` and aggregation vectors `agg`, both `[B, T, E]`.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::data::PAD;
use crate::error::{Error, Result};
use crate::layers::{initialize, EmbeddingTable, InitSpec, LinearLayer, LstmCell, Mode};
use crate::numerics::{Graph, ParamId, ParamRole, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Pooling,
    Conv,
    BiLstm,
    UniLstm,
}

impl EncoderKind {
    pub fn is_recurrent(self) -> bool {
        matches!(self, EncoderKind::BiLstm | EncoderKind::UniLstm)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub embed_dim: usize,
    /// Add position embeddings; defaults to on for pooling and conv.
    pub use_positions: Option<bool>,
    /// Position table size. Later positions reuse the last row.
    pub max_positions: usize,
    pub pool_width: usize,
    pub layers_a: usize,
    pub layers_c: usize,
    pub kernel_width: usize,
    pub hidden_a: usize,
    pub hidden_c: usize,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Conv,
            embed_dim: 256,
            use_positions: None,
            max_positions: 256,
            pool_width: 5,
            layers_a: 1,
            layers_c: 1,
            kernel_width: 3,
            hidden_a: 512,
            hidden_c: 256,
            lstm_hidden: 512,
            lstm_layers: 1,
        }
    }
}

impl EncoderConfig {
    pub fn positions(&self) -> bool {
        self.use_positions.unwrap_or(!self.kind.is_recurrent())
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("embed_dim", self.embed_dim),
            ("hidden_a", self.hidden_a),
            ("hidden_c", self.hidden_c),
            ("lstm_hidden", self.lstm_hidden),
            ("layers_a", self.layers_a),
            ("layers_c", self.layers_c),
            ("lstm_layers", self.lstm_layers),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder {name} must be positive")));
        }
        if self.kernel_width % 2 == 0 || self.pool_width % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel width {} and pool width {} must be odd",
                self.kernel_width, self.pool_width
            )));
        }
        if self.max_positions < 175 {
            return Err(Error::Config(format!(
                "max_positions {} is below the training length limit of 175",
                self.max_positions
            )));
        }
        Ok(())
    }
}

/// Padded source ids, `[batch, steps]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub steps: usize,
    pub lengths: Vec<usize>,
}

impl SourceBatch {
    pub fn new(seqs: &[Vec<usize>]) -> Result<Self> {
        if seqs.is_empty() || seqs.iter().any(Vec::is_empty) {
            return Err(Error::Data("source batch needs at least one token per sentence".into()));
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

    pub fn single(ids: &[usize]) -> Result<Self> {
        Self::new(&[ids.to_vec()])
    }

    /// `true` at real tokens, `[batch * steps]`.
    pub fn mask(&self) -> Vec<bool> {
        valid_mask(&self.lengths, self.steps)
    }
}

fn valid_mask(lengths: &[usize], steps: usize) -> Vec<bool> {
    lengths
        .iter()
        .flat_map(|&l| (0..steps).map(move |t| t < l))
        .collect()
}

/// Encoder result; `z` and `agg` live on the graph that produced them.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub z: Var,
    pub agg: Var,
    pub lengths: Vec<usize>,
    pub steps: usize,
}

impl EncoderOutput {
    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn mask(&self) -> Vec<bool> {
        valid_mask(&self.lengths, self.steps)
    }
}

/// One residual convolution layer.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub w: ParamId,
    pub b: ParamId,
}

/// Linear in, residual convolution blocks, linear out.
#[derive(Clone, Debug)]
pub struct ConvStack {
    pub input: LinearLayer,
    pub blocks: Vec<ConvLayer>,
    pub output: LinearLayer,
}

impl ConvStack {
    fn new(store: &mut ParamStore, name: &str, e: usize, hidden: usize, layers: usize, k: usize, out_bias: bool, rng: &mut dyn RngCore) -> Self {
        let input = LinearLayer::new(store, &format!("{name}.in"), e, hidden, rng);
        let spec = InitSpec::ConvFanIn {
            kernel_width: k,
            fan_in: hidden,
        };
        let role = ParamRole::Conv { fan_in: hidden };
        let blocks = (0..layers)
            .map(|l| {
                let mut w = Tensor::zeros(&[k, hidden, hidden]);
                let mut b = Tensor::zeros(&[hidden]);
                initialize(&mut w, spec, rng);
                initialize(&mut b, spec, rng);
                ConvLayer {
                    w: store.add(format!("{name}.conv{l}.weight"), w, role),
                    b: store.add(format!("{name}.conv{l}.bias"), b, role),
                }
            })
            .collect();
        let output = if out_bias {
            LinearLayer::new(store, &format!("{name}.out"), hidden, e, rng)
        } else {
            LinearLayer::without_bias(store, &format!("{name}.out"), hidden, e, rng)
        };
        Self { input, blocks, output }
    }

    /// Returns the last block's output (before the output projection).
    fn hidden(&self, g: &mut Graph<'_>, e: Var, lengths: &[usize]) -> Result<Var> {
        let mut x = self.input.forward(g, e)?;
        for layer in &self.blocks {
            let (w, b) = (g.param(layer.w), g.param(layer.b));
            x = conv_block(g, x, w, b, lengths)?;
        }
        Ok(x)
    }

    fn forward(&self, g: &mut Graph<'_>, e: Var, lengths: &[usize]) -> Result<Var> {
        let h = self.hidden(g, e, lengths)?;
        self.output.forward(g, h)
    }
}

/// `tanh(conv(x) + x)`: residual add, then the nonlinearity.
pub fn conv_block(g: &mut Graph<'_>, x: Var, w: Var, b: Var, lengths: &[usize]) -> Result<Var> {
    let y = g.conv1d_same(x, w, b, Some(lengths))?;
    let r = g.add(y, x)?;
    Ok(g.tanh(r))
}

#[derive(Clone, Debug)]
pub enum EncoderBody {
    Pooling,
    Conv { a: ConvStack, c: ConvStack },
    BiLstm { forward: Vec<LstmCell>, backward: Vec<LstmCell>, out: LinearLayer },
    UniLstm { cells: Vec<LstmCell>, out: LinearLayer },
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub words: EmbeddingTable,
    pub positions: Option<EmbeddingTable>,
    pub body: EncoderBody,
}

fn lstm_stack(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, layers: usize, rng: &mut dyn RngCore) -> Vec<LstmCell> {
    (0..layers)
        .map(|l| LstmCell::new(store, &format!("{name}.l{l}"), if l == 0 { d_in } else { hidden }, hidden, rng))
        .collect()
}

/// Runs `cell` left to right over `[B, T, d]` from a zero state.
fn run_lstm(g: &mut Graph<'_>, cell: &LstmCell, x: Var) -> Result<Var> {
    let batch = g.shape(x)[0];
    let steps = g.shape(x)[1];
    let xw = cell.project_input(g, x)?;
    let mut h = g.constant(Tensor::zeros(&[batch, cell.hidden]));
    let mut c = g.constant(Tensor::zeros(&[batch, cell.hidden]));
    let mut outs = Vec::with_capacity(steps);
    for t in 0..steps {
        let xt = g.select_time(xw, t)?;
        (h, c) = cell.step_projected(g, xt, h, c)?;
        outs.push(h);
    }
    g.stack_time(&outs)
}

impl Encoder {
    pub fn new(store: &mut ParamStore, config: EncoderConfig, src_vocab: usize, rng: &mut dyn RngCore) -> Result<Self> {
        config.validate()?;
        let e = config.embed_dim;
        let words = EmbeddingTable::new(store, "enc.words", src_vocab, e, Some(PAD), rng);
        let positions = config
            .positions()
            .then(|| EmbeddingTable::new(store, "enc.positions", config.max_positions, e, None, rng));
        let body = match config.kind {
            EncoderKind::Pooling => EncoderBody::Pooling,
            EncoderKind::Conv => EncoderBody::Conv {
                a: ConvStack::new(store, "enc.cnn_a", e, config.hidden_a, config.layers_a, config.kernel_width, false, rng),
                c: ConvStack::new(store, "enc.cnn_c", e, config.hidden_c, config.layers_c, config.kernel_width, true, rng),
            },
            EncoderKind::BiLstm => {
                let h = config.lstm_hidden;
                EncoderBody::BiLstm {
                    forward: lstm_stack(store, "enc.fwd", e, h, config.lstm_layers, rng),
                    backward: lstm_stack(store, "enc.bwd", e, h, config.lstm_layers, rng),
                    out: LinearLayer::new(store, "enc.out", 2 * h, e, rng),
                }
            }
            EncoderKind::UniLstm => {
                let h = config.lstm_hidden;
                EncoderBody::UniLstm {
                    cells: lstm_stack(store, "enc.lstm", e, h, config.lstm_layers, rng),
                    out: LinearLayer::new(store, "enc.out", h, e, rng),
                }
            }
        };
        Ok(Self {
            config,
            words,
            positions,
            body,
        })
    }

    /// `w_j + l_j` (or `w_j` without positions), `[B, T, E]`.
    pub fn source_embed(&self, g: &mut Graph<'_>, src: &SourceBatch) -> Result<Var> {
        let prefix = [src.batch, src.steps];
        let w = self.words.embed(g, &src.ids, &prefix)?;
        let Some(pos) = &self.positions else {
            return Ok(w);
        };
        let last = pos.vocab - 1;
        let ids: Vec<usize> = (0..src.batch)
            .flat_map(|_| (0..src.steps).map(|t| t.min(last)))
            .collect();
        let l = pos.embed(g, &ids, &prefix)?;
        g.add(w, l)
    }

    pub fn encode(&self, g: &mut Graph<'_>, src: &SourceBatch, mode: &mut Mode<'_>) -> Result<EncoderOutput> {
        let e = self.source_embed(g, src)?;
        let e = mode.dropout(g, e)?;
        let lengths = &src.lengths;
        let (z, agg) = match &self.body {
            EncoderBody::Pooling => (g.window_mean(e, self.config.pool_width, Some(lengths))?, e),
            EncoderBody::Conv { a, c } => (a.forward(g, e, lengths)?, c.forward(g, e, lengths)?),
            EncoderBody::BiLstm { forward, backward, out } => {
                let top_f = self.run_stack(g, forward, e, lengths, false)?;
                let top_b = self.run_stack(g, backward, e, lengths, true)?;
                let both = g.concat(top_f, top_b)?;
                let z = out.forward(g, both)?;
                (z, z)
            }
            EncoderBody::UniLstm { cells, out } => {
                let mut x = e;
                for cell in cells {
                    x = run_lstm(g, cell, x)?;
                }
                let z = out.forward(g, x)?;
                (z, z)
            }
        };
        Ok(EncoderOutput {
            z,
            agg,
            lengths: src.lengths.clone(),
            steps: src.steps,
        })
    }

    /// One direction of the bidirectional encoder: every layer after the
    /// first reads its predecessor's output reversed in time, and the top
    /// output is flipped back into source order when needed.
    fn run_stack(&self, g: &mut Graph<'_>, cells: &[LstmCell], e: Var, lengths: &[usize], reversed_input: bool) -> Result<Var> {
        let mut x = if reversed_input { g.reverse_time(e, lengths)? } else { e };
        for (l, cell) in cells.iter().enumerate() {
            if l > 0 {
                x = g.reverse_time(x, lengths)?;
            }
            x = run_lstm(g, cell, x)?;
        }
        let flips = usize::from(reversed_input) + cells.len() - 1;
        if flips % 2 == 1 {
            x = g.reverse_time(x, lengths)?;
        }
        Ok(x)
    }

    /// Output of the last attention-side convolution block, before the
    /// output projection. Only defined for the conv encoder.
    pub fn conv_a_hidden(&self, g: &mut Graph<'_>, src: &SourceBatch) -> Result<Var> {
        let EncoderBody::Conv { a, .. } = &self.body else {
            return Err(Error::Config("conv_a_hidden requires the conv encoder".into()));
        };
        let e = self.source_embed(g, src)?;
        a.hidden(g, e, &src.lengths)
    }
}

/// Layers a stack of width-`k` convolutions needs before every pair of
/// positions `n` words apart can interact.
pub fn min_path_length(n: usize, k: usize) -> Result<usize> {
    if k < 2 {
        return Err(Error::Config(format!("kernel width {k} must be at least 2")));
    }
    if n == 0 {
        return Err(Error::Config("path length needs n >= 1".into()));
    }
    Ok(1.max((n - 1).div_ceil(k - 1)))
}

/// Width of the input span one output of `layers` stacked width-`k`
/// convolutions depends on.
pub fn receptive_field(layers: usize, k: usize) -> usize {
    layers * (k - 1) + 1
}
