//! Playlist aggregators `g`: a sequence of song vectors to one playlist
//! vector.
//!
//! Every aggregator here is causal, so [`Aggregator::states`] returns in one
//! pass the `l × D` matrix whose row `i` is `g` of the prefix ending at `i`.
//! The playlist vector is its last row.

use serde::{Deserialize, Serialize};

use crate::error::{Result, RtaError};
use crate::numerics::{AttentionSpec, ParamId, ParamStore, Rng, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregatorKind {
    Avg,
    Cnn,
    Gru,
    Transformer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregatorConfig {
    pub kind: AggregatorKind,
    /// Longest accepted sequence `L` (size of the position table).
    pub max_len: usize,
    pub cnn_kernel: usize,
    pub cnn_layers: usize,
    pub tf_layers: usize,
    pub tf_heads: usize,
    /// Feed-forward width as a multiple of `D`.
    pub tf_ffn_mult: usize,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        AggregatorConfig {
            kind: AggregatorKind::Avg,
            max_len: crate::corpus::DEFAULT_MAX_LEN,
            cnn_kernel: 3,
            cnn_layers: 1,
            tf_layers: 2,
            tf_heads: 4,
            tf_ffn_mult: 4,
        }
    }
}

impl AggregatorConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.max_len == 0 {
            return Err(RtaError::Config("max_len must be ≥ 1".into()));
        }
        match self.kind {
            AggregatorKind::Cnn if !(1..=8).contains(&self.cnn_kernel) || self.cnn_layers == 0 => Err(RtaError::Config(
                format!("cnn needs kernel in [1, 8] and ≥ 1 layer, got k = {} with {} layers", self.cnn_kernel, self.cnn_layers),
            )),
            AggregatorKind::Transformer if self.tf_layers == 0 || self.tf_ffn_mult == 0 => {
                Err(RtaError::Config("transformer needs ≥ 1 layer and a nonzero feed-forward width".into()))
            }
            AggregatorKind::Transformer if self.tf_heads == 0 || dim % self.tf_heads != 0 => Err(RtaError::Config(format!(
                "tf_heads = {} does not divide D = {dim}",
                self.tf_heads
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
struct GluLayer {
    wa: ParamId,
    ba: ParamId,
    wb: ParamId,
    bb: ParamId,
}

#[derive(Debug, Clone)]
struct GruCell {
    wx: ParamId,
    wh: ParamId,
    bx: ParamId,
    bh: ParamId,
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
enum Body {
    Avg,
    Cnn(Vec<GluLayer>),
    Gru(GruCell),
    Transformer { pos: ParamId, blocks: Vec<DecoderBlock> },
}

#[derive(Debug, Clone)]
pub struct Aggregator {
    pub config: AggregatorConfig,
    pub dim: usize,
    body: Body,
}

/// `(name, rows, cols, init std or None for a constant, constant, wd-exempt)`
type Spec = (String, usize, usize, Option<f32>, f32, bool);

fn param_specs(cfg: &AggregatorConfig, d: usize) -> Vec<Spec> {
    let w = |name: String, r: usize, c: usize| (name, r, c, Some(1.0 / (r as f32).sqrt()), 0.0, false);
    let bias = |name: String, c: usize| (name, 1, c, None, 0.0, true);
    let gain = |name: String, c: usize| (name, 1, c, None, 1.0, true);
    let mut out = Vec::new();
    match cfg.kind {
        AggregatorKind::Avg => {}
        AggregatorKind::Cnn => {
            for i in 0..cfg.cnn_layers {
                let k = cfg.cnn_kernel * d;
                out.push(w(format!("g.cnn{i}.wa"), k, d));
                out.push(bias(format!("g.cnn{i}.ba"), d));
                out.push(w(format!("g.cnn{i}.wb"), k, d));
                out.push(bias(format!("g.cnn{i}.bb"), d));
            }
        }
        AggregatorKind::Gru => {
            out.push(w("g.gru.wx".into(), d, 3 * d));
            out.push(w("g.gru.wh".into(), d, 3 * d));
            out.push(bias("g.gru.bx".into(), 3 * d));
            out.push(bias("g.gru.bh".into(), 3 * d));
        }
        AggregatorKind::Transformer => {
            out.push(("g.tf.pos".into(), cfg.max_len, d, Some(0.02), 0.0, false));
            let f = cfg.tf_ffn_mult * d;
            // residual projections start small so each block begins near the identity
            let small = Some(0.02 / ((2 * cfg.tf_layers) as f32).sqrt());
            for i in 0..cfg.tf_layers {
                let p = |s: &str| format!("g.tf{i}.{s}");
                out.push(gain(p("ln1_gain"), d));
                out.push(bias(p("ln1_bias"), d));
                out.push(w(p("wq"), d, d));
                out.push(w(p("wk"), d, d));
                out.push(w(p("wv"), d, d));
                out.push((p("wo"), d, d, small, 0.0, false));
                out.push(bias(p("bo"), d));
                out.push(gain(p("ln2_gain"), d));
                out.push(bias(p("ln2_bias"), d));
                out.push(w(p("w1"), d, f));
                out.push(bias(p("b1"), f));
                out.push((p("w2"), f, d, small, 0.0, false));
                out.push(bias(p("b2"), d));
            }
        }
    }
    out
}

impl Aggregator {
    pub fn init(params: &mut ParamStore, config: &AggregatorConfig, dim: usize, rng: &mut Rng) -> Result<Self> {
        config.validate(dim)?;
        for (name, r, c, std, fill, exempt) in param_specs(config, dim) {
            let t = match std {
                Some(s) => rng.normal_matrix(r, c, s),
                None => Tensor::filled(&[r, c], fill),
            };
            params.add(name, t, exempt)?;
        }
        Self::attach(params, config, dim)
    }

    pub fn attach(params: &ParamStore, config: &AggregatorConfig, dim: usize) -> Result<Self> {
        config.validate(dim)?;
        let mut ids = Vec::new();
        for (name, r, c, ..) in param_specs(config, dim) {
            let id = params
                .id(&name)
                .ok_or_else(|| RtaError::Config(format!("missing parameter `{name}`")))?;
            let t = params.tensor(id);
            if t.rows() != r || t.cols() != c {
                return Err(RtaError::Shape {
                    op: "Aggregator::attach",
                    left: t.shape().to_vec(),
                    right: vec![r, c],
                });
            }
            ids.push(id);
        }
        let body = match config.kind {
            AggregatorKind::Avg => Body::Avg,
            AggregatorKind::Cnn => Body::Cnn(
                ids.chunks(4)
                    .map(|c| GluLayer {
                        wa: c[0],
                        ba: c[1],
                        wb: c[2],
                        bb: c[3],
                    })
                    .collect(),
            ),
            AggregatorKind::Gru => Body::Gru(GruCell {
                wx: ids[0],
                wh: ids[1],
                bx: ids[2],
                bh: ids[3],
            }),
            AggregatorKind::Transformer => Body::Transformer {
                pos: ids[0],
                blocks: ids[1..]
                    .chunks(13)
                    .map(|c| DecoderBlock {
                        ln1_gain: c[0],
                        ln1_bias: c[1],
                        wq: c[2],
                        wk: c[3],
                        wv: c[4],
                        wo: c[5],
                        bo: c[6],
                        ln2_gain: c[7],
                        ln2_bias: c[8],
                        w1: c[9],
                        b1: c[10],
                        w2: c[11],
                        b2: c[12],
                    })
                    .collect(),
            },
        };
        Ok(Aggregator {
            config: config.clone(),
            dim,
            body,
        })
    }

    /// Prefix states: row `i` of the result is `g(seq[..=i])`.
    pub fn states(&self, tape: &mut Tape, seq: Var, dropout: f32, rng: &mut Rng) -> Result<Var> {
        let (l, d) = (tape.value(seq).rows(), tape.value(seq).cols());
        if l == 0 {
            return Err(RtaError::Domain("cannot aggregate an empty sequence".into()));
        }
        if d != self.dim {
            return Err(RtaError::Shape {
                op: "Aggregator::states",
                left: vec![l, d],
                right: vec![l, self.dim],
            });
        }
        if l > self.config.max_len {
            return Err(RtaError::Domain(format!("sequence of length {l} exceeds max_len {}", self.config.max_len)));
        }
        match &self.body {
            Body::Avg => Ok(tape.cum_mean(seq)),
            Body::Cnn(layers) => self.cnn(tape, layers, seq),
            Body::Gru(cell) => self.gru(tape, cell, seq),
            Body::Transformer { pos, blocks } => self.transformer(tape, *pos, blocks, seq, dropout, rng),
        }
    }

    /// `g(seq)`, a `1 × D` row.
    pub fn aggregate(&self, tape: &mut Tape, seq: Var) -> Result<Var> {
        let s = self.states(tape, seq, 0.0, &mut Rng::seed_from(0))?;
        let l = tape.value(s).rows();
        tape.row(s, l - 1)
    }

    /// Evaluates `g` on a plain `l × D` tensor.
    pub fn apply(&self, params: &ParamStore, seq: &Tensor) -> Result<Vec<f32>> {
        let mut tape = Tape::new(params);
        let x = tape.constant(seq.clone());
        let out = self.aggregate(&mut tape, x)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Prefix states of a plain tensor, outside training.
    pub fn prefix_states(&self, params: &ParamStore, seq: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new(params);
        let x = tape.constant(seq.clone());
        let s = self.states(&mut tape, x, 0.0, &mut Rng::seed_from(0))?;
        Ok(tape.value(s).clone())
    }

    /// Gated causal convolutions `A ⊙ σ(B)` over left-padded windows. The
    /// receptive field spans `(k − 1)·layers` past positions.
    fn cnn(&self, tape: &mut Tape, layers: &[GluLayer], seq: Var) -> Result<Var> {
        let mut x = seq;
        for layer in layers {
            let u = tape.causal_unfold(x, self.config.cnn_kernel)?;
            let (wa, ba, wb, bb) = (tape.param(layer.wa), tape.param(layer.ba), tape.param(layer.wb), tape.param(layer.bb));
            let a = tape.matmul(u, wa)?;
            let a = tape.add_row(a, ba)?;
            let b = tape.matmul(u, wb)?;
            let b = tape.add_row(b, bb)?;
            let gate = tape.sigmoid(b);
            x = tape.mul(a, gate)?;
        }
        Ok(x)
    }

    /// GRU with gate order (r, z, n), zero initial state:
    /// `n = tanh(W_n x + b_n + r ⊙ (U_n h + c_n))`, `h' = (1 − z) ⊙ n + z ⊙ h`.
    fn gru(&self, tape: &mut Tape, cell: &GruCell, seq: Var) -> Result<Var> {
        let d = self.dim;
        let l = tape.value(seq).rows();
        let (wx, wh, bx, bh) = (tape.param(cell.wx), tape.param(cell.wh), tape.param(cell.bx), tape.param(cell.bh));
        let gx = tape.matmul(seq, wx)?;
        let gx = tape.add_row(gx, bx)?;
        let mut h = tape.constant(Tensor::zeros(&[1, d]));
        let mut states = Vec::with_capacity(l);
        for t in 0..l {
            let xt = tape.row(gx, t)?;
            let gh = tape.matmul(h, wh)?;
            let gh = tape.add_row(gh, bh)?;
            let (xr, xz, xn) = (tape.slice_cols(xt, 0, d)?, tape.slice_cols(xt, d, 2 * d)?, tape.slice_cols(xt, 2 * d, 3 * d)?);
            let (hr, hz, hn) = (tape.slice_cols(gh, 0, d)?, tape.slice_cols(gh, d, 2 * d)?, tape.slice_cols(gh, 2 * d, 3 * d)?);
            let r = tape.add(xr, hr)?;
            let r = tape.sigmoid(r);
            let z = tape.add(xz, hz)?;
            let z = tape.sigmoid(z);
            let rn = tape.mul(r, hn)?;
            let n = tape.add(xn, rn)?;
            let n = tape.tanh(n);
            // h' = n + z ⊙ (h − n)
            let diff = tape.sub(h, n)?;
            let zd = tape.mul(z, diff)?;
            h = tape.add(n, zd)?;
            states.push(h);
        }
        tape.concat_rows(&states)
    }

    /// Pre-norm causal decoder blocks over `seq + positions`; no final norm.
    fn transformer(
        &self,
        tape: &mut Tape,
        pos: ParamId,
        blocks: &[DecoderBlock],
        seq: Var,
        dropout: f32,
        rng: &mut Rng,
    ) -> Result<Var> {
        let l = tape.value(seq).rows();
        let positions: Vec<usize> = (0..l).collect();
        let p = tape.gather(pos, &positions)?;
        let mut x = tape.add(seq, p)?;
        for b in blocks {
            let (g1, b1) = (tape.param(b.ln1_gain), tape.param(b.ln1_bias));
            let h = tape.layer_norm(x, g1, b1)?;
            let (wq, wk, wv, wo, bo) = (tape.param(b.wq), tape.param(b.wk), tape.param(b.wv), tape.param(b.wo), tape.param(b.bo));
            let q = tape.matmul(h, wq)?;
            let k = tape.matmul(h, wk)?;
            let v = tape.matmul(h, wv)?;
            let spec = AttentionSpec {
                group_len: l,
                heads: self.config.tf_heads,
                causal: true,
                key_mask: None,
            };
            let a = tape.attention(q, k, v, spec)?;
            let o = tape.matmul(a, wo)?;
            let o = tape.add_row(o, bo)?;
            let o = tape.dropout(o, dropout, rng)?;
            x = tape.add(x, o)?;

            let (g2, b2) = (tape.param(b.ln2_gain), tape.param(b.ln2_bias));
            let h = tape.layer_norm(x, g2, b2)?;
            let (w1, c1, w2, c2) = (tape.param(b.w1), tape.param(b.b1), tape.param(b.w2), tape.param(b.b2));
            let f = tape.matmul(h, w1)?;
            let f = tape.add_row(f, c1)?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, w2)?;
            let f = tape.add_row(f, c2)?;
            let f = tape.dropout(f, dropout, rng)?;
            x = tape.add(x, f)?;
        }
        Ok(x)
    }
}
