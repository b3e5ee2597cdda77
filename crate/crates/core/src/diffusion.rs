//! Diffusion convolution, the diffusion-convolutional GRU cell and the
//! sequence-to-sequence forecaster built from it.
//!
//! Two random-walk operators are derived from an adjacency `A` (edge `i → j`
//! at `A[i][j]`): the forward walk `D_O⁻¹A` (row-normalised `A`, out-degrees)
//! and the backward walk `D_I⁻¹Aᵀ` (row-normalised `Aᵀ`, in-degrees). A node
//! with zero degree gets an all-zero row. A filter of degree `K` computes
//!
//! ```text
//! Σ_{k=0..K} (P_fwd^k Y) θ_fwd[k] + (P_bwd^k Y) θ_bwd[k] + b
//! ```
//!
//! where `Y` holds one feature row per node.

use ndarray::{s, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GaetsError, Result};
use crate::nn::{glorot, Activation, Bound, Dense, ParamId, Params};
use crate::tape::{row_normalize, Tape, Var};

/// `(D_O⁻¹A, D_I⁻¹Aᵀ)`.
pub fn degree_normalize(adjacency: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let fwd = row_normalize(adjacency);
    let bwd = row_normalize(&adjacency.t().to_owned());
    (fwd, bwd)
}

/// Random-walk operators on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Supports {
    pub fwd: Var,
    pub bwd: Var,
}

impl Supports {
    pub fn new(tape: &mut Tape, adjacency: Var) -> Self {
        let fwd = tape.row_normalize(adjacency);
        let at = tape.transpose(adjacency);
        let bwd = tape.row_normalize(at);
        Supports { fwd, bwd }
    }
}

/// Stacks `[Y, P_fwd Y, …, P_fwd^K Y, P_bwd Y, …, P_bwd^K Y]` column-wise.
pub fn diffusion_features(tape: &mut Tape, supports: &Supports, y: Var, k: usize) -> Var {
    let mut blocks = Vec::with_capacity(2 * k + 1);
    blocks.push(y);
    for op in [supports.fwd, supports.bwd] {
        let mut cur = y;
        for _ in 0..k {
            cur = tape.graph_mix(op, cur);
            blocks.push(cur);
        }
    }
    if blocks.len() == 1 {
        y
    } else {
        tape.concat_cols(&blocks)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionFilter {
    pub k: usize,
    pub theta_fwd: Vec<ParamId>,
    pub theta_bwd: Vec<ParamId>,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl DiffusionFilter {
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        name: &str,
        k: usize,
        d_in: usize,
        d_out: usize,
        bias_init: f64,
        rng: &mut R,
    ) -> Self {
        let theta_fwd = (0..=k)
            .map(|i| params.add(format!("{name}/theta_fwd{i}"), glorot(rng, d_in, d_out)))
            .collect();
        let theta_bwd = (0..=k)
            .map(|i| params.add(format!("{name}/theta_bwd{i}"), glorot(rng, d_in, d_out)))
            .collect();
        let bias = params.add(format!("{name}/bias"), Array2::from_elem((1, d_out), bias_init));
        DiffusionFilter {
            k,
            theta_fwd,
            theta_bwd,
            bias,
            d_in,
            d_out,
        }
    }

    /// Weights stacked to match [`diffusion_features`]; the two degree-0
    /// matrices both act on `Y` and are summed.
    pub fn bind(&self, tape: &mut Tape, bound: &Bound) -> BoundFilter {
        let zero = tape.add(bound.var(self.theta_fwd[0]), bound.var(self.theta_bwd[0]));
        let mut rows = vec![zero];
        rows.extend(self.theta_fwd[1..].iter().map(|&id| bound.var(id)));
        rows.extend(self.theta_bwd[1..].iter().map(|&id| bound.var(id)));
        let weight = if rows.len() == 1 { zero } else { tape.concat_rows(&rows) };
        BoundFilter {
            weight,
            bias: bound.var(self.bias),
            k: self.k,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, supports: &Supports, y: Var) -> Var {
        let f = self.bind(tape, bound);
        let feats = diffusion_features(tape, supports, y, self.k);
        f.apply(tape, feats)
    }
}

/// A filter whose stacked weight is already on the tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundFilter {
    pub weight: Var,
    pub bias: Var,
    pub k: usize,
}

impl BoundFilter {
    pub fn apply(&self, tape: &mut Tape, features: Var) -> Var {
        let z = tape.matmul(features, self.weight);
        tape.add_row(z, self.bias)
    }
}

/// Applies `filter` to `y` (`n × d_in`, or stacked blocks) under `adjacency`.
pub fn diffusion_conv(
    filter: &DiffusionFilter,
    params: &Params,
    adjacency: &Array2<f64>,
    y: &Array2<f64>,
) -> Result<Array2<f64>> {
    let n = adjacency.nrows();
    if adjacency.ncols() != n || n == 0 || y.nrows() % n != 0 {
        return Err(GaetsError::dim("diffusion_conv", format!("rows multiple of {n}"), format!("{:?}", y.dim())));
    }
    if y.ncols() != filter.d_in {
        return Err(GaetsError::dim("diffusion_conv input width", filter.d_in, y.ncols()));
    }
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let a = tape.constant(adjacency.clone());
    let supports = Supports::new(&mut tape, a);
    let yv = tape.constant(y.clone());
    let out = filter.forward(&mut tape, &bound, &supports, yv);
    Ok(tape.value(out).clone())
}

/// Per-node hidden state, `n × h_dim` (or stacked blocks).
#[derive(Clone, Debug, PartialEq)]
pub struct DcgruState(pub Array2<f64>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DcgruCell {
    pub reset: DiffusionFilter,
    pub update: DiffusionFilter,
    pub candidate: DiffusionFilter,
    pub d_in: usize,
    pub h_dim: usize,
}

/// A cell with its filters bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundCell {
    reset: BoundFilter,
    update: BoundFilter,
    candidate: BoundFilter,
}

/// Gate activations of one cell update.
#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    pub reset: Var,
    pub update: Var,
    pub candidate: Var,
    pub hidden: Var,
}

impl DcgruCell {
    pub fn new<R: Rng + ?Sized>(params: &mut Params, name: &str, k: usize, d_in: usize, h_dim: usize, rng: &mut R) -> Self {
        let width = d_in + h_dim;
        DcgruCell {
            reset: DiffusionFilter::new(params, &format!("{name}/reset"), k, width, h_dim, 1.0, rng),
            update: DiffusionFilter::new(params, &format!("{name}/update"), k, width, h_dim, 1.0, rng),
            candidate: DiffusionFilter::new(params, &format!("{name}/candidate"), k, width, h_dim, 0.0, rng),
            d_in,
            h_dim,
        }
    }

    pub fn bind(&self, tape: &mut Tape, bound: &Bound) -> BoundCell {
        BoundCell {
            reset: self.reset.bind(tape, bound),
            update: self.update.bind(tape, bound),
            candidate: self.candidate.bind(tape, bound),
        }
    }
}

impl BoundCell {
    /// `R = σ(W_R⋆[X‖H]+b_R)`, `U = σ(W_U⋆[X‖H]+b_U)`,
    /// `C = tanh(W_C⋆[X‖R⊙H]+b_C)`, `H' = U⊙H + (1−U)⊙C`.
    pub fn step(&self, tape: &mut Tape, supports: &Supports, x: Var, h: Var) -> GateVars {
        let xh = tape.concat_cols(&[x, h]);
        let feats = diffusion_features(tape, supports, xh, self.reset.k);
        let r = self.reset.apply(tape, feats);
        let r = tape.sigmoid(r);
        let u = self.update.apply(tape, feats);
        let u = tape.sigmoid(u);
        let rh = tape.mul(r, h);
        let xrh = tape.concat_cols(&[x, rh]);
        let feats = diffusion_features(tape, supports, xrh, self.candidate.k);
        let c = self.candidate.apply(tape, feats);
        let c = tape.tanh(c);
        let keep = tape.mul(u, h);
        let one_minus_u = tape.one_minus(u);
        let write = tape.mul(one_minus_u, c);
        let hidden = tape.add(keep, write);
        GateVars {
            reset: r,
            update: u,
            candidate: c,
            hidden,
        }
    }
}

fn check_finite(tape: &Tape, v: Var, what: &str) -> Result<()> {
    if tape.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(GaetsError::NonFinite(what.to_string()))
    }
}

/// One cell update on plain arrays.
pub fn dcgru_cell(
    cell: &DcgruCell,
    params: &Params,
    x: &Array2<f64>,
    state: &DcgruState,
    adjacency: &Array2<f64>,
) -> Result<DcgruState> {
    let n = adjacency.nrows();
    if adjacency.ncols() != n || n == 0 || x.nrows() % n != 0 {
        return Err(GaetsError::dim("dcgru_cell adjacency", format!("{n}x{n}"), format!("{:?}", adjacency.dim())));
    }
    if x.ncols() != cell.d_in {
        return Err(GaetsError::dim("dcgru_cell input width", cell.d_in, x.ncols()));
    }
    if state.0.dim() != (x.nrows(), cell.h_dim) {
        return Err(GaetsError::dim(
            "dcgru_cell state",
            format!("({}, {})", x.nrows(), cell.h_dim),
            format!("{:?}", state.0.dim()),
        ));
    }
    if state.0.iter().any(|v| !v.is_finite()) {
        return Err(GaetsError::NonFinite("previous hidden state".into()));
    }
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let a = tape.constant(adjacency.clone());
    let supports = Supports::new(&mut tape, a);
    let bc = cell.bind(&mut tape, &bound);
    let xv = tape.constant(x.clone());
    let hv = tape.constant(state.0.clone());
    let gates = bc.step(&mut tape, &supports, xv, hv);
    check_finite(&tape, gates.reset, "reset gate")?;
    check_finite(&tape, gates.update, "update gate")?;
    check_finite(&tape, gates.candidate, "candidate")?;
    Ok(DcgruState(tape.value(gates.hidden).clone()))
}

/// What the decoder sees as input at each step.
#[derive(Clone, Copy, Debug)]
pub enum DecoderFeed<'a> {
    /// Always its own previous prediction.
    Autoregressive,
    /// Ground truth `targets[:, :, s−1]` at step `s` where `use_truth[s]`.
    Teacher {
        targets: &'a Array3<f64>,
        use_truth: &'a [bool],
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seq2Seq {
    pub encoder: Vec<DcgruCell>,
    pub decoder: Vec<DcgruCell>,
    pub projection: Dense,
    pub input_len: usize,
    pub horizon: usize,
    pub h_dim: usize,
}

impl Seq2Seq {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        k: usize,
        h_dim: usize,
        num_layers: usize,
        input_len: usize,
        horizon: usize,
        rng: &mut R,
    ) -> Self {
        let layers = |params: &mut Params, prefix: &str, rng: &mut R| -> Vec<DcgruCell> {
            (0..num_layers)
                .map(|l| {
                    let d_in = if l == 0 { 1 } else { h_dim };
                    DcgruCell::new(params, &format!("{prefix}/layer{l}"), k, d_in, h_dim, rng)
                })
                .collect()
        };
        let encoder = layers(params, "dcgru_encoder", rng);
        let decoder = layers(params, "dcgru_decoder", rng);
        let projection = Dense::new(params, "projection", h_dim, 1, Activation::Identity, rng);
        Seq2Seq {
            encoder,
            decoder,
            projection,
            input_len,
            horizon,
            h_dim,
        }
    }

    /// Forecasts a batch `inputs` (`B × n × T`), returning `(B·n) × τ` with
    /// row `b·n + i` holding node `i` of sample `b`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        supports: &Supports,
        inputs: &Array3<f64>,
        feed: DecoderFeed<'_>,
    ) -> Result<Var> {
        let (batch, n, t_in) = inputs.dim();
        if t_in != self.input_len {
            return Err(GaetsError::dim("forecast input length", self.input_len, t_in));
        }
        if let DecoderFeed::Teacher { targets, use_truth } = feed {
            if targets.dim() != (batch, n, self.horizon) || use_truth.len() != self.horizon {
                return Err(GaetsError::dim(
                    "decoder teacher targets",
                    format!("({batch}, {n}, {})", self.horizon),
                    format!("{:?}", targets.dim()),
                ));
            }
        }
        let rows = batch * n;
        let column = |a: &Array3<f64>, t: usize| -> Array2<f64> {
            a.slice(s![.., .., t])
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order((rows, 1))
                .expect("contiguous")
        };

        let enc: Vec<BoundCell> = self.encoder.iter().map(|c| c.bind(tape, bound)).collect();
        let dec: Vec<BoundCell> = self.decoder.iter().map(|c| c.bind(tape, bound)).collect();

        let zero = tape.constant(Array2::zeros((rows, self.h_dim)));
        let mut hidden = vec![zero; enc.len()];
        for t in 0..t_in {
            let mut x = tape.constant(column(inputs, t));
            for (l, cell) in enc.iter().enumerate() {
                hidden[l] = cell.step(tape, supports, x, hidden[l]).hidden;
                x = hidden[l];
            }
        }

        let mut input = tape.constant(column(inputs, t_in - 1));
        let mut outputs = Vec::with_capacity(self.horizon);
        for step in 0..self.horizon {
            let mut x = input;
            for (l, cell) in dec.iter().enumerate() {
                hidden[l] = cell.step(tape, supports, x, hidden[l]).hidden;
                x = hidden[l];
            }
            let out = self.projection.forward(tape, bound, x);
            outputs.push(out);
            input = match feed {
                DecoderFeed::Teacher { targets, use_truth } if step + 1 < self.horizon && use_truth[step + 1] => {
                    tape.constant(column(targets, step))
                }
                _ => out,
            };
        }
        Ok(tape.concat_cols(&outputs))
    }
}

/// Autoregressive forecast of one window `n × T` under a fixed adjacency,
/// giving `n × τ`.
pub fn forecast(model: &Seq2Seq, params: &Params, adjacency: &Array2<f64>, window: &Array2<f64>) -> Result<Array2<f64>> {
    let (n, t) = window.dim();
    if adjacency.dim() != (n, n) {
        return Err(GaetsError::dim("forecast adjacency", format!("{n}x{n}"), format!("{:?}", adjacency.dim())));
    }
    let batch = window.as_standard_layout().into_owned().into_shape_with_order((1, n, t)).expect("contiguous");
    let out = forecast_batch(model, params, adjacency, &batch)?;
    Ok(out.index_axis_move(ndarray::Axis(0), 0))
}

/// Autoregressive forecast of a batch `B × n × T`, giving `B × n × τ`.
pub fn forecast_batch(model: &Seq2Seq, params: &Params, adjacency: &Array2<f64>, inputs: &Array3<f64>) -> Result<Array3<f64>> {
    let (batch, n, _) = inputs.dim();
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let a = tape.constant(adjacency.clone());
    let supports = Supports::new(&mut tape, a);
    let out = model.forward(&mut tape, &bound, &supports, inputs, DecoderFeed::Autoregressive)?;
    check_finite(&tape, out, "forecast output")?;
    let v = tape.value(out);
    Ok(Array3::from_shape_fn((batch, n, model.horizon), |(b, i, s)| v[[b * n + i, s]]))
}
