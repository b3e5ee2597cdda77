//! Graph structure learner: per-node feature encoder, pairwise link
//! predictor, and straight-through Gumbel sampling of a binary adjacency.
//!
//! Edge `(i, j)` (stored at `[i][j]`) means "variable `i` drives variable `j`".
//! Self-loops are sampled like any other edge.

use std::rc::Rc;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GaetsError, Result};
use crate::nn::{glorot, Activation, Bound, Dense, ParamId, Params};
use crate::tape::{sigmoid, SparseMap, Tape, Var};

/// Convolution stack of the feature encoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvSpec {
    pub kernel: usize,
    /// Output channels of each layer (input has one channel).
    pub channels: Vec<usize>,
    /// Number of average-pooling bins applied after the last convolution.
    pub pool_bins: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec {
            kernel: 10,
            channels: vec![8, 16],
            pool_bins: 8,
        }
    }
}

impl ConvSpec {
    /// Shortest series the stack accepts.
    pub fn min_len(&self) -> usize {
        self.channels.len() * (self.kernel - 1) + self.pool_bins
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv1d {
    /// `(c_in·kernel) × c_out`, row `ch·kernel + j` is tap `j` of channel `ch`.
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
}

/// `h^i = FC(vec(pool(conv(conv(x^i)))))`, applied to every node with shared
/// parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureEncoder {
    pub convs: Vec<Conv1d>,
    pub fc: Dense,
    pub spec: ConvSpec,
    pub d_embed: usize,
}

impl FeatureEncoder {
    pub fn new<R: Rng + ?Sized>(params: &mut Params, spec: &ConvSpec, d_embed: usize, rng: &mut R) -> Self {
        let mut c_in = 1;
        let mut convs = Vec::with_capacity(spec.channels.len());
        for (l, &c_out) in spec.channels.iter().enumerate() {
            let weight = params.add(
                format!("encoder/conv{l}/weight"),
                glorot(rng, c_in * spec.kernel, c_out),
            );
            let bias = params.add(format!("encoder/conv{l}/bias"), Array2::zeros((1, c_out)));
            convs.push(Conv1d {
                weight,
                bias,
                kernel: spec.kernel,
                c_in,
                c_out,
            });
            c_in = c_out;
        }
        let fc = Dense::new(
            params,
            "encoder/fc",
            c_in * spec.pool_bins,
            d_embed,
            Activation::Identity,
            rng,
        );
        FeatureEncoder {
            convs,
            fc,
            spec: spec.clone(),
            d_embed,
        }
    }

    /// Embeds every row of `series` (`n × L`), giving `n × d_embed`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, series: ArrayView2<f64>) -> Result<Var> {
        let (n, len) = series.dim();
        if len < self.spec.min_len() {
            return Err(GaetsError::Config(format!(
                "feature encoder needs series of at least {} steps, got {len}",
                self.spec.min_len()
            )));
        }
        let x = tape.constant(series.to_owned());
        let mut h = tape.reshape(x, (n * len, 1));
        for conv in &self.convs {
            let cols = tape.im2col(h, n, conv.kernel);
            let z = tape.matmul(cols, bound.var(conv.weight));
            let z = tape.add_row(z, bound.var(conv.bias));
            h = tape.relu(z);
        }
        let c = self.convs.last().map_or(1, |c| c.c_out);
        let pooled = tape.segment_pool(h, n, self.spec.pool_bins);
        let flat = tape.reshape(pooled, (n, self.spec.pool_bins * c));
        Ok(self.fc.forward(tape, bound, flat))
    }

    pub fn encode(&self, params: &Params, series: ArrayView2<f64>) -> Result<NodeEmbedding> {
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let h = self.forward(&mut tape, &bound, series)?;
        Ok(NodeEmbedding(tape.value(h).clone()))
    }
}

/// `n × d_embed` node representations.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeEmbedding(pub Array2<f64>);

/// Logit of edge existence for every ordered pair, `n × n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeLogits(pub Array2<f64>);

impl EdgeLogits {
    pub fn n(&self) -> usize {
        self.0.nrows()
    }
}

/// Scores the concatenation `h_i ‖ h_j` with two dense layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkPredictor {
    pub hidden: Dense,
    pub out: Dense,
}

impl LinkPredictor {
    pub fn new<R: Rng + ?Sized>(params: &mut Params, d_embed: usize, d_hidden: usize, rng: &mut R) -> Self {
        LinkPredictor {
            hidden: Dense::new(params, "link/hidden", 2 * d_embed, d_hidden, Activation::Relu, rng),
            out: Dense::new(params, "link/out", d_hidden, 1, Activation::Identity, rng),
        }
    }

    /// `n × n` logits from `n × d` embeddings.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, embeddings: Var) -> Var {
        let (n, d) = tape.shape(embeddings);
        let pairs = tape.sparse(embeddings, Rc::new(pair_map(n, d)));
        let hidden = self.hidden.forward(tape, bound, pairs);
        let scores = self.out.forward(tape, bound, hidden);
        tape.reshape(scores, (n, n))
    }

    pub fn logits(&self, params: &Params, embeddings: &NodeEmbedding) -> Result<EdgeLogits> {
        if embeddings.0.iter().any(|v| !v.is_finite()) {
            return Err(GaetsError::NonFinite("node embeddings".into()));
        }
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let h = tape.constant(embeddings.0.clone());
        let l = self.forward(&mut tape, &bound, h);
        Ok(EdgeLogits(tape.value(l).clone()))
    }
}

/// Gather building row `i·n + j` = `[h_i, h_j]` from an `n × d` matrix.
fn pair_map(n: usize, d: usize) -> SparseMap {
    let mut b = SparseMap::builder((n, d), (n * n, 2 * d));
    for i in 0..n {
        for j in 0..n {
            for c in 0..2 * d {
                if c < d {
                    b.push(i, c, 1.0);
                } else {
                    b.push(j, c - d, 1.0);
                }
                b.next();
            }
        }
    }
    b.build()
}

/// Entrywise `sigmoid(logits)`.
pub fn edge_probabilities(logits: &EdgeLogits) -> Array2<f64> {
    logits.0.mapv(sigmoid)
}

/// Frozen logistic noise `g₁ − g₀` (difference of two standard Gumbel draws)
/// for every ordered pair.
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelNoise(pub Array2<f64>);

impl GumbelNoise {
    pub fn sample<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        GumbelNoise(Array2::from_shape_simple_fn((n, n), || {
            let g1 = standard_gumbel(rng);
            let g0 = standard_gumbel(rng);
            g1 - g0
        }))
    }

    pub fn zeros(n: usize) -> Self {
        GumbelNoise(Array2::zeros((n, n)))
    }
}

fn standard_gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // u in the open interval (0, 1)
    let u: f64 = loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            break u;
        }
    };
    -(-u.ln()).ln()
}

/// A binary adjacency together with the relaxed sample it was rounded from.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjacencySample {
    pub hard: Array2<f64>,
    pub soft: Array2<f64>,
    pub temperature: f64,
}

/// How the sampled graph enters the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphRelaxation {
    /// Hard 0/1 forward value, gradient of the relaxed sample.
    StraightThrough,
    /// The relaxed sample itself (smooth; used for gradient checks).
    Relaxed,
}

pub fn check_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(GaetsError::Config(format!("Gumbel temperature must be positive, got {temperature}")))
    }
}

/// Binary-concrete sample on the tape: `soft = σ((logits + noise)/temperature)`.
pub fn relaxed_adjacency(
    tape: &mut Tape,
    logits: Var,
    noise: &GumbelNoise,
    temperature: f64,
    relaxation: GraphRelaxation,
) -> Var {
    let eps = tape.constant(noise.0.clone());
    let z = tape.add(logits, eps);
    let z = tape.scale(z, 1.0 / temperature);
    let soft = tape.sigmoid(z);
    match relaxation {
        GraphRelaxation::Relaxed => soft,
        GraphRelaxation::StraightThrough => {
            let hard = tape.value(soft).mapv(|p| if p > 0.5 { 1.0 } else { 0.0 });
            tape.straight_through(soft, hard)
        }
    }
}

/// Draws a straight-through Gumbel sample from `logits`.
pub fn sample_adjacency<R: Rng + ?Sized>(logits: &EdgeLogits, temperature: f64, rng: &mut R) -> Result<AdjacencySample> {
    check_temperature(temperature)?;
    let noise = GumbelNoise::sample(logits.n(), rng);
    Ok(adjacency_from_noise(logits, &noise, temperature))
}

pub fn adjacency_from_noise(logits: &EdgeLogits, noise: &GumbelNoise, temperature: f64) -> AdjacencySample {
    let mut soft = Array2::zeros(logits.0.dim());
    ndarray::Zip::from(&mut soft)
        .and(&logits.0)
        .and(&noise.0)
        .for_each(|s, &l, &g| *s = sigmoid((l + g) / temperature));
    // keep soft strictly inside (0, 1)
    soft.mapv_inplace(|p| p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0));
    let hard = soft.mapv(|p| if p > 0.5 { 1.0 } else { 0.0 });
    AdjacencySample {
        hard,
        soft,
        temperature,
    }
}

/// The deterministic graph: edges whose probability exceeds one half.
pub fn threshold_adjacency(logits: &EdgeLogits) -> Array2<f64> {
    logits.0.mapv(|l| if l > 0.0 { 1.0 } else { 0.0 })
}

/// Feature encoder plus link predictor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureLearner {
    pub encoder: FeatureEncoder,
    pub link: LinkPredictor,
}

impl StructureLearner {
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        spec: &ConvSpec,
        d_embed: usize,
        d_link: usize,
        rng: &mut R,
    ) -> Self {
        let encoder = FeatureEncoder::new(params, spec, d_embed, rng);
        let link = LinkPredictor::new(params, d_embed, d_link, rng);
        StructureLearner { encoder, link }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, series: ArrayView2<f64>) -> Result<Var> {
        let h = self.encoder.forward(tape, bound, series)?;
        Ok(self.link.forward(tape, bound, h))
    }

    pub fn logits(&self, params: &Params, series: ArrayView2<f64>) -> Result<EdgeLogits> {
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let l = self.forward(&mut tape, &bound, series)?;
        let logits = tape.value(l).clone();
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(GaetsError::NonFinite("edge logits".into()));
        }
        Ok(EdgeLogits(logits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Axis};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn series(n: usize, len: usize, seed: u64) -> Array2<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((n, len), || r.random_range(-1.0..1.0))
    }

    #[test]
    fn embedding_shape_for_six_nodes() {
        let mut params = Params::new();
        let enc = FeatureEncoder::new(&mut params, &ConvSpec::default(), 64, &mut rng());
        let h = enc.encode(&params, series(6, 300, 1).view()).unwrap();
        assert_eq!(h.0.dim(), (6, 64));
    }

    #[test]
    fn too_short_series_names_minimum() {
        let mut params = Params::new();
        let spec = ConvSpec::default();
        let enc = FeatureEncoder::new(&mut params, &spec, 8, &mut rng());
        let err = enc.encode(&params, series(2, spec.min_len() - 1, 1).view()).unwrap_err();
        assert!(err.to_string().contains(&spec.min_len().to_string()));
        assert!(enc.encode(&params, series(2, spec.min_len(), 1).view()).is_ok());
    }

    #[test]
    fn identical_series_give_identical_rows() {
        let mut params = Params::new();
        let enc = FeatureEncoder::new(&mut params, &ConvSpec::default(), 16, &mut rng());
        let mut x = series(3, 100, 2);
        let row = x.row(0).to_owned();
        x.row_mut(2).assign(&row);
        let h = enc.encode(&params, x.view()).unwrap();
        assert_eq!(h.0.row(0), h.0.row(2));
    }

    #[test]
    fn rows_depend_only_on_own_series() {
        let mut params = Params::new();
        let enc = FeatureEncoder::new(&mut params, &ConvSpec::default(), 16, &mut rng());
        let x = series(4, 80, 3);
        let mut y = x.clone();
        y.row_mut(1).mapv_inplace(|v| v * 3.0 + 1.0);
        let hx = enc.encode(&params, x.view()).unwrap();
        let hy = enc.encode(&params, y.view()).unwrap();
        for i in [0, 2, 3] {
            assert_eq!(hx.0.row(i), hy.0.row(i));
        }
        assert_ne!(hx.0.row(1), hy.0.row(1));
    }

    /// Hand-rolled forward pass of a one-layer conv (kernel 3, 2 channels),
    /// pooling into 2 bins and the affine map, for one length-8 series.
    #[test]
    fn zero_series_matches_manual_forward() {
        let spec = ConvSpec {
            kernel: 3,
            channels: vec![2],
            pool_bins: 2,
        };
        let mut params = Params::new();
        let enc = FeatureEncoder::new(&mut params, &spec, 3, &mut rng());
        *params.get_mut(enc.convs[0].bias) = array![[0.5, -0.25]];
        *params.get_mut(enc.fc.bias) = array![[0.0, 0.0, 0.0]];
        let fc_w = params.get(enc.fc.weight).clone();

        let x = Array2::<f64>::zeros((1, 8));
        let h = enc.encode(&params, x.view()).unwrap();

        // conv of zeros = bias, relu -> [0.5, 0]; 6 positions, pooled -> same.
        let pooled_channel = [0.5, 0.0];
        // vec() order is bin-major: [bin0 ch0, bin0 ch1, bin1 ch0, bin1 ch1]
        let flat = [pooled_channel[0], pooled_channel[1], pooled_channel[0], pooled_channel[1]];
        for k in 0..3 {
            let expected: f64 = (0..4).map(|r| flat[r] * fc_w[[r, k]]).sum();
            assert!((h.0[[0, k]] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_embeddings_give_constant_logits() {
        let mut params = Params::new();
        let link = LinkPredictor::new(&mut params, 4, 8, &mut rng());
        let h = NodeEmbedding(Array2::from_shape_fn((5, 4), |(_, c)| c as f64 * 0.3 - 0.2));
        let l = link.logits(&params, &h).unwrap();
        assert_eq!(l.0.dim(), (5, 5));
        let first = l.0[[0, 0]];
        assert!(l.0.iter().all(|&v| v == first));
    }

    #[test]
    fn six_nodes_give_thirty_six_logits() {
        let mut params = Params::new();
        let link = LinkPredictor::new(&mut params, 4, 8, &mut rng());
        let h = NodeEmbedding(series(6, 4, 5));
        assert_eq!(link.logits(&params, &h).unwrap().0.len(), 36);
    }

    #[test]
    fn two_node_logits_by_hand() {
        let mut params = Params::new();
        let hidden = Dense::from_values(
            &mut params,
            "link/hidden",
            array![[1.0, 0.0], [0.0, 1.0], [0.0, -1.0], [1.0, 0.5]],
            array![[0.1, -0.2]],
            Activation::Relu,
        );
        let out = Dense::from_values(&mut params, "link/out", array![[2.0], [-1.0]], array![[0.3]], Activation::Identity);
        let link = LinkPredictor { hidden, out };
        let h = NodeEmbedding(array![[1.0, 2.0], [-1.0, 0.5]]);
        let l = link.logits(&params, &h).unwrap();
        let manual = |hi: [f64; 2], hj: [f64; 2]| {
            let z = [hi, hj].concat();
            let a0 = (z[0] * 1.0 + z[3] * 1.0 + 0.1f64).max(0.0);
            let a1 = (z[1] * 1.0 - z[2] + 0.5 * z[3] - 0.2f64).max(0.0);
            2.0 * a0 - a1 + 0.3
        };
        let hs = [[1.0, 2.0], [-1.0, 0.5]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((l.0[[i, j]] - manual(hs[i], hs[j])).abs() < 1e-14, "({i},{j})");
            }
        }
    }

    #[test]
    fn non_finite_embeddings_are_rejected() {
        let mut params = Params::new();
        let link = LinkPredictor::new(&mut params, 2, 2, &mut rng());
        let h = NodeEmbedding(array![[f64::NAN, 0.0], [0.0, 0.0]]);
        assert!(matches!(link.logits(&params, &h), Err(GaetsError::NonFinite(_))));
    }

    #[test]
    fn probabilities_are_sigmoid() {
        let p = edge_probabilities(&EdgeLogits(array![[0.0, -20.0], [20.0, 1.0]]));
        assert_eq!(p[[0, 0]], 0.5);
        assert!(p[[0, 1]] < 1e-8);
        assert!(p[[1, 0]] > 1.0 - 1e-8);
    }

    #[test]
    fn saturated_logit_is_almost_always_an_edge() {
        let logits = EdgeLogits(Array2::from_elem((1, 1), 20.0));
        let mut r = rng();
        for temperature in [0.1, 0.5, 1.0] {
            let hits = (0..10_000)
                .filter(|_| sample_adjacency(&logits, temperature, &mut r).unwrap().hard[[0, 0]] == 1.0)
                .count();
            assert!(hits as f64 / 1e4 > 0.999);
        }
    }

    #[test]
    fn zero_logits_give_fair_coin() {
        let logits = EdgeLogits(Array2::zeros((1, 1)));
        let mut r = rng();
        let hits = (0..10_000)
            .filter(|_| sample_adjacency(&logits, 0.5, &mut r).unwrap().hard[[0, 0]] == 1.0)
            .count();
        assert!((hits as f64 / 1e4 - 0.5).abs() < 0.02);
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let logits = EdgeLogits(series(4, 4, 9));
        let a = sample_adjacency(&logits, 0.5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = sample_adjacency(&logits, 0.5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        for (h, s) in a.hard.iter().zip(a.soft.iter()) {
            assert!(*s > 0.0 && *s < 1.0);
            assert_eq!(*h, if *s > 0.5 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn non_positive_temperature_is_rejected() {
        let logits = EdgeLogits(Array2::zeros((2, 2)));
        assert!(matches!(sample_adjacency(&logits, 0.0, &mut rng()), Err(GaetsError::Config(_))));
        assert!(matches!(sample_adjacency(&logits, -1.0, &mut rng()), Err(GaetsError::Config(_))));
    }

    #[test]
    fn soft_sample_gradient_matches_finite_differences() {
        let logits = series(3, 3, 4);
        let noise = GumbelNoise::sample(3, &mut rng());
        let weights = series(3, 3, 6);
        for temperature in [0.3, 0.5, 1.0] {
            let f = |l: &Array2<f64>| {
                let mut t = Tape::new();
                let v = t.param(l.clone());
                let a = relaxed_adjacency(&mut t, v, &noise, temperature, GraphRelaxation::Relaxed);
                let w = t.constant(weights.clone());
                let m = t.mul(a, w);
                let s = t.sum(m);
                (t.scalar_value(s), t.backward(s).get(v).unwrap().clone())
            };
            let (_, g) = f(&logits);
            let eps = 1e-6;
            for i in 0..3 {
                for j in 0..3 {
                    let mut lp = logits.clone();
                    lp[[i, j]] += eps;
                    let mut lm = logits.clone();
                    lm[[i, j]] -= eps;
                    let num = (f(&lp).0 - f(&lm).0) / (2.0 * eps);
                    let rel = (num - g[[i, j]]).abs() / num.abs().max(g[[i, j]].abs()).max(1e-8);
                    assert!(rel < 1e-4, "rel err {rel}");
                }
            }
        }
    }

    #[test]
    fn node_permutation_is_equivariant() {
        let mut params = Params::new();
        let learner = StructureLearner::new(&mut params, &ConvSpec::default(), 16, 16, &mut rng());
        let x = series(4, 60, 8);
        let perm = [2usize, 0, 3, 1];
        let px = x.select(Axis(0), &perm);
        let l = learner.logits(&params, x.view()).unwrap();
        let pl = learner.logits(&params, px.view()).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(pl.0[[i, j]], l.0[[perm[i], perm[j]]]);
            }
        }
        let noise = GumbelNoise::sample(4, &mut rng());
        let pnoise = GumbelNoise(noise.0.select(Axis(0), &perm).select(Axis(1), &perm));
        let a = adjacency_from_noise(&l, &noise, 0.5);
        let pa = adjacency_from_noise(&pl, &pnoise, 0.5);
        assert_eq!(pa.hard, a.hard.select(Axis(0), &perm).select(Axis(1), &perm));
    }
}
