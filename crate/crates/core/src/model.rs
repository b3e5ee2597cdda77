//! The assembled model: structure learner, recurrent forecaster and SEM
//! autoencoder sharing one parameter store, plus the pluggable loss pieces.

use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{DecoderFeed, Seq2Seq, Supports};
use crate::error::{GaetsError, Result};
use crate::nn::{Bound, Params};
use crate::registry::Registry;
use crate::sem::SemAutoencoder;
use crate::structure::{ConvSpec, StructureLearner};
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub h_dim: usize,
    pub num_layers: usize,
    /// Diffusion degree `K`.
    pub diffusion_k: usize,
    pub d_embed: usize,
    /// Hidden width of the link predictor.
    pub d_link: usize,
    pub d_sem: usize,
    pub conv: ConvSpec,
    pub temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            h_dim: 64,
            num_layers: 1,
            diffusion_k: 2,
            d_embed: 64,
            d_link: 64,
            d_sem: 32,
            conv: ConvSpec::default(),
            temperature: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("h_dim", self.h_dim),
            ("num_layers", self.num_layers),
            ("d_embed", self.d_embed),
            ("d_link", self.d_link),
            ("d_sem", self.d_sem),
            ("conv.kernel", self.conv.kernel),
            ("conv.pool_bins", self.conv.pool_bins),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(GaetsError::Config(format!("{name} must be positive")));
            }
        }
        if self.conv.channels.is_empty() || self.conv.channels.contains(&0) {
            return Err(GaetsError::Config("conv.channels must be non-empty and positive".into()));
        }
        crate::structure::check_temperature(self.temperature)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaetsModel {
    pub config: ModelConfig,
    pub structure: StructureLearner,
    pub forecaster: Seq2Seq,
    pub sem: SemAutoencoder,
}

impl GaetsModel {
    /// Builds the model and registers its parameters in `params`.
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        config: &ModelConfig,
        input_len: usize,
        horizon: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if input_len == 0 || horizon == 0 {
            return Err(GaetsError::Config("input length and horizon must be positive".into()));
        }
        let structure = StructureLearner::new(params, &config.conv, config.d_embed, config.d_link, rng);
        let forecaster = Seq2Seq::new(
            params,
            config.diffusion_k,
            config.h_dim,
            config.num_layers,
            input_len,
            horizon,
            rng,
        );
        let sem = SemAutoencoder::new(params, input_len, config.d_sem, rng);
        Ok(GaetsModel {
            config: config.clone(),
            structure,
            forecaster,
            sem,
        })
    }

    pub fn input_len(&self) -> usize {
        self.forecaster.input_len
    }

    pub fn horizon(&self) -> usize {
        self.forecaster.horizon
    }

    /// Edge logits on the tape from the normalised training series.
    pub fn logits(&self, tape: &mut Tape, bound: &Bound, series: ArrayView2<f64>) -> Result<Var> {
        self.structure.forward(tape, bound, series)
    }
}

/// Row `b·n + i` of the stacked `(B·n) × len` layout holds node `i` of sample `b`.
pub fn stack_nodes(a: &Array3<f64>) -> Array2<f64> {
    let (b, n, t) = a.dim();
    a.as_standard_layout()
        .into_owned()
        .into_shape_with_order((b * n, t))
        .expect("standard layout")
}

/// Per-step forecasting loss between predictions and targets.
pub trait ForecastLoss: Send + Sync {
    fn name(&self) -> &'static str;
    fn on_tape(&self, tape: &mut Tape, pred: Var, truth: Var) -> Var;
    fn value(&self, pred: &Array2<f64>, truth: &Array2<f64>) -> f64;
}

/// Mean absolute error over nodes, samples and steps.
pub struct Mae;

impl ForecastLoss for Mae {
    fn name(&self) -> &'static str {
        "mae"
    }

    fn on_tape(&self, tape: &mut Tape, pred: Var, truth: Var) -> Var {
        let d = tape.sub(pred, truth);
        let a = tape.abs(d);
        tape.mean(a)
    }

    fn value(&self, pred: &Array2<f64>, truth: &Array2<f64>) -> f64 {
        let s: f64 = pred.iter().zip(truth.iter()).map(|(p, t)| (p - t).abs()).sum();
        s / pred.len() as f64
    }
}

/// Mean squared error; a sensitivity alternative to [`Mae`].
pub struct Mse;

impl ForecastLoss for Mse {
    fn name(&self) -> &'static str {
        "mse"
    }

    fn on_tape(&self, tape: &mut Tape, pred: Var, truth: Var) -> Var {
        let d = tape.sub(pred, truth);
        let a = tape.square(d);
        tape.mean(a)
    }

    fn value(&self, pred: &Array2<f64>, truth: &Array2<f64>) -> f64 {
        let s: f64 = pred.iter().zip(truth.iter()).map(|(p, t)| (p - t) * (p - t)).sum();
        s / pred.len() as f64
    }
}

pub fn forecast_losses() -> Registry<dyn ForecastLoss> {
    let mut r: Registry<dyn ForecastLoss> = Registry::new("forecast loss");
    r.register("mae", Arc::new(Mae)).register("mse", Arc::new(Mse));
    r
}

/// Structure regularizer added to the forecasting loss. Returning `None`
/// keeps its parameters off the tape, so they get no gradient at all.
pub trait StructureRegularizer: Send + Sync {
    fn name(&self) -> &'static str;
    /// `x` is the stacked input windows `(B·n) × T`, `adjacency` the sampled
    /// graph shared with the forecaster.
    fn term(&self, tape: &mut Tape, bound: &Bound, model: &GaetsModel, x: Var, adjacency: Var) -> Option<Var>;
}

/// The SEM graph-autoencoder reconstruction loss.
pub struct SemRegularizer;

impl StructureRegularizer for SemRegularizer {
    fn name(&self) -> &'static str {
        "gaets"
    }

    fn term(&self, tape: &mut Tape, bound: &Bound, model: &GaetsModel, x: Var, adjacency: Var) -> Option<Var> {
        Some(model.sem.loss(tape, bound, x, adjacency))
    }
}

/// No regularizer: the forecasting loss alone.
pub struct NoRegularizer;

impl StructureRegularizer for NoRegularizer {
    fn name(&self) -> &'static str {
        "gts"
    }

    fn term(&self, _: &mut Tape, _: &Bound, _: &GaetsModel, _: Var, _: Var) -> Option<Var> {
        None
    }
}

/// Training modes, keyed by name: `gaets` and `gts`.
pub fn regularizers() -> Registry<dyn StructureRegularizer> {
    let mut r: Registry<dyn StructureRegularizer> = Registry::new("mode");
    r.register("gaets", Arc::new(SemRegularizer))
        .register("gts", Arc::new(NoRegularizer));
    r
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub base: f64,
    pub autoencoder: f64,
    pub total: f64,
}

/// Tape handles of one objective evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub base: Var,
    pub autoencoder: Option<Var>,
    pub total: Var,
    pub prediction: Var,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            base: tape.scalar_value(self.base),
            autoencoder: self.autoencoder.map_or(0.0, |v| tape.scalar_value(v)),
            total: tape.scalar_value(self.total),
        }
    }
}

/// The pieces selected for one run.
#[derive(Clone)]
pub struct Objective {
    pub loss: Arc<dyn ForecastLoss>,
    pub regularizer: Arc<dyn StructureRegularizer>,
    /// Weight on the regularizer; 1 gives the plain sum.
    pub lambda: f64,
}

impl Objective {
    pub fn from_names(mode: &str, loss: &str, lambda: f64) -> Result<Self> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(GaetsError::Config(format!("lambda must be finite and non-negative, got {lambda}")));
        }
        Ok(Objective {
            loss: forecast_losses().get(loss)?,
            regularizer: regularizers().get(mode)?,
            lambda,
        })
    }

    /// Forecast plus regularizer for one batch under one adjacency.
    #[allow(clippy::too_many_arguments)]
    pub fn evaluate(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        model: &GaetsModel,
        adjacency: Var,
        inputs: &Array3<f64>,
        targets: &Array3<f64>,
        feed: DecoderFeed<'_>,
    ) -> Result<LossVars> {
        if inputs.dim().0 != targets.dim().0 || inputs.dim().1 != targets.dim().1 {
            return Err(GaetsError::dim(
                "batch inputs/targets",
                format!("{:?}", inputs.dim()),
                format!("{:?}", targets.dim()),
            ));
        }
        let supports = Supports::new(tape, adjacency);
        let prediction = model.forecaster.forward(tape, bound, &supports, inputs, feed)?;
        let truth = tape.constant(stack_nodes(targets));
        let base = self.loss.on_tape(tape, prediction, truth);
        let x = tape.constant(stack_nodes(inputs));
        let autoencoder = self.regularizer.term(tape, bound, model, x, adjacency);
        let total = match autoencoder {
            Some(ae) => {
                let weighted = if self.lambda == 1.0 { ae } else { tape.scale(ae, self.lambda) };
                tape.add(base, weighted)
            }
            None => base,
        };
        Ok(LossVars {
            base,
            autoencoder,
            total,
            prediction,
        })
    }
}

/// Base loss between two equally shaped prediction tensors.
pub fn base_loss(loss: &dyn ForecastLoss, pred: &Array3<f64>, truth: &Array3<f64>) -> Result<f64> {
    if pred.dim() != truth.dim() {
        return Err(GaetsError::dim("base loss", format!("{:?}", truth.dim()), format!("{:?}", pred.dim())));
    }
    Ok(loss.value(&stack_nodes(pred), &stack_nodes(truth)))
}

/// Loss breakdown of a batch under a fixed adjacency, with the decoder fed
/// its own predictions.
pub fn total_loss(
    model: &GaetsModel,
    params: &Params,
    objective: &Objective,
    adjacency: &Array2<f64>,
    inputs: &Array3<f64>,
    targets: &Array3<f64>,
) -> Result<LossBreakdown> {
    let n = inputs.dim().1;
    if adjacency.dim() != (n, n) {
        return Err(GaetsError::dim("adjacency", format!("{n}x{n}"), format!("{:?}", adjacency.dim())));
    }
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let a = tape.constant(adjacency.clone());
    let vars = objective.evaluate(&mut tape, &bound, model, a, inputs, targets, DecoderFeed::Autoregressive)?;
    Ok(vars.breakdown(&tape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            h_dim: 4,
            d_embed: 4,
            d_link: 4,
            d_sem: 3,
            conv: ConvSpec {
                kernel: 3,
                channels: vec![2],
                pool_bins: 2,
            },
            ..ModelConfig::default()
        }
    }

    fn batch(seed: u64, b: usize, n: usize, t: usize) -> Array3<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn((b, n, t), || r.random_range(-1.0..1.0))
    }

    #[test]
    fn mae_by_hand() {
        let pred = Array3::zeros((1, 2, 1));
        let truth = array![[[1.0], [3.0]]];
        assert_eq!(base_loss(&Mae, &pred, &truth).unwrap(), 2.0);
        assert_eq!(base_loss(&Mae, &truth, &truth).unwrap(), 0.0);
        assert!(base_loss(&Mae, &Array3::zeros((1, 2, 2)), &truth).is_err());
    }

    #[test]
    fn mae_is_symmetric_under_node_permutation() {
        let p = batch(1, 2, 3, 4);
        let t = batch(2, 2, 3, 4);
        let perm = [2usize, 0, 1];
        let pp = p.select(ndarray::Axis(1), &perm);
        let tp = t.select(ndarray::Axis(1), &perm);
        let a = base_loss(&Mae, &p, &t).unwrap();
        let b = base_loss(&Mae, &pp, &tp).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn registries_resolve_names() {
        assert_eq!(regularizers().get("GAETS").unwrap().name(), "gaets");
        assert_eq!(regularizers().get("gts").unwrap().name(), "gts");
        assert_eq!(forecast_losses().get("MSE").unwrap().name(), "mse");
        assert!(matches!(regularizers().get("notears"), Err(GaetsError::UnknownStrategy { .. })));
    }

    #[test]
    fn total_is_base_plus_autoencoder() {
        let mut params = Params::new();
        let model = GaetsModel::new(&mut params, &small(), 5, 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let x = batch(3, 2, 3, 5);
        let y = batch(4, 2, 3, 2);
        let a = array![[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0]];

        let gaets = Objective::from_names("gaets", "mae", 1.0).unwrap();
        let lb = total_loss(&model, &params, &gaets, &a, &x, &y).unwrap();
        assert_eq!(lb.total, lb.base + lb.autoencoder);
        assert!(lb.autoencoder > 0.0);

        // independent component values
        let pred = crate::diffusion::forecast_batch(&model.forecaster, &params, &a, &x).unwrap();
        let base = base_loss(&Mae, &pred, &y).unwrap();
        let ae = crate::sem::autoencoder_loss(&model.sem, &params, &stack_nodes(&x), &a).unwrap();
        assert!((lb.base - base).abs() < 1e-14);
        assert!((lb.autoencoder - ae).abs() < 1e-14);

        let gts = Objective::from_names("gts", "mae", 1.0).unwrap();
        let lb2 = total_loss(&model, &params, &gts, &a, &x, &y).unwrap();
        assert_eq!(lb2.autoencoder, 0.0);
        assert_eq!(lb2.total, lb2.base);
        assert_eq!(lb2.base, lb.base);
    }

    #[test]
    fn gts_mode_leaves_sem_gradients_zero() {
        let mut params = Params::new();
        let model = GaetsModel::new(&mut params, &small(), 5, 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let x = batch(3, 2, 3, 5);
        let y = batch(4, 2, 3, 2);
        let a = Array2::ones((3, 3));
        for (mode, expect_nonzero) in [("gts", false), ("gaets", true)] {
            let obj = Objective::from_names(mode, "mae", 1.0).unwrap();
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let av = tape.constant(a.clone());
            let vars = obj
                .evaluate(&mut tape, &bound, &model, av, &x, &y, DecoderFeed::Autoregressive)
                .unwrap();
            let grads = tape.backward(vars.total);
            let sem_norm: f64 = params
                .ids()
                .filter(|&id| params.group(id) == "sem")
                .map(|id| grads.get(bound.var(id)).map_or(0.0, |g| g.iter().map(|v| v.abs()).sum()))
                .sum();
            assert_eq!(sem_norm > 0.0, expect_nonzero, "{mode}");
        }
    }

    #[test]
    fn invalid_lambda_is_rejected() {
        assert!(Objective::from_names("gaets", "mae", -1.0).is_err());
        assert!(Objective::from_names("gaets", "mae", f64::NAN).is_err());
    }
}
