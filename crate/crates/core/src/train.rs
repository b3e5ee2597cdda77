//! Joint training of the structure learner, forecaster and SEM autoencoder.

use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{read_json, write_json, NormStats, PreparedData, WindowedDataset};
use crate::diffusion::DecoderFeed;
use crate::error::{GaetsError, Result};
use crate::model::{GaetsModel, LossBreakdown, ModelConfig, Objective};
use crate::nn::{Bound, Params};
use crate::structure::{relaxed_adjacency, threshold_adjacency, EdgeLogits, GraphRelaxation, GumbelNoise};
use crate::tape::{Grads, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs after which the learning rate is multiplied by `lr_gamma`.
    pub lr_milestones: Vec<usize>,
    pub lr_gamma: f64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    /// Registered regularizer name: `gaets` or `gts`.
    pub mode: String,
    /// Registered forecast loss name: `mae` or `mse`.
    pub loss: String,
    /// Regularizer weight; 1 is the unweighted sum.
    pub lambda: f64,
    /// Inverse-sigmoid decay constant of scheduled sampling, in steps.
    pub ss_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 64,
            learning_rate: 1e-3,
            lr_milestones: vec![20, 30],
            lr_gamma: 0.1,
            clip_norm: 5.0,
            adam_epsilon: 1e-8,
            seed: 1,
            mode: "gaets".into(),
            loss: "mae".into(),
            lambda: 1.0,
            ss_decay: 2000.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(GaetsError::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(GaetsError::Config("learning_rate must be positive".into()));
        }
        if !(self.lr_gamma > 0.0 && self.clip_norm > 0.0 && self.ss_decay > 0.0 && self.adam_epsilon > 0.0) {
            return Err(GaetsError::Config(
                "lr_gamma, clip_norm, adam_epsilon and ss_decay must be positive".into(),
            ));
        }
        Objective::from_names(&self.mode, &self.loss, self.lambda).map(|_| ())
    }

    pub fn objective(&self) -> Result<Objective> {
        Objective::from_names(&self.mode, &self.loss, self.lambda)
    }

    /// Step size in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        self.learning_rate * self.lr_gamma.powi(drops as i32)
    }
}

/// Probability of feeding the ground truth to the decoder at `step`.
pub fn teacher_probability(step: u64, decay: f64) -> f64 {
    decay / (decay + (step as f64 / decay).exp())
}

/// Adam with per-parameter first and second moments.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(params: &Params, epsilon: f64) -> Self {
        let zeros: Vec<Array2<f64>> = params.values().iter().map(|p| Array2::zeros(p.dim())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &[Array2<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        for (((p, g), m), v) in params
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

/// Gradient of every parameter, zero where the tape never reached it.
pub fn collect_grads(params: &Params, bound: &Bound, grads: &Grads) -> Vec<Array2<f64>> {
    params
        .ids()
        .map(|id| {
            grads
                .get(bound.var(id))
                .cloned()
                .unwrap_or_else(|| Array2::zeros(params.get(id).dim()))
        })
        .collect()
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Array2<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.mapv_inplace(|v| v * s));
    }
    norm
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub base: f64,
    pub autoencoder: f64,
    pub total: f64,
    pub val_base: f64,
    pub lr: f64,
    pub wall_time: f64,
    pub seed: u64,
}

impl EpochRecord {
    /// The record with its wall-clock field cleared, for reproducibility checks.
    pub fn without_time(&self) -> EpochRecord {
        EpochRecord {
            wall_time: 0.0,
            ..self.clone()
        }
    }
}

pub fn write_log(path: impl AsRef<Path>, log: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for r in log {
        out.push_str(&serde_json::to_string(r).map_err(|e| GaetsError::Format(e.to_string()))?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| GaetsError::io(path, e))
}

const CHECKPOINT_FORMAT: &str = "gaets-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to forecast and report without the training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: GaetsModel,
    pub params: Params,
    /// Logits computed from the training series with `params`.
    pub edge_logits: Array2<f64>,
    pub stats: NormStats,
    pub var_names: Vec<String>,
    pub train: TrainConfig,
    pub config_hash: String,
    pub seed: u64,
    /// Epoch (1-based) after which these parameters were kept; 0 = initial.
    pub epoch: usize,
    pub val_base: Option<f64>,
}

impl Checkpoint {
    pub fn logits(&self) -> EdgeLogits {
        EdgeLogits(self.edge_logits.clone())
    }

    pub fn n_vars(&self) -> usize {
        self.var_names.len()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let c: Checkpoint = read_json(path)?;
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(GaetsError::Format(format!("unsupported checkpoint {} v{}", c.format, c.version)));
        }
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TrainStatus {
    Completed,
    /// A non-finite value appeared; the checkpoint is the last good one.
    Aborted { epoch: usize, step: usize, term: String },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-validation parameters.
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
    pub status: TrainStatus,
    /// Base loss over the training windows before the first update, decoder
    /// teacher-forced and graph thresholded.
    pub initial_train_base: f64,
    /// The same quantity after the last update.
    pub final_train_base: f64,
}

/// Windows `idx` of `ds` as batch tensors.
fn gather(ds: &WindowedDataset, idx: &[usize]) -> (Array3<f64>, Array3<f64>) {
    let axis = ndarray::Axis(0);
    (ds.inputs.select(axis, idx), ds.targets.select(axis, idx))
}

/// How the decoder is fed when scoring a whole split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Feeding {
    /// Its own previous prediction, as at inference.
    Autoregressive,
    /// The previous ground-truth value, as in training before scheduled
    /// sampling has decayed.
    TeacherForced,
}

/// Mean base loss over all windows of `ds` under a fixed adjacency.
pub fn dataset_base_loss(
    model: &GaetsModel,
    params: &Params,
    objective: &Objective,
    adjacency: &Array2<f64>,
    ds: &WindowedDataset,
    batch_size: usize,
    feeding: Feeding,
) -> Result<f64> {
    if ds.is_empty() {
        return Err(GaetsError::Config("cannot evaluate an empty split".into()));
    }
    let truth_flags = vec![true; ds.horizon];
    let mut sum = 0.0;
    for start in (0..ds.len()).step_by(batch_size.max(1)) {
        let idx: Vec<usize> = (start..(start + batch_size).min(ds.len())).collect();
        let (x, y) = gather(ds, &idx);
        let feed = match feeding {
            Feeding::Autoregressive => DecoderFeed::Autoregressive,
            Feeding::TeacherForced => DecoderFeed::Teacher {
                targets: &y,
                use_truth: &truth_flags,
            },
        };
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let a = tape.constant(adjacency.clone());
        let supports = crate::diffusion::Supports::new(&mut tape, a);
        let pred = model.forecaster.forward(&mut tape, &bound, &supports, &x, feed)?;
        let truth = crate::model::stack_nodes(&y);
        sum += objective.loss.value(tape.value(pred), &truth) * idx.len() as f64;
    }
    Ok(sum / ds.len() as f64)
}

/// Per-seed generators: one for initialisation, one for everything drawn
/// during training (batch order, Gumbel noise, scheduled sampling).
pub fn seed_streams(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut init = ChaCha8Rng::seed_from_u64(seed);
    init.set_stream(0);
    let mut train = ChaCha8Rng::seed_from_u64(seed);
    train.set_stream(1);
    (init, train)
}

struct Trainer<'a> {
    model: GaetsModel,
    params: Params,
    objective: Objective,
    cfg: &'a TrainConfig,
    data: &'a PreparedData,
    config_hash: &'a str,
}

impl Trainer<'_> {
    fn logits(&self) -> Result<EdgeLogits> {
        self.model.structure.logits(&self.params, self.data.train_series.view())
    }

    fn checkpoint(&self, epoch: usize, val_base: Option<f64>) -> Result<Checkpoint> {
        Ok(Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: self.model.clone(),
            params: self.params.clone(),
            edge_logits: self.logits()?.0,
            stats: self.data.stats.clone(),
            var_names: self.data.var_names.clone(),
            train: self.cfg.clone(),
            config_hash: self.config_hash.to_string(),
            seed: self.cfg.seed,
            epoch,
            val_base,
        })
    }

    fn split_loss(&self, ds: &WindowedDataset, feeding: Feeding) -> Result<f64> {
        let adj = threshold_adjacency(&self.logits()?);
        dataset_base_loss(&self.model, &self.params, &self.objective, &adj, ds, self.cfg.batch_size.max(64), feeding)
    }
}

/// Trains one model. Non-finite losses or gradients stop training early with
/// [`TrainStatus::Aborted`]; other failures are errors.
pub fn train(model_cfg: &ModelConfig, cfg: &TrainConfig, data: &PreparedData, config_hash: &str) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(GaetsError::Config("training and validation splits must be non-empty".into()));
    }
    let n = data.train.n_vars();
    if data.train_series.nrows() != n {
        return Err(GaetsError::dim("training series", n, data.train_series.nrows()));
    }
    let (mut init_rng, mut rng) = seed_streams(cfg.seed);
    let mut params = Params::new();
    let model = GaetsModel::new(&mut params, model_cfg, data.train.input_len, data.train.horizon, &mut init_rng)?;
    let mut tr = Trainer {
        model,
        params,
        objective: cfg.objective()?,
        cfg,
        data,
        config_hash,
    };

    let initial_train_base = tr.split_loss(&data.train, Feeding::TeacherForced)?;
    let mut best = tr.checkpoint(0, None)?;
    let mut best_val = f64::INFINITY;
    let mut adam = Adam::new(&tr.params, cfg.adam_epsilon);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut global_step: u64 = 0;
    let started = Instant::now();
    let horizon = data.train.horizon;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (LossBreakdown { base: 0.0, autoencoder: 0.0, total: 0.0 }, 0usize);
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = gather(&data.train, idx);
            let noise = GumbelNoise::sample(n, &mut rng);
            let p_truth = teacher_probability(global_step, cfg.ss_decay);
            let use_truth: Vec<bool> = (0..horizon).map(|_| rng.random::<f64>() < p_truth).collect();

            let mut tape = Tape::new();
            let bound = tr.params.bind(&mut tape);
            let logits = tr.model.logits(&mut tape, &bound, data.train_series.view())?;
            let adj = relaxed_adjacency(&mut tape, logits, &noise, model_cfg.temperature, GraphRelaxation::StraightThrough);
            let feed = DecoderFeed::Teacher {
                targets: &y,
                use_truth: &use_truth,
            };
            let vars = tr.objective.evaluate(&mut tape, &bound, &tr.model, adj, &x, &y, feed)?;
            let lb = vars.breakdown(&tape);
            let bad = if !lb.base.is_finite() {
                Some("base loss")
            } else if !lb.autoencoder.is_finite() {
                Some("autoencoder loss")
            } else {
                None
            };
            let mut grads = Vec::new();
            let bad = bad.or_else(|| {
                grads = collect_grads(&tr.params, &bound, &tape.backward(vars.total));
                let norm = clip_global_norm(&mut grads, cfg.clip_norm);
                (!norm.is_finite()).then_some("gradient")
            });
            if let Some(term) = bad {
                log::error!("non-finite {term} at epoch {} step {step}", epoch + 1);
                return Ok(TrainOutcome {
                    checkpoint: best,
                    log,
                    status: TrainStatus::Aborted {
                        epoch: epoch + 1,
                        step,
                        term: term.to_string(),
                    },
                    initial_train_base,
                    final_train_base: f64::NAN,
                });
            }
            adam.step(&mut tr.params, &grads, lr);
            global_step += 1;
            let w = idx.len();
            sum.base += lb.base * w as f64;
            sum.autoencoder += lb.autoencoder * w as f64;
            sum.total += lb.total * w as f64;
            count += w;
        }

        let val_base = tr.split_loss(&data.val, Feeding::Autoregressive)?;
        let c = count as f64;
        let record = EpochRecord {
            epoch: epoch + 1,
            base: sum.base / c,
            autoencoder: sum.autoencoder / c,
            total: sum.total / c,
            val_base,
            lr,
            wall_time: started.elapsed().as_secs_f64(),
            seed: cfg.seed,
        };
        log::info!(
            "seed {} epoch {}: base {:.5} ae {:.5} val {:.5}",
            cfg.seed,
            record.epoch,
            record.base,
            record.autoencoder,
            val_base
        );
        log.push(record);
        if val_base < best_val {
            best_val = val_base;
            best = tr.checkpoint(epoch + 1, Some(val_base))?;
        }
    }

    let final_train_base = tr.split_loss(&data.train, Feeding::TeacherForced)?;
    Ok(TrainOutcome {
        checkpoint: best,
        log,
        status: TrainStatus::Completed,
        initial_train_base,
        final_train_base,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_windows, split, NormStats, SplitSpec};
    use crate::structure::ConvSpec;

    pub(crate) fn tiny_model() -> ModelConfig {
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

    fn tiny_data() -> PreparedData {
        let l = 60;
        let values = Array2::from_shape_fn((3, l), |(i, t)| ((t as f64) * 0.3 + i as f64).sin());
        let names: Vec<String> = (0..3).map(|i| format!("v{i}")).collect();
        let series = crate::data::RawSeries::new(values.clone(), names.clone(), 1.0).unwrap();
        let ds = make_windows(&series, 6, 3, 1).unwrap().dataset;
        let (train, val, test) = split(&ds, &SplitSpec::chronological(0.7, 0.15, 0.15)).unwrap();
        let stats = NormStats::fit(&values, &names).unwrap();
        let mut s = values.clone();
        stats.apply_axis(&mut s, 0);
        PreparedData {
            train: train.normalized(&stats),
            val: val.normalized(&stats),
            test: test.normalized(&stats),
            stats,
            train_series: s,
            var_names: names,
        }
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            learning_rate: 0.01,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initial_checkpoint() {
        let out = train(&tiny_model(), &cfg(0), &tiny_data(), "h").unwrap();
        assert!(out.log.is_empty());
        assert_eq!(out.checkpoint.epoch, 0);
        assert_eq!(out.status, TrainStatus::Completed);
        assert_eq!(out.initial_train_base, out.final_train_base);
    }

    #[test]
    fn runs_are_bit_identical() {
        let data = tiny_data();
        let a = train(&tiny_model(), &cfg(3), &data, "h").unwrap();
        let b = train(&tiny_model(), &cfg(3), &data, "h").unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
        let strip = |l: &[EpochRecord]| l.iter().map(EpochRecord::without_time).collect::<Vec<_>>();
        assert_eq!(strip(&a.log), strip(&b.log));
        assert_eq!(a.log.len(), 3);
    }

    #[test]
    fn gts_log_has_zero_autoencoder_term() {
        let c = TrainConfig {
            mode: "gts".into(),
            ..cfg(2)
        };
        let out = train(&tiny_model(), &c, &tiny_data(), "h").unwrap();
        for r in &out.log {
            assert_eq!(r.autoencoder, 0.0);
            assert_eq!(r.total, r.base);
        }
    }

    #[test]
    fn training_reduces_loss() {
        let out = train(&tiny_model(), &cfg(15), &tiny_data(), "h").unwrap();
        assert!(out.final_train_base < out.initial_train_base);
    }

    #[test]
    fn best_checkpoint_has_lowest_validation() {
        let out = train(&tiny_model(), &cfg(6), &tiny_data(), "h").unwrap();
        let min = out.log.iter().map(|r| r.val_base).fold(f64::INFINITY, f64::min);
        assert_eq!(out.checkpoint.val_base, Some(min));
    }

    #[test]
    fn learning_rate_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 1e-3);
        assert_eq!(c.lr_at(19), 1e-3);
        assert!((c.lr_at(20) - 1e-4).abs() < 1e-18);
        assert!((c.lr_at(35) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn teacher_probability_decays() {
        assert!((teacher_probability(0, 2000.0) - 2000.0 / 2001.0).abs() < 1e-15);
        assert!(teacher_probability(30_000, 2000.0) < 0.5);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Array2::from_elem((2, 2), 3.0), Array2::from_elem((1, 1), 4.0)];
        let before = clip_global_norm(&mut g, 5.0);
        assert!((before - (36.0f64 + 16.0).sqrt()).abs() < 1e-12);
        let after: f64 = g.iter().flat_map(|a| a.iter()).map(|v| v * v).sum::<f64>().sqrt();
        assert!((after - 5.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_mode_is_a_config_error() {
        let c = TrainConfig {
            mode: "dag".into(),
            ..cfg(1)
        };
        assert_eq!(train(&tiny_model(), &c, &tiny_data(), "h").unwrap_err().exit_code(), 2);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let out = train(&tiny_model(), &cfg(1), &tiny_data(), "h").unwrap();
        let p = dir.path().join("c.json");
        out.checkpoint.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), out.checkpoint);
    }
}
