//! Central-difference verification of the analytic gradient of the full
//! training objective.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diffusion::DecoderFeed;
use crate::error::{GaetsError, Result};
use crate::model::{GaetsModel, ModelConfig, Objective};
use crate::nn::{ParamId, Params};
use crate::structure::{relaxed_adjacency, ConvSpec, GraphRelaxation, GumbelNoise};
use crate::tape::Tape;
use crate::train::collect_grads;

/// A scalar function of a parameter store with an analytic gradient.
pub trait GradientProbe {
    fn params(&self) -> &Params;
    /// Value at `params` plus the kink pattern of the forward pass.
    fn loss(&self, params: &Params) -> Result<(f64, Vec<bool>)>;
    /// Gradient for every parameter of `params`, in id order.
    fn gradient(&self, params: &Params) -> Result<Vec<Array2<f64>>>;
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub epsilon: f64,
    /// Entries probed in each parameter matrix.
    pub per_matrix: usize,
    /// Groups to probe; `None` probes all.
    pub groups: Option<Vec<String>>,
    /// Floor on the denominator of the relative error.
    pub floor: f64,
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            epsilon: 1e-5,
            per_matrix: 3,
            groups: None,
            floor: 1e-5,
            max_retries: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupReport {
    pub probed: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub probed: usize,
    pub groups: BTreeMap<String, GroupReport>,
    /// True when nothing was probed; the check then passes vacuously.
    pub no_parameters_probed: bool,
    /// Probes discarded because a difference straddled a kink.
    pub retries: usize,
}

impl GradcheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

enum Attempt {
    Done(GradcheckReport),
    Kink,
}

fn check_once<P: GradientProbe>(probe: &P, opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<Attempt> {
    let params = probe.params();
    let ids: Vec<ParamId> = params
        .ids()
        .filter(|&id| {
            opts.groups
                .as_ref()
                .is_none_or(|g| g.iter().any(|name| name == params.group(id)))
        })
        .collect();
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        probed: 0,
        groups: BTreeMap::new(),
        no_parameters_probed: true,
        retries: 0,
    };
    if ids.is_empty() {
        return Ok(Attempt::Done(report));
    }
    let grads = probe.gradient(params)?;
    let mut work = params.clone();
    for id in ids {
        let size = params.get(id).len();
        let ncols = params.get(id).ncols();
        for flat in sample(rng, size, opts.per_matrix.min(size)).into_iter() {
            let at = (flat / ncols, flat % ncols);
            let orig = params.get(id)[at];
            work.get_mut(id)[at] = orig + opts.epsilon;
            let (up, pat_up) = probe.loss(&work)?;
            work.get_mut(id)[at] = orig - opts.epsilon;
            let (down, pat_down) = probe.loss(&work)?;
            work.get_mut(id)[at] = orig;
            if pat_up != pat_down {
                return Ok(Attempt::Kink);
            }
            let numeric = (up - down) / (2.0 * opts.epsilon);
            let err = relative_error(grads[id.0][at], numeric, opts.floor);
            let g = report.groups.entry(params.group(id).to_string()).or_insert(GroupReport {
                probed: 0,
                max_rel_error: 0.0,
            });
            g.probed += 1;
            g.max_rel_error = g.max_rel_error.max(err);
            report.max_rel_error = report.max_rel_error.max(err);
            report.probed += 1;
        }
    }
    report.no_parameters_probed = report.probed == 0;
    Ok(Attempt::Done(report))
}

/// Runs the check on `make(attempt)`, drawing a fresh probe whenever a
/// difference straddles a ReLU or absolute-value kink.
pub fn gradcheck<P, F>(make: F, opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    P: GradientProbe,
    F: Fn(usize) -> Result<P>,
{
    if !(1e-6..=1e-4).contains(&opts.epsilon) {
        return Err(GaetsError::Config(format!("epsilon must lie in [1e-6, 1e-4], got {}", opts.epsilon)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for attempt in 0..=opts.max_retries {
        let probe = make(attempt)?;
        if let Attempt::Done(mut r) = check_once(&probe, opts, &mut rng)? {
            r.retries = attempt;
            return Ok(r);
        }
    }
    Err(GaetsError::NonFinite(format!(
        "every gradient-check probe hit a kink after {} retries",
        opts.max_retries
    )))
}

/// Size of a [`ModelProbe`].
#[derive(Clone, Debug)]
pub struct ProbeShape {
    pub n: usize,
    pub input_len: usize,
    pub horizon: usize,
    pub batch: usize,
    /// Length of the series fed to the structure encoder.
    pub series_len: usize,
}

impl Default for ProbeShape {
    fn default() -> Self {
        ProbeShape {
            n: 3,
            input_len: 6,
            horizon: 3,
            batch: 2,
            series_len: 16,
        }
    }
}

/// Group name of the logit offset parameter a [`ModelProbe`] adds.
pub const EDGE_LOGITS_GROUP: &str = "edge_logits";

/// The total objective on a small random instance, with the graph entering
/// through the relaxed sample and the Gumbel noise frozen. An extra zero
/// parameter is added to the edge logits so their gradient is checked too.
pub struct ModelProbe {
    model: GaetsModel,
    params: Params,
    offset: ParamId,
    objective: Objective,
    series: Array2<f64>,
    inputs: Array3<f64>,
    targets: Array3<f64>,
    noise: GumbelNoise,
}

impl ModelProbe {
    pub fn probe_config() -> ModelConfig {
        ModelConfig {
            h_dim: 4,
            num_layers: 1,
            diffusion_k: 2,
            d_embed: 4,
            d_link: 4,
            d_sem: 3,
            conv: ConvSpec {
                kernel: 3,
                channels: vec![2, 3],
                pool_bins: 2,
            },
            temperature: 0.5,
        }
    }

    pub fn random(shape: &ProbeShape, objective: Objective, seed: u64) -> Result<Self> {
        if shape.n > 4 || shape.input_len > 8 || shape.horizon > 4 {
            return Err(GaetsError::Config("gradient probes need n <= 4, T <= 8, horizon <= 4".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let model = GaetsModel::new(&mut params, &Self::probe_config(), shape.input_len, shape.horizon, &mut rng)?;
        // break the symmetry of zero biases and unit gate biases
        for v in params.values_mut() {
            v.mapv_inplace(|x| x + rng.random_range(-0.2..0.2));
        }
        let offset = params.add(format!("{EDGE_LOGITS_GROUP}/offset"), Array2::zeros((shape.n, shape.n)));
        let mut uni = |d: (usize, usize, usize)| Array3::from_shape_simple_fn(d, || rng.random_range(-1.0..1.0));
        let inputs = uni((shape.batch, shape.n, shape.input_len));
        let targets = uni((shape.batch, shape.n, shape.horizon));
        let series = Array2::from_shape_simple_fn((shape.n, shape.series_len), || rng.random_range(-1.0..1.0));
        let noise = GumbelNoise::sample(shape.n, &mut rng);
        Ok(ModelProbe {
            model,
            params,
            offset,
            objective,
            series,
            inputs,
            targets,
            noise,
        })
    }

    fn forward(&self, tape: &mut Tape, bound: &crate::nn::Bound) -> Result<crate::tape::Var> {
        let logits = self.model.logits(tape, bound, self.series.view())?;
        let logits = tape.add(logits, bound.var(self.offset));
        let adj = relaxed_adjacency(
            tape,
            logits,
            &self.noise,
            self.model.config.temperature,
            GraphRelaxation::Relaxed,
        );
        let vars = self.objective.evaluate(
            tape,
            bound,
            &self.model,
            adj,
            &self.inputs,
            &self.targets,
            DecoderFeed::Autoregressive,
        )?;
        Ok(vars.total)
    }
}

impl GradientProbe for ModelProbe {
    fn params(&self) -> &Params {
        &self.params
    }

    fn loss(&self, params: &Params) -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let total = self.forward(&mut tape, &bound)?;
        Ok((tape.scalar_value(total), tape.kink_pattern()))
    }

    fn gradient(&self, params: &Params) -> Result<Vec<Array2<f64>>> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let total = self.forward(&mut tape, &bound)?;
        Ok(collect_grads(params, &bound, &tape.backward(total)))
    }
}

/// The standard check: 3 nodes, `T = 6`, horizon 3, GAETS objective.
pub fn check_model(seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let shape = ProbeShape::default();
    gradcheck(
        |attempt| {
            let objective = Objective::from_names("gaets", "mae", 1.0)?;
            ModelProbe::random(&shape, objective, seed.wrapping_mul(1000).wrapping_add(attempt as u64))
        },
        opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scales the analytic gradient of one parameter.
    struct Corrupted {
        inner: ModelProbe,
        target: ParamId,
        factor: f64,
    }

    impl GradientProbe for Corrupted {
        fn params(&self) -> &Params {
            self.inner.params()
        }

        fn loss(&self, params: &Params) -> Result<(f64, Vec<bool>)> {
            self.inner.loss(params)
        }

        fn gradient(&self, params: &Params) -> Result<Vec<Array2<f64>>> {
            let mut g = self.inner.gradient(params)?;
            g[self.target.0].mapv_inplace(|v| v * self.factor);
            Ok(g)
        }
    }

    fn gaets() -> Objective {
        Objective::from_names("gaets", "mae", 1.0).unwrap()
    }

    #[test]
    fn healthy_model_passes() {
        let r = check_model(1, &GradcheckOptions::default()).unwrap();
        assert!(r.passed(1e-4), "{r:?}");
        for g in [
            "encoder",
            "link",
            "sem",
            "dcgru_encoder",
            "dcgru_decoder",
            "projection",
            EDGE_LOGITS_GROUP,
        ] {
            assert!(r.groups[g].probed > 0, "{g} not probed");
        }
    }

    #[test]
    fn corrupted_gate_gradient_fails() {
        let shape = ProbeShape::default();
        let opts = GradcheckOptions {
            groups: Some(vec!["dcgru_encoder".into()]),
            per_matrix: 6,
            ..GradcheckOptions::default()
        };
        let r = gradcheck(
            |attempt| {
                let inner = ModelProbe::random(&shape, gaets(), 7 + attempt as u64)?;
                let target = inner.params.find("dcgru_encoder/layer0/update/theta_fwd1").unwrap();
                Ok(Corrupted {
                    inner,
                    target,
                    factor: 1.5,
                })
            },
            &opts,
        )
        .unwrap();
        assert!(r.max_rel_error > 1e-2, "{r:?}");
        assert!(!r.passed(1e-4));
    }

    #[test]
    fn empty_selection_is_vacuous() {
        let opts = GradcheckOptions {
            groups: Some(vec!["no_such_group".into()]),
            ..GradcheckOptions::default()
        };
        let r = check_model(1, &opts).unwrap();
        assert!(r.no_parameters_probed);
        assert_eq!(r.probed, 0);
        assert!(r.passed(1e-4));
    }

    #[test]
    fn epsilon_range_is_enforced() {
        let opts = GradcheckOptions {
            epsilon: 1e-2,
            ..GradcheckOptions::default()
        };
        assert!(matches!(check_model(1, &opts), Err(GaetsError::Config(_))));
    }

    #[test]
    fn oversized_probe_is_rejected() {
        let shape = ProbeShape {
            n: 5,
            ..ProbeShape::default()
        };
        assert!(ModelProbe::random(&shape, gaets(), 1).is_err());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0, 1e-5), 0.0);
        assert_eq!(relative_error(2.0, 1.0, 1e-5), 0.5);
        assert!((relative_error(1e-9, 0.0, 1e-5) - 1e-4).abs() < 1e-18);
    }
}
