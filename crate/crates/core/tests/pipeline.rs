use gaets::data::{prepare, split, PreparedData, SplitSpec, WindowSpec, WindowedDataset};
use gaets::metrics::{aggregate_seeds, evaluate, forecast_split, mae, EvalOptions};
use gaets::model::ModelConfig;
use gaets::structure::{threshold_adjacency, ConvSpec};
use gaets::synthetic::{benchmark_graph, generate};
use gaets::train::{train, Checkpoint, TrainConfig};

fn tiny_model() -> ModelConfig {
    ModelConfig {
        h_dim: 4,
        d_embed: 4,
        d_link: 4,
        d_sem: 3,
        conv: ConvSpec {
            kernel: 3,
            channels: vec![2, 3],
            pool_bins: 4,
        },
        ..ModelConfig::default()
    }
}

fn tiny_data(horizon: usize) -> PreparedData {
    let raw = generate(&benchmark_graph(), 400, 9).unwrap();
    let window = WindowSpec {
        input_len: 12,
        horizon,
        stride: 3,
    };
    prepare(&[raw], &[], window, &SplitSpec::default()).unwrap()
}

fn tiny_train(seed: u64, mode: &str) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 16,
        seed,
        mode: mode.into(),
        ..TrainConfig::default()
    }
}

#[test]
fn train_then_evaluate() {
    let data = tiny_data(4);
    let out = train(&tiny_model(), &tiny_train(3, "gaets"), &data, "h").unwrap();
    assert_eq!(out.log.len(), 2);
    let (report, fc) = evaluate(&out.checkpoint, &data.test, &EvalOptions::default()).unwrap();
    assert_eq!(report.mode, "GAETS");
    assert_eq!(report.per_seed.len(), 1);
    assert_eq!(fc.pred.dim(), (data.test.len(), 6, 4));
    for name in ["mae", "rmse", "mape"] {
        assert!(report.value(4, name).unwrap() >= 0.0);
    }
    // metrics are reported in original units
    let raw_truth = data.test.denormalized(&data.stats).targets;
    assert_eq!(fc.truth.shape(), raw_truth.shape());
    assert!(fc.truth.iter().zip(raw_truth.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    assert_eq!(report.value(4, "mae"), Some(mae(&fc.pred, &fc.truth).unwrap()));
}

#[test]
fn checkpoint_reload_gives_identical_metrics() {
    let data = tiny_data(3);
    let out = train(&tiny_model(), &tiny_train(5, "gts"), &data, "h").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ck.json");
    out.checkpoint.save(&p).unwrap();
    let back = Checkpoint::load(&p).unwrap();
    let opts = EvalOptions {
        mc_graphs: Some(3),
        report_reconstruction: true,
        ..EvalOptions::default()
    };
    let a = evaluate(&out.checkpoint, &data.test, &opts).unwrap().0;
    let b = evaluate(&back, &data.test, &opts).unwrap().0;
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let e = &a.per_seed[0];
    assert_eq!(e.sampled_graphs.as_ref().unwrap().graphs, 3);
    assert_eq!(e.reconstruction.as_ref().unwrap().len(), 6);
}

#[test]
fn horizon_mismatch_is_a_config_error() {
    let data = tiny_data(4);
    let out = train(&tiny_model(), &tiny_train(1, "gaets"), &data, "h").unwrap();
    let other = tiny_data(5);
    let err = evaluate(&out.checkpoint, &other.test, &EvalOptions::default()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn seeds_aggregate_with_intervals() {
    let data = tiny_data(4);
    let reports: Vec<_> = (1..=3)
        .map(|s| {
            let ck = train(&tiny_model(), &tiny_train(s, "gaets"), &data, "h").unwrap().checkpoint;
            evaluate(&ck, &data.test, &EvalOptions::default()).unwrap().0
        })
        .collect();
    let agg = aggregate_seeds(&reports).unwrap();
    assert_eq!(agg.per_seed.len(), 3);
    let mae_row = agg.aggregate.iter().find(|a| a.metric == "mae").unwrap();
    assert_eq!(mae_row.seeds, 3);
    let values: Vec<f64> = reports.iter().map(|r| r.value(4, "mae").unwrap()).collect();
    let mean = values.iter().sum::<f64>() / 3.0;
    assert!((mae_row.mean.unwrap() - mean).abs() < 1e-12);
    assert!(mae_row.half_width.unwrap() > 0.0);
}

#[test]
fn forecasts_under_empty_and_full_graphs_differ() {
    let data = tiny_data(4);
    let ck = train(&tiny_model(), &tiny_train(2, "gaets"), &data, "h").unwrap().checkpoint;
    let empty = ndarray::Array2::zeros((6, 6));
    let full = ndarray::Array2::ones((6, 6));
    let a = forecast_split(&ck, &empty, &data.test, 64).unwrap();
    let b = forecast_split(&ck, &full, &data.test, 64).unwrap();
    assert!(a.pred.iter().zip(b.pred.iter()).any(|(x, y)| (x - y).abs() > 1e-9));
    let t = forecast_split(&ck, &threshold_adjacency(&ck.logits()), &data.test, 7).unwrap();
    let u = forecast_split(&ck, &threshold_adjacency(&ck.logits()), &data.test, 64).unwrap();
    assert_eq!(t.pred, u.pred);
}

#[test]
fn fixture_split_sizes() {
    let n = 1710;
    let ds = WindowedDataset::empty(6, 80, 40, 1).select(&[]);
    assert_eq!(ds.len(), 0);
    let spec = SplitSpec::chronological(1497.0 / 1710.0, 213.0 / 1710.0, 0.0);
    assert_eq!(spec.sizes(n), (1497, 213, 0));
    let (a, b, c) = split(&ds, &spec).unwrap();
    assert!(a.is_empty() && b.is_empty() && c.is_empty());
}
