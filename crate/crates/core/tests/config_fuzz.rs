use proptest::prelude::*;
use zsl_expand::experiment::{generate_data, run_pipeline, ExperimentConfig};

#[derive(Debug, Clone)]
struct Shape {
    m: usize,
    v: usize,
    n: usize,
    extra_d: usize,
    k: Option<usize>,
    neighbors: usize,
    variant: &'static str,
    activation: &'static str,
    metric: &'static str,
    neighbor_metric: &'static str,
    tied: bool,
    normalize: bool,
    batch: usize,
}

fn shapes() -> impl Strategy<Value = Shape> {
    (
        (2usize..7, 1usize..4, 1usize..4, 0usize..5),
        prop::option::of(0usize..4),
        1usize..7,
        (prop::sample::select(vec!["ae", "vae"]), prop::sample::select(vec!["relu", "tanh"])),
        (prop::sample::select(vec!["cosine", "euclidean"]), prop::sample::select(vec!["cosine", "euclidean"])),
        (any::<bool>(), any::<bool>(), 1usize..20),
    )
        .prop_map(|((m, v, n, extra_d), k, g, (variant, activation), (metric, neighbor_metric), (tied, normalize, batch))| Shape {
            m,
            v,
            n,
            extra_d,
            k,
            neighbors: g.min(m),
            variant,
            activation,
            metric,
            neighbor_metric,
            tied,
            normalize,
            batch,
        })
}

fn config_for(s: &Shape, out: &std::path::Path) -> ExperimentConfig {
    let k_room = s.k.unwrap_or(((0.6 * s.n as f64).round() as usize).max(1)).max(1);
    ExperimentConfig {
        m_seen: s.m,
        v_unseen: s.v,
        n: s.n,
        d: s.n + k_room + 1 + s.extra_d,
        examples_per_class: 3,
        latent_k: s.k,
        neighbors: s.neighbors,
        variant: s.variant.into(),
        activation: s.activation.into(),
        metric: s.metric.into(),
        neighbor_metric: s.neighbor_metric.into(),
        tied: s.tied,
        normalize: s.normalize,
        hidden: vec![5],
        epochs: 2,
        batch_size: s.batch,
        projection_epochs: 2,
        projection_batch_size: s.batch,
        sweep_k: vec![1],
        seeds: vec![1],
        cache: false,
        out_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn valid_configs_run_end_to_end(shape in shapes()) {
        let dir = tempfile::tempdir().unwrap();
        let config = config_for(&shape, dir.path());
        prop_assert!(config.validate().is_ok(), "{:?}", config.validate());
        let runs = run_pipeline(&config).map_err(|e| TestCaseError::fail(format!("{e}")))?;
        let report = &runs[0].report;
        prop_assert_eq!(report.hit_at_k.len(), shape.v);
        prop_assert!((report.hit_at_k[shape.v - 1] - 1.0).abs() < 1e-12);
        for w in report.hit_at_k.windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
        let total: u64 = report.confusion.iter().sum();
        prop_assert_eq!(total as usize, 3 * shape.v);
    }

    #[test]
    fn toml_round_trip_is_lossless(shape in shapes()) {
        let config = config_for(&shape, std::path::Path::new("runs"));
        let back = ExperimentConfig::from_toml_str(&config.to_toml()).unwrap();
        prop_assert_eq!(&back, &config);
        prop_assert_eq!(back.hash(), config.hash());
    }

    #[test]
    fn broken_configs_fail_in_config_stage(shape in shapes(), which in 0usize..9) {
        let dir = tempfile::tempdir().unwrap();
        let mut config = config_for(&shape, dir.path());
        match which {
            0 => config.neighbors = shape.m + 1,
            1 => config.d = shape.n + 1,
            2 => config.variant = "gan".into(),
            3 => config.alpha = -1.0,
            4 => config.batch_size = 0,
            5 => config.seeds = vec![3, 3],
            6 => config.hit_k = Some(shape.v + 1),
            7 => config.adam_beta2 = 1.0,
            _ => config.m_seen = 1,
        }
        let err = run_pipeline(&config).unwrap_err();
        prop_assert_eq!(err.stage(), Some("config"), "{}", err);
        let err = generate_data(&config).unwrap_err();
        prop_assert_eq!(err.stage(), Some("config"));
        prop_assert!(!dir.path().join("seed_1").exists());
    }
}
