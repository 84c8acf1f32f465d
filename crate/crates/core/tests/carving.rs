mod common;

use std::sync::OnceLock;

use moie_core::carve::{
    self, carve_iteration, evaluate, load_state, moie_predict, save_state, CarveConfig, CarveState, Destination, Mode,
};
use moie_core::datagen::{generate, Dataset, LabelRule, ShortcutSpec, Split};
use moie_core::models::{train_blackbox, train_projector, Blackbox, BlackboxConfig};

struct Setup {
    ds: Dataset,
    bb: Blackbox,
    cfg: CarveConfig,
}

fn quick_carve() -> CarveConfig {
    CarveConfig {
        warmup_epochs: 5,
        epochs_expert: 15,
        epochs_residual: 5,
        projector_steps: 150,
        ..CarveConfig::default()
    }
}

fn setup() -> &'static Setup {
    static S: OnceLock<Setup> = OnceLock::new();
    S.get_or_init(|| {
        let spec = ShortcutSpec { n_samples: 3000, ..ShortcutSpec::default() };
        let ds = generate(&spec).unwrap().dataset;
        let bb = train_blackbox(&ds, &BlackboxConfig { epochs: 15, ..BlackboxConfig::default() }, 0).unwrap();
        Setup { ds, bb, cfg: quick_carve() }
    })
}

fn train_residual_fraction(state: &CarveState, cache: &carve::Cache, ds: &Dataset) -> f64 {
    let train = ds.indices(Split::Train);
    let routes = state.routes(cache, &train).unwrap();
    routes.iter().filter(|r| r.destination == Destination::Residual).count() as f64 / train.len() as f64
}

#[test]
fn iterations_leave_earlier_components_and_phi_untouched() {
    let s = setup();
    let projector = train_projector(&s.bb, &s.ds, &s.cfg.projector_config()).unwrap();
    let mut state = CarveState::new(s.bb.clone(), projector).unwrap();
    let phi_before = s.bb.phi_hash().unwrap();
    let cache = state.cache(&s.ds).unwrap();
    let mut residual = 1.0;
    for k in 1..=3 {
        let earlier = state.iterations.clone();
        carve_iteration(&mut state, &cache, &s.ds, k, &s.cfg).unwrap();
        assert_eq!(state.iterations[..k - 1], earlier[..], "iteration {k} touched earlier selectors or experts");
        assert_eq!(state.blackbox.phi_hash().unwrap(), phi_before);
        assert_eq!(state.phi_hash, phi_before);

        let now = train_residual_fraction(&state, &cache, &s.ds);
        assert!(now <= residual + 1e-12, "residual grew from {residual} to {now} at k={k}");
        residual = now;
        assert!((state.cumulative_coverage - (1.0 - now)).abs() < 1e-12);
        let hard: f64 = state.iterations.iter().map(|it| it.hard_coverage).sum();
        assert!((hard - state.cumulative_coverage).abs() < 1e-9);
    }
}

#[test]
fn destinations_partition_every_split() {
    let s = setup();
    let state = carve::carve(&s.bb, &s.ds, &s.cfg).unwrap();
    let cache = state.cache(&s.ds).unwrap();
    for split in Split::ALL {
        let r = evaluate(&state, &cache, &s.ds, split).unwrap();
        let counts: usize = r.experts.iter().map(|e| e.count).sum::<usize>() + r.residual.count;
        assert_eq!(counts, r.n);
        let cov: f64 = r.experts.iter().map(|e| e.coverage).sum::<f64>() + r.residual.coverage;
        assert!((cov - 1.0).abs() < 1e-12);

        let rows = s.ds.indices(split);
        let plus_r = moie_predict(&state, &cache, &rows, Mode::MoiePlusR).unwrap();
        assert!(plus_r.iter().all(|p| p.label.is_some()));
        let moie = moie_predict(&state, &cache, &rows, Mode::Moie).unwrap();
        for (a, b) in moie.iter().zip(&plus_r) {
            assert_eq!(a.destination, b.destination);
            match a.destination {
                Destination::Residual => assert_eq!(a.label, None),
                Destination::Expert(k) => {
                    let c = cache.concepts.select_rows(&[a.sample]);
                    let logits = state.iterations[k - 1].expert.forward(&c).unwrap();
                    assert_eq!(a.label, Some(logits.argmax_rows()[0]));
                    assert_eq!(a.label, b.label);
                }
            }
        }
    }
}

#[test]
fn saved_states_load_back_identically() {
    let s = setup();
    let cfg = CarveConfig { k: 1, tau: vec![0.5], ..s.cfg.clone() };
    let state = carve::carve(&s.bb, &s.ds, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_state(&state, &cfg, &s.ds, dir.path()).unwrap();
    let (loaded, m2) = load_state(dir.path()).unwrap();
    assert_eq!(loaded, state);
    assert_eq!(m2, manifest);

    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(save_state(&loaded, &cfg, &s.ds, tmp.path()).unwrap(), manifest);

    let file = dir.path().join(&manifest.checkpoints[0].file);
    let mut text = std::fs::read_to_string(&file).unwrap();
    text.push(' ');
    std::fs::write(&file, text).unwrap();
    assert!(load_state(dir.path()).is_err(), "a tampered checkpoint must not load");
}

#[test]
fn full_coverage_target_on_separable_data_matches_the_blackbox() {
    let spec = ShortcutSpec {
        n_samples: 3000,
        label_rule: LabelRule::Concept { index: 0 },
        train_correlation: 0.5,
        seed: 4,
        ..ShortcutSpec::default()
    };
    let ds = generate(&spec).unwrap().dataset;
    let bb = train_blackbox(&ds, &BlackboxConfig { epochs: 15, ..BlackboxConfig::default() }, 4).unwrap();
    let cfg = CarveConfig { k: 1, tau: vec![1.0], ..quick_carve() };
    let state = carve::carve(&bb, &ds, &cfg).unwrap();
    let cache = state.cache(&ds).unwrap();
    let r = evaluate(&state, &cache, &ds, Split::Test).unwrap();
    assert_eq!(r.moie_coverage, 1.0);
    let expert = r.moie_accuracy.unwrap();
    assert!((expert - r.blackbox_accuracy).abs() <= 0.02, "expert {expert} vs blackbox {}", r.blackbox_accuracy);
}

#[test]
fn small_coverage_target_is_met() {
    let s = setup();
    let cfg = CarveConfig { k: 1, tau: vec![0.2], lambda_s: 32.0, ..s.cfg.clone() };
    let state = carve::carve(&s.bb, &s.ds, &cfg).unwrap();
    assert!(state.iterations[0].coverage >= 0.15, "ζ = {}", state.iterations[0].coverage);
}

fn worst_probe_accuracy(spec: &ShortcutSpec) -> f64 {
    let ds = generate(spec).unwrap().dataset;
    let train = ds.indices(Split::Train);
    let val = ds.indices(Split::Val);
    let x_train = ds.features(&train);
    let x_val = ds.features(&val);
    (0..ds.n_concepts)
        .map(|j| {
            let y: Vec<f64> = train.iter().map(|&i| f64::from(ds.concept(i, j))).collect();
            let w = common::ols_fit(&x_train, &y);
            let hits = val
                .iter()
                .enumerate()
                .filter(|&(r, &i)| {
                    let score = w[0] + x_val.row(r).iter().zip(&w[1..]).map(|(a, b)| a * b).sum::<f64>();
                    (score >= 0.5) == (ds.concept(i, j) == 1)
                })
                .count();
            hits as f64 / val.len() as f64
        })
        .fold(1.0, f64::min)
}

#[test]
fn linear_probes_read_every_concept_from_features() {
    for seed in 0..3 {
        let default_scales = ShortcutSpec { n_samples: 3000, seed, ..ShortcutSpec::default() };
        let acc = worst_probe_accuracy(&default_scales);
        assert!(acc >= 0.95, "seed {seed}, default spec: probe accuracy {acc}");
        let unit_scales = ShortcutSpec { noise_std: 0.1, core_scale: 1.0, spurious_scale: 1.0, ..default_scales };
        let acc = worst_probe_accuracy(&unit_scales);
        assert!(acc >= 0.95, "seed {seed}, noise 0.1 with unit scales: probe accuracy {acc}");
    }
}
