use mdc_core::analytics::{omega, SecurityThresholds};
use mdc_core::evaluation::{reliability, JdanForecaster, MkdeForecaster, MkdeModel};
use mdc_core::jdan::{CouplingMode, JdanArch};
use mdc_core::nfn::{ForecastModel, NfnArch};
use mdc_core::par;
use mdc_core::pipeline::{
    compute_margins, feature_refs, synth_generate, targets, Dataset, DatasetManifest,
    FlowgateSeries, SynthConfig,
};
use mdc_core::trainer::{grid_search, train_model, GridBase, GridSpace, TrainConfig};

fn dataset(seed: u64, n: usize, len: usize) -> (FlowgateSeries, Dataset) {
    let cfg = SynthConfig {
        seed,
        ..SynthConfig::with_vars(n)
    };
    let (series, _) = synth_generate(&cfg, len).unwrap();
    let margins = compute_margins(&series).unwrap();
    let data = Dataset::new(&series.features, &margins, 3, cfg.lead_steps).unwrap();
    (series, data)
}

fn archs(series: &FlowgateSeries, n: usize) -> (NfnArch, JdanArch) {
    let nfn = NfnArch {
        n_features: series.n_features(),
        lag_steps: 3,
        n_blocks: 1,
        width: 6,
    };
    (
        nfn,
        JdanArch::new(n, 2, 1, 4, CouplingMode::Mixture).unwrap(),
    )
}

fn quick() -> TrainConfig {
    TrainConfig {
        max_epochs: 3,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn train(threads: usize) -> (ForecastModel, Dataset) {
    let (series, data) = dataset(2, 2, 300);
    let (nfn, jdan) = archs(&series, 2);
    let (model, _) =
        par::with_threads(threads, || train_model(nfn, jdan, &data, &quick()).unwrap());
    (model, data)
}

#[test]
fn generator_is_seed_deterministic() {
    let (a, _) = dataset(3, 3, 200);
    let (b, _) = dataset(3, 3, 200);
    let (c, _) = dataset(4, 3, 200);
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(
        FlowgateSeries::header(3, a.n_features()).len(),
        1 + 2 * 3 + a.n_features()
    );
}

#[test]
fn series_csv_round_trips() {
    let (a, _) = dataset(8, 2, 50);
    let mut buf = Vec::new();
    a.write_csv(&mut buf).unwrap();
    let b = FlowgateSeries::read_csv(buf.as_slice()).unwrap();
    assert_eq!(a.timestamps, b.timestamps);
    for (x, y) in a.flow.iter().flatten().zip(b.flow.iter().flatten()) {
        assert_eq!(x, y);
    }
}

#[test]
fn manifest_reload_reproduces_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let (series, data) = dataset(6, 2, 120);
    let mut f = std::fs::File::create(dir.path().join("series.csv")).unwrap();
    series.write_csv(&mut f).unwrap();
    let manifest = DatasetManifest {
        series: "series.csv".into(),
        n_vars: 2,
        n_features: series.n_features(),
        interval_minutes: series.interval_minutes,
        lag_steps: 3,
        lead_steps: data.lead,
        seed: 6,
        split: data.split.clone(),
        synth: None,
    };
    let path = dir.path().join("manifest.json");
    manifest.save(&path).unwrap();
    let (_, back) = DatasetManifest::load(&path)
        .unwrap()
        .load_dataset(&path, None)
        .unwrap();
    assert_eq!(back.windows.len(), data.windows.len());
    assert_eq!(back.split.train, data.split.train);
    for (a, b) in back.windows.iter().zip(&data.windows) {
        assert_eq!(a.anchor, b.anchor);
        for (x, y) in a.features.iter().zip(&b.features) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn training_is_deterministic() {
    let (a, _) = train(0);
    let (b, _) = train(0);
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
}

#[test]
fn worker_count_does_not_change_results() {
    let (a, data) = train(1);
    let (b, _) = train(3);
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );

    let test = data.test();
    let tt = targets(test);
    let dists = a.predict(&feature_refs(test)).unwrap();
    let mkde = MkdeModel::fit(targets(data.train())).unwrap();
    let run = |threads| {
        par::with_threads(threads, || {
            let j = reliability("jdan", &JdanForecaster { dists: &dists }, &tt).unwrap();
            let m = reliability(
                "mkde",
                &MkdeForecaster {
                    model: &mkde,
                    len: tt.len(),
                },
                &tt,
            )
            .unwrap();
            let p = a.predict(&feature_refs(test)).unwrap();
            (
                j,
                m,
                p.iter().map(|d| d.params().clone()).collect::<Vec<_>>(),
            )
        })
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn grid_search_is_reproducible() {
    let (series, _) = dataset(2, 2, 300);
    let space = GridSpace {
        nfn_blocks: vec![1],
        jdan_blocks: vec![1, 2],
        nfn_width: vec![4],
        jdan_width: vec![3, 4],
        lag_steps: vec![3],
    };
    let base = GridBase {
        n_vars: 2,
        n_features: series.n_features(),
        n_components: 2,
        coupling: CouplingMode::Mixture,
        train: TrainConfig {
            max_epochs: 2,
            ..quick()
        },
    };
    let go = || {
        let out = grid_search(&space, &base, |_| Ok(dataset(2, 2, 300).1)).unwrap();
        (
            serde_json::to_string(&out.report).unwrap(),
            serde_json::to_string(&out.best_model).unwrap(),
        )
    };
    let (r1, m1) = go();
    let (r2, m2) = go();
    assert_eq!(r1, r2);
    assert_eq!(m1, m2);
    assert_eq!(r1.matches("\"seed\"").count(), 4);
}

#[test]
fn omega_of_a_trained_model_is_a_probability() {
    let (model, data) = train(0);
    let d = &model.predict(&feature_refs(&data.test()[..1])).unwrap()[0];
    let t = SecurityThresholds::new(vec![0.7, 0.65]).unwrap();
    let w = omega(d, &t).unwrap().omega;
    assert!((0.0..=1.0).contains(&w));
}
