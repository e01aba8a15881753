use tbqudit::drift::{realign, track_run};
use tbqudit::formats;
use tbqudit::harness::{
    fill_offsets, ingest_counts, run_experiment, write_artifacts, ExperimentConfig, MeanStd, TrueState,
};
use tbqudit::metrics::MeritReport;
use tbqudit::mzi::Detector;
use tbqudit::sim::{ChannelConfig, DriftModel, Receiver, Simulator};

/// The 100 km preset (same drift rate) shortened to one minute per setting.
fn short_config(scale: f64, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::long_distance_100km(scale, seed);
    cfg.plan.duration_per_setting_s = 60.0;
    cfg
}

#[test]
fn counts_survive_csv_round_trip() {
    let cfg = short_config(0.05, 3);
    let rho = cfg.true_state.build().unwrap();
    let sim = Simulator::new(&rho, &cfg.plan, &cfg.source, &cfg.channel, &cfg.calibrations()).unwrap();
    let records = sim.simulate_counts();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("counts.csv");
    formats::write_records(formats::create(&path).unwrap(), &records).unwrap();
    let problem = ingest_counts(&path, &cfg.calibrations()).unwrap();
    assert_eq!(problem.cells().len(), 16 * 169);
    for (cell, rec) in problem.cells().iter().zip(&records) {
        assert_eq!(cell.key, (rec.setting_index, rec.cell.index()));
        assert_eq!(cell.count, rec.count as f64);
    }
}

#[test]
fn drifting_run_realigns_to_drift_free_expectation() {
    let cfg = short_config(0.05, 9);
    let rho = cfg.true_state.build().unwrap();
    let sim = Simulator::new(&rho, &cfg.plan, &cfg.source, &cfg.channel, &cfg.calibrations()).unwrap();
    let still = ChannelConfig {
        drift_model: DriftModel::None,
        start_offset_signal_s: 0.0,
        start_offset_idler_s: 0.0,
        ..cfg.channel
    };
    let expected = Simulator::new(&rho, &cfg.plan, &cfg.source, &still, &cfg.calibrations())
        .unwrap()
        .expected_counts();

    let t = cfg.source.slot_interval_s;
    let epochs = cfg.plan.epochs();
    let histograms = sim.histograms();
    let offsets: Vec<_> = Receiver::ALL
        .iter()
        .map(|&r| {
            let series = histograms
                .iter()
                .find(|s| s.receiver == r && s.detector == Detector::Two)
                .unwrap();
            let report = track_run(&series.traces, Detector::Two, t, cfg.window_s).unwrap();
            assert!(report.failed.is_empty());
            fill_offsets(&report.estimates, epochs).unwrap()
        })
        .collect();
    let events: Vec<_> = (0..epochs).flat_map(|e| sim.epoch_events(e)).collect();
    let out = realign(&events, &offsets[0], &offsets[1], &cfg.plan.settings, t, cfg.window_s).unwrap();
    assert!(out.discarded as f64 <= 0.01 * out.accepted as f64);

    let mut chi2 = 0.0;
    let mut dof = 0usize;
    let mut outliers = 0usize;
    for rec in &out.records {
        let mu = expected[rec.setting_index][rec.cell.index()];
        if mu >= 5.0 {
            let z = (rec.count as f64 - mu) / mu.sqrt();
            chi2 += z * z;
            dof += 1;
            if z.abs() > 3.0 {
                outliers += 1;
            }
        }
    }
    let k = dof as f64;
    assert!(dof > 1000);
    assert!(
        (chi2 - k).abs() < 5.0 * (2.0 * k).sqrt(),
        "chi2 {chi2} over {dof} cells"
    );
    assert!((outliers as f64) < 0.01 * k, "{outliers} of {dof} cells beyond 3 sigma");
}

#[test]
fn lossless_run_reconstructs_target() {
    let mut cfg = ExperimentConfig::long_distance_100km(1.0, 5);
    cfg.true_state = TrueState::MaximallyEntangled { phi: 0.0 };
    cfg.channel = ChannelConfig {
        loss_signal_db: 0.0,
        loss_idler_db: 0.0,
        ..ChannelConfig::default()
    };
    // 10⁶ frames per setting.
    cfg.plan.duration_per_setting_s = 1e6 / cfg.source.qudit_rate_hz;
    cfg.trials = 1;
    let outcome = run_experiment(&cfg, false).unwrap();
    let s = &outcome.summary;
    assert_eq!(s.trials_succeeded, 1);
    let f = s.metrics["fidelity"].mean;
    assert!(f >= 0.99, "fidelity {f}");
}

#[test]
fn summary_matches_trial_artifacts() {
    let mut cfg = short_config(0.05, 17);
    cfg.trials = 2;
    let outcome = run_experiment(&cfg, false).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_artifacts(&outcome, dir.path()).unwrap();
    let merits: Vec<MeritReport> = (0..2)
        .map(|i| formats::read_json(dir.path().join(format!("trial_{i}/merit.json"))).unwrap())
        .collect();
    let fid = MeanStd::of(&merits.iter().map(|m| m.fidelity).collect::<Vec<_>>()).unwrap();
    let hc = MeanStd::of(&merits.iter().map(|m| m.conditional_entropy_idler).collect::<Vec<_>>()).unwrap();
    assert_eq!(outcome.summary.metrics["fidelity"], fid);
    assert_eq!(outcome.summary.metrics["conditional_entropy_idler"], hc);

    let problem = ingest_counts(dir.path().join("trial_1/counts.csv"), &cfg.calibrations()).unwrap();
    assert_eq!(problem.total_counts(), outcome.summary.trials[1].total_counts as f64);
    let summary: tbqudit::harness::Summary = formats::read_json(dir.path().join("summary.json")).unwrap();
    assert_eq!(summary.config, cfg);
    assert_eq!(summary.metrics, outcome.summary.metrics);
}
