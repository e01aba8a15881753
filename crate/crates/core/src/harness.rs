//! End-to-end experiment runner: simulate, track, realign, reconstruct, score.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drift::{track_run, EpochOffsets, OffsetEstimate, Realigner};
use crate::error::{Error, Result};
use crate::formats;
use crate::metrics::MeritReport;
use crate::mzi::{CalibrationSet, Detector};
use crate::qudit::{maximally_entangled, CMatrix, DensityOperator};
use crate::sim::{Calibrations, ChannelConfig, DriftModel, Receiver, RunPlan, Simulator, SourceConfig};
use crate::tomography::{mle_reconstruct, MleOptions, RateModel, TomographyProblem};

/// Target fidelity of the Werner preset.
pub const REFERENCE_FIDELITY: f64 = 0.935;

/// Werner weight p with ⟨φ|ρ|φ⟩ = `fidelity` in dimension 4 × 4.
pub fn werner_weight_for_fidelity(fidelity: f64) -> f64 {
    (fidelity - 1.0 / 16.0) / (15.0 / 16.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrueState {
    MaximallyEntangled {
        phi: f64,
    },
    Werner {
        p: f64,
        phi: f64,
    },
    /// Density operator JSON.
    File {
        path: PathBuf,
    },
}

impl TrueState {
    pub fn build(&self) -> Result<DensityOperator> {
        match self {
            TrueState::MaximallyEntangled { phi } => Ok(DensityOperator::from_ket(&maximally_entangled(4, *phi)?)),
            TrueState::Werner { p, phi } => DensityOperator::werner(4, *p, *phi),
            TrueState::File { path } => formats::read_json(path),
        }
    }
}

fn default_trials() -> usize {
    4
}

fn default_window() -> f64 {
    0.33e-9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub source: SourceConfig,
    #[serde(default)]
    pub channel: ChannelConfig,
    #[serde(default)]
    pub plan: RunPlan,
    #[serde(default = "CalibrationSet::alice")]
    pub calib_a: CalibrationSet,
    #[serde(default = "CalibrationSet::bob")]
    pub calib_b: CalibrationSet,
    pub true_state: TrueState,
    #[serde(default = "default_trials")]
    pub trials: usize,
    /// Coincidence window used when realigning.
    #[serde(default = "default_window")]
    pub window_s: f64,
    #[serde(default)]
    pub mle: MleOptions,
}

impl ExperimentConfig {
    /// 100 km distribution with drifting fibres. `scale` multiplies the
    /// coincidence volume.
    pub fn long_distance_100km(scale: f64, seed: u64) -> Self {
        let plan = RunPlan {
            seed,
            count_scale: scale,
            ..RunPlan::default()
        };
        let channel = ChannelConfig {
            drift_model: DriftModel::Linear {
                rate: 4e-9 / plan.total_duration_s(),
            },
            start_offset_signal_s: 0.37e-9,
            start_offset_idler_s: 2.61e-9,
            background_singles_hz: 200.0,
            ..ChannelConfig::default()
        };
        ExperimentConfig {
            source: SourceConfig::default(),
            channel,
            plan,
            calib_a: CalibrationSet::alice(),
            calib_b: CalibrationSet::bob(),
            true_state: TrueState::Werner {
                p: werner_weight_for_fidelity(REFERENCE_FIDELITY),
                phi: 0.0,
            },
            trials: 4,
            window_s: default_window(),
            mle: MleOptions::default(),
        }
    }

    pub fn preset(name: &str, scale: f64, seed: u64) -> Result<Self> {
        match name {
            "paper-100km" => Ok(Self::long_distance_100km(scale, seed)),
            _ => Err(Error::InvalidConfig(format!("unknown preset {name:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidConfig("trials must be >= 1".into()));
        }
        if let TrueState::File { path } = &self.true_state {
            if !path.is_file() {
                return Err(Error::InvalidConfig(format!(
                    "state file {} does not exist",
                    path.display()
                )));
            }
        }
        self.source.validate()?;
        self.channel.validate()?;
        self.plan.validate()?;
        self.calib_a.validate()?;
        self.calib_b.validate()?;
        if !(self.window_s > 0.0 && self.window_s <= self.source.slot_interval_s) {
            return Err(Error::InvalidConfig(format!(
                "window {} s must lie in (0, T]",
                self.window_s
            )));
        }
        Ok(())
    }

    pub fn calibrations(&self) -> Calibrations {
        Calibrations {
            alice: self.calib_a,
            bob: self.calib_b,
        }
    }

    /// Seed of trial `i`.
    pub fn trial_seed(&self, i: usize) -> u64 {
        self.plan.seed.wrapping_add(i as u64)
    }
}

/// Counts CSV to a tomography problem; absent cells count zero.
pub fn ingest_counts(path: impl AsRef<Path>, calibs: &Calibrations) -> Result<TomographyProblem> {
    let records = formats::read_records(formats::open(path)?)?;
    TomographyProblem::from_records(&records, calibs, RateModel::Profiled)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub trial: usize,
    pub stage: String,
    pub seconds: f64,
    #[serde(flatten)]
    pub detail: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    pub merit: MeritReport,
    pub total_counts: u64,
    pub accepted: u64,
    pub discarded: u64,
    pub tracking_failures: usize,
    /// Largest |τ̂ − τ| over epochs and receivers, in seconds.
    pub max_offset_error_s: f64,
    pub iterations: usize,
    pub converged: bool,
    pub rate_scale: f64,
    #[serde(skip)]
    pub rho: Option<DensityOperator>,
    #[serde(skip)]
    pub offsets: Vec<(Receiver, Vec<OffsetEstimate>)>,
    #[serde(skip)]
    pub records: Vec<crate::sim::CoincidenceRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; zero for a single trial.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(MeanStd { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config: ExperimentConfig,
    pub trials_requested: usize,
    pub trials_succeeded: usize,
    pub failures: Vec<(usize, String)>,
    pub metrics: BTreeMap<String, MeanStd>,
    /// Scores of the state every trial was generated from.
    pub true_state: MeritReport,
    /// Scores of the trial-averaged reconstruction.
    pub averaged_state: Option<MeritReport>,
    pub trials: Vec<TrialResult>,
}

/// Reads one per-trial quantity.
type Metric = fn(&TrialResult) -> f64;

impl Summary {
    pub fn from_trials(
        config: &ExperimentConfig,
        results: &[std::result::Result<TrialResult, String>],
    ) -> Result<Self> {
        let ok: Vec<&TrialResult> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
        let failures = results
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.as_ref().err().map(|e| (i, e.clone())))
            .collect();
        let mut metrics = BTreeMap::new();
        let fields: [(&str, Metric); 9] = [
            ("fidelity", |t| t.merit.fidelity),
            ("trace_distance", |t| t.merit.trace_distance),
            ("linear_entropy", |t| t.merit.linear_entropy),
            ("von_neumann_entropy", |t| t.merit.von_neumann_entropy),
            ("conditional_entropy_signal", |t| t.merit.conditional_entropy_signal),
            ("conditional_entropy_idler", |t| t.merit.conditional_entropy_idler),
            ("coherent_information", |t| t.merit.coherent_information),
            ("total_counts", |t| t.total_counts as f64),
            ("max_offset_error_s", |t| t.max_offset_error_s),
        ];
        for (name, get) in fields {
            let values: Vec<f64> = ok.iter().map(|t| get(t)).collect();
            if let Some(ms) = MeanStd::of(&values) {
                metrics.insert(name.to_string(), ms);
            }
        }
        let rhos: Vec<&DensityOperator> = ok.iter().filter_map(|t| t.rho.as_ref()).collect();
        let averaged_state = if rhos.is_empty() {
            None
        } else {
            Some(MeritReport::compute(&average_state(&rhos)?, None)?)
        };
        Ok(Summary {
            config: config.clone(),
            trials_requested: config.trials,
            trials_succeeded: ok.len(),
            failures,
            metrics,
            true_state: MeritReport::compute(&config.true_state.build()?, None)?,
            averaged_state,
            trials: ok.into_iter().cloned().collect(),
        })
    }
}

pub fn average_state(rhos: &[&DensityOperator]) -> Result<DensityOperator> {
    let d = rhos
        .first()
        .ok_or_else(|| Error::InsufficientData("no states to average".into()))?
        .dim();
    let sum = rhos.iter().fold(CMatrix::zeros(d, d), |acc, r| acc + r.matrix());
    DensityOperator::new(sum / Complex64::from(rhos.len() as f64))
}

fn circular_error(a: f64, b: f64, frame: f64) -> f64 {
    let d = (a - b).rem_euclid(frame);
    d.min(frame - d)
}

/// Fills epochs without an estimate from the nearest epoch that has one.
pub fn fill_offsets(estimates: &[OffsetEstimate], epochs: u32) -> Result<EpochOffsets> {
    if estimates.is_empty() {
        return Err(Error::InsufficientData("no epoch could be tracked".into()));
    }
    let mut out = EpochOffsets::default();
    for e in 0..epochs {
        let nearest = estimates
            .iter()
            .min_by_key(|x| (x.epoch_min as i64 - e as i64).abs())
            .expect("non-empty");
        out.insert(e, nearest.tau_s);
    }
    Ok(out)
}

/// Epochs simulated together before their events are tabulated.
const EVENT_BATCH: u32 = 16;

struct Trial<'a> {
    config: &'a ExperimentConfig,
    index: usize,
    rho: &'a DensityOperator,
    log: Vec<StageLog>,
}

impl<'a> Trial<'a> {
    fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> Result<(T, BTreeMap<String, f64>)>) -> Result<T> {
        let start = Instant::now();
        let (value, detail) = f()?;
        let seconds = start.elapsed().as_secs_f64();
        log::info!("trial {} {name}: {seconds:.3} s {detail:?}", self.index);
        self.log.push(StageLog {
            trial: self.index,
            stage: name.to_string(),
            seconds,
            detail,
        });
        Ok(value)
    }

    fn run(&mut self) -> Result<TrialResult> {
        let cfg = self.config;
        let seed = cfg.trial_seed(self.index);
        let plan = RunPlan {
            seed,
            ..cfg.plan.clone()
        };
        let calibs = cfg.calibrations();
        let sim = Simulator::new(self.rho, &plan, &cfg.source, &cfg.channel, &calibs)?;
        let t_slot = cfg.source.slot_interval_s;
        let frame = cfg.source.frame_s();
        let epochs = plan.epochs();

        let histograms = self.stage("histograms", || {
            let h = sim.histograms();
            let total: u64 = h.iter().flat_map(|s| &s.traces).map(|t| t.total()).sum();
            Ok((h, BTreeMap::from([("singles".to_string(), total as f64)])))
        })?;

        let mut offsets = Vec::new();
        let mut failures = 0;
        let mut max_err: f64 = 0.0;
        for receiver in Receiver::ALL {
            let series = histograms
                .iter()
                .find(|s| s.receiver == receiver && s.detector == Detector::Two)
                .expect("simulator emits every detector");
            let report = self.stage(&format!("track_{}", receiver.tag()), || {
                let r = track_run(&series.traces, Detector::Two, t_slot, cfg.window_s)?;
                let n = r.estimates.len() as f64;
                Ok((r, BTreeMap::from([("estimates".to_string(), n)])))
            })?;
            failures += report.failed.len();
            for e in &report.estimates {
                max_err = max_err.max(circular_error(e.tau_s, sim.true_offset(receiver, e.epoch_min), frame));
            }
            offsets.push((receiver, report.estimates));
        }
        let offs_a = fill_offsets(&offsets[0].1, epochs)?;
        let offs_b = fill_offsets(&offsets[1].1, epochs)?;

        let realigned = self.stage("realign", || {
            let mut realigner = Realigner::new(&plan.settings, t_slot, cfg.window_s)?;
            let mut start = 0;
            while start < epochs {
                let end = (start + EVENT_BATCH).min(epochs);
                let batch: Vec<_> = (start..end).into_par_iter().map(|e| sim.epoch_events(e)).collect();
                for events in &batch {
                    realigner.push(events, &offs_a, &offs_b)?;
                }
                start = end;
            }
            let out = realigner.finish();
            let detail = BTreeMap::from([
                ("accepted".to_string(), out.accepted as f64),
                ("discarded".to_string(), out.discarded as f64),
            ]);
            Ok((out, detail))
        })?;

        let total_counts: u64 = realigned.records.iter().map(|r| r.count).sum();
        let mle = self.stage("reconstruct", || {
            let problem = TomographyProblem::from_records(&realigned.records, &calibs, RateModel::Profiled)?;
            let res = mle_reconstruct(&problem, &cfg.mle)?;
            let detail = BTreeMap::from([
                ("iterations".to_string(), res.iterations as f64),
                ("log_likelihood".to_string(), res.log_likelihood),
            ]);
            Ok((res, detail))
        })?;
        if !mle.converged {
            log::warn!("trial {}: reconstruction did not converge", self.index);
        }

        let merit = self.stage("metrics", || {
            Ok((MeritReport::compute(&mle.rho, None)?, BTreeMap::new()))
        })?;

        Ok(TrialResult {
            trial: self.index,
            seed,
            merit,
            total_counts,
            accepted: realigned.accepted,
            discarded: realigned.discarded,
            tracking_failures: failures,
            max_offset_error_s: max_err,
            iterations: mle.iterations,
            converged: mle.converged,
            rate_scale: mle.rate_scale,
            rho: Some(mle.rho),
            offsets,
            records: realigned.records,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub summary: Summary,
    pub log: Vec<StageLog>,
}

/// Runs every trial. A failing trial is recorded in the summary and does not
/// stop the others.
pub fn run_experiment(config: &ExperimentConfig, parallel_trials: bool) -> Result<ExperimentOutcome> {
    config.validate()?;
    let rho = config.true_state.build()?;
    let run_one = |i: usize| -> (std::result::Result<TrialResult, String>, Vec<StageLog>) {
        let mut trial = Trial {
            config,
            index: i,
            rho: &rho,
            log: Vec::new(),
        };
        let res = trial.run().map_err(|e| {
            log::error!("trial {i} failed: {e}");
            e.to_string()
        });
        (res, trial.log)
    };
    let runs: Vec<_> = if parallel_trials {
        (0..config.trials).into_par_iter().map(run_one).collect()
    } else {
        (0..config.trials).map(run_one).collect()
    };
    let mut results = Vec::with_capacity(runs.len());
    let mut log = Vec::new();
    for (r, l) in runs {
        results.push(r);
        log.extend(l);
    }
    Ok(ExperimentOutcome {
        summary: Summary::from_trials(config, &results)?,
        log,
    })
}

/// Canonical summary text. Contains no timings, so reruns with the same
/// configuration are byte-identical.
pub fn summary_json(summary: &Summary) -> Result<String> {
    let mut text = serde_json::to_string_pretty(summary)?;
    text.push('\n');
    Ok(text)
}

/// Writes per-trial artifacts, `summary.json` and `run_log.jsonl` under `dir`.
pub fn write_artifacts(outcome: &ExperimentOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for t in &outcome.summary.trials {
        let tdir = dir.join(format!("trial_{}", t.trial));
        fs::create_dir_all(&tdir)?;
        formats::write_records(formats::create(tdir.join("counts.csv"))?, &t.records)?;
        if let Some(rho) = &t.rho {
            formats::write_json(tdir.join("rho.json"), rho)?;
        }
        formats::write_json(tdir.join("merit.json"), &t.merit)?;
        for (r, est) in &t.offsets {
            formats::write_offsets(formats::create(tdir.join(format!("offsets_{}.csv", r.tag())))?, est)?;
        }
    }
    let rhos: Vec<&DensityOperator> = outcome.summary.trials.iter().filter_map(|t| t.rho.as_ref()).collect();
    if !rhos.is_empty() {
        formats::write_json(dir.join("rho_mean.json"), &average_state(&rhos)?)?;
    }
    fs::write(dir.join("summary.json"), summary_json(&outcome.summary)?)?;
    let mut log = formats::create(dir.join("run_log.jsonl"))?;
    for entry in &outcome.log {
        serde_json::to_writer(&mut log, entry)?;
        log.write_all(b"\n")?;
    }
    log.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::long_distance_100km(0.05, 7);
        cfg.plan.duration_per_setting_s = 60.0;
        cfg.trials = 2;
        cfg
    }

    #[test]
    fn werner_weight() {
        let p = werner_weight_for_fidelity(0.935);
        assert!((p - 0.930_666_666_666_7).abs() < 1e-12);
        let w = DensityOperator::werner(4, p, 0.0).unwrap();
        assert!((crate::metrics::target_fidelity(&w, 0.0).unwrap() - 0.935).abs() < 1e-12);
    }

    #[test]
    fn config_round_trip_and_defaults() {
        let cfg = ExperimentConfig::long_distance_100km(0.01, 42);
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let minimal: ExperimentConfig =
            serde_json::from_str(r#"{"true_state": {"kind": "maximally_entangled", "phi": 0.0}}"#).unwrap();
        assert_eq!(minimal.trials, 4);
        assert_eq!(minimal.window_s, 0.33e-9);
        assert_eq!(minimal.calib_b, CalibrationSet::bob());
        minimal.validate().unwrap();
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = small_config();
        cfg.trials = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = small_config();
        cfg.true_state = TrueState::File {
            path: "/nonexistent/rho.json".into(),
        };
        assert!(cfg.validate().is_err());
        assert!(ExperimentConfig::preset("nope", 1.0, 0).is_err());
    }

    #[test]
    fn mean_std() {
        let ms = MeanStd::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(ms.mean, 2.5);
        assert!((ms.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(MeanStd::of(&[3.0]).unwrap().std, 0.0);
        assert!(MeanStd::of(&[]).is_none());
    }

    #[test]
    fn fill_uses_nearest_epoch() {
        let est = [
            OffsetEstimate {
                tau_s: 1.0,
                epoch_min: 1,
                score: 1.0,
            },
            OffsetEstimate {
                tau_s: 2.0,
                epoch_min: 4,
                score: 1.0,
            },
        ];
        let offs = fill_offsets(&est, 6).unwrap();
        let got: Vec<f64> = (0..6).map(|e| offs.get(e).unwrap()).collect();
        assert_eq!(got, vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        assert!(fill_offsets(&[], 3).is_err());
    }

    #[test]
    fn small_run_is_deterministic_and_consistent() {
        let cfg = small_config();
        let a = run_experiment(&cfg, false).unwrap();
        let b = run_experiment(&cfg, true).unwrap();
        let ja = serde_json::to_string(&a.summary).unwrap();
        let jb = serde_json::to_string(&b.summary).unwrap();
        assert_eq!(ja, jb);
        assert_eq!(a.summary.trials_succeeded, 2);
        let fids: Vec<f64> = a.summary.trials.iter().map(|t| t.merit.fidelity).collect();
        let ms = MeanStd::of(&fids).unwrap();
        assert_eq!(a.summary.metrics["fidelity"], ms);
        for t in &a.summary.trials {
            assert!(t.max_offset_error_s < 0.165e-9);
            assert_eq!(t.total_counts, t.accepted);
        }
    }
}
