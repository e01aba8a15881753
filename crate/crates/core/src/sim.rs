//! Monte-Carlo stand-in for the distribution experiment: Poissonian pair
//! generation, fibre loss, interferometric detection and detection-time
//! drift.
//!
//! Three products are available from a [`Simulator`]:
//! * per-cell coincidence tables ([`Simulator::simulate_counts`]),
//! * per-minute singles histograms for every detector ([`Simulator::histograms`]),
//! * time-tagged coincidence events per epoch ([`Simulator::epoch_events`]),
//!   which carry the drift and must be realigned before tabulation.
//!
//! Every product draws from its own ChaCha stream derived from the run seed,
//! so results do not depend on evaluation order or thread count.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::mzi::{
    enumerate_outcomes, joint_factor, CalibrationSet, Detector, MeasurementOperator, Outcome, PhaseSetting,
    OUTCOMES_PER_SETTING, QUDIT_DIM,
};
use crate::qudit::{partial_trace, DensityOperator, Subsystem};

/// Slots per analysis frame.
pub const FRAME_SLOTS: usize = 8;
pub const CELLS_PER_SETTING: usize = OUTCOMES_PER_SETTING * OUTCOMES_PER_SETTING;

const STREAM_COUNTS: u64 = 1;
const STREAM_HISTOGRAMS: u64 = 2;
const STREAM_EVENTS: u64 = 3;
const STREAM_DRIFT: u64 = 4;

pub(crate) fn stream_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((domain << 40) | index);
    rng
}

fn poisson<R: Rng>(rng: &mut R, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("finite positive mean").sample(rng) as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SourceConfig {
    pub mean_pairs_per_qudit: f64,
    /// Frames (qudits) per second.
    pub qudit_rate_hz: f64,
    pub slot_interval_s: f64,
    pub pulse_fwhm_s: f64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig {
            mean_pairs_per_qudit: 0.03,
            qudit_rate_hz: 125e6 / 4.0,
            slot_interval_s: 1e-9,
            pulse_fwhm_s: 100e-12,
        }
    }
}

impl SourceConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("qudit_rate_hz", self.qudit_rate_hz),
            ("slot_interval_s", self.slot_interval_s),
            ("pulse_fwhm_s", self.pulse_fwhm_s),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        // Zero brightness is allowed and yields empty tables.
        if !(0.0..0.5).contains(&self.mean_pairs_per_qudit) {
            return Err(Error::InvalidConfig(format!(
                "mean_pairs_per_qudit must lie in [0, 0.5), got {}",
                self.mean_pairs_per_qudit
            )));
        }
        Ok(())
    }

    pub fn frame_s(&self) -> f64 {
        FRAME_SLOTS as f64 * self.slot_interval_s
    }

    fn pulse_sigma_s(&self) -> f64 {
        self.pulse_fwhm_s / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt())
    }
}

/// Detection-time drift of one receiver relative to the frame clock.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DriftModel {
    #[default]
    None,
    /// Offset grows by `rate` seconds per second of run time.
    Linear { rate: f64 },
    /// Gaussian step of `step_sigma_s` every minute, linearly interpolated.
    RandomWalk { step_sigma_s: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelConfig {
    pub loss_signal_db: f64,
    pub loss_idler_db: f64,
    pub drift_model: DriftModel,
    /// Position of the first time slot at run start, per receiver.
    pub start_offset_signal_s: f64,
    pub start_offset_idler_s: f64,
    /// Accidental coincidences per second in every cell.
    pub background_coincidence_hz: f64,
    /// Dark counts per second at every detector, uniform over the frame.
    pub background_singles_hz: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            loss_signal_db: 11.8,
            loss_idler_db: 11.2,
            drift_model: DriftModel::None,
            start_offset_signal_s: 0.0,
            start_offset_idler_s: 0.0,
            background_coincidence_hz: 0.0,
            background_singles_hz: 0.0,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        let non_negative = [
            ("loss_signal_db", self.loss_signal_db),
            ("loss_idler_db", self.loss_idler_db),
            ("background_coincidence_hz", self.background_coincidence_hz),
            ("background_singles_hz", self.background_singles_hz),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be >= 0, got {v}")));
            }
        }
        match self.drift_model {
            DriftModel::Linear { rate } if !rate.is_finite() => {
                Err(Error::InvalidConfig("drift rate must be finite".into()))
            }
            DriftModel::RandomWalk { step_sigma_s } if !(step_sigma_s >= 0.0) => {
                Err(Error::InvalidConfig("random-walk step must be >= 0".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn transmittance(&self, side: Subsystem) -> f64 {
        let db = match side {
            Subsystem::Signal => self.loss_signal_db,
            Subsystem::Idler => self.loss_idler_db,
        };
        10f64.powf(-db / 10.0)
    }

    fn start_offset(&self, side: Subsystem) -> f64 {
        match side {
            Subsystem::Signal => self.start_offset_signal_s,
            Subsystem::Idler => self.start_offset_idler_s,
        }
    }
}

/// Receiver of one photon: Alice measures the signal, Bob the idler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Receiver {
    Alice,
    Bob,
}

impl Receiver {
    pub const ALL: [Receiver; 2] = [Receiver::Alice, Receiver::Bob];

    pub fn subsystem(self) -> Subsystem {
        match self {
            Receiver::Alice => Subsystem::Signal,
            Receiver::Bob => Subsystem::Idler,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Receiver::Alice => "a",
            Receiver::Bob => "b",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SettingPair {
    pub alice: PhaseSetting,
    pub bob: PhaseSetting,
}

impl SettingPair {
    pub fn get(&self, r: Receiver) -> PhaseSetting {
        match r {
            Receiver::Alice => self.alice,
            Receiver::Bob => self.bob,
        }
    }
}

/// The 16 tomography settings, every phase in {0, π/2}. Index bits are
/// (θ1_a, θ2_a, θ1_b, θ2_b) from most to least significant.
pub fn standard_settings() -> Vec<SettingPair> {
    (0u8..16)
        .map(|s| SettingPair {
            alice: PhaseSetting::from_quarter_turns((s >> 3) & 1, (s >> 2) & 1),
            bob: PhaseSetting::from_quarter_turns((s >> 1) & 1, s & 1),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunPlan {
    pub settings: Vec<SettingPair>,
    pub duration_per_setting_s: f64,
    pub histogram_bin_s: f64,
    pub epoch_s: f64,
    pub seed: u64,
    /// Multiplies every expected coincidence count. Singles histograms keep
    /// the physical rate.
    pub count_scale: f64,
}

impl Default for RunPlan {
    fn default() -> Self {
        RunPlan {
            settings: standard_settings(),
            duration_per_setting_s: 900.0,
            histogram_bin_s: 1e-11,
            epoch_s: 60.0,
            seed: 0,
            count_scale: 1.0,
        }
    }
}

impl RunPlan {
    pub fn validate(&self) -> Result<()> {
        if self.settings.is_empty() {
            return Err(Error::InvalidConfig("run plan has no settings".into()));
        }
        let positive = [
            ("duration_per_setting_s", self.duration_per_setting_s),
            ("histogram_bin_s", self.histogram_bin_s),
            ("epoch_s", self.epoch_s),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.count_scale.is_finite() && self.count_scale >= 0.0) {
            return Err(Error::InvalidConfig("count_scale must be >= 0".into()));
        }
        Ok(())
    }

    pub fn total_duration_s(&self) -> f64 {
        self.settings.len() as f64 * self.duration_per_setting_s
    }

    pub fn epochs(&self) -> u32 {
        (self.total_duration_s() / self.epoch_s - 1e-9).ceil().max(1.0) as u32
    }

    fn setting_interval(&self, s: usize) -> (f64, f64) {
        let start = s as f64 * self.duration_per_setting_s;
        (start, start + self.duration_per_setting_s)
    }

    fn epoch_interval(&self, e: u32) -> (f64, f64) {
        let start = e as f64 * self.epoch_s;
        (start, (start + self.epoch_s).min(self.total_duration_s()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibrations {
    pub alice: CalibrationSet,
    pub bob: CalibrationSet,
}

impl Calibrations {
    pub fn measured() -> Self {
        Calibrations {
            alice: CalibrationSet::alice(),
            bob: CalibrationSet::bob(),
        }
    }

    pub fn balanced() -> Self {
        Calibrations {
            alice: CalibrationSet::balanced(),
            bob: CalibrationSet::balanced(),
        }
    }

    pub fn get(&self, r: Receiver) -> &CalibrationSet {
        match r {
            Receiver::Alice => &self.alice,
            Receiver::Bob => &self.bob,
        }
    }
}

/// A coincidence between Alice's outcome `a` and Bob's outcome `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub a: Outcome,
    pub b: Outcome,
}

impl Cell {
    /// All 169 cells, Alice-major in [`Outcome::all`] order.
    pub fn all() -> impl Iterator<Item = Cell> {
        Outcome::all().flat_map(|a| Outcome::all().map(move |b| Cell { a, b }))
    }

    pub fn index(&self) -> usize {
        self.a.index() * OUTCOMES_PER_SETTING + self.b.index()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoincidenceRecord {
    pub setting_index: usize,
    pub setting: SettingPair,
    pub cell: Cell,
    pub count: u64,
}

/// Singles counts over one 8T frame, accumulated during one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramTrace {
    pub bin_width_s: f64,
    pub counts: Vec<u64>,
    pub epoch_min: u32,
}

impl HistogramTrace {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn span_s(&self) -> f64 {
        self.counts.len() as f64 * self.bin_width_s
    }

    /// Circularly shift the content later in time by `bins`.
    pub fn rotated(&self, bins: isize) -> HistogramTrace {
        let n = self.counts.len() as isize;
        let mut counts = vec![0; self.counts.len()];
        for (i, &c) in self.counts.iter().enumerate() {
            counts[(i as isize + bins).rem_euclid(n) as usize] = c;
        }
        HistogramTrace {
            bin_width_s: self.bin_width_s,
            counts,
            epoch_min: self.epoch_min,
        }
    }
}

/// Histograms of one detector, one per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramSeries {
    pub receiver: Receiver,
    pub detector: Detector,
    pub traces: Vec<HistogramTrace>,
}

/// A time-tagged coincidence. Times are positions within the 8T frame in
/// picoseconds, as reported by the time tagger (drift included).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoincidenceEvent {
    pub epoch: u32,
    pub setting_index: u16,
    pub time_a_ps: u32,
    pub x_a: Detector,
    pub time_b_ps: u32,
    pub x_b: Detector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationOutput {
    pub records: Vec<CoincidenceRecord>,
    pub histograms: Vec<HistogramSeries>,
}

/// Weights of the ideal detection comb at offsets 0, T, 2T, … for a detector
/// when every input slot is equally populated.
pub fn comb_weights(detector: Detector) -> Vec<u32> {
    let mut w = vec![0u32; detector.slots() as usize];
    match detector {
        // Σ_{l=0}^{3} Σ_{k=0}^{3} δ(t − kT − lT)
        Detector::One => {
            for l in 0..4 {
                for k in 0..4 {
                    w[k + l] += 1;
                }
            }
        }
        // Σ_{l=0}^{1} Σ_{k=0}^{3} δ(t − kT − 2lT)
        Detector::Two => {
            for l in 0..2 {
                for k in 0..4 {
                    w[k + 2 * l] += 1;
                }
            }
        }
    }
    w
}

/// One-bin delta comb with the integer weights of [`comb_weights`].
pub fn ideal_histogram(detector: Detector, slot_interval_s: f64, bin_width_s: f64) -> Result<HistogramTrace> {
    if !(slot_interval_s > 0.0 && bin_width_s > 0.0) {
        return Err(Error::InvalidConfig(
            "slot interval and bin width must be positive".into(),
        ));
    }
    let n = (FRAME_SLOTS as f64 * slot_interval_s / bin_width_s).round() as usize;
    if n == 0 {
        return Err(Error::InvalidConfig("bin wider than the frame".into()));
    }
    let mut counts = vec![0u64; n];
    for (m, w) in comb_weights(detector).into_iter().enumerate() {
        let bin = (m as f64 * slot_interval_s / bin_width_s).round() as usize % n;
        counts[bin] += w as u64;
    }
    Ok(HistogramTrace {
        bin_width_s,
        counts,
        epoch_min: 0,
    })
}

/// Number of histogram bins covering one frame.
pub fn frame_bins(source: &SourceConfig, bin_width_s: f64) -> usize {
    (source.frame_s() / bin_width_s).round() as usize
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

/// Expected singles histogram for per-slot weights `slot_weights` (slot m at
/// `offset_s + m T`, modulo the frame), each pulse a Gaussian of the source
/// FWHM truncated at ±T/2. Bin contents sum to Σ weights.
pub fn expected_histogram(slot_weights: &[f64], offset_s: f64, source: &SourceConfig, bin_width_s: f64) -> Vec<f64> {
    let n = frame_bins(source, bin_width_s);
    let frame = n as f64 * bin_width_s;
    let t_slot = source.slot_interval_s;
    let sigma = source.pulse_sigma_s();
    let half = t_slot / 2.0;
    let z_norm = normal_cdf(half / sigma) - normal_cdf(-half / sigma);
    let reach = (half / bin_width_s).ceil() as isize + 1;
    let mut out = vec![0.0; n];
    for (m, &w) in slot_weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let center = (offset_s + m as f64 * t_slot).rem_euclid(frame);
        let c_bin = (center / bin_width_s).floor() as isize;
        for j in c_bin - reach..=c_bin + reach {
            // Bin j spans [j·bw, (j+1)·bw) relative to the unwrapped center.
            let lo = (j as f64 * bin_width_s - center).max(-half);
            let hi = ((j + 1) as f64 * bin_width_s - center).min(half);
            if hi <= lo {
                continue;
            }
            let p = (normal_cdf(hi / sigma) - normal_cdf(lo / sigma)) / z_norm;
            out[j.rem_euclid(n as isize) as usize] += w * p;
        }
    }
    out
}

/// Joint outcome probabilities Tr(ρ (E_a ⊗ E_b)) for one setting pair,
/// indexed by [`Cell::index`].
pub fn outcome_distribution(
    rho: &DensityOperator,
    setting_a: PhaseSetting,
    setting_b: PhaseSetting,
    calib_a: &CalibrationSet,
    calib_b: &CalibrationSet,
) -> Result<Vec<(Cell, f64)>> {
    check_pair_state(rho)?;
    let ops_a = enumerate_outcomes(setting_a, calib_a)?;
    let ops_b = enumerate_outcomes(setting_b, calib_b)?;
    Ok(cell_probabilities(rho, &ops_a, &ops_b)
        .into_iter()
        .zip(Cell::all())
        .map(|(p, c)| (c, p))
        .collect())
}

fn check_pair_state(rho: &DensityOperator) -> Result<()> {
    if rho.dim() != QUDIT_DIM * QUDIT_DIM {
        return Err(Error::ContractViolation(format!(
            "two-qudit state must be {0}x{0}, got dim {1}",
            QUDIT_DIM * QUDIT_DIM,
            rho.dim()
        )));
    }
    if (rho.trace() - 1.0).abs() > 1e-9 {
        return Err(Error::ContractViolation(format!(
            "state trace {} differs from 1",
            rho.trace()
        )));
    }
    Ok(())
}

fn cell_probabilities(rho: &DensityOperator, ops_a: &[MeasurementOperator], ops_b: &[MeasurementOperator]) -> Vec<f64> {
    let m = rho.matrix();
    let mut out = Vec::with_capacity(CELLS_PER_SETTING);
    for ea in ops_a {
        for eb in ops_b {
            let w = joint_factor(ea, eb);
            // w† ρ w
            let p = w.dotc(&(m * &w)).re;
            out.push(p.max(0.0));
        }
    }
    out
}

/// Deterministic per-receiver drift trajectories.
#[derive(Debug, Clone)]
struct DriftPath {
    start: f64,
    model: DriftModel,
    /// Random-walk knots at whole minutes.
    knots: Vec<f64>,
}

impl DriftPath {
    fn new(channel: &ChannelConfig, side: Subsystem, total_s: f64, seed: u64) -> Self {
        let start = channel.start_offset(side);
        let knots = match channel.drift_model {
            DriftModel::RandomWalk { step_sigma_s } => {
                let idx = match side {
                    Subsystem::Signal => 0,
                    Subsystem::Idler => 1,
                };
                let mut rng = stream_rng(seed, STREAM_DRIFT, idx);
                let minutes = (total_s / 60.0).ceil() as usize + 1;
                let mut acc = 0.0;
                let mut knots = Vec::with_capacity(minutes + 1);
                knots.push(0.0);
                for _ in 0..minutes {
                    let z: f64 = rng.sample(StandardNormal);
                    acc += step_sigma_s * z;
                    knots.push(acc);
                }
                knots
            }
            _ => Vec::new(),
        };
        DriftPath {
            start,
            model: channel.drift_model,
            knots,
        }
    }

    fn offset(&self, t_s: f64) -> f64 {
        self.start
            + match self.model {
                DriftModel::None => 0.0,
                DriftModel::Linear { rate } => rate * t_s,
                DriftModel::RandomWalk { .. } => {
                    let x = (t_s / 60.0).max(0.0);
                    let i = (x.floor() as usize).min(self.knots.len() - 2);
                    let f = x - i as f64;
                    self.knots[i] * (1.0 - f) + self.knots[i + 1] * f
                }
            }
    }
}

/// Pre-computed forward model of one run.
#[derive(Debug, Clone)]
pub struct Simulator {
    plan: RunPlan,
    source: SourceConfig,
    channel: ChannelConfig,
    /// Cell probabilities per setting.
    probabilities: Vec<Vec<f64>>,
    /// Singles probability per detected pair, per setting, receiver and outcome.
    singles: Vec<[Vec<f64>; 2]>,
    drift: [DriftPath; 2],
}

impl Simulator {
    pub fn new(
        rho: &DensityOperator,
        plan: &RunPlan,
        source: &SourceConfig,
        channel: &ChannelConfig,
        calibs: &Calibrations,
    ) -> Result<Self> {
        check_pair_state(rho)?;
        plan.validate()?;
        source.validate()?;
        channel.validate()?;
        calibs.alice.validate()?;
        calibs.bob.validate()?;

        let marginals = [
            partial_trace(rho, Subsystem::Signal, (QUDIT_DIM, QUDIT_DIM))?,
            partial_trace(rho, Subsystem::Idler, (QUDIT_DIM, QUDIT_DIM))?,
        ];
        let mut probabilities = Vec::with_capacity(plan.settings.len());
        let mut singles = Vec::with_capacity(plan.settings.len());
        for pair in &plan.settings {
            let ops_a = enumerate_outcomes(pair.alice, &calibs.alice)?;
            let ops_b = enumerate_outcomes(pair.bob, &calibs.bob)?;
            probabilities.push(cell_probabilities(rho, &ops_a, &ops_b));
            let single = |ops: &[MeasurementOperator], red: &DensityOperator| -> Vec<f64> {
                ops.iter()
                    .map(|e| {
                        let w = e.factor();
                        w.dotc(&(red.matrix() * w)).re.max(0.0)
                    })
                    .collect()
            };
            singles.push([single(&ops_a, &marginals[0]), single(&ops_b, &marginals[1])]);
        }
        let total = plan.total_duration_s();
        Ok(Simulator {
            plan: plan.clone(),
            source: *source,
            channel: *channel,
            probabilities,
            singles,
            drift: [
                DriftPath::new(channel, Subsystem::Signal, total, plan.seed),
                DriftPath::new(channel, Subsystem::Idler, total, plan.seed),
            ],
        })
    }

    pub fn plan(&self) -> &RunPlan {
        &self.plan
    }

    /// Expected pairs reaching both receivers per setting: frames × mean pairs
    /// × both transmittances × count scale. This is the N of n = N Tr(ρE).
    pub fn rate_scale(&self) -> f64 {
        let frames = self.plan.duration_per_setting_s * self.source.qudit_rate_hz;
        frames
            * self.source.mean_pairs_per_qudit
            * self.channel.transmittance(Subsystem::Signal)
            * self.channel.transmittance(Subsystem::Idler)
            * self.plan.count_scale
    }

    fn background_per_cell(&self) -> f64 {
        self.channel.background_coincidence_hz * self.plan.duration_per_setting_s * self.plan.count_scale
    }

    /// Expected coincidence counts per setting and cell.
    pub fn expected_counts(&self) -> Vec<Vec<f64>> {
        let n = self.rate_scale();
        let bg = self.background_per_cell();
        self.probabilities
            .iter()
            .map(|ps| ps.iter().map(|p| n * p + bg).collect())
            .collect()
    }

    /// Poisson coincidence tables for every setting and cell.
    pub fn simulate_counts(&self) -> Vec<CoincidenceRecord> {
        let expected = self.expected_counts();
        let seed = self.plan.seed;
        let per_setting: Vec<Vec<CoincidenceRecord>> = expected
            .par_iter()
            .enumerate()
            .map(|(s, means)| {
                let mut rng = stream_rng(seed, STREAM_COUNTS, s as u64);
                let setting = self.plan.settings[s];
                Cell::all()
                    .zip(means)
                    .map(|(cell, &mean)| CoincidenceRecord {
                        setting_index: s,
                        setting,
                        cell,
                        count: poisson(&mut rng, mean),
                    })
                    .collect()
            })
            .collect();
        per_setting.into_iter().flatten().collect()
    }

    pub fn drift_offset(&self, receiver: Receiver, t_s: f64) -> f64 {
        self.drift[receiver as usize].offset(t_s)
    }

    /// Ground-truth first-slot position, modulo the frame, at the middle of
    /// `epoch`.
    pub fn true_offset(&self, receiver: Receiver, epoch: u32) -> f64 {
        let (a, b) = self.plan.epoch_interval(epoch);
        self.drift_offset(receiver, 0.5 * (a + b))
            .rem_euclid(self.source.frame_s())
    }

    fn overlaps(&self, epoch: u32) -> Vec<(usize, f64, f64)> {
        let (e0, e1) = self.plan.epoch_interval(epoch);
        (0..self.plan.settings.len())
            .filter_map(|s| {
                let (s0, s1) = self.plan.setting_interval(s);
                let (lo, hi) = (e0.max(s0), e1.min(s1));
                (hi > lo).then_some((s, lo, hi))
            })
            .collect()
    }

    /// Mean singles histogram of one detector in one epoch.
    pub fn expected_histogram(&self, receiver: Receiver, detector: Detector, epoch: u32) -> Vec<f64> {
        // Sub-steps resolve drift within the epoch.
        const SUBSTEPS: usize = 6;
        let side = receiver.subsystem();
        let pair_rate = self.source.qudit_rate_hz * self.source.mean_pairs_per_qudit * self.channel.transmittance(side);
        let bin = self.plan.histogram_bin_s;
        let n = frame_bins(&self.source, bin);
        let mut acc = vec![0.0; n];
        for (s, lo, hi) in self.overlaps(epoch) {
            let probs = &self.singles[s][receiver as usize];
            let slot_probs: Vec<f64> = Outcome::all()
                .filter(|o| o.x == detector)
                .map(|o| probs[o.index()])
                .collect();
            let dt = (hi - lo) / SUBSTEPS as f64;
            for k in 0..SUBSTEPS {
                let t_mid = lo + (k as f64 + 0.5) * dt;
                let weights: Vec<f64> = slot_probs.iter().map(|p| p * pair_rate * dt).collect();
                let h = expected_histogram(&weights, self.drift_offset(receiver, t_mid), &self.source, bin);
                for (a, v) in acc.iter_mut().zip(h) {
                    *a += v;
                }
            }
        }
        let (e0, e1) = self.plan.epoch_interval(epoch);
        let dark = self.channel.background_singles_hz * (e1 - e0) / n as f64;
        acc.iter_mut().for_each(|a| *a += dark);
        acc
    }

    /// Poisson singles histograms for all four detectors, one trace per epoch.
    pub fn histograms(&self) -> Vec<HistogramSeries> {
        let epochs = self.plan.epochs();
        let detectors: Vec<(Receiver, Detector)> = Receiver::ALL
            .into_iter()
            .flat_map(|r| Detector::ALL.into_iter().map(move |d| (r, d)))
            .collect();
        detectors
            .into_par_iter()
            .enumerate()
            .map(|(di, (receiver, detector))| {
                let traces = (0..epochs)
                    .map(|e| {
                        let mut rng = stream_rng(self.plan.seed, STREAM_HISTOGRAMS, ((di as u64) << 24) | e as u64);
                        let counts = self
                            .expected_histogram(receiver, detector, e)
                            .into_iter()
                            .map(|m| poisson(&mut rng, m))
                            .collect();
                        HistogramTrace {
                            bin_width_s: self.plan.histogram_bin_s,
                            counts,
                            epoch_min: e,
                        }
                    })
                    .collect();
                HistogramSeries {
                    receiver,
                    detector,
                    traces,
                }
            })
            .collect()
    }

    fn jitter<R: Rng>(&self, rng: &mut R) -> f64 {
        let sigma = self.source.pulse_sigma_s();
        let half = self.source.slot_interval_s / 2.0;
        loop {
            let z: f64 = rng.sample(StandardNormal);
            if (z * sigma).abs() <= half {
                return z * sigma;
            }
        }
    }

    fn tag_ps(&self, seconds: f64) -> u32 {
        let frame_ps = (self.source.frame_s() * 1e12).round();
        ((seconds * 1e12).round().rem_euclid(frame_ps)) as u32
    }

    /// Time-tagged coincidences detected during `epoch`. Accidental
    /// coincidences land uniformly over the frame.
    pub fn epoch_events(&self, epoch: u32) -> Vec<CoincidenceEvent> {
        let mut rng = stream_rng(self.plan.seed, STREAM_EVENTS, epoch as u64);
        let n_scale = self.rate_scale() / self.plan.duration_per_setting_s;
        let bg_rate = self.channel.background_coincidence_hz * self.plan.count_scale;
        let t_slot = self.source.slot_interval_s;
        let frame = self.source.frame_s();
        let mut out = Vec::new();
        for (s, lo, hi) in self.overlaps(epoch) {
            let dt = hi - lo;
            for (cell, p) in Cell::all().zip(&self.probabilities[s]) {
                let k = poisson(&mut rng, n_scale * p * dt);
                for _ in 0..k {
                    let t = rng.random_range(lo..hi);
                    let ta = cell.a.t as f64 * t_slot + self.jitter(&mut rng) + self.drift_offset(Receiver::Alice, t);
                    let tb = cell.b.t as f64 * t_slot + self.jitter(&mut rng) + self.drift_offset(Receiver::Bob, t);
                    out.push(CoincidenceEvent {
                        epoch,
                        setting_index: s as u16,
                        time_a_ps: self.tag_ps(ta),
                        x_a: cell.a.x,
                        time_b_ps: self.tag_ps(tb),
                        x_b: cell.b.x,
                    });
                }
            }
            for xa in Detector::ALL {
                for xb in Detector::ALL {
                    let per_pair = bg_rate * dt * (xa.slots() as f64) * (xb.slots() as f64);
                    for _ in 0..poisson(&mut rng, per_pair) {
                        out.push(CoincidenceEvent {
                            epoch,
                            setting_index: s as u16,
                            time_a_ps: self.tag_ps(rng.random_range(0.0..frame)),
                            x_a: xa,
                            time_b_ps: self.tag_ps(rng.random_range(0.0..frame)),
                            x_b: xb,
                        });
                    }
                }
            }
        }
        out
    }
}

/// Convenience wrapper: coincidence tables plus singles histograms.
pub fn simulate_counts(
    rho: &DensityOperator,
    plan: &RunPlan,
    source: &SourceConfig,
    channel: &ChannelConfig,
    calibs: &Calibrations,
) -> Result<SimulationOutput> {
    let sim = Simulator::new(rho, plan, source, channel, calibs)?;
    Ok(SimulationOutput {
        records: sim.simulate_counts(),
        histograms: sim.histograms(),
    })
}
