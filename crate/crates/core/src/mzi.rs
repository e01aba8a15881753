//! Measurement operators of a receiver built from a 2-bit delay MZI feeding a
//! 1-bit delay MZI, followed by time-slot post-selection.
//!
//! Detector 1 sits behind the 1-bit MZI and sees seven slots (t = 0..=6);
//! detector 2 sits on the free output of the 2-bit MZI and sees six
//! (t = 0..=5). The second output of the 1-bit MZI is not modeled, so the
//! operators of one setting do not sum to the identity.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, RwLock};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qudit::{CMatrix, CVector, ZERO};

/// Qudit dimension of one photon.
pub const QUDIT_DIM: usize = 4;
/// Number of modeled outcomes per setting (7 + 6).
pub const OUTCOMES_PER_SETTING: usize = 13;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub eta1_2bit: f64,
    pub eta2_2bit: f64,
    pub eta1_1bit: f64,
    #[serde(rename = "eta")]
    pub eta_global: f64,
}

impl CalibrationSet {
    pub fn balanced() -> Self {
        CalibrationSet {
            eta1_2bit: 1.0,
            eta2_2bit: 1.0,
            eta1_1bit: 1.0,
            eta_global: 1.0,
        }
    }

    /// Receiver of the signal photon.
    pub fn alice() -> Self {
        CalibrationSet {
            eta1_2bit: 1.009,
            eta2_2bit: 0.8300,
            eta1_1bit: 1.063,
            eta_global: 0.8507,
        }
    }

    /// Receiver of the idler photon.
    pub fn bob() -> Self {
        CalibrationSet {
            eta1_2bit: 0.8495,
            eta2_2bit: 0.8302,
            eta1_1bit: 0.9669,
            eta_global: 0.4812,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ratios = [
            ("eta1_2bit", self.eta1_2bit),
            ("eta2_2bit", self.eta2_2bit),
            ("eta1_1bit", self.eta1_1bit),
            ("eta", self.eta_global),
        ];
        for (name, v) in ratios {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidCalibration(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        if self.eta_global > 1.5 {
            return Err(Error::InvalidCalibration(format!(
                "eta must lie in (0, 1.5], got {}",
                self.eta_global
            )));
        }
        Ok(())
    }
}

/// Interferometer phases θ1 (1-bit MZI) and θ2 (2-bit MZI), in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseSetting {
    pub theta1: f64,
    pub theta2: f64,
}

impl PhaseSetting {
    pub fn new(theta1: f64, theta2: f64) -> Self {
        PhaseSetting { theta1, theta2 }
    }

    /// Setting with each phase given in quarter turns (0 → 0, 1 → π/2).
    pub fn from_quarter_turns(q1: u8, q2: u8) -> Self {
        let quarter = std::f64::consts::FRAC_PI_2;
        PhaseSetting::new(q1 as f64 * quarter, q2 as f64 * quarter)
    }

    /// Inverse of [`PhaseSetting::from_quarter_turns`] for the tomography
    /// protocol phases {0, π/2}; `None` for anything else.
    pub fn quarter_turns(&self) -> Option<(u8, u8)> {
        let q = |th: f64| {
            let x = th / std::f64::consts::FRAC_PI_2;
            let r = x.round();
            ((x - r).abs() < 1e-9 && (r == 0.0 || r == 1.0)).then_some(r as u8)
        };
        Some((q(self.theta1)?, q(self.theta2)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Detector {
    One,
    Two,
}

impl Detector {
    pub const ALL: [Detector; 2] = [Detector::One, Detector::Two];

    pub fn index(self) -> u8 {
        match self {
            Detector::One => 1,
            Detector::Two => 2,
        }
    }

    pub fn from_index(x: u8) -> Result<Detector> {
        match x {
            1 => Ok(Detector::One),
            2 => Ok(Detector::Two),
            _ => Err(Error::InvalidOutcome(format!("detector index {x} not in {{1, 2}}"))),
        }
    }

    /// Number of detection slots reachable at this detector.
    pub fn slots(self) -> u8 {
        match self {
            Detector::One => 7,
            Detector::Two => 6,
        }
    }
}

impl TryFrom<u8> for Detector {
    type Error = Error;
    fn try_from(x: u8) -> Result<Self> {
        Detector::from_index(x)
    }
}

impl From<Detector> for u8 {
    fn from(d: Detector) -> u8 {
        d.index()
    }
}

impl fmt::Display for Detector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.index())
    }
}

/// A (time slot, detector) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Outcome {
    pub t: u8,
    pub x: Detector,
}

impl Outcome {
    pub fn new(t: u8, x: Detector) -> Result<Self> {
        if t >= x.slots() {
            return Err(Error::InvalidOutcome(format!(
                "slot {t} not reachable at detector {x} (max {})",
                x.slots() - 1
            )));
        }
        Ok(Outcome { t, x })
    }

    /// All 13 outcomes: detector 1 slots 0..=6 then detector 2 slots 0..=5.
    pub fn all() -> impl Iterator<Item = Outcome> {
        Detector::ALL
            .into_iter()
            .flat_map(|x| (0..x.slots()).map(move |t| Outcome { t, x }))
    }

    /// Position in [`Outcome::all`].
    pub fn index(&self) -> usize {
        match self.x {
            Detector::One => self.t as usize,
            Detector::Two => 7 + self.t as usize,
        }
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta.is_finite() && eta > 0.0) {
        return Err(Error::InvalidCalibration(format!(
            "transmittance ratio must be positive, got {eta}"
        )));
    }
    Ok(())
}

/// Transfer matrix (6×4) of the 2-bit delay MZI to output `port`.
///
/// Column k is (±|k⟩ + √η e^{iθ2} |k+2⟩) / √(2(1+η)), with the minus sign on
/// the short path for port 2.
pub fn mzi_2bit(port: Detector, theta2: f64, eta: f64) -> Result<CMatrix> {
    check_eta(eta)?;
    let norm = 1.0 / (2.0 * (1.0 + eta)).sqrt();
    let short = match port {
        Detector::One => norm,
        Detector::Two => -norm,
    };
    let long = Complex64::from_polar(eta.sqrt() * norm, theta2);
    let mut m = CMatrix::zeros(QUDIT_DIM + 2, QUDIT_DIM);
    for k in 0..QUDIT_DIM {
        m[(k, k)] = Complex64::from(short);
        m[(k + 2, k)] = long;
    }
    Ok(m)
}

/// Transfer matrix (7×6) of the 1-bit delay MZI to the detector-1 output.
pub fn mzi_1bit(theta1: f64, eta: f64) -> Result<CMatrix> {
    check_eta(eta)?;
    let norm = 1.0 / (2.0 * (1.0 + eta)).sqrt();
    let long = Complex64::from_polar(eta.sqrt() * norm, theta1);
    let mut m = CMatrix::zeros(QUDIT_DIM + 3, QUDIT_DIM + 2);
    for k in 0..QUDIT_DIM + 2 {
        m[(k, k)] = Complex64::from(norm);
        m[(k + 1, k)] = long;
    }
    Ok(m)
}

/// Rank-one measurement operator E = w w† on one qudit.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementOperator {
    pub outcome: Outcome,
    pub setting: PhaseSetting,
    factor: CVector,
}

impl MeasurementOperator {
    /// The vector w with E = w w†.
    pub fn factor(&self) -> &CVector {
        &self.factor
    }

    pub fn matrix(&self) -> CMatrix {
        &self.factor * self.factor.adjoint()
    }

    pub fn trace(&self) -> f64 {
        self.factor.norm_squared()
    }
}

/// E_{t x θ1 θ2} for one receiver.
pub fn build_e(outcome: Outcome, setting: PhaseSetting, calib: &CalibrationSet) -> Result<MeasurementOperator> {
    calib.validate()?;
    let outcome = Outcome::new(outcome.t, outcome.x)?;
    let t = outcome.t as usize;
    // Row t of the path transfer matrix; E = (row)† (row).
    let row: Vec<Complex64> = match outcome.x {
        Detector::One => {
            let m2 = mzi_2bit(Detector::One, setting.theta2, calib.eta1_2bit)?;
            let m1 = mzi_1bit(setting.theta1, calib.eta1_1bit)?;
            let path = m1 * m2;
            let scale = calib.eta_global.sqrt();
            (0..QUDIT_DIM).map(|k| path[(t, k)] * scale).collect()
        }
        Detector::Two => {
            let m2 = mzi_2bit(Detector::Two, setting.theta2, calib.eta2_2bit)?;
            (0..QUDIT_DIM).map(|k| m2[(t, k)]).collect()
        }
    };
    let factor = CVector::from_iterator(QUDIT_DIM, row.into_iter().map(|z| z.conj()));
    Ok(MeasurementOperator {
        outcome,
        setting,
        factor,
    })
}

/// All 13 modeled outcome operators for a setting, in [`Outcome::all`] order.
pub fn enumerate_outcomes(setting: PhaseSetting, calib: &CalibrationSet) -> Result<Vec<MeasurementOperator>> {
    Outcome::all().map(|o| build_e(o, setting, calib)).collect()
}

/// Two-photon operator E_a ⊗ E_b (Alice/signal major).
pub fn joint_operator(ea: &MeasurementOperator, eb: &MeasurementOperator) -> CMatrix {
    ea.matrix().kronecker(&eb.matrix())
}

/// Rank-one factor of [`joint_operator`]: w_a ⊗ w_b.
pub fn joint_factor(ea: &MeasurementOperator, eb: &MeasurementOperator) -> CVector {
    ea.factor.kronecker(&eb.factor)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct CacheKey([u64; 6]);

impl CacheKey {
    fn new(s: &PhaseSetting, c: &CalibrationSet) -> Self {
        CacheKey([
            s.theta1.to_bits(),
            s.theta2.to_bits(),
            c.eta1_2bit.to_bits(),
            c.eta2_2bit.to_bits(),
            c.eta1_1bit.to_bits(),
            c.eta_global.to_bits(),
        ])
    }
}

/// Memoizes [`enumerate_outcomes`] per (setting, calibration). Safe to share
/// between threads.
#[derive(Debug, Default)]
pub struct OperatorCache {
    entries: RwLock<HashMap<CacheKey, Arc<[MeasurementOperator]>>>,
}

impl OperatorCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, setting: PhaseSetting, calib: &CalibrationSet) -> Result<Arc<[MeasurementOperator]>> {
        let key = CacheKey::new(&setting, calib);
        if let Some(ops) = self.entries.read().expect("cache poisoned").get(&key) {
            return Ok(Arc::clone(ops));
        }
        let ops: Arc<[MeasurementOperator]> = enumerate_outcomes(setting, calib)?.into();
        let mut w = self.entries.write().expect("cache poisoned");
        Ok(Arc::clone(w.entry(key).or_insert(ops)))
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Σ_t E_{t,x}: total detection operator of one detector.
pub fn detector_total(ops: &[MeasurementOperator], x: Detector) -> CMatrix {
    ops.iter()
        .filter(|e| e.outcome.x == x)
        .fold(CMatrix::from_element(QUDIT_DIM, QUDIT_DIM, ZERO), |acc, e| {
            acc + e.matrix()
        })
}
