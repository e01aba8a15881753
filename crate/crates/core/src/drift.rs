//! Tracking of the first-time-slot position from singles histograms and
//! realignment of time-tagged coincidences.
//!
//! The offset of an epoch is the τ maximizing the circular cross-correlation
//! g(τ) = Σ_m w_m h(τ + mT) of the measured histogram h with the ideal comb
//! of weights w. The search runs in two passes: a coarse pass on g summed
//! over the coincidence window picks the comb alignment, then the raw g is
//! maximized within half a window of it. Ties go to the smallest τ.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mzi::{Detector, Outcome};
use crate::sim::{comb_weights, Cell, CoincidenceEvent, CoincidenceRecord, HistogramTrace, SettingPair, FRAME_SLOTS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetEstimate {
    /// First-slot position in [0, 8T).
    pub tau_s: f64,
    pub epoch_min: u32,
    /// Peak correlation divided by (histogram total × comb weight total).
    pub score: f64,
}

fn check_trace(measured: &HistogramTrace, slot_interval_s: f64) -> Result<()> {
    if measured.counts.is_empty() || measured.total() == 0 {
        return Err(Error::InsufficientData(format!(
            "histogram for epoch {} is empty",
            measured.epoch_min
        )));
    }
    let frame = FRAME_SLOTS as f64 * slot_interval_s;
    if (measured.span_s() - frame).abs() > measured.bin_width_s {
        return Err(Error::ContractViolation(format!(
            "histogram spans {:e} s, expected one frame of {:e} s",
            measured.span_s(),
            frame
        )));
    }
    Ok(())
}

/// g(k · bin) for every bin k of the histogram.
pub fn cross_correlation(measured: &HistogramTrace, detector: Detector, slot_interval_s: f64) -> Vec<f64> {
    let n = measured.counts.len();
    let spikes: Vec<(usize, f64)> = comb_weights(detector)
        .into_iter()
        .enumerate()
        .map(|(m, w)| {
            let shift = (m as f64 * slot_interval_s / measured.bin_width_s).round() as usize;
            (shift, w as f64)
        })
        .collect();
    (0..n)
        .map(|k| {
            spikes
                .iter()
                .map(|&(shift, w)| w * measured.counts[(k + shift) % n] as f64)
                .sum()
        })
        .collect()
}

/// Position of the first time slot in one histogram.
pub fn estimate_offset(
    measured: &HistogramTrace,
    detector: Detector,
    slot_interval_s: f64,
    window_s: f64,
) -> Result<OffsetEstimate> {
    check_trace(measured, slot_interval_s)?;
    if !(window_s > measured.bin_width_s) {
        return Err(Error::InvalidConfig(format!(
            "window {window_s:e} s must exceed the bin width {:e} s",
            measured.bin_width_s
        )));
    }
    let n = measured.counts.len();
    let g = cross_correlation(measured, detector, slot_interval_s);
    let half = (window_s / 2.0 / measured.bin_width_s).floor() as isize;
    let wrap = |k: isize| k.rem_euclid(n as isize) as usize;

    let coarse: Vec<f64> = (0..n as isize)
        .map(|k| (-half..=half).map(|d| g[wrap(k + d)]).sum())
        .collect();
    let k0 = argmax_first(&coarse);

    let mut candidates: Vec<usize> = (-half..=half).map(|d| wrap(k0 as isize + d)).collect();
    candidates.sort_unstable();
    candidates.dedup();
    let mut best = candidates[0];
    for &k in &candidates[1..] {
        if g[k] > g[best] {
            best = k;
        }
    }

    let weight_total: u32 = comb_weights(detector).iter().sum();
    Ok(OffsetEstimate {
        tau_s: best as f64 * measured.bin_width_s,
        epoch_min: measured.epoch_min,
        score: g[best] / (measured.total() as f64 * weight_total as f64),
    })
}

fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackReport {
    pub estimates: Vec<OffsetEstimate>,
    /// Epochs that produced no estimate, with the reason.
    pub failed: Vec<(u32, String)>,
}

/// One independent estimate per epoch. Epochs must be strictly increasing.
pub fn track_run(
    histograms: &[HistogramTrace],
    detector: Detector,
    slot_interval_s: f64,
    window_s: f64,
) -> Result<TrackReport> {
    if histograms.windows(2).any(|w| w[1].epoch_min <= w[0].epoch_min) {
        return Err(Error::ContractViolation(
            "histogram epochs are not strictly increasing".into(),
        ));
    }
    let mut report = TrackReport {
        estimates: Vec::with_capacity(histograms.len()),
        failed: Vec::new(),
    };
    for h in histograms {
        match estimate_offset(h, detector, slot_interval_s, window_s) {
            Ok(est) => report.estimates.push(est),
            Err(e @ Error::InvalidConfig(_)) => return Err(e),
            Err(e) => {
                log::warn!("epoch {}: {e}", h.epoch_min);
                report.failed.push((h.epoch_min, e.to_string()));
            }
        }
    }
    Ok(report)
}

/// Centered moving average of width `width` epochs, computed on the
/// circularly unwrapped τ series.
pub fn smooth_offsets(estimates: &[OffsetEstimate], width: usize, frame_s: f64) -> Vec<OffsetEstimate> {
    if width <= 1 || estimates.is_empty() {
        return estimates.to_vec();
    }
    let mut unwrapped = Vec::with_capacity(estimates.len());
    let mut prev = estimates[0].tau_s;
    unwrapped.push(prev);
    for e in &estimates[1..] {
        let mut d = (e.tau_s - prev.rem_euclid(frame_s)).rem_euclid(frame_s);
        if d > frame_s / 2.0 {
            d -= frame_s;
        }
        prev += d;
        unwrapped.push(prev);
    }
    let lo_half = (width - 1) / 2;
    let hi_half = width / 2;
    estimates
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let lo = i.saturating_sub(lo_half);
            let hi = (i + hi_half).min(estimates.len() - 1);
            let mean = unwrapped[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64;
            OffsetEstimate {
                tau_s: mean.rem_euclid(frame_s),
                ..*e
            }
        })
        .collect()
}

/// Per-epoch τ of one receiver.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpochOffsets(BTreeMap<u32, f64>);

impl EpochOffsets {
    pub fn from_estimates(estimates: &[OffsetEstimate]) -> Self {
        EpochOffsets(estimates.iter().map(|e| (e.epoch_min, e.tau_s)).collect())
    }

    /// The same offset for epochs `0..epochs`.
    pub fn constant(tau_s: f64, epochs: u32) -> Self {
        EpochOffsets((0..epochs).map(|e| (e, tau_s)).collect())
    }

    pub fn insert(&mut self, epoch: u32, tau_s: f64) {
        self.0.insert(epoch, tau_s);
    }

    pub fn get(&self, epoch: u32) -> Result<f64> {
        self.0.get(&epoch).copied().ok_or(Error::UnalignableEpoch(epoch))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Slot of a detection at `time_ps` once the first slot is moved to zero, or
/// `None` when the shifted time is further than half a window from every
/// slot center reachable at detector `x`.
pub fn assign_slot(time_ps: u32, tau_s: f64, slot_interval_s: f64, window_s: f64, x: Detector) -> Option<u8> {
    let frame = FRAME_SLOTS as f64 * slot_interval_s;
    let mut t = (time_ps as f64 * 1e-12 - tau_s).rem_euclid(frame);
    if t >= frame - slot_interval_s / 2.0 {
        t -= frame;
    }
    let slot = (t / slot_interval_s).round();
    if (t - slot * slot_interval_s).abs() > window_s / 2.0 {
        return None;
    }
    (slot >= 0.0 && slot < x.slots() as f64).then_some(slot as u8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RealignOutput {
    /// Complete table: every setting × 169 cells.
    pub records: Vec<CoincidenceRecord>,
    pub accepted: u64,
    pub discarded: u64,
}

/// Streaming tabulation of time-tagged coincidences.
#[derive(Debug, Clone)]
pub struct Realigner {
    settings: Vec<SettingPair>,
    slot_interval_s: f64,
    window_s: f64,
    counts: Vec<[u64; 169]>,
    accepted: u64,
    discarded: u64,
}

impl Realigner {
    pub fn new(settings: &[SettingPair], slot_interval_s: f64, window_s: f64) -> Result<Self> {
        if !(slot_interval_s > 0.0 && window_s > 0.0 && window_s <= slot_interval_s) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < window ({window_s:e} s) <= slot interval ({slot_interval_s:e} s)"
            )));
        }
        Ok(Realigner {
            settings: settings.to_vec(),
            slot_interval_s,
            window_s,
            counts: vec![[0; 169]; settings.len()],
            accepted: 0,
            discarded: 0,
        })
    }

    pub fn push(
        &mut self,
        events: &[CoincidenceEvent],
        offsets_a: &EpochOffsets,
        offsets_b: &EpochOffsets,
    ) -> Result<()> {
        for ev in events {
            let s = ev.setting_index as usize;
            if s >= self.settings.len() {
                return Err(Error::InvalidOutcome(format!("setting index {s} out of range")));
            }
            let tau_a = offsets_a.get(ev.epoch)?;
            let tau_b = offsets_b.get(ev.epoch)?;
            let slot_a = assign_slot(ev.time_a_ps, tau_a, self.slot_interval_s, self.window_s, ev.x_a);
            let slot_b = assign_slot(ev.time_b_ps, tau_b, self.slot_interval_s, self.window_s, ev.x_b);
            match (slot_a, slot_b) {
                (Some(ta), Some(tb)) => {
                    let cell = Cell {
                        a: Outcome { t: ta, x: ev.x_a },
                        b: Outcome { t: tb, x: ev.x_b },
                    };
                    self.counts[s][cell.index()] += 1;
                    self.accepted += 1;
                }
                _ => self.discarded += 1,
            }
        }
        Ok(())
    }

    pub fn finish(self) -> RealignOutput {
        let records = self
            .counts
            .iter()
            .enumerate()
            .flat_map(|(s, table)| {
                let setting = self.settings[s];
                Cell::all().map(move |cell| CoincidenceRecord {
                    setting_index: s,
                    setting,
                    cell,
                    count: table[cell.index()],
                })
            })
            .collect();
        RealignOutput {
            records,
            accepted: self.accepted,
            discarded: self.discarded,
        }
    }
}

/// Tabulates `events` after removing each receiver's per-epoch offset.
pub fn realign(
    events: &[CoincidenceEvent],
    offsets_a: &EpochOffsets,
    offsets_b: &EpochOffsets,
    settings: &[SettingPair],
    slot_interval_s: f64,
    window_s: f64,
) -> Result<RealignOutput> {
    let mut r = Realigner::new(settings, slot_interval_s, window_s)?;
    r.push(events, offsets_a, offsets_b)?;
    Ok(r.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{expected_histogram, ideal_histogram, standard_settings, SourceConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Poisson};

    const T: f64 = 1e-9;
    const BIN: f64 = 1e-11;
    const WINDOW: f64 = 0.33e-9;

    fn noisy_trace(detector: Detector, shift_s: f64, total: f64, rng: &mut ChaCha8Rng) -> HistogramTrace {
        let weights: Vec<f64> = comb_weights(detector).iter().map(|&w| w as f64).collect();
        let wsum: f64 = weights.iter().sum();
        let scaled: Vec<f64> = weights.iter().map(|w| w * total / wsum).collect();
        let mean = expected_histogram(&scaled, shift_s, &SourceConfig::default(), BIN);
        HistogramTrace {
            bin_width_s: BIN,
            counts: mean
                .into_iter()
                .map(|m| {
                    if m > 0.0 {
                        Poisson::new(m).unwrap().sample(rng) as u64
                    } else {
                        0
                    }
                })
                .collect(),
            epoch_min: 0,
        }
    }

    #[test]
    fn finds_shifted_comb() {
        for det in Detector::ALL {
            let h = ideal_histogram(det, T, BIN).unwrap().rotated(250);
            let est = estimate_offset(&h, det, T, WINDOW).unwrap();
            assert!((est.tau_s - 2.5e-9).abs() < 1e-15, "{det}: {}", est.tau_s);
        }
    }

    #[test]
    fn wraps_modulo_frame() {
        let h = ideal_histogram(Detector::Two, T, BIN).unwrap().rotated(850);
        let est = estimate_offset(&h, Detector::Two, T, WINDOW).unwrap();
        assert!((est.tau_s - 0.5e-9).abs() < 1e-15);
    }

    #[test]
    fn empty_histogram_is_insufficient() {
        let h = HistogramTrace {
            bin_width_s: BIN,
            counts: vec![0; 800],
            epoch_min: 3,
        };
        assert!(matches!(
            estimate_offset(&h, Detector::One, T, WINDOW),
            Err(Error::InsufficientData(_))
        ));
        let h = HistogramTrace {
            bin_width_s: BIN,
            counts: vec![],
            epoch_min: 3,
        };
        assert!(matches!(
            estimate_offset(&h, Detector::One, T, WINDOW),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn window_must_exceed_bin() {
        let h = ideal_histogram(Detector::One, T, BIN).unwrap();
        assert!(estimate_offset(&h, Detector::One, T, BIN / 2.0).is_err());
    }

    #[test]
    fn noisy_histograms_track_within_half_window() {
        // 7.7 kcps accumulated for 60 s.
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let trials = 1000;
        let mut hits = 0;
        for _ in 0..trials {
            let h = noisy_trace(Detector::Two, 1.7e-9, 7.7e3 * 60.0, &mut rng);
            let est = estimate_offset(&h, Detector::Two, T, WINDOW).unwrap();
            if (est.tau_s - 1.7e-9).abs() <= 0.165e-9 {
                hits += 1;
            }
        }
        assert!(hits as f64 >= 0.99 * trials as f64, "{hits}/{trials}");
    }

    #[test]
    fn shift_equivariance_on_bin_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for det in Detector::ALL {
            let h = noisy_trace(det, 0.42e-9, 3e5, &mut rng);
            let base = estimate_offset(&h, det, T, WINDOW).unwrap();
            let base_bin = (base.tau_s / BIN).round() as isize;
            for delta in (0..800).step_by(37) {
                let est = estimate_offset(&h.rotated(delta), det, T, WINDOW).unwrap();
                let got = (est.tau_s / BIN).round() as isize;
                assert_eq!(got, (base_bin + delta).rem_euclid(800), "{det} Δ={delta}");
            }
        }
    }

    #[test]
    fn scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = noisy_trace(Detector::One, 5.3e-9, 1e5, &mut rng);
        let base = estimate_offset(&h, Detector::One, T, WINDOW).unwrap();
        for k in [2u64, 7, 1000] {
            let scaled = HistogramTrace {
                counts: h.counts.iter().map(|c| c * k).collect(),
                ..h.clone()
            };
            assert_eq!(
                estimate_offset(&scaled, Detector::One, T, WINDOW).unwrap().tau_s,
                base.tau_s
            );
        }
    }

    #[test]
    fn detector_two_peak_is_unique() {
        let h = ideal_histogram(Detector::Two, T, BIN).unwrap().rotated(130);
        let g = cross_correlation(&h, Detector::Two, T);
        let max = g.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(g.iter().filter(|&&v| v == max).count(), 1);
        assert_eq!(argmax_first(&g), 130);
    }

    #[test]
    fn track_constant_and_jitter() {
        let mut traces = Vec::new();
        let base = ideal_histogram(Detector::One, T, BIN).unwrap().rotated(123);
        for e in 0..10u32 {
            let mut h = base.clone();
            h.epoch_min = e;
            traces.push(h);
        }
        let report = track_run(&traces, Detector::One, T, WINDOW).unwrap();
        assert!(report.failed.is_empty());
        assert!(report.estimates.iter().all(|e| (e.tau_s - 1.23e-9).abs() < 1e-15));

        // ±0.1 ns jitter rounds onto the same bin when the bin is 0.25 ns.
        let mut jitter = Vec::new();
        for e in 0..10u32 {
            let shift = 1.125e-9 + if e % 2 == 0 { 0.1e-9 } else { -0.1e-9 };
            let mean = expected_histogram(
                &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0],
                shift,
                &SourceConfig::default(),
                0.25e-9,
            );
            jitter.push(HistogramTrace {
                bin_width_s: 0.25e-9,
                counts: mean.iter().map(|m| (m * 1e6).round() as u64).collect(),
                epoch_min: e,
            });
        }
        let report = track_run(&jitter, Detector::Two, T, 0.6e-9).unwrap();
        let taus: Vec<f64> = report.estimates.iter().map(|e| e.tau_s).collect();
        assert!(taus.iter().all(|&t| t == taus[0]), "{taus:?}");
        assert!((taus[0] - 1.0e-9).abs() < 1e-15);
    }

    #[test]
    fn track_flags_empty_epochs() {
        let good = ideal_histogram(Detector::One, T, BIN).unwrap();
        let empty = HistogramTrace {
            counts: vec![0; 800],
            epoch_min: 1,
            ..good.clone()
        };
        let mut later = good.clone();
        later.epoch_min = 2;
        let report = track_run(&[good.clone(), empty, later], Detector::One, T, WINDOW).unwrap();
        assert_eq!(report.estimates.len(), 2);
        assert_eq!(report.failed.len(), 1);
        assert_eq!(report.failed[0].0, 1);

        let unordered = [later_epoch(&good, 5), later_epoch(&good, 4)];
        assert!(track_run(&unordered, Detector::One, T, WINDOW).is_err());
    }

    fn later_epoch(h: &HistogramTrace, e: u32) -> HistogramTrace {
        HistogramTrace {
            epoch_min: e,
            ..h.clone()
        }
    }

    #[test]
    fn smoothing_handles_wrap() {
        let frame = 8e-9;
        let est: Vec<OffsetEstimate> = [7.9e-9, 0.1e-9, 7.9e-9, 0.1e-9]
            .iter()
            .enumerate()
            .map(|(i, &t)| OffsetEstimate {
                tau_s: t,
                epoch_min: i as u32,
                score: 1.0,
            })
            .collect();
        let s = smooth_offsets(&est, 2, frame);
        for e in &s[..3] {
            let d = (e.tau_s - 0.0).abs().min((e.tau_s - frame).abs());
            assert!(d < 1e-15, "{}", e.tau_s);
        }
        assert_eq!(smooth_offsets(&est, 1, frame), est);
    }

    fn event(epoch: u32, ta: u32, xa: Detector, tb: u32, xb: Detector) -> CoincidenceEvent {
        CoincidenceEvent {
            epoch,
            setting_index: 0,
            time_a_ps: ta,
            x_a: xa,
            time_b_ps: tb,
            x_b: xb,
        }
    }

    #[test]
    fn slot_assignment() {
        use Detector::*;
        assert_eq!(assign_slot(3000, 0.0, T, WINDOW, One), Some(3));
        assert_eq!(assign_slot(3160, 0.0, T, WINDOW, One), Some(3));
        assert_eq!(assign_slot(3170, 0.0, T, WINDOW, One), None);
        assert_eq!(assign_slot(6000, 0.0, T, WINDOW, Two), None);
        assert_eq!(assign_slot(7000, 0.0, T, WINDOW, One), None);
        // Just before the frame edge belongs to slot 0 of the next frame.
        assert_eq!(assign_slot(7950, 0.0, T, WINDOW, Two), Some(0));
        assert_eq!(assign_slot(2550, 2.5e-9, T, WINDOW, One), Some(0));
    }

    #[test]
    fn realign_identity_and_shift() {
        use Detector::*;
        let settings = &standard_settings()[..1];
        let events: Vec<CoincidenceEvent> = (0..7u32)
            .flat_map(|t| {
                [
                    event(0, t * 1000, One, (t % 6) * 1000, Two),
                    event(0, t * 1000 + 40, One, 5000, Two),
                ]
            })
            .collect();
        let zero = EpochOffsets::constant(0.0, 1);
        let out = realign(&events, &zero, &zero, settings, T, WINDOW).unwrap();
        assert_eq!(out.accepted, events.len() as u64);
        assert_eq!(out.discarded, 0);
        for ev in &events {
            let cell = Cell {
                a: Outcome::new(((ev.time_a_ps + 500) / 1000) as u8, ev.x_a).unwrap(),
                b: Outcome::new(((ev.time_b_ps + 500) / 1000) as u8, ev.x_b).unwrap(),
            };
            assert!(out.records[cell.index()].count > 0);
        }

        // A uniform 2T offset moves every slot down by two; slots that wrap
        // onto the empty eighth slot (or past detector 2's range) are dropped.
        let two_t = EpochOffsets::constant(2e-9, 1);
        let out = realign(&events, &two_t, &zero, settings, T, WINDOW).unwrap();
        let mut expected = [0u64; 169];
        let mut dropped = 0;
        for ev in &events {
            let ta = ((ev.time_a_ps + 500) / 1000) as i32;
            let tb = ((ev.time_b_ps + 500) / 1000) as u8;
            let shifted = (ta - 2).rem_euclid(8);
            if shifted < 7 {
                let cell = Cell {
                    a: Outcome::new(shifted as u8, One).unwrap(),
                    b: Outcome::new(tb, Two).unwrap(),
                };
                expected[cell.index()] += 1;
            } else {
                dropped += 1;
            }
        }
        assert_eq!(out.discarded, dropped);
        for r in &out.records {
            assert_eq!(r.count, expected[r.cell.index()]);
        }
    }

    #[test]
    fn realign_requires_offsets_for_every_epoch() {
        use Detector::*;
        let events = [event(3, 0, One, 0, One)];
        let offs = EpochOffsets::constant(0.0, 2);
        let err = realign(&events, &offs, &offs, &standard_settings(), T, WINDOW);
        assert!(matches!(err, Err(Error::UnalignableEpoch(3))));
    }
}
