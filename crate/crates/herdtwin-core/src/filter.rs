//! Linear-phase FIR low-pass denoising of hourly series.
//!
//! Filters are windowed-sinc designs normalized to unity DC gain and applied
//! with center compensation, so a symmetric filter introduces no phase shift.
//! The series must sit on a gap-free hourly grid before filtering; see
//! [`fill_gaps`] for the interpolation step that produces one.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{HourPoint, HourlySeries};

#[derive(Debug, Error, PartialEq)]
pub enum FilterError {
    #[error("normalized cutoff must lie strictly inside (0, 1), got {0}")]
    InvalidCutoff(f64),
    #[error("filter length must be at least 1")]
    InvalidLength,
    #[error("series has {len} points but the filter needs at least {need}")]
    SeriesTooShort { len: usize, need: usize },
    #[error("series has gaps; fill_gaps must run before filtering")]
    SeriesNotGapFree,
    #[error("day {0} is not fully present in the series")]
    IncompleteDay(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FirWindow {
    Rectangular,
    Hamming,
}

/// Symmetric FIR taps plus the design parameters they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirFilter {
    pub taps: Vec<f64>,
    /// Cutoff as a fraction of Nyquist on the hourly grid.
    pub normalized_cutoff: f64,
    pub window: FirWindow,
}

pub const DEFAULT_FIR_LENGTH: usize = 5;
pub const DEFAULT_FIR_CUTOFF: f64 = 0.4;
pub const DEFAULT_FIR_WINDOW: FirWindow = FirWindow::Hamming;

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
    }
}

/// Design a windowed-sinc low-pass filter. `normalized_cutoff` is a fraction
/// of Nyquist, so the cutoff in cycles/sample is `normalized_cutoff / 2`.
pub fn design_lowpass(
    length: usize,
    normalized_cutoff: f64,
    window: FirWindow,
) -> Result<FirFilter, FilterError> {
    if length < 1 {
        return Err(FilterError::InvalidLength);
    }
    if !(normalized_cutoff > 0.0 && normalized_cutoff < 1.0) {
        return Err(FilterError::InvalidCutoff(normalized_cutoff));
    }
    let fc = normalized_cutoff / 2.0; // cycles per sample
    let center = (length - 1) as f64 / 2.0;
    let mut taps: Vec<f64> = (0..length)
        .map(|i| {
            let n = i as f64 - center;
            let ideal = 2.0 * fc * sinc(2.0 * fc * n);
            let w = match window {
                FirWindow::Rectangular => 1.0,
                FirWindow::Hamming => {
                    if length == 1 {
                        1.0
                    } else {
                        let arg = 2.0 * std::f64::consts::PI * i as f64 / (length - 1) as f64;
                        0.54 - 0.46 * arg.cos()
                    }
                }
            };
            ideal * w
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    // Force exact symmetry: the analytic taps are symmetric, but mirrored
    // floating-point evaluation orders can differ in the last ulp.
    for i in 0..length / 2 {
        let avg = (taps[i] + taps[length - 1 - i]) / 2.0;
        taps[i] = avg;
        taps[length - 1 - i] = avg;
    }
    Ok(FirFilter { taps, normalized_cutoff, window })
}

impl FirFilter {
    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    /// Magnitude of the frequency response at `omega` radians/sample.
    pub fn magnitude_response(&self, omega: f64) -> f64 {
        let (mut re, mut im) = (0.0, 0.0);
        for (k, t) in self.taps.iter().enumerate() {
            re += t * (omega * k as f64).cos();
            im -= t * (omega * k as f64).sin();
        }
        (re * re + im * im).sqrt()
    }

    /// Zero-phase-compensated convolution with replicate padding at both
    /// edges; output length equals input length. No clamping.
    pub fn convolve_zero_phase(&self, x: &[f64]) -> Vec<f64> {
        let l = self.taps.len();
        let center = ((l - 1) / 2) as isize;
        let n = x.len() as isize;
        (0..n)
            .map(|t| {
                let mut acc = 0.0;
                for (k, tap) in self.taps.iter().enumerate() {
                    let idx = (t + k as isize - center).clamp(0, n - 1);
                    acc += tap * x[idx as usize];
                }
                acc
            })
            .collect()
    }
}

/// Filter an hourly series in place on its grid, clamping outputs to the
/// physical [0, 60] minutes range. The grid must be gap-free.
pub fn apply(filter: &FirFilter, series: &HourlySeries) -> Result<HourlySeries, FilterError> {
    if series.points.len() < filter.len() {
        return Err(FilterError::SeriesTooShort { len: series.points.len(), need: filter.len() });
    }
    if !series.is_gap_free() {
        return Err(FilterError::SeriesNotGapFree);
    }
    let values = series.minutes();
    let filtered = filter.convolve_zero_phase(&values);
    let points = series
        .points
        .iter()
        .zip(filtered)
        .map(|(p, v)| HourPoint { minutes: v.clamp(0.0, 60.0), ..*p })
        .collect();
    Ok(HourlySeries { points, ..series.clone() })
}

/// Resample a series with destroyed hours onto a gap-free grid by linear
/// interpolation between surviving neighbors. The boolean mask marks the
/// interpolated positions so downstream stages can exclude them.
pub fn fill_gaps(series: &HourlySeries) -> (HourlySeries, Vec<bool>) {
    let pts = &series.points;
    if pts.is_empty() {
        return (series.clone(), Vec::new());
    }
    let offset = series.start_hour_offset() as u64;
    let first = pts[0].hour_serial;
    let last = pts[pts.len() - 1].hour_serial;
    let mut out = Vec::with_capacity((last - first + 1) as usize);
    let mut interpolated = Vec::with_capacity(out.capacity());
    let mut i = 0usize; // next real point
    for serial in first..=last {
        if pts[i].hour_serial == serial {
            out.push(pts[i]);
            interpolated.push(false);
            i += 1;
        } else {
            // Strictly between pts[i-1] and pts[i].
            let a = pts[i - 1];
            let b = pts[i];
            let frac = (serial - a.hour_serial) as f64 / (b.hour_serial - a.hour_serial) as f64;
            out.push(HourPoint {
                hour_serial: serial,
                hour_of_day: ((serial - 1 + offset) % 24) as u8,
                minutes: a.minutes + frac * (b.minutes - a.minutes),
            });
            interpolated.push(true);
        }
    }
    (HourlySeries { points: out, ..series.clone() }, interpolated)
}

/// Extract one full day's 24 hourly values in clock order. Day 1 is the
/// calendar day containing hour serial 1.
pub fn single_cycle(series: &HourlySeries, day_index: u64) -> Result<[f64; 24], FilterError> {
    if day_index < 1 {
        return Err(FilterError::IncompleteDay(day_index));
    }
    let offset = series.start_hour_offset() as u64;
    let mut values = [f64::NAN; 24];
    let mut seen = 0;
    for p in &series.points {
        let day = (p.hour_serial - 1 + offset) / 24 + 1;
        if day == day_index {
            let h = p.hour_of_day as usize;
            if values[h].is_nan() {
                seen += 1;
            }
            values[h] = p.minutes;
        }
    }
    if seen != 24 {
        return Err(FilterError::IncompleteDay(day_index));
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{parse_treatment, Breed, CohortKey, Sex, SeriesOrigin, StateLabel};

    fn test_series(values: &[f64]) -> HourlySeries {
        HourlySeries {
            cohort: CohortKey {
                breed: Breed::Brahman,
                sex: Sex::Female,
                treatment: parse_treatment("P").unwrap(),
            },
            state: StateLabel::Resting,
            points: values
                .iter()
                .enumerate()
                .map(|(i, &v)| HourPoint {
                    hour_serial: i as u64 + 1,
                    hour_of_day: (i % 24) as u8,
                    minutes: v,
                })
                .collect(),
            origin: SeriesOrigin::CohortAverage(1),
        }
    }

    #[test]
    fn length_one_design_is_identity() {
        let f = design_lowpass(1, 0.7, FirWindow::Rectangular).unwrap();
        assert_eq!(f.taps, vec![1.0]);
        let f = design_lowpass(1, 0.2, FirWindow::Hamming).unwrap();
        assert_eq!(f.taps, vec![1.0]);
    }

    #[test]
    fn default_design_is_symmetric_unit_gain() {
        let f = design_lowpass(5, 0.4, FirWindow::Hamming).unwrap();
        assert_eq!(f.len(), 5);
        for i in 0..5 {
            assert_eq!(f.taps[i], f.taps[4 - i]);
        }
        let sum: f64 = f.taps.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12, "sum {sum}");
    }

    #[test]
    fn default_taps_match_independent_windowed_sinc_evaluation() {
        // Oracle: direct evaluation of the windowed-sinc formula at cutoff
        // 0.2 cycles/sample with a 5-point Hamming window, normalized.
        // h[n] = 0.4*sinc(0.4*(n-2)) * (0.54 - 0.46*cos(pi*n/2)), n = 0..4.
        let raw: Vec<f64> = (0..5)
            .map(|n| {
                let x = 0.4 * (n as f64 - 2.0);
                let s = if x == 0.0 {
                    1.0
                } else {
                    (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
                };
                let w = 0.54 - 0.46 * (std::f64::consts::PI * n as f64 / 2.0).cos();
                0.4 * s * w
            })
            .collect();
        let total: f64 = raw.iter().sum();
        let expected: Vec<f64> = raw.iter().map(|v| v / total).collect();

        let f = design_lowpass(5, 0.4, FirWindow::Hamming).unwrap();
        for (a, b) in f.taps.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
        // Spot value from the same formula, as a hard regression anchor.
        assert!((f.taps[2] - 0.539_143_884_436_721_3).abs() < 1e-12);
    }

    #[test]
    fn invalid_designs_are_rejected() {
        assert_eq!(design_lowpass(0, 0.4, FirWindow::Hamming), Err(FilterError::InvalidLength));
        assert!(matches!(
            design_lowpass(5, 0.0, FirWindow::Hamming),
            Err(FilterError::InvalidCutoff(_))
        ));
        assert!(matches!(
            design_lowpass(5, 1.0, FirWindow::Hamming),
            Err(FilterError::InvalidCutoff(_))
        ));
    }

    #[test]
    fn dc_response_is_unity_and_below_everywhere_else() {
        let f = design_lowpass(5, 0.4, FirWindow::Hamming).unwrap();
        assert!((f.magnitude_response(0.0) - 1.0).abs() < 1e-12);
        // 512-point grid over [0, pi]: no amplification anywhere, and the
        // Nyquist response sits well below DC (~0.119 for this short design).
        for k in 0..=512 {
            let w = std::f64::consts::PI * k as f64 / 512.0;
            assert!(f.magnitude_response(w) <= 1.0 + 1e-9);
        }
        assert!(f.magnitude_response(std::f64::consts::PI) < 0.15);
    }

    #[test]
    fn constant_series_passes_through() {
        let f = design_lowpass(5, 0.4, FirWindow::Hamming).unwrap();
        let s = test_series(&[10.0; 48]);
        let out = apply(&f, &s).unwrap();
        for p in &out.points {
            assert!((p.minutes - 10.0).abs() < 1e-12);
        }
        assert_eq!(out.points.len(), 48);
    }

    #[test]
    fn impulse_response_reproduces_centered_taps() {
        let f = design_lowpass(5, 0.4, FirWindow::Hamming).unwrap();
        let mut x = vec![0.0; 41];
        x[20] = 1.0;
        let y = f.convolve_zero_phase(&x);
        for (k, tap) in f.taps.iter().enumerate() {
            assert!((y[18 + k] - tap).abs() < 1e-15);
        }
        assert_eq!(y.len(), 41);
        assert!(y[10].abs() < 1e-15);
    }

    #[test]
    fn high_frequency_attenuated_more_than_low() {
        let f = design_lowpass(5, 0.4, FirWindow::Hamming).unwrap();
        let n = 512;
        let rms = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
        // Interior slice dodges edge-replication transients.
        let lo: Vec<f64> =
            (0..n).map(|t| (0.05 * std::f64::consts::PI * t as f64).sin()).collect();
        let hi: Vec<f64> = (0..n).map(|t| (0.8 * std::f64::consts::PI * t as f64).sin()).collect();
        let lo_out = f.convolve_zero_phase(&lo);
        let hi_out = f.convolve_zero_phase(&hi);
        let lo_gain = rms(&lo_out[16..n - 16]) / rms(&lo[16..n - 16]);
        let hi_gain = rms(&hi_out[16..n - 16]) / rms(&hi[16..n - 16]);
        assert!(hi_gain < lo_gain, "hi {hi_gain} vs lo {lo_gain}");
        assert!(lo_gain / hi_gain > 3.0);
    }

    #[test]
    fn zero_phase_pure_sinusoid_is_not_shifted() {
        let f = design_lowpass(5, 0.4, FirWindow::Hamming).unwrap();
        let n = 480;
        let omega = 2.0 * std::f64::consts::PI / 24.0;
        let x: Vec<f64> = (0..n).map(|t| (omega * t as f64).sin()).collect();
        let y = f.convolve_zero_phase(&x);
        let gain = f.magnitude_response(omega);
        // Away from the edges the output must equal gain * input exactly
        // (same phase), not a delayed copy.
        for t in 8..n - 8 {
            assert!((y[t] - gain * x[t]).abs() < 1e-9, "t={t}");
        }
    }

    #[test]
    fn apply_clamps_and_preserves_serials() {
        let f = design_lowpass(3, 0.9, FirWindow::Rectangular).unwrap();
        let mut vals = vec![59.0; 12];
        vals[5] = 60.0;
        let s = test_series(&vals);
        let out = apply(&f, &s).unwrap();
        for (a, b) in s.points.iter().zip(&out.points) {
            assert_eq!(a.hour_serial, b.hour_serial);
            assert!(b.minutes <= 60.0 && b.minutes >= 0.0);
        }
    }

    #[test]
    fn apply_rejects_short_or_gapped_series() {
        let f = design_lowpass(5, 0.4, FirWindow::Hamming).unwrap();
        let s = test_series(&[1.0, 2.0, 3.0]);
        assert!(matches!(apply(&f, &s), Err(FilterError::SeriesTooShort { .. })));

        let mut gapped = test_series(&[1.0; 10]);
        gapped.points.remove(4);
        assert_eq!(apply(&f, &gapped), Err(FilterError::SeriesNotGapFree));
    }

    #[test]
    fn fill_gaps_interpolates_and_flags() {
        let mut s = test_series(&[0.0, 10.0, 20.0, 30.0, 40.0, 50.0]);
        // Destroy serials 3 and 4 (values 20, 30).
        s.points.remove(3);
        s.points.remove(2);
        let (filled, flags) = fill_gaps(&s);
        assert_eq!(filled.points.len(), 6);
        assert!(filled.is_gap_free());
        assert_eq!(flags, vec![false, false, true, true, false, false]);
        // Linear between 10 (serial 2) and 40 (serial 5).
        assert!((filled.points[2].minutes - 20.0).abs() < 1e-12);
        assert!((filled.points[3].minutes - 30.0).abs() < 1e-12);
        assert_eq!(filled.points[2].hour_of_day, 2);
    }

    #[test]
    fn fill_gaps_on_gap_free_series_is_identity() {
        let s = test_series(&[5.0, 6.0, 7.0]);
        let (filled, flags) = fill_gaps(&s);
        assert_eq!(filled, s);
        assert!(flags.iter().all(|f| !f));
    }

    #[test]
    fn single_cycle_extracts_clock_ordered_day() {
        let vals: Vec<f64> = (0..72).map(|i| i as f64 / 2.0).collect();
        let s = test_series(&vals);
        let day2 = single_cycle(&s, 2).unwrap();
        for (h, v) in day2.iter().enumerate() {
            assert_eq!(*v, (24 + h) as f64 / 2.0);
        }
        assert!(matches!(single_cycle(&s, 100), Err(FilterError::IncompleteDay(100))));
    }

    #[test]
    fn single_cycle_of_one_day_series_is_the_series() {
        let vals: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let s = test_series(&vals);
        let day1 = single_cycle(&s, 1).unwrap();
        assert_eq!(day1.to_vec(), vals);
    }

    #[test]
    fn linearity_before_clamping() {
        let f = design_lowpass(5, 0.4, FirWindow::Hamming).unwrap();
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.7).sin() * 10.0 + 20.0).collect();
        let y: Vec<f64> = (0..40).map(|i| (i as f64 * 0.3).cos() * 5.0 + 15.0).collect();
        let (a, b) = (1.7, -0.4);
        let combo: Vec<f64> = x.iter().zip(&y).map(|(xv, yv)| a * xv + b * yv).collect();
        let lhs = f.convolve_zero_phase(&combo);
        let fx = f.convolve_zero_phase(&x);
        let fy = f.convolve_zero_phase(&y);
        for t in 0..40 {
            assert!((lhs[t] - (a * fx[t] + b * fy[t])).abs() < 1e-10);
        }
    }
}
