//! ECG windowing, signal-quality gating, R-peak detection, and the four
//! ECG visual representations.

mod rpeaks;
mod views;

pub use rpeaks::{detect_rpeak_indices, detect_rpeaks, MIN_BEATS};
pub use views::{
    poincare_frequencies, poincare_pair_counts, poincare_plot, recurrence_plot, scalogram,
    scalogram_cfg, scalogram_frequencies, scalogram_frequencies_cfg, spectrogram, spectrogram_cfg,
    EcgViewConfig,
};

use chrono::{Duration, NaiveDateTime};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Window length in seconds; shorter trailing remainders are discarded.
pub const WINDOW_SECONDS: f64 = 300.0;

/// Default minimum quality for a window to enter the pipeline.
pub const DEFAULT_QUALITY_THRESHOLD: f64 = 0.4;

/// A raw chest-strap recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcgRecording {
    pub patient_id: String,
    pub start_time: NaiveDateTime,
    /// Sampling rate in Hz (130 for the target device).
    pub fs: f64,
    /// Millivolts.
    pub samples: Vec<f32>,
}

impl EcgRecording {
    pub fn validate(&self) -> Result<()> {
        if self.fs <= 0.0 {
            return Err(Error::data("fs must be positive"));
        }
        if self.samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::data("non-finite ECG sample"));
        }
        Ok(())
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.fs
    }
}

/// One non-overlapping 5-minute window with its quality index.
#[derive(Debug, Clone)]
pub struct EcgWindow {
    pub patient_id: String,
    pub window_start: NaiveDateTime,
    pub fs: f64,
    pub samples: Vec<f64>,
    pub quality: f64,
}

/// Beat-to-beat intervals extracted from one window, in milliseconds.
#[derive(Debug, Clone, PartialEq)]
pub struct RrSeries {
    pub patient_id: String,
    pub window_start: NaiveDateTime,
    pub intervals: Vec<f64>,
}

/// Cuts a recording into consecutive non-overlapping 5-minute windows
/// starting at `start_time`; a trailing remainder shorter than 5 minutes is
/// dropped. An empty recording yields an empty list.
pub fn segment_ecg(rec: &EcgRecording) -> Result<Vec<EcgWindow>> {
    rec.validate()?;
    let win_len = (WINDOW_SECONDS * rec.fs).round() as usize;
    let n_windows = rec.samples.len() / win_len;
    let mut out = Vec::with_capacity(n_windows);
    for k in 0..n_windows {
        let samples: Vec<f64> = rec.samples[k * win_len..(k + 1) * win_len]
            .iter()
            .map(|&s| s as f64)
            .collect();
        let mut w = EcgWindow {
            patient_id: rec.patient_id.clone(),
            window_start: rec.start_time
                + Duration::milliseconds((k as f64 * WINDOW_SECONDS * 1000.0) as i64),
            fs: rec.fs,
            samples,
            quality: 0.0,
        };
        w.quality = assess_quality(&w);
        out.push(w);
    }
    Ok(out)
}

/// Composite signal-quality index: mean of
///   (a) QRS-band power ratio (5-15 Hz over 0.5-40 Hz),
///   (b) 1 - flatline fraction (identical-sample runs of at least 0.5 s),
///   (c) 1 - clipping fraction (samples pinned at the window min/max),
/// each clamped to [0,1].
pub fn assess_quality(w: &EcgWindow) -> f64 {
    let (a, b, c) = quality_components(w);
    (a + b + c) / 3.0
}

/// The three SQI components, exposed for inspection and tests.
pub fn quality_components(w: &EcgWindow) -> (f64, f64, f64) {
    let n = w.samples.len();
    if n == 0 {
        return (0.0, 0.0, 0.0);
    }

    // (a) periodogram band-power ratio
    let mut buf: Vec<Complex<f64>> = w.samples.iter().map(|&s| Complex::new(s, 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    let df = w.fs / n as f64;
    let mut qrs_power = 0.0;
    let mut total_power = 0.0;
    for (k, v) in buf.iter().enumerate().take(n / 2 + 1) {
        let f = k as f64 * df;
        let p = v.norm_sqr();
        if (0.5..=40.0).contains(&f) {
            total_power += p;
            if (5.0..=15.0).contains(&f) {
                qrs_power += p;
            }
        }
    }
    let a = if total_power > 0.0 {
        (qrs_power / total_power).clamp(0.0, 1.0)
    } else {
        0.0
    };

    // (b) flatline fraction
    let min_run = (0.5 * w.fs).ceil() as usize;
    let mut flat = 0usize;
    let mut run = 1usize;
    for i in 1..=n {
        if i < n && w.samples[i] == w.samples[i - 1] {
            run += 1;
        } else {
            if run >= min_run {
                flat += run;
            }
            run = 1;
        }
    }
    let b = (1.0 - flat as f64 / n as f64).clamp(0.0, 1.0);

    // (c) clipping fraction
    let lo = w.samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = w.samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let clipped = w.samples.iter().filter(|&&s| s == lo || s == hi).count();
    let c = (1.0 - clipped as f64 / n as f64).clamp(0.0, 1.0);

    (a, b, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohortsim;
    use chrono::NaiveDate;

    fn start() -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2024, 1, 1)
            .unwrap()
            .and_hms_opt(9, 0, 0)
            .unwrap()
    }

    fn recording(duration_s: f64) -> EcgRecording {
        let n = (duration_s * 130.0).round() as usize;
        EcgRecording {
            patient_id: "p".into(),
            start_time: start(),
            fs: 130.0,
            samples: (0..n).map(|i| ((i as f32) * 0.1).sin()).collect(),
        }
    }

    #[test]
    fn thirty_minutes_gives_six_windows() {
        let windows = segment_ecg(&recording(1800.0)).unwrap();
        assert_eq!(windows.len(), 6);
        assert!(windows.iter().all(|w| w.samples.len() == 39_000));
        // windows tile the recording: window k starts at +300k seconds
        for (k, w) in windows.iter().enumerate() {
            assert_eq!(w.window_start, start() + Duration::seconds(300 * k as i64));
        }
    }

    #[test]
    fn four_minutes_gives_none() {
        assert!(segment_ecg(&recording(240.0)).unwrap().is_empty());
    }

    #[test]
    fn trailing_remainder_is_dropped() {
        // 12.5 minutes -> 2 windows, last 2.5 min discarded
        let windows = segment_ecg(&recording(750.0)).unwrap();
        assert_eq!(windows.len(), 2);
    }

    #[test]
    fn empty_recording_is_empty_list() {
        let rec = EcgRecording {
            patient_id: "p".into(),
            start_time: start(),
            fs: 130.0,
            samples: vec![],
        };
        assert!(segment_ecg(&rec).unwrap().is_empty());
    }

    fn window_of(samples: Vec<f64>) -> EcgWindow {
        EcgWindow {
            patient_id: "p".into(),
            window_start: start(),
            fs: 130.0,
            samples,
            quality: 0.0,
        }
    }

    #[test]
    fn all_zero_window_has_zero_flatline_component() {
        let w = window_of(vec![0.0; 39_000]);
        let (_, b, _) = quality_components(&w);
        assert_eq!(b, 0.0);
    }

    #[test]
    fn clean_synthetic_ecg_scores_at_least_half() {
        let ecg = cohortsim::synthesize_ecg(0.3, 300.0, 130.0, 11).unwrap();
        let w = window_of(ecg.samples.iter().map(|&s| s as f64).collect());
        let q = assess_quality(&w);
        assert!(q >= 0.5, "clean ECG quality {q} below 0.5");
    }

    #[test]
    fn white_noise_scores_below_clean_ecg() {
        use rand::Rng;
        let ecg = cohortsim::synthesize_ecg(0.3, 300.0, 130.0, 11).unwrap();
        let clean = window_of(ecg.samples.iter().map(|&s| s as f64).collect());
        let mut rng = crate::seed::rng_from(99);
        let noise = window_of((0..39_000).map(|_| rng.gen_range(-1.0..1.0)).collect());
        assert!(assess_quality(&noise) < assess_quality(&clean));
    }
}
