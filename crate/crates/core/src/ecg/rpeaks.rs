//! R-peak detection: band-pass, differentiate, square, integrate, then an
//! adaptive threshold with a refractory period, in the style of
//! Pan-Tompkins. All filters are zero-phase so detected peaks line up with
//! the raw waveform.

use crate::error::{Error, Result};

use super::{EcgWindow, RrSeries};

/// Windows yielding fewer beats than this are rejected as "sparse beats".
pub const MIN_BEATS: usize = 10;

const REFRACTORY_S: f64 = 0.250;
const INTEGRATION_S: f64 = 0.150;
/// RR intervals outside this open interval (ms) are artifacts and dropped.
const RR_MIN_MS: f64 = 200.0;
const RR_MAX_MS: f64 = 3000.0;

/// Centered moving average with an odd window (zero phase lag).
fn moving_average(x: &[f64], half: usize) -> Vec<f64> {
    let n = x.len();
    // prefix sums for O(n)
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + x[i];
    }
    (0..n)
        .map(|i| {
            let a = i.saturating_sub(half);
            let b = (i + half + 1).min(n);
            (prefix[b] - prefix[a]) / (b - a) as f64
        })
        .collect()
}

/// Approximate 5-15 Hz band-pass as a difference of two moving averages:
/// a short one tracking the QRS band and a long one removing baseline drift.
fn bandpass(x: &[f64], fs: f64) -> Vec<f64> {
    let short_half = ((fs / 15.0 / 2.0).round() as usize).max(1); // ~9 samples at 130 Hz
    let long_half = ((fs / 5.0 / 2.0).round() as usize).max(short_half + 1); // ~26 samples
    let short = moving_average(x, short_half);
    let long = moving_average(x, long_half);
    short.iter().zip(long.iter()).map(|(s, l)| s - l).collect()
}

/// 5-point central derivative.
fn derivative(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut out = vec![0.0; n];
    for i in 2..n.saturating_sub(2) {
        out[i] = (-x[i - 2] - 2.0 * x[i - 1] + 2.0 * x[i + 1] + x[i + 2]) / 8.0;
    }
    out
}

/// Detected R-peak sample indices within the window.
pub fn detect_rpeak_indices(w: &EcgWindow) -> Result<Vec<usize>> {
    let n = w.samples.len();
    if n == 0 {
        return Err(Error::rejected("sparse beats: empty window"));
    }
    let filtered = bandpass(&w.samples, w.fs);
    let deriv = derivative(&filtered);
    let squared: Vec<f64> = deriv.iter().map(|d| d * d).collect();
    let integ_half = ((INTEGRATION_S * w.fs / 2.0).round() as usize).max(1);
    let integ = moving_average(&squared, integ_half);

    // threshold bootstrap from the first two seconds
    let init_len = ((2.0 * w.fs) as usize).min(n);
    let init_max = integ[..init_len].iter().cloned().fold(0.0f64, f64::max);
    let mut spki = 0.25 * init_max;
    let mut npki = 0.125 * init_max;
    let refractory = (REFRACTORY_S * w.fs).round() as usize;
    let t_zone = (0.360 * w.fs).round() as usize;

    let mut candidates: Vec<usize> = Vec::new();
    let mut last_peak: Option<usize> = None;
    let mut last_height = init_max;
    for i in 1..n.saturating_sub(1) {
        let is_local_max = integ[i] > integ[i - 1] && integ[i] >= integ[i + 1];
        if !is_local_max {
            continue;
        }
        // the floor keeps the threshold tied to the running signal level even
        // when long quiet stretches decay the noise estimate toward zero
        let threshold = (npki + 0.25 * (spki - npki)).max(0.4 * spki);
        let in_refractory = last_peak.is_some_and(|p| i - p < refractory);
        // a peak shortly after the last beat at under half its height is a
        // T wave, not a QRS
        let t_wave = last_peak.is_some_and(|p| i - p < t_zone) && integ[i] < 0.5 * last_height;
        if integ[i] > threshold && !in_refractory && !t_wave {
            candidates.push(i);
            last_peak = Some(i);
            last_height = integ[i];
            spki = 0.125 * integ[i] + 0.875 * spki;
        } else if !in_refractory {
            npki = 0.125 * integ[i] + 0.875 * npki;
        }
    }

    // snap each candidate to the raw-signal maximum nearby (about 100 ms)
    let snap = (0.100 * w.fs).round() as usize;
    let mut peaks: Vec<usize> = Vec::with_capacity(candidates.len());
    for c in candidates {
        let a = c.saturating_sub(snap);
        let b = (c + snap + 1).min(n);
        let best = (a..b)
            .max_by(|&i, &j| {
                w.samples[i]
                    .partial_cmp(&w.samples[j])
                    .expect("finite samples")
            })
            .expect("non-empty range");
        if peaks.last().is_none_or(|&p| best > p + refractory / 2) {
            peaks.push(best);
        }
    }

    if peaks.len() < MIN_BEATS {
        return Err(Error::rejected(format!(
            "sparse beats: {} detected, need {MIN_BEATS}",
            peaks.len()
        )));
    }
    Ok(peaks)
}

/// Beat-to-beat intervals in milliseconds, with gaps outside (200, 3000) ms
/// dropped as artifacts.
pub fn detect_rpeaks(w: &EcgWindow) -> Result<RrSeries> {
    let peaks = detect_rpeak_indices(w)?;
    let intervals: Vec<f64> = peaks
        .windows(2)
        .map(|p| (p[1] - p[0]) as f64 / w.fs * 1000.0)
        .filter(|&rr| rr > RR_MIN_MS && rr < RR_MAX_MS)
        .collect();
    Ok(RrSeries {
        patient_id: w.patient_id.clone(),
        window_start: w.window_start,
        intervals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohortsim;
    use chrono::NaiveDate;

    fn window_from(samples: &[f32]) -> EcgWindow {
        EcgWindow {
            patient_id: "p".into(),
            window_start: NaiveDate::from_ymd_opt(2024, 1, 1)
                .unwrap()
                .and_hms_opt(9, 0, 0)
                .unwrap(),
            fs: 130.0,
            samples: samples.iter().map(|&s| s as f64).collect(),
            quality: 1.0,
        }
    }

    #[test]
    fn constant_60_bpm_yields_one_second_intervals() {
        let ecg = cohortsim::synthesize_ecg_fixed_rate(60.0, 300.0, 130.0, 5).unwrap();
        let w = window_from(&ecg.samples[..39_000]);
        let rr = detect_rpeaks(&w).unwrap();
        let n = rr.intervals.len() as i64;
        assert!(
            (n - 299).abs() <= 2,
            "got {n} intervals, expected 299 +/- 2"
        );
        for &iv in &rr.intervals {
            assert!(
                (iv - 1000.0).abs() <= 20.0,
                "interval {iv} ms outside 1000 +/- 20"
            );
        }
    }

    #[test]
    fn all_zero_window_is_sparse() {
        let w = window_from(&vec![0.0f32; 39_000]);
        let err = detect_rpeaks(&w).unwrap_err();
        assert!(err.is_rejection());
        assert!(err.to_string().contains("sparse beats"));
    }

    #[test]
    fn detected_sdnn_tracks_planted_sdnn() {
        for stress in [0.1, 0.5, 0.9] {
            let ecg = cohortsim::synthesize_ecg(stress, 300.0, 130.0, 21).unwrap();
            let w = window_from(&ecg.samples[..39_000]);
            let rr = detect_rpeaks(&w).unwrap();
            let sdnn = |xs: &[f64]| {
                let m = xs.iter().sum::<f64>() / xs.len() as f64;
                (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
            };
            // compare against the generator's planted RR series over the same span
            let span_ms = 300.0 * 1000.0;
            let mut planted: Vec<f64> = Vec::new();
            let mut t = 0.0;
            for &rr_ms in &ecg.rr_ms {
                t += rr_ms;
                if t > span_ms {
                    break;
                }
                planted.push(rr_ms);
            }
            let truth = sdnn(&planted);
            let got = sdnn(&rr.intervals);
            assert!(
                (got - truth).abs() <= 0.15 * truth,
                "stress {stress}: detected SDNN {got:.2} vs planted {truth:.2}"
            );
        }
    }

    #[test]
    fn planted_peaks_are_recovered_within_50ms() {
        let ecg = cohortsim::synthesize_ecg(0.4, 300.0, 130.0, 33).unwrap();
        let w = window_from(&ecg.samples[..39_000]);
        assert!(w.quality >= 0.0);
        let peaks = detect_rpeak_indices(&w).unwrap();
        let tol = (0.050f64 * 130.0).round() as i64; // +/- 50 ms in samples
        let planted: Vec<i64> = ecg
            .peak_indices
            .iter()
            .filter(|&&p| p < 39_000)
            .map(|&p| p as i64)
            .collect();
        let matched = planted
            .iter()
            .filter(|&&p| peaks.iter().any(|&q| (q as i64 - p).abs() <= tol))
            .count();
        let rate = matched as f64 / planted.len() as f64;
        assert!(rate >= 0.95, "matched only {:.1}%", rate * 100.0);
    }
}
