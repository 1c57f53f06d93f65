//! The four ECG visual representations. All rasters are 224x224 with pixels
//! in [0,1], rendered without axes or margins.

use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{self, InstanceImage, Modality, ViewKind, RASTER_SIZE};

use super::{EcgWindow, RrSeries};

// STFT defaults (config-exposed)
pub const STFT_WINDOW: usize = 256;
pub const STFT_HOP: usize = 128;
pub const SPEC_MAX_HZ: f64 = 40.0;

// CWT defaults
pub const MORLET_CENTER: f64 = 6.0;
pub const CWT_SCALES: usize = 64;
pub const CWT_MIN_HZ: f64 = 0.5;
pub const CWT_MAX_HZ: f64 = 40.0;

// Poincare axes, milliseconds
pub const POINCARE_MIN_MS: f64 = 300.0;
pub const POINCARE_MAX_MS: f64 = 1500.0;

/// Tunable time-frequency parameters of the spectrogram and scalogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EcgViewConfig {
    pub stft_window: usize,
    pub stft_hop: usize,
    pub spec_max_hz: f64,
    pub morlet_center: f64,
    pub cwt_scales: usize,
    pub cwt_min_hz: f64,
    pub cwt_max_hz: f64,
}

impl Default for EcgViewConfig {
    fn default() -> Self {
        EcgViewConfig {
            stft_window: STFT_WINDOW,
            stft_hop: STFT_HOP,
            spec_max_hz: SPEC_MAX_HZ,
            morlet_center: MORLET_CENTER,
            cwt_scales: CWT_SCALES,
            cwt_min_hz: CWT_MIN_HZ,
            cwt_max_hz: CWT_MAX_HZ,
        }
    }
}

/// Unthresholded recurrence matrix of the anti-aliased 224-sample decimation:
/// R[i,j] = |x_i - x_j| rescaled by the maximum distance (zero diagonal by
/// construction). A constant signal yields an all-zero image.
pub fn recurrence_plot(w: &EcgWindow) -> InstanceImage {
    let x = raster::block_mean_decimate(&w.samples, RASTER_SIZE);
    let mut pixels = Array2::zeros((RASTER_SIZE, RASTER_SIZE));
    let mut max_d = 0.0f64;
    for i in 0..RASTER_SIZE {
        for j in (i + 1)..RASTER_SIZE {
            let d = (x[i] - x[j]).abs();
            pixels[[i, j]] = d;
            pixels[[j, i]] = d;
            max_d = max_d.max(d);
        }
    }
    if max_d > 0.0 {
        pixels.mapv_inplace(|v| v / max_d);
    }
    InstanceImage::new(
        pixels,
        Modality::Ecg,
        ViewKind::Recurrence,
        w.window_start,
        w.patient_id.clone(),
    )
}

/// Log-magnitude STFT with the default parameters.
pub fn spectrogram(w: &EcgWindow) -> InstanceImage {
    spectrogram_cfg(w, &EcgViewConfig::default())
}

/// Log-magnitude STFT (periodic Hann window), rows limited to 0-40 Hz with
/// row 0 the lowest frequency, bilinearly resampled and min-max rescaled.
pub fn spectrogram_cfg(w: &EcgWindow, cfg: &EcgViewConfig) -> InstanceImage {
    let n = w.samples.len();
    let win = cfg.stft_window;
    let hop = cfg.stft_hop;
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(win);
    let hann: Vec<f64> = (0..win)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos()))
        .collect();

    let n_frames = if n >= win { (n - win) / hop + 1 } else { 0 };
    let max_bin = (cfg.spec_max_hz * win as f64 / w.fs).floor() as usize; // inclusive
    let n_rows = max_bin + 1;

    let mut mag = Array2::zeros((n_rows.max(1), n_frames.max(1)));
    let mut buf = vec![Complex::new(0.0, 0.0); win];
    for frame in 0..n_frames {
        let off = frame * hop;
        for i in 0..win {
            buf[i] = Complex::new(w.samples[off + i] * hann[i], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..n_rows {
            mag[[k, frame]] = (1.0 + buf[k].norm()).ln();
        }
    }

    let mut pixels = raster::bilinear_resize(&mag, RASTER_SIZE, RASTER_SIZE);
    raster::minmax_rescale(&mut pixels);
    InstanceImage::new(
        pixels,
        Modality::Ecg,
        ViewKind::Spectrogram,
        w.window_start,
        w.patient_id.clone(),
    )
}

/// The log-spaced analysis frequencies of the scalogram, ascending.
pub fn scalogram_frequencies() -> Vec<f64> {
    scalogram_frequencies_cfg(&EcgViewConfig::default())
}

pub fn scalogram_frequencies_cfg(cfg: &EcgViewConfig) -> Vec<f64> {
    (0..cfg.cwt_scales)
        .map(|j| {
            cfg.cwt_min_hz
                * (cfg.cwt_max_hz / cfg.cwt_min_hz).powf(j as f64 / (cfg.cwt_scales - 1) as f64)
        })
        .collect()
}

/// Morlet scalogram with the default parameters.
pub fn scalogram(w: &EcgWindow) -> InstanceImage {
    scalogram_cfg(w, &EcgViewConfig::default())
}

/// Morlet continuous wavelet transform magnitude: log-spaced scales
/// covering 0.5-40 Hz (row 0 the lowest frequency), log-compressed,
/// resampled to 224x224, min-max rescaled. Coefficients are evaluated at
/// 224 evenly spaced time positions; kernels are truncated at |t| <= 4
/// wavelet widths.
pub fn scalogram_cfg(w: &EcgWindow, cfg: &EcgViewConfig) -> InstanceImage {
    let n = w.samples.len();
    let freqs = scalogram_frequencies_cfg(cfg);

    // per-scale sampled kernels conj(psi(k/a))/sqrt(a), k integer
    let norm = std::f64::consts::PI.powf(-0.25);
    let kernels: Vec<(usize, Vec<Complex<f64>>)> = freqs
        .iter()
        .map(|&f| {
            let a = cfg.morlet_center * w.fs / (2.0 * std::f64::consts::PI * f);
            let half = (4.0 * a).ceil() as usize;
            let kernel: Vec<Complex<f64>> = (-(half as i64)..=half as i64)
                .map(|k| {
                    let t = k as f64 / a;
                    let gauss = (-0.5 * t * t).exp();
                    let phase = cfg.morlet_center * t;
                    Complex::new(phase.cos(), -phase.sin()) * (norm * gauss / a.sqrt())
                })
                .collect();
            (half, kernel)
        })
        .collect();

    let mut mag = Array2::zeros((cfg.cwt_scales, RASTER_SIZE));
    for (row, (half, kernel)) in kernels.iter().enumerate() {
        for (col, cell) in mag.row_mut(row).iter_mut().enumerate() {
            let b = ((col as f64 + 0.5) * n as f64 / RASTER_SIZE as f64) as i64;
            let mut acc = Complex::new(0.0, 0.0);
            let lo = (b - *half as i64).max(0);
            let hi = (b + *half as i64).min(n as i64 - 1);
            for k in lo..=hi {
                let tap = kernel[(k - b + *half as i64) as usize];
                acc += tap * w.samples[k as usize];
            }
            *cell = (1.0 + acc.norm()).ln();
        }
    }

    let mut pixels = raster::bilinear_resize(&mag, RASTER_SIZE, RASTER_SIZE);
    raster::minmax_rescale(&mut pixels);
    InstanceImage::new(
        pixels,
        Modality::Ecg,
        ViewKind::Scalogram,
        w.window_start,
        w.patient_id.clone(),
    )
}

/// Bin index on the fixed [300, 1500] ms Poincare axis; out-of-range values
/// clip to the edge bins.
fn poincare_bin(rr_ms: f64) -> usize {
    let t = (rr_ms - POINCARE_MIN_MS) / (POINCARE_MAX_MS - POINCARE_MIN_MS);
    ((t * RASTER_SIZE as f64).floor() as i64).clamp(0, RASTER_SIZE as i64 - 1) as usize
}

/// Raw 2-D histogram of successive-interval pairs; row = RR_{n+1} bin,
/// column = RR_n bin. Exposed so tests can count pairs before compression.
pub fn poincare_pair_counts(rr: &RrSeries) -> Array2<u32> {
    let mut counts = Array2::zeros((RASTER_SIZE, RASTER_SIZE));
    for pair in rr.intervals.windows(2) {
        let col = poincare_bin(pair[0]);
        let row = poincare_bin(pair[1]);
        counts[[row, col]] += 1;
    }
    counts
}

/// Center RR value (ms) of a Poincare bin, the inverse of the binning map.
pub fn poincare_frequencies(bin: usize) -> f64 {
    POINCARE_MIN_MS + (bin as f64 + 0.5) / RASTER_SIZE as f64 * (POINCARE_MAX_MS - POINCARE_MIN_MS)
}

/// Log-compressed 2-D histogram of (RR_n, RR_{n+1}) pairs on fixed axes.
/// Needs at least 10 intervals.
pub fn poincare_plot(rr: &RrSeries) -> Result<InstanceImage> {
    if rr.intervals.len() < 10 {
        return Err(Error::rejected(format!(
            "poincare: {} intervals, need 10",
            rr.intervals.len()
        )));
    }
    let counts = poincare_pair_counts(rr);
    let mut pixels = counts.mapv(|c| (1.0 + c as f64).ln());
    raster::minmax_rescale(&mut pixels);
    Ok(InstanceImage::new(
        pixels,
        Modality::Ecg,
        ViewKind::Poincare,
        rr.window_start,
        rr.patient_id.clone(),
    ))
}
