//! Instance rasters and the shared image-space helpers.
//!
//! Every visual representation in the pipeline is a 224x224 single-channel
//! matrix with pixels in [0,1] and no axes, ticks, or margins. The encoder
//! consumes these matrices directly; PNG export exists for inspection and
//! for the staged CLI hand-off.

use chrono::NaiveDateTime;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};

/// Side length of every instance raster.
pub const RASTER_SIZE: usize = 224;

/// Sensor stream an instance came from. The numeric ids are part of the
/// bag container format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Ecg = 0,
    Activity = 1,
    Sleep = 2,
}

impl Modality {
    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(Modality::Ecg),
            1 => Ok(Modality::Activity),
            2 => Ok(Modality::Sleep),
            other => Err(Error::data(format!("unknown modality id {other}"))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Modality::Ecg => "ecg",
            Modality::Activity => "activity",
            Modality::Sleep => "sleep",
        }
    }
}

/// Which visual representation a raster holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewKind {
    Recurrence,
    Spectrogram,
    Scalogram,
    Poincare,
    ActivityHeatmap,
    SleepHeatmap,
    Hypnogram,
}

impl ViewKind {
    pub fn label(self) -> &'static str {
        match self {
            ViewKind::Recurrence => "recurrence",
            ViewKind::Spectrogram => "spectrogram",
            ViewKind::Scalogram => "scalogram",
            ViewKind::Poincare => "poincare",
            ViewKind::ActivityHeatmap => "activity_heatmap",
            ViewKind::SleepHeatmap => "sleep_heatmap",
            ViewKind::Hypnogram => "hypnogram",
        }
    }
}

/// One visual instance: the atom the MIL bags are built from.
#[derive(Debug, Clone)]
pub struct InstanceImage {
    pub pixels: Array2<f64>,
    pub modality: Modality,
    pub view: ViewKind,
    pub instant: NaiveDateTime,
    pub patient_id: String,
}

impl InstanceImage {
    pub fn new(
        pixels: Array2<f64>,
        modality: Modality,
        view: ViewKind,
        instant: NaiveDateTime,
        patient_id: impl Into<String>,
    ) -> Self {
        debug_assert_eq!(pixels.dim(), (RASTER_SIZE, RASTER_SIZE));
        InstanceImage {
            pixels,
            modality,
            view,
            instant,
            patient_id: patient_id.into(),
        }
    }

    /// All pixels finite and inside [0,1], shape 224x224.
    pub fn validate(&self) -> Result<()> {
        if self.pixels.dim() != (RASTER_SIZE, RASTER_SIZE) {
            return Err(Error::data(format!(
                "raster shape {:?}, expected {}x{}",
                self.pixels.dim(),
                RASTER_SIZE,
                RASTER_SIZE
            )));
        }
        for &p in self.pixels.iter() {
            if !p.is_finite() || !(0.0..=1.0).contains(&p) {
                return Err(Error::data(format!("pixel {p} outside [0,1]")));
            }
        }
        Ok(())
    }
}

// ── Raster math helpers ────────────────────────────────────────────────────

/// Min-max rescale to [0,1] in place. A degenerate range (max == min) maps
/// the whole matrix to 0.5 so the raster stays valid.
pub fn minmax_rescale(m: &mut Array2<f64>) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in m.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi > lo {
        let span = hi - lo;
        m.mapv_inplace(|v| (v - lo) / span);
    } else {
        m.fill(0.5);
    }
}

/// Bilinear resize with corner-aligned sampling: output index i maps to
/// source coordinate i*(src-1)/(dst-1).
pub fn bilinear_resize(src: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    assert!(h > 0 && w > 0 && out_h > 0 && out_w > 0);
    let mut out = Array2::zeros((out_h, out_w));
    let row_scale = if out_h > 1 {
        (h - 1) as f64 / (out_h - 1) as f64
    } else {
        0.0
    };
    let col_scale = if out_w > 1 {
        (w - 1) as f64 / (out_w - 1) as f64
    } else {
        0.0
    };
    for r in 0..out_h {
        let sy = r as f64 * row_scale;
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for c in 0..out_w {
            let sx = c as f64 * col_scale;
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
            let bot = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
            out[[r, c]] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Nearest-neighbor upsample; output index i maps to source floor(i*src/dst),
/// stretching each source cell into a contiguous block.
pub fn nearest_resize(src: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    assert!(h > 0 && w > 0 && out_h > 0 && out_w > 0);
    let mut out = Array2::zeros((out_h, out_w));
    for r in 0..out_h {
        let sy = (r * h) / out_h;
        for c in 0..out_w {
            let sx = (c * w) / out_w;
            out[[r, c]] = src[[sy, sx]];
        }
    }
    out
}

/// Anti-aliased decimation: partitions the input into `out_len` contiguous
/// blocks and takes each block's mean.
pub fn block_mean_decimate(x: &[f64], out_len: usize) -> Vec<f64> {
    assert!(out_len > 0 && !x.is_empty());
    let n = x.len();
    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let a = i * n / out_len;
        let b = (((i + 1) * n) / out_len).max(a + 1).min(n);
        let sum: f64 = x[a..b].iter().sum();
        out.push(sum / (b - a) as f64);
    }
    out
}

// ── PNG import/export ──────────────────────────────────────────────────────

/// Writes the raster as 8-bit grayscale PNG, quantizing round(p*255).
pub fn write_png_gray(path: &Path, pixels: &Array2<f64>) -> Result<()> {
    let (h, w) = pixels.dim();
    let mut buf = Vec::with_capacity(h * w);
    for &p in pixels.iter() {
        let q = (p.clamp(0.0, 1.0) * 255.0).round() as u8;
        buf.push(q);
    }
    let img = image::GrayImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer length matches dimensions");
    img.save(path)
        .map_err(|e| Error::data(format!("png write {}: {e}", path.display())))
}

/// Reads an 8-bit grayscale PNG back into a [0,1] matrix (p = q/255).
pub fn read_png_gray(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::data(format!("png read {}: {e}", path.display())))?
        .into_luma8();
    let (w, h) = img.dimensions();
    let mut out = Array2::zeros((h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        out[[y as usize, x as usize]] = p.0[0] as f64 / 255.0;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rescale_degenerate_range_maps_to_half() {
        let mut m = Array2::from_elem((3, 3), 4.2);
        minmax_rescale(&mut m);
        assert!(m.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn rescale_hits_zero_and_one() {
        let mut m = array![[1.0, 3.0], [5.0, 2.0]];
        minmax_rescale(&mut m);
        assert_eq!(m[[0, 0]], 0.0);
        assert_eq!(m[[1, 0]], 1.0);
        assert!(m.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn nearest_blocks_are_uniform() {
        let src = array![[0.0, 1.0], [2.0, 3.0]];
        let out = nearest_resize(&src, 4, 4);
        assert_eq!(out[[0, 0]], 0.0);
        assert_eq!(out[[0, 1]], 0.0);
        assert_eq!(out[[1, 1]], 0.0);
        assert_eq!(out[[0, 2]], 1.0);
        assert_eq!(out[[3, 3]], 3.0);
    }

    #[test]
    fn bilinear_endpoints_are_exact() {
        let src = array![[0.0, 1.0], [2.0, 3.0]];
        let out = bilinear_resize(&src, 5, 5);
        assert_eq!(out[[0, 0]], 0.0);
        assert_eq!(out[[0, 4]], 1.0);
        assert_eq!(out[[4, 0]], 2.0);
        assert_eq!(out[[4, 4]], 3.0);
        assert!((out[[2, 2]] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn block_mean_preserves_total_mean_for_even_split() {
        let x: Vec<f64> = (0..8).map(|v| v as f64).collect();
        let d = block_mean_decimate(&x, 4);
        assert_eq!(d, vec![0.5, 2.5, 4.5, 6.5]);
    }

    #[test]
    fn png_roundtrip_quantizes_to_8bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.png");
        let mut m = Array2::zeros((16, 16));
        for (i, v) in m.iter_mut().enumerate() {
            *v = (i % 256) as f64 / 255.0;
        }
        write_png_gray(&path, &m).unwrap();
        let back = read_png_gray(&path).unwrap();
        for (a, b) in m.iter().zip(back.iter()) {
            assert!((a - b).abs() < 0.5 / 255.0 + 1e-12);
        }
    }
}
