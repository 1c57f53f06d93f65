//! Instance embedding: two sub-encoder branches, each layer-normalized and
//! modulated by a bounded gate, concatenated and normalized again into a
//! 192-d vector. The pretrained backbones are replaced by a deterministic
//! seeded random-projection reference encoder; real backbones can be
//! plugged in through the `SubEncoder` trait or the external ingestion
//! format below.

use chrono::NaiveDateTime;
use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::{InstanceImage, Modality, RASTER_SIZE};
use crate::seed::{derive_seed, rng_from};

/// Per-branch output dimension.
pub const SUB_DIM: usize = 96;
/// Final embedding dimension (two concatenated branches).
pub const EMBED_DIM: usize = 2 * SUB_DIM;
/// Pooled input dimension of the reference projection (56x56).
const POOLED_DIM: usize = (RASTER_SIZE / 4) * (RASTER_SIZE / 4);

pub const LN_EPS: f64 = 1e-5;

/// One instance embedding with its bag-assembly metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    /// Exactly EMBED_DIM values.
    pub values: Vec<f32>,
    pub modality: Modality,
    pub instant: NaiveDateTime,
    pub patient_id: String,
}

/// Layer normalization without learned affine terms: (x - mean) / sqrt(var + eps),
/// population variance.
pub fn layer_norm(x: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let denom = (var + eps).sqrt();
    x.iter().map(|v| (v - mean) / denom).collect()
}

/// Weights of one gating branch: ELU -> linear -> Hardtanh(0,1).
#[derive(Debug, Clone)]
pub struct GateParams {
    /// SUB_DIM x SUB_DIM.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl GateParams {
    /// Seeded random gate for the reference configuration: small uniform
    /// weights, bias 0.5 so an untrained gate passes roughly half the signal.
    pub fn seeded(seed: u64) -> Self {
        let mut rng = rng_from(seed);
        let bound = 1.0 / (SUB_DIM as f64).sqrt();
        let weights = Array2::from_shape_fn((SUB_DIM, SUB_DIM), |_| rng.gen_range(-bound..=bound));
        GateParams {
            weights,
            bias: Array1::from_elem(SUB_DIM, 0.5),
        }
    }

    pub fn constant(w: f64, b: f64) -> Self {
        GateParams {
            weights: Array2::from_elem((SUB_DIM, SUB_DIM), w),
            bias: Array1::from_elem(SUB_DIM, b),
        }
    }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// Bounded per-dimension modulation: clamp(W * ELU(z) + b, 0, 1).
pub fn gate(z: &[f64], p: &GateParams) -> Vec<f64> {
    let activated = Array1::from_iter(z.iter().map(|&v| elu(v)));
    let lin = p.weights.dot(&activated) + &p.bias;
    lin.iter().map(|&v| v.clamp(0.0, 1.0)).collect()
}

/// An image-to-96-d function with a stable identity; same image and seed
/// must give the same output.
pub trait SubEncoder: Send + Sync {
    fn encode(&self, pixels: &Array2<f64>) -> Vec<f64>;
    fn id(&self) -> String;
}

/// Deterministic stand-in for a pretrained backbone: 4x4 average pooling,
/// a fixed seeded sign projection (entries +/- 1/sqrt(3136)), then tanh.
pub struct ReferenceSubEncoder {
    seed: u64,
    projection: Array2<f64>,
}

impl ReferenceSubEncoder {
    pub fn new(seed: u64) -> Self {
        let mut rng = rng_from(derive_seed(seed, &["reference-projection"]));
        let scale = 1.0 / (POOLED_DIM as f64).sqrt();
        let projection = Array2::from_shape_fn((SUB_DIM, POOLED_DIM), |_| {
            if rng.gen::<bool>() {
                scale
            } else {
                -scale
            }
        });
        ReferenceSubEncoder { seed, projection }
    }
}

fn average_pool_4x4(pixels: &Array2<f64>) -> Array1<f64> {
    let side = RASTER_SIZE / 4;
    let mut pooled = Array1::zeros(side * side);
    for r in 0..side {
        for c in 0..side {
            let mut sum = 0.0;
            for dr in 0..4 {
                for dc in 0..4 {
                    sum += pixels[[4 * r + dr, 4 * c + dc]];
                }
            }
            pooled[r * side + c] = sum / 16.0;
        }
    }
    pooled
}

impl SubEncoder for ReferenceSubEncoder {
    fn encode(&self, pixels: &Array2<f64>) -> Vec<f64> {
        let pooled = average_pool_4x4(pixels);
        self.projection
            .dot(&pooled)
            .iter()
            .map(|&v| v.tanh())
            .collect()
    }

    fn id(&self) -> String {
        format!("reference-v1:{}", self.seed)
    }
}

/// One-shot form of the reference sub-encoder.
pub fn reference_subencoder(pixels: &Array2<f64>, seed: u64) -> Vec<f64> {
    ReferenceSubEncoder::new(seed).encode(pixels)
}

/// The dual-branch fusion: z_k = enc_k(LN_img(x)); branches are
/// layer-normalized, gated, concatenated, and normalized once more.
pub struct FusionEncoder {
    pub enc1: Box<dyn SubEncoder>,
    pub enc2: Box<dyn SubEncoder>,
    pub gate1: GateParams,
    pub gate2: GateParams,
}

impl FusionEncoder {
    /// Reference configuration: both branches and both gates seeded from
    /// one encoder seed.
    pub fn reference(seed: u64) -> Self {
        FusionEncoder {
            enc1: Box::new(ReferenceSubEncoder::new(derive_seed(
                seed,
                &["branch", "1"],
            ))),
            enc2: Box::new(ReferenceSubEncoder::new(derive_seed(
                seed,
                &["branch", "2"],
            ))),
            gate1: GateParams::seeded(derive_seed(seed, &["gate", "1"])),
            gate2: GateParams::seeded(derive_seed(seed, &["gate", "2"])),
        }
    }

    pub fn encode_instance(&self, img: &InstanceImage) -> Result<Embedding> {
        let e = encode_instance(
            img,
            self.enc1.as_ref(),
            self.enc2.as_ref(),
            &self.gate1,
            &self.gate2,
        )?;
        Ok(e)
    }
}

/// Gated dual-branch embedding of one instance. The embedding is a pure function
/// of (pixels, sub-encoders, gates); modality and patient metadata are
/// copied through untouched.
pub fn encode_instance(
    img: &InstanceImage,
    enc1: &dyn SubEncoder,
    enc2: &dyn SubEncoder,
    gate1: &GateParams,
    gate2: &GateParams,
) -> Result<Embedding> {
    let flat: Vec<f64> = img.pixels.iter().copied().collect();
    let normed_flat = layer_norm(&flat, LN_EPS);
    let normed =
        Array2::from_shape_vec((RASTER_SIZE, RASTER_SIZE), normed_flat).expect("shape preserved");

    let branch = |enc: &dyn SubEncoder, gp: &GateParams| -> Result<Vec<f64>> {
        let z = enc.encode(&normed);
        if z.len() != SUB_DIM {
            return Err(Error::Config(format!(
                "sub-encoder {} produced {} dims, expected {SUB_DIM}",
                enc.id(),
                z.len()
            )));
        }
        let normed_z = layer_norm(&z, LN_EPS);
        let g = gate(&z, gp);
        Ok(normed_z.iter().zip(g.iter()).map(|(a, b)| a * b).collect())
    };

    let z1 = branch(enc1, gate1)?;
    let z2 = branch(enc2, gate2)?;
    let mut concat = z1;
    concat.extend(z2);
    let e = layer_norm(&concat, LN_EPS);
    Ok(Embedding {
        values: e.iter().map(|&v| v as f32).collect(),
        modality: img.modality,
        instant: img.instant,
        patient_id: img.patient_id.clone(),
    })
}

// ── External encoder ingestion ─────────────────────────────────────────────

/// Sidecar of an externally produced embedding matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSidecar {
    pub n: usize,
    pub d: usize,
    pub encoder_id: String,
}

/// Writes an n x d f32 matrix (little-endian, row-major) with a JSON sidecar
/// at `<path>.json`.
pub fn write_embedding_matrix(path: &Path, rows: &[Vec<f32>], encoder_id: &str) -> Result<()> {
    let d = rows.first().map(|r| r.len()).unwrap_or(SUB_DIM);
    let mut bytes = Vec::with_capacity(rows.len() * d * 4);
    for row in rows {
        if row.len() != d {
            return Err(Error::invalid("ragged embedding matrix"));
        }
        for v in row {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes)?;
    let sidecar = EmbeddingSidecar {
        n: rows.len(),
        d,
        encoder_id: encoder_id.to_string(),
    };
    std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    std::path::PathBuf::from(s)
}

/// Reads a matrix written by an external encoder process, validating the
/// sidecar against the payload size.
pub fn read_embedding_matrix(path: &Path) -> Result<(Vec<Vec<f32>>, EmbeddingSidecar)> {
    let sidecar: EmbeddingSidecar = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)?;
    let bytes = std::fs::read(path)?;
    let expected = sidecar.n * sidecar.d * 4;
    if bytes.len() != expected {
        return Err(Error::Format {
            msg: format!(
                "embedding matrix is {} bytes, sidecar implies {expected}",
                bytes.len()
            ),
            offset: bytes.len().min(expected) as u64,
        });
    }
    let mut rows = Vec::with_capacity(sidecar.n);
    for i in 0..sidecar.n {
        let row: Vec<f32> = bytes[i * sidecar.d * 4..(i + 1) * sidecar.d * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        rows.push(row);
    }
    Ok((rows, sidecar))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::ViewKind;
    use chrono::NaiveDate;
    use ndarray::Array2;

    fn image_of(pixels: Array2<f64>) -> InstanceImage {
        InstanceImage::new(
            pixels,
            Modality::Ecg,
            ViewKind::Recurrence,
            NaiveDate::from_ymd_opt(2024, 1, 1)
                .unwrap()
                .and_hms_opt(9, 0, 0)
                .unwrap(),
            "p",
        )
    }

    #[test]
    fn layer_norm_centers_constant_input() {
        let out = layer_norm(&[1.0, 1.0, 1.0, 1.0], 1e-5);
        assert!(out.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn layer_norm_of_two_points_is_near_unit() {
        let out = layer_norm(&[0.0, 2.0], 1e-5);
        assert!((out[0] + 1.0).abs() < 1e-4);
        assert!((out[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_output_mean_is_tiny_and_variance_near_one() {
        let xs = [3.2, -1.5, 0.7, 9.9, -4.4, 2.2];
        let out = layer_norm(&xs, 1e-5);
        let mean: f64 = out.iter().sum::<f64>() / out.len() as f64;
        let var: f64 = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / out.len() as f64;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-3, "variance {var}");
    }

    #[test]
    fn embedding_values_ignore_metadata() {
        let mut rng = rng_from(41);
        let pixels = Array2::from_shape_fn((RASTER_SIZE, RASTER_SIZE), |_| rng.gen_range(0.0..1.0));
        let enc = FusionEncoder::reference(3);
        let a = enc
            .encode_instance(&InstanceImage::new(
                pixels.clone(),
                Modality::Ecg,
                ViewKind::Recurrence,
                NaiveDate::from_ymd_opt(2024, 1, 1)
                    .unwrap()
                    .and_hms_opt(0, 0, 0)
                    .unwrap(),
                "alice",
            ))
            .unwrap();
        let b = enc
            .encode_instance(&InstanceImage::new(
                pixels,
                Modality::Sleep,
                ViewKind::Hypnogram,
                NaiveDate::from_ymd_opt(2030, 6, 15)
                    .unwrap()
                    .and_hms_opt(12, 30, 0)
                    .unwrap(),
                "bob",
            ))
            .unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(b.modality, Modality::Sleep);
        assert_eq!(b.patient_id, "bob");
    }

    #[test]
    fn constant_gate_ignores_input() {
        let p = GateParams::constant(0.0, 0.5);
        let z: Vec<f64> = (0..SUB_DIM).map(|i| i as f64 - 40.0).collect();
        assert!(gate(&z, &p).iter().all(|&g| g == 0.5));
    }

    #[test]
    fn saturated_gate_clamps_to_one() {
        let p = GateParams::constant(0.0, 3.0);
        let z = vec![0.3; SUB_DIM];
        assert!(gate(&z, &p).iter().all(|&g| g == 1.0));
    }

    #[test]
    fn gate_output_is_always_in_unit_interval() {
        let p = GateParams::seeded(11);
        let mut rng = rng_from(5);
        for _ in 0..20 {
            let z: Vec<f64> = (0..SUB_DIM).map(|_| rng.gen_range(-10.0..10.0)).collect();
            assert!(gate(&z, &p).iter().all(|&g| (0.0..=1.0).contains(&g)));
        }
    }

    #[test]
    fn reference_encoder_maps_zero_image_to_zero() {
        let out = reference_subencoder(&Array2::zeros((RASTER_SIZE, RASTER_SIZE)), 3);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reference_encoder_is_odd() {
        let mut rng = rng_from(17);
        let pixels =
            Array2::from_shape_fn((RASTER_SIZE, RASTER_SIZE), |_| rng.gen_range(-1.0..1.0));
        let negated = pixels.mapv(|v| -v);
        let enc = ReferenceSubEncoder::new(9);
        let a = enc.encode(&pixels);
        let b = enc.encode(&negated);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x + y).abs() < 1e-12);
        }
    }

    #[test]
    fn one_block_difference_changes_the_output() {
        let base = Array2::from_elem((RASTER_SIZE, RASTER_SIZE), 0.25);
        let mut bumped = base.clone();
        for r in 0..4 {
            for c in 0..4 {
                bumped[[100 + r, 100 + c]] = 0.9;
            }
        }
        let enc = ReferenceSubEncoder::new(9);
        assert_ne!(enc.encode(&base), enc.encode(&bumped));
    }

    struct IdentityStub;
    impl SubEncoder for IdentityStub {
        fn encode(&self, pixels: &Array2<f64>) -> Vec<f64> {
            // first 96 pooled values, a fixed deterministic stub
            average_pool_4x4(pixels)
                .iter()
                .take(SUB_DIM)
                .copied()
                .collect()
        }
        fn id(&self) -> String {
            "identity-stub".into()
        }
    }

    struct WrongDimStub;
    impl SubEncoder for WrongDimStub {
        fn encode(&self, _pixels: &Array2<f64>) -> Vec<f64> {
            vec![0.0; 17]
        }
        fn id(&self) -> String {
            "wrong-dim".into()
        }
    }

    #[test]
    fn unit_gates_reduce_to_double_layer_norm() {
        let mut rng = rng_from(23);
        let pixels = Array2::from_shape_fn((RASTER_SIZE, RASTER_SIZE), |_| rng.gen_range(0.0..1.0));
        let img = image_of(pixels.clone());
        let ones = GateParams::constant(0.0, 1.0);
        let e = encode_instance(&img, &IdentityStub, &IdentityStub, &ones, &ones).unwrap();

        // oracle: e = LN([LN(z); LN(z)]) with z the stub output of LN_img(x)
        let flat: Vec<f64> = pixels.iter().copied().collect();
        let normed =
            Array2::from_shape_vec((RASTER_SIZE, RASTER_SIZE), layer_norm(&flat, LN_EPS)).unwrap();
        let z: Vec<f64> = IdentityStub.encode(&normed);
        let ln_z = layer_norm(&z, LN_EPS);
        let mut concat = ln_z.clone();
        concat.extend(ln_z);
        let expected = layer_norm(&concat, LN_EPS);
        for (got, want) in e.values.iter().zip(expected.iter()) {
            assert!((*got as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_gate_annihilates_its_branch() {
        let mut rng = rng_from(29);
        let pixels = Array2::from_shape_fn((RASTER_SIZE, RASTER_SIZE), |_| rng.gen_range(0.0..1.0));
        let img = image_of(pixels);
        let zero = GateParams::constant(0.0, 0.0);
        let one = GateParams::constant(0.0, 1.0);
        let e = encode_instance(&img, &IdentityStub, &IdentityStub, &zero, &one).unwrap();
        // pre-LN_out first branch is zero; after the final LN the first 96
        // coordinates are all equal (a shifted constant), i.e. carry nothing
        let first = e.values[0];
        assert!(e.values[..SUB_DIM].iter().all(|&v| v == first));
    }

    #[test]
    fn wrong_sub_encoder_dimension_is_a_config_error() {
        let img = image_of(Array2::zeros((RASTER_SIZE, RASTER_SIZE)));
        let ones = GateParams::constant(0.0, 1.0);
        let err = encode_instance(&img, &WrongDimStub, &IdentityStub, &ones, &ones).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn encoding_is_bit_identical_across_runs_and_threads() {
        let mut rng = rng_from(31);
        let imgs: Vec<InstanceImage> = (0..8)
            .map(|_| {
                image_of(Array2::from_shape_fn((RASTER_SIZE, RASTER_SIZE), |_| {
                    rng.gen_range(0.0..1.0)
                }))
            })
            .collect();
        let enc = FusionEncoder::reference(42);
        let serial: Vec<Embedding> = imgs
            .iter()
            .map(|i| enc.encode_instance(i).unwrap())
            .collect();
        let enc2 = FusionEncoder::reference(42);
        let serial2: Vec<Embedding> = imgs
            .iter()
            .map(|i| enc2.encode_instance(i).unwrap())
            .collect();
        assert_eq!(serial, serial2);
        use rayon::prelude::*;
        let parallel: Vec<Embedding> = imgs
            .par_iter()
            .map(|i| enc.encode_instance(i).unwrap())
            .collect();
        assert_eq!(serial, parallel);
    }

    #[test]
    fn embedding_matrix_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ext.f32");
        let rows: Vec<Vec<f32>> = (0..3)
            .map(|i| (0..SUB_DIM).map(|j| (i * SUB_DIM + j) as f32).collect())
            .collect();
        write_embedding_matrix(&path, &rows, "external-backbone").unwrap();
        let (back, sidecar) = read_embedding_matrix(&path).unwrap();
        assert_eq!(back, rows);
        assert_eq!(sidecar.d, SUB_DIM);
        assert_eq!(sidecar.encoder_id, "external-backbone");
        // corrupt: drop 4 bytes
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            read_embedding_matrix(&path).unwrap_err(),
            Error::Format { .. }
        ));
    }
}
