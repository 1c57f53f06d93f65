//! Patient-horizon bags: leakage-free assembly of embeddings against PSS
//! assessments, instance capping, and the WMB1 bag container.
//!
//! Container layout (documented for external writers):
//!   bytes 0..4   magic "WMB1"
//!   bytes 4..    DEFLATE stream of the body:
//!     u32 LE     header length
//!     JSON       {patient_id, horizon, n, dim, target, instants}
//!     n*dim      little-endian f32 embeddings, row-major
//!     n          modality id bytes

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};
use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::encoder::{Embedding, EMBED_DIM};
use crate::error::{Error, Result};
use crate::raster::Modality;
use crate::seed::{derive_seed, rng_from};

pub const DEFAULT_INSTANCE_CAP: usize = 512;

const MAGIC: &[u8; 4] = b"WMB1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Horizon {
    M3,
    M6,
}

impl Horizon {
    pub fn label(self) -> &'static str {
        match self {
            Horizon::M3 => "m3",
            Horizon::M6 => "m6",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "m3" => Ok(Horizon::M3),
            "m6" => Ok(Horizon::M6),
            other => Err(Error::invalid(format!("unknown horizon '{other}'"))),
        }
    }
}

/// A PSS assessment at one follow-up visit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assessment {
    pub patient_id: String,
    pub horizon: Horizon,
    pub date: NaiveDate,
    pub pss: i32,
}

/// Which data window feeds which label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HorizonSetting {
    /// Instances up to the M3 visit predict the M3 score.
    M3ToM3,
    /// All instances up to the M6 visit (including pre-M3) predict M6.
    AllToM6,
}

impl HorizonSetting {
    pub fn target(self) -> Horizon {
        match self {
            HorizonSetting::M3ToM3 => Horizon::M3,
            HorizonSetting::AllToM6 => Horizon::M6,
        }
    }
}

/// How capping selects the survivors when a bag exceeds the cap.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapPolicy {
    /// Seeded uniform subsample without replacement.
    #[default]
    Uniform,
    /// Keep the most recent instances.
    Latest,
}

/// One unit of supervision: a patient-horizon set of instance embeddings
/// with a single PSS target. Rows of `embeddings` align index-wise with
/// `modality_ids` and `instants`.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub patient_id: String,
    pub horizon: Horizon,
    /// n x EMBED_DIM, row-major.
    pub embeddings: Vec<f32>,
    pub modality_ids: Vec<u8>,
    pub instants: Vec<NaiveDateTime>,
    pub target: f64,
}

impl Bag {
    pub fn len(&self) -> usize {
        self.modality_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modality_ids.is_empty()
    }

    pub fn id(&self) -> String {
        format!("{}:{}", self.patient_id, self.horizon.label())
    }

    pub fn embedding_row(&self, i: usize) -> &[f32] {
        &self.embeddings[i * EMBED_DIM..(i + 1) * EMBED_DIM]
    }

    /// Keeps only the given instance indices, preserving row alignment.
    fn select(&self, indices: &[usize]) -> Bag {
        let mut embeddings = Vec::with_capacity(indices.len() * EMBED_DIM);
        let mut modality_ids = Vec::with_capacity(indices.len());
        let mut instants = Vec::with_capacity(indices.len());
        for &i in indices {
            embeddings.extend_from_slice(self.embedding_row(i));
            modality_ids.push(self.modality_ids[i]);
            instants.push(self.instants[i]);
        }
        Bag {
            patient_id: self.patient_id.clone(),
            horizon: self.horizon,
            embeddings,
            modality_ids,
            instants,
            target: self.target,
        }
    }

    /// Restricts the bag to the given modalities; may return an empty bag.
    pub fn filter_modalities(&self, keep: &[Modality]) -> Bag {
        let indices: Vec<usize> = (0..self.len())
            .filter(|&i| keep.iter().any(|m| m.id() == self.modality_ids[i]))
            .collect();
        self.select(&indices)
    }
}

/// Build outcome: the bags plus the per-patient skip reasons.
#[derive(Debug, Clone)]
pub struct BagBuild {
    pub bags: Vec<Bag>,
    pub skipped: Vec<(String, String)>,
}

/// Assembles one bag per eligible patient under the asymmetric alignment
/// rule: an instance enters a bag only if its instant is on or before the
/// bag's assessment date, so post-M3 data never receives the M3 label.
pub fn build_bags(
    embeddings: &[Embedding],
    assessments: &[Assessment],
    setting: HorizonSetting,
) -> Result<BagBuild> {
    // M3 < M6 must hold whenever both assessments exist
    let mut dates: BTreeMap<&str, (Option<NaiveDate>, Option<NaiveDate>)> = BTreeMap::new();
    for a in assessments {
        let entry = dates.entry(a.patient_id.as_str()).or_default();
        match a.horizon {
            Horizon::M3 => entry.0 = Some(a.date),
            Horizon::M6 => entry.1 = Some(a.date),
        }
    }
    for (pid, (m3, m6)) in &dates {
        if let (Some(m3), Some(m6)) = (m3, m6) {
            if m6 <= m3 {
                return Err(Error::data(format!(
                    "patient {pid}: M6 date {m6} not after M3 date {m3}"
                )));
            }
        }
    }

    let target_horizon = setting.target();
    let mut by_patient: BTreeMap<&str, Vec<&Embedding>> = BTreeMap::new();
    for e in embeddings {
        by_patient.entry(e.patient_id.as_str()).or_default().push(e);
    }

    let mut bags = Vec::new();
    let mut skipped = Vec::new();
    for (pid, mut instances) in by_patient {
        let assessment = assessments
            .iter()
            .find(|a| a.patient_id == pid && a.horizon == target_horizon);
        let Some(assessment) = assessment else {
            log::info!("bag skipped: {pid} has no {} PSS", target_horizon.label());
            skipped.push((
                pid.to_string(),
                format!("no {} PSS", target_horizon.label()),
            ));
            continue;
        };
        instances.sort_by_key(|e| (e.instant, e.modality.id()));
        let eligible: Vec<&&Embedding> = instances
            .iter()
            .filter(|e| e.instant.date() <= assessment.date)
            .collect();
        if eligible.is_empty() {
            log::info!("bag skipped: {pid} has no eligible instances");
            skipped.push((pid.to_string(), "no eligible instances".to_string()));
            continue;
        }
        let mut embeddings_flat = Vec::with_capacity(eligible.len() * EMBED_DIM);
        let mut modality_ids = Vec::with_capacity(eligible.len());
        let mut instants = Vec::with_capacity(eligible.len());
        for e in &eligible {
            embeddings_flat.extend_from_slice(&e.values);
            modality_ids.push(e.modality.id());
            instants.push(e.instant);
        }
        bags.push(Bag {
            patient_id: pid.to_string(),
            horizon: target_horizon,
            embeddings: embeddings_flat,
            modality_ids,
            instants,
            target: assessment.pss as f64,
        });
    }
    Ok(BagBuild { bags, skipped })
}

/// Enforces the per-bag instance cap. Under the uniform policy the
/// subsample is seeded by (seed, patient, horizon); survivors keep their
/// chronological order and row alignment.
pub fn cap_instances(bag: &Bag, max_n: usize, seed: u64, policy: CapPolicy) -> Result<Bag> {
    if max_n == 0 {
        return Err(Error::invalid("instance cap must be at least 1"));
    }
    let n = bag.len();
    if n <= max_n {
        return Ok(bag.clone());
    }
    let mut indices: Vec<usize> = match policy {
        CapPolicy::Uniform => {
            let mut rng = rng_from(derive_seed(
                seed,
                &["cap", &bag.patient_id, bag.horizon.label()],
            ));
            sample(&mut rng, n, max_n).into_vec()
        }
        CapPolicy::Latest => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by_key(|&i| bag.instants[i]);
            order.split_off(n - max_n)
        }
    };
    indices.sort_unstable();
    Ok(bag.select(&indices))
}

/// Instance counts per (horizon, modality), the shape of a distribution
/// table for any dataset.
pub fn tabulate_instances(bags: &[Bag]) -> BTreeMap<(Horizon, u8), usize> {
    let mut counts = BTreeMap::new();
    for bag in bags {
        for &m in &bag.modality_ids {
            *counts.entry((bag.horizon, m)).or_insert(0) += 1;
        }
    }
    counts
}

/// Scans every M3 bag for instances dated after that patient's M3
/// assessment; any hit is a leakage violation.
pub fn audit_no_leakage(bags: &[Bag], assessments: &[Assessment]) -> Result<()> {
    for bag in bags {
        let Some(assessment) = assessments
            .iter()
            .find(|a| a.patient_id == bag.patient_id && a.horizon == bag.horizon)
        else {
            return Err(Error::data(format!(
                "bag {} has no matching assessment",
                bag.id()
            )));
        };
        for (i, instant) in bag.instants.iter().enumerate() {
            if instant.date() > assessment.date {
                return Err(Error::data(format!(
                    "leakage: bag {} instance {i} dated {instant} after {} assessment {}",
                    bag.id(),
                    bag.horizon.label(),
                    assessment.date
                )));
            }
        }
    }
    Ok(())
}

// ── WMB1 container ─────────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct ContainerHeader {
    patient_id: String,
    horizon: String,
    n: usize,
    dim: usize,
    target: Option<f64>,
    instants: Vec<NaiveDateTime>,
}

fn format_err(msg: impl Into<String>, offset: u64) -> Error {
    Error::Format {
        msg: msg.into(),
        offset,
    }
}

fn write_container(
    path: &Path,
    patient_id: &str,
    horizon: &str,
    target: Option<f64>,
    instants: &[NaiveDateTime],
    modality_ids: &[u8],
    embeddings: &[f32],
) -> Result<()> {
    let n = modality_ids.len();
    debug_assert_eq!(instants.len(), n);
    debug_assert_eq!(embeddings.len(), n * EMBED_DIM);
    let header = serde_json::to_vec(&ContainerHeader {
        patient_id: patient_id.to_string(),
        horizon: horizon.to_string(),
        n,
        dim: EMBED_DIM,
        target,
        instants: instants.to_vec(),
    })?;

    let mut body = Vec::with_capacity(4 + header.len() + embeddings.len() * 4 + n);
    body.extend_from_slice(&(header.len() as u32).to_le_bytes());
    body.extend_from_slice(&header);
    for v in embeddings {
        body.extend_from_slice(&v.to_le_bytes());
    }
    body.extend_from_slice(modality_ids);

    let mut file = std::fs::File::create(path)?;
    file.write_all(MAGIC)?;
    let mut encoder = DeflateEncoder::new(file, Compression::default());
    encoder.write_all(&body)?;
    encoder.finish()?;
    Ok(())
}

fn read_container(path: &Path) -> Result<(ContainerHeader, Vec<f32>, Vec<u8>)> {
    let raw = std::fs::read(path)?;
    if raw.len() < 4 || &raw[..4] != MAGIC {
        return Err(format_err("bad magic, expected WMB1", 0));
    }
    let mut decoder = DeflateDecoder::new(&raw[4..]);
    let mut rest = Vec::new();
    decoder
        .read_to_end(&mut rest)
        .map_err(|e| format_err(format!("deflate: {e}"), 4))?;
    let rest = rest.as_slice();
    if rest.len() < 4 {
        return Err(format_err("truncated header length", 4));
    }
    let header_len = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
    if rest.len() < 4 + header_len {
        return Err(format_err("truncated header", 8));
    }
    let header: ContainerHeader = serde_json::from_slice(&rest[4..4 + header_len])
        .map_err(|e| format_err(format!("header json: {e}"), 8))?;
    if header.dim != EMBED_DIM {
        return Err(format_err(
            format!("dim {} != expected {}", header.dim, EMBED_DIM),
            8,
        ));
    }
    if header.instants.len() != header.n {
        return Err(format_err(
            format!("{} instants for n={}", header.instants.len(), header.n),
            8,
        ));
    }
    let data = &rest[4 + header_len..];
    let embed_bytes = header.n * header.dim * 4;
    if data.len() != embed_bytes + header.n {
        return Err(format_err(
            format!(
                "payload {} bytes, expected {} ({}x{} f32 + {} modalities)",
                data.len(),
                embed_bytes + header.n,
                header.n,
                header.dim,
                header.n
            ),
            (8 + header_len) as u64,
        ));
    }
    let mut embeddings = Vec::with_capacity(header.n * header.dim);
    for chunk in data[..embed_bytes].chunks_exact(4) {
        embeddings.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    let modality_ids = data[embed_bytes..].to_vec();
    if let Some(&bad) = modality_ids.iter().find(|&&m| m > 2) {
        return Err(format_err(format!("modality id {bad} out of range"), 8));
    }
    Ok((header, embeddings, modality_ids))
}

/// Writes a bag; `read_bag(write_bag(b)) == b` bit-exactly.
pub fn write_bag(bag: &Bag, path: &Path) -> Result<()> {
    write_container(
        path,
        &bag.patient_id,
        bag.horizon.label(),
        Some(bag.target),
        &bag.instants,
        &bag.modality_ids,
        &bag.embeddings,
    )
}

pub fn read_bag(path: &Path) -> Result<Bag> {
    let (header, embeddings, modality_ids) = read_container(path)?;
    let target = header
        .target
        .ok_or_else(|| format_err("bag container has no target", 8))?;
    Ok(Bag {
        patient_id: header.patient_id,
        horizon: Horizon::parse(&header.horizon)?,
        embeddings,
        modality_ids,
        instants: header.instants,
        target,
    })
}

/// Writes a targetless per-patient embedding cache in the same container
/// format (horizon field "raw"), for the staged embed -> bag hand-off.
pub fn write_embedding_cache(
    path: &Path,
    patient_id: &str,
    embeddings: &[Embedding],
) -> Result<()> {
    let mut flat = Vec::with_capacity(embeddings.len() * EMBED_DIM);
    let mut modality_ids = Vec::with_capacity(embeddings.len());
    let mut instants = Vec::with_capacity(embeddings.len());
    for e in embeddings {
        if e.patient_id != patient_id {
            return Err(Error::invalid(format!(
                "embedding for {} in cache for {patient_id}",
                e.patient_id
            )));
        }
        flat.extend_from_slice(&e.values);
        modality_ids.push(e.modality.id());
        instants.push(e.instant);
    }
    write_container(
        path,
        patient_id,
        "raw",
        None,
        &instants,
        &modality_ids,
        &flat,
    )
}

/// Reads every `.wmb` bag under a directory, optionally filtered by
/// horizon, in sorted file order.
pub fn read_bags_dir(dir: &Path, horizon: Option<Horizon>) -> Result<Vec<Bag>> {
    let mut paths: Vec<std::path::PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "wmb"))
        .collect();
    paths.sort();
    let mut bags = Vec::new();
    for p in paths {
        let bag = read_bag(&p)?;
        if horizon.is_none_or(|h| bag.horizon == h) {
            bags.push(bag);
        }
    }
    Ok(bags)
}

/// Reads every `.wmb` embedding cache under a directory, concatenated in
/// sorted file order.
pub fn read_caches_dir(dir: &Path) -> Result<Vec<Embedding>> {
    let mut paths: Vec<std::path::PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "wmb"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        out.extend(read_embedding_cache(&p)?);
    }
    Ok(out)
}

pub fn read_embedding_cache(path: &Path) -> Result<Vec<Embedding>> {
    let (header, flat, modality_ids) = read_container(path)?;
    let mut out = Vec::with_capacity(header.n);
    for i in 0..header.n {
        out.push(Embedding {
            values: flat[i * EMBED_DIM..(i + 1) * EMBED_DIM].to_vec(),
            modality: Modality::from_id(modality_ids[i])?,
            instant: header.instants[i],
            patient_id: header.patient_id.clone(),
        });
    }
    Ok(out)
}
