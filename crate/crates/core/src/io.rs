//! On-disk formats for the staged pipeline: cohort CSV/JSONL, raw ECG with
//! JSON sidecars, and raster PNG+sidecar pairs.
//!
//! Dates are `YYYY-MM-DD`; timestamps are ISO-8601 without timezone
//! (`YYYY-MM-DDTHH:MM:SS`).

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use chrono::{NaiveDate, NaiveDateTime};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::bags::{Assessment, Horizon};
use crate::cohortsim::SyntheticCohort;
use crate::ecg::EcgRecording;
use crate::error::{Error, Result};
use crate::raster::{self, InstanceImage, Modality, ViewKind};
use crate::weekly::{
    DailyActivityRecord, SleepEpoch, SleepEpochSeries, SleepNightRecord, SleepStage,
};

const DATE_FMT: &str = "%Y-%m-%d";

fn parse_date(s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s, DATE_FMT).map_err(|e| Error::data(format!("bad date '{s}': {e}")))
}

// ── Activity ───────────────────────────────────────────────────────────────

pub fn write_activity_csv(
    path: &Path,
    records: &[DailyActivityRecord],
    feature_names: &[String],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["patient_id".to_string(), "date".to_string()];
    header.extend(feature_names.iter().cloned());
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![r.patient_id.clone(), r.date.format(DATE_FMT).to_string()];
        row.extend(r.features.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Returns the records plus the feature name list from the header.
pub fn read_activity_csv(path: &Path) -> Result<(Vec<DailyActivityRecord>, Vec<String>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.len() < 3 || &header[0] != "patient_id" || &header[1] != "date" {
        return Err(Error::data(format!(
            "activity csv must start with patient_id,date: {path:?}"
        )));
    }
    let features: Vec<String> = header.iter().skip(2).map(|s| s.to_string()).collect();
    let mut records = Vec::new();
    for row in r.records() {
        let row = row?;
        let mut values = Vec::with_capacity(features.len());
        for v in row.iter().skip(2) {
            values.push(
                v.parse::<f64>()
                    .map_err(|e| Error::data(format!("bad activity value '{v}': {e}")))?,
            );
        }
        records.push(DailyActivityRecord {
            patient_id: row[0].to_string(),
            date: parse_date(&row[1])?,
            features: values,
        });
    }
    Ok((records, features))
}

// ── Sleep nights ───────────────────────────────────────────────────────────

pub fn write_sleep_csv(path: &Path, records: &[SleepNightRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "patient_id",
        "date",
        "sleep_s",
        "unmeasurable_s",
        "deep_s",
        "light_s",
        "rem_s",
    ])?;
    for r in records {
        w.write_record([
            r.patient_id.clone(),
            r.date.format(DATE_FMT).to_string(),
            r.sleep_s.to_string(),
            r.unmeasurable_s.to_string(),
            r.deep_s.to_string(),
            r.light_s.to_string(),
            r.rem_s.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sleep_csv(path: &Path) -> Result<Vec<SleepNightRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut records = Vec::new();
    for row in r.deserialize::<BTreeMap<String, String>>() {
        let row = row?;
        let get = |k: &str| -> Result<&String> {
            row.get(k)
                .ok_or_else(|| Error::data(format!("sleep csv missing column {k}")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse::<f64>()
                .map_err(|e| Error::data(format!("bad {k}: {e}")))
        };
        records.push(SleepNightRecord {
            patient_id: get("patient_id")?.clone(),
            date: parse_date(get("date")?)?,
            sleep_s: num("sleep_s")?,
            unmeasurable_s: num("unmeasurable_s")?,
            deep_s: num("deep_s")?,
            light_s: num("light_s")?,
            rem_s: num("rem_s")?,
        });
    }
    Ok(records)
}

// ── Sleep epochs (JSONL, one record per epoch) ─────────────────────────────

#[derive(Serialize, Deserialize)]
struct EpochLine {
    patient_id: String,
    night_date: NaiveDate,
    start: NaiveDateTime,
    end: NaiveDateTime,
    stage: SleepStage,
}

pub fn write_epochs_jsonl(path: &Path, series: &[SleepEpochSeries]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in series {
        for e in &s.epochs {
            let line = EpochLine {
                patient_id: s.patient_id.clone(),
                night_date: s.night_date,
                start: e.start,
                end: e.end,
                stage: e.stage,
            };
            serde_json::to_writer(&mut file, &line)?;
            file.write_all(b"\n")?;
        }
    }
    file.flush()?;
    Ok(())
}

/// Groups epoch lines back into per-night series, preserving line order
/// within each night.
pub fn read_epochs_jsonl(path: &Path) -> Result<Vec<SleepEpochSeries>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut by_night: BTreeMap<(String, NaiveDate), Vec<SleepEpoch>> = BTreeMap::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: EpochLine = serde_json::from_str(&line)?;
        by_night
            .entry((parsed.patient_id, parsed.night_date))
            .or_default()
            .push(SleepEpoch {
                start: parsed.start,
                end: parsed.end,
                stage: parsed.stage,
            });
    }
    Ok(by_night
        .into_iter()
        .map(|((patient_id, night_date), epochs)| SleepEpochSeries {
            patient_id,
            night_date,
            epochs,
        })
        .collect())
}

// ── Assessments ────────────────────────────────────────────────────────────

pub fn write_assessments_csv(path: &Path, assessments: &[Assessment]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["patient_id", "horizon", "date", "pss"])?;
    for a in assessments {
        w.write_record([
            a.patient_id.clone(),
            a.horizon.label().to_string(),
            a.date.format(DATE_FMT).to_string(),
            a.pss.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_assessments_csv(path: &Path) -> Result<Vec<Assessment>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        if row.len() != 4 {
            return Err(Error::data("assessments csv needs 4 columns"));
        }
        out.push(Assessment {
            patient_id: row[0].to_string(),
            horizon: Horizon::parse(&row[1])?,
            date: parse_date(&row[2])?,
            pss: row[3]
                .parse::<i32>()
                .map_err(|e| Error::data(format!("bad pss '{}': {e}", &row[3])))?,
        });
    }
    Ok(out)
}

// ── ECG recordings ─────────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct EcgSidecar {
    patient_id: String,
    start_time: NaiveDateTime,
    fs: f64,
}

fn ecg_stem(rec: &EcgRecording) -> String {
    format!(
        "{}_{}",
        rec.patient_id,
        rec.start_time.format("%Y%m%dT%H%M%S")
    )
}

/// Writes `<stem>.f32` (raw little-endian samples) and `<stem>.json`.
pub fn write_ecg_recording(dir: &Path, rec: &EcgRecording) -> Result<PathBuf> {
    let stem = ecg_stem(rec);
    let data_path = dir.join(format!("{stem}.f32"));
    let mut bytes = Vec::with_capacity(rec.samples.len() * 4);
    for s in &rec.samples {
        bytes.extend_from_slice(&s.to_le_bytes());
    }
    std::fs::write(&data_path, bytes)?;
    let sidecar = EcgSidecar {
        patient_id: rec.patient_id.clone(),
        start_time: rec.start_time,
        fs: rec.fs,
    };
    std::fs::write(
        dir.join(format!("{stem}.json")),
        serde_json::to_vec_pretty(&sidecar)?,
    )?;
    Ok(data_path)
}

/// Loads one recording from its sidecar path; samples come from the
/// matching `.f32` (raw) or `.csv` (`t_s,mv`) file.
pub fn read_ecg_recording(sidecar_path: &Path) -> Result<EcgRecording> {
    let sidecar: EcgSidecar = serde_json::from_slice(&std::fs::read(sidecar_path)?)?;
    let f32_path = sidecar_path.with_extension("f32");
    let csv_path = sidecar_path.with_extension("csv");
    let samples: Vec<f32> = if f32_path.exists() {
        let bytes = std::fs::read(&f32_path)?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Format {
                msg: format!("{} is not a whole number of f32s", f32_path.display()),
                offset: bytes.len() as u64,
            });
        }
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    } else if csv_path.exists() {
        let mut r = csv::Reader::from_path(&csv_path)?;
        let headers = r.headers()?.clone();
        let mv_idx = headers
            .iter()
            .position(|h| h == "mv")
            .ok_or_else(|| Error::data("ecg csv needs a 'mv' column"))?;
        let mut out = Vec::new();
        for row in r.records() {
            let row = row?;
            out.push(
                row[mv_idx]
                    .parse::<f32>()
                    .map_err(|e| Error::data(format!("bad mv sample: {e}")))?,
            );
        }
        out
    } else {
        return Err(Error::data(format!(
            "no .f32 or .csv next to {}",
            sidecar_path.display()
        )));
    };
    let rec = EcgRecording {
        patient_id: sidecar.patient_id,
        start_time: sidecar.start_time,
        fs: sidecar.fs,
        samples,
    };
    rec.validate()?;
    Ok(rec)
}

/// All recordings under a directory, in sorted sidecar order.
pub fn read_ecg_dir(dir: &Path) -> Result<Vec<EcgRecording>> {
    let mut sidecars: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    sidecars.sort();
    sidecars.iter().map(|p| read_ecg_recording(p)).collect()
}

// ── Cohort bundle ──────────────────────────────────────────────────────────

/// Writes the whole simulated cohort in the ingestion formats:
/// daily_activity.csv, sleep_nights.csv, sleep_epochs.jsonl,
/// assessments.csv, profiles.csv (ground truth), and ecg/*.f32+json.
pub fn write_cohort(dir: &Path, cohort: &SyntheticCohort) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_activity_csv(
        &dir.join("daily_activity.csv"),
        &cohort.daily_activity,
        &cohort.activity_features,
    )?;
    write_sleep_csv(&dir.join("sleep_nights.csv"), &cohort.sleep_nights)?;
    write_epochs_jsonl(&dir.join("sleep_epochs.jsonl"), &cohort.sleep_epochs)?;
    write_assessments_csv(&dir.join("assessments.csv"), &cohort.assessments)?;

    let mut w = csv::Writer::from_path(dir.join("profiles.csv"))?;
    w.write_record(["patient_id", "latent_stress", "baseline_date", "adherence"])?;
    for p in &cohort.profiles {
        w.write_record([
            p.patient_id.clone(),
            p.latent_stress.to_string(),
            p.baseline_date.format(DATE_FMT).to_string(),
            p.adherence.to_string(),
        ])?;
    }
    w.flush()?;

    let ecg_dir = dir.join("ecg");
    std::fs::create_dir_all(&ecg_dir)?;
    for rec in &cohort.ecg_sessions {
        write_ecg_recording(&ecg_dir, rec)?;
    }
    Ok(())
}

// ── Raster files ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RasterMeta {
    pub patient_id: String,
    pub modality_id: u8,
    pub view_kind: ViewKind,
    pub instant: NaiveDateTime,
}

fn raster_stem(img: &InstanceImage) -> String {
    format!(
        "{}_{}_{}",
        img.patient_id,
        img.instant.format("%Y%m%dT%H%M%S"),
        img.view.label()
    )
}

/// Writes `<stem>.png` (8-bit grayscale) with a `<stem>.meta.json` sidecar.
/// The staged hand-off quantizes pixels to 8 bits; the in-memory pipeline
/// keeps full precision.
pub fn write_raster(dir: &Path, img: &InstanceImage) -> Result<PathBuf> {
    let stem = raster_stem(img);
    let png = dir.join(format!("{stem}.png"));
    raster::write_png_gray(&png, &img.pixels)?;
    let meta = RasterMeta {
        patient_id: img.patient_id.clone(),
        modality_id: img.modality.id(),
        view_kind: img.view,
        instant: img.instant,
    };
    std::fs::write(
        dir.join(format!("{stem}.meta.json")),
        serde_json::to_vec_pretty(&meta)?,
    )?;
    Ok(png)
}

pub fn read_raster(meta_path: &Path) -> Result<InstanceImage> {
    let meta: RasterMeta = serde_json::from_slice(&std::fs::read(meta_path)?)?;
    let png_path = meta_path
        .to_string_lossy()
        .trim_end_matches(".meta.json")
        .to_string()
        + ".png";
    let pixels: Array2<f64> = raster::read_png_gray(Path::new(&png_path))?;
    Ok(InstanceImage {
        pixels,
        modality: Modality::from_id(meta.modality_id)?,
        view: meta.view_kind,
        instant: meta.instant,
        patient_id: meta.patient_id,
    })
}

/// All rasters under a directory, in sorted file order.
pub fn read_raster_dir(dir: &Path) -> Result<Vec<InstanceImage>> {
    let mut metas: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".meta.json"))
        .collect();
    metas.sort();
    metas.iter().map(|p| read_raster(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohortsim::{generate_cohort, CohortConfig};

    #[test]
    fn cohort_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cohort = generate_cohort(&CohortConfig::new(2, 4, 5)).unwrap();
        write_cohort(dir.path(), &cohort).unwrap();

        let (activity, features) =
            read_activity_csv(&dir.path().join("daily_activity.csv")).unwrap();
        assert_eq!(features, cohort.activity_features);
        assert_eq!(activity, cohort.daily_activity);

        let sleep = read_sleep_csv(&dir.path().join("sleep_nights.csv")).unwrap();
        assert_eq!(sleep, cohort.sleep_nights);

        let mut epochs = read_epochs_jsonl(&dir.path().join("sleep_epochs.jsonl")).unwrap();
        let mut expected = cohort.sleep_epochs.clone();
        let key = |s: &SleepEpochSeries| (s.patient_id.clone(), s.night_date);
        epochs.sort_by_key(&key);
        expected.sort_by_key(&key);
        assert_eq!(epochs, expected);

        let assessments = read_assessments_csv(&dir.path().join("assessments.csv")).unwrap();
        assert_eq!(assessments, cohort.assessments);

        let ecg = read_ecg_dir(&dir.path().join("ecg")).unwrap();
        assert_eq!(ecg.len(), cohort.ecg_sessions.len());
        let mut expected_ecg = cohort.ecg_sessions.clone();
        expected_ecg.sort_by_key(|r| (r.patient_id.clone(), r.start_time));
        assert_eq!(ecg, expected_ecg);
    }

    #[test]
    fn ecg_csv_variant_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let sidecar = dir.path().join("p000_20240101T090000.json");
        std::fs::write(
            &sidecar,
            serde_json::to_vec(&EcgSidecar {
                patient_id: "p000".into(),
                start_time: NaiveDate::from_ymd_opt(2024, 1, 1)
                    .unwrap()
                    .and_hms_opt(9, 0, 0)
                    .unwrap(),
                fs: 130.0,
            })
            .unwrap(),
        )
        .unwrap();
        let mut csv_text = String::from("t_s,mv\n");
        for i in 0..10 {
            csv_text.push_str(&format!("{},{}\n", i as f64 / 130.0, i as f64 * 0.1));
        }
        std::fs::write(dir.path().join("p000_20240101T090000.csv"), csv_text).unwrap();
        let rec = read_ecg_recording(&sidecar).unwrap();
        assert_eq!(rec.samples.len(), 10);
        assert!((rec.samples[3] - 0.3).abs() < 1e-6);
    }

    #[test]
    fn raster_files_roundtrip_metadata() {
        use chrono::NaiveDate;
        let dir = tempfile::tempdir().unwrap();
        let img = InstanceImage::new(
            Array2::from_elem((224, 224), 0.25),
            Modality::Sleep,
            ViewKind::Hypnogram,
            NaiveDate::from_ymd_opt(2024, 2, 2)
                .unwrap()
                .and_hms_opt(0, 0, 0)
                .unwrap(),
            "p007",
        );
        write_raster(dir.path(), &img).unwrap();
        let back = read_raster_dir(dir.path()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].patient_id, "p007");
        assert_eq!(back[0].modality, Modality::Sleep);
        assert_eq!(back[0].view, ViewKind::Hypnogram);
        assert_eq!(back[0].instant, img.instant);
        // 0.25 quantizes to 64/255
        assert!((back[0].pixels[[0, 0]] - 64.0 / 255.0).abs() < 1e-12);
    }
}
