//! Stage glue: raw records -> instance rasters -> embeddings -> capped
//! bags. Used by the CLI subcommands and by end-to-end runs in memory.
//! Transforms parallelize across windows/images; outputs are collected in
//! input order so results never depend on worker count.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use rayon::prelude::*;

use crate::bags::{build_bags, cap_instances, Assessment, BagBuild, CapPolicy, HorizonSetting};
use crate::cohortsim::{generate_patient, CohortConfig};
use crate::config::{EcgStageConfig, WatchStageConfig};
use crate::ecg::{
    detect_rpeaks, poincare_plot, recurrence_plot, scalogram_cfg, segment_ecg, spectrogram_cfg,
    EcgRecording,
};
use crate::encoder::{Embedding, FusionEncoder};
use crate::error::Result;
use crate::raster::{InstanceImage, Modality};
use crate::weekly::{
    align_weeks, filter_and_impute, hypnogram_image, render_heatmap, zscore_week,
    DailyActivityRecord, SleepEpochSeries, SleepNightRecord, WeekOutcome,
};

/// Caps the global worker pool. Call once, before any parallel stage.
/// Results never depend on the worker count; this only bounds resource use.
pub fn set_worker_threads(n: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .build_global()
        .map_err(|e| crate::error::Error::Config(format!("thread pool: {e}")))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TransformCounts {
    pub ecg_windows: usize,
    pub low_quality_windows: usize,
    pub sparse_beat_windows: usize,
    pub rejected_weeks: usize,
    pub rejected_hypnograms: usize,
}

impl TransformCounts {
    pub fn merge(&mut self, other: &TransformCounts) {
        self.ecg_windows += other.ecg_windows;
        self.low_quality_windows += other.low_quality_windows;
        self.sparse_beat_windows += other.sparse_beat_windows;
        self.rejected_weeks += other.rejected_weeks;
        self.rejected_hypnograms += other.rejected_hypnograms;
    }
}

/// All ECG views for a set of recordings. Windows below the quality
/// threshold are dropped; windows whose beat detection is too sparse keep
/// their waveform views but skip the Poincare view.
pub fn ecg_instances(
    recordings: &[EcgRecording],
    cfg: &EcgStageConfig,
) -> Result<(Vec<InstanceImage>, TransformCounts)> {
    let mut images = Vec::new();
    let mut counts = TransformCounts::default();
    for rec in recordings {
        let windows = segment_ecg(rec)?;
        counts.ecg_windows += windows.len();
        let per_window: Result<Vec<(Vec<InstanceImage>, bool, bool)>> = windows
            .par_iter()
            .map(|w| {
                if w.quality < cfg.quality_threshold {
                    return Ok((Vec::new(), true, false));
                }
                let mut imgs = vec![
                    recurrence_plot(w),
                    spectrogram_cfg(w, &cfg.views),
                    scalogram_cfg(w, &cfg.views),
                ];
                let mut sparse = false;
                match detect_rpeaks(w).and_then(|rr| poincare_plot(&rr)) {
                    Ok(img) => imgs.push(img),
                    Err(e) if e.is_rejection() => sparse = true,
                    Err(e) => return Err(e),
                }
                Ok((imgs, false, sparse))
            })
            .collect();
        for (imgs, low_quality, sparse) in per_window? {
            if low_quality {
                counts.low_quality_windows += 1;
            }
            if sparse {
                counts.sparse_beat_windows += 1;
            }
            images.extend(imgs);
        }
    }
    Ok((images, counts))
}

/// Weekly activity/sleep heatmaps plus per-night hypnograms. The per-patient
/// baseline is the earliest calendar date across that patient's smartwatch
/// records.
pub fn watch_instances(
    activity: &[DailyActivityRecord],
    nights: &[SleepNightRecord],
    epoch_series: &[SleepEpochSeries],
    cfg: &WatchStageConfig,
) -> Result<(Vec<InstanceImage>, TransformCounts)> {
    let mut counts = TransformCounts::default();
    let mut images = Vec::new();

    let mut patients: BTreeMap<&str, (Vec<&DailyActivityRecord>, Vec<&SleepNightRecord>)> =
        BTreeMap::new();
    for r in activity {
        patients.entry(&r.patient_id).or_default().0.push(r);
    }
    for r in nights {
        patients.entry(&r.patient_id).or_default().1.push(r);
    }

    for (patient_id, (acts, slps)) in &patients {
        let baseline: Option<NaiveDate> = acts
            .iter()
            .map(|r| r.date)
            .chain(slps.iter().map(|r| r.date))
            .min();
        let Some(baseline) = baseline else { continue };

        if !acts.is_empty() {
            let n_features = acts[0].features.len();
            let records: Vec<(NaiveDate, Vec<f64>)> =
                acts.iter().map(|r| (r.date, r.features.clone())).collect();
            for slice in align_weeks(&records, baseline, n_features)? {
                match filter_and_impute(patient_id, &slice, cfg.missing_unit) {
                    WeekOutcome::Retained(m) => {
                        images.push(render_heatmap(
                            &zscore_week(&m),
                            Modality::Activity,
                            baseline,
                        ));
                    }
                    WeekOutcome::Rejected { .. } => counts.rejected_weeks += 1,
                }
            }
        }

        if !slps.is_empty() {
            let records: Vec<(NaiveDate, Vec<f64>)> = slps
                .iter()
                .map(|r| (r.date, r.features().to_vec()))
                .collect();
            for slice in align_weeks(&records, baseline, 5)? {
                match filter_and_impute(patient_id, &slice, cfg.missing_unit) {
                    WeekOutcome::Retained(m) => {
                        images.push(render_heatmap(&zscore_week(&m), Modality::Sleep, baseline));
                    }
                    WeekOutcome::Rejected { .. } => counts.rejected_weeks += 1,
                }
            }
        }
    }

    let mut sorted_series: Vec<&SleepEpochSeries> = epoch_series.iter().collect();
    sorted_series.sort_by_key(|s| (s.patient_id.clone(), s.night_date));
    for series in sorted_series {
        match hypnogram_image(series) {
            Ok(img) => images.push(img),
            Err(e) if e.is_rejection() => counts.rejected_hypnograms += 1,
            Err(e) => return Err(e),
        }
    }

    Ok((images, counts))
}

/// Embeds every raster; parallel, order-preserving.
pub fn encode_all(images: &[InstanceImage], encoder: &FusionEncoder) -> Result<Vec<Embedding>> {
    images
        .par_iter()
        .map(|img| encoder.encode_instance(img))
        .collect()
}

#[derive(Debug)]
pub struct CohortEmbeddings {
    pub embeddings: Vec<Embedding>,
    pub assessments: Vec<Assessment>,
    pub counts: TransformCounts,
}

/// End-to-end in-memory run over a synthetic cohort, streamed patient by
/// patient so ECG waveforms never accumulate.
pub fn cohort_embeddings(
    cohort_cfg: &CohortConfig,
    ecg_cfg: &EcgStageConfig,
    watch_cfg: &WatchStageConfig,
    encoder: &FusionEncoder,
) -> Result<CohortEmbeddings> {
    let mut out = CohortEmbeddings {
        embeddings: Vec::new(),
        assessments: Vec::new(),
        counts: TransformCounts::default(),
    };
    for idx in 0..cohort_cfg.n_patients {
        let slice = generate_patient(cohort_cfg, idx)?;
        let (mut images, ecg_counts) = ecg_instances(&slice.ecg_sessions, ecg_cfg)?;
        let (watch_images, watch_counts) = watch_instances(
            &slice.daily_activity,
            &slice.sleep_nights,
            &slice.sleep_epochs,
            watch_cfg,
        )?;
        images.extend(watch_images);
        out.counts.merge(&ecg_counts);
        out.counts.merge(&watch_counts);
        out.embeddings.extend(encode_all(&images, encoder)?);
        out.assessments.extend(slice.assessments);
    }
    Ok(out)
}

/// Builds bags for a horizon setting and applies the instance cap.
pub fn build_capped_bags(
    embeddings: &[Embedding],
    assessments: &[Assessment],
    setting: HorizonSetting,
    cap: usize,
    policy: CapPolicy,
    seed: u64,
) -> Result<BagBuild> {
    let mut build = build_bags(embeddings, assessments, setting)?;
    build.bags = build
        .bags
        .iter()
        .map(|b| cap_instances(b, cap, seed, policy))
        .collect::<Result<Vec<_>>>()?;
    Ok(build)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohortsim::generate_cohort;
    use crate::raster::ViewKind;

    #[test]
    fn small_cohort_produces_all_view_kinds() {
        let mut cfg = CohortConfig::new(2, 4, 3);
        cfg.adherence_override = Some(1.0);
        cfg.ecg_minutes = 30.0;
        let cohort = generate_cohort(&cfg).unwrap();
        let (ecg_imgs, ecg_counts) =
            ecg_instances(&cohort.ecg_sessions, &EcgStageConfig::default()).unwrap();
        // 2 patients x 2 sessions (days 0, 14) x 6 windows x 4 views
        assert_eq!(ecg_counts.ecg_windows, 24);
        assert!(ecg_imgs.len() >= 24 * 3);
        assert!(ecg_imgs.iter().all(|i| i.modality == Modality::Ecg));
        for view in [
            ViewKind::Recurrence,
            ViewKind::Spectrogram,
            ViewKind::Scalogram,
            ViewKind::Poincare,
        ] {
            assert!(ecg_imgs.iter().any(|i| i.view == view), "missing {view:?}");
        }

        let (watch_imgs, _) = watch_instances(
            &cohort.daily_activity,
            &cohort.sleep_nights,
            &cohort.sleep_epochs,
            &WatchStageConfig::default(),
        )
        .unwrap();
        for view in [
            ViewKind::ActivityHeatmap,
            ViewKind::SleepHeatmap,
            ViewKind::Hypnogram,
        ] {
            assert!(
                watch_imgs.iter().any(|i| i.view == view),
                "missing {view:?}"
            );
        }
        // full adherence, 4 weeks: 4 activity + 4 sleep heatmaps per patient
        let heatmaps = watch_imgs
            .iter()
            .filter(|i| i.view != ViewKind::Hypnogram)
            .count();
        assert_eq!(heatmaps, 2 * (4 + 4));
        // every raster is valid
        for img in ecg_imgs.iter().chain(watch_imgs.iter()) {
            img.validate().unwrap();
        }
    }

    #[test]
    fn pipeline_embeddings_feed_leak_free_bags() {
        let mut cfg = CohortConfig::new(3, 16, 9);
        cfg.adherence_override = Some(0.9);
        let encoder = FusionEncoder::reference(7);
        let run = cohort_embeddings(
            &cfg,
            &EcgStageConfig::default(),
            &WatchStageConfig::default(),
            &encoder,
        )
        .unwrap();
        assert!(!run.embeddings.is_empty());
        let build = build_capped_bags(
            &run.embeddings,
            &run.assessments,
            HorizonSetting::M3ToM3,
            512,
            CapPolicy::Uniform,
            1,
        )
        .unwrap();
        assert_eq!(build.bags.len(), 3);
        crate::bags::audit_no_leakage(&build.bags, &run.assessments).unwrap();

        // ALL->M6 keeps pre-M3 data and adds the post-M3 instances
        let m6 = build_capped_bags(
            &run.embeddings,
            &run.assessments,
            HorizonSetting::AllToM6,
            512,
            CapPolicy::Uniform,
            1,
        )
        .unwrap();
        assert_eq!(m6.bags.len(), 3);
        crate::bags::audit_no_leakage(&m6.bags, &run.assessments).unwrap();
        for (m3_bag, m6_bag) in build.bags.iter().zip(m6.bags.iter()) {
            assert_eq!(m3_bag.patient_id, m6_bag.patient_id);
            assert!(m6_bag.len() >= m3_bag.len());
            let m3_date = run
                .assessments
                .iter()
                .find(|a| {
                    a.patient_id == m6_bag.patient_id && a.horizon == crate::bags::Horizon::M3
                })
                .unwrap()
                .date;
            // 16 weeks of data straddle the day-91 M3 visit
            assert!(m6_bag.instants.iter().any(|t| t.date() > m3_date));
            let m6_target = run
                .assessments
                .iter()
                .find(|a| {
                    a.patient_id == m6_bag.patient_id && a.horizon == crate::bags::Horizon::M6
                })
                .unwrap()
                .pss as f64;
            assert_eq!(m6_bag.target, m6_target);
        }
    }
}
