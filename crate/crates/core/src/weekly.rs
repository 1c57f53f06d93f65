//! Weekly smartwatch views: baseline alignment, missingness gating,
//! feature-wise imputation, intra-week z-scoring, and the three
//! watch-derived rasters (activity heatmap, sleep heatmap, hypnogram).

use chrono::{Duration, NaiveDate, NaiveDateTime};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{self, InstanceImage, Modality, ViewKind, RASTER_SIZE};

pub const DAYS_PER_WEEK: usize = 7;

/// Weeks with a missing fraction strictly above this are excluded.
pub const MAX_MISSING_FRACTION: f64 = 0.60;

/// Default activity feature set (config-driven; this is the documented default).
pub const DEFAULT_ACTIVITY_FEATURES: [&str; 5] = [
    "steps",
    "active_minutes",
    "sedentary_minutes",
    "floors",
    "calories",
];

/// Sleep-night summary features, in column order.
pub const SLEEP_FEATURES: [&str; 5] = ["sleep_s", "unmeasurable_s", "deep_s", "light_s", "rem_s"];

// ── Record types ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyActivityRecord {
    pub patient_id: String,
    pub date: NaiveDate,
    /// Values aligned with the cohort's activity feature name list.
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SleepNightRecord {
    pub patient_id: String,
    pub date: NaiveDate,
    pub sleep_s: f64,
    pub unmeasurable_s: f64,
    pub deep_s: f64,
    pub light_s: f64,
    pub rem_s: f64,
}

impl SleepNightRecord {
    pub fn features(&self) -> [f64; 5] {
        [
            self.sleep_s,
            self.unmeasurable_s,
            self.deep_s,
            self.light_s,
            self.rem_s,
        ]
    }

    /// Staged durations may not exceed total sleep by more than one minute.
    pub fn validate(&self) -> Result<()> {
        let staged = self.deep_s + self.light_s + self.rem_s;
        if staged > self.sleep_s + 60.0 {
            return Err(Error::data(format!(
                "staged sleep {staged}s exceeds sleep_s {}s by more than 60s",
                self.sleep_s
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SleepStage {
    Unmeasurable,
    Deep,
    Light,
    Rem,
    Awake,
}

impl SleepStage {
    /// Fixed vertical order of the hypnogram trace.
    pub fn level(self) -> usize {
        match self {
            SleepStage::Unmeasurable => 0,
            SleepStage::Deep => 1,
            SleepStage::Light => 2,
            SleepStage::Rem => 3,
            SleepStage::Awake => 4,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            SleepStage::Unmeasurable => "unmeasurable",
            SleepStage::Deep => "deep",
            SleepStage::Light => "light",
            SleepStage::Rem => "rem",
            SleepStage::Awake => "awake",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SleepEpoch {
    pub start: NaiveDateTime,
    pub end: NaiveDateTime,
    pub stage: SleepStage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SleepEpochSeries {
    pub patient_id: String,
    pub night_date: NaiveDate,
    pub epochs: Vec<SleepEpoch>,
}

// ── Weekly alignment ───────────────────────────────────────────────────────

/// Maps a date to its 0-based week since baseline and day-of-week column.
pub fn week_and_column(date: NaiveDate, baseline: NaiveDate) -> (i64, usize) {
    let offset = (date - baseline).num_days();
    let week = offset.div_euclid(7);
    let col = offset.rem_euclid(7) as usize;
    (week, col)
}

/// One aligned feature-by-day slice before gating; absent cells hold NaN.
#[derive(Debug, Clone)]
pub struct WeekSlice {
    pub week_index: usize,
    pub values: Array2<f64>,
    pub mask: Array2<bool>,
}

/// Groups dated feature vectors into non-overlapping weekly slices anchored
/// at the baseline. Weeks without any record are not emitted.
pub fn align_weeks(
    records: &[(NaiveDate, Vec<f64>)],
    baseline: NaiveDate,
    n_features: usize,
) -> Result<Vec<WeekSlice>> {
    let mut weeks: std::collections::BTreeMap<usize, WeekSlice> = std::collections::BTreeMap::new();
    for (date, features) in records {
        if *date < baseline {
            return Err(Error::invalid(format!(
                "record date {date} precedes baseline {baseline}"
            )));
        }
        if features.len() != n_features {
            return Err(Error::data(format!(
                "record on {date} has {} features, expected {n_features}",
                features.len()
            )));
        }
        let (week, col) = week_and_column(*date, baseline);
        let week = week as usize;
        let slice = weeks.entry(week).or_insert_with(|| WeekSlice {
            week_index: week,
            values: Array2::from_elem((n_features, DAYS_PER_WEEK), f64::NAN),
            mask: Array2::from_elem((n_features, DAYS_PER_WEEK), false),
        });
        if slice.mask[[0, col]] {
            return Err(Error::data(format!("duplicate record for {date}")));
        }
        for (f, &v) in features.iter().enumerate() {
            slice.values[[f, col]] = v;
            slice.mask[[f, col]] = true;
        }
    }
    Ok(weeks.into_values().collect())
}

// ── Gating, imputation, normalization ──────────────────────────────────────

/// What counts as one missing unit when applying the 60% exclusion rule.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingUnit {
    /// Count absent feature-by-day cells.
    #[default]
    Cell,
    /// Count days on which every feature is absent.
    Day,
}

pub fn missing_fraction(mask: &Array2<bool>, unit: MissingUnit) -> f64 {
    let (n_features, n_days) = mask.dim();
    match unit {
        MissingUnit::Cell => {
            let absent = mask.iter().filter(|&&m| !m).count();
            absent as f64 / (n_features * n_days) as f64
        }
        MissingUnit::Day => {
            let absent_days = (0..n_days)
                .filter(|&d| (0..n_features).all(|f| !mask[[f, d]]))
                .count();
            absent_days as f64 / n_days as f64
        }
    }
}

/// Aligned, gated, imputed feature-by-day matrix for one patient-week.
#[derive(Debug, Clone, PartialEq)]
pub struct WeeklyMatrix {
    pub patient_id: String,
    pub week_index: usize,
    pub values: Array2<f64>,
    pub mask: Array2<bool>,
    /// Rows that had zero present cells and were filled with 0.
    pub zero_filled_rows: Vec<usize>,
}

#[derive(Debug, Clone)]
pub enum WeekOutcome {
    Retained(WeeklyMatrix),
    Rejected { missing_fraction: f64 },
}

/// Applies the exclusion rule (missing fraction strictly above 60% rejects;
/// exactly 60% is retained), then replaces each absent cell by the mean of
/// its feature row's present cells. Rows with no present cell become 0.
pub fn filter_and_impute(patient_id: &str, slice: &WeekSlice, unit: MissingUnit) -> WeekOutcome {
    let frac = missing_fraction(&slice.mask, unit);
    if frac > MAX_MISSING_FRACTION {
        return WeekOutcome::Rejected {
            missing_fraction: frac,
        };
    }
    let (n_features, n_days) = slice.values.dim();
    let mut values = slice.values.clone();
    let mut zero_filled = Vec::new();
    for f in 0..n_features {
        let mut sum = 0.0;
        let mut count = 0usize;
        for d in 0..n_days {
            if slice.mask[[f, d]] {
                sum += values[[f, d]];
                count += 1;
            }
        }
        let fill = if count > 0 {
            sum / count as f64
        } else {
            zero_filled.push(f);
            0.0
        };
        for d in 0..n_days {
            if !slice.mask[[f, d]] {
                values[[f, d]] = fill;
            }
        }
    }
    WeekOutcome::Retained(WeeklyMatrix {
        patient_id: patient_id.to_string(),
        week_index: slice.week_index,
        values,
        mask: slice.mask.clone(),
        zero_filled_rows: zero_filled,
    })
}

/// Z-scores each feature row across the seven days using the population
/// standard deviation; zero-variance rows become all zeros.
pub fn zscore_week(m: &WeeklyMatrix) -> WeeklyMatrix {
    let (n_features, n_days) = m.values.dim();
    let mut values = m.values.clone();
    for f in 0..n_features {
        let row: Vec<f64> = (0..n_days).map(|d| values[[f, d]]).collect();
        let mean = row.iter().sum::<f64>() / n_days as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n_days as f64;
        let std = var.sqrt();
        for d in 0..n_days {
            values[[f, d]] = if std > 0.0 {
                (values[[f, d]] - mean) / std
            } else {
                0.0
            };
        }
    }
    WeeklyMatrix {
        values,
        ..m.clone()
    }
}

// ── Rasters ────────────────────────────────────────────────────────────────

/// Renders a normalized weekly matrix as an axis-free heatmap: min-max over
/// the whole matrix, then nearest-neighbor upsampling to 224x224.
pub fn render_heatmap(m: &WeeklyMatrix, modality: Modality, baseline: NaiveDate) -> InstanceImage {
    debug_assert!(matches!(modality, Modality::Activity | Modality::Sleep));
    let mut scaled = m.values.clone();
    raster::minmax_rescale(&mut scaled);
    let pixels = raster::nearest_resize(&scaled, RASTER_SIZE, RASTER_SIZE);
    let week_start = baseline + Duration::days(7 * m.week_index as i64);
    let view = match modality {
        Modality::Sleep => ViewKind::SleepHeatmap,
        _ => ViewKind::ActivityHeatmap,
    };
    InstanceImage::new(
        pixels,
        modality,
        view,
        week_start.and_hms_opt(0, 0, 0).expect("midnight exists"),
        m.patient_id.clone(),
    )
}

/// Pixel row for the center of each stage level; level 4 (awake) sits at the
/// top of the image, level 0 (unmeasurable) at the bottom.
const STAGE_ROWS: [usize; 5] = [211, 161, 112, 62, 12];
const TRACE_HALF_WIDTH: usize = 1; // 3-pixel line

/// Draws one night's stage sequence as a step trace on a zero background.
/// Time is normalized to [first epoch start, last epoch end].
pub fn hypnogram_image(series: &SleepEpochSeries) -> Result<InstanceImage> {
    if series.epochs.is_empty() {
        return Err(Error::rejected("hypnogram: empty epoch list"));
    }
    let start = series.epochs.first().unwrap().start;
    let end = series.epochs.last().unwrap().end;
    let total = (end - start).num_milliseconds();
    if total <= 0 {
        return Err(Error::rejected("hypnogram: non-positive night duration"));
    }

    // Stage under each pixel column center; the step holds across gaps.
    let mut col_rows = [0usize; RASTER_SIZE];
    for (c, slot) in col_rows.iter_mut().enumerate() {
        let t_ms = (c as f64 + 0.5) / RASTER_SIZE as f64 * total as f64;
        let t = start + Duration::milliseconds(t_ms as i64);
        let mut stage = series.epochs[0].stage;
        for e in &series.epochs {
            if e.start <= t {
                stage = e.stage;
            } else {
                break;
            }
        }
        *slot = STAGE_ROWS[stage.level()];
    }

    let mut pixels = Array2::zeros((RASTER_SIZE, RASTER_SIZE));
    fn paint(pixels: &mut Array2<f64>, row: usize, col: usize) {
        let lo = row.saturating_sub(TRACE_HALF_WIDTH);
        let hi = (row + TRACE_HALF_WIDTH).min(RASTER_SIZE - 1);
        for r in lo..=hi {
            pixels[[r, col]] = 1.0;
        }
    }
    for (c, &row) in col_rows.iter().enumerate() {
        paint(&mut pixels, row, c);
        if c > 0 && col_rows[c - 1] != row {
            // vertical connector at the transition, same 3-pixel thickness
            let (lo, hi) = if col_rows[c - 1] < row {
                (col_rows[c - 1], row)
            } else {
                (row, col_rows[c - 1])
            };
            for cc in c.saturating_sub(1)..=(c + 1).min(RASTER_SIZE - 1) {
                for r in lo.saturating_sub(TRACE_HALF_WIDTH)
                    ..=(hi + TRACE_HALF_WIDTH).min(RASTER_SIZE - 1)
                {
                    pixels[[r, cc]] = 1.0;
                }
            }
        }
    }

    Ok(InstanceImage::new(
        pixels,
        Modality::Sleep,
        ViewKind::Hypnogram,
        series
            .night_date
            .and_hms_opt(0, 0, 0)
            .expect("midnight exists"),
        series.patient_id.clone(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    #[test]
    fn baseline_day_is_week0_col0() {
        assert_eq!(week_and_column(d("2024-01-01"), d("2024-01-01")), (0, 0));
    }

    #[test]
    fn day13_is_week1_col6_and_day14_wraps() {
        let base = d("2024-01-01");
        assert_eq!(week_and_column(base + Duration::days(13), base), (1, 6));
        assert_eq!(week_and_column(base + Duration::days(14), base), (2, 0));
    }

    #[test]
    fn align_groups_by_week() {
        let base = d("2024-03-04");
        let records = vec![
            (base, vec![1.0, 2.0]),
            (base + Duration::days(6), vec![3.0, 4.0]),
            (base + Duration::days(7), vec![5.0, 6.0]),
        ];
        let weeks = align_weeks(&records, base, 2).unwrap();
        assert_eq!(weeks.len(), 2);
        assert_eq!(weeks[0].week_index, 0);
        assert_eq!(weeks[0].values[[0, 0]], 1.0);
        assert_eq!(weeks[0].values[[1, 6]], 4.0);
        assert!(weeks[0].values[[0, 3]].is_nan());
        assert_eq!(weeks[1].week_index, 1);
        assert_eq!(weeks[1].values[[0, 0]], 5.0);
    }

    #[test]
    fn align_rejects_pre_baseline_records() {
        let base = d("2024-03-04");
        let records = vec![(base - Duration::days(1), vec![1.0])];
        assert!(align_weeks(&records, base, 1).is_err());
    }

    fn slice_with_row(row: [Option<f64>; 7]) -> WeekSlice {
        let mut values = Array2::from_elem((1, 7), f64::NAN);
        let mut mask = Array2::from_elem((1, 7), false);
        for (i, v) in row.iter().enumerate() {
            if let Some(v) = v {
                values[[0, i]] = *v;
                mask[[0, i]] = true;
            }
        }
        WeekSlice {
            week_index: 0,
            values,
            mask,
        }
    }

    #[test]
    fn imputation_uses_feature_row_mean() {
        // [2, _, 4, _, 6, _, _] -> missing cells become 4.0
        let slice = slice_with_row([Some(2.0), None, Some(4.0), None, Some(6.0), None, None]);
        match filter_and_impute("p", &slice, MissingUnit::Cell) {
            WeekOutcome::Retained(m) => {
                for d in [1, 3, 5, 6] {
                    assert_eq!(m.values[[0, d]], 4.0);
                }
                assert_eq!(m.values[[0, 0]], 2.0);
            }
            WeekOutcome::Rejected { .. } => panic!("4/7 missing must be retained"),
        }
    }

    #[test]
    fn five_of_seven_days_missing_rejects() {
        let slice = slice_with_row([Some(1.0), None, None, Some(2.0), None, None, None]);
        match filter_and_impute("p", &slice, MissingUnit::Cell) {
            WeekOutcome::Rejected { missing_fraction } => {
                assert!((missing_fraction - 5.0 / 7.0).abs() < 1e-12);
            }
            WeekOutcome::Retained(_) => panic!("71% missing must be rejected"),
        }
    }

    #[test]
    fn exactly_sixty_percent_is_retained() {
        // 5 features x 7 days = 35 cells; 21 missing = exactly 0.60
        let mut values = Array2::from_elem((5, 7), 1.0);
        let mut mask = Array2::from_elem((5, 7), true);
        let mut missing = 0;
        'outer: for f in 0..5 {
            for day in 0..7 {
                if missing == 21 {
                    break 'outer;
                }
                values[[f, day]] = f64::NAN;
                mask[[f, day]] = false;
                missing += 1;
            }
        }
        let slice = WeekSlice {
            week_index: 0,
            values,
            mask,
        };
        assert!(matches!(
            filter_and_impute("p", &slice, MissingUnit::Cell),
            WeekOutcome::Retained(_)
        ));
    }

    #[test]
    fn fully_present_week_is_identity() {
        let slice = slice_with_row([
            Some(1.0),
            Some(2.0),
            Some(3.0),
            Some(4.0),
            Some(5.0),
            Some(6.0),
            Some(7.0),
        ]);
        match filter_and_impute("p", &slice, MissingUnit::Cell) {
            WeekOutcome::Retained(m) => {
                assert_eq!(m.values, slice.values);
                assert!(m.mask.iter().all(|&b| b));
                assert!(m.zero_filled_rows.is_empty());
            }
            _ => panic!(),
        }
    }

    #[test]
    fn all_missing_row_fills_zero_and_flags() {
        let mut values = Array2::from_elem((2, 7), f64::NAN);
        let mut mask = Array2::from_elem((2, 7), false);
        for d in 0..7 {
            values[[0, d]] = d as f64;
            mask[[0, d]] = true;
        }
        let slice = WeekSlice {
            week_index: 3,
            values,
            mask,
        };
        match filter_and_impute("p", &slice, MissingUnit::Cell) {
            WeekOutcome::Retained(m) => {
                assert_eq!(m.zero_filled_rows, vec![1]);
                assert!((0..7).all(|d| m.values[[1, d]] == 0.0));
            }
            _ => panic!("50% missing must be retained"),
        }
    }

    #[test]
    fn day_unit_counts_fully_absent_days() {
        let mut values = Array2::from_elem((2, 7), 1.0);
        let mut mask = Array2::from_elem((2, 7), true);
        // day 0 fully absent; day 1 half absent
        for f in 0..2 {
            values[[f, 0]] = f64::NAN;
            mask[[f, 0]] = false;
        }
        values[[0, 1]] = f64::NAN;
        mask[[0, 1]] = false;
        let slice = WeekSlice {
            week_index: 0,
            values,
            mask,
        };
        assert!((missing_fraction(&slice.mask, MissingUnit::Day) - 1.0 / 7.0).abs() < 1e-12);
        assert!((missing_fraction(&slice.mask, MissingUnit::Cell) - 3.0 / 14.0).abs() < 1e-12);
    }

    fn matrix_of_row(row: [f64; 7]) -> WeeklyMatrix {
        WeeklyMatrix {
            patient_id: "p".into(),
            week_index: 0,
            values: Array2::from_shape_vec((1, 7), row.to_vec()).unwrap(),
            mask: Array2::from_elem((1, 7), true),
            zero_filled_rows: vec![],
        }
    }

    #[test]
    fn constant_row_zscores_to_zero() {
        let z = zscore_week(&matrix_of_row([5.0; 7]));
        assert!(z.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ramp_row_zscores_to_unit_population_std() {
        let z = zscore_week(&matrix_of_row([1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]));
        let mean: f64 = z.values.iter().sum::<f64>() / 7.0;
        let var: f64 = z.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zscore_is_idempotent_on_normalized_rows() {
        let once = zscore_week(&matrix_of_row([3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0]));
        let twice = zscore_week(&once);
        for (a, b) in once.values.iter().zip(twice.values.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn heatmap_all_zero_is_uniform_half() {
        let img = render_heatmap(
            &matrix_of_row([0.0; 7]),
            Modality::Activity,
            d("2024-01-01"),
        );
        assert!(img.pixels.iter().all(|&p| p == 0.5));
        assert_eq!(img.modality, Modality::Activity);
    }

    #[test]
    fn heatmap_blocks_and_max_cell() {
        // 5x7 matrix: distinct values; max at (2,3)
        let mut values = Array2::zeros((5, 7));
        for f in 0..5 {
            for day in 0..7 {
                values[[f, day]] = (f * 7 + day) as f64;
            }
        }
        values[[2, 3]] = 100.0;
        let m = WeeklyMatrix {
            patient_id: "p".into(),
            week_index: 1,
            values,
            mask: Array2::from_elem((5, 7), true),
            zero_filled_rows: vec![],
        };
        let img = render_heatmap(&m, Modality::Sleep, d("2024-01-01"));
        assert_eq!(img.modality, Modality::Sleep);
        // week 1 -> instant is baseline + 7 days
        assert_eq!(img.instant.date(), d("2024-01-08"));
        // block uniformity: cell (0,0) spans rows 0..44, cols 0..31
        let v = img.pixels[[0, 0]];
        assert_eq!(img.pixels[[44, 31]], v);
        assert_ne!(img.pixels[[45, 0]], v);
        // max cell maps to 1.0 inside its block: row block 2 starts at
        // ceil(2*224/5)=90, col block 3 at 96
        assert_eq!(img.pixels[[100, 100]], 1.0);
    }

    fn epoch(start_min: i64, end_min: i64, stage: SleepStage) -> SleepEpoch {
        let base = d("2024-01-01").and_hms_opt(22, 0, 0).unwrap();
        SleepEpoch {
            start: base + Duration::minutes(start_min),
            end: base + Duration::minutes(end_min),
            stage,
        }
    }

    #[test]
    fn single_epoch_draws_one_horizontal_line() {
        let series = SleepEpochSeries {
            patient_id: "p".into(),
            night_date: d("2024-01-01"),
            epochs: vec![epoch(0, 480, SleepStage::Light)],
        };
        let img = hypnogram_image(&series).unwrap();
        let light_row = STAGE_ROWS[SleepStage::Light.level()];
        for c in 0..RASTER_SIZE {
            assert_eq!(img.pixels[[light_row, c]], 1.0);
        }
        // nothing outside the 3-px band
        let lit_rows: std::collections::BTreeSet<usize> = (0..RASTER_SIZE)
            .filter(|&r| (0..RASTER_SIZE).any(|c| img.pixels[[r, c]] > 0.0))
            .collect();
        assert_eq!(
            lit_rows.into_iter().collect::<Vec<_>>(),
            vec![light_row - 1, light_row, light_row + 1]
        );
    }

    #[test]
    fn two_equal_epochs_step_at_midpoint() {
        let series = SleepEpochSeries {
            patient_id: "p".into(),
            night_date: d("2024-01-01"),
            epochs: vec![
                epoch(0, 240, SleepStage::Deep),
                epoch(240, 480, SleepStage::Rem),
            ],
        };
        let img = hypnogram_image(&series).unwrap();
        let deep_row = STAGE_ROWS[SleepStage::Deep.level()];
        let rem_row = STAGE_ROWS[SleepStage::Rem.level()];
        assert!(deep_row > rem_row, "deep must render below rem");
        // columns where the vertical connector spans both levels
        let connector: Vec<usize> = (0..RASTER_SIZE)
            .filter(|&c| img.pixels[[deep_row, c]] > 0.0 && img.pixels[[rem_row, c]] > 0.0)
            .collect();
        assert!(!connector.is_empty());
        let mid = connector[connector.len() / 2] as i64;
        assert!(
            (mid - 112).abs() <= 1,
            "step at column {mid}, expected 112 +/- 1"
        );
    }

    #[test]
    fn empty_epochs_reject() {
        let series = SleepEpochSeries {
            patient_id: "p".into(),
            night_date: d("2024-01-01"),
            epochs: vec![],
        };
        assert!(hypnogram_image(&series).unwrap_err().is_rejection());
    }

    #[test]
    fn heatmap_pixels_depend_only_on_matrix_values() {
        let values = Array2::from_shape_fn((4, 7), |(f, d)| (f * 7 + d) as f64 * 0.3);
        let a = WeeklyMatrix {
            patient_id: "alice".into(),
            week_index: 0,
            values: values.clone(),
            mask: Array2::from_elem((4, 7), true),
            zero_filled_rows: vec![],
        };
        let b = WeeklyMatrix {
            patient_id: "bob".into(),
            week_index: 9,
            values,
            mask: Array2::from_elem((4, 7), true),
            zero_filled_rows: vec![],
        };
        let img_a = render_heatmap(&a, Modality::Activity, d("2024-01-01"));
        let img_b = render_heatmap(&b, Modality::Activity, d("2030-06-15"));
        assert_eq!(img_a.pixels, img_b.pixels);
    }

    proptest::proptest! {
        /// Week partitioning is a bijection from dates to (week, column).
        #[test]
        fn week_partition_is_a_bijection(offsets in proptest::collection::btree_set(0i64..400, 1..50)) {
            let base = d("2024-01-01");
            let mut seen = std::collections::BTreeSet::new();
            for &off in &offsets {
                let date = base + Duration::days(off);
                let (week, col) = week_and_column(date, base);
                proptest::prop_assert!(col < 7);
                proptest::prop_assert!(seen.insert((week, col)), "collision at {date}");
                // invertible: reconstruct the date from (week, col)
                let back = base + Duration::days(week * 7 + col as i64);
                proptest::prop_assert_eq!(back, date);
            }
        }
    }
}
