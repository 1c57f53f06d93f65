//! Synthetic multi-patient wearable cohort with a planted latent-stress
//! signal. Higher latent stress raises heart rate, lowers RR variability,
//! shortens and fragments sleep, flattens the weekday/weekend activity
//! contrast, and drives the PSS targets, so signal recovery by the full
//! pipeline is testable without clinical data.

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Weekday};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bags::{Assessment, Horizon};
use crate::ecg::EcgRecording;
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from};
use crate::weekly::{
    DailyActivityRecord, SleepEpoch, SleepEpochSeries, SleepNightRecord, SleepStage,
    DEFAULT_ACTIVITY_FEATURES,
};

/// Polar H10 sampling rate.
pub const ECG_FS: f64 = 130.0;

/// Days from baseline to the two assessment visits.
pub const M3_OFFSET_DAYS: i64 = 91;
pub const M6_OFFSET_DAYS: i64 = 182;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentProfile {
    pub patient_id: String,
    /// Planted stress level in [0,1]; drives every downstream signal.
    pub latent_stress: f64,
    pub baseline_date: NaiveDate,
    /// Probability that a given day's record exists.
    pub adherence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCohort {
    pub profiles: Vec<LatentProfile>,
    pub daily_activity: Vec<DailyActivityRecord>,
    pub sleep_nights: Vec<SleepNightRecord>,
    pub sleep_epochs: Vec<SleepEpochSeries>,
    pub ecg_sessions: Vec<EcgRecording>,
    pub assessments: Vec<Assessment>,
    pub activity_features: Vec<String>,
}

impl SyntheticCohort {
    fn merge(&mut self, other: SyntheticCohort) {
        self.profiles.extend(other.profiles);
        self.daily_activity.extend(other.daily_activity);
        self.sleep_nights.extend(other.sleep_nights);
        self.sleep_epochs.extend(other.sleep_epochs);
        self.ecg_sessions.extend(other.ecg_sessions);
        self.assessments.extend(other.assessments);
    }

    /// Checks the cohort invariants: record dates at or after baseline,
    /// ECG sessions of at least 30 minutes, PSS integers in [0,40].
    pub fn validate(&self) -> Result<()> {
        let baseline = |pid: &str| {
            self.profiles
                .iter()
                .find(|p| p.patient_id == pid)
                .map(|p| p.baseline_date)
                .ok_or_else(|| Error::data(format!("unknown patient {pid}")))
        };
        for r in &self.daily_activity {
            if r.date < baseline(&r.patient_id)? {
                return Err(Error::data("activity record precedes baseline"));
            }
        }
        for r in &self.sleep_nights {
            if r.date < baseline(&r.patient_id)? {
                return Err(Error::data("sleep record precedes baseline"));
            }
            r.validate()?;
        }
        for r in &self.ecg_sessions {
            if r.start_time.date() < baseline(&r.patient_id)? {
                return Err(Error::data("ecg session precedes baseline"));
            }
            if r.duration_s() < 30.0 * 60.0 {
                return Err(Error::data("ecg session shorter than 30 minutes"));
            }
        }
        for a in &self.assessments {
            if !(0..=40).contains(&a.pss) {
                return Err(Error::data(format!("pss {} outside [0,40]", a.pss)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortConfig {
    pub n_patients: usize,
    pub weeks: usize,
    pub seed: u64,
    /// Gaussian noise on the PSS link, in score units.
    pub pss_noise_sd: f64,
    /// Force one adherence value for every patient (tests); otherwise
    /// adherence is drawn per patient from [0.70, 0.97].
    pub adherence_override: Option<f64>,
    /// Length of each biweekly ECG session, in minutes.
    pub ecg_minutes: f64,
}

impl CohortConfig {
    pub fn new(n_patients: usize, weeks: usize, seed: u64) -> Self {
        CohortConfig {
            n_patients,
            weeks,
            seed,
            pss_noise_sd: 3.0,
            adherence_override: None,
            ecg_minutes: 30.0,
        }
    }
}

/// Generates the full cohort; deterministic for a fixed config.
pub fn generate_cohort(cfg: &CohortConfig) -> Result<SyntheticCohort> {
    if cfg.n_patients < 2 {
        return Err(Error::invalid("n_patients must be at least 2"));
    }
    if cfg.weeks < 4 {
        return Err(Error::invalid("weeks must be at least 4"));
    }
    let mut cohort = SyntheticCohort {
        profiles: Vec::new(),
        daily_activity: Vec::new(),
        sleep_nights: Vec::new(),
        sleep_epochs: Vec::new(),
        ecg_sessions: Vec::new(),
        assessments: Vec::new(),
        activity_features: DEFAULT_ACTIVITY_FEATURES
            .iter()
            .map(|s| s.to_string())
            .collect(),
    };
    for idx in 0..cfg.n_patients {
        cohort.merge(generate_patient(cfg, idx)?);
    }
    Ok(cohort)
}

/// Generates one patient's slice of the cohort. Patients are independent:
/// the cohort is the concatenation over indices, so callers may stream
/// patient-by-patient to bound memory.
pub fn generate_patient(cfg: &CohortConfig, idx: usize) -> Result<SyntheticCohort> {
    if idx >= cfg.n_patients {
        return Err(Error::invalid(format!(
            "patient index {idx} out of range 0..{}",
            cfg.n_patients
        )));
    }
    let patient_id = format!("p{idx:03}");
    let pseed = derive_seed(cfg.seed, &["patient", &patient_id]);
    let mut rng = rng_from(pseed);

    let latent_stress: f64 = rng.gen_range(0.0..=1.0);
    let adherence = cfg
        .adherence_override
        .unwrap_or_else(|| rng.gen_range(0.70..=0.97));
    let baseline_date = NaiveDate::from_ymd_opt(2024, 1, 1).expect("valid date")
        + Duration::days(rng.gen_range(0..14));

    let profile = LatentProfile {
        patient_id: patient_id.clone(),
        latent_stress,
        baseline_date,
        adherence,
    };

    let n_days = (cfg.weeks * 7) as i64;
    let mut daily_activity = Vec::new();
    let mut sleep_nights = Vec::new();
    let mut sleep_epochs = Vec::new();
    let mut ecg_sessions = Vec::new();

    let mut activity_rng = rng_from(derive_seed(pseed, &["activity"]));
    let mut sleep_rng = rng_from(derive_seed(pseed, &["sleep"]));
    let mut ecg_rng = rng_from(derive_seed(pseed, &["ecg"]));

    for day in 0..n_days {
        let date = baseline_date + Duration::days(day);

        if activity_rng.gen_bool(adherence.clamp(0.0, 1.0)) {
            daily_activity.push(activity_record(
                &patient_id,
                date,
                latent_stress,
                &mut activity_rng,
            ));
        } else {
            // burn the same number of draws so presence does not reshuffle values
            let _ = activity_record(&patient_id, date, latent_stress, &mut activity_rng);
        }

        if sleep_rng.gen_bool(adherence.clamp(0.0, 1.0)) {
            let (night, epochs) = sleep_night(&patient_id, date, latent_stress, &mut sleep_rng);
            sleep_nights.push(night);
            sleep_epochs.push(epochs);
        } else {
            let _ = sleep_night(&patient_id, date, latent_stress, &mut sleep_rng);
        }

        if day % 14 == 0 && ecg_rng.gen_bool(adherence.clamp(0.0, 1.0)) {
            let start_minute = ecg_rng.gen_range(0..240);
            let start_time =
                date.and_hms_opt(10, 0, 0).expect("valid time") + Duration::minutes(start_minute);
            let session_seed = derive_seed(pseed, &["ecg-session", &day.to_string()]);
            let ecg = synthesize_ecg(latent_stress, cfg.ecg_minutes * 60.0, ECG_FS, session_seed)?;
            ecg_sessions.push(EcgRecording {
                patient_id: patient_id.clone(),
                start_time,
                fs: ECG_FS,
                samples: ecg.samples,
            });
        }
    }

    let m3_date = baseline_date + Duration::days(M3_OFFSET_DAYS);
    let m6_date = baseline_date + Duration::days(M6_OFFSET_DAYS);
    let assessments = vec![
        Assessment {
            patient_id: patient_id.clone(),
            horizon: Horizon::M3,
            date: m3_date,
            pss: assign_pss(
                latent_stress,
                cfg.pss_noise_sd,
                derive_seed(pseed, &["pss", "m3"]),
            ),
        },
        Assessment {
            patient_id: patient_id.clone(),
            horizon: Horizon::M6,
            date: m6_date,
            pss: assign_pss(
                latent_stress,
                cfg.pss_noise_sd,
                derive_seed(pseed, &["pss", "m6"]),
            ),
        },
    ];

    Ok(SyntheticCohort {
        profiles: vec![profile],
        daily_activity,
        sleep_nights,
        sleep_epochs,
        ecg_sessions,
        assessments,
        activity_features: DEFAULT_ACTIVITY_FEATURES
            .iter()
            .map(|s| s.to_string())
            .collect(),
    })
}

fn gauss(rng: &mut impl Rng, sd: f64) -> f64 {
    if sd <= 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sd).expect("valid sd").sample(rng)
}

/// Daily activity summary. Stress lowers overall activity and flattens the
/// weekend/weekday contrast; the contrast is what survives intra-week
/// z-scoring.
fn activity_record(
    patient_id: &str,
    date: NaiveDate,
    stress: f64,
    rng: &mut impl Rng,
) -> DailyActivityRecord {
    let weekend = matches!(date.weekday(), Weekday::Sat | Weekday::Sun);
    let weekend_boost = if weekend { 1.25 - 0.40 * stress } else { 1.0 };
    let steps = ((8000.0 - 3000.0 * stress) * weekend_boost + gauss(rng, 700.0)).max(0.0);
    let active = ((90.0 - 40.0 * stress) * weekend_boost + gauss(rng, 10.0)).max(0.0);
    let sedentary = (480.0 + 120.0 * stress + gauss(rng, 40.0)).max(0.0);
    let floors = ((8.0 - 4.0 * stress) * weekend_boost + gauss(rng, 1.5)).max(0.0);
    let calories = (2200.0 - 400.0 * stress + gauss(rng, 110.0)).max(0.0);
    DailyActivityRecord {
        patient_id: patient_id.to_string(),
        date,
        features: vec![steps, active, sedentary, floors, calories],
    }
}

/// One night's stage sequence plus its summary. Stress shortens total sleep,
/// shrinks deep-sleep episodes, and adds awakenings between cycles.
fn sleep_night(
    patient_id: &str,
    date: NaiveDate,
    stress: f64,
    rng: &mut impl Rng,
) -> (SleepNightRecord, SleepEpochSeries) {
    let start = date.and_hms_opt(22, 30, 0).expect("valid time")
        + Duration::minutes(rng.gen_range(-45..=45));
    let target_sleep_min = (444.0 - 108.0 * stress + gauss(rng, 24.0)).clamp(240.0, 620.0);

    let mut epochs: Vec<SleepEpoch> = Vec::new();
    let mut t = start;
    let mut slept_min = 0.0;
    let push = |epochs: &mut Vec<SleepEpoch>, t: &mut NaiveDateTime, stage, minutes: f64| {
        let minutes = minutes.max(1.0);
        let end = *t + Duration::seconds((minutes * 60.0).round() as i64);
        epochs.push(SleepEpoch {
            start: *t,
            end,
            stage,
        });
        *t = end;
        minutes
    };

    while slept_min < target_sleep_min {
        let cycle = [
            (SleepStage::Light, 40.0 * (1.0 + 0.15 * gauss(rng, 1.0))),
            (
                SleepStage::Deep,
                (26.0 * (1.0 - 0.60 * stress)).max(3.0) * (1.0 + 0.15 * gauss(rng, 1.0)),
            ),
            (SleepStage::Light, 12.0 * (1.0 + 0.15 * gauss(rng, 1.0))),
            (SleepStage::Rem, 18.0 * (1.0 + 0.15 * gauss(rng, 1.0))),
        ];
        for (stage, minutes) in cycle {
            let remaining = target_sleep_min - slept_min;
            if remaining <= 0.0 {
                break;
            }
            slept_min += push(&mut epochs, &mut t, stage, minutes.min(remaining));
        }
        if rng.gen_bool((0.10 + 0.55 * stress).clamp(0.0, 1.0)) {
            push(
                &mut epochs,
                &mut t,
                SleepStage::Awake,
                3.0 + rng.gen_range(0.0..9.0),
            );
        }
        if rng.gen_bool(0.08) {
            push(
                &mut epochs,
                &mut t,
                SleepStage::Unmeasurable,
                2.0 + rng.gen_range(0.0..4.0),
            );
        }
    }

    let sum_stage = |stage: SleepStage| -> f64 {
        epochs
            .iter()
            .filter(|e| e.stage == stage)
            .map(|e| (e.end - e.start).num_seconds() as f64)
            .sum()
    };
    let deep_s = sum_stage(SleepStage::Deep);
    let light_s = sum_stage(SleepStage::Light);
    let rem_s = sum_stage(SleepStage::Rem);
    let night = SleepNightRecord {
        patient_id: patient_id.to_string(),
        date,
        sleep_s: deep_s + light_s + rem_s,
        unmeasurable_s: sum_stage(SleepStage::Unmeasurable),
        deep_s,
        light_s,
        rem_s,
    };
    let series = SleepEpochSeries {
        patient_id: patient_id.to_string(),
        night_date: date,
        epochs,
    };
    (night, series)
}

// ── ECG synthesis ──────────────────────────────────────────────────────────

/// Synthetic ECG with its planted ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticEcg {
    /// Millivolts at the requested rate.
    pub samples: Vec<f32>,
    /// Planted R-peak sample indices.
    pub peak_indices: Vec<usize>,
    /// Planted beat-to-beat intervals in milliseconds.
    pub rr_ms: Vec<f64>,
}

/// Fixed piecewise-Gaussian PQRST template: (amplitude mV, offset s, width s).
const PQRST: [(f64, f64, f64); 5] = [
    (0.12, -0.160, 0.022),  // P
    (-0.12, -0.028, 0.009), // Q
    (1.00, 0.000, 0.011),   // R
    (-0.18, 0.026, 0.010),  // S
    (0.35, 0.220, 0.045),   // T
];

const SAMPLE_NOISE_MV: f64 = 0.01;

/// Mean heart rate planted for a stress level, beats per minute.
pub fn planted_heart_rate(stress: f64) -> f64 {
    60.0 + 30.0 * stress
}

/// Planted RR standard deviation for a stress level, milliseconds.
pub fn planted_sdnn(stress: f64) -> f64 {
    80.0 - 60.0 * stress
}

/// Synthesizes an ECG whose mean heart rate rises and whose RR variability
/// falls monotonically in `latent_stress`. The RR noise sequence depends
/// only on the seed, so for a fixed seed the realized SDNN is ordered by
/// stress level.
pub fn synthesize_ecg(
    latent_stress: f64,
    duration_s: f64,
    fs: f64,
    seed: u64,
) -> Result<SyntheticEcg> {
    if duration_s <= 0.0 {
        return Err(Error::invalid("duration_s must be positive"));
    }
    let mean_rr_ms = 60_000.0 / planted_heart_rate(latent_stress);
    let sdnn_ms = planted_sdnn(latent_stress);
    let mut rr_rng = rng_from(derive_seed(seed, &["rr"]));
    let rr = |rng: &mut rand_chacha::ChaCha8Rng| {
        let g: f64 = Normal::new(0.0, 1.0).expect("unit normal").sample(rng);
        (mean_rr_ms + sdnn_ms * g.clamp(-3.0, 3.0)).max(300.0)
    };
    synthesize_from_rr(duration_s, fs, seed, || rr(&mut rr_rng))
}

/// Constant-rate variant used to validate peak detection timing.
pub fn synthesize_ecg_fixed_rate(
    bpm: f64,
    duration_s: f64,
    fs: f64,
    seed: u64,
) -> Result<SyntheticEcg> {
    if duration_s <= 0.0 {
        return Err(Error::invalid("duration_s must be positive"));
    }
    if bpm <= 0.0 {
        return Err(Error::invalid("bpm must be positive"));
    }
    synthesize_from_rr(duration_s, fs, seed, || 60_000.0 / bpm)
}

fn synthesize_from_rr(
    duration_s: f64,
    fs: f64,
    seed: u64,
    mut next_rr_ms: impl FnMut() -> f64,
) -> Result<SyntheticEcg> {
    let n = (duration_s * fs).round() as usize;
    let mut samples = vec![0.0f64; n];

    // beat times: first beat at 0.5 s, then cumulative RR
    let mut peak_times_s = Vec::new();
    let mut rr_ms = Vec::new();
    let mut t = 0.5;
    while t < duration_s {
        peak_times_s.push(t);
        let rr = next_rr_ms();
        rr_ms.push(rr);
        t += rr / 1000.0;
    }
    // the last stored RR extends past the recording end
    rr_ms.pop();

    for &beat in &peak_times_s {
        for (amp, mu, sigma) in PQRST {
            let center = beat + mu;
            let lo = ((center - 4.0 * sigma) * fs).floor().max(0.0) as usize;
            let hi = (((center + 4.0 * sigma) * fs).ceil() as usize).min(n.saturating_sub(1));
            for (i, slot) in samples.iter_mut().enumerate().take(hi + 1).skip(lo) {
                let dt = i as f64 / fs - center;
                *slot += amp * (-0.5 * (dt / sigma).powi(2)).exp();
            }
        }
    }

    let mut noise_rng = rng_from(derive_seed(seed, &["noise"]));
    let noise = Normal::new(0.0, SAMPLE_NOISE_MV).expect("valid sd");
    for s in samples.iter_mut() {
        *s += noise.sample(&mut noise_rng);
    }

    Ok(SyntheticEcg {
        samples: samples.iter().map(|&s| s as f32).collect(),
        peak_indices: peak_times_s
            .iter()
            .map(|&t| (t * fs).round() as usize)
            .filter(|&i| i < n)
            .collect(),
        rr_ms,
    })
}

/// PSS score: round(clamp(40*latent + N(0, noise_sd), 0, 40)).
pub fn assign_pss(latent_stress: f64, noise_sd: f64, seed: u64) -> i32 {
    let mut rng = rng_from(seed);
    let noise = gauss(&mut rng, noise_sd);
    (40.0 * latent_stress + noise).clamp(0.0, 40.0).round() as i32
}
