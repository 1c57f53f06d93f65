//! Leave-one-subject-out evaluation: deterministic fold construction,
//! per-fold training, pooled metrics, and modality ablations.

mod metrics;
pub mod report;

pub use metrics::{average_ranks, mae, pearson, r2, rmse, spearman};

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::bags::{Bag, Horizon};
use crate::error::{Error, Result};
use crate::mil::{predict, train, TrainConfig};
use crate::raster::Modality;
use crate::seed::{derive_seed, rng_from};

/// Fraction of the per-fold training pool held out for early stopping.
pub const VAL_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct Fold {
    pub test: String,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// One fold per patient. The remaining patients are shuffled with a seed
/// derived from (seed, held-out id) and split 80/20 by count, so the split
/// is deterministic, per-fold, and leakage-free by construction.
pub fn loso_folds(patients: &[String], seed: u64) -> Result<Vec<Fold>> {
    let unique: BTreeSet<&String> = patients.iter().collect();
    if unique.len() < 3 {
        return Err(Error::invalid(format!(
            "LOSO needs at least 3 distinct patients, got {}",
            unique.len()
        )));
    }
    let sorted: Vec<&String> = unique.into_iter().collect();
    let mut folds = Vec::with_capacity(sorted.len());
    for &test in &sorted {
        let mut others: Vec<String> = sorted
            .iter()
            .filter(|&&p| p != test)
            .map(|&p| p.clone())
            .collect();
        others.shuffle(&mut rng_from(derive_seed(seed, &["fold", test])));
        let val_n = ((VAL_FRACTION * others.len() as f64).round() as usize).max(1);
        let mut val: Vec<String> = others.drain(..val_n).collect();
        let mut train = others;
        val.sort();
        train.sort();
        folds.push(Fold {
            test: test.clone(),
            train,
            val,
        });
    }
    Ok(folds)
}

/// Seeded patient-level split: shuffles the ids and takes
/// max(1, round(fraction * n)) for validation, the rest for training.
pub fn patient_split(
    patients: &[String],
    val_fraction: f64,
    seed: u64,
) -> (Vec<String>, Vec<String>) {
    let mut ids: Vec<String> = patients
        .iter()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    ids.shuffle(&mut rng_from(seed));
    let val_n = ((val_fraction * ids.len() as f64).round() as usize)
        .max(1)
        .min(ids.len().saturating_sub(1));
    let val: Vec<String> = ids.drain(..val_n).collect();
    (ids, val)
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub held_out: String,
    pub horizon: Horizon,
    /// (bag id, prediction, target) for the held-out patient's bags.
    pub predictions: Vec<(String, f64, f64)>,
    pub fold_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GlobalMetrics {
    /// Mean and population std of per-fold RMSE.
    pub rmse_mean: f64,
    pub rmse_std: f64,
    /// Metrics over the concatenation of all fold predictions.
    pub pooled_rmse: f64,
    pub pooled_mae: f64,
    pub r2: Option<f64>,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub n_predictions: usize,
}

/// Pools every fold's predictions and summarizes. Degenerate target
/// variance leaves the correlation fields undefined rather than 0.
pub fn compute_metrics(folds: &[FoldResult]) -> Result<GlobalMetrics> {
    if folds.is_empty() {
        return Err(Error::invalid("no folds to summarize"));
    }
    let fold_rmses: Vec<f64> = folds.iter().map(|f| f.fold_rmse).collect();
    let n_folds = fold_rmses.len() as f64;
    let rmse_mean = fold_rmses.iter().sum::<f64>() / n_folds;
    let rmse_std = (fold_rmses
        .iter()
        .map(|r| (r - rmse_mean).powi(2))
        .sum::<f64>()
        / n_folds)
        .sqrt();

    let pooled: Vec<(f64, f64)> = folds
        .iter()
        .flat_map(|f| f.predictions.iter().map(|(_, p, y)| (*p, *y)))
        .collect();
    if pooled.is_empty() {
        return Err(Error::invalid("folds carry no predictions"));
    }
    Ok(GlobalMetrics {
        rmse_mean,
        rmse_std,
        pooled_rmse: rmse(&pooled),
        pooled_mae: mae(&pooled),
        r2: r2(&pooled),
        pearson: pearson(&pooled),
        spearman: spearman(&pooled),
        n_predictions: pooled.len(),
    })
}

/// Parses a modality set: "all", or any combination of the letters
/// p (physical activity), s (sleep), e (ECG).
pub fn parse_modalities(s: &str) -> Result<Vec<Modality>> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(vec![Modality::Ecg, Modality::Activity, Modality::Sleep]);
    }
    let mut set = BTreeSet::new();
    for ch in s.chars() {
        match ch.to_ascii_lowercase() {
            'p' => set.insert(Modality::Activity.id()),
            's' => set.insert(Modality::Sleep.id()),
            'e' => set.insert(Modality::Ecg.id()),
            other => return Err(Error::invalid(format!("unknown modality letter '{other}'"))),
        };
    }
    if set.is_empty() {
        return Err(Error::invalid("empty modality set"));
    }
    Ok(set
        .into_iter()
        .map(|id| Modality::from_id(id).unwrap())
        .collect())
}

/// Canonical label for a modality set: "all" or letters in p, s, e order.
pub fn modality_label(set: &[Modality]) -> String {
    if set.len() == 3 {
        return "all".to_string();
    }
    let mut label = String::new();
    for (m, ch) in [
        (Modality::Activity, 'p'),
        (Modality::Sleep, 's'),
        (Modality::Ecg, 'e'),
    ] {
        if set.contains(&m) {
            label.push(ch);
        }
    }
    label
}

/// The standard ablation grid: ALL, PHYS+SLEEP, PHYS+ECG, SLEEP+ECG.
pub fn ablation_sets() -> Vec<Vec<Modality>> {
    vec![
        vec![Modality::Ecg, Modality::Activity, Modality::Sleep],
        vec![Modality::Activity, Modality::Sleep],
        vec![Modality::Activity, Modality::Ecg],
        vec![Modality::Sleep, Modality::Ecg],
    ]
}

#[derive(Debug, Clone)]
pub struct LosoRun {
    pub folds: Vec<FoldResult>,
    pub metrics: GlobalMetrics,
    /// Bags emptied by the modality filter and dropped.
    pub dropped_bags: usize,
    /// Held-out patients whose bags were all emptied; their folds are
    /// skipped and reported, never imputed.
    pub skipped_folds: Vec<String>,
}

/// Full LOSO evaluation of one modality set over one horizon's bags.
/// Per-fold training seeds derive from (cfg.seed, held-out id); folds run
/// in parallel but each fold is internally single-threaded, so results do
/// not depend on worker count.
pub fn run_loso(bags: &[Bag], modalities: &[Modality], cfg: &TrainConfig) -> Result<LosoRun> {
    if bags.is_empty() {
        return Err(Error::invalid("no bags to evaluate"));
    }
    let horizon = bags[0].horizon;
    if bags.iter().any(|b| b.horizon != horizon) {
        return Err(Error::invalid("run_loso requires a single horizon"));
    }

    let filtered: Vec<Bag> = bags
        .iter()
        .map(|b| b.filter_modalities(modalities))
        .collect();
    let dropped_bags = filtered.iter().filter(|b| b.is_empty()).count();
    let kept: Vec<Bag> = filtered.into_iter().filter(|b| !b.is_empty()).collect();
    if kept.is_empty() {
        return Err(Error::Config(format!(
            "modality filter '{}' emptied every bag",
            modality_label(modalities)
        )));
    }
    let mut skipped_folds: Vec<String> = bags
        .iter()
        .map(|b| b.patient_id.clone())
        .filter(|p| !kept.iter().any(|b| &b.patient_id == p))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    skipped_folds.sort();

    let patients: Vec<String> = kept
        .iter()
        .map(|b| b.patient_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let folds = loso_folds(&patients, cfg.seed)?;

    let results: Result<Vec<FoldResult>> = folds
        .par_iter()
        .map(|fold| {
            let select = |ids: &[String]| -> Vec<Bag> {
                kept.iter()
                    .filter(|b| ids.contains(&b.patient_id))
                    .cloned()
                    .collect()
            };
            let train_bags = select(&fold.train);
            let val_bags = select(&fold.val);
            let test_bags: Vec<Bag> = kept
                .iter()
                .filter(|b| b.patient_id == fold.test)
                .cloned()
                .collect();
            if train_bags.is_empty() || val_bags.is_empty() {
                return Err(Error::data(format!(
                    "fold {} has an empty train or validation pool",
                    fold.test
                )));
            }
            let fold_cfg = TrainConfig {
                seed: derive_seed(cfg.seed, &["train", &fold.test]),
                ..*cfg
            };
            let outcome = train(&train_bags, &val_bags, &fold_cfg)?;
            let mut predictions = Vec::with_capacity(test_bags.len());
            for bag in &test_bags {
                predictions.push((bag.id(), predict(bag, &outcome.params)?, bag.target));
            }
            let pairs: Vec<(f64, f64)> = predictions.iter().map(|(_, p, y)| (*p, *y)).collect();
            Ok(FoldResult {
                held_out: fold.test.clone(),
                horizon,
                predictions,
                fold_rmse: rmse(&pairs),
            })
        })
        .collect();
    let results = results?;
    let metrics = compute_metrics(&results)?;
    Ok(LosoRun {
        folds: results,
        metrics,
        dropped_bags,
        skipped_folds,
    })
}

/// Runs one modality set and writes the evaluate-stage outputs:
/// folds.csv, predictions.csv, global.csv, scatter.png(+json), report.txt.
pub fn evaluate_to_dir(
    bags: &[Bag],
    modalities: &[Modality],
    cfg: &TrainConfig,
    out: &Path,
) -> Result<LosoRun> {
    std::fs::create_dir_all(out)?;
    let run = run_loso(bags, modalities, cfg)?;
    let label = modality_label(modalities);
    report::write_folds_csv(&out.join("folds.csv"), &label, &run.folds)?;
    report::write_predictions_csv(&out.join("predictions.csv"), &run.folds)?;
    report::write_global_csv(
        &out.join("global.csv"),
        &[(label.clone(), run.metrics.clone())],
    )?;
    let pooled: Vec<(f64, f64)> = run
        .folds
        .iter()
        .flat_map(|f| f.predictions.iter().map(|(_, p, y)| (*p, *y)))
        .collect();
    report::write_scatter(&out.join("scatter.png"), &pooled)?;
    let table = render_metrics_table(&[(label, run.metrics.clone())]);
    std::fs::write(out.join("report.txt"), table)?;
    Ok(run)
}

/// Loops the ablation grid and writes ablation.csv, global.csv, report.txt.
pub fn ablate_to_dir(
    bags: &[Bag],
    cfg: &TrainConfig,
    sets: &[Vec<Modality>],
    out: &Path,
) -> Result<Vec<(String, LosoRun)>> {
    std::fs::create_dir_all(out)?;
    let mut runs = Vec::new();
    for set in sets {
        let run = run_loso(bags, set, cfg)?;
        runs.push((modality_label(set), run));
    }
    let entries: Vec<(String, GlobalMetrics)> = runs
        .iter()
        .map(|(label, run)| (label.clone(), run.metrics.clone()))
        .collect();
    report::write_global_csv(&out.join("global.csv"), &entries)?;

    let mut rows = Vec::new();
    for (label, run) in &runs {
        rows.push(vec![
            label.clone(),
            format!("{:.3}", run.metrics.rmse_mean),
            format!("{:.3}", run.metrics.rmse_std),
            format!("{:.3}", run.metrics.pooled_rmse),
            format!("{:.3}", run.metrics.pooled_mae),
        ]);
    }
    let mut csv = String::from("modalities,rmse_mean,rmse_std,global_rmse,global_mae\n");
    for row in &rows {
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    std::fs::write(out.join("ablation.csv"), csv)?;
    std::fs::write(
        out.join("report.txt"),
        report::render_table(
            &[
                "modalities",
                "rmse_mean",
                "rmse_std",
                "global_rmse",
                "global_mae",
            ],
            &rows,
        ),
    )?;
    Ok(runs)
}

/// metric x set text table for report.txt.
pub fn render_metrics_table(entries: &[(String, GlobalMetrics)]) -> String {
    let mut headers = vec!["metric"];
    for (label, _) in entries {
        headers.push(label.as_str());
    }
    let metric_names: Vec<&str> = report::metric_rows(&entries[0].1)
        .iter()
        .map(|(n, _)| *n)
        .collect();
    let mut rows = Vec::new();
    for (i, name) in metric_names.iter().enumerate() {
        let mut row = vec![name.to_string()];
        for (_, m) in entries {
            row.push(report::metric_rows(m)[i].1.clone());
        }
        rows.push(row);
    }
    report::render_table(&headers, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_patients_give_ten_disjoint_folds() {
        let patients: Vec<String> = (0..10).map(|i| format!("p{i:02}")).collect();
        let folds = loso_folds(&patients, 7).unwrap();
        assert_eq!(folds.len(), 10);
        for fold in &folds {
            assert_eq!(fold.train.len(), 7);
            assert_eq!(fold.val.len(), 2);
            assert!(!fold.train.contains(&fold.test));
            assert!(!fold.val.contains(&fold.test));
            let overlap = fold.train.iter().any(|p| fold.val.contains(p));
            assert!(!overlap);
        }
    }

    #[test]
    fn folds_are_deterministic_and_seed_sensitive() {
        let patients: Vec<String> = (0..8).map(|i| format!("p{i}")).collect();
        let a = loso_folds(&patients, 1).unwrap();
        let b = loso_folds(&patients, 1).unwrap();
        assert_eq!(a, b);
        let c = loso_folds(&patients, 2).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn fewer_than_three_patients_is_an_error() {
        let patients = vec!["a".to_string(), "b".to_string()];
        assert!(loso_folds(&patients, 1).is_err());
    }

    fn fold_result(held_out: &str, preds: Vec<(f64, f64)>) -> FoldResult {
        FoldResult {
            held_out: held_out.into(),
            horizon: Horizon::M3,
            predictions: preds
                .iter()
                .enumerate()
                .map(|(i, (p, y))| (format!("{held_out}:{i}"), *p, *y))
                .collect(),
            fold_rmse: rmse(&preds),
        }
    }

    #[test]
    fn pooled_metrics_match_direct_formulas() {
        let folds = vec![
            fold_result("a", vec![(18.0, 20.0)]),
            fold_result("b", vec![(30.0, 28.0)]),
            fold_result("c", vec![(10.0, 12.0), (11.0, 13.0)]),
        ];
        let m = compute_metrics(&folds).unwrap();
        let pooled = [(18.0, 20.0), (30.0, 28.0), (10.0, 12.0), (11.0, 13.0)];
        assert!((m.pooled_rmse - rmse(&pooled)).abs() < 1e-15);
        assert!((m.pooled_mae - mae(&pooled)).abs() < 1e-15);
        assert_eq!(m.n_predictions, 4);
        assert!(m.pooled_rmse >= m.pooled_mae);
    }

    #[test]
    fn modality_parsing_and_labels() {
        assert_eq!(parse_modalities("all").unwrap().len(), 3);
        let ps = parse_modalities("ps").unwrap();
        assert_eq!(modality_label(&ps), "ps");
        let se = parse_modalities("se").unwrap();
        assert_eq!(modality_label(&se), "se");
        assert!(parse_modalities("x").is_err());
        assert!(parse_modalities("").is_err());
        let labels: Vec<String> = ablation_sets().iter().map(|s| modality_label(s)).collect();
        assert_eq!(labels, vec!["all", "ps", "pe", "se"]);
    }
}
