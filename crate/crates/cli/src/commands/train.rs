use std::fs;
use std::path::Path;

use ps3_core::checkpoint::{Checkpoint, Fingerprints};
use ps3_core::data::kfold_split;
use ps3_core::eval::{concordance_index, mean_std};
use ps3_core::survival::{self, History};
use ps3_core::text_proto::n_t_from_lengths;
use ps3_core::{rng, Error, Modality, ModelSpec, Sample, SurvivalRecord, TrainConfig};

use super::fresh_dir;
use super::prototype::PrototypeSettings;
use crate::cohort::{load_cohort, Cohort, PROTOTYPES_DIR};
use crate::config::RunConfig;
use crate::error::{io_err, CliError};
use crate::output::{float, write_csv, write_json};

pub const TRAIN_DIR: &str = "train";

#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub n_t: usize,
    /// NaN when the held-out fold has no comparable pair.
    pub c_index: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub folds: Vec<FoldResult>,
    pub mean_c_index: f64,
    pub std_c_index: f64,
}

/// Training seed of fold `k`, derived from the run seed.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    rng::derive_seed(seed, "fold", &[&fold.to_string()])
}

pub fn checkpoint_path(train_dir: &Path, fold: usize) -> std::path::PathBuf {
    train_dir.join(format!("fold_{fold}.ckpt"))
}

/// Held-out concordance, NaN (with a warning) when it is undefined.
pub(crate) fn held_out_c_index(risks: &[f64], records: &[SurvivalRecord], fold: usize) -> Result<f64, CliError> {
    match concordance_index(risks, records) {
        Ok(c) => Ok(c),
        Err(Error::NoComparablePairs) => {
            log::warn!("fold {fold}: no comparable held-out pair");
            Ok(f64::NAN)
        }
        Err(e) => Err(e.into()),
    }
}

pub(crate) fn fold_members(cohort: &Cohort, folds: &[Vec<String>], k: usize) -> (Vec<usize>, Vec<usize>) {
    let test = cohort.index_of(&folds[k]);
    let train = (0..cohort.samples.len()).filter(|i| !test.contains(i)).collect();
    (train, test)
}

pub(crate) fn fold_spec(cfg: &TrainConfig, cohort: &Cohort, train: &[usize]) -> Result<(ModelSpec, usize), CliError> {
    let n_t = if cfg.modalities.contains(Modality::Text) {
        let lengths: Vec<usize> = train.iter().map(|&i| cohort.report_lengths[i]).collect();
        n_t_from_lengths(&lengths, cfg.n_t_mode)?
    } else {
        0
    };
    let spec = ModelSpec::from_config(
        cfg,
        cohort.pathway_widths.clone(),
        cohort.d_t,
        cohort.d_h,
        n_t,
        cohort.max_segments(),
    );
    Ok((spec, n_t))
}

fn check_prototypes(cfg: &RunConfig, prototypes: &Path) -> Result<(), CliError> {
    let needs = cfg.train.modalities.contains(Modality::Histology) || cfg.train.modalities.contains(Modality::Text);
    if !needs {
        return Ok(());
    }
    let path = prototypes.join("settings.json");
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let s: PrototypeSettings = serde_json::from_str(&text).map_err(Error::from)?;
    for m in cfg.train.modalities.iter() {
        if m != Modality::Pathway && !s.modalities.contains(m) {
            return Err(Error::Invalid(format!("prototypes were built without {} inputs", m.name())).into());
        }
    }
    if cfg.train.modalities.contains(Modality::Histology) && s.n_h != cfg.train.n_h {
        return Err(Error::Invalid(format!(
            "prototypes have N_H = {}, configuration expects {}",
            s.n_h, cfg.train.n_h
        ))
        .into());
    }
    Ok(())
}

/// k-fold training. Writes one checkpoint per fold plus history, held-out
/// predictions, a per-fold summary and the effective configuration under
/// `<out>/train`. A fold without events is skipped and reported; the other
/// folds still run.
pub fn train(cfg: &RunConfig) -> Result<TrainSummary, CliError> {
    let out = cfg.out()?;
    let prototypes = out.join(PROTOTYPES_DIR);
    check_prototypes(cfg, &prototypes)?;
    let cohort = load_cohort(
        cfg.manifest()?,
        cfg.train.modalities,
        &prototypes,
        cfg.train.n_h,
        cfg.train.n_p,
    )?;
    let folds = kfold_split(&cohort.ids(), cfg.folds, cfg.train.seed)?;
    let dir = out.join(TRAIN_DIR);
    fresh_dir(&dir)?;
    write_json(&dir.join("effective_config.json"), cfg)?;
    if prototypes.join("settings.json").is_file() {
        fs::copy(prototypes.join("settings.json"), dir.join("prototype_settings.json")).map_err(|e| io_err(&dir, e))?;
    }

    let mut results = Vec::new();
    let mut failures = Vec::new();
    let mut history_rows = Vec::new();
    let mut prediction_rows = Vec::new();
    for k in 0..folds.len() {
        let (train_idx, test_idx) = fold_members(&cohort, &folds, k);
        let fold_cfg = TrainConfig {
            seed: fold_seed(cfg.train.seed, k),
            ..cfg.train.clone()
        };
        let (spec, n_t) = fold_spec(&fold_cfg, &cohort, &train_idx)?;
        let samples: Vec<Sample> = train_idx.iter().map(|&i| cohort.samples[i].clone()).collect();
        let records: Vec<SurvivalRecord> = train_idx.iter().map(|&i| cohort.records[i].clone()).collect();
        let (mut model, history): (_, History) = match survival::train(&samples, &records, spec, &fold_cfg) {
            Ok(r) => r,
            Err(e @ (Error::NoEvents | Error::EmptyTrainingSet)) => {
                log::error!("fold {k}: {e}");
                failures.push(format!("fold {k}: {e}"));
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        // predictions below must match what a reloaded checkpoint gives
        Checkpoint::round_to_f32(&mut model.params);
        let test: Vec<&Sample> = test_idx.iter().map(|&i| &cohort.samples[i]).collect();
        let test_records: Vec<SurvivalRecord> = test_idx.iter().map(|&i| cohort.records[i].clone()).collect();
        let risks = model.predict_batch(&test)?;
        let c_index = held_out_c_index(&risks, &test_records, k)?;
        log::info!("fold {k}: held-out C-index {c_index:.4}");

        let fingerprints = Fingerprints {
            gene_order: cohort.fingerprints.gene_order.clone(),
            pathways: cohort.fingerprints.pathways.clone(),
        };
        Checkpoint::new(fold_cfg, fingerprints, model).save(&checkpoint_path(&dir, k))?;
        for e in &history {
            history_rows.push(vec![
                k.to_string(),
                e.epoch.to_string(),
                float(e.learning_rate),
                float(e.loss),
                e.degenerate_batches.to_string(),
            ]);
        }
        for (r, risk) in test_records.iter().zip(&risks) {
            prediction_rows.push(vec![
                k.to_string(),
                r.patient_id.clone(),
                float(r.time),
                u8::from(r.event).to_string(),
                float(*risk),
            ]);
        }
        results.push(FoldResult {
            fold: k,
            n_train: train_idx.len(),
            n_test: test_idx.len(),
            n_t,
            c_index,
        });
    }

    write_csv(
        &dir.join("history.csv"),
        &["fold", "epoch", "learning_rate", "loss", "degenerate_batches"],
        &history_rows,
    )?;
    write_csv(
        &dir.join("predictions.csv"),
        &["fold", "patient_id", "time", "event", "risk"],
        &prediction_rows,
    )?;
    let cs: Vec<f64> = results.iter().map(|r| r.c_index).filter(|c| c.is_finite()).collect();
    let (mean, std) = mean_std(&cs);
    let mut rows: Vec<Vec<String>> = results
        .iter()
        .map(|r| {
            vec![
                r.fold.to_string(),
                r.n_train.to_string(),
                r.n_test.to_string(),
                r.n_t.to_string(),
                float(r.c_index),
            ]
        })
        .collect();
    rows.push(vec![
        "mean".into(),
        String::new(),
        String::new(),
        String::new(),
        float(mean),
    ]);
    rows.push(vec![
        "std".into(),
        String::new(),
        String::new(),
        String::new(),
        float(std),
    ]);
    write_csv(
        &dir.join("summary.csv"),
        &["fold", "n_train", "n_test", "n_t", "c_index"],
        &rows,
    )?;

    if !failures.is_empty() {
        return Err(CliError::Failed(failures));
    }
    Ok(TrainSummary {
        folds: results,
        mean_c_index: mean,
        std_c_index: std,
    })
}
