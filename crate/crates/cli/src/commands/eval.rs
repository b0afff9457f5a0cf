use std::collections::BTreeMap;
use std::fs;

use ps3_core::checkpoint::{Checkpoint, Fingerprints};
use ps3_core::data::kfold_split;
use ps3_core::eval::{cross_attention_summary, km_curve, log_rank, mean_std, stratify_median, RiskGroup};
use ps3_core::model::Explanation;
use ps3_core::{Error, Modality, SurvivalRecord};

use super::train::{checkpoint_path, fold_members, held_out_c_index, TRAIN_DIR};
use crate::args::CommonArgs;
use crate::cohort::{load_cohort, Cohort, PROTOTYPES_DIR};
use crate::config::RunConfig;
use crate::error::{io_err, CliError};
use crate::output::{float, write_csv};

pub const EVAL_DIR: &str = "eval";

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub folds: Vec<(usize, usize, f64)>,
    pub mean_c_index: f64,
    pub std_c_index: f64,
    /// NaN when one risk group is empty or there are no events.
    pub log_rank_p: f64,
}

fn training_config(args: &CommonArgs) -> Result<RunConfig, CliError> {
    let stray = args.config.is_some()
        || args.seed.is_some()
        || args.folds.is_some()
        || args.fusion_mode.is_some()
        || args.modalities.is_some()
        || args.epochs.is_some()
        || args.lr.is_some()
        || args.batch_size.is_some();
    if stray {
        return Err(CliError::Usage(
            "eval reads its settings from the training run; only --out and --manifest are accepted".into(),
        ));
    }
    let out = args
        .out
        .clone()
        .ok_or_else(|| CliError::Usage("--out is required".into()))?;
    let path = out.join(TRAIN_DIR).join("effective_config.json");
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let mut cfg = RunConfig::parse(&text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    cfg.out = Some(out);
    if args.manifest.is_some() {
        cfg.manifest = args.manifest.clone();
    }
    Ok(cfg)
}

fn token_names(cohort: &Cohort, ex: &Explanation, m: Modality, count: usize) -> Vec<String> {
    match m {
        Modality::Pathway => cohort.pathway_names.clone(),
        Modality::Histology => (0..count).map(|i| format!("prototype_{i}")).collect(),
        Modality::Text => (0..count)
            .map(|i| match ex.text_sources.get(i).copied().flatten() {
                Some(s) => format!("segment_{s}"),
                None => format!("empty_{i}"),
            })
            .collect(),
    }
}

#[derive(Default)]
struct AttentionAccumulator {
    // (query, key) -> token -> dispersions over patients
    pairs: BTreeMap<(Modality, Modality), BTreeMap<String, Vec<f64>>>,
}

impl AttentionAccumulator {
    fn add(&mut self, cohort: &Cohort, ex: &Explanation) -> Result<(), CliError> {
        for &q in &ex.fusion.modalities {
            for &k in &ex.fusion.modalities {
                if q == k {
                    continue;
                }
                let (_, count) = ex.fusion.span(k).expect("fused modality");
                let names = token_names(cohort, ex, k, count);
                match cross_attention_summary(&ex.fusion, &ex.validity, &names, q, k) {
                    Ok(s) => {
                        let slot = self.pairs.entry((q, k)).or_default();
                        for (name, d) in s.ranking {
                            slot.entry(name).or_default().push(d);
                        }
                    }
                    Err(Error::BlockEmpty(_)) => {}
                    Err(e) => return Err(e.into()),
                }
            }
        }
        Ok(())
    }

    fn rows(&self) -> Vec<Vec<String>> {
        let mut rows = Vec::new();
        for ((q, k), tokens) in &self.pairs {
            let mut ranked: Vec<(&String, f64)> = tokens
                .iter()
                .map(|(name, ds)| (name, ds.iter().sum::<f64>() / ds.len() as f64))
                .collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));
            for (rank, (name, d)) in ranked.into_iter().enumerate() {
                rows.push(vec![
                    q.name().into(),
                    k.name().into(),
                    (rank + 1).to_string(),
                    name.clone(),
                    float(d),
                ]);
            }
        }
        rows
    }
}

/// Held-out evaluation of a finished training run. Risks are split at each
/// fold's median, then pooled for the survival curves and log-rank test.
pub fn eval(args: &CommonArgs, attention: bool) -> Result<EvalSummary, CliError> {
    let cfg = training_config(args)?;
    let out = cfg.out()?;
    let train_dir = out.join(TRAIN_DIR);
    let cohort = load_cohort(
        cfg.manifest()?,
        cfg.train.modalities,
        &out.join(PROTOTYPES_DIR),
        cfg.train.n_h,
        cfg.train.n_p,
    )?;
    let expected = Fingerprints {
        gene_order: cohort.fingerprints.gene_order.clone(),
        pathways: cohort.fingerprints.pathways.clone(),
    };
    let folds = kfold_split(&cohort.ids(), cfg.folds, cfg.train.seed)?;

    let mut per_fold = Vec::new();
    let mut low = Vec::new();
    let mut high = Vec::new();
    let mut acc = AttentionAccumulator::default();
    for k in 0..folds.len() {
        let path = checkpoint_path(&train_dir, k);
        if !path.is_file() {
            log::warn!("fold {k}: no checkpoint at {}", path.display());
            continue;
        }
        let ckpt = Checkpoint::load(&path)?;
        ckpt.check_fingerprints(&expected)?;
        let (_, test_idx) = fold_members(&cohort, &folds, k);
        let samples: Vec<_> = test_idx.iter().map(|&i| &cohort.samples[i]).collect();
        let records: Vec<SurvivalRecord> = test_idx.iter().map(|&i| cohort.records[i].clone()).collect();
        let risks = ckpt.model.predict_batch(&samples)?;
        per_fold.push((k, test_idx.len(), held_out_c_index(&risks, &records, k)?));
        for (g, r) in stratify_median(&risks).into_iter().zip(records) {
            match g {
                RiskGroup::Low => low.push(r),
                RiskGroup::High => high.push(r),
            }
        }
        if attention {
            for s in &samples {
                acc.add(&cohort, &ckpt.model.explain(s)?)?;
            }
        }
    }
    if per_fold.is_empty() {
        return Err(Error::Invalid(format!("no fold checkpoints under {}", train_dir.display())).into());
    }

    let dir = out.join(EVAL_DIR);
    super::fresh_dir(&dir)?;
    let cs: Vec<f64> = per_fold.iter().map(|f| f.2).filter(|c| c.is_finite()).collect();
    let (mean, std) = mean_std(&cs);
    let mut rows: Vec<Vec<String>> = per_fold
        .iter()
        .map(|(k, n, c)| vec![k.to_string(), n.to_string(), float(*c)])
        .collect();
    rows.push(vec!["mean".into(), String::new(), float(mean)]);
    rows.push(vec!["std".into(), String::new(), float(std)]);
    write_csv(&dir.join("metrics.csv"), &["fold", "n_test", "c_index"], &rows)?;

    let mut km_rows = Vec::new();
    for (group, recs) in [(RiskGroup::Low, &low), (RiskGroup::High, &high)] {
        let curve = km_curve(recs);
        for i in 0..curve.times.len() {
            km_rows.push(vec![
                group.name().into(),
                float(curve.times[i]),
                float(curve.survival[i]),
                curve.at_risk[i].to_string(),
            ]);
        }
    }
    write_csv(&dir.join("km.csv"), &["group", "time", "survival", "at_risk"], &km_rows)?;

    let (statistic, p) = match log_rank(&low, &high) {
        Ok(r) => (r.statistic, r.p_value),
        Err(e) => {
            log::warn!("log-rank test undefined: {e}");
            (f64::NAN, f64::NAN)
        }
    };
    write_csv(
        &dir.join("logrank.csv"),
        &["statistic", "p_value", "n_low", "n_high"],
        &[vec![
            float(statistic),
            float(p),
            low.len().to_string(),
            high.len().to_string(),
        ]],
    )?;
    if attention {
        write_csv(
            &dir.join("attention_summary.csv"),
            &["query", "key", "rank", "token", "mean_dispersion"],
            &acc.rows(),
        )?;
    }
    Ok(EvalSummary {
        folds: per_fold,
        mean_c_index: mean,
        std_c_index: std,
        log_rank_p: p,
    })
}
