use std::fs;
use std::path::Path;

use ps3_core::data::{load_matrix, write_matrix, Manifest, ManifestPatient};
use ps3_core::histo_proto::{fit_gmm, slide_representation, PatchFeatures, DEFAULT_MAX_ITERS, DEFAULT_REL_TOL};
use ps3_core::text_proto::ReportFeatures;
use ps3_core::{rng, Error, Modality, ModalitySet};
use serde::{Deserialize, Serialize};

use super::fresh_dir;
use crate::cohort::{report_path, slide_path, PROTOTYPES_DIR};
use crate::config::RunConfig;
use crate::error::{io_err, CliError};
use crate::output::{float, write_csv, write_json};

/// Settings the prototypes were built with, checked again by `train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSettings {
    pub modalities: ModalitySet,
    pub n_h: usize,
    pub seed: u64,
    pub em_max_iters: usize,
    pub em_rel_tol: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSummary {
    pub slides: usize,
    pub reports: usize,
    /// Slides whose EM trace decreased anywhere by more than 1e-8.
    pub non_monotone: Vec<String>,
}

/// Fits a mixture per slide and stages every report under
/// `<out>/prototypes`. Output is built in a scratch directory and only moved
/// into place when every patient succeeded.
pub fn prototype(cfg: &RunConfig) -> Result<PrototypeSummary, CliError> {
    let manifest = Manifest::read(cfg.manifest()?)?;
    let modalities = cfg.train.modalities;
    for m in modalities.iter() {
        if !manifest.modalities.contains(m) {
            return Err(Error::Invalid(format!("manifest provides no {} input", m.name())).into());
        }
    }
    let out = cfg.out()?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let dest = out.join(PROTOTYPES_DIR);
    let scratch = out.join(format!("{PROTOTYPES_DIR}.partial"));
    fresh_dir(&scratch)?;
    match build(cfg, &manifest, modalities, &scratch) {
        Ok(summary) => {
            if dest.exists() {
                fs::remove_dir_all(&dest).map_err(|e| io_err(&dest, e))?;
            }
            fs::rename(&scratch, &dest).map_err(|e| io_err(&dest, e))?;
            Ok(summary)
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&scratch);
            Err(e)
        }
    }
}

fn build(
    cfg: &RunConfig,
    manifest: &Manifest,
    modalities: ModalitySet,
    dir: &Path,
) -> Result<PrototypeSummary, CliError> {
    for sub in ["slides", "em", "reports"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| io_err(dir, e))?;
    }
    let settings = PrototypeSettings {
        modalities,
        n_h: cfg.train.n_h,
        seed: cfg.train.seed,
        em_max_iters: DEFAULT_MAX_ITERS,
        em_rel_tol: DEFAULT_REL_TOL,
    };
    let mut summary = PrototypeSummary {
        slides: 0,
        reports: 0,
        non_monotone: Vec::new(),
    };
    let mut failures = Vec::new();
    let mut lengths = Vec::new();
    for p in &manifest.patients {
        if modalities.contains(Modality::Histology) {
            match fit_slide(manifest, p, &settings, dir) {
                Ok(monotone) => {
                    summary.slides += 1;
                    if !monotone {
                        log::warn!("patient {}: EM log-likelihood decreased", p.patient_id);
                        summary.non_monotone.push(p.patient_id.clone());
                    }
                }
                Err(e) => failures.push(format!("patient {}: {e}", p.patient_id)),
            }
        }
        if modalities.contains(Modality::Text) {
            match stage_report(manifest, p, dir) {
                Ok(n) => {
                    summary.reports += 1;
                    lengths.push(vec![p.patient_id.clone(), n.to_string()]);
                }
                Err(e) => failures.push(format!("patient {}: {e}", p.patient_id)),
            }
        }
    }
    if !failures.is_empty() {
        return Err(CliError::Failed(failures));
    }
    write_csv(&dir.join("report_lengths.csv"), &["patient_id", "segments"], &lengths)?;
    write_json(&dir.join("settings.json"), &settings)?;
    Ok(summary)
}

fn fit_slide(manifest: &Manifest, p: &ManifestPatient, s: &PrototypeSettings, dir: &Path) -> Result<bool, CliError> {
    let rel = p
        .slide
        .as_ref()
        .ok_or_else(|| Error::Invalid("no slide in manifest".into()))?;
    let patches = PatchFeatures::new(p.patient_id.clone(), load_matrix(&manifest.resolve(rel))?)?;
    let seed = rng::derive_seed(s.seed, rng::GMM, &[&p.patient_id]);
    let (params, trace) = fit_gmm(&patches, s.n_h, seed, s.em_max_iters, s.em_rel_tol)?;
    write_matrix(&slide_path(dir, &p.patient_id), &slide_representation(&params).matrix)?;
    let rows: Vec<Vec<String>> = trace
        .log_likelihoods
        .iter()
        .enumerate()
        .map(|(i, ll)| vec![(i + 1).to_string(), float(*ll)])
        .collect();
    let em = dir.join("em").join(format!("{}.csv", p.patient_id));
    write_csv(&em, &["iteration", "avg_log_likelihood"], &rows)?;
    Ok(trace.log_likelihoods.windows(2).all(|w| w[1] >= w[0] - 1e-8))
}

fn stage_report(manifest: &Manifest, p: &ManifestPatient, dir: &Path) -> Result<usize, CliError> {
    let rel = p
        .report
        .as_ref()
        .ok_or_else(|| Error::Invalid("no report in manifest".into()))?;
    let report = ReportFeatures::new(p.patient_id.clone(), load_matrix(&manifest.resolve(rel))?)?;
    write_matrix(&report_path(dir, &p.patient_id), &report.segments)?;
    Ok(report.len())
}
