//! Model inputs assembled from a manifest and a run's prototype directory.

use std::path::{Path, PathBuf};

use ps3_core::checkpoint::Fingerprints;
use ps3_core::data::{load_gene_order, load_matrix, parse_gmt, Manifest};
use ps3_core::pathway_proto::{build_masks, pathway_slices, ExpressionProfile};
use ps3_core::{Error, Matrix, Modality, ModalitySet, Sample, SurvivalRecord};

use crate::error::CliError;

pub const PROTOTYPES_DIR: &str = "prototypes";

pub fn slide_path(prototypes: &Path, patient: &str) -> PathBuf {
    prototypes.join("slides").join(format!("{patient}.ps3e"))
}

pub fn report_path(prototypes: &Path, patient: &str) -> PathBuf {
    prototypes.join("reports").join(format!("{patient}.ps3e"))
}

#[derive(Clone, Debug)]
pub struct Cohort {
    pub modalities: ModalitySet,
    pub records: Vec<SurvivalRecord>,
    pub samples: Vec<Sample>,
    pub pathway_names: Vec<String>,
    pub pathway_widths: Vec<usize>,
    pub d_t: usize,
    pub d_h: usize,
    pub report_lengths: Vec<usize>,
    pub fingerprints: Fingerprints,
}

impl Cohort {
    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.patient_id.clone()).collect()
    }

    /// Longest report in the cohort; shorter reports are padded up to it.
    pub fn max_segments(&self) -> usize {
        self.report_lengths.iter().copied().max().unwrap_or(0)
    }

    pub fn index_of(&self, ids: &[String]) -> Vec<usize> {
        let all = self.ids();
        ids.iter()
            .map(|id| all.iter().position(|a| a == id).expect("id from this cohort"))
            .collect()
    }
}

fn missing_prototype(patient: &str, what: &str, path: &Path) -> CliError {
    CliError::Core(Error::Invalid(format!(
        "patient {patient}: no {what} at {} (run `ps3 prototype` first)",
        path.display()
    )))
}

/// Loads survival labels, pathway slices and the staged slide and report
/// matrices for `modalities`.
pub fn load_cohort(
    manifest_path: &Path,
    modalities: ModalitySet,
    prototypes: &Path,
    n_h: usize,
    n_p: usize,
) -> Result<Cohort, CliError> {
    let manifest = Manifest::load(manifest_path)?;
    for m in modalities.iter() {
        if !manifest.modalities.contains(m) {
            return Err(Error::Invalid(format!("manifest provides no {} input", m.name())).into());
        }
    }
    let records = manifest.records()?;

    let mut fingerprints = Fingerprints {
        gene_order: None,
        pathways: None,
    };
    let mut pathway_names = Vec::new();
    let mut pathway_widths = Vec::new();
    let mut slices: Vec<Option<Vec<Vec<f64>>>> = vec![None; manifest.patients.len()];
    if modalities.contains(Modality::Pathway) {
        let need = |p: &Option<PathBuf>| manifest.resolve(p.as_deref().expect("validated manifest"));
        let order = load_gene_order(&need(&manifest.gene_order))?;
        let sets = parse_gmt(&need(&manifest.gene_sets))?;
        let masks = build_masks(&sets, &order)?;
        if masks.len() != n_p {
            return Err(Error::Invalid(format!(
                "gene set file lists {} pathways, configuration expects n_p = {n_p}",
                masks.len()
            ))
            .into());
        }
        let expression = load_matrix(&need(&manifest.expression))?;
        for (slot, p) in slices.iter_mut().zip(&manifest.patients) {
            let row = p.expression_row.expect("validated manifest");
            if row >= expression.rows() {
                return Err(
                    Error::Invalid(format!("patient {}: expression row {row} out of range", p.patient_id)).into(),
                );
            }
            let profile = ExpressionProfile {
                patient_id: p.patient_id.clone(),
                values: expression.row(row).to_vec(),
            };
            *slot = Some(pathway_slices(&profile, &masks)?);
        }
        fingerprints.gene_order = Some(order.fingerprint());
        fingerprints.pathways = Some(masks.fingerprint());
        pathway_widths = masks.widths();
        pathway_names = masks.names.clone();
    }

    let mut samples = Vec::with_capacity(manifest.patients.len());
    let mut report_lengths = Vec::new();
    let (mut d_t, mut d_h) = (0, 0);
    for (p, pathways) in manifest.patients.iter().zip(slices) {
        let id = &p.patient_id;
        let histology = if modalities.contains(Modality::Histology) {
            let path = slide_path(prototypes, id);
            if !path.is_file() {
                return Err(missing_prototype(id, "slide representation", &path));
            }
            let m = load_matrix(&path)?;
            if m.rows() != n_h || m.cols() % 2 == 0 {
                return Err(Error::Invalid(format!(
                    "patient {id}: slide representation is {}x{}, expected {n_h} rows of 1 + 2·d_h values",
                    m.rows(),
                    m.cols()
                ))
                .into());
            }
            d_h = (m.cols() - 1) / 2;
            Some(m)
        } else {
            None
        };
        let text = if modalities.contains(Modality::Text) {
            let path = report_path(prototypes, id);
            if !path.is_file() {
                return Err(missing_prototype(id, "report embeddings", &path));
            }
            let m: Matrix = load_matrix(&path)?;
            d_t = m.cols();
            report_lengths.push(m.rows());
            Some(m)
        } else {
            None
        };
        samples.push(Sample {
            patient_id: id.clone(),
            pathways,
            histology,
            text,
        });
    }
    Ok(Cohort {
        modalities,
        records,
        samples,
        pathway_names,
        pathway_widths,
        d_t,
        d_h,
        report_lengths,
        fingerprints,
    })
}
