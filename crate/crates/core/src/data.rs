//! File formats, cohort manifests, synthetic cohorts and fold splitting.
//!
//! Matrix files start with the magic `PS3E`, a version byte, the row and
//! column counts as little-endian `u32`, then `rows × cols` little-endian
//! `f32` values in row-major order. Files ending in `.csv` are read as plain
//! comma-separated numbers instead.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{Modality, ModalitySet};
use crate::numerics::Matrix;
use crate::pathway_proto::{GeneOrder, GeneSet};
use crate::rng;
use crate::survival::SurvivalRecord;

pub const MATRIX_MAGIC: &[u8; 4] = b"PS3E";
pub const MATRIX_VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 4 + 4;

pub fn encode_matrix(m: &Matrix) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.len());
    out.extend_from_slice(MATRIX_MAGIC);
    out.push(MATRIX_VERSION);
    let rows = u32::try_from(m.rows()).map_err(|_| Error::Invalid("too many rows".into()))?;
    let cols = u32::try_from(m.cols()).map_err(|_| Error::Invalid("too many columns".into()))?;
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for (i, &v) in m.as_slice().iter().enumerate() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::NonFiniteValue {
                path: PathBuf::new(),
                row: i / m.cols().max(1),
                col: i % m.cols().max(1),
            });
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_matrix(bytes: &[u8], path: &Path) -> Result<Matrix> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MATRIX_MAGIC || bytes[4] != MATRIX_VERSION {
        return Err(Error::BadMagic { path: path.into() });
    }
    let rows = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes"));
    let cols = u32::from_le_bytes(bytes[9..13].try_into().expect("4 bytes"));
    let payload = &bytes[HEADER_LEN..];
    let expected = u64::from(rows) * u64::from(cols) * 4;
    if expected != payload.len() as u64 {
        return Err(Error::ShapeOverflow {
            path: path.into(),
            rows: rows.into(),
            cols: cols.into(),
        });
    }
    let (rows, cols) = (rows as usize, cols as usize);
    let mut data = Vec::with_capacity(rows * cols);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(Error::NonFiniteValue {
                path: path.into(),
                row: i / cols,
                col: i % cols,
            });
        }
        data.push(f64::from(v));
    }
    Matrix::from_vec(rows, cols, data)
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let bytes = encode_matrix(m).map_err(|e| match e {
        Error::NonFiniteValue { row, col, .. } => Error::NonFiniteValue {
            path: path.into(),
            row,
            col,
        },
        other => other,
    })?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn parse_matrix_csv(text: &str, path: &Path) -> Result<Matrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::MalformedLine {
            path: path.into(),
            line: line + 1,
            reason: e.to_string(),
        })?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(col, field)| {
                let v: f64 = field.parse().map_err(|_| Error::MalformedLine {
                    path: path.into(),
                    line: line + 1,
                    reason: format!("not a number: {field:?}"),
                })?;
                if !v.is_finite() {
                    return Err(Error::NonFiniteValue {
                        path: path.into(),
                        row: line,
                        col,
                    });
                }
                Ok(v)
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Matrix::from_vec(0, 0, Vec::new());
    }
    Matrix::from_rows(&rows)
}

/// Reads a binary matrix file, or a CSV file by extension.
pub fn load_matrix(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if is_csv(path) {
        let text = String::from_utf8(bytes).map_err(|_| Error::MalformedLine {
            path: path.into(),
            line: 0,
            reason: "not UTF-8".into(),
        })?;
        parse_matrix_csv(&text, path)
    } else {
        decode_matrix(&bytes, path)
    }
}

pub fn parse_gmt_str(text: &str, path: &Path) -> Result<Vec<GeneSet>> {
    let mut names = HashSet::new();
    let mut sets = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(Error::MalformedLine {
                path: path.into(),
                line: i + 1,
                reason: "expected name, description and at least one gene".into(),
            });
        }
        let name = fields[0].trim().to_string();
        if !names.insert(name.clone()) {
            return Err(Error::DuplicateSetName(name));
        }
        let mut seen = HashSet::new();
        let genes = fields[2..]
            .iter()
            .map(|g| g.trim())
            .filter(|g| !g.is_empty() && seen.insert(g.to_string()))
            .map(str::to_string)
            .collect();
        sets.push(GeneSet { name, genes });
    }
    Ok(sets)
}

/// Gene sets from a GMT file: `name TAB description TAB gene TAB ...`.
pub fn parse_gmt(path: &Path) -> Result<Vec<GeneSet>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_gmt_str(&text, path)
}

pub fn write_gmt(path: &Path, sets: &[GeneSet]) -> Result<()> {
    let mut out = String::new();
    for s in sets {
        out.push_str(&s.name);
        out.push_str("\tsynthetic");
        for g in &s.genes {
            out.push('\t');
            out.push_str(g);
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// One gene symbol per line.
pub fn load_gene_order(path: &Path) -> Result<GeneOrder> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    GeneOrder::new(
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect(),
    )
}

pub fn parse_survival_str(text: &str, path: &Path) -> Result<Vec<SurvivalRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| Error::MalformedLine {
        path: path.into(),
        line: 1,
        reason: e.to_string(),
    })?;
    if header.iter().collect::<Vec<_>>() != ["patient_id", "time", "event"] {
        return Err(Error::MalformedLine {
            path: path.into(),
            line: 1,
            reason: "header must be patient_id,time,event".into(),
        });
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::MalformedLine {
            path: path.into(),
            line,
            reason: e.to_string(),
        })?;
        let id = rec[0].to_string();
        let time: f64 = rec[1].parse().map_err(|_| Error::MalformedLine {
            path: path.into(),
            line,
            reason: format!("bad time {:?}", &rec[1]),
        })?;
        if !time.is_finite() {
            return Err(Error::MalformedLine {
                path: path.into(),
                line,
                reason: "time must be finite".into(),
            });
        }
        let event = match &rec[2] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::BadEventFlag {
                    patient: id,
                    value: other.to_string(),
                })
            }
        };
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicatePatient(id));
        }
        out.push(SurvivalRecord::new(id, time, event)?);
    }
    Ok(out)
}

/// Survival labels from a `patient_id,time,event` CSV.
pub fn load_survival(path: &Path) -> Result<Vec<SurvivalRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_survival_str(&text, path)
}

pub fn write_survival(path: &Path, records: &[SurvivalRecord]) -> Result<()> {
    let mut out = String::from("patient_id,time,event\n");
    for r in records {
        out.push_str(&format!("{},{:?},{}\n", r.patient_id, r.time, u8::from(r.event)));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestPatient {
    pub patient_id: String,
    /// Segment-embedding matrix of the pathology report.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
    /// Patch-embedding matrix of the slide.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slide: Option<PathBuf>,
    /// Row of the cohort expression matrix.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expression_row: Option<usize>,
}

/// Cohort description; relative paths resolve against the manifest's
/// directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub modalities: ModalitySet,
    pub survival: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gene_order: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gene_sets: Option<PathBuf>,
    /// Patients × genes expression matrix.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expression: Option<PathBuf>,
    pub patients: Vec<ManifestPatient>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Parses the manifest without touching the files it references.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest = serde_json::from_str(&text)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m = Self::read(path)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Checks id uniqueness, modality consistency and file existence.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let exists = |p: &Path| -> Result<()> {
            let full = self.resolve(p);
            if full.is_file() {
                Ok(())
            } else {
                Err(Error::io(
                    &full,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "referenced file does not exist"),
                ))
            }
        };
        exists(&self.survival)?;
        if self.modalities.contains(Modality::Pathway) {
            for (what, p) in [
                ("gene_order", &self.gene_order),
                ("gene_sets", &self.gene_sets),
                ("expression", &self.expression),
            ] {
                let p = p
                    .as_ref()
                    .ok_or_else(|| Error::Invalid(format!("manifest: pathway modality needs {what}")))?;
                exists(p)?;
            }
        }
        for pt in &self.patients {
            if !seen.insert(pt.patient_id.as_str()) {
                return Err(Error::DuplicatePatient(pt.patient_id.clone()));
            }
            let need = |m: Modality, present: bool| -> Result<()> {
                if self.modalities.contains(m) && !present {
                    Err(Error::Invalid(format!(
                        "patient {}: no {} input",
                        pt.patient_id,
                        m.name()
                    )))
                } else {
                    Ok(())
                }
            };
            need(Modality::Text, pt.report.is_some())?;
            need(Modality::Histology, pt.slide.is_some())?;
            need(Modality::Pathway, pt.expression_row.is_some())?;
            let named = |e: Error| Error::Invalid(format!("patient {}: {e}", pt.patient_id));
            if self.modalities.contains(Modality::Text) {
                exists(pt.report.as_ref().expect("checked")).map_err(named)?;
            }
            if self.modalities.contains(Modality::Histology) {
                exists(pt.slide.as_ref().expect("checked")).map_err(named)?;
            }
        }
        Ok(())
    }

    /// Survival records in manifest patient order.
    pub fn records(&self) -> Result<Vec<SurvivalRecord>> {
        let all = load_survival(&self.resolve(&self.survival))?;
        self.patients
            .iter()
            .map(|p| {
                all.iter()
                    .find(|r| r.patient_id == p.patient_id)
                    .cloned()
                    .ok_or_else(|| Error::Invalid(format!("patient {}: no survival record", p.patient_id)))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_patients: usize,
    /// Inclusive range of report segment counts.
    pub n_segments: (usize, usize),
    /// Inclusive range of patch counts per slide.
    pub n_patches: (usize, usize),
    pub d_t: usize,
    pub d_h: usize,
    /// Total gene count, including genes outside every pathway.
    pub n_genes: usize,
    pub n_pathways: usize,
    pub pathway_size: usize,
    /// Mixture components the patches are drawn from.
    pub n_clusters: usize,
    pub signal_modality: Modality,
    pub signal_strength: f64,
    pub censoring_rate: f64,
    /// Scale of the exponential baseline hazard.
    pub baseline_hazard: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_patients: 300,
            n_segments: (3, 9),
            n_patches: (200, 400),
            d_t: 32,
            d_h: 16,
            n_genes: 600,
            n_pathways: 50,
            pathway_size: 10,
            n_clusters: 4,
            signal_modality: Modality::Pathway,
            signal_strength: 2.0,
            censoring_rate: 0.3,
            baseline_hazard: 0.01,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |s: &str| Err(Error::Invalid(format!("synthetic spec: {s}")));
        if self.n_patients == 0 {
            return bad("n_patients must be positive");
        }
        if self.n_segments.0 == 0 || self.n_segments.0 > self.n_segments.1 {
            return bad("n_segments range");
        }
        if self.n_patches.0 == 0 || self.n_patches.0 > self.n_patches.1 {
            return bad("n_patches range");
        }
        if self.d_t == 0 || self.d_h == 0 || self.n_clusters == 0 {
            return bad("dimensions must be positive");
        }
        if self.n_pathways == 0 || self.pathway_size == 0 || self.n_pathways * self.pathway_size > self.n_genes {
            return bad("pathways must fit in n_genes");
        }
        if !(0.0..1.0).contains(&self.censoring_rate) {
            return bad("censoring_rate must lie in [0, 1)");
        }
        if !(self.baseline_hazard > 0.0) || !self.signal_strength.is_finite() {
            return bad("baseline_hazard and signal_strength");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPatient {
    pub patient_id: String,
    pub segments: Matrix,
    pub patches: Matrix,
    pub expression: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCohort {
    pub gene_order: GeneOrder,
    pub gene_sets: Vec<GeneSet>,
    pub patients: Vec<SyntheticPatient>,
    pub records: Vec<SurvivalRecord>,
    /// Log-hazard of each patient, the generating signal.
    pub latent_risk: Vec<f64>,
}

fn unit_vector<R: Rng>(d: usize, rng: &mut R) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}

fn standardize(x: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    for v in x.iter_mut() {
        *v = if sd > 0.0 { (*v - mean) / sd } else { 0.0 };
    }
}

/// Generates a cohort whose log-hazard is `signal_strength` times a
/// standardized linear feature of `signal_modality`:
/// - pathway: mean expression of the first pathway's genes;
/// - histology: mean projection of the patches on a hidden direction;
/// - text: mean projection of the report segments on a hidden direction.
///
/// Event times are exponential with rate `baseline_hazard·exp(risk)`. Each
/// patient is censored with probability `censoring_rate`, at a uniform
/// fraction of the event time.
pub fn synth_cohort(spec: &SyntheticSpec) -> Result<SyntheticCohort> {
    spec.validate()?;
    let mut r = rng::stream(spec.seed, rng::SYNTH);
    let n_genes = spec.n_genes;
    let symbols: Vec<String> = (0..n_genes).map(|g| format!("GENE{g:05}")).collect();
    let gene_sets: Vec<GeneSet> = (0..spec.n_pathways)
        .map(|p| GeneSet {
            name: format!("PATHWAY_{p:02}"),
            genes: symbols[p * spec.pathway_size..(p + 1) * spec.pathway_size].to_vec(),
        })
        .collect();
    let gene_order = GeneOrder::new(symbols)?;

    let centers: Vec<Vec<f64>> = (0..spec.n_clusters)
        .map(|_| {
            (0..spec.d_h)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut r);
                    3.0 * z
                })
                .collect::<Vec<f64>>()
        })
        .collect();
    let patch_dir = unit_vector(spec.d_h, &mut r);
    let text_dir = unit_vector(spec.d_t, &mut r);
    let noise = Normal::new(0.0, 0.5).expect("valid std");

    let mut patients = Vec::with_capacity(spec.n_patients);
    let mut feature = Vec::with_capacity(spec.n_patients);
    for i in 0..spec.n_patients {
        let activity: Vec<f64> = (0..spec.n_pathways).map(|_| StandardNormal.sample(&mut r)).collect();
        let mut expression = Vec::with_capacity(n_genes);
        for g in 0..n_genes {
            let p = g / spec.pathway_size;
            let base = if p < spec.n_pathways { activity[p] } else { 0.0 };
            let e: f64 = if p < spec.n_pathways {
                noise.sample(&mut r)
            } else {
                StandardNormal.sample(&mut r)
            };
            expression.push(base + e);
        }

        let slide_shift: f64 = StandardNormal.sample(&mut r);
        let mix: Vec<f64> = (0..spec.n_clusters).map(|_| r.random::<f64>() + 0.1).collect();
        let mix_total: f64 = mix.iter().sum();
        let n_patch = r.random_range(spec.n_patches.0..=spec.n_patches.1);
        let mut patches = Matrix::zeros(n_patch, spec.d_h);
        for row in 0..n_patch {
            let mut u = r.random::<f64>() * mix_total;
            let mut c = 0;
            while c + 1 < spec.n_clusters && u >= mix[c] {
                u -= mix[c];
                c += 1;
            }
            for (k, v) in patches.row_mut(row).iter_mut().enumerate() {
                let e: f64 = StandardNormal.sample(&mut r);
                *v = centers[c][k] + slide_shift * patch_dir[k] + e;
            }
        }

        let report_shift: f64 = StandardNormal.sample(&mut r);
        let n_seg = r.random_range(spec.n_segments.0..=spec.n_segments.1);
        let mut segments = Matrix::zeros(n_seg, spec.d_t);
        for row in 0..n_seg {
            for (k, v) in segments.row_mut(row).iter_mut().enumerate() {
                let e: f64 = StandardNormal.sample(&mut r);
                *v = report_shift * text_dir[k] + e;
            }
        }

        let proj_mean = |m: &Matrix, dir: &[f64]| {
            m.row_iter()
                .map(|row| row.iter().zip(dir).map(|(a, b)| a * b).sum::<f64>())
                .sum::<f64>()
                / m.rows() as f64
        };
        feature.push(match spec.signal_modality {
            Modality::Pathway => expression[..spec.pathway_size].iter().sum::<f64>() / spec.pathway_size as f64,
            Modality::Histology => proj_mean(&patches, &patch_dir),
            Modality::Text => proj_mean(&segments, &text_dir),
        });
        patients.push(SyntheticPatient {
            patient_id: format!("P{i:04}"),
            segments,
            patches,
            expression,
        });
    }

    standardize(&mut feature);
    let latent_risk: Vec<f64> = feature.iter().map(|f| spec.signal_strength * f).collect();
    let mut records = Vec::with_capacity(spec.n_patients);
    for (p, eta) in patients.iter().zip(&latent_risk) {
        let rate = spec.baseline_hazard * eta.exp();
        let t: f64 = Exp::new(rate).expect("positive rate").sample(&mut r);
        let censored = r.random::<f64>() < spec.censoring_rate;
        let time = if censored { r.random::<f64>() * t } else { t };
        records.push(SurvivalRecord::new(p.patient_id.clone(), time, !censored)?);
    }
    Ok(SyntheticCohort {
        gene_order,
        gene_sets,
        patients,
        records,
        latent_risk,
    })
}

/// Writes a cohort as files plus `manifest.json` under `dir` and returns the
/// manifest path.
pub fn write_cohort(cohort: &SyntheticCohort, dir: &Path) -> Result<PathBuf> {
    for sub in ["reports", "slides"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir, e))?;
    }
    let genes = cohort.gene_order.symbols().join("\n") + "\n";
    fs::write(dir.join("genes.txt"), genes).map_err(|e| Error::io(dir, e))?;
    write_gmt(&dir.join("pathways.gmt"), &cohort.gene_sets)?;
    let rows: Vec<&[f64]> = cohort.patients.iter().map(|p| p.expression.as_slice()).collect();
    write_matrix(&dir.join("expression.ps3e"), &Matrix::from_rows(&rows)?)?;
    write_survival(&dir.join("survival.csv"), &cohort.records)?;
    let mut patients = Vec::with_capacity(cohort.patients.len());
    for (i, p) in cohort.patients.iter().enumerate() {
        let report = PathBuf::from("reports").join(format!("{}.ps3e", p.patient_id));
        let slide = PathBuf::from("slides").join(format!("{}.ps3e", p.patient_id));
        write_matrix(&dir.join(&report), &p.segments)?;
        write_matrix(&dir.join(&slide), &p.patches)?;
        patients.push(ManifestPatient {
            patient_id: p.patient_id.clone(),
            report: Some(report),
            slide: Some(slide),
            expression_row: Some(i),
        });
    }
    let manifest = Manifest {
        modalities: ModalitySet::ALL,
        survival: "survival.csv".into(),
        gene_order: Some("genes.txt".into()),
        gene_sets: Some("pathways.gmt".into()),
        expression: Some("expression.ps3e".into()),
        patients,
        root: dir.to_path_buf(),
    };
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}

/// Seeded shuffle, then contiguous folds whose sizes differ by at most one.
pub fn kfold_split(patient_ids: &[String], k: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    let n = patient_ids.len();
    if k < 2 || n < k {
        return Err(Error::TooFewPatients { n, k });
    }
    let mut ids = patient_ids.to_vec();
    ids.shuffle(&mut rng::stream(seed, rng::SPLIT));
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = n / k + usize::from(f < n % k);
        folds.push(ids[start..start + len].to_vec());
        start += len;
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::concordance_index;
    use crate::survival::cox_loss;
    use proptest::prelude::*;

    #[test]
    fn matrix_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let m = Matrix::from_rows(&[[1.5, -2.0, 0.25, 3.0], [0.0, 0.125, 7.0, -0.5], [9.0, 8.0, 7.0, 6.0]]).unwrap();
        let path = dir.path().join("m.ps3e");
        write_matrix(&path, &m).unwrap();
        assert_eq!(load_matrix(&path).unwrap(), m);

        let bytes = fs::read(&path).unwrap();
        assert!(matches!(decode_matrix(&bytes[..7], &path), Err(Error::BadMagic { .. })));
        assert!(matches!(
            decode_matrix(&bytes[..20], &path),
            Err(Error::ShapeOverflow { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_matrix(&bad, &path), Err(Error::BadMagic { .. })));
        let mut nan = bytes.clone();
        nan[13..17].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            decode_matrix(&nan, &path),
            Err(Error::NonFiniteValue { row: 0, col: 0, .. })
        ));

        let csv = dir.path().join("m.csv");
        fs::write(&csv, "1,2\n3,4").unwrap();
        assert_eq!(
            load_matrix(&csv).unwrap(),
            Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap()
        );
        fs::write(&csv, "1,2\n3").unwrap();
        assert!(load_matrix(&csv).is_err());
    }

    #[test]
    fn gmt_examples() {
        let p = Path::new("x.gmt");
        let sets = parse_gmt_str("HALLMARK_X\tdesc\tG1\tG2\n", p).unwrap();
        assert_eq!(
            sets,
            vec![GeneSet {
                name: "HALLMARK_X".into(),
                genes: vec!["G1".into(), "G2".into()]
            }]
        );
        assert!(matches!(
            parse_gmt_str("NAME\tdesc\n", p),
            Err(Error::MalformedLine { line: 1, .. })
        ));
        let dedup = parse_gmt_str("A\td\tG1\tG2\tG1\n", p).unwrap();
        assert_eq!(dedup[0].genes, vec!["G1".to_string(), "G2".into()]);
        assert!(matches!(
            parse_gmt_str("A\td\tG1\nA\td\tG2\n", p),
            Err(Error::DuplicateSetName(_))
        ));
    }

    #[test]
    fn survival_examples() {
        let p = Path::new("s.csv");
        let ok = parse_survival_str("patient_id,time,event\np1,100,1\n", p).unwrap();
        assert_eq!(ok, vec![SurvivalRecord::new("p1", 100.0, true).unwrap()]);
        assert!(matches!(
            parse_survival_str("patient_id,time,event\np1,-5,1\n", p),
            Err(Error::NegativeTime(_))
        ));
        assert!(matches!(
            parse_survival_str("patient_id,time,event\np1,5,1\np1,6,0\n", p),
            Err(Error::DuplicatePatient(_))
        ));
        assert!(matches!(
            parse_survival_str("patient_id,time,event\np1,5,2\n", p),
            Err(Error::BadEventFlag { .. })
        ));
    }

    #[test]
    fn kfold_examples() {
        let ids = |n: usize| (0..n).map(|i| format!("p{i}")).collect::<Vec<_>>();
        let f = kfold_split(&ids(10), 5, 1).unwrap();
        assert!(f.iter().all(|x| x.len() == 2));
        let mut sizes: Vec<usize> = kfold_split(&ids(11), 5, 1).unwrap().iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![2, 2, 2, 2, 3]);
        assert_eq!(
            kfold_split(&ids(11), 5, 9).unwrap(),
            kfold_split(&ids(11), 5, 9).unwrap()
        );
        assert!(matches!(kfold_split(&ids(3), 5, 1), Err(Error::TooFewPatients { .. })));
    }

    fn small_spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_patients: 20,
            n_patches: (20, 30),
            n_genes: 60,
            n_pathways: 5,
            seed,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn synthetic_cohort_is_deterministic() {
        assert_eq!(
            synth_cohort(&small_spec(3)).unwrap(),
            synth_cohort(&small_spec(3)).unwrap()
        );
        assert_ne!(
            synth_cohort(&small_spec(3)).unwrap(),
            synth_cohort(&small_spec(4)).unwrap()
        );
    }

    #[test]
    fn zero_signal_has_constant_risk() {
        let c = synth_cohort(&SyntheticSpec {
            signal_strength: 0.0,
            ..small_spec(5)
        })
        .unwrap();
        assert!(c.latent_risk.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn censoring_fraction_matches_rate() {
        let spec = SyntheticSpec {
            n_patients: 1000,
            n_patches: (1, 2),
            n_genes: 60,
            n_pathways: 5,
            ..SyntheticSpec::default()
        };
        let c = synth_cohort(&spec).unwrap();
        let frac = c.records.iter().filter(|r| !r.event).count() as f64 / 1000.0;
        let se = (0.3f64 * 0.7 / 1000.0).sqrt();
        assert!((frac - 0.3).abs() < 3.0 * se, "{frac}");
    }

    /// One-variable Cox fit by Newton steps on the partial likelihood.
    fn fit_cox_1d(x: &[f64], recs: &[SurvivalRecord]) -> f64 {
        let mut beta = 0.0;
        for _ in 0..50 {
            let h = 1e-4;
            let f = |b: f64| {
                cox_loss(&x.iter().map(|v| b * v).collect::<Vec<_>>(), recs)
                    .unwrap()
                    .value
            };
            let g = (f(beta + h) - f(beta - h)) / (2.0 * h);
            let c = (f(beta + h) - 2.0 * f(beta) + f(beta - h)) / (h * h);
            if c <= 0.0 {
                break;
            }
            beta -= g / c;
        }
        beta
    }

    #[test]
    fn planted_pathway_signal_is_recoverable_by_a_cox_oracle() {
        let spec = SyntheticSpec {
            n_patients: 300,
            n_patches: (1, 2),
            ..SyntheticSpec::default()
        };
        let c = synth_cohort(&spec).unwrap();
        let feature: Vec<f64> = c
            .patients
            .iter()
            .map(|p| p.expression[..10].iter().sum::<f64>() / 10.0)
            .collect();
        let (train_x, test_x) = feature.split_at(150);
        let (train_r, test_r) = c.records.split_at(150);
        let beta = fit_cox_1d(train_x, train_r);
        assert!(beta > 0.0);
        let risks: Vec<f64> = test_x.iter().map(|v| beta * v).collect();
        let ci = concordance_index(&risks, test_r).unwrap();
        assert!(ci >= 0.75, "{ci}");
    }

    #[test]
    fn written_cohort_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let c = synth_cohort(&small_spec(6)).unwrap();
        let path = write_cohort(&c, dir.path()).unwrap();
        let m = Manifest::load(&path).unwrap();
        assert_eq!(m.patients.len(), 20);
        let recs = m.records().unwrap();
        assert_eq!(recs.len(), 20);
        for (a, b) in recs.iter().zip(&c.records) {
            assert_eq!(a.time, b.time);
            assert_eq!(a.event, b.event);
        }
        assert_eq!(parse_gmt(&dir.path().join("pathways.gmt")).unwrap(), c.gene_sets);
        assert_eq!(load_gene_order(&dir.path().join("genes.txt")).unwrap(), c.gene_order);
        fs::remove_file(dir.path().join("slides/P0003.ps3e")).unwrap();
        assert!(Manifest::load(&path).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn folds_are_disjoint_and_exhaustive(n in 2usize..80, k in 2usize..10, seed in any::<u64>()) {
            prop_assume!(n >= k);
            let ids: Vec<String> = (0..n).map(|i| format!("p{i}")).collect();
            let folds = kfold_split(&ids, k, seed).unwrap();
            let mut all: Vec<String> = folds.concat();
            all.sort();
            let mut expected = ids.clone();
            expected.sort();
            prop_assert_eq!(all, expected);
            let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }

        #[test]
        fn matrix_bytes_round_trip(rows in 0usize..6, cols in 0usize..6, bits in prop::collection::vec(any::<u32>(), 36)) {
            let data: Vec<f64> = (0..rows * cols)
                .map(|i| {
                    let f = f32::from_bits(bits[i]);
                    if f.is_finite() { f64::from(f) } else { 1.0 }
                })
                .collect();
            let m = Matrix::from_vec(rows, cols, data).unwrap();
            let bytes = encode_matrix(&m).unwrap();
            let back = decode_matrix(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(encode_matrix(&back).unwrap(), bytes);
            prop_assert!(back.as_slice().iter().zip(m.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
