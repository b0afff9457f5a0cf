//! Diagnostic prototypes: the most attended segments of a pathology report.
//!
//! Reports are sequences of segment embeddings of varying length. A
//! single-head self-attention over the (padded, masked) segments yields both
//! post-attention embeddings and an attention matrix; each segment's
//! importance is the average attention it receives from the valid query
//! rows, and the top `N_T` segments become the report's prototypes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{BinaryMask, Matrix};
use crate::params::{Affine, AttentionWeights};
use crate::tape::{Tape, Var};

pub type TextAttentionParams = AttentionWeights;

#[derive(Clone, Debug, PartialEq)]
pub struct ReportFeatures {
    pub patient_id: String,
    pub segments: Matrix,
}

impl ReportFeatures {
    pub fn new(patient_id: impl Into<String>, segments: Matrix) -> Result<Self> {
        if segments.rows() == 0 {
            return Err(Error::EmptyReport);
        }
        if !segments.is_finite() {
            return Err(Error::Invalid("report embeddings must be finite".into()));
        }
        Ok(Self {
            patient_id: patient_id.into(),
            segments,
        })
    }

    pub fn len(&self) -> usize {
        self.segments.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.rows() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch {
    pub data: Vec<Matrix>,
    pub masks: Vec<BinaryMask>,
    pub m: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticPrototypes {
    pub embeddings: Matrix,
    pub validity: BinaryMask,
    pub source_indices: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NtMode {
    #[default]
    Average,
    P90,
}

impl std::str::FromStr for NtMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" | "avg" => Ok(Self::Average),
            "p90" => Ok(Self::P90),
            other => Err(Error::Invalid(format!("N_T mode {other}"))),
        }
    }
}

/// Splits a report on blank lines. Segments are trimmed and empty ones
/// dropped; a single newline does not split.
pub fn segment_report(raw_text: &str) -> Result<Vec<String>> {
    let mut segments = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in raw_text.lines() {
        if line.trim().is_empty() {
            flush_segment(&mut current, &mut segments);
        } else {
            current.push(line);
        }
    }
    flush_segment(&mut current, &mut segments);
    if segments.is_empty() {
        return Err(Error::EmptyReport);
    }
    Ok(segments)
}

fn flush_segment(lines: &mut Vec<&str>, out: &mut Vec<String>) {
    if lines.is_empty() {
        return;
    }
    let joined = lines.join("\n");
    let trimmed = joined.trim();
    if !trimmed.is_empty() {
        out.push(trimmed.to_string());
    }
    lines.clear();
}

/// Zero-pads (or truncates) every report to `m` segments.
pub fn pad_batch(reports: &[ReportFeatures], m: usize) -> PaddedBatch {
    let mut data = Vec::with_capacity(reports.len());
    let mut masks = Vec::with_capacity(reports.len());
    for r in reports {
        let keep = r.len().min(m);
        let mut padded = Matrix::zeros(m, r.segments.cols());
        for i in 0..keep {
            padded.row_mut(i).copy_from_slice(r.segments.row(i));
        }
        data.push(padded);
        masks.push(BinaryMask::prefix(m, keep));
    }
    PaddedBatch { data, masks, m }
}

/// Masked single-head self-attention over one report recorded on `tape`.
/// Returns `(Z, A)`; padded query rows of both are zero.
pub fn self_attention_on_tape(
    tape: &mut Tape,
    segments: Var,
    mask: &[bool],
    weights: &AttentionWeights<Var>,
) -> (Var, Var) {
    let d = tape.value(segments).cols();
    let q = tape.matmul(segments, weights.query);
    let k = tape.matmul(segments, weights.key);
    let v = tape.matmul(segments, weights.value);
    let logits = tape.matmul_bt(q, k);
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let attn = tape.masked_softmax(logits, mask);
    let attn = tape.mask_rows(attn, mask);
    let z = tape.matmul(attn, v);
    (z, attn)
}

/// Self-attention for every report of a padded batch.
pub fn text_self_attention(batch: &PaddedBatch, params: &TextAttentionParams) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
    let mut zs = Vec::with_capacity(batch.data.len());
    let mut attns = Vec::with_capacity(batch.data.len());
    for (h, mask) in batch.data.iter().zip(&batch.masks) {
        if h.cols() != params.dim() {
            return Err(Error::shape("text_self_attention", params.dim(), h.cols()));
        }
        if mask.count() == 0 {
            return Err(Error::AllMasked);
        }
        let mut tape = Tape::new();
        let w = params.map(&mut |m| tape.constant(m.clone()));
        let hv = tape.constant(h.clone());
        let (z, a) = self_attention_on_tape(&mut tape, hv, mask.as_bools(), &w);
        zs.push(tape.value(z).clone());
        attns.push(tape.value(a).clone());
    }
    Ok((zs, attns))
}

/// Average attention each key receives from the valid query rows; zero at
/// padded keys.
pub fn importance_scores(attn: &Matrix, mask: &BinaryMask) -> Vec<f64> {
    let valid = mask.count().max(1) as f64;
    let mut scores = vec![0.0; attn.cols()];
    for i in (0..attn.rows()).filter(|&i| mask.get(i)) {
        for (s, a) in scores.iter_mut().zip(attn.row(i)) {
            *s += a;
        }
    }
    for (j, s) in scores.iter_mut().enumerate() {
        *s = if mask.get(j) { *s / valid } else { 0.0 };
    }
    scores
}

/// Indices of the `min(n_t, valid)` best valid segments, by descending score
/// and then ascending position, padded with `None` up to `n_t`.
pub fn top_segments(scores: &[f64], mask: &BinaryMask, n_t: usize) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).filter(|&j| mask.get(j)).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    (0..n_t).map(|slot| order.get(slot).copied()).collect()
}

pub fn select_prototypes(z: &Matrix, scores: &[f64], mask: &BinaryMask, n_t: usize) -> DiagnosticPrototypes {
    let picks = top_segments(scores, mask, n_t);
    let mut embeddings = Matrix::zeros(n_t, z.cols());
    for (slot, p) in picks.iter().enumerate() {
        if let Some(src) = p {
            embeddings.row_mut(slot).copy_from_slice(z.row(*src));
        }
    }
    DiagnosticPrototypes {
        embeddings,
        validity: picks.iter().map(Option::is_some).collect::<Vec<_>>().into(),
        source_indices: picks.into_iter().flatten().collect(),
    }
}

pub fn project_text(protos: &DiagnosticPrototypes, f_alpha: &Affine) -> Result<Matrix> {
    if protos.embeddings.cols() != f_alpha.input_dim() {
        return Err(Error::shape(
            "project_text",
            f_alpha.input_dim(),
            protos.embeddings.cols(),
        ));
    }
    Ok(f_alpha.apply(&protos.embeddings))
}

/// Number of diagnostic prototypes from training report lengths.
pub fn n_t_from_lengths(lengths: &[usize], mode: NtMode) -> Result<usize> {
    if lengths.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let n = match mode {
        NtMode::Average => {
            let mean = lengths.iter().sum::<usize>() as f64 / lengths.len() as f64;
            (mean + 0.5).floor() as usize
        }
        NtMode::P90 => {
            let mut sorted = lengths.to_vec();
            sorted.sort_unstable();
            // nearest rank
            let rank = (0.9 * sorted.len() as f64).ceil() as usize;
            sorted[rank.max(1) - 1]
        }
    };
    Ok(n.max(1))
}

pub fn compute_n_t(training_reports: &[ReportFeatures], mode: NtMode) -> Result<usize> {
    let lengths: Vec<usize> = training_reports.iter().map(ReportFeatures::len).collect();
    n_t_from_lengths(&lengths, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::normal_matrix;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn report(rows: usize, d: usize, seed: u64) -> ReportFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ReportFeatures::new("p", normal_matrix(rows, d, 1.0, &mut rng)).unwrap()
    }

    fn random_params(d: usize, seed: u64) -> TextAttentionParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AttentionWeights {
            query: normal_matrix(d, d, 0.5, &mut rng),
            key: normal_matrix(d, d, 0.5, &mut rng),
            value: normal_matrix(d, d, 0.5, &mut rng),
        }
    }

    #[test]
    fn segmentation_examples() {
        assert_eq!(segment_report("A\n\nB").unwrap(), vec!["A", "B"]);
        assert_eq!(segment_report("A\nB").unwrap(), vec!["A\nB"]);
        assert_eq!(segment_report("  \n\n X \n\n\n Y ").unwrap(), vec!["X", "Y"]);
        assert!(matches!(segment_report(" \n\n  \n"), Err(Error::EmptyReport)));
    }

    #[test]
    fn padding_examples() {
        let b = pad_batch(&[report(2, 3, 1)], 4);
        assert_eq!(b.masks[0].bits(), vec![1, 1, 0, 0]);
        assert!(b.data[0].row(2).iter().chain(b.data[0].row(3)).all(|&v| v == 0.0));

        let r = report(4, 3, 2);
        let b = pad_batch(std::slice::from_ref(&r), 4);
        assert_eq!(b.masks[0], BinaryMask::ones(4));
        assert_eq!(b.data[0], r.segments);

        let r = report(7, 3, 3);
        let b = pad_batch(std::slice::from_ref(&r), 4);
        assert_eq!(b.masks[0], BinaryMask::ones(4));
        assert_eq!(b.data[0], r.segments.select_rows(&[0, 1, 2, 3]));
    }

    #[test]
    fn single_segment_attends_to_itself() {
        let r = report(1, 4, 4);
        let p = random_params(4, 5);
        let (z, a) = text_self_attention(&pad_batch(std::slice::from_ref(&r), 1), &p).unwrap();
        assert_eq!(a[0].as_slice(), &[1.0]);
        let v = r.segments.matmul(&p.value);
        assert!(z[0].max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn zero_query_key_gives_uniform_attention() {
        let r = report(2, 3, 6);
        let p = AttentionWeights {
            query: Matrix::zeros(3, 3),
            key: Matrix::zeros(3, 3),
            value: Matrix::identity(3),
        };
        let (z, a) = text_self_attention(&pad_batch(std::slice::from_ref(&r), 2), &p).unwrap();
        assert_eq!(a[0].as_slice(), &[0.5; 4]);
        for i in 0..2 {
            for c in 0..3 {
                let mean = 0.5 * (r.segments.get(0, c) + r.segments.get(1, c));
                assert!((z[0].get(i, c) - mean).abs() < 1e-15);
            }
        }
    }

    /// Scalar-loop attention oracle for one padded report.
    fn loop_attention(h: &Matrix, mask: &BinaryMask, p: &TextAttentionParams) -> (Matrix, Matrix) {
        let (m, d) = h.shape();
        let proj = |w: &Matrix| {
            let mut out = Matrix::zeros(m, d);
            for i in 0..m {
                for j in 0..d {
                    out.set(i, j, (0..d).map(|k| h.get(i, k) * w.get(k, j)).sum());
                }
            }
            out
        };
        let (q, k, v) = (proj(&p.query), proj(&p.key), proj(&p.value));
        let mut a = Matrix::zeros(m, m);
        let mut z = Matrix::zeros(m, d);
        for i in (0..m).filter(|&i| mask.get(i)) {
            let logits: Vec<f64> = (0..m)
                .map(|j| (0..d).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mx = (0..m)
                .filter(|&j| mask.get(j))
                .map(|j| logits[j])
                .fold(f64::MIN, f64::max);
            let denom: f64 = (0..m).filter(|&j| mask.get(j)).map(|j| (logits[j] - mx).exp()).sum();
            for j in (0..m).filter(|&j| mask.get(j)) {
                a.set(i, j, (logits[j] - mx).exp() / denom);
            }
            for c in 0..d {
                z.set(i, c, (0..m).map(|j| a.get(i, j) * v.get(j, c)).sum());
            }
        }
        (z, a)
    }

    #[test]
    fn attention_matches_loop_oracle() {
        let r = report(3, 5, 7);
        let p = random_params(5, 8);
        let batch = pad_batch(std::slice::from_ref(&r), 4);
        let (z, a) = text_self_attention(&batch, &p).unwrap();
        let (zo, ao) = loop_attention(&batch.data[0], &batch.masks[0], &p);
        assert!(z[0].max_abs_diff(&zo) < 1e-10);
        assert!(a[0].max_abs_diff(&ao) < 1e-10);
    }

    #[test]
    fn importance_examples() {
        let third = 1.0 / 3.0;
        let a = Matrix::filled(3, 3, third);
        let s = importance_scores(&a, &BinaryMask::ones(3));
        assert!(s.iter().all(|v| (v - third).abs() < 1e-15));

        let a = Matrix::from_rows(&[[1.0, 0.0, 0.0]; 3]).unwrap();
        assert_eq!(importance_scores(&a, &BinaryMask::ones(3)), vec![1.0, 0.0, 0.0]);

        let a = Matrix::from_rows(&[[0.5, 0.5, 0.0], [0.25, 0.75, 0.0], [0.0, 0.0, 0.0]]).unwrap();
        let mask = BinaryMask::prefix(3, 2);
        assert_eq!(importance_scores(&a, &mask), vec![0.375, 0.625, 0.0]);
    }

    #[test]
    fn selection_examples() {
        let z = Matrix::from_rows(&[[1.0], [2.0], [3.0]]).unwrap();
        let p = select_prototypes(&z, &[0.1, 0.5, 0.4], &BinaryMask::ones(3), 2);
        assert_eq!(p.source_indices, vec![1, 2]);
        assert_eq!(p.embeddings.as_slice(), &[2.0, 3.0]);

        let p = select_prototypes(&z, &[0.5, 0.5, 0.0], &BinaryMask::ones(3), 1);
        assert_eq!(p.source_indices, vec![0]);

        let p = select_prototypes(&z, &[0.6, 0.4, 0.0], &BinaryMask::prefix(3, 2), 4);
        assert_eq!(p.validity.bits(), vec![1, 1, 0, 0]);
        assert_eq!(p.embeddings.as_slice(), &[1.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn projection_examples() {
        let protos = DiagnosticPrototypes {
            embeddings: Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap(),
            validity: BinaryMask::ones(2),
            source_indices: vec![0, 1],
        };
        assert_eq!(
            project_text(&protos, &Affine::zeros(2, 3)).unwrap(),
            Matrix::zeros(2, 3)
        );
        let id = Affine {
            weight: Matrix::identity(2),
            bias: Matrix::zeros(1, 2),
        };
        assert_eq!(project_text(&protos, &id).unwrap(), protos.embeddings);
        assert!(project_text(&protos, &Affine::zeros(3, 3)).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = Affine {
            weight: normal_matrix(4, 3, 1.0, &mut rng),
            bias: normal_matrix(1, 3, 1.0, &mut rng),
        };
        let x = normal_matrix(1, 4, 1.0, &mut rng);
        let single = DiagnosticPrototypes {
            embeddings: x.clone(),
            validity: BinaryMask::ones(1),
            source_indices: vec![0],
        };
        let got = project_text(&single, &f).unwrap();
        for j in 0..3 {
            let want: f64 = f.bias.get(0, j) + (0..4).map(|i| x.get(0, i) * f.weight.get(i, j)).sum::<f64>();
            assert!((got.get(0, j) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn n_t_examples() {
        assert_eq!(n_t_from_lengths(&[2, 2, 2], NtMode::Average).unwrap(), 2);
        assert_eq!(n_t_from_lengths(&[1, 2], NtMode::Average).unwrap(), 2);
        let ten: Vec<usize> = (1..=10).collect();
        assert_eq!(n_t_from_lengths(&ten, NtMode::P90).unwrap(), 9);
        assert!(matches!(
            n_t_from_lengths(&[], NtMode::Average),
            Err(Error::EmptyTrainingSet)
        ));
    }

    proptest! {
        #[test]
        fn attention_rows_are_distributions(rows in 1usize..8, pad in 0usize..4, seed in 0u64..1000) {
            let r = report(rows, 4, seed);
            let p = random_params(4, seed + 1);
            let batch = pad_batch(std::slice::from_ref(&r), rows + pad);
            let (_, a) = text_self_attention(&batch, &p).unwrap();
            let s = importance_scores(&a[0], &batch.masks[0]);
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for i in 0..rows {
                let row_sum: f64 = a[0].row(i)[..rows].iter().sum();
                prop_assert!((row_sum - 1.0).abs() < 1e-9);
                for j in rows..rows + pad {
                    prop_assert_eq!(a[0].get(i, j), 0.0);
                }
            }
        }

        #[test]
        fn padding_does_not_change_results(rows in 1usize..8, pad in 1usize..5, seed in 0u64..1000) {
            let r = report(rows, 4, seed);
            let p = random_params(4, seed + 7);
            let n_t = 3;
            let tight = pad_batch(std::slice::from_ref(&r), rows);
            let loose = pad_batch(std::slice::from_ref(&r), rows + pad);
            let (zt, at) = text_self_attention(&tight, &p).unwrap();
            let (zl, al) = text_self_attention(&loose, &p).unwrap();
            for i in 0..rows {
                for j in 0..rows {
                    prop_assert!((at[0].get(i, j) - al[0].get(i, j)).abs() < 1e-9);
                }
                for c in 0..4 {
                    prop_assert!((zt[0].get(i, c) - zl[0].get(i, c)).abs() < 1e-9);
                }
            }
            let st = importance_scores(&at[0], &tight.masks[0]);
            let sl = importance_scores(&al[0], &loose.masks[0]);
            for j in 0..rows {
                prop_assert!((st[j] - sl[j]).abs() < 1e-9);
            }
            let pt = select_prototypes(&zt[0], &st, &tight.masks[0], n_t);
            let pl = select_prototypes(&zl[0], &sl, &loose.masks[0], n_t);
            prop_assert_eq!(pt.source_indices, pl.source_indices);
            prop_assert!(pt.embeddings.max_abs_diff(&pl.embeddings) < 1e-9);
        }

        #[test]
        fn selection_is_permutation_equivariant(rows in 2usize..8, seed in 0u64..1000, rot in 1usize..7) {
            let r = report(rows, 4, seed);
            let p = random_params(4, seed + 3);
            let perm: Vec<usize> = (0..rows).map(|i| (i + rot) % rows).collect();
            let permuted = ReportFeatures::new("p", r.segments.select_rows(&perm)).unwrap();
            let run = |rep: &ReportFeatures| {
                let b = pad_batch(std::slice::from_ref(rep), rows);
                let (z, a) = text_self_attention(&b, &p).unwrap();
                let s = importance_scores(&a[0], &b.masks[0]);
                select_prototypes(&z[0], &s, &b.masks[0], 2)
            };
            let base = run(&r);
            let moved = run(&permuted);
            // permuted position k holds original segment perm[k]
            let mapped: Vec<usize> = moved.source_indices.iter().map(|&k| perm[k]).collect();
            prop_assert_eq!(mapped, base.source_indices);
            prop_assert!(base.embeddings.max_abs_diff(&moved.embeddings) < 1e-9);
        }
    }
}
