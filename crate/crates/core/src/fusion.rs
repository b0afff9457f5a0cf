//! Block-attention fusion of pathway, histology and text prototype tokens.
//!
//! Tokens of all enabled modalities are widened with one shared learnable
//! embedding, concatenated into a single sequence and projected once into
//! queries, keys and values. The logits are assembled from the nine
//! modality-pair blocks `Q^m (K^n)ᵀ`, scaled by `1/√d`, and normalized with a
//! row-wise softmax across the whole key axis, so every query distributes
//! its attention over all modalities at once.
//!
//! Two ablations share the same parameters: `late` attends within each
//! modality only, `hierarchical` first fuses histology with text and then
//! fuses that result with the pathways using a second set of projections.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{BinaryMask, Matrix};
use crate::params::AttentionWeights;
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Pathway,
    Histology,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Pathway, Modality::Histology, Modality::Text];

    pub fn letter(self) -> char {
        match self {
            Modality::Pathway => 'p',
            Modality::Histology => 'h',
            Modality::Text => 't',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Pathway => "pathway",
            Modality::Histology => "histology",
            Modality::Text => "text",
        }
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "p" | "pathway" => Ok(Modality::Pathway),
            "h" | "histology" => Ok(Modality::Histology),
            "t" | "text" => Ok(Modality::Text),
            other => Err(Error::Invalid(format!("modality {other}"))),
        }
    }
}

/// Non-empty subset of modalities, always in pathway, histology, text order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModalitySet {
    bits: [bool; 3],
}

impl ModalitySet {
    pub const ALL: ModalitySet = ModalitySet { bits: [true; 3] };

    pub fn new(modalities: &[Modality]) -> Result<Self> {
        let mut bits = [false; 3];
        for m in modalities {
            bits[*m as usize] = true;
        }
        if !bits.iter().any(|&b| b) {
            return Err(Error::NoModalitiesEnabled);
        }
        Ok(Self { bits })
    }

    pub fn contains(self, m: Modality) -> bool {
        self.bits[m as usize]
    }

    pub fn iter(self) -> impl Iterator<Item = Modality> {
        Modality::ALL.into_iter().filter(move |m| self.contains(*m))
    }

    pub fn len(self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }
}

impl Default for ModalitySet {
    fn default() -> Self {
        Self::ALL
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for m in self.iter() {
            write!(f, "{}", m.letter())?;
        }
        Ok(())
    }
}

impl FromStr for ModalitySet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mods = s
            .chars()
            .map(|c| c.to_string().parse::<Modality>())
            .collect::<Result<Vec<_>>>()?;
        let set = Self::new(&mods)?;
        if set.len() != s.chars().count() {
            return Err(Error::Invalid(format!("repeated modality in {s}")));
        }
        Ok(set)
    }
}

impl Serialize for ModalitySet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModalitySet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    #[default]
    Full,
    Late,
    Hierarchical,
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "late" => Ok(Self::Late),
            "hierarchical" => Ok(Self::Hierarchical),
            other => Err(Error::Invalid(format!("fusion mode {other}"))),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::Late => "late",
            Self::Hierarchical => "hierarchical",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalityTokens {
    pub modality: Modality,
    pub tokens: Matrix,
    pub validity: BinaryMask,
}

impl ModalityTokens {
    pub fn all_valid(modality: Modality, tokens: Matrix) -> Self {
        let validity = BinaryMask::ones(tokens.rows());
        Self {
            modality,
            tokens,
            validity,
        }
    }
}

/// Learnable embedding appended to every token plus the attention
/// projections. `second_stage` is only used by hierarchical fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams<T = Matrix> {
    pub learnable: T,
    pub attention: AttentionWeights<T>,
    pub second_stage: Option<AttentionWeights<T>>,
}

impl<T> FusionParams<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> FusionParams<U> {
        FusionParams {
            learnable: f(&self.learnable),
            attention: self.attention.map(f),
            second_stage: self.second_stage.as_ref().map(|s| s.map(f)),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
        f(&format!("{prefix}.learnable"), &self.learnable);
        self.attention.visit(&format!("{prefix}.attention"), f);
        if let Some(s) = &self.second_stage {
            s.visit(&format!("{prefix}.second_stage"), f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        f(&mut self.learnable);
        self.attention.visit_mut(f);
        if let Some(s) = &mut self.second_stage {
            s.visit_mut(f);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionOutput {
    pub modalities: Vec<Modality>,
    /// Fused tokens per modality, `N_m × d`, aligned with `modalities`.
    pub blocks: Vec<Matrix>,
    /// Attention over the concatenated sequence (the second stage for
    /// hierarchical fusion).
    pub attention: Matrix,
}

impl FusionOutput {
    pub fn block(&self, m: Modality) -> Option<&Matrix> {
        self.modalities.iter().position(|&x| x == m).map(|i| &self.blocks[i])
    }

    /// Row offset and length of modality `m` in the concatenated sequence.
    pub fn span(&self, m: Modality) -> Option<(usize, usize)> {
        let mut off = 0;
        for (x, b) in self.modalities.iter().zip(&self.blocks) {
            if *x == m {
                return Some((off, b.rows()));
            }
            off += b.rows();
        }
        None
    }
}

/// Per-patient token layout: modalities in canonical order with counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub parts: Vec<(Modality, usize)>,
}

impl TokenLayout {
    pub fn total(&self) -> usize {
        self.parts.iter().map(|p| p.1).sum()
    }

    pub fn span(&self, m: Modality) -> Option<(usize, usize)> {
        let mut off = 0;
        for &(x, n) in &self.parts {
            if x == m {
                return Some((off, n));
            }
            off += n;
        }
        None
    }

    pub fn counts(&self) -> Vec<usize> {
        self.parts.iter().map(|p| p.1).collect()
    }
}

/// Appends the same `1 × d_r` embedding to every token row.
pub fn append_learnable(tokens: &ModalityTokens, e_r: &Matrix) -> Result<Matrix> {
    if e_r.rows() != 1 {
        return Err(Error::shape("append_learnable", "1 row", e_r.rows()));
    }
    let (n, de) = tokens.tokens.shape();
    let mut out = Matrix::zeros(n, de + e_r.cols());
    for r in 0..n {
        let row = out.row_mut(r);
        row[..de].copy_from_slice(tokens.tokens.row(r));
        row[de..].copy_from_slice(e_r.as_slice());
    }
    Ok(out)
}

fn project_qkv(tape: &mut Tape, z: Var, w: &AttentionWeights<Var>) -> (Var, Var, Var) {
    (tape.matmul(z, w.query), tape.matmul(z, w.key), tape.matmul(z, w.value))
}

/// Attention of one sequence whose rows are partitioned into modality
/// `blocks`. Invalid keys are masked and invalid query rows zeroed.
fn attend_blocks(tape: &mut Tape, q: Var, k: Var, v: Var, blocks: &[usize], key_valid: &[bool]) -> (Var, Var) {
    let d = tape.value(q).cols();
    let logits = tape.block_matmul_bt(q, k, blocks);
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let attn = tape.masked_softmax(logits, key_valid);
    let attn = tape.mask_rows(attn, key_valid);
    let out = tape.matmul(attn, v);
    (out, attn)
}

/// Fuses a batch of patients recorded on `tape`.
///
/// `tokens` holds `b·n` rows (patient-major, modality order per `layout`)
/// that already carry the learnable embedding. Returns the fused tokens in
/// the same layout and, when `collect_attention` is set, each patient's
/// `n × n` attention matrix.
pub(crate) fn fuse_batch_on_tape(
    tape: &mut Tape,
    tokens: Var,
    layout: &TokenLayout,
    key_valid: &[bool],
    params: &FusionParams<Var>,
    mode: FusionMode,
    collect_attention: bool,
) -> Result<(Var, Vec<Matrix>)> {
    let n = layout.total();
    if n == 0 {
        return Err(Error::NoModalitiesEnabled);
    }
    let rows = tape.value(tokens).rows();
    let b = rows / n;
    assert_eq!(rows, b * n, "token rows must be a whole number of patients");
    assert_eq!(key_valid.len(), rows, "validity length");
    let counts = layout.counts();
    let mut outs = Vec::with_capacity(b);
    let mut attns = Vec::new();

    match mode {
        FusionMode::Full => {
            let (q, k, v) = project_qkv(tape, tokens, &params.attention);
            for j in 0..b {
                let qj = tape.slice_rows(q, j * n, n);
                let kj = tape.slice_rows(k, j * n, n);
                let vj = tape.slice_rows(v, j * n, n);
                let (o, a) = attend_blocks(tape, qj, kj, vj, &counts, &key_valid[j * n..(j + 1) * n]);
                outs.push(o);
                if collect_attention {
                    attns.push(tape.value(a).clone());
                }
            }
        }
        FusionMode::Late => {
            let (q, k, v) = project_qkv(tape, tokens, &params.attention);
            for j in 0..b {
                let mut full = Matrix::zeros(n, n);
                let mut off = 0;
                for &c in &counts {
                    if c == 0 {
                        continue;
                    }
                    let start = j * n + off;
                    let qj = tape.slice_rows(q, start, c);
                    let kj = tape.slice_rows(k, start, c);
                    let vj = tape.slice_rows(v, start, c);
                    let (o, a) = attend_blocks(tape, qj, kj, vj, &[c], &key_valid[start..start + c]);
                    outs.push(o);
                    if collect_attention {
                        let av = tape.value(a);
                        for r in 0..c {
                            full.row_mut(off + r)[off..off + c].copy_from_slice(av.row(r));
                        }
                    }
                    off += c;
                }
                if collect_attention {
                    attns.push(full);
                }
            }
        }
        FusionMode::Hierarchical => {
            let second = params
                .second_stage
                .as_ref()
                .ok_or_else(|| Error::Invalid("hierarchical fusion needs second-stage projections".into()))?;
            let p_span = layout.span(Modality::Pathway);
            let n_p = p_span.map_or(0, |s| s.1);
            let n_ht = n - n_p;
            // pathway tokens come first in the canonical layout
            let ht_blocks: Vec<usize> = layout
                .parts
                .iter()
                .filter(|p| p.0 != Modality::Pathway)
                .map(|p| p.1)
                .collect();
            let stage1 = if n_ht > 0 {
                let idx: Vec<Option<usize>> = (0..b).flat_map(|j| (j * n + n_p..(j + 1) * n).map(Some)).collect();
                let ht = tape.gather_rows(tokens, &idx);
                let (q, k, v) = project_qkv(tape, ht, &params.attention);
                let mut fused = Vec::with_capacity(b);
                for j in 0..b {
                    let qj = tape.slice_rows(q, j * n_ht, n_ht);
                    let kj = tape.slice_rows(k, j * n_ht, n_ht);
                    let vj = tape.slice_rows(v, j * n_ht, n_ht);
                    let valid = &key_valid[j * n + n_p..(j + 1) * n];
                    fused.push(attend_blocks(tape, qj, kj, vj, &ht_blocks, valid).0);
                }
                Some(tape.concat_rows(&fused))
            } else {
                None
            };
            // second stage sequence per patient: [pathway tokens ‖ fused h,t]
            let z2 = match stage1 {
                Some(s1) => {
                    let both = tape.concat_rows(&[tokens, s1]);
                    let idx: Vec<Option<usize>> = (0..b)
                        .flat_map(|j| {
                            (j * n..j * n + n_p)
                                .map(Some)
                                .chain((j * n_ht..(j + 1) * n_ht).map(move |r| Some(rows + r)))
                        })
                        .collect();
                    tape.gather_rows(both, &idx)
                }
                None => tokens,
            };
            let blocks2: Vec<usize> = [n_p, n_ht].into_iter().filter(|&c| c > 0).collect();
            let (q, k, v) = project_qkv(tape, z2, second);
            for j in 0..b {
                let qj = tape.slice_rows(q, j * n, n);
                let kj = tape.slice_rows(k, j * n, n);
                let vj = tape.slice_rows(v, j * n, n);
                let (o, a) = attend_blocks(tape, qj, kj, vj, &blocks2, &key_valid[j * n..(j + 1) * n]);
                outs.push(o);
                if collect_attention {
                    attns.push(tape.value(a).clone());
                }
            }
        }
    }
    Ok((tape.concat_rows(&outs), attns))
}

fn check_tokens(tokens: &[&ModalityTokens], d_e: usize) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::NoModalitiesEnabled);
    }
    for t in tokens {
        if t.tokens.cols() != d_e {
            return Err(Error::shape("fuse", d_e, t.tokens.cols()));
        }
        if t.validity.len() != t.tokens.rows() {
            return Err(Error::shape("fuse validity", t.tokens.rows(), t.validity.len()));
        }
    }
    for w in tokens.windows(2) {
        if w[0].modality >= w[1].modality {
            return Err(Error::Invalid(
                "modalities must be distinct and in pathway, histology, text order".into(),
            ));
        }
    }
    Ok(())
}

/// Block attention over already-widened token blocks of one patient.
pub fn block_attention(
    blocks: &[(Modality, &Matrix)],
    weights: &AttentionWeights,
    key_validity: &BinaryMask,
) -> Result<FusionOutput> {
    if blocks.is_empty() {
        return Err(Error::NoModalitiesEnabled);
    }
    let d = weights.dim();
    for (_, m) in blocks {
        if m.cols() != d {
            return Err(Error::shape("block_attention", d, m.cols()));
        }
    }
    let counts: Vec<usize> = blocks.iter().map(|b| b.1.rows()).collect();
    let total: usize = counts.iter().sum();
    if key_validity.len() != total {
        return Err(Error::shape("block_attention validity", total, key_validity.len()));
    }
    if key_validity.count() == 0 {
        return Err(Error::AllMasked);
    }
    let mats: Vec<&Matrix> = blocks.iter().map(|b| b.1).collect();
    let z = Matrix::vstack(&mats)?;
    let mut tape = Tape::new();
    let w = weights.map(&mut |m| tape.constant(m.clone()));
    let zv = tape.constant(z);
    let (q, k, v) = project_qkv(&mut tape, zv, &w);
    let (out, attn) = attend_blocks(&mut tape, q, k, v, &counts, key_validity.as_bools());
    Ok(FusionOutput {
        modalities: blocks.iter().map(|b| b.0).collect(),
        blocks: split_rows(tape.value(out), &counts),
        attention: tape.value(attn).clone(),
    })
}

fn split_rows(m: &Matrix, counts: &[usize]) -> Vec<Matrix> {
    let mut off = 0;
    counts
        .iter()
        .map(|&c| {
            let part = m.select_rows(&(off..off + c).collect::<Vec<_>>());
            off += c;
            part
        })
        .collect()
}

/// Fuses the enabled modalities of one patient. `tokens` must be in
/// pathway, histology, text order; missing modalities are simply absent.
pub fn fuse(tokens: &[ModalityTokens], params: &FusionParams, mode: FusionMode) -> Result<FusionOutput> {
    let refs: Vec<&ModalityTokens> = tokens.iter().collect();
    let d_e = tokens.first().map_or(0, |t| t.tokens.cols());
    check_tokens(&refs, d_e)?;
    if d_e + params.learnable.cols() != params.attention.dim() {
        return Err(Error::shape(
            "fuse",
            params.attention.dim(),
            d_e + params.learnable.cols(),
        ));
    }
    let layout = TokenLayout {
        parts: tokens.iter().map(|t| (t.modality, t.tokens.rows())).collect(),
    };
    let valid: Vec<bool> = tokens
        .iter()
        .flat_map(|t| t.validity.as_bools().iter().copied())
        .collect();
    for t in tokens {
        if t.validity.count() == 0 && matches!(mode, FusionMode::Late) {
            return Err(Error::AllMasked);
        }
    }
    if !valid.iter().any(|&b| b) {
        return Err(Error::AllMasked);
    }
    let mats: Vec<&Matrix> = tokens.iter().map(|t| &t.tokens).collect();
    let z = Matrix::vstack(&mats)?;
    let mut tape = Tape::new();
    let p = params.map(&mut |m| tape.constant(m.clone()));
    let zv = tape.constant(z);
    let widened = tape.append_broadcast(zv, p.learnable);
    let (out, attns) = fuse_batch_on_tape(&mut tape, widened, &layout, &valid, &p, mode, true)?;
    Ok(FusionOutput {
        modalities: tokens.iter().map(|t| t.modality).collect(),
        blocks: split_rows(tape.value(out), &layout.counts()),
        attention: attns.into_iter().next().expect("one patient"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::normal_matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn weights(d: usize, seed: u64) -> AttentionWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = 1.0 / (d as f64).sqrt();
        AttentionWeights {
            query: normal_matrix(d, d, s, &mut rng),
            key: normal_matrix(d, d, s, &mut rng),
            value: normal_matrix(d, d, s, &mut rng),
        }
    }

    /// Plain single-sequence attention, written with explicit loops.
    pub(crate) fn monolithic(z: &Matrix, w: &AttentionWeights, valid: &[bool]) -> (Matrix, Matrix) {
        let (n, d) = z.shape();
        let proj = |m: &Matrix| {
            let mut out = Matrix::zeros(n, d);
            for i in 0..n {
                for j in 0..d {
                    out.set(i, j, (0..d).map(|k| z.get(i, k) * m.get(k, j)).sum());
                }
            }
            out
        };
        let (q, k, v) = (proj(&w.query), proj(&w.key), proj(&w.value));
        let scale = 1.0 / (d as f64).sqrt();
        let mut a = Matrix::zeros(n, n);
        let mut out = Matrix::zeros(n, d);
        for i in (0..n).filter(|&i| valid[i]) {
            let logits: Vec<f64> = (0..n)
                .map(|j| (0..d).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() * scale)
                .collect();
            let mx = (0..n).filter(|&j| valid[j]).map(|j| logits[j]).fold(f64::MIN, f64::max);
            let den: f64 = (0..n).filter(|&j| valid[j]).map(|j| (logits[j] - mx).exp()).sum();
            for j in (0..n).filter(|&j| valid[j]) {
                a.set(i, j, (logits[j] - mx).exp() / den);
            }
            for c in 0..d {
                out.set(i, c, (0..n).map(|j| a.get(i, j) * v.get(j, c)).sum());
            }
        }
        (out, a)
    }

    #[test]
    fn append_examples() {
        let t = ModalityTokens::all_valid(Modality::Pathway, Matrix::from_rows(&[[1.0], [2.0]]).unwrap());
        assert_eq!(append_learnable(&t, &Matrix::zeros(1, 0)).unwrap(), t.tokens);
        assert_eq!(
            append_learnable(&t, &Matrix::zeros(1, 2)).unwrap().as_slice(),
            &[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]
        );
        let out = append_learnable(&t, &Matrix::row_vector(vec![1.0, 2.0])).unwrap();
        assert_eq!(out.row(0), &[1.0, 1.0, 2.0]);
        assert_eq!(out.row(1), &[2.0, 1.0, 2.0]);
    }

    #[test]
    fn single_block_is_plain_self_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = normal_matrix(4, 6, 1.0, &mut rng);
        let w = weights(6, 2);
        let out = block_attention(&[(Modality::Histology, &z)], &w, &BinaryMask::ones(4)).unwrap();
        let (mo, ma) = monolithic(&z, &w, &[true; 4]);
        assert!(out.blocks[0].max_abs_diff(&mo) < 1e-12);
        assert!(out.attention.max_abs_diff(&ma) < 1e-12);
    }

    #[test]
    fn zero_query_key_averages_values() {
        let w = AttentionWeights {
            query: Matrix::zeros(2, 2),
            key: Matrix::zeros(2, 2),
            value: Matrix::identity(2),
        };
        let p = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let h = Matrix::from_rows(&[[0.0, 3.0]]).unwrap();
        let t = Matrix::from_rows(&[[2.0, 3.0]]).unwrap();
        let out = block_attention(
            &[(Modality::Pathway, &p), (Modality::Histology, &h), (Modality::Text, &t)],
            &w,
            &BinaryMask::ones(3),
        )
        .unwrap();
        for b in &out.blocks {
            assert!((b.get(0, 0) - 1.0).abs() < 1e-15);
            assert!((b.get(0, 1) - 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn five_token_instance_matches_monolithic_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 6;
        let p = normal_matrix(2, d, 1.0, &mut rng);
        let h = normal_matrix(2, d, 1.0, &mut rng);
        let t = normal_matrix(1, d, 1.0, &mut rng);
        let w = weights(d, 4);
        let out = block_attention(
            &[(Modality::Pathway, &p), (Modality::Histology, &h), (Modality::Text, &t)],
            &w,
            &BinaryMask::ones(5),
        )
        .unwrap();
        let z = Matrix::vstack(&[&p, &h, &t]).unwrap();
        let (mo, ma) = monolithic(&z, &w, &[true; 5]);
        let fused = Matrix::vstack(&out.blocks.iter().collect::<Vec<_>>()).unwrap();
        assert!(fused.max_abs_diff(&mo) < 1e-10);
        assert!(out.attention.max_abs_diff(&ma) < 1e-10);
    }

    fn fusion_params(d_e: usize, d_r: usize, seed: u64, second: bool) -> FusionParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FusionParams {
            learnable: normal_matrix(1, d_r, 0.5, &mut rng),
            attention: weights(d_e + d_r, seed + 1),
            second_stage: second.then(|| weights(d_e + d_r, seed + 2)),
        }
    }

    fn three_modalities(d_e: usize, seed: u64, text_valid: usize) -> Vec<ModalityTokens> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut text = normal_matrix(3, d_e, 1.0, &mut rng);
        for r in text_valid..3 {
            text.row_mut(r).fill(0.0);
        }
        vec![
            ModalityTokens::all_valid(Modality::Pathway, normal_matrix(4, d_e, 1.0, &mut rng)),
            ModalityTokens::all_valid(Modality::Histology, normal_matrix(2, d_e, 1.0, &mut rng)),
            ModalityTokens {
                modality: Modality::Text,
                tokens: text,
                validity: BinaryMask::prefix(3, text_valid),
            },
        ]
    }

    #[test]
    fn late_fusion_has_no_cross_blocks() {
        let toks = three_modalities(4, 5, 3);
        let out = fuse(&toks, &fusion_params(4, 2, 6, false), FusionMode::Late).unwrap();
        let spans = [(0, 4), (4, 2), (6, 3)];
        for (qi, &(qs, qn)) in spans.iter().enumerate() {
            for (ki, &(ks, kn)) in spans.iter().enumerate() {
                if qi == ki {
                    continue;
                }
                for r in qs..qs + qn {
                    for c in ks..ks + kn {
                        assert_eq!(out.attention.get(r, c), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn one_modality_full_equals_late() {
        let toks = three_modalities(4, 7, 3);
        let params = fusion_params(4, 2, 8, false);
        let single = vec![toks[1].clone()];
        let full = fuse(&single, &params, FusionMode::Full).unwrap();
        let late = fuse(&single, &params, FusionMode::Late).unwrap();
        assert_eq!(full, late);
    }

    #[test]
    fn hierarchical_matches_staged_oracle() {
        let toks = three_modalities(4, 9, 2);
        let params = fusion_params(4, 2, 10, true);
        let out = fuse(&toks, &params, FusionMode::Hierarchical).unwrap();

        let widened: Vec<Matrix> = toks
            .iter()
            .map(|t| append_learnable(t, &params.learnable).unwrap())
            .collect();
        let valid_ht: Vec<bool> = [true, true, true, true, false].to_vec();
        let ht = Matrix::vstack(&[&widened[1], &widened[2]]).unwrap();
        let (s1, _) = monolithic(&ht, &params.attention, &valid_ht);
        let z2 = Matrix::vstack(&[&widened[0], &s1]).unwrap();
        let mut valid = vec![true; 4];
        valid.extend(&valid_ht);
        let (s2, a2) = monolithic(&z2, params.second_stage.as_ref().unwrap(), &valid);
        let fused = Matrix::vstack(&out.blocks.iter().collect::<Vec<_>>()).unwrap();
        assert!(fused.max_abs_diff(&s2) < 1e-10);
        assert!(out.attention.max_abs_diff(&a2) < 1e-10);
    }

    #[test]
    fn invalid_text_keys_are_masked_and_rows_zeroed() {
        let toks = three_modalities(4, 11, 1);
        let out = fuse(&toks, &fusion_params(4, 2, 12, false), FusionMode::Full).unwrap();
        for r in 0..9 {
            assert_eq!(out.attention.get(r, 7), 0.0);
            assert_eq!(out.attention.get(r, 8), 0.0);
        }
        let text = out.block(Modality::Text).unwrap();
        assert!(text.row(1).iter().chain(text.row(2)).all(|&v| v == 0.0));
        for r in 0..7 {
            let s: f64 = out.attention.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn pathway_permutation_leaves_other_outputs_unchanged_in_full_mode() {
        let toks = three_modalities(4, 13, 3);
        let params = fusion_params(4, 2, 14, false);
        let base = fuse(&toks, &params, FusionMode::Full).unwrap();
        let mut permuted = toks.clone();
        let perm = [2, 0, 3, 1];
        permuted[0].tokens = toks[0].tokens.select_rows(&perm);
        let moved = fuse(&permuted, &params, FusionMode::Full).unwrap();
        let pb = base.block(Modality::Pathway).unwrap().select_rows(&perm);
        assert!(moved.block(Modality::Pathway).unwrap().max_abs_diff(&pb) < 1e-10);
        for m in [Modality::Histology, Modality::Text] {
            assert!(moved.block(m).unwrap().max_abs_diff(base.block(m).unwrap()) < 1e-10);
        }
    }

    #[test]
    fn modality_set_parsing() {
        assert_eq!("pht".parse::<ModalitySet>().unwrap(), ModalitySet::ALL);
        assert_eq!("th".parse::<ModalitySet>().unwrap().to_string(), "ht");
        assert!("".parse::<ModalitySet>().is_err());
        assert!("px".parse::<ModalitySet>().is_err());
        assert!("pp".parse::<ModalitySet>().is_err());
        assert!("bogus".parse::<FusionMode>().is_err());
    }

    #[test]
    fn empty_input_is_rejected() {
        let params = fusion_params(4, 2, 15, false);
        assert!(matches!(
            fuse(&[], &params, FusionMode::Full),
            Err(Error::NoModalitiesEnabled)
        ));
    }
}
