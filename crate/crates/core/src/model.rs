//! The full network: prototype encoders, fusion and risk head.
//!
//! Forward passes are recorded on a [`Tape`] for a whole batch at once. Each
//! modality's encoder runs over the stacked tokens of every patient, the
//! query/key/value projections run once over the stacked sequence, and only
//! attention itself is evaluated patient by patient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{fuse_batch_on_tape, FusionMode, FusionOutput, FusionParams, Modality, ModalitySet, TokenLayout};
use crate::numerics::{BinaryMask, Matrix};
use crate::params::{normal_matrix, Affine, AttentionWeights, LayerNormParams, Snn};
use crate::pathway_proto::snn_on_tape;
use crate::rng;
use crate::survival::{risk_head_on_tape, Mlp, RiskHeadParams, TrainConfig};
use crate::tape::{Tape, Var};
use crate::text_proto::{importance_scores, self_attention_on_tape, top_segments};

/// Standard deviation of the appended learnable embedding at initialization.
pub const LEARNABLE_INIT_STD: f64 = 0.02;

/// Architecture and data-dependent sizes; everything needed to rebuild the
/// parameter tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub modalities: ModalitySet,
    pub fusion_mode: FusionMode,
    /// Segment embedding width.
    pub d_t: usize,
    /// Patch embedding width; slide representations have `1 + 2·d_h` columns.
    pub d_h: usize,
    pub d_e: usize,
    pub d_r: usize,
    pub d_pool: usize,
    pub snn_depth: usize,
    /// Gene count of each pathway, in pathway order.
    pub pathway_widths: Vec<usize>,
    pub n_h: usize,
    pub n_t: usize,
    /// Longest training report; longer reports are truncated.
    pub max_segments: usize,
    pub shared_head: bool,
}

impl ModelSpec {
    pub fn from_config(
        config: &TrainConfig,
        pathway_widths: Vec<usize>,
        d_t: usize,
        d_h: usize,
        n_t: usize,
        max_segments: usize,
    ) -> Self {
        Self {
            modalities: config.modalities,
            fusion_mode: config.fusion_mode,
            d_t,
            d_h,
            d_e: config.d_e,
            d_r: config.d_r,
            d_pool: config.d_pool,
            snn_depth: config.snn_depth,
            pathway_widths,
            n_h: config.n_h,
            n_t,
            max_segments,
            shared_head: config.shared_head,
        }
    }

    pub fn d(&self) -> usize {
        self.d_e + self.d_r
    }

    pub fn histology_width(&self) -> usize {
        1 + 2 * self.d_h
    }

    pub fn token_count(&self, m: Modality) -> usize {
        match m {
            Modality::Pathway => self.pathway_widths.len(),
            Modality::Histology => self.n_h,
            Modality::Text => self.n_t,
        }
    }

    pub fn layout(&self) -> TokenLayout {
        TokenLayout {
            parts: self.modalities.iter().map(|m| (m, self.token_count(m))).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for m in self.modalities.iter() {
            if self.token_count(m) == 0 {
                return Err(Error::Invalid(format!("{} has no tokens", m.name())));
            }
        }
        if self.modalities.contains(Modality::Pathway) && self.pathway_widths.contains(&0) {
            return Err(Error::Invalid("empty pathway".into()));
        }
        if self.modalities.contains(Modality::Text) && (self.d_t == 0 || self.max_segments == 0) {
            return Err(Error::Invalid("text modality needs d_t and max_segments".into()));
        }
        if self.modalities.contains(Modality::Histology) && self.d_h == 0 {
            return Err(Error::Invalid("histology modality needs d_h".into()));
        }
        if self.d_e == 0 || self.d_pool == 0 || self.snn_depth == 0 {
            return Err(Error::Invalid("d_e, d_pool and snn_depth must be positive".into()));
        }
        Ok(())
    }
}

/// Every learnable tensor. Encoders of disabled modalities are absent.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = Matrix> {
    pub pathway: Vec<Snn<T>>,
    pub histology: Option<Affine<T>>,
    pub text_attention: Option<AttentionWeights<T>>,
    pub text_projection: Option<Affine<T>>,
    pub fusion: FusionParams<T>,
    pub head: RiskHeadParams<T>,
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            pathway: self.pathway.iter().map(|s| s.map(f)).collect(),
            histology: self.histology.as_ref().map(|a| a.map(f)),
            text_attention: self.text_attention.as_ref().map(|a| a.map(f)),
            text_projection: self.text_projection.as_ref().map(|a| a.map(f)),
            fusion: self.fusion.map(f),
            head: self.head.map(f),
        }
    }

    /// Visits every leaf with a stable dotted name.
    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
        let p = |s: &str| {
            if prefix.is_empty() {
                s.to_string()
            } else {
                format!("{prefix}.{s}")
            }
        };
        for (i, s) in self.pathway.iter().enumerate() {
            s.visit(&p(&format!("pathway.{i}")), f);
        }
        if let Some(a) = &self.histology {
            a.visit(&p("histology"), f);
        }
        if let Some(a) = &self.text_attention {
            a.visit(&p("text.attention"), f);
        }
        if let Some(a) = &self.text_projection {
            a.visit(&p("text.projection"), f);
        }
        self.fusion.visit(&p("fusion"), f);
        self.head.visit(&p("head"), f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        for s in &mut self.pathway {
            s.visit_mut(f);
        }
        if let Some(a) = &mut self.histology {
            a.visit_mut(f);
        }
        if let Some(a) = &mut self.text_attention {
            a.visit_mut(f);
        }
        if let Some(a) = &mut self.text_projection {
            a.visit_mut(f);
        }
        self.fusion.visit_mut(f);
        self.head.visit_mut(f);
    }
}

impl ModelParams<Matrix> {
    /// Draws every tensor from `rng` in visit order.
    pub fn init<R: rand::Rng>(spec: &ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let d = spec.d();
        let mods = spec.modalities;
        let pathway = if mods.contains(Modality::Pathway) {
            spec.pathway_widths
                .iter()
                .map(|&w| Snn::init(w, spec.d_e, spec.snn_depth, rng))
                .collect()
        } else {
            Vec::new()
        };
        let histology = mods
            .contains(Modality::Histology)
            .then(|| Affine::init(spec.histology_width(), spec.d_e, rng));
        let (text_attention, text_projection) = if mods.contains(Modality::Text) {
            let a = AttentionWeights::init(spec.d_t, rng);
            (Some(a), Some(Affine::init(spec.d_t, spec.d_e, rng)))
        } else {
            (None, None)
        };
        let learnable = normal_matrix(1, spec.d_r, LEARNABLE_INIT_STD, rng);
        let attention = AttentionWeights::init(d, rng);
        let second_stage = (spec.fusion_mode == FusionMode::Hierarchical).then(|| AttentionWeights::init(d, rng));
        let n_heads = if spec.shared_head { 1 } else { mods.len() };
        let f_beta = (0..n_heads)
            .map(|_| Mlp {
                hidden: Affine::init(d, spec.d_pool, rng),
                output: Affine::init(spec.d_pool, spec.d_pool, rng),
            })
            .collect();
        let norms = (0..mods.len())
            .map(|_| LayerNormParams::identity(spec.d_pool))
            .collect();
        let f_risk = Affine::init(mods.len() * spec.d_pool, 1, rng);
        Ok(Self {
            pathway,
            histology,
            text_attention,
            text_projection,
            fusion: FusionParams {
                learnable,
                attention,
                second_stage,
            },
            head: RiskHeadParams { f_beta, norms, f_risk },
        })
    }

    pub fn zeros_like(&self) -> Self {
        self.map(&mut |m| Matrix::zeros(m.rows(), m.cols()))
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, m| n += m.len());
        n
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        self.visit("", &mut |_, m| out.extend_from_slice(m.as_slice()));
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::shape("set_flat", self.parameter_count(), flat.len()));
        }
        let mut off = 0;
        self.visit_mut(&mut |m| {
            let n = m.len();
            m.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
        });
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, m| ok &= m.is_finite());
        ok
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let a = self.to_flat();
        let b = other.to_flat();
        assert_eq!(a.len(), b.len(), "parameter trees differ");
        a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }
}

/// Prepared inputs of one patient. Only the enabled modalities need to be
/// present.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub patient_id: String,
    /// Expression values of each pathway's member genes.
    pub pathways: Option<Vec<Vec<f64>>>,
    /// Slide representation, `N_H × (1 + 2·d_h)`.
    pub histology: Option<Matrix>,
    /// Report segment embeddings, `N_t × d_t`.
    pub text: Option<Matrix>,
}

fn check_sample(spec: &ModelSpec, s: &Sample) -> Result<()> {
    let missing = |m: Modality| Error::Invalid(format!("patient {}: missing {} input", s.patient_id, m.name()));
    if spec.modalities.contains(Modality::Pathway) {
        let p = s.pathways.as_ref().ok_or_else(|| missing(Modality::Pathway))?;
        if p.len() != spec.pathway_widths.len() {
            return Err(Error::shape("pathway count", spec.pathway_widths.len(), p.len()));
        }
        for (x, &w) in p.iter().zip(&spec.pathway_widths) {
            if x.len() != w {
                return Err(Error::shape("pathway width", w, x.len()));
            }
        }
    }
    if spec.modalities.contains(Modality::Histology) {
        let h = s.histology.as_ref().ok_or_else(|| missing(Modality::Histology))?;
        if h.shape() != (spec.n_h, spec.histology_width()) {
            return Err(Error::shape(
                "slide representation",
                format!("{}x{}", spec.n_h, spec.histology_width()),
                format!("{}x{}", h.rows(), h.cols()),
            ));
        }
    }
    if spec.modalities.contains(Modality::Text) {
        let t = s.text.as_ref().ok_or_else(|| missing(Modality::Text))?;
        if t.cols() != spec.d_t {
            return Err(Error::shape("report segments", spec.d_t, t.cols()));
        }
        if t.rows() == 0 {
            return Err(Error::EmptyReport);
        }
    }
    Ok(())
}

/// Handles and diagnostics of one batched forward pass.
pub(crate) struct ForwardPass {
    /// `b × 1` risks.
    pub risks: Var,
    /// Fused tokens, `b·n × d` patient-major.
    pub fused: Var,
    pub layout: TokenLayout,
    /// Key validity of every fused row.
    pub validity: Vec<bool>,
    /// Per-patient attention matrices, when requested.
    pub attention: Vec<Matrix>,
    /// Per-patient source segment of each text prototype slot.
    pub text_sources: Vec<Vec<Option<usize>>>,
}

pub(crate) fn forward_on_tape(
    tape: &mut Tape,
    spec: &ModelSpec,
    params: &ModelParams<Var>,
    samples: &[&Sample],
    collect_attention: bool,
) -> Result<ForwardPass> {
    let b = samples.len();
    if b == 0 {
        return Err(Error::EmptyTrainingSet);
    }
    for s in samples {
        check_sample(spec, s)?;
    }
    let layout = spec.layout();
    let n = layout.total();

    // per-modality token blocks, each `b·N_k × d_e`, plus a row index map
    // from (patient, slot) to the block row
    let mut blocks: Vec<Var> = Vec::new();
    let mut block_row: Vec<Box<dyn Fn(usize, usize) -> usize>> = Vec::new();
    let mut text_sources = Vec::new();
    let mut text_valid: Vec<Vec<bool>> = Vec::new();

    for m in spec.modalities.iter() {
        match m {
            Modality::Pathway => {
                let outs: Vec<Var> = params
                    .pathway
                    .iter()
                    .enumerate()
                    .map(|(i, snn)| {
                        let w = spec.pathway_widths[i];
                        let mut x = Matrix::zeros(b, w);
                        for (j, s) in samples.iter().enumerate() {
                            x.row_mut(j).copy_from_slice(&s.pathways.as_ref().expect("checked")[i]);
                        }
                        let x = tape.constant(x);
                        snn_on_tape(tape, x, snn)
                    })
                    .collect();
                blocks.push(tape.concat_rows(&outs));
                block_row.push(Box::new(move |j, i| i * b + j));
            }
            Modality::Histology => {
                let reps: Vec<&Matrix> = samples.iter().map(|s| s.histology.as_ref().expect("checked")).collect();
                let x = tape.constant(Matrix::vstack(&reps)?);
                let a = params.histology.as_ref().expect("histology encoder");
                blocks.push(tape.affine(x, a.weight, a.bias));
                let n_h = spec.n_h;
                block_row.push(Box::new(move |j, c| j * n_h + c));
            }
            Modality::Text => {
                let w = params.text_attention.as_ref().expect("text attention");
                let mut picked = Vec::with_capacity(b);
                for s in samples {
                    let segs = s.text.as_ref().expect("checked");
                    let keep = segs.rows().min(spec.max_segments);
                    let segs = if keep < segs.rows() {
                        segs.select_rows(&(0..keep).collect::<Vec<_>>())
                    } else {
                        segs.clone()
                    };
                    let mask = vec![true; keep];
                    let x = tape.constant(segs);
                    let (z, attn) = self_attention_on_tape(tape, x, &mask, w);
                    let scores = importance_scores(tape.value(attn), &BinaryMask::ones(keep));
                    let picks = top_segments(&scores, &BinaryMask::ones(keep), spec.n_t);
                    text_valid.push(picks.iter().map(Option::is_some).collect());
                    picked.push(tape.gather_rows(z, &picks));
                    text_sources.push(picks);
                }
                let protos = tape.concat_rows(&picked);
                let proj = params.text_projection.as_ref().expect("text projection");
                blocks.push(tape.affine(protos, proj.weight, proj.bias));
                let n_t = spec.n_t;
                block_row.push(Box::new(move |j, c| j * n_t + c));
            }
        }
    }

    // patient-major token sequence
    let mut offsets = Vec::with_capacity(blocks.len());
    let mut total = 0;
    for &blk in &blocks {
        offsets.push(total);
        total += tape.value(blk).rows();
    }
    let stacked = if blocks.len() == 1 {
        blocks[0]
    } else {
        tape.concat_rows(&blocks)
    };
    let mut index = Vec::with_capacity(b * n);
    let mut validity = Vec::with_capacity(b * n);
    for j in 0..b {
        for (k, &(m, count)) in layout.parts.iter().enumerate() {
            for slot in 0..count {
                index.push(Some(offsets[k] + block_row[k](j, slot)));
                validity.push(match m {
                    Modality::Text => text_valid[j][slot],
                    _ => true,
                });
            }
        }
    }
    let tokens = tape.gather_rows(stacked, &index);
    let tokens = tape.append_broadcast(tokens, params.fusion.learnable);
    let (fused, attention) = fuse_batch_on_tape(
        tape,
        tokens,
        &layout,
        &validity,
        &params.fusion,
        spec.fusion_mode,
        collect_attention,
    )?;

    let mut head_inputs = Vec::with_capacity(layout.parts.len());
    let mut off = 0;
    for &(_, count) in &layout.parts {
        let idx: Vec<Option<usize>> = (0..b)
            .flat_map(|j| (0..count).map(move |c| Some(j * n + off + c)))
            .collect();
        let valid: Vec<bool> = idx.iter().map(|i| validity[i.expect("row")]).collect();
        let x = tape.gather_rows(fused, &idx);
        head_inputs.push((x, count, valid));
        off += count;
    }
    let risks = risk_head_on_tape(tape, &head_inputs, &params.head);
    Ok(ForwardPass {
        risks,
        fused,
        layout,
        validity,
        attention,
        text_sources,
    })
}

/// Forward-pass details of one patient for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct Explanation {
    pub risk: f64,
    pub fusion: FusionOutput,
    /// Validity of each fused block, aligned with `fusion.blocks`.
    pub validity: Vec<BinaryMask>,
    /// Source segment index of each text prototype slot.
    pub text_sources: Vec<Option<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ModelParams,
}

impl Model {
    /// Fresh parameters drawn from the `init` stream of `seed`.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, rng::INIT);
        let params = ModelParams::init(&spec, &mut r)?;
        Ok(Self { spec, params })
    }

    pub fn predict(&self, sample: &Sample) -> Result<f64> {
        Ok(self.predict_batch(&[sample])?[0])
    }

    pub fn predict_batch(&self, samples: &[&Sample]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.params.map(&mut |m| tape.constant(m.clone()));
        let out = forward_on_tape(&mut tape, &self.spec, &p, samples, false)?;
        Ok(tape.value(out.risks).as_slice().to_vec())
    }

    pub fn explain(&self, sample: &Sample) -> Result<Explanation> {
        let mut tape = Tape::new();
        let p = self.params.map(&mut |m| tape.constant(m.clone()));
        let mut out = forward_on_tape(&mut tape, &self.spec, &p, &[sample], true)?;
        let fused = tape.value(out.fused);
        let mut blocks = Vec::new();
        let mut validity = Vec::new();
        let mut off = 0;
        for &(_, count) in &out.layout.parts {
            blocks.push(fused.select_rows(&(off..off + count).collect::<Vec<_>>()));
            validity.push(BinaryMask::from(out.validity[off..off + count].to_vec()));
            off += count;
        }
        Ok(Explanation {
            risk: tape.value(out.risks).get(0, 0),
            fusion: FusionOutput {
                modalities: out.layout.parts.iter().map(|p| p.0).collect(),
                blocks,
                attention: out.attention.pop().expect("one patient"),
            },
            validity,
            text_sources: out.text_sources.pop().unwrap_or_default(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{fuse, ModalityTokens};
    use crate::histo_proto::{project_histo, SlideRepresentation};
    use crate::pathway_proto::embed_pathways;
    use crate::survival::risk_head;
    use crate::text_proto::{pad_batch, select_prototypes, text_self_attention, ReportFeatures};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_spec(mode: FusionMode) -> ModelSpec {
        ModelSpec {
            modalities: ModalitySet::ALL,
            fusion_mode: mode,
            d_t: 5,
            d_h: 2,
            d_e: 6,
            d_r: 2,
            d_pool: 4,
            snn_depth: 2,
            pathway_widths: vec![3, 2, 4],
            n_h: 3,
            n_t: 2,
            max_segments: 4,
            shared_head: false,
        }
    }

    pub(crate) fn tiny_sample(spec: &ModelSpec, seed: u64, segments: usize) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Sample {
            patient_id: format!("p{seed}"),
            pathways: Some(
                spec.pathway_widths
                    .iter()
                    .map(|&w| normal_matrix(1, w, 1.0, &mut rng).into_vec())
                    .collect(),
            ),
            histology: Some(normal_matrix(spec.n_h, spec.histology_width(), 1.0, &mut rng)),
            text: Some(normal_matrix(segments, spec.d_t, 1.0, &mut rng)),
        }
    }

    /// Same pipeline assembled from the per-module plain functions.
    fn staged_risk(model: &Model, s: &Sample) -> f64 {
        let spec = &model.spec;
        let p = &model.params;
        let pathway = embed_pathways(s.pathways.as_ref().unwrap(), &p.pathway).unwrap();
        let histo = project_histo(
            &SlideRepresentation {
                matrix: s.histology.clone().unwrap(),
            },
            p.histology.as_ref().unwrap(),
        )
        .unwrap();
        let report = ReportFeatures::new(s.patient_id.clone(), s.text.clone().unwrap()).unwrap();
        let batch = pad_batch(&[report], spec.max_segments);
        let (z, a) = text_self_attention(&batch, p.text_attention.as_ref().unwrap()).unwrap();
        let scores = importance_scores(&a[0], &batch.masks[0]);
        let protos = select_prototypes(&z[0], &scores, &batch.masks[0], spec.n_t);
        let text = p.text_projection.as_ref().unwrap().apply(&protos.embeddings);
        let tokens = vec![
            ModalityTokens::all_valid(Modality::Pathway, pathway),
            ModalityTokens::all_valid(Modality::Histology, histo),
            ModalityTokens {
                modality: Modality::Text,
                tokens: text,
                validity: protos.validity.clone(),
            },
        ];
        let fused = fuse(&tokens, &p.fusion, spec.fusion_mode).unwrap();
        let validity: Vec<BinaryMask> = tokens.iter().map(|t| t.validity.clone()).collect();
        risk_head(&fused, &validity, &p.head).unwrap()
    }

    #[test]
    fn batched_forward_matches_staged_pipeline() {
        for mode in [FusionMode::Full, FusionMode::Late, FusionMode::Hierarchical] {
            let spec = tiny_spec(mode);
            let model = Model::init(spec.clone(), 3).unwrap();
            let samples: Vec<Sample> = (0..4).map(|i| tiny_sample(&spec, i, 1 + i as usize * 2)).collect();
            let refs: Vec<&Sample> = samples.iter().collect();
            let batched = model.predict_batch(&refs).unwrap();
            for (s, r) in samples.iter().zip(&batched) {
                assert!((staged_risk(&model, s) - r).abs() < 1e-10, "{mode}");
            }
        }
    }

    #[test]
    fn predict_is_repeatable_and_matches_batch() {
        let spec = tiny_spec(FusionMode::Full);
        let model = Model::init(spec.clone(), 4).unwrap();
        let samples: Vec<Sample> = (0..3).map(|i| tiny_sample(&spec, i, 3)).collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let batched = model.predict_batch(&refs).unwrap();
        for (s, r) in samples.iter().zip(&batched) {
            assert_eq!(model.predict(s).unwrap(), model.predict(s).unwrap());
            assert!((model.predict(s).unwrap() - r).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_model_scores_zero() {
        let spec = tiny_spec(FusionMode::Full);
        let mut model = Model::init(spec.clone(), 5).unwrap();
        model.params.visit_mut(&mut |m| m.as_mut_slice().fill(0.0));
        assert_eq!(model.predict(&tiny_sample(&spec, 1, 2)).unwrap(), 0.0);
    }

    #[test]
    fn flat_round_trip_and_names() {
        let spec = tiny_spec(FusionMode::Hierarchical);
        let model = Model::init(spec, 6).unwrap();
        let mut copy = model.params.zeros_like();
        copy.set_flat(&model.params.to_flat()).unwrap();
        assert_eq!(copy, model.params);
        let mut names = Vec::new();
        model.params.visit("", &mut |n, _| names.push(n.to_string()));
        let unique: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
        assert!(names.contains(&"fusion.second_stage.query".to_string()));
        assert!(names.contains(&"head.f_risk.weight".to_string()));
    }

    #[test]
    fn missing_modality_input_is_rejected() {
        let spec = tiny_spec(FusionMode::Full);
        let model = Model::init(spec.clone(), 7).unwrap();
        let mut s = tiny_sample(&spec, 1, 2);
        s.histology = None;
        assert!(model.predict(&s).is_err());
    }

    #[test]
    fn explanation_attention_is_row_stochastic() {
        let spec = tiny_spec(FusionMode::Full);
        let model = Model::init(spec.clone(), 8).unwrap();
        let e = model.explain(&tiny_sample(&spec, 2, 1)).unwrap();
        let n = e.fusion.attention.rows();
        assert_eq!(n, 3 + 3 + 2);
        let valid: Vec<bool> = e.validity.iter().flat_map(|v| v.as_bools().to_vec()).collect();
        assert_eq!(valid, vec![true, true, true, true, true, true, true, false]);
        for r in (0..n).filter(|&r| valid[r]) {
            let s: f64 = e.fusion.attention.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert_eq!(e.fusion.attention.get(r, 7), 0.0);
        }
    }
}
