//! Risk head, Cox partial-likelihood loss and the training loop.

use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionMode, FusionOutput, ModalitySet};
use crate::model::{forward_on_tape, Model, ModelParams, ModelSpec, Sample};
use crate::numerics::{layer_norm, selu, BinaryMask, Matrix, LAYER_NORM_EPS};
use crate::params::{Affine, LayerNormParams};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::text_proto::NtMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub patient_id: String,
    pub time: f64,
    pub event: bool,
}

impl SurvivalRecord {
    pub fn new(patient_id: impl Into<String>, time: f64, event: bool) -> Result<Self> {
        let patient_id = patient_id.into();
        if !(time >= 0.0) {
            return Err(Error::NegativeTime(patient_id));
        }
        Ok(Self {
            patient_id,
            time,
            event,
        })
    }
}

/// Two-layer perceptron `d → d_pool → d_pool` with SELU in between.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T = Matrix> {
    pub hidden: Affine<T>,
    pub output: Affine<T>,
}

impl<T> Mlp<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Mlp<U> {
        Mlp {
            hidden: self.hidden.map(f),
            output: self.output.map(f),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
        self.hidden.visit(&format!("{prefix}.hidden"), f);
        self.output.visit(&format!("{prefix}.output"), f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        self.hidden.visit_mut(f);
        self.output.visit_mut(f);
    }
}

impl Mlp<Matrix> {
    pub fn apply(&self, x: &Matrix) -> Matrix {
        let mut h = self.hidden.apply(x);
        h.as_mut_slice().iter_mut().for_each(|v| *v = selu(*v));
        self.output.apply(&h)
    }
}

/// `f_beta` per modality (a single shared one when `f_beta.len() == 1`),
/// one layer norm per modality and the final linear risk layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RiskHeadParams<T = Matrix> {
    pub f_beta: Vec<Mlp<T>>,
    pub norms: Vec<LayerNormParams<T>>,
    pub f_risk: Affine<T>,
}

impl<T> RiskHeadParams<T> {
    pub fn f_beta_for(&self, k: usize) -> &Mlp<T> {
        &self.f_beta[if self.f_beta.len() == 1 { 0 } else { k }]
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> RiskHeadParams<U> {
        RiskHeadParams {
            f_beta: self.f_beta.iter().map(|m| m.map(f)).collect(),
            norms: self.norms.iter().map(|m| m.map(f)).collect(),
            f_risk: self.f_risk.map(f),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
        for (i, m) in self.f_beta.iter().enumerate() {
            m.visit(&format!("{prefix}.f_beta.{i}"), f);
        }
        for (i, m) in self.norms.iter().enumerate() {
            m.visit(&format!("{prefix}.norm.{i}"), f);
        }
        self.f_risk.visit(&format!("{prefix}.f_risk"), f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        for m in &mut self.f_beta {
            m.visit_mut(f);
        }
        for m in &mut self.norms {
            m.visit_mut(f);
        }
        self.f_risk.visit_mut(f);
    }
}

/// Risk of one patient from its fused blocks: `f_beta` per token, layer
/// norm, mean over valid tokens, concatenation across modalities, `f_risk`.
pub fn risk_head(fused: &FusionOutput, validity: &[BinaryMask], params: &RiskHeadParams) -> Result<f64> {
    if validity.len() != fused.blocks.len() || params.norms.len() != fused.blocks.len() {
        return Err(Error::shape("risk_head", fused.blocks.len(), validity.len()));
    }
    let mut pooled = Vec::new();
    for (k, (block, valid)) in fused.blocks.iter().zip(validity).enumerate() {
        if valid.len() != block.rows() {
            return Err(Error::shape("risk_head validity", block.rows(), valid.len()));
        }
        let mlp = params.f_beta_for(k);
        if block.cols() != mlp.hidden.input_dim() {
            return Err(Error::shape("risk_head", mlp.hidden.input_dim(), block.cols()));
        }
        let h = mlp.apply(block);
        let norm = &params.norms[k];
        let mut sum = vec![0.0; h.cols()];
        for r in (0..h.rows()).filter(|&r| valid.get(r)) {
            let y = layer_norm(h.row(r), norm.gain.as_slice(), norm.bias.as_slice(), LAYER_NORM_EPS);
            sum.iter_mut().zip(&y).for_each(|(s, v)| *s += v);
        }
        let count = valid.count();
        if count == 0 {
            return Err(Error::AllMasked);
        }
        pooled.extend(sum.into_iter().map(|s| s / count as f64));
    }
    if pooled.len() != params.f_risk.input_dim() {
        return Err(Error::shape(
            "risk_head f_risk",
            params.f_risk.input_dim(),
            pooled.len(),
        ));
    }
    Ok(params.f_risk.apply(&Matrix::row_vector(pooled)).get(0, 0))
}

/// Batched risk head on the tape. `blocks[k]` holds modality `k` for all
/// patients, `b·N_k` rows patient-major; returns `b × 1` risks.
pub(crate) fn risk_head_on_tape(
    tape: &mut Tape,
    blocks: &[(Var, usize, Vec<bool>)],
    params: &RiskHeadParams<Var>,
) -> Var {
    let pooled: Vec<Var> = blocks
        .iter()
        .enumerate()
        .map(|(k, (x, group, valid))| {
            let mlp = params.f_beta_for(k);
            let h = tape.affine(*x, mlp.hidden.weight, mlp.hidden.bias);
            let h = tape.selu(h);
            let h = tape.affine(h, mlp.output.weight, mlp.output.bias);
            let norm = &params.norms[k];
            let h = tape.layer_norm(h, norm.gain, norm.bias, LAYER_NORM_EPS);
            tape.group_mean(h, *group, valid)
        })
        .collect();
    let z = if pooled.len() == 1 {
        pooled[0]
    } else {
        tape.concat_cols(&pooled)
    };
    tape.affine(z, params.f_risk.weight, params.f_risk.bias)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoxLoss {
    pub value: f64,
    /// Derivative of `value` with respect to each risk.
    pub gradient: Vec<f64>,
    pub events: usize,
    /// Set when the batch has no event; `value` is then 0.
    pub degenerate: bool,
}

/// Negative Breslow log partial likelihood over the given risk set,
/// divided by the number of events.
pub fn cox_loss(risks: &[f64], records: &[SurvivalRecord]) -> Result<CoxLoss> {
    let n = risks.len();
    if n == 0 || records.len() != n {
        return Err(Error::shape("cox_loss", n.max(1), records.len()));
    }
    let events = records.iter().filter(|r| r.event).count();
    if events == 0 {
        return Ok(CoxLoss {
            value: 0.0,
            gradient: vec![0.0; n],
            events,
            degenerate: true,
        });
    }
    let e = events as f64;
    let mut value = 0.0;
    let mut gradient = vec![0.0; n];
    for i in (0..n).filter(|&i| records[i].event) {
        let at_risk: Vec<usize> = (0..n).filter(|&j| records[j].time >= records[i].time).collect();
        let mx = at_risk.iter().map(|&j| risks[j]).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = at_risk.iter().map(|&j| (risks[j] - mx).exp()).sum();
        value -= risks[i] - (mx + denom.ln());
        gradient[i] -= 1.0 / e;
        for &j in &at_risk {
            gradient[j] += (risks[j] - mx).exp() / denom / e;
        }
    }
    Ok(CoxLoss {
        value: value / e,
        gradient,
        events,
        degenerate: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Cosine,
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::Invalid(format!("schedule {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub seed: u64,
    pub fusion_mode: FusionMode,
    pub modalities: ModalitySet,
    pub n_h: usize,
    pub n_p: usize,
    pub n_t_mode: NtMode,
    pub d_e: usize,
    pub d_r: usize,
    pub d_pool: usize,
    pub snn_depth: usize,
    pub shared_head: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            batch_size: 64,
            schedule: Schedule::Cosine,
            seed: 0,
            fusion_mode: FusionMode::Full,
            modalities: ModalitySet::ALL,
            n_h: 16,
            n_p: 50,
            n_t_mode: NtMode::Average,
            d_e: 128,
            d_r: 32,
            d_pool: 64,
            snn_depth: 2,
            shared_head: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("n_h", self.n_h),
            ("n_p", self.n_p),
            ("d_e", self.d_e),
            ("d_pool", self.d_pool),
            ("snn_depth", self.snn_depth),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Invalid(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid("learning_rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Invalid("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Learning rate for `epoch` under cosine decay from `lr0` to 0 over
/// `epochs` epochs.
pub fn cosine_lr(lr0: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs == 0 {
        return lr0;
    }
    let t = epoch.min(epochs) as f64 / epochs as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with decoupled weight decay. Moments are kept per parameter leaf in
/// `ModelParams::visit` order.
#[derive(Clone, Debug)]
pub struct AdamW {
    first: Vec<Matrix>,
    second: Vec<Matrix>,
    step: i32,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(like: &ModelParams, weight_decay: f64) -> Self {
        let mut zeros = Vec::new();
        like.visit("", &mut |_, m| zeros.push(Matrix::zeros(m.rows(), m.cols())));
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
            weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step);
        let mut g_list = Vec::new();
        grads.visit("", &mut |_, g| g_list.push(g.clone()));
        assert_eq!(g_list.len(), self.first.len(), "parameter trees differ");
        let wd = self.weight_decay;
        let mut leaves = g_list
            .into_iter()
            .zip(self.first.iter_mut().zip(self.second.iter_mut()));
        params.visit_mut(&mut |p| {
            let (g, (m, v)) = leaves.next().expect("parameter trees differ");
            let it = p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice().iter_mut().zip(v.as_mut_slice()));
            for ((w, &gr), (mo, ve)) in it {
                *mo = ADAM_BETA1 * *mo + (1.0 - ADAM_BETA1) * gr;
                *ve = ADAM_BETA2 * *ve + (1.0 - ADAM_BETA2) * gr * gr;
                let mhat = *mo / bc1;
                let vhat = *ve / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + ADAM_EPS) + wd * *w);
            }
        });
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean Cox loss over the epoch's non-degenerate batches.
    pub loss: f64,
    pub degenerate_batches: usize,
}

pub type History = Vec<EpochRecord>;

/// Loss and parameter gradients for one batch.
pub fn batch_loss_and_gradients(
    spec: &ModelSpec,
    params: &ModelParams,
    samples: &[&Sample],
    records: &[&SurvivalRecord],
) -> Result<(CoxLoss, ModelParams)> {
    let mut tape = Tape::new();
    let pv = params.map(&mut |m| tape.param(m.clone()));
    let out = forward_on_tape(&mut tape, spec, &pv, samples, false)?;
    let risks = tape.value(out.risks).as_slice().to_vec();
    let recs: Vec<SurvivalRecord> = records.iter().map(|r| (*r).clone()).collect();
    let loss = cox_loss(&risks, &recs)?;
    if !loss.value.is_finite() {
        return Err(Error::NonFiniteLoss(loss.value));
    }
    let grad = Matrix::from_vec(risks.len(), 1, loss.gradient.clone())?;
    let l = tape.scalar_fn(out.risks, loss.value, grad);
    let grads = tape.backward(l);
    let g = pv.map(&mut |v| grads.get_or_zeros(*v, tape.value(*v)));
    Ok((loss, g))
}

/// Mini-batch training with a per-epoch seeded shuffle.
pub fn train(
    samples: &[Sample],
    records: &[SurvivalRecord],
    spec: ModelSpec,
    config: &TrainConfig,
) -> Result<(Model, History)> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    if samples.len() != records.len() {
        return Err(Error::shape("train", samples.len(), records.len()));
    }
    if !records.iter().any(|r| r.event) {
        return Err(Error::NoEvents);
    }
    let mut model = Model::init(spec, config.seed)?;
    let mut opt = AdamW::new(&model.params, config.weight_decay);
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..config.epochs {
        let lr = cosine_lr(config.learning_rate, epoch, config.epochs);
        let mut shuffle = rng::substream(config.seed, rng::SHUFFLE, &[&epoch.to_string()]);
        order.sort_unstable();
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        let mut batches = 0;
        let mut degenerate = 0;
        for chunk in order.chunks(config.batch_size) {
            let bs: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let br: Vec<&SurvivalRecord> = chunk.iter().map(|&i| &records[i]).collect();
            if !br.iter().any(|r| r.event) {
                degenerate += 1;
                continue;
            }
            let (loss, grads) = batch_loss_and_gradients(&model.spec, &model.params, &bs, &br)?;
            opt.step(&mut model.params, &grads, lr);
            total += loss.value;
            batches += 1;
        }
        let loss = if batches > 0 { total / batches as f64 } else { 0.0 };
        log::debug!("epoch {epoch}: lr {lr:.3e} loss {loss:.6}");
        history.push(EpochRecord {
            epoch,
            learning_rate: lr,
            loss,
            degenerate_batches: degenerate,
        });
    }
    Ok((model, history))
}

/// Risk of one patient under `model`.
pub fn predict(model: &Model, sample: &Sample) -> Result<f64> {
    model.predict(sample)
}
