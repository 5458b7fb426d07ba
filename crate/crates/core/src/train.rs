//! Training loop and its pieces: AdamW with decoupled weight decay, linear
//! warmup + cosine decay, global gradient-norm clipping, mixup/cutmix,
//! KL-based logit distillation against a frozen teacher, and the linear
//! token-drop schedule.
//!
//! The loop is fully deterministic: `(seed, plan, dataset)` fixes the
//! metrics log bit-exactly in single-threaded mode.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use crate::model::Model;
use crate::scalar::Scalar;
use crate::tape::{Axis, NodeId, Tape};
use crate::tensor::{Tensor, TensorError};
use crate::weights::ModelWeights;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer and schedule hyperparameters for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub final_lr: f64,
    /// Fraction of steps spent in linear warmup.
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub clip_grad_norm: f64,
    /// Beta parameter for mixup; 0 disables it.
    pub mixup_alpha: f64,
    /// Beta parameter for cutmix; 0 disables it.
    pub cutmix_alpha: f64,
    /// Enables the linear token-drop schedule below.
    pub drop_tokens: bool,
    pub drop_start: f64,
    pub drop_end: f64,
    /// Teacher reference (checkpoint path or `random:<width>`); resolved by
    /// the caller into the `teacher` argument of [`train`].
    pub distill: Option<String>,
    pub eval_interval: usize,
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            steps: 0,
            batch_size: 32,
            peak_lr: 1e-3,
            final_lr: 1e-5,
            warmup_fraction: 0.10,
            weight_decay: 0.05,
            clip_grad_norm: 1.0,
            mixup_alpha: 0.8,
            cutmix_alpha: 1.0,
            drop_tokens: false,
            drop_start: 0.9,
            drop_end: 0.1,
            distill: None,
            eval_interval: 100,
            seed: 0,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err("warmup_fraction must lie in [0, 1)".into());
        }
        if !(self.peak_lr > self.final_lr && self.final_lr > 0.0) {
            return Err("need peak_lr > final_lr > 0".into());
        }
        if !(0.0..1.0).contains(&self.drop_start)
            || self.drop_end < 0.0
            || self.drop_end > self.drop_start
        {
            return Err("need 0 <= drop_end <= drop_start < 1".into());
        }
        if self.batch_size == 0 {
            return Err("batch_size must be positive".into());
        }
        if self.eval_interval == 0 {
            return Err("eval_interval must be positive".into());
        }
        if self.mixup_alpha < 0.0 || self.cutmix_alpha < 0.0 {
            return Err("mixup/cutmix alphas must be non-negative".into());
        }
        if self.clip_grad_norm <= 0.0 {
            return Err("clip_grad_norm must be positive".into());
        }
        if self.weight_decay < 0.0 {
            return Err("weight_decay must be non-negative".into());
        }
        Ok(())
    }
}

/// Linear warmup to `peak_lr`, then cosine decay to `final_lr`. Both
/// boundary values are exact.
pub fn lr_at(step: usize, plan: &TrainPlan) -> f64 {
    debug_assert!(step <= plan.steps);
    if plan.steps == 0 {
        return plan.peak_lr;
    }
    let warmup = libm::round(plan.warmup_fraction * plan.steps as f64) as usize;
    if step <= warmup && warmup > 0 {
        return plan.peak_lr * (step as f64 / warmup as f64);
    }
    if plan.steps == warmup {
        return plan.peak_lr;
    }
    let t = (step - warmup) as f64 / (plan.steps - warmup) as f64;
    plan.final_lr + (plan.peak_lr - plan.final_lr) * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * t))
}

/// Token-drop rate, linear in training progress; endpoints are exact.
pub fn drop_rate_at(progress: f64, plan: &TrainPlan) -> f64 {
    debug_assert!((0.0..=1.0).contains(&progress));
    plan.drop_start * (1.0 - progress) + plan.drop_end * progress
}

/// Uniformly samples `max(1, round((1 - rate) * n))` distinct indices,
/// returned ascending.
pub fn sample_kept_tokens(n: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    debug_assert!((0.0..1.0).contains(&rate));
    let k = libm::round((1.0 - rate) * n as f64) as usize;
    let k = k.clamp(1, n);
    let mut indices: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        indices.swap(i, j);
    }
    indices.truncate(k);
    indices.sort_unstable();
    indices
}

/// Per-parameter Adam moments; shapes mirror the parameter manifest.
pub struct OptimizerState<T: Scalar> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(weights: &ModelWeights<T>) -> Self {
        let mut m = Vec::new();
        weights.visit(&mut |_, _, p| m.push(Tensor::zeros(p.shape().to_vec())));
        let v = m.clone();
        OptimizerState { m, v, step: 0 }
    }

    /// For parameter lists that extend a backbone (extra heads).
    pub fn new_for_shapes(shapes: &[Vec<usize>]) -> Self {
        let m: Vec<Tensor<T>> = shapes.iter().map(|s| Tensor::zeros(s.clone())).collect();
        let v = m.clone();
        OptimizerState { m, v, step: 0 }
    }
}

#[derive(Debug)]
pub enum TrainError {
    Plan(String),
    Tensor(TensorError),
    /// Non-finite loss or gradient; training stops with the last snapshot
    /// restored into the model.
    NonFinite { step: usize, detail: String },
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Plan(s) => write!(f, "invalid plan: {s}"),
            TrainError::Tensor(e) => write!(f, "{e}"),
            TrainError::NonFinite { step, detail } => {
                write!(f, "non-finite value at step {step}: {detail}")
            }
        }
    }
}

impl core::error::Error for TrainError {}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Tensor(e)
    }
}

/// Scales all gradients so the global L2 norm is at most `max_norm`;
/// returns the pre-clip norm. Direction is preserved.
pub fn clip_gradients<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &v in g.data() {
            let v = v.to_f64();
            sq += v * v;
        }
    }
    let norm = libm::sqrt(sq);
    if norm > max_norm && norm > 0.0 {
        let scale = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// KL distillation loss node: `KL(softmax(teacher / temp) || softmax(student / temp))`,
/// mean over rows.
pub fn distill_loss<T: Scalar>(
    tape: &mut Tape<T>,
    student_logits: NodeId,
    teacher_logits: NodeId,
    temperature: f64,
) -> crate::tensor::Result<NodeId> {
    if temperature <= 0.0 {
        return Err(TensorError::Contract {
            op: "distill_loss",
            detail: "temperature must be positive".into(),
        });
    }
    let (s, t) = if temperature == 1.0 {
        (student_logits, teacher_logits)
    } else {
        let inv = T::from_f64(1.0 / temperature);
        (
            tape.scale(student_logits, inv)?,
            tape.scale(teacher_logits, inv)?,
        )
    };
    tape.kl_div(s, t)
}

/// A labeled image split held in memory.
#[derive(Clone)]
pub struct LabeledImages<T> {
    pub images: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
}

impl<T> LabeledImages<T> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Output of one mixing pass: blended pixels plus the label pair and its
/// mixing weight (loss weight of the first label).
pub struct MixedBatch<T> {
    pub images: Vec<Tensor<T>>,
    pub label_pairs: Vec<(usize, usize)>,
    pub lambda: f64,
}

/// Per batch, applies mixup or cutmix (equal probability when both are
/// enabled; one alone when the other's alpha is zero). Mixup blends
/// pixel-wise with `lambda ~ Beta(alpha, alpha)`; cutmix pastes an
/// axis-aligned rectangle whose area fraction is `1 - lambda` and reports
/// the realized fraction.
pub fn mix_batch<T: Scalar>(
    images: &[Tensor<T>],
    labels: &[usize],
    plan: &TrainPlan,
    rng: &mut ChaCha8Rng,
) -> MixedBatch<T> {
    let unmixed = |images: &[Tensor<T>], labels: &[usize]| MixedBatch {
        images: images.to_vec(),
        label_pairs: labels.iter().map(|&l| (l, l)).collect(),
        lambda: 1.0,
    };
    if images.len() < 2 || (plan.mixup_alpha == 0.0 && plan.cutmix_alpha == 0.0) {
        return unmixed(images, labels);
    }
    let use_cutmix = if plan.cutmix_alpha == 0.0 {
        false
    } else if plan.mixup_alpha == 0.0 {
        true
    } else {
        rng.gen::<f64>() < 0.5
    };
    // Partner assignment: a seeded permutation of the batch.
    let mut partner: Vec<usize> = (0..images.len()).collect();
    for i in (1..partner.len()).rev() {
        let j = rng.gen_range(0..=i);
        partner.swap(i, j);
    }
    let alpha = if use_cutmix {
        plan.cutmix_alpha
    } else {
        plan.mixup_alpha
    };
    let lambda = Beta::new(alpha, alpha).expect("positive alpha").sample(rng);

    if !use_cutmix {
        let lam = T::from_f64(lambda);
        let inv = T::from_f64(1.0 - lambda);
        let images = images
            .iter()
            .enumerate()
            .map(|(i, img)| {
                let other = &images[partner[i]];
                let mut out = img.clone();
                for (o, &b) in out.data_mut().iter_mut().zip(other.data()) {
                    *o = lam * *o + inv * b;
                }
                out
            })
            .collect();
        return MixedBatch {
            images,
            label_pairs: labels.iter().enumerate().map(|(i, &l)| (l, labels[partner[i]])).collect(),
            lambda,
        };
    }

    // Cutmix: rectangle of area fraction ~ (1 - lambda), fully inside the
    // image, shared across the batch.
    let shape = images[0].shape().to_vec();
    let (h, w) = (shape[0], shape[1]);
    let cut = libm::sqrt(1.0 - lambda);
    let ch = libm::round(cut * h as f64) as usize;
    let cw = libm::round(cut * w as f64) as usize;
    if ch == 0 || cw == 0 {
        return unmixed(images, labels);
    }
    let y0 = rng.gen_range(0..=h - ch);
    let x0 = rng.gen_range(0..=w - cw);
    let realized = 1.0 - (ch * cw) as f64 / (h * w) as f64;
    let c = shape[2];
    let images: Vec<Tensor<T>> = images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let other = &images[partner[i]];
            let mut out = img.clone();
            for y in y0..y0 + ch {
                for x in x0..x0 + cw {
                    for ch_i in 0..c {
                        let idx = (y * w + x) * c + ch_i;
                        out.data_mut()[idx] = other.data()[idx];
                    }
                }
            }
            out
        })
        .collect();
    MixedBatch {
        images,
        label_pairs: labels.iter().enumerate().map(|(i, &l)| (l, labels[partner[i]])).collect(),
        lambda: realized,
    }
}

/// One metrics-log row, emitted every `eval_interval` steps and at the end.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub drop_rate: f64,
    pub train_loss: f64,
    pub eval_acc: f64,
}

pub struct TrainOutcome {
    pub metrics: Vec<MetricsRow>,
}

/// Argmax-accuracy of the model over a split (no augmentation, no drop).
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &LabeledImages<T>) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for (img, &label) in data.images.iter().zip(&data.labels) {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let logits = model.forward_bound(&mut tape, &bound, img, None)?;
        if argmax(tape.value(logits).row(0)) == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Runs the full loop: shuffle per epoch with a seeded RNG, mix, optional
/// token drop, forward, cross-entropy or KL-distillation loss, backward,
/// clip, AdamW with the warmup+cosine schedule. The teacher (when given)
/// sees the full mixed image, never the dropped token set. On a non-finite
/// loss or gradient the weights roll back to the last emitted row's
/// snapshot and an error is returned.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    teacher: Option<&Model<T>>,
    train_set: &LabeledImages<T>,
    eval_set: &LabeledImages<T>,
    plan: &TrainPlan,
) -> Result<TrainOutcome, TrainError> {
    plan.validate().map_err(TrainError::Plan)?;
    if train_set.is_empty() && plan.steps > 0 {
        return Err(TrainError::Plan("empty training set".into()));
    }
    let mut metrics = Vec::new();
    if plan.steps == 0 {
        return Ok(TrainOutcome { metrics });
    }

    let mut shuffle_rng = stream_rng(plan.seed, 0);
    let mut mix_rng = stream_rng(plan.seed, 1);
    let mut drop_rng = stream_rng(plan.seed, 2);

    let mut state = OptimizerState::new(&model.weights);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut loss_acc = 0.0f64;
    let mut loss_count = 0usize;
    let mut snapshot = snapshot_weights(&model.weights);
    let n_patches = model.config.num_patches();

    for step in 0..plan.steps {
        // Seeded Fisher-Yates reshuffle at each epoch boundary.
        if cursor + plan.batch_size > order.len() {
            order = (0..train_set.len()).collect();
            for i in (1..order.len()).rev() {
                let j = shuffle_rng.gen_range(0..=i);
                order.swap(i, j);
            }
            cursor = 0;
        }
        let batch_idx = &order[cursor..(cursor + plan.batch_size).min(order.len())];
        cursor += plan.batch_size;
        let images: Vec<Tensor<T>> = batch_idx.iter().map(|&i| train_set.images[i].clone()).collect();
        let labels: Vec<usize> = batch_idx.iter().map(|&i| train_set.labels[i]).collect();

        let mixed = mix_batch(&images, &labels, plan, &mut mix_rng);

        let (drop_rate, keep) = if plan.drop_tokens {
            let progress = step as f64 / plan.steps as f64;
            let rate = drop_rate_at(progress, plan);
            (rate, Some(sample_kept_tokens(n_patches, rate, &mut drop_rng)))
        } else {
            (0.0, None)
        };

        // Teacher logits on the full mixed images, outside the student tape.
        let teacher_logits: Option<Tensor<T>> = match teacher {
            Some(teacher_model) => {
                let mut rows: Vec<T> = Vec::new();
                let mut cols = 0;
                for img in &mixed.images {
                    let mut ttape = Tape::new();
                    let tb = teacher_model.bind(&mut ttape, false);
                    let logits = teacher_model.forward_bound(&mut ttape, &tb, img, None)?;
                    cols = ttape.value(logits).cols();
                    rows.extend_from_slice(ttape.value(logits).row(0));
                }
                Some(Tensor::matrix(mixed.images.len(), cols, rows)?)
            }
            None => None,
        };

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let mut logit_rows = Vec::with_capacity(mixed.images.len());
        for img in &mixed.images {
            logit_rows.push(model.forward_bound(&mut tape, &bound, img, keep.as_deref())?);
        }
        let logits = tape.concat(Axis::Rows, &logit_rows)?;

        let loss = match &teacher_logits {
            Some(t) => {
                let tnode = tape.constant(t.clone());
                distill_loss(&mut tape, logits, tnode, 1.0)?
            }
            None => {
                let a: Vec<usize> = mixed.label_pairs.iter().map(|p| p.0).collect();
                let b: Vec<usize> = mixed.label_pairs.iter().map(|p| p.1).collect();
                let ce_a = tape.cross_entropy(logits, &a)?;
                if mixed.lambda == 1.0 {
                    ce_a
                } else {
                    let ce_b = tape.cross_entropy(logits, &b)?;
                    let wa = tape.scale(ce_a, T::from_f64(mixed.lambda))?;
                    let wb = tape.scale(ce_b, T::from_f64(1.0 - mixed.lambda))?;
                    tape.add(wa, wb)?
                }
            }
        };

        let loss_value = tape.value(loss).data()[0].to_f64();
        if !loss_value.is_finite() {
            restore_weights(&mut model.weights, &snapshot);
            return Err(TrainError::NonFinite {
                step,
                detail: "loss".into(),
            });
        }

        let grads_by_node = tape.backward(loss)?;
        let mut grads: Vec<Tensor<T>> = Vec::with_capacity(bound.flat.len());
        for &id in &bound.flat {
            grads.push(
                grads_by_node
                    .get(id)
                    .expect("trainable leaf always gets a gradient")
                    .clone(),
            );
        }
        drop(tape);

        clip_gradients(&mut grads, plan.clip_grad_norm);
        let lr = lr_at(step + 1, plan);
        if adamw_step(&mut model.weights, &grads, &mut state, lr, plan.weight_decay).is_err() {
            let name = first_nonfinite_name(&model.weights, &grads);
            restore_weights(&mut model.weights, &snapshot);
            return Err(TrainError::NonFinite {
                step,
                detail: format!("gradient of {name}"),
            });
        }

        loss_acc += loss_value;
        loss_count += 1;
        let at_interval = (step + 1) % plan.eval_interval == 0 || step + 1 == plan.steps;
        if at_interval {
            let eval_acc = evaluate(model, eval_set)?;
            metrics.push(MetricsRow {
                step: step + 1,
                lr,
                drop_rate,
                train_loss: loss_acc / loss_count.max(1) as f64,
                eval_acc,
            });
            loss_acc = 0.0;
            loss_count = 0;
            snapshot = snapshot_weights(&model.weights);
        }
    }
    Ok(TrainOutcome { metrics })
}

/// One decoupled-weight-decay Adam update over a model's full manifest.
/// Gradients must already be clipped; a non-finite gradient aborts before
/// any weight changes.
pub fn adamw_step<T: Scalar>(
    weights: &mut ModelWeights<T>,
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    for g in grads {
        if !g.all_finite() {
            return Err(TrainError::NonFinite {
                step: state.step as usize,
                detail: String::from("gradient"),
            });
        }
    }
    state.step += 1;
    let t = state.step;
    let mut idx = 0usize;
    weights.visit_mut(&mut |_, _, param| {
        adamw_update_one(param, &grads[idx], &mut state.m[idx], &mut state.v[idx], t, lr, weight_decay);
        idx += 1;
    });
    Ok(())
}

pub(crate) fn adamw_update_one<T: Scalar>(
    param: &mut Arc<Tensor<T>>,
    grad: &Tensor<T>,
    m: &mut Tensor<T>,
    v: &mut Tensor<T>,
    t: u64,
    lr: f64,
    weight_decay: f64,
) {
    let bc1 = T::from_f64(1.0 - libm::pow(ADAM_BETA1, t as f64));
    let bc2 = T::from_f64(1.0 - libm::pow(ADAM_BETA2, t as f64));
    let b1 = T::from_f64(ADAM_BETA1);
    let b2 = T::from_f64(ADAM_BETA2);
    let one_m_b1 = T::from_f64(1.0 - ADAM_BETA1);
    let one_m_b2 = T::from_f64(1.0 - ADAM_BETA2);
    let eps = T::from_f64(ADAM_EPS);
    let lr_t = T::from_f64(lr);
    let decay = T::from_f64(lr * weight_decay);
    let w = Arc::make_mut(param);
    for (((wv, &gv), mv), vv) in w
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(m.data_mut().iter_mut())
        .zip(v.data_mut().iter_mut())
    {
        *mv = b1 * *mv + one_m_b1 * gv;
        *vv = b2 * *vv + one_m_b2 * gv * gv;
        let m_hat = *mv / bc1;
        let v_hat = *vv / bc2;
        *wv = *wv - decay * *wv - lr_t * m_hat / (v_hat.sqrt() + eps);
    }
}

fn first_nonfinite_name<T: Scalar>(weights: &ModelWeights<T>, grads: &[Tensor<T>]) -> String {
    let mut idx = 0usize;
    let mut found = String::from("<unknown>");
    weights.visit(&mut |name, _, _| {
        if idx < grads.len() && !grads[idx].all_finite() && found == "<unknown>" {
            found = String::from(name);
        }
        idx += 1;
    });
    found
}

pub(crate) fn snapshot_weights<T: Scalar>(weights: &ModelWeights<T>) -> Vec<Arc<Tensor<T>>> {
    let mut out = Vec::new();
    weights.visit(&mut |_, _, p| out.push(p.clone()));
    out
}

pub(crate) fn restore_weights<T: Scalar>(weights: &mut ModelWeights<T>, snapshot: &[Arc<Tensor<T>>]) {
    let mut idx = 0usize;
    weights.visit_mut(&mut |_, _, p| {
        *p = snapshot[idx].clone();
        idx += 1;
    });
}

/// Independent RNG stream derived from the run seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, Variant};

    fn plan(steps: usize) -> TrainPlan {
        TrainPlan {
            steps,
            peak_lr: 1e-3,
            ..TrainPlan::default()
        }
    }

    #[test]
    fn lr_boundaries_are_exact() {
        let p = plan(1000);
        let warmup = 100;
        assert_eq!(lr_at(warmup, &p), p.peak_lr);
        assert_eq!(lr_at(p.steps, &p), p.final_lr);
        assert_eq!(lr_at(0, &p), 0.0);
    }

    #[test]
    fn lr_cosine_midpoint_identity() {
        let p = plan(1000);
        let warmup = 100;
        let mid = warmup + (p.steps - warmup) / 2;
        let expect = p.final_lr + (p.peak_lr - p.final_lr) / 2.0;
        assert!((lr_at(mid, &p) - expect).abs() / expect < 1e-12);
    }

    #[test]
    fn lr_warmup_is_linear() {
        let p = plan(1000);
        assert!((lr_at(50, &p) - p.peak_lr * 0.5).abs() < 1e-15);
    }

    #[test]
    fn drop_rate_endpoints_and_midpoint() {
        let p = plan(10);
        assert_eq!(drop_rate_at(0.0, &p), 0.9);
        assert_eq!(drop_rate_at(1.0, &p), 0.1);
        assert_eq!(drop_rate_at(0.5, &p), 0.5);
    }

    #[test]
    fn kept_tokens_edge_rates_and_determinism() {
        let mut rng = stream_rng(3, 0);
        let all = sample_kept_tokens(10, 0.0, &mut rng);
        assert_eq!(all, (0..10).collect::<Vec<_>>());

        let mut rng = stream_rng(3, 0);
        let one = sample_kept_tokens(4, 0.75, &mut rng);
        assert_eq!(one.len(), 1, "rate 0.75 of 4 keeps exactly one");

        let mut a_rng = stream_rng(9, 5);
        let mut b_rng = stream_rng(9, 5);
        let a = sample_kept_tokens(64, 0.7, &mut a_rng);
        let b = sample_kept_tokens(64, 0.7, &mut b_rng);
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0] < w[1]), "sorted and distinct");
    }

    #[test]
    fn adamw_zero_grads_and_pure_decay() {
        let mut cfg = ModelConfig::new(Variant::Plain, 16, 2);
        cfg.depth = 1;
        cfg.image_height = 4;
        cfg.image_width = 4;
        cfg.patch_height = 2;
        cfg.patch_width = 2;
        cfg.in_channels = 1;
        cfg.num_classes = 2;
        let mut model = Model::<f64>::init(cfg, 1).unwrap();
        let before = snapshot_weights(&model.weights);
        let zeros: Vec<Tensor<f64>> = before
            .iter()
            .map(|p| Tensor::zeros(p.shape().to_vec()))
            .collect();

        // Zero grads, zero decay: unchanged.
        let mut state = OptimizerState::new(&model.weights);
        adamw_step(&mut model.weights, &zeros, &mut state, 0.1, 0.0).unwrap();
        let after = snapshot_weights(&model.weights);
        for (a, b) in before.iter().zip(&after) {
            assert_eq!(a.data(), b.data());
        }

        // Zero grads, decay lambda: w scaled by (1 - lr * lambda).
        let mut state = OptimizerState::new(&model.weights);
        let (lr, wd) = (0.1, 0.5);
        adamw_step(&mut model.weights, &zeros, &mut state, lr, wd).unwrap();
        let decayed = snapshot_weights(&model.weights);
        for (a, b) in before.iter().zip(&decayed) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x * (1.0 - lr * wd) - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn adamw_two_steps_match_hand_recurrence() {
        // Single scalar parameter, two handcrafted gradients, f64.
        let w0 = 0.7f64;
        let (g1, g2) = (0.3f64, -0.2f64);
        let (lr, wd) = (1e-2, 0.05);

        let mut param = Arc::new(Tensor::scalar(w0));
        let mut m = Tensor::scalar(0.0);
        let mut v = Tensor::scalar(0.0);
        adamw_update_one(&mut param, &Tensor::scalar(g1), &mut m, &mut v, 1, lr, wd);
        adamw_update_one(&mut param, &Tensor::scalar(g2), &mut m, &mut v, 2, lr, wd);

        // Hand-rolled recurrence.
        let (b1, b2, eps) = (ADAM_BETA1, ADAM_BETA2, ADAM_EPS);
        let mut w = w0;
        let (mut mm, mut vv) = (0.0f64, 0.0f64);
        for (t, g) in [(1, g1), (2, g2)] {
            mm = b1 * mm + (1.0 - b1) * g;
            vv = b2 * vv + (1.0 - b2) * g * g;
            let mh = mm / (1.0 - b1.powi(t));
            let vh = vv / (1.0 - b2.powi(t));
            w = w - lr * wd * w - lr * mh / (vh.sqrt() + eps);
        }
        let got = param.data()[0];
        assert!(
            (got - w).abs() / w.abs() < 1e-12,
            "adamw {got} vs oracle {w}"
        );
    }

    #[test]
    fn clip_preserves_direction_and_caps_norm() {
        let mut grads = vec![
            Tensor::matrix(1, 2, vec![3.0f64, 0.0]).unwrap(),
            Tensor::matrix(1, 1, vec![4.0f64]).unwrap(),
        ];
        let pre = clip_gradients(&mut grads, 1.0);
        assert!((pre - 5.0).abs() < 1e-12);
        let post = (grads[0].data()[0].powi(2) + grads[1].data()[0].powi(2)).sqrt();
        assert!(post <= 1.0 + 1e-6);
        // Direction preserved: components keep their 3:4 ratio.
        assert!((grads[0].data()[0] / grads[1].data()[0] - 0.75).abs() < 1e-12);

        // Below the threshold nothing changes.
        let mut small = vec![Tensor::matrix(1, 1, vec![0.5f64]).unwrap()];
        clip_gradients(&mut small, 1.0);
        assert_eq!(small[0].data()[0], 0.5);
    }

    fn const_image(h: usize, w: usize, v: f64) -> Tensor<f64> {
        Tensor::new(alloc::vec![h, w, 1], alloc::vec![v; h * w])
            .unwrap()
    }

    #[test]
    fn mixing_disabled_or_degenerate_leaves_images_unchanged() {
        let imgs = alloc::vec![const_image(4, 4, 0.2), const_image(4, 4, 0.8)];
        let labels = alloc::vec![0usize, 1];

        // Both alphas zero: no mixing at all.
        let p = TrainPlan {
            mixup_alpha: 0.0,
            cutmix_alpha: 0.0,
            ..plan(10)
        };
        let mut rng = stream_rng(0, 1);
        let out = mix_batch(&imgs, &labels, &p, &mut rng);
        assert_eq!(out.lambda, 1.0);
        assert_eq!(out.images[0].data(), imgs[0].data());
        assert_eq!(out.label_pairs, alloc::vec![(0, 0), (1, 1)]);

        // Mixup of an image with itself is unchanged for any lambda.
        let same = alloc::vec![const_image(4, 4, 0.5), const_image(4, 4, 0.5)];
        let p = TrainPlan {
            mixup_alpha: 0.8,
            cutmix_alpha: 0.0,
            ..plan(10)
        };
        let mut rng = stream_rng(1, 1);
        let out = mix_batch(&same, &[0, 0], &p, &mut rng);
        for img in &out.images {
            for &v in img.data() {
                assert!((v - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cutmix_rectangle_area_matches_reported_lambda() {
        // Distinguishable images so the pasted rectangle is countable.
        let imgs = alloc::vec![const_image(32, 32, 0.0), const_image(32, 32, 1.0)];
        let labels = alloc::vec![0usize, 1];
        let p = TrainPlan {
            mixup_alpha: 0.0,
            cutmix_alpha: 1.0,
            ..plan(10)
        };
        for seed in 0..20 {
            let mut rng = stream_rng(seed, 2);
            let out = mix_batch(&imgs, &labels, &p, &mut rng);
            if out.lambda == 1.0 {
                continue; // degenerate zero-size rectangle
            }
            // Count pasted pixels in image 0 (partner pixels are 1.0 when
            // the partner is image 1; with a 2-element batch the permutation
            // either swaps or fixes, and fixing leaves pixels at 0.0).
            let pasted = out.images[0].data().iter().filter(|&&v| v == 1.0).count();
            if pasted == 0 {
                continue; // partner permutation was the identity
            }
            let frac = pasted as f64 / 1024.0;
            assert!(
                (frac - (1.0 - out.lambda)).abs() < 1e-9,
                "area fraction {frac} vs 1 - lambda {}",
                1.0 - out.lambda
            );
            // Within one row/column of the Beta draw's implied area.
            let side = libm::sqrt(frac) * 32.0;
            assert!((side - libm::round(side)).abs() < 1e-9);
            return;
        }
        panic!("no non-degenerate cutmix draw in 20 seeds");
    }

    #[test]
    fn distill_loss_zero_iff_equal_and_log_c_for_uniform() {
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(Tensor::matrix(2, 6, alloc::vec![0.3; 12]).unwrap());
        let loss = distill_loss(&mut tape, s, s, 1.0).unwrap();
        assert!(tape.value(loss).data()[0].abs() < 1e-12);
        assert!(distill_loss(&mut tape, s, s, 0.0).is_err());
    }

    #[test]
    fn plan_validation_rejects_bad_ranges() {
        assert!(plan(10).validate().is_ok());
        let mut p = plan(10);
        p.warmup_fraction = 1.0;
        assert!(p.validate().is_err());
        let mut p = plan(10);
        p.final_lr = p.peak_lr;
        assert!(p.validate().is_err());
        let mut p = plan(10);
        p.drop_end = 0.95;
        assert!(p.validate().is_err());
    }

    #[test]
    fn train_zero_steps_is_a_no_op() {
        let mut cfg = ModelConfig::new(Variant::Plain, 16, 2);
        cfg.depth = 1;
        cfg.image_height = 4;
        cfg.image_width = 4;
        cfg.patch_height = 2;
        cfg.patch_width = 2;
        cfg.in_channels = 1;
        cfg.num_classes = 2;
        let mut model = Model::<f32>::init(cfg, 1).unwrap();
        let before = snapshot_weights(&model.weights);
        let data = LabeledImages::<f32> {
            images: alloc::vec![Tensor::zeros(alloc::vec![4, 4, 1])],
            labels: alloc::vec![0],
        };
        let out = train(&mut model, None, &data, &data, &plan(0)).unwrap();
        assert!(out.metrics.is_empty());
        let after = snapshot_weights(&model.weights);
        for (a, b) in before.iter().zip(&after) {
            assert_eq!(a.data(), b.data());
        }
    }
}
