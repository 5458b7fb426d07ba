//! Finite-difference gradient oracle over a complete model: every
//! parameter of a small jumbo classifier is perturbed with central
//! differences (double precision) and compared against the tape's
//! reverse-mode gradients. The oracle only runs forward passes.

use std::sync::Arc;

use jumbo_core::config::{ModelConfig, Variant};
use jumbo_core::model::Model;
use jumbo_core::tape::Tape;
use jumbo_core::tensor::Tensor;
use jumbo_core::train::distill_loss;

fn small_jumbo(discard_last: bool) -> Model<f64> {
    let mut cfg = ModelConfig::new(Variant::Jumbo, 8, 2);
    cfg.depth = 1;
    cfg.image_height = 4;
    cfg.image_width = 4;
    cfg.patch_height = 2;
    cfg.patch_width = 2;
    cfg.in_channels = 1;
    cfg.num_classes = 2;
    cfg.jumbo_multiplier = 2;
    cfg.discard_last_patch_ffn = discard_last;
    Model::init(cfg, 31).unwrap()
}

fn lcg_image(seed: u64) -> Tensor<f64> {
    let mut s = seed | 1;
    Tensor::new(
        vec![4, 4, 1],
        (0..16)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(99);
                ((s >> 33) as f64 / (1u64 << 31) as f64) - 1.0
            })
            .collect(),
    )
    .unwrap()
}

/// Moves every parameter to uniform(-0.5, 0.5). The 0.02-std init point is
/// too stiff for h = 1e-4 central differences (layer norms over rows with
/// variance ~4e-4 have third derivatives ~1/sigma^3, so the h^2 truncation
/// term dominates); derivative rules are weight-scale independent, so the
/// oracle runs at a well-conditioned point.
fn randomize_weights(model: &mut Model<f64>, seed: u64) {
    let mut s = seed | 1;
    model.weights.visit_mut(&mut |_, _, p| {
        for v in Arc::make_mut(p).data_mut() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            *v = ((s >> 33) as f64 / (1u64 << 32) as f64) - 0.5;
        }
    });
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Checks reverse-mode grads of `loss_of(model)` against central
/// differences for every parameter element.
fn check_model_grads(
    model: &mut Model<f64>,
    loss_and_grads: impl Fn(&Model<f64>) -> (f64, Vec<Tensor<f64>>),
) {
    let (_, analytic) = loss_and_grads(model);
    let names: Vec<String> = model
        .weights
        .named_params()
        .into_iter()
        .map(|(n, _, _)| n)
        .collect();
    let h = 1e-4;
    let n_params = names.len();
    for pi in 0..n_params {
        let numel = {
            let mut numel = 0;
            let mut idx = 0;
            model.weights.visit(&mut |_, _, p| {
                if idx == pi {
                    numel = p.numel();
                }
                idx += 1;
            });
            numel
        };
        for e in 0..numel {
            let poke = |model: &mut Model<f64>, delta: f64| {
                let mut idx = 0;
                model.weights.visit_mut(&mut |_, _, p| {
                    if idx == pi {
                        Arc::make_mut(p).data_mut()[e] += delta;
                    }
                    idx += 1;
                });
            };
            poke(model, h);
            let (plus, _) = loss_and_grads(model);
            poke(model, -2.0 * h);
            let (minus, _) = loss_and_grads(model);
            poke(model, h);
            let fd = (plus - minus) / (2.0 * h);
            let ad = analytic[pi].data()[e];
            assert!(
                rel_err(ad, fd) < 1e-4,
                "{} elem {e}: reverse-mode {ad} vs finite-difference {fd}",
                names[pi]
            );
        }
    }
}

#[test]
fn cross_entropy_grads_match_finite_differences_for_every_param() {
    let image = lcg_image(7);
    let mut model = small_jumbo(false);
    randomize_weights(&mut model, 501);
    check_model_grads(&mut model, |m| {
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, true);
        let logits = m.forward_bound(&mut tape, &bound, &image, None).unwrap();
        let loss = tape.cross_entropy(logits, &[1]).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gs = bound
            .flat
            .iter()
            .map(|&id| grads.get(id).unwrap().clone())
            .collect();
        (tape.value(loss).data()[0], gs)
    });
}

#[test]
fn dropped_token_distillation_grads_match_finite_differences() {
    // Exercises select_rows (position-embedding gather) and the KL loss
    // against a frozen teacher, with the teacher on the full image.
    let image = lcg_image(9);
    let teacher = small_jumbo(true);
    let teacher_logits: Tensor<f64> = {
        let mut tape = Tape::new();
        let bound = teacher.bind(&mut tape, false);
        let l = teacher.forward_bound(&mut tape, &bound, &image, None).unwrap();
        tape.value(l).clone()
    };
    let keep = vec![0usize, 2];
    let mut model = small_jumbo(true);
    randomize_weights(&mut model, 502);
    check_model_grads(&mut model, |m| {
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, true);
        let logits = m
            .forward_bound(&mut tape, &bound, &image, Some(&keep))
            .unwrap();
        let t = tape.constant(teacher_logits.clone());
        let loss = distill_loss(&mut tape, logits, t, 1.0).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gs = bound
            .flat
            .iter()
            .map(|&id| grads.get(id).unwrap().clone())
            .collect();
        (tape.value(loss).data()[0], gs)
    });
}

#[test]
fn lora_adapter_grads_match_finite_differences() {
    let image = lcg_image(11);
    let mut model = small_jumbo(true);
    randomize_weights(&mut model, 503);
    jumbo_core::efficiency::tie_jumbo_ffn(&mut model).unwrap();
    jumbo_core::efficiency::attach_lora(&mut model, 2, 5).unwrap();
    // Move B off zero so its gradient interacts with A.
    let mut idx = 0;
    model.weights.visit_mut(&mut |name, _, p| {
        if name.contains(".B.") {
            for (k, v) in Arc::make_mut(p).data_mut().iter_mut().enumerate() {
                *v = 0.01 * ((k + idx) as f64 % 7.0 - 3.0);
            }
        }
        idx += 1;
    });
    check_model_grads(&mut model, |m| {
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, true);
        let logits = m.forward_bound(&mut tape, &bound, &image, None).unwrap();
        let loss = tape.cross_entropy(logits, &[0]).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gs = bound
            .flat
            .iter()
            .map(|&id| grads.get(id).unwrap().clone())
            .collect();
        (tape.value(loss).data()[0], gs)
    });
}
