//! Parameter-controlled jumbo variants: layer-tied wide-token FFN and
//! per-layer low-rank adapters on the tied weights, plus exact parameter
//! counting.
//!
//! The adapter is one rank-r pair per layer applied in parallel to the
//! shared FFN (input and output width both `J*D`), with `B` zero-initialized
//! so a freshly adapted model computes exactly what the tied model does.

use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{JumboFfnMode, Variant};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Result, TensorError};
use crate::weights::{lora_adapter, JumboFfnParams, ParamGroup};

/// Replaces the per-layer wide-token FFNs with one shared set initialized
/// from layer 0. All layers alias the same parameters afterwards, so the
/// manifest shrinks by a factor of `depth` on that group.
pub fn tie_jumbo_ffn<T: Scalar>(model: &mut Model<T>) -> Result<()> {
    if model.config.variant != Variant::Jumbo {
        return Err(TensorError::Contract {
            op: "tie_jumbo_ffn",
            detail: "layer tying applies only to the jumbo variant".into(),
        });
    }
    let shared = match &model.weights.jumbo_ffn {
        Some(JumboFfnParams::PerLayer(blocks)) => blocks[0].clone(),
        Some(JumboFfnParams::Tied { shared, .. }) => shared.clone(),
        None => {
            return Err(TensorError::Contract {
                op: "tie_jumbo_ffn",
                detail: "model has no wide-token FFN".into(),
            })
        }
    };
    model.weights.jumbo_ffn = Some(JumboFfnParams::Tied {
        shared,
        adapters: None,
    });
    model.config.jumbo_ffn_mode = JumboFfnMode::Tied;
    Ok(())
}

/// Attaches one rank-r adapter per layer to a tied model. `B` starts at
/// zero, so logits are unchanged until training moves the adapters.
pub fn attach_lora<T: Scalar>(model: &mut Model<T>, rank: usize, seed: u64) -> Result<()> {
    if rank == 0 {
        return Err(TensorError::Contract {
            op: "attach_lora",
            detail: "rank 0 has no adapter; use the tied model directly".into(),
        });
    }
    if model.config.jumbo_ffn_mode == JumboFfnMode::PerLayer {
        tie_jumbo_ffn(model)?;
    }
    let jd = model.config.jumbo_multiplier * model.config.width;
    let depth = model.config.depth;
    let mut sampler = crate::weights::Sampler::Seeded(ChaCha8Rng::seed_from_u64(seed));
    match &mut model.weights.jumbo_ffn {
        Some(JumboFfnParams::Tied { adapters, .. }) => {
            *adapters = Some(
                (0..depth)
                    .map(|_| lora_adapter(rank, jd, jd, &mut sampler))
                    .collect(),
            );
        }
        _ => unreachable!("tie_jumbo_ffn establishes the tied layout"),
    }
    model.config.jumbo_ffn_mode = JumboFfnMode::TiedLora { rank };
    Ok(())
}

/// Low-rank adapted linear map: `x*W + bias + (x*A^T)*B^T`, with `A` of
/// shape `rank x d_in` and `B` of shape `d_out x rank`. The dense sum
/// `W + B*A` is never materialized; the extra cost is exactly
/// `rank * (d_in + d_out)` MACs per input row.
pub fn lora_linear<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    weight: NodeId,
    bias: Option<NodeId>,
    a: NodeId,
    b: NodeId,
) -> Result<NodeId> {
    let rank = tape.value(a).rows();
    if rank == 0 || tape.value(b).cols() != rank {
        return Err(TensorError::Contract {
            op: "lora_linear",
            detail: alloc::format!(
                "adapter rank {rank} (A {:?}, B {:?}) must be positive and agree",
                tape.value(a).shape(),
                tape.value(b).shape()
            ),
        });
    }
    let base = tape.matmul(x, weight)?;
    let base = match bias {
        Some(bid) => tape.add_row(base, bid)?,
        None => base,
    };
    let xa = tape.matmul_nt(x, a)?;
    let delta = tape.matmul_nt(xa, b)?;
    tape.add(base, delta)
}

/// Exact parameter counts, total and per structural group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub total: u64,
    pub by_group: Vec<(ParamGroup, u64)>,
}

impl ParamCount {
    pub fn group(&self, g: ParamGroup) -> u64 {
        self.by_group
            .iter()
            .find(|(gg, _)| *gg == g)
            .map_or(0, |(_, n)| *n)
    }
}

pub fn count_params<T: Scalar>(model: &Model<T>) -> ParamCount {
    let mut by_group: Vec<(ParamGroup, u64)> = Vec::new();
    let mut total = 0u64;
    model.weights.visit(&mut |_, group, p| {
        let n = p.numel() as u64;
        total += n;
        match by_group.iter_mut().find(|(g, _)| *g == group) {
            Some((_, acc)) => *acc += n,
            None => by_group.push((group, n)),
        }
    });
    by_group.sort_by_key(|(g, _)| *g);
    ParamCount { total, by_group }
}

/// Human-oriented description of the group labels, for reports.
pub fn group_label(group: ParamGroup) -> &'static str {
    match group {
        ParamGroup::Embed => "tokens+positions",
        ParamGroup::Attention => "backbone-attention",
        ParamGroup::PatchFfn => "patch-ffn",
        ParamGroup::JumboFfn => "jumbo-ffn",
        ParamGroup::Head => "head",
        ParamGroup::Adapter => "adapters",
    }
}

/// Convenience used by reports and tests: `(label, count)` rows.
pub fn count_breakdown<T: Scalar>(model: &Model<T>) -> Vec<(String, u64)> {
    count_params(model)
        .by_group
        .iter()
        .map(|(g, n)| (String::from(group_label(*g)), *n))
        .collect()
}
