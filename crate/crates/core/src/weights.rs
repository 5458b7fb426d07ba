//! Learnable parameters, initialization, and the canonical-name walker.
//!
//! Every parameter has a stable canonical name; the walker visits them in a
//! fixed order that checkpointing, the optimizer, and parameter counting all
//! share. Weights are held behind `Arc` so a forward pass can reference them
//! without copying; the optimizer mutates through `Arc::make_mut` on the
//! single owning handle.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{JumboFfnMode, ModelConfig, Variant};
use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor, TensorError};

/// Book-keeping group a parameter belongs to, for the count breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamGroup {
    /// Patch projection, position embeddings, and global tokens.
    Embed,
    /// Attention pre-norms and Q/K/V/output projections.
    Attention,
    PatchFfn,
    JumboFfn,
    /// Final norm and classification head.
    Head,
    /// LoRA adapters.
    Adapter,
}

pub type Param<T> = Arc<Tensor<T>>;

/// `weight` is stored input-major (`d_in x d_out`), applied as `x * weight`.
#[derive(Debug, Clone)]
pub struct LinearParams<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

#[derive(Debug, Clone)]
pub struct NormParams<T> {
    pub gain: Param<T>,
    pub bias: Param<T>,
}

#[derive(Debug, Clone)]
pub struct FfnParams<T> {
    pub lin1: LinearParams<T>,
    pub lin2: LinearParams<T>,
}

/// Low-rank adapter pair; `a` is `rank x d_in`, `b` is `d_out x rank`.
/// `b` starts at zero so the adapted map equals the shared map at init.
#[derive(Debug, Clone)]
pub struct LoraAdapter<T> {
    pub a: Param<T>,
    pub b: Param<T>,
}

#[derive(Debug, Clone)]
pub struct AttentionParams<T> {
    pub q: LinearParams<T>,
    pub k: LinearParams<T>,
    pub v: LinearParams<T>,
    pub out: LinearParams<T>,
}

/// Norm + FFN pair processing the reassembled wide token.
#[derive(Debug, Clone)]
pub struct JumboFfnBlock<T> {
    pub norm: NormParams<T>,
    pub ffn: FfnParams<T>,
}

#[derive(Debug, Clone)]
pub enum JumboFfnParams<T> {
    PerLayer(Vec<JumboFfnBlock<T>>),
    Tied {
        shared: JumboFfnBlock<T>,
        /// One adapter per layer, applied in parallel to the shared FFN.
        adapters: Option<Vec<LoraAdapter<T>>>,
    },
}

#[derive(Debug, Clone)]
pub struct LayerParams<T> {
    pub attn_norm: NormParams<T>,
    /// Wide-token pre-norm for attention (jumbo variant only); normalizes
    /// the full `J*D` token before splitting.
    pub attn_norm_jumbo: Option<NormParams<T>>,
    pub attn: AttentionParams<T>,
    /// Absent on the last layer when `discard_last_patch_ffn`.
    pub ffn_norm: Option<NormParams<T>>,
    pub ffn: Option<FfnParams<T>>,
}

#[derive(Debug, Clone)]
pub enum GlobalTokens<T> {
    Cls {
        cls: Param<T>,
    },
    ClsWithRegisters {
        cls: Param<T>,
        /// `R x D`; registers receive no position embeddings.
        registers: Param<T>,
    },
    Jumbo {
        /// `1 x (J*D)`.
        token: Param<T>,
    },
}

#[derive(Debug, Clone)]
pub struct ModelWeights<T> {
    pub patch_proj: LinearParams<T>,
    /// `N x D` learnable table.
    pub pos_embed: Param<T>,
    pub globals: GlobalTokens<T>,
    pub layers: Vec<LayerParams<T>>,
    pub jumbo_ffn: Option<JumboFfnParams<T>>,
    pub final_norm: NormParams<T>,
    /// Classification head; absent in backbones whose head lives outside
    /// (the multichannel time-series model concatenates per-channel
    /// representations before its own projection).
    pub head: Option<LinearParams<T>>,
}

pub(crate) const INIT_STD: f64 = 0.02;

/// Truncated normal: std 0.02, resampled outside two standard deviations.
fn trunc_normal<T: Scalar>(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Param<T> {
    let dist = Normal::new(0.0f64, INIT_STD).unwrap();
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| loop {
            let v = dist.sample(rng);
            if v.abs() <= 2.0 * INIT_STD {
                break T::from_f64(v);
            }
        })
        .collect();
    Arc::new(Tensor::new(shape, data).unwrap())
}

/// Source of fresh weight tensors: seeded truncated normals for real
/// models, zero pages for layout-only construction.
pub(crate) enum Sampler {
    Seeded(ChaCha8Rng),
    Zeroed,
}

impl Sampler {
    fn draw<T: Scalar>(&mut self, shape: Vec<usize>) -> Param<T> {
        match self {
            Sampler::Seeded(rng) => trunc_normal(shape, rng),
            Sampler::Zeroed => zeros(shape),
        }
    }
}

fn zeros<T: Scalar>(shape: Vec<usize>) -> Param<T> {
    Arc::new(Tensor::zeros(shape))
}

fn ones<T: Scalar>(cols: usize) -> Param<T> {
    Arc::new(Tensor::matrix(1, cols, alloc::vec![T::ONE; cols]).unwrap())
}

pub(crate) fn init_linear<T: Scalar>(
    d_in: usize,
    d_out: usize,
    sampler: &mut Sampler,
) -> LinearParams<T> {
    LinearParams {
        weight: sampler.draw(alloc::vec![d_in, d_out]),
        bias: zeros(alloc::vec![1, d_out]),
    }
}

fn norm<T: Scalar>(d: usize) -> NormParams<T> {
    NormParams {
        gain: ones(d),
        bias: zeros(alloc::vec![1, d]),
    }
}

fn ffn<T: Scalar>(d: usize, hidden: usize, sampler: &mut Sampler) -> FfnParams<T> {
    FfnParams {
        lin1: init_linear(d, hidden, sampler),
        lin2: init_linear(hidden, d, sampler),
    }
}

fn jumbo_block<T: Scalar>(cfg: &ModelConfig, sampler: &mut Sampler) -> JumboFfnBlock<T> {
    let jd = cfg.jumbo_multiplier * cfg.width;
    JumboFfnBlock {
        norm: norm(jd),
        ffn: ffn(jd, cfg.jumbo_ffn_multiplier * jd, sampler),
    }
}

pub(crate) fn lora_adapter<T: Scalar>(
    rank: usize,
    d_in: usize,
    d_out: usize,
    sampler: &mut Sampler,
) -> LoraAdapter<T> {
    LoraAdapter {
        a: sampler.draw(alloc::vec![rank, d_in]),
        b: zeros(alloc::vec![d_out, rank]),
    }
}

impl<T: Scalar> ModelWeights<T> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Self::init_with_head(cfg, seed, true)
    }

    /// Zero weights (norm gains still one): same manifest as [`init`] with
    /// no sampling, so very large configurations cost only zero pages.
    /// Parameter counting on the paper-scale models goes through this.
    pub fn zeroed(cfg: &ModelConfig) -> Result<Self> {
        Self::build(cfg, Sampler::Zeroed, true)
    }

    /// Backbone without a classification head.
    pub fn init_headless(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Self::init_with_head(cfg, seed, false)
    }

    fn init_with_head(cfg: &ModelConfig, seed: u64, with_head: bool) -> Result<Self> {
        Self::build(cfg, Sampler::Seeded(ChaCha8Rng::seed_from_u64(seed)), with_head)
    }

    fn build(cfg: &ModelConfig, mut rng: Sampler, with_head: bool) -> Result<Self> {
        cfg.validate().map_err(|detail| TensorError::Contract {
            op: "ModelWeights::init",
            detail,
        })?;
        let d = cfg.width;
        let n = cfg.num_patches();

        let patch_proj = init_linear(cfg.patch_dim(), d, &mut rng);
        let pos_embed = rng.draw(alloc::vec![n, d]);
        let globals = match cfg.variant {
            Variant::Plain => GlobalTokens::Cls {
                cls: rng.draw(alloc::vec![1, d]),
            },
            Variant::Registers => GlobalTokens::ClsWithRegisters {
                cls: rng.draw(alloc::vec![1, d]),
                registers: rng.draw(alloc::vec![cfg.register_count, d]),
            },
            Variant::Jumbo => GlobalTokens::Jumbo {
                token: rng.draw(alloc::vec![1, cfg.jumbo_multiplier * d]),
            },
        };

        let mut layers = Vec::with_capacity(cfg.depth);
        let mut per_layer_jumbo = Vec::new();
        for i in 0..cfg.depth {
            let last = i + 1 == cfg.depth;
            let keep_ffn = !(last && cfg.discard_last_patch_ffn);
            layers.push(LayerParams {
                attn_norm: norm(d),
                attn_norm_jumbo: (cfg.variant == Variant::Jumbo)
                    .then(|| norm(cfg.jumbo_multiplier * d)),
                attn: AttentionParams {
                    q: init_linear(d, d, &mut rng),
                    k: init_linear(d, d, &mut rng),
                    v: init_linear(d, d, &mut rng),
                    out: init_linear(d, d, &mut rng),
                },
                ffn_norm: keep_ffn.then(|| norm(d)),
                ffn: keep_ffn.then(|| ffn(d, cfg.patch_ffn_multiplier * d, &mut rng)),
            });
            if cfg.variant == Variant::Jumbo && cfg.jumbo_ffn_mode == JumboFfnMode::PerLayer {
                per_layer_jumbo.push(jumbo_block(cfg, &mut rng));
            }
        }

        let jumbo_ffn = match (cfg.variant, cfg.jumbo_ffn_mode) {
            (Variant::Jumbo, JumboFfnMode::PerLayer) => {
                Some(JumboFfnParams::PerLayer(per_layer_jumbo))
            }
            (Variant::Jumbo, JumboFfnMode::Tied) => Some(JumboFfnParams::Tied {
                shared: jumbo_block(cfg, &mut rng),
                adapters: None,
            }),
            (Variant::Jumbo, JumboFfnMode::TiedLora { rank }) => {
                let shared = jumbo_block(cfg, &mut rng);
                let jd = cfg.jumbo_multiplier * d;
                let adapters = (0..cfg.depth)
                    .map(|_| lora_adapter(rank, jd, jd, &mut rng))
                    .collect();
                Some(JumboFfnParams::Tied {
                    shared,
                    adapters: Some(adapters),
                })
            }
            _ => None,
        };

        Ok(ModelWeights {
            patch_proj,
            pos_embed,
            globals,
            layers,
            jumbo_ffn,
            final_norm: norm(cfg.global_width()),
            head: with_head.then(|| init_linear(cfg.global_width(), cfg.num_classes, &mut rng)),
        })
    }

    /// Visits every parameter as `(canonical name, group, tensor)` in the
    /// fixed manifest order. Tied parameters are visited exactly once.
    pub fn visit(&self, f: &mut dyn FnMut(&str, ParamGroup, &Param<T>)) {
        // The shared-reference walker delegates to the mutable one via a
        // cast-free shim to keep the two orders identical by construction.
        let mut this = self.clone();
        this.visit_mut(&mut |name, group, param| f(name, group, param));
    }

    /// Mutable variant of [`visit`]; same names, same order.
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamGroup, &mut Param<T>)) {
        use ParamGroup::*;
        f("patch_proj.weight", Embed, &mut self.patch_proj.weight);
        f("patch_proj.bias", Embed, &mut self.patch_proj.bias);
        f("pos_embed", Embed, &mut self.pos_embed);
        match &mut self.globals {
            GlobalTokens::Cls { cls } => f("cls_token", Embed, cls),
            GlobalTokens::ClsWithRegisters { cls, registers } => {
                f("cls_token", Embed, cls);
                f("register_tokens", Embed, registers);
            }
            GlobalTokens::Jumbo { token } => f("jumbo_token", Embed, token),
        }
        let visit_linear =
            |name: &str, group: ParamGroup, lin: &mut LinearParams<T>, f: &mut dyn FnMut(&str, ParamGroup, &mut Param<T>)| {
                f(&format!("{name}.weight"), group, &mut lin.weight);
                f(&format!("{name}.bias"), group, &mut lin.bias);
            };
        let visit_norm =
            |name: &str, group: ParamGroup, nm: &mut NormParams<T>, f: &mut dyn FnMut(&str, ParamGroup, &mut Param<T>)| {
                f(&format!("{name}.gain"), group, &mut nm.gain);
                f(&format!("{name}.bias"), group, &mut nm.bias);
            };
        for (i, layer) in self.layers.iter_mut().enumerate() {
            visit_norm(&format!("layers.{i}.attn_norm"), Attention, &mut layer.attn_norm, f);
            if let Some(nj) = &mut layer.attn_norm_jumbo {
                visit_norm(&format!("layers.{i}.attn_norm_jumbo"), Attention, nj, f);
            }
            visit_linear(&format!("layers.{i}.attn.q"), Attention, &mut layer.attn.q, f);
            visit_linear(&format!("layers.{i}.attn.k"), Attention, &mut layer.attn.k, f);
            visit_linear(&format!("layers.{i}.attn.v"), Attention, &mut layer.attn.v, f);
            visit_linear(&format!("layers.{i}.attn.out"), Attention, &mut layer.attn.out, f);
            if let Some(nm) = &mut layer.ffn_norm {
                visit_norm(&format!("layers.{i}.ffn_norm"), PatchFfn, nm, f);
            }
            if let Some(ffn) = &mut layer.ffn {
                visit_linear(&format!("layers.{i}.ffn.lin1"), PatchFfn, &mut ffn.lin1, f);
                visit_linear(&format!("layers.{i}.ffn.lin2"), PatchFfn, &mut ffn.lin2, f);
            }
        }
        match &mut self.jumbo_ffn {
            Some(JumboFfnParams::PerLayer(blocks)) => {
                for (i, block) in blocks.iter_mut().enumerate() {
                    visit_norm(&format!("layers.{i}.jumbo_ffn.norm"), JumboFfn, &mut block.norm, f);
                    visit_linear(&format!("layers.{i}.jumbo_ffn.lin1"), JumboFfn, &mut block.ffn.lin1, f);
                    visit_linear(&format!("layers.{i}.jumbo_ffn.lin2"), JumboFfn, &mut block.ffn.lin2, f);
                }
            }
            Some(JumboFfnParams::Tied { shared, adapters }) => {
                visit_norm("jumbo_ffn.shared.norm", JumboFfn, &mut shared.norm, f);
                visit_linear("jumbo_ffn.shared.lin1", JumboFfn, &mut shared.ffn.lin1, f);
                visit_linear("jumbo_ffn.shared.lin2", JumboFfn, &mut shared.ffn.lin2, f);
                if let Some(adapters) = adapters {
                    for (i, ad) in adapters.iter_mut().enumerate() {
                        f(&format!("jumbo_ffn.lora.layer{i}.A.weight"), Adapter, &mut ad.a);
                        f(&format!("jumbo_ffn.lora.layer{i}.B.weight"), Adapter, &mut ad.b);
                    }
                }
            }
            None => {}
        }
        visit_norm("final_norm", Head, &mut self.final_norm, f);
        if let Some(head) = &mut self.head {
            visit_linear("head", Head, head, f);
        }
    }

    /// Parameters in manifest order.
    pub fn named_params(&self) -> Vec<(String, ParamGroup, Param<T>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, group, p| out.push((String::from(name), group, p.clone())));
        out
    }

    pub fn num_params(&self) -> u64 {
        let mut total = 0u64;
        self.visit(&mut |_, _, p| total += p.numel() as u64);
        total
    }

    /// Replaces parameters by canonical name. Shape mismatches are reported
    /// through `on_mismatch` (the caller decides whether to re-initialize,
    /// as the two-stage resolution pipeline does for position embeddings);
    /// names absent from `source` are left untouched and reported too.
    pub fn load_from(
        &mut self,
        source: &[(String, Tensor<T>)],
        on_mismatch: &mut dyn FnMut(&str),
    ) {
        self.visit_mut(&mut |name, _, param| {
            match source.iter().find(|(n, _)| n == name) {
                Some((_, tensor)) if tensor.shape() == param.shape() => {
                    *param = Arc::new(tensor.clone());
                }
                _ => on_mismatch(name),
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, Variant};

    fn tiny_jumbo() -> ModelConfig {
        let mut cfg = ModelConfig::new(Variant::Jumbo, 16, 2);
        cfg.depth = 2;
        cfg.image_height = 4;
        cfg.image_width = 4;
        cfg.patch_height = 2;
        cfg.patch_width = 2;
        cfg.in_channels = 1;
        cfg.num_classes = 3;
        cfg.jumbo_multiplier = 2;
        cfg
    }

    #[test]
    fn init_is_deterministic_and_names_unique() {
        let cfg = tiny_jumbo();
        let a = ModelWeights::<f32>::init(&cfg, 7).unwrap();
        let b = ModelWeights::<f32>::init(&cfg, 7).unwrap();
        let (pa, pb) = (a.named_params(), b.named_params());
        assert_eq!(pa.len(), pb.len());
        for ((na, _, ta), (nb, _, tb)) in pa.iter().zip(&pb) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data(), "seeded init must be bit-identical");
        }
        let mut names: Vec<_> = pa.iter().map(|(n, _, _)| n.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), pa.len(), "canonical names must be unique");
    }

    #[test]
    fn discard_last_patch_ffn_shapes_the_manifest() {
        let cfg = tiny_jumbo();
        let w = ModelWeights::<f32>::init(&cfg, 0).unwrap();
        let names: Vec<String> = w.named_params().into_iter().map(|(n, _, _)| n).collect();
        assert!(names.iter().any(|n| n == "layers.0.ffn.lin1.weight"));
        assert!(!names.iter().any(|n| n == "layers.1.ffn.lin1.weight"));
        assert!(names.iter().any(|n| n == "layers.1.jumbo_ffn.lin1.weight"));
    }

    #[test]
    fn tied_mode_shrinks_manifest_and_uses_shared_names() {
        let mut cfg = tiny_jumbo();
        let untied = ModelWeights::<f32>::init(&cfg, 0).unwrap();
        cfg.jumbo_ffn_mode = JumboFfnMode::Tied;
        let tied = ModelWeights::<f32>::init(&cfg, 0).unwrap();
        assert!(tied.num_params() < untied.num_params());
        let names: Vec<String> = tied.named_params().into_iter().map(|(n, _, _)| n).collect();
        assert!(names.iter().any(|n| n == "jumbo_ffn.shared.lin1.weight"));
        assert!(!names.iter().any(|n| n.contains("layers.0.jumbo_ffn")));
    }

    #[test]
    fn truncated_init_stays_within_two_sigma() {
        let cfg = tiny_jumbo();
        let w = ModelWeights::<f64>::init(&cfg, 3).unwrap();
        w.visit(&mut |name, _, p| {
            if name.ends_with(".weight") || name == "pos_embed" || name == "jumbo_token" {
                for &v in p.data() {
                    assert!(v.abs() <= 2.0 * INIT_STD + 1e-12, "{name}: {v}");
                }
            }
        });
    }
}
