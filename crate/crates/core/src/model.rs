//! The three architectures: plain ViT, ViT with registers, and ViT with a
//! wide (Jumbo) CLS token, sharing one pre-norm transformer layer.
//!
//! The jumbo mechanism per layer: normalize the full `J*D` token, split it
//! into `J` width-`D` rows, run attention over `[split token || patches]`,
//! take the first `J` output rows back, reassemble them by concatenation
//! along the feature axis, and send the result through a dedicated FFN.
//! Patch rows go through the shared patch FFN; in the last layer that FFN
//! is dropped when the head only consumes the global token.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::scalar::Scalar;
use crate::tape::{Axis, NodeId, Tape};
use crate::tensor::{Result, Tensor, TensorError};
use crate::weights::{GlobalTokens, JumboFfnParams, LinearParams, ModelWeights, NormParams};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Splits an image into non-overlapping patches: row `i` holds patch `i` in
/// row-major grid order, pixels flattened in `(y, x, channel)` order.
pub fn patchify<T: Scalar>(image: &Tensor<T>, cfg: &ModelConfig) -> Result<Tensor<T>> {
    let expect = [cfg.image_height, cfg.image_width, cfg.in_channels];
    if image.shape() != expect {
        return Err(TensorError::Contract {
            op: "patchify",
            detail: format!("image shape {:?}, config wants {:?}", image.shape(), expect),
        });
    }
    let (py, px, c) = (cfg.patch_height, cfg.patch_width, cfg.in_channels);
    let (gh, gw) = (cfg.grid_height(), cfg.grid_width());
    let row_stride = cfg.image_width * c;
    let mut out = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
    let data = image.data();
    for gy in 0..gh {
        for gx in 0..gw {
            for iy in 0..py {
                let base = (gy * py + iy) * row_stride + gx * px * c;
                out.extend_from_slice(&data[base..base + px * c]);
            }
        }
    }
    Tensor::matrix(cfg.num_patches(), cfg.patch_dim(), out)
}

/// `1 x (J*D)  ->  J x D`; pure reshape, row `j` holds features
/// `[j*D, (j+1)*D)`.
pub fn split_jumbo<T: Scalar>(token: &Tensor<T>, width: usize) -> Result<Tensor<T>> {
    if !token.is_matrix() || token.rows() != 1 || width == 0 || token.cols() % width != 0 {
        return Err(TensorError::Contract {
            op: "split_jumbo",
            detail: format!("token {:?} not splittable into width {width}", token.shape()),
        });
    }
    token.reshaped(vec![token.cols() / width, width])
}

/// `J x D  ->  1 x (J*D)`; exact inverse of [`split_jumbo`].
pub fn reassemble_jumbo<T: Scalar>(rows: &Tensor<T>) -> Result<Tensor<T>> {
    if !rows.is_matrix() {
        return Err(TensorError::Contract {
            op: "reassemble_jumbo",
            detail: format!("expected 2-d rows, got {:?}", rows.shape()),
        });
    }
    rows.reshaped(vec![1, rows.rows() * rows.cols()])
}

#[derive(Clone, Copy)]
pub(crate) struct BoundLinear {
    pub w: NodeId,
    pub b: NodeId,
}

#[derive(Clone, Copy)]
pub(crate) struct BoundNorm {
    pub gain: NodeId,
    pub bias: NodeId,
}

#[derive(Clone, Copy)]
pub(crate) struct BoundFfn {
    pub lin1: BoundLinear,
    pub lin2: BoundLinear,
}

#[derive(Clone, Copy)]
pub(crate) struct BoundLora {
    pub a: NodeId,
    pub b: NodeId,
}

#[derive(Clone, Copy)]
pub(crate) struct BoundJumboFfn {
    pub norm: BoundNorm,
    pub ffn: BoundFfn,
    pub lora: Option<BoundLora>,
}

pub(crate) struct BoundLayer {
    pub attn_norm: BoundNorm,
    pub attn_norm_jumbo: Option<BoundNorm>,
    pub q: BoundLinear,
    pub k: BoundLinear,
    pub v: BoundLinear,
    pub out: BoundLinear,
    pub ffn_norm: Option<BoundNorm>,
    pub ffn: Option<BoundFfn>,
    /// Resolved per layer; tied modes alias the same node ids.
    pub jumbo_ffn: Option<BoundJumboFfn>,
}

enum BoundGlobals {
    Cls { cls: NodeId },
    ClsWithRegisters { cls: NodeId, registers: NodeId },
    Jumbo { token: NodeId },
}

/// Weights inserted as tape leaves for one recorded computation. `flat`
/// lists the leaf ids in the canonical walker order, so gradients can be
/// zipped back onto the parameters.
pub struct BoundModel {
    pub flat: Vec<NodeId>,
    pub(crate) patch_proj: BoundLinear,
    pub(crate) pos_embed: NodeId,
    globals: BoundGlobals,
    pub(crate) layers: Vec<BoundLayer>,
    pub(crate) final_norm: BoundNorm,
    pub(crate) head: Option<BoundLinear>,
}

/// Global-token state threaded through the layers.
#[derive(Clone, Copy)]
pub enum GlobalState {
    /// `1 x (J*D)` reassembled token.
    Jumbo(NodeId),
    Cls {
        cls: NodeId,
        registers: Option<NodeId>,
    },
}

pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub weights: ModelWeights<T>,
}

impl<T: Scalar> Model<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let weights = ModelWeights::init(&config, seed)?;
        Ok(Model { config, weights })
    }

    pub(crate) fn init_headless(config: ModelConfig, seed: u64) -> Result<Self> {
        let weights = ModelWeights::init_headless(&config, seed)?;
        Ok(Model { config, weights })
    }

    /// Inserts every parameter as a tape leaf, in the canonical walker
    /// order, resolving tied FFNs to shared leaves.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundModel {
        let mut flat = Vec::new();
        let mut leaf = |tape: &mut Tape<T>, p: &Arc<Tensor<T>>| {
            let id = tape.leaf(p.clone(), trainable);
            flat.push(id);
            id
        };
        let w = &self.weights;
        let patch_proj = BoundLinear {
            w: leaf(tape, &w.patch_proj.weight),
            b: leaf(tape, &w.patch_proj.bias),
        };
        let pos_embed = leaf(tape, &w.pos_embed);
        let globals = match &w.globals {
            GlobalTokens::Cls { cls } => BoundGlobals::Cls {
                cls: leaf(tape, cls),
            },
            GlobalTokens::ClsWithRegisters { cls, registers } => BoundGlobals::ClsWithRegisters {
                cls: leaf(tape, cls),
                registers: leaf(tape, registers),
            },
            GlobalTokens::Jumbo { token } => BoundGlobals::Jumbo {
                token: leaf(tape, token),
            },
        };
        let bind_norm = |tape: &mut Tape<T>, flat: &mut Vec<NodeId>, n: &NormParams<T>| {
            let gain = tape.leaf(n.gain.clone(), trainable);
            flat.push(gain);
            let bias = tape.leaf(n.bias.clone(), trainable);
            flat.push(bias);
            BoundNorm { gain, bias }
        };
        let bind_linear = |tape: &mut Tape<T>, flat: &mut Vec<NodeId>, l: &LinearParams<T>| {
            let wid = tape.leaf(l.weight.clone(), trainable);
            flat.push(wid);
            let bid = tape.leaf(l.bias.clone(), trainable);
            flat.push(bid);
            BoundLinear { w: wid, b: bid }
        };
        let mut layers: Vec<BoundLayer> = w
            .layers
            .iter()
            .map(|layer| BoundLayer {
                attn_norm: bind_norm(tape, &mut flat, &layer.attn_norm),
                attn_norm_jumbo: layer
                    .attn_norm_jumbo
                    .as_ref()
                    .map(|n| bind_norm(tape, &mut flat, n)),
                q: bind_linear(tape, &mut flat, &layer.attn.q),
                k: bind_linear(tape, &mut flat, &layer.attn.k),
                v: bind_linear(tape, &mut flat, &layer.attn.v),
                out: bind_linear(tape, &mut flat, &layer.attn.out),
                ffn_norm: layer
                    .ffn_norm
                    .as_ref()
                    .map(|n| bind_norm(tape, &mut flat, n)),
                ffn: layer.ffn.as_ref().map(|f| BoundFfn {
                    lin1: bind_linear(tape, &mut flat, &f.lin1),
                    lin2: bind_linear(tape, &mut flat, &f.lin2),
                }),
                jumbo_ffn: None,
            })
            .collect();
        match &w.jumbo_ffn {
            Some(JumboFfnParams::PerLayer(blocks)) => {
                for (layer, block) in layers.iter_mut().zip(blocks) {
                    let norm = bind_norm(tape, &mut flat, &block.norm);
                    let ffn = BoundFfn {
                        lin1: bind_linear(tape, &mut flat, &block.ffn.lin1),
                        lin2: bind_linear(tape, &mut flat, &block.ffn.lin2),
                    };
                    layer.jumbo_ffn = Some(BoundJumboFfn {
                        norm,
                        ffn,
                        lora: None,
                    });
                }
            }
            Some(JumboFfnParams::Tied { shared, adapters }) => {
                let norm = bind_norm(tape, &mut flat, &shared.norm);
                let ffn = BoundFfn {
                    lin1: bind_linear(tape, &mut flat, &shared.ffn.lin1),
                    lin2: bind_linear(tape, &mut flat, &shared.ffn.lin2),
                };
                let loras: Vec<Option<BoundLora>> = match adapters {
                    Some(ads) => ads
                        .iter()
                        .map(|ad| {
                            let a = tape.leaf(ad.a.clone(), trainable);
                            flat.push(a);
                            let b = tape.leaf(ad.b.clone(), trainable);
                            flat.push(b);
                            Some(BoundLora { a, b })
                        })
                        .collect(),
                    None => vec![None; layers.len()],
                };
                for (layer, lora) in layers.iter_mut().zip(loras) {
                    layer.jumbo_ffn = Some(BoundJumboFfn { norm, ffn, lora });
                }
            }
            None => {}
        }
        let final_norm = bind_norm(tape, &mut flat, &w.final_norm);
        let head = w.head.as_ref().map(|h| bind_linear(tape, &mut flat, h));
        BoundModel {
            flat,
            patch_proj,
            pos_embed,
            globals,
            layers,
            final_norm,
            head,
        }
    }

    /// `patches * W_proj + bias + position rows`. With `keep` given, only the
    /// selected position rows participate (their gradient scatters back).
    pub fn embed(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundModel,
        patches: &Tensor<T>,
        keep: Option<&[usize]>,
    ) -> Result<NodeId> {
        let x = tape.constant(patches.clone());
        let projected = linear_op(tape, x, &bound.patch_proj)?;
        let pos = match keep {
            None => bound.pos_embed,
            Some(idx) => tape.select_rows(bound.pos_embed, idx)?,
        };
        tape.add(projected, pos)
    }

    fn initial_globals(&self, bound: &BoundModel) -> GlobalState {
        match bound.globals {
            BoundGlobals::Cls { cls } => GlobalState::Cls {
                cls,
                registers: None,
            },
            BoundGlobals::ClsWithRegisters { cls, registers } => GlobalState::Cls {
                cls,
                registers: Some(registers),
            },
            BoundGlobals::Jumbo { token } => GlobalState::Jumbo(token),
        }
    }

    /// One pre-norm residual transformer layer over `[globals || patches]`.
    pub fn layer_forward(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundModel,
        layer_idx: usize,
        patches: NodeId,
        globals: GlobalState,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(NodeId, GlobalState)> {
        let cfg = &self.config;
        let layer = &bound.layers[layer_idx];
        match globals {
            GlobalState::Jumbo(token) => {
                let j = cfg.jumbo_multiplier;
                let d = cfg.width;
                // Attention sublayer: norm the full wide token, split, attend.
                let normed_patches = norm_op(tape, patches, &layer.attn_norm)?;
                let jumbo_norm = layer.attn_norm_jumbo.as_ref().expect("jumbo layer norm");
                let normed_token = norm_op(tape, token, jumbo_norm)?;
                let token_rows = tape.reshape(normed_token, vec![j, d])?;
                let seq = tape.concat(Axis::Rows, &[token_rows, normed_patches])?;
                let attn_out =
                    self.attention(tape, layer, seq, dropout_rng.as_deref_mut())?;
                let token_out = tape.slice(attn_out, Axis::Rows, 0, j)?;
                let token_flat = tape.reshape(token_out, vec![1, j * d])?;
                let token = tape.add(token, token_flat)?;
                let n_patches = tape.value(patches).rows();
                let patch_out = tape.slice(attn_out, Axis::Rows, j, n_patches)?;
                let patches = tape.add(patches, patch_out)?;
                // FFN sublayer: patches through the shared FFN (unless this
                // is the discarded last layer), wide token through its own.
                let patches = match (&layer.ffn_norm, &layer.ffn) {
                    (Some(nm), Some(ffn)) => {
                        let h = norm_op(tape, patches, nm)?;
                        let h = ffn_op(tape, h, ffn, cfg.dropout, dropout_rng.as_deref_mut())?;
                        tape.add(patches, h)?
                    }
                    _ => patches,
                };
                let jf = layer.jumbo_ffn.as_ref().expect("jumbo ffn");
                let h = norm_op(tape, token, &jf.norm)?;
                let mut out = ffn_op(tape, h, &jf.ffn, cfg.dropout, dropout_rng.as_deref_mut())?;
                if let Some(lora) = &jf.lora {
                    let delta = lora_delta_op(tape, h, lora)?;
                    out = tape.add(out, delta)?;
                }
                let token = tape.add(token, out)?;
                Ok((patches, GlobalState::Jumbo(token)))
            }
            GlobalState::Cls { cls, registers } => {
                let mut parts = vec![cls];
                if let Some(r) = registers {
                    parts.push(r);
                }
                parts.push(patches);
                let seq = tape.concat(Axis::Rows, &parts)?;
                let normed = norm_op(tape, seq, &layer.attn_norm)?;
                let attn_out =
                    self.attention(tape, layer, normed, dropout_rng.as_deref_mut())?;
                let seq = tape.add(seq, attn_out)?;
                // CLS, registers, and patches share the patch FFN.
                let seq = match (&layer.ffn_norm, &layer.ffn) {
                    (Some(nm), Some(ffn)) => {
                        let h = norm_op(tape, seq, nm)?;
                        let h = ffn_op(tape, h, ffn, cfg.dropout, dropout_rng.as_deref_mut())?;
                        tape.add(seq, h)?
                    }
                    _ => seq,
                };
                let n_regs = registers.map_or(0, |r| tape.value(r).rows());
                let cls = tape.slice(seq, Axis::Rows, 0, 1)?;
                let registers = match registers {
                    Some(_) => Some(tape.slice(seq, Axis::Rows, 1, n_regs)?),
                    None => None,
                };
                let n_patches = tape.value(patches).rows();
                let patches = tape.slice(seq, Axis::Rows, 1 + n_regs, n_patches)?;
                Ok((patches, GlobalState::Cls { cls, registers }))
            }
        }
    }

    fn attention(
        &self,
        tape: &mut Tape<T>,
        layer: &BoundLayer,
        seq: NodeId,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let heads = self.config.heads;
        let dh = self.config.head_dim();
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let q = linear_op(tape, seq, &layer.q)?;
        let k = linear_op(tape, seq, &layer.k)?;
        let v = linear_op(tape, seq, &layer.v)?;
        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice(q, Axis::Cols, h * dh, dh)?;
            let kh = tape.slice(k, Axis::Cols, h * dh, dh)?;
            let vh = tape.slice(v, Axis::Cols, h * dh, dh)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scaled = tape.scale(scores, scale)?;
            let mut weights = tape.softmax(scaled, Axis::Cols)?;
            if self.config.dropout > 0.0 {
                if let Some(rng) = dropout_rng.as_deref_mut() {
                    weights = dropout_op(tape, weights, self.config.dropout, rng)?;
                }
            }
            head_outs.push(tape.matmul(weights, vh)?);
        }
        let merged = tape.concat(Axis::Cols, &head_outs)?;
        linear_op(tape, merged, &layer.out)
    }

    /// Embeds pre-tokenized rows and runs all layers; returns the
    /// final-normed global representation (`1 x (J*D)` or `1 x D`).
    pub fn forward_tokens(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundModel,
        tokens: &Tensor<T>,
        keep: Option<&[usize]>,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let mut patches = self.embed(tape, bound, tokens, keep)?;
        let mut globals = self.initial_globals(bound);
        for i in 0..self.config.depth {
            let (p, g) =
                self.layer_forward(tape, bound, i, patches, globals, dropout_rng.as_deref_mut())?;
            patches = p;
            globals = g;
        }
        let rep = match globals {
            GlobalState::Jumbo(token) => token,
            GlobalState::Cls { cls, .. } => cls,
        };
        norm_op(tape, rep, &bound.final_norm)
    }

    /// Full image pipeline to class logits on an already-bound tape.
    pub fn forward_bound(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundModel,
        image: &Tensor<T>,
        keep: Option<&[usize]>,
    ) -> Result<NodeId> {
        let all = patchify(image, &self.config)?;
        let (tokens, keep) = match keep {
            None => (all, None),
            Some(idx) => {
                validate_keep(idx, self.config.num_patches())?;
                let mut data = Vec::with_capacity(idx.len() * all.cols());
                for &i in idx {
                    data.extend_from_slice(all.row(i));
                }
                (Tensor::matrix(idx.len(), all.cols(), data)?, Some(idx))
            }
        };
        let rep = self.forward_tokens(tape, bound, &tokens, keep, None)?;
        let head = bound.head.as_ref().ok_or(TensorError::Contract {
            op: "forward",
            detail: "model has no classification head".into(),
        })?;
        linear_op(tape, rep, head)
    }

    /// One-shot forward: binds weights and returns logits for one image.
    pub fn forward(&self, tape: &mut Tape<T>, image: &Tensor<T>) -> Result<(NodeId, BoundModel)> {
        let bound = self.bind(tape, true);
        let logits = self.forward_bound(tape, &bound, image, None)?;
        Ok((logits, bound))
    }

    /// Forward with only the selected patch rows (and their position
    /// embeddings) entering the sequence; global tokens are never dropped.
    pub fn forward_with_drop(
        &self,
        tape: &mut Tape<T>,
        image: &Tensor<T>,
        keep: &[usize],
    ) -> Result<(NodeId, BoundModel)> {
        let bound = self.bind(tape, true);
        let logits = self.forward_bound(tape, &bound, image, Some(keep))?;
        Ok((logits, bound))
    }
}

fn validate_keep(keep: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in keep {
        if i >= n {
            return Err(TensorError::Contract {
                op: "forward_with_drop",
                detail: format!("keep index {i} out of range 0..{n}"),
            });
        }
        if seen[i] {
            return Err(TensorError::Contract {
                op: "forward_with_drop",
                detail: format!("duplicate keep index {i}"),
            });
        }
        seen[i] = true;
    }
    Ok(())
}

pub(crate) fn linear_op<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    lin: &BoundLinear,
) -> Result<NodeId> {
    let p = tape.matmul(x, lin.w)?;
    tape.add_row(p, lin.b)
}

pub(crate) fn norm_op<T: Scalar>(tape: &mut Tape<T>, x: NodeId, nm: &BoundNorm) -> Result<NodeId> {
    tape.layer_norm(x, nm.gain, nm.bias, LAYER_NORM_EPS)
}

pub(crate) fn ffn_op<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    ffn: &BoundFfn,
    dropout: f64,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    let h = linear_op(tape, x, &ffn.lin1)?;
    let mut h = tape.gelu(h)?;
    if dropout > 0.0 {
        if let Some(rng) = dropout_rng {
            h = dropout_op(tape, h, dropout, rng)?;
        }
    }
    linear_op(tape, h, &ffn.lin2)
}

/// Low-rank path `(x * A^T) * B^T`, never materializing `B*A` densely.
pub(crate) fn lora_delta_op<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    lora: &BoundLora,
) -> Result<NodeId> {
    let xa = tape.matmul_nt(x, lora.a)?;
    tape.matmul_nt(xa, lora.b)
}

/// Inverted dropout: zero with probability `rate`, survivors scaled by
/// `1/(1-rate)`.
fn dropout_op<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    let shape = tape.value(x).shape().to_vec();
    let numel = tape.value(x).numel();
    let keep_scale = T::from_f64(1.0 / (1.0 - rate));
    let data = (0..numel)
        .map(|_| {
            if rng.gen::<f64>() < rate {
                T::ZERO
            } else {
                keep_scale
            }
        })
        .collect();
    let mask = tape.constant(Tensor::new(shape, data)?);
    tape.mul(x, mask)
}
