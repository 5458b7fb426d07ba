//! Patch-based time-series classification: half-patch-stride series
//! patching with end-padding, a channel-independent shared backbone, a
//! pooled wide-token head, and the hyperparameter sweep harness.
//!
//! Multivariate series are processed one channel at a time through the
//! same backbone; the per-channel global representations (CLS, or the
//! pooled wide token) are concatenated and projected to logits.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, Variant};
use crate::cost::match_registers;
use crate::model::{linear_op, Model};
use crate::scalar::Scalar;
use crate::tape::{Axis, NodeId, Tape};
use crate::tensor::{Result, Tensor, TensorError};
use crate::train::{
    adamw_step, clip_gradients, lr_at, stream_rng, MetricsRow, OptimizerState,
    TrainError, TrainOutcome, TrainPlan,
};

/// Geometry of overlapping series patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeriesPatchConfig {
    pub num_patches: usize,
    pub series_length: usize,
    pub patch_length: usize,
    /// Always `patch_length / 2`.
    pub stride: usize,
    /// Zeros appended at the end so the windows tile the padded series.
    pub padding: usize,
}

impl SeriesPatchConfig {
    /// Picks the smallest even patch length whose windows cover the series:
    /// `(P - 1) * (pl / 2) + pl >= L`, then end-pads the difference. The
    /// padding must stay below one patch length, otherwise the geometry is
    /// rejected.
    pub fn derive(series_length: usize, num_patches: usize) -> Result<Self> {
        if series_length < 2 {
            return Err(TensorError::Contract {
                op: "SeriesPatchConfig",
                detail: format!("series length {series_length} < 2"),
            });
        }
        if num_patches == 0 {
            return Err(TensorError::Contract {
                op: "SeriesPatchConfig",
                detail: "num_patches must be positive".into(),
            });
        }
        let patch_length = 2 * series_length.div_ceil(num_patches + 1);
        let stride = patch_length / 2;
        let padded = (num_patches + 1) * stride;
        let padding = padded - series_length;
        if padding >= patch_length {
            return Err(TensorError::Contract {
                op: "SeriesPatchConfig",
                detail: format!(
                    "impossible geometry: L={series_length}, P={num_patches} gives \
                     patch_length={patch_length}, stride={stride}, padded={padded}, \
                     padding={padding} (>= patch_length)"
                ),
            });
        }
        Ok(SeriesPatchConfig {
            num_patches,
            series_length,
            patch_length,
            stride,
            padding,
        })
    }

    pub fn padded_length(&self) -> usize {
        self.series_length + self.padding
    }
}

/// Overlapping windows at half-patch stride; row `i` starts at
/// `i * stride`, the tail is zero-padded.
pub fn patch_series<T: Scalar>(series: &[T], cfg: &SeriesPatchConfig) -> Result<Tensor<T>> {
    if series.len() != cfg.series_length {
        return Err(TensorError::Contract {
            op: "patch_series",
            detail: format!("series length {} != configured {}", series.len(), cfg.series_length),
        });
    }
    let mut padded = Vec::with_capacity(cfg.padded_length());
    padded.extend_from_slice(series);
    padded.resize(cfg.padded_length(), T::ZERO);
    let mut data = Vec::with_capacity(cfg.num_patches * cfg.patch_length);
    for i in 0..cfg.num_patches {
        let start = i * cfg.stride;
        data.extend_from_slice(&padded[start..start + cfg.patch_length]);
    }
    Tensor::matrix(cfg.num_patches, cfg.patch_length, data)
}

/// Mean over the `J` width-`D` segments of a wide token: `1 x (J*D) -> 1 x D`.
pub fn pool_jumbo<T: Scalar>(token: &Tensor<T>, width: usize) -> Result<Tensor<T>> {
    if !token.is_matrix() || token.rows() != 1 || width == 0 || token.cols() % width != 0 {
        return Err(TensorError::Contract {
            op: "pool_jumbo",
            detail: format!("token {:?} not poolable at width {width}", token.shape()),
        });
    }
    let j = token.cols() / width;
    let inv = T::ONE / T::from_usize(j);
    let data = (0..width)
        .map(|col| {
            (0..j)
                .map(|seg| token.data()[seg * width + col])
                .sum::<T>()
                * inv
        })
        .collect();
    Tensor::matrix(1, width, data)
}

/// Tape version of [`pool_jumbo`].
pub fn pool_jumbo_op<T: Scalar>(tape: &mut Tape<T>, token: NodeId, width: usize) -> Result<NodeId> {
    let cols = tape.value(token).cols();
    if width == 0 || cols % width != 0 {
        return Err(TensorError::Contract {
            op: "pool_jumbo",
            detail: format!("width {cols} not divisible by {width}"),
        });
    }
    let rows = tape.reshape(token, vec![cols / width, width])?;
    tape.mean(rows, Axis::Rows)
}

/// Per-channel instance normalization: zero mean, unit variance over time.
pub fn instance_norm<T: Scalar>(channel: &[T]) -> Vec<T> {
    let n = T::from_usize(channel.len());
    let mean = channel.iter().copied().sum::<T>() / n;
    let var = channel.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let inv = T::ONE / (var + T::from_f64(1e-6)).sqrt();
    channel.iter().map(|&v| (v - mean) * inv).collect()
}

/// Full description of one time-series classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct TsModelConfig {
    pub arch: Variant,
    pub num_patches: usize,
    pub series_length: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub dropout: f64,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch_ffn_multiplier: usize,
    pub jumbo_multiplier: usize,
    pub jumbo_ffn_multiplier: usize,
}

impl TsModelConfig {
    /// Backbone defaults: 3 layers, 16 heads, width 128, FFN hidden 256;
    /// J = 4 for the jumbo arch, with the register baseline's R solved to
    /// match its per-layer FLOPs.
    pub fn new(
        arch: Variant,
        num_patches: usize,
        series_length: usize,
        channels: usize,
        num_classes: usize,
    ) -> Self {
        TsModelConfig {
            arch,
            num_patches,
            series_length,
            channels,
            num_classes,
            dropout: 0.0,
            width: 128,
            depth: 3,
            heads: 16,
            patch_ffn_multiplier: 2,
            jumbo_multiplier: 4,
            jumbo_ffn_multiplier: 2,
        }
    }

    /// FLOP-matched register count for the registers baseline.
    pub fn matched_registers(&self) -> u64 {
        match_registers(
            self.num_patches as u64,
            self.width as u64,
            self.jumbo_multiplier as u64,
        )
        .1
    }

    pub fn patch_config(&self) -> Result<SeriesPatchConfig> {
        SeriesPatchConfig::derive(self.series_length, self.num_patches)
    }

    fn backbone_config(&self, patch: &SeriesPatchConfig) -> ModelConfig {
        let mut cfg = ModelConfig::new(self.arch, self.width, self.heads);
        cfg.depth = self.depth;
        cfg.patch_ffn_multiplier = self.patch_ffn_multiplier;
        cfg.jumbo_multiplier = if self.arch == Variant::Jumbo {
            self.jumbo_multiplier
        } else {
            1
        };
        cfg.jumbo_ffn_multiplier = self.jumbo_ffn_multiplier;
        cfg.register_count = if self.arch == Variant::Registers {
            self.matched_registers() as usize
        } else {
            0
        };
        // Token geometry: one row of `num_patches` non-overlapping windows
        // reproduces the backbone dimensions (N tokens of patch_length
        // values); the overlapping windows come from `patch_series`.
        cfg.patch_height = 1;
        cfg.patch_width = patch.patch_length;
        cfg.image_height = 1;
        cfg.image_width = self.num_patches * patch.patch_length;
        cfg.in_channels = 1;
        cfg.num_classes = self.num_classes;
        cfg.dropout = self.dropout;
        cfg.discard_last_patch_ffn = self.arch == Variant::Jumbo;
        cfg
    }
}

/// Channel-independent classifier: shared backbone, per-channel global
/// representation, concatenation, then one linear head of width
/// `channels * D`.
pub struct TsModel<T: Scalar> {
    pub config: TsModelConfig,
    pub patch_cfg: SeriesPatchConfig,
    /// Backbone whose `head` slot holds the concat head
    /// (`channels * D -> num_classes`), bound but applied only after the
    /// per-channel representations are concatenated.
    pub backbone: Model<T>,
}

impl<T: Scalar> TsModel<T> {
    pub fn init(config: TsModelConfig, seed: u64) -> Result<Self> {
        let patch_cfg = config.patch_config()?;
        let backbone_cfg = config.backbone_config(&patch_cfg);
        let mut backbone = Model::init_headless(backbone_cfg, seed)?;
        let mut sampler = crate::weights::Sampler::Seeded(stream_rng(seed, 17));
        backbone.weights.head = Some(crate::weights::init_linear(
            config.channels * config.width,
            config.num_classes,
            &mut sampler,
        ));
        Ok(TsModel {
            config,
            patch_cfg,
            backbone,
        })
    }

    /// Logits for one `L x M` series on an already-bound tape.
    pub fn forward_series(
        &self,
        tape: &mut Tape<T>,
        bound: &crate::model::BoundModel,
        series: &Tensor<T>,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let (l, m) = (self.config.series_length, self.config.channels);
        if series.shape() != [l, m] {
            return Err(TensorError::Contract {
                op: "forward_series",
                detail: format!("series shape {:?}, model wants [{l}, {m}]", series.shape()),
            });
        }
        let mut reps = Vec::with_capacity(m);
        for c in 0..m {
            let channel: Vec<T> = (0..l).map(|t| series.at(t, c)).collect();
            let normed = instance_norm(&channel);
            let patches = patch_series(&normed, &self.patch_cfg)?;
            let rep = self.backbone.forward_tokens(
                tape,
                bound,
                &patches,
                None,
                dropout_rng.as_deref_mut(),
            )?;
            let rep = if self.config.arch == Variant::Jumbo {
                pool_jumbo_op(tape, rep, self.config.width)?
            } else {
                rep
            };
            reps.push(rep);
        }
        let cat = tape.concat(Axis::Cols, &reps)?;
        let head = bound.head.ok_or(TensorError::Contract {
            op: "forward_series",
            detail: "backbone missing the concat head".into(),
        })?;
        linear_op(tape, cat, &head)
    }

    pub fn evaluate(&self, data: &LabeledSeries<T>) -> Result<f64> {
        if data.series.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0usize;
        for (s, &label) in data.series.iter().zip(&data.labels) {
            let mut tape = Tape::new();
            let bound = self.backbone.bind(&mut tape, false);
            let logits = self.forward_series(&mut tape, &bound, s, None)?;
            if crate::train::argmax(tape.value(logits).row(0)) == label {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.series.len() as f64)
    }
}

#[derive(Clone)]
pub struct LabeledSeries<T> {
    pub series: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
}

impl<T> LabeledSeries<T> {
    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }
}

/// Cross-entropy training of a time-series model; dropout is active during
/// training steps only.
pub fn ts_train<T: Scalar>(
    model: &mut TsModel<T>,
    train_set: &LabeledSeries<T>,
    eval_set: &LabeledSeries<T>,
    plan: &TrainPlan,
) -> core::result::Result<TrainOutcome, TrainError> {
    plan.validate().map_err(TrainError::Plan)?;
    let mut metrics = Vec::new();
    if plan.steps == 0 {
        return Ok(TrainOutcome { metrics });
    }
    if train_set.is_empty() {
        return Err(TrainError::Plan("empty training set".into()));
    }
    let mut shuffle_rng = stream_rng(plan.seed, 0);
    let mut dropout_rng = stream_rng(plan.seed, 3);
    let mut state = OptimizerState::new(&model.backbone.weights);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut loss_acc = 0.0;
    let mut loss_count = 0usize;
    let mut snapshot = crate::train::snapshot_weights(&model.backbone.weights);

    for step in 0..plan.steps {
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

        let mut tape = Tape::new();
        let bound = model.backbone.bind(&mut tape, true);
        let mut rows = Vec::with_capacity(batch_idx.len());
        let mut targets = Vec::with_capacity(batch_idx.len());
        for &i in batch_idx {
            rows.push(model.forward_series(
                &mut tape,
                &bound,
                &train_set.series[i],
                Some(&mut dropout_rng),
            )?);
            targets.push(train_set.labels[i]);
        }
        let logits = tape.concat(Axis::Rows, &rows)?;
        let loss = tape.cross_entropy(logits, &targets)?;
        let loss_value = tape.value(loss).data()[0].to_f64();
        if !loss_value.is_finite() {
            crate::train::restore_weights(&mut model.backbone.weights, &snapshot);
            return Err(TrainError::NonFinite {
                step,
                detail: "loss".into(),
            });
        }
        let grads_by_node = tape.backward(loss)?;
        let mut grads: Vec<Tensor<T>> = bound
            .flat
            .iter()
            .map(|&id| grads_by_node.get(id).expect("leaf gradient").clone())
            .collect();
        drop(tape);
        clip_gradients(&mut grads, plan.clip_grad_norm);
        let lr = lr_at(step + 1, plan);
        if adamw_step(&mut model.backbone.weights, &grads, &mut state, lr, plan.weight_decay)
            .is_err()
        {
            crate::train::restore_weights(&mut model.backbone.weights, &snapshot);
            return Err(TrainError::NonFinite {
                step,
                detail: "gradient".into(),
            });
        }
        loss_acc += loss_value;
        loss_count += 1;
        if (step + 1) % plan.eval_interval == 0 || step + 1 == plan.steps {
            let eval_acc = model.evaluate(eval_set)?;
            metrics.push(MetricsRow {
                step: step + 1,
                lr,
                drop_rate: 0.0,
                train_loss: loss_acc / loss_count.max(1) as f64,
                eval_acc,
            });
            loss_acc = 0.0;
            loss_count = 0;
            snapshot = crate::train::snapshot_weights(&model.backbone.weights);
        }
    }
    Ok(TrainOutcome { metrics })
}

/// The 12-point sweep grid (4 learning rates x 3 dropout rates).
#[derive(Debug, Clone)]
pub struct SweepGrid {
    pub lrs: Vec<f64>,
    pub dropouts: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub final_lr: f64,
    pub base_seed: u64,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            lrs: vec![3e-3, 1e-3, 3e-4, 1e-4],
            dropouts: vec![0.0, 0.1, 0.2],
            epochs: 100,
            batch_size: 256,
            weight_decay: 0.02,
            final_lr: 1e-8,
            base_seed: 0,
        }
    }
}

/// One grid point's outcome; `None` accuracies mark a failed run.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRun {
    pub lr: f64,
    pub dropout: f64,
    pub val_acc: Option<f64>,
    pub test_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub arch: Variant,
    pub dataset: String,
    pub runs: Vec<SweepRun>,
}

impl SweepResult {
    /// Test accuracy of the best-by-validation run.
    pub fn best_test_acc(&self) -> Option<f64> {
        self.runs
            .iter()
            .filter(|r| r.val_acc.is_some() && r.test_acc.is_some())
            .max_by(|a, b| a.val_acc.partial_cmp(&b.val_acc).unwrap())
            .and_then(|r| r.test_acc)
    }

    /// Mean test accuracy over completed runs.
    pub fn avg_test_acc(&self) -> Option<f64> {
        let accs: Vec<f64> = self.runs.iter().filter_map(|r| r.test_acc).collect();
        if accs.is_empty() {
            None
        } else {
            Some(accs.iter().sum::<f64>() / accs.len() as f64)
        }
    }

    pub fn failed_runs(&self) -> usize {
        self.runs.iter().filter(|r| r.test_acc.is_none()).count()
    }
}

/// Deterministic per-run seed: `hash(dataset, lr, dropout, base_seed)`.
pub fn run_seed(dataset: &str, lr: f64, dropout: f64, base_seed: u64) -> u64 {
    let key = format!("{dataset}|{lr:e}|{dropout:e}|{base_seed}");
    crate::synthetic::fnv1a64(key.as_bytes())
}

/// Trains every grid point of one architecture on one dataset. Failed runs
/// (non-finite loss) are recorded as missing rather than aborting the sweep.
pub fn run_sweep<T: Scalar>(
    template: &TsModelConfig,
    dataset: &str,
    train_set: &LabeledSeries<T>,
    val_set: &LabeledSeries<T>,
    test_set: &LabeledSeries<T>,
    grid: &SweepGrid,
) -> Result<SweepResult> {
    let steps_per_epoch = train_set.len().div_ceil(grid.batch_size).max(1);
    let steps = grid.epochs * steps_per_epoch;
    let mut runs = Vec::with_capacity(grid.lrs.len() * grid.dropouts.len());
    for &lr in &grid.lrs {
        for &dropout in &grid.dropouts {
            let mut cfg = template.clone();
            cfg.dropout = dropout;
            let seed = run_seed(dataset, lr, dropout, grid.base_seed);
            let mut model = TsModel::<T>::init(cfg, seed)?;
            let plan = TrainPlan {
                steps,
                batch_size: grid.batch_size,
                peak_lr: lr,
                final_lr: grid.final_lr,
                warmup_fraction: 0.10,
                weight_decay: grid.weight_decay,
                clip_grad_norm: 1.0,
                mixup_alpha: 0.0,
                cutmix_alpha: 0.0,
                drop_tokens: false,
                eval_interval: steps.max(1),
                seed,
                ..TrainPlan::default()
            };
            let run = match ts_train(&mut model, train_set, val_set, &plan) {
                Ok(_) => SweepRun {
                    lr,
                    dropout,
                    val_acc: Some(model.evaluate(val_set)?),
                    test_acc: Some(model.evaluate(test_set)?),
                },
                Err(TrainError::NonFinite { .. }) => SweepRun {
                    lr,
                    dropout,
                    val_acc: None,
                    test_acc: None,
                },
                Err(TrainError::Tensor(e)) => return Err(e),
                Err(TrainError::Plan(detail)) => {
                    return Err(TensorError::Contract {
                        op: "run_sweep",
                        detail,
                    })
                }
            };
            runs.push(run);
        }
    }
    Ok(SweepResult {
        arch: template.arch,
        dataset: String::from(dataset),
        runs,
    })
}
