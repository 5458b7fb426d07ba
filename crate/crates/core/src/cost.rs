//! Closed-form per-layer FLOP accounting and the register-matching solver.
//!
//! All formulas count multiply-accumulates (MAC convention, 1 MAC = 1
//! unit), matching the instrumented counter's `total_macs`. The matching
//! mode fixes the FFN hidden multiplier to l = 2 and books the sequence as
//! `P + R` global-plus-patch rows for the register architecture and
//! `P + J` for the jumbo one; the CLS row and softmax/normalization work
//! are deliberately left out of this accounting, so comparisons against
//! the instrumented counter must book the CLS row as one of the `R`
//! register rows.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::config::Variant;

/// Inputs to the matching-mode formulas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopSpec {
    /// P: number of local patch tokens.
    pub patches: u64,
    /// D: token width.
    pub width: u64,
    /// J: jumbo multiplier (jumbo mode).
    pub jumbo: u64,
    /// R: register count (registers mode).
    pub registers: u64,
}

/// Which side of the matching equation to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostMode {
    Registers,
    Jumbo,
}

/// Per-layer MAC counts broken into the sublayer contributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopReport {
    pub f_mhsa: u64,
    pub f_ffn_patches: u64,
    pub f_ffn_global: u64,
    pub f_total: u64,
}

/// Attention sublayer on `n` tokens of width `d`: `4nd^2 + 2n^2d` MACs
/// (Q/K/V/output projections plus the two attention matmuls).
pub fn flops_mhsa(n: u64, d: u64) -> u64 {
    4 * n * d * d + 2 * n * n * d
}

/// FFN `d -> l*d -> d` on `n` rows: `2*l*n*d^2` MACs. At the matching
/// mode's fixed `l = 2` this equals the quoted `4nd^2`.
pub fn flops_ffn(n: u64, d: u64, l: u64) -> u64 {
    2 * l * n * d * d
}

/// Matching-mode per-layer MACs (l = 2 everywhere).
pub fn layer_flops(spec: FlopSpec, mode: CostMode) -> FlopReport {
    let d = spec.width;
    match mode {
        CostMode::Registers => {
            let n = spec.patches + spec.registers;
            let f_mhsa = flops_mhsa(n, d);
            let f_ffn_patches = flops_ffn(n, d, 2);
            FlopReport {
                f_mhsa,
                f_ffn_patches,
                f_ffn_global: 0,
                f_total: f_mhsa + f_ffn_patches,
            }
        }
        CostMode::Jumbo => {
            let n = spec.patches + spec.jumbo;
            let f_mhsa = flops_mhsa(n, d);
            let f_ffn_patches = flops_ffn(spec.patches, d, 2);
            let f_ffn_global = flops_ffn(1, spec.jumbo * d, 2);
            FlopReport {
                f_mhsa,
                f_ffn_patches,
                f_ffn_global,
                f_total: f_mhsa + f_ffn_patches + f_ffn_global,
            }
        }
    }
}

/// Registers-mode total with a real-valued register count, for
/// substitute-back checks against [`match_registers`].
pub fn registers_flops_real(patches: f64, width: f64, registers: f64) -> f64 {
    let n = patches + registers;
    8.0 * n * width * width + 2.0 * n * n * width
}

/// Closed-form register count giving the same per-layer FLOPs as a jumbo
/// layer with multiplier `j`:
/// `R = -(2D + P) + sqrt((2D + P)^2 + (1 + 2D) J^2 + 2 (D + P) J)`.
/// Returns the real solution and its nearest integer. The discriminant is
/// a perfect square at J = 0, so that case yields exactly zero.
pub fn match_registers(patches: u64, width: u64, jumbo: u64) -> (f64, u64) {
    let (p, d, j) = (patches as f64, width as f64, jumbo as f64);
    let base = 2.0 * d + p;
    let radicand = base * base + (1.0 + 2.0 * d) * j * j + 2.0 * (d + p) * j;
    let r_real = -base + libm::sqrt(radicand);
    let r_int = libm::round(r_real.max(0.0)) as u64;
    (r_real, r_int)
}

/// One point of the cost curve.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CurveRow {
    pub n_patches: u64,
    pub variant: Variant,
    pub width: u64,
    pub flops_macs: u64,
}

/// Architecture conventions used when plotting the real model costs (as
/// opposed to the l = 2 matching mode).
#[derive(Debug, Clone, Copy)]
pub struct CurveParams {
    pub registers: u64,
    pub jumbo: u64,
    pub patch_ffn_multiplier: u64,
    pub jumbo_ffn_multiplier: u64,
}

impl Default for CurveParams {
    fn default() -> Self {
        CurveParams {
            registers: 16,
            jumbo: 6,
            patch_ffn_multiplier: 4,
            jumbo_ffn_multiplier: 4,
        }
    }
}

/// Per-layer MACs of one architecture at its real sequence length: plain
/// runs on `N + 1` rows, registers on `N + R + 1`, jumbo on `N + J` with
/// the patch FFN over `N` rows plus the dedicated wide-token FFN.
pub fn architecture_layer_flops(
    variant: Variant,
    n_patches: u64,
    width: u64,
    params: &CurveParams,
) -> u64 {
    let l = params.patch_ffn_multiplier;
    match variant {
        Variant::Plain => {
            let n = n_patches + 1;
            flops_mhsa(n, width) + flops_ffn(n, width, l)
        }
        Variant::Registers => {
            let n = n_patches + params.registers + 1;
            flops_mhsa(n, width) + flops_ffn(n, width, l)
        }
        Variant::Jumbo => {
            let n = n_patches + params.jumbo;
            flops_mhsa(n, width)
                + flops_ffn(n_patches, width, l)
                + flops_ffn(1, params.jumbo * width, params.jumbo_ffn_multiplier)
        }
    }
}

/// Cost-curve table ordered by (variant, width, N ascending). Variants
/// keep their given order.
pub fn flop_curve(
    widths: &[u64],
    patch_counts: &[u64],
    variants: &[Variant],
    params: &CurveParams,
) -> Result<Vec<CurveRow>, String> {
    if widths.is_empty() || patch_counts.is_empty() || variants.is_empty() {
        return Err(format!(
            "empty curve range: {} widths, {} patch counts, {} variants",
            widths.len(),
            patch_counts.len(),
            variants.len()
        ));
    }
    let mut rows = Vec::with_capacity(widths.len() * patch_counts.len() * variants.len());
    for &variant in variants {
        for &width in widths {
            for &n in patch_counts {
                rows.push(CurveRow {
                    n_patches: n,
                    variant,
                    width,
                    flops_macs: architecture_layer_flops(variant, n, width, params),
                });
            }
        }
    }
    Ok(rows)
}
