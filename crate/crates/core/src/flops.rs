//! Instrumented FLOP counter.
//!
//! The counter tallies matrix-multiply work only: one multiply-accumulate
//! (MAC) per inner-product term. Elementwise ops, biases, norms, softmax,
//! and activations contribute zero. This is exactly the decomposition the
//! closed-form cost model uses, which lets the two be compared without
//! fudge terms.
//!
//! Two conventions are exposed: `total_flops` counts a MAC as 2 FLOPs
//! (multiply + add); `total_macs` counts it as 1, matching the cost-model
//! formulas.

use alloc::vec::Vec;

/// Dimensions of one recorded matmul: output rows, inner dimension,
/// output columns. `A (m x k) * B (k x n)` records `(m, k, n)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatmulDims {
    pub rows: usize,
    pub inner: usize,
    pub cols: usize,
}

/// Counting state. Off by default; switching it on never changes any
/// numeric result.
#[derive(Debug, Default, Clone)]
pub struct FlopCounter {
    counting: bool,
    macs: u64,
    log: Vec<MatmulDims>,
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn start(&mut self) {
        self.counting = true;
    }

    pub fn stop(&mut self) {
        self.counting = false;
    }

    pub fn is_counting(&self) -> bool {
        self.counting
    }

    pub fn reset(&mut self) {
        self.macs = 0;
        self.log.clear();
    }

    pub(crate) fn record_matmul(&mut self, rows: usize, inner: usize, cols: usize) {
        if self.counting {
            self.macs += (rows as u64) * (inner as u64) * (cols as u64);
            self.log.push(MatmulDims { rows, inner, cols });
        }
    }

    /// Multiply-accumulate tally (cost-model convention: 1 MAC = 1 unit).
    pub fn total_macs(&self) -> u64 {
        self.macs
    }

    /// FLOP tally under the 1 MAC = 2 FLOPs convention.
    pub fn total_flops(&self) -> u64 {
        2 * self.macs
    }

    /// Every matmul recorded while counting, in execution order.
    pub fn matmul_log(&self) -> &[MatmulDims] {
        &self.log
    }
}
