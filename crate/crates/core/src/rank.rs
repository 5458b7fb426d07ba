//! Rank aggregation across datasets: rank 1 is the most accurate model,
//! ties share the mean of the tied ranks, and each model's ranks are
//! averaged over datasets (lower is better).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

/// `accuracies[dataset][model]` -> mean rank per model.
pub fn average_ranks(accuracies: &[Vec<f64>]) -> Result<Vec<f64>, String> {
    if accuracies.is_empty() {
        return Err("no datasets to rank over".into());
    }
    let models = accuracies[0].len();
    if models == 0 {
        return Err("no models to rank".into());
    }
    let mut totals = alloc::vec![0.0f64; models];
    for (row_idx, row) in accuracies.iter().enumerate() {
        if row.len() != models {
            return Err(format!(
                "dataset {row_idx} has {} entries, expected {models}",
                row.len()
            ));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(format!("dataset {row_idx} has a missing or non-finite cell"));
        }
        for (model, rank) in ranks_descending(row).into_iter().enumerate() {
            totals[model] += rank;
        }
    }
    let n = accuracies.len() as f64;
    Ok(totals.into_iter().map(|t| t / n).collect())
}

/// Ranks one dataset's accuracies; ties get the mean of their positions.
pub fn ranks_descending(accuracies: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..accuracies.len()).collect();
    order.sort_by(|&a, &b| {
        accuracies[b]
            .partial_cmp(&accuracies[a])
            .unwrap_or(core::cmp::Ordering::Equal)
    });
    let mut ranks = alloc::vec![0.0f64; accuracies.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && accuracies[order[j + 1]] == accuracies[order[i]] {
            j += 1;
        }
        // positions i..=j are tied; ranks are 1-based
        let mean_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mean_rank;
        }
        i = j + 1;
    }
    ranks
}
