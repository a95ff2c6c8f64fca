//! Ranking metrics for leave-one-out candidate lists and rank-based AUC.

use super::EvalError;

fn rank_of(ranked: &[usize], positive: usize) -> Result<usize, EvalError> {
    ranked
        .iter()
        .position(|&i| i == positive)
        .map(|p| p + 1)
        .ok_or_else(|| EvalError::Protocol(format!("positive item {positive} absent from ranking")))
}

/// With a single relevant item the ideal DCG is 1, so the score collapses to
/// the positive's discount: 1/log2(rank + 1), zero beyond the cutoff.
pub fn ndcg_at_n(ranked: &[usize], positive: usize, n: usize) -> Result<f64, EvalError> {
    let rank = rank_of(ranked, positive)?;
    if rank <= n {
        Ok(1.0 / ((rank + 1) as f64).log2())
    } else {
        Ok(0.0)
    }
}

pub fn hit_at_n(ranked: &[usize], positive: usize, n: usize) -> Result<f64, EvalError> {
    let rank = rank_of(ranked, positive)?;
    Ok(if rank <= n { 1.0 } else { 0.0 })
}

/// Mann-Whitney AUC from average ranks; ties contribute one half.
pub fn auc_score(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::Protocol(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    // Average ranks over tied blocks, 1-based.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = ((i + 1 + j + 1) as f64) / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}
