use super::EvalError;

/// Area under the ROC curve via the Mann–Whitney statistic; tied scores
/// count one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::Metric(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(EvalError::Metric("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::Metric("AUROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of positive ranks, with tied groups sharing their average rank.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        let group_pos = order[i..=j].iter().filter(|&&k| labels[k]).count();
        rank_sum += avg_rank * group_pos as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// `1 - SSE / SST` with SST taken around `train_mean`.
pub fn r2(preds: &[f64], targets: &[f64], train_mean: f64) -> Result<f64, EvalError> {
    if preds.len() != targets.len() {
        return Err(EvalError::Metric(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    if targets.len() < 2 {
        return Err(EvalError::Metric("R2 needs at least two targets".into()));
    }
    let sst: f64 = targets.iter().map(|t| (t - train_mean).powi(2)).sum();
    if sst == 0.0 {
        return Err(EvalError::Metric(
            "targets have zero variance around the train mean".into(),
        ));
    }
    let sse: f64 = preds.iter().zip(targets).map(|(p, t)| (p - t).powi(2)).sum();
    Ok(1.0 - sse / sst)
}
