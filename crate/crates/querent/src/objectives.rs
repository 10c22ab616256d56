//! Task losses with analytic gradients, evaluation metrics, and the small
//! CSV serializers around them.

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Matrix};

/// Hazard floor/ceiling applied before any log.
const PROB_CLAMP: f64 = 1e-12;

/// Softmax cross-entropy against one class index. Returns the loss and
/// dloss/dlogits.
pub fn cross_entropy(logits: &[f64], class_index: usize) -> Result<(f64, Vec<f64>)> {
    if logits.is_empty() {
        return Err(Error::Param("cross entropy over zero logits".into()));
    }
    if class_index >= logits.len() {
        return Err(Error::Param(format!(
            "class index {class_index} out of range for {} logits",
            logits.len()
        )));
    }
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let ex: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let mut s = 0.0;
    for e in &ex {
        s += e;
    }
    let loss = -(ex[class_index] / s).ln();
    let grad: Vec<f64> = ex
        .iter()
        .enumerate()
        .map(|(i, e)| e / s - if i == class_index { 1.0 } else { 0.0 })
        .collect();
    Ok((loss, grad))
}

/// Discrete-time hazards and the survival curve they imply.
/// `survival[m]` is the probability of surviving past bin m+1 (1-based);
/// surviving past bin 0 is the implicit 1.
#[derive(Clone, Debug)]
pub struct SurvivalOutput {
    pub hazards: Vec<f64>,
    pub survival: Vec<f64>,
}

/// Sigmoid hazards (clamped away from 0 and 1) and their cumulative
/// survival products.
pub fn survival_output(logits: &[f64]) -> SurvivalOutput {
    let hazards: Vec<f64> = logits
        .iter()
        .map(|&v| sigmoid(v).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))
        .collect();
    let mut survival = Vec::with_capacity(hazards.len());
    let mut f = 1.0;
    for &h in &hazards {
        f *= 1.0 - h;
        survival.push(f);
    }
    SurvivalOutput { hazards, survival }
}

/// Negative log-likelihood for one patient under discrete-time hazards.
/// `bin` is 1-based. A death in bin j costs −log f_surv(j−1) − log h_j;
/// a censoring in bin j costs −log f_surv(j). Both are evaluated as sums
/// of logs. Returns the loss and dloss/dlogits.
pub fn survival_nll(logits: &[f64], bin: u32, censor: bool) -> Result<(f64, Vec<f64>)> {
    let n = logits.len();
    if n == 0 {
        return Err(Error::Param("survival loss over zero bins".into()));
    }
    if bin == 0 || bin as usize > n {
        return Err(Error::Param(format!(
            "event bin {bin} out of range 1..={n}"
        )));
    }
    let j = bin as usize;
    let out = survival_output(logits);
    let h = &out.hazards;
    let mut loss = 0.0;
    let mut grad = vec![0.0; n];
    if censor {
        for u in 0..j {
            loss -= (1.0 - h[u]).ln();
            grad[u] = h[u];
        }
    } else {
        for u in 0..j - 1 {
            loss -= (1.0 - h[u]).ln();
            grad[u] = h[u];
        }
        loss -= h[j - 1].ln();
        grad[j - 1] = -(1.0 - h[j - 1]);
    }
    Ok((loss, grad))
}

/// Risk score for ranking patients: expected number of bins not survived,
/// Σ_j (1 − f_surv(j)).
pub fn survival_risk(logits: &[f64]) -> f64 {
    let out = survival_output(logits);
    let mut risk = 0.0;
    for &f in &out.survival {
        risk += 1.0 - f;
    }
    risk
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mann-Whitney rank statistic: probability that a positive outscores a
/// negative, ties counting half. None when either side is empty.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (si, &pi) in scores.iter().zip(positive) {
        if !pi {
            continue;
        }
        for (sj, &pj) in scores.iter().zip(positive) {
            if pj {
                continue;
            }
            den += 1.0;
            if si > sj {
                num += 1.0;
            } else if si == sj {
                num += 0.5;
            }
        }
    }
    if den == 0.0 {
        None
    } else {
        Some(num / den)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ClassificationMetrics {
    pub acc: f64,
    pub macro_f1: f64,
    /// Binary: Mann-Whitney on the positive-class probability. Multiclass:
    /// unweighted mean of one-vs-rest statistics over classes present on
    /// both sides. None when every class sits on one side.
    pub auc: Option<f64>,
}

/// Argmax accuracy, macro F1, and AUC from one logit row per sample.
pub fn classification_metrics(
    logits: &Matrix,
    labels: &[usize],
) -> Result<ClassificationMetrics> {
    let n = logits.rows();
    let num_classes = logits.cols();
    if n == 0 || num_classes < 2 {
        return Err(Error::Param(
            "metrics need at least one sample and two classes".into(),
        ));
    }
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Param(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }

    let preds: Vec<usize> = (0..n).map(|i| argmax_lowest(logits.row(i))).collect();
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    let acc = hits as f64 / n as f64;

    let mut f1_total = 0.0;
    for c in 0..num_classes {
        let tp = preds
            .iter()
            .zip(labels)
            .filter(|&(&p, &l)| p == c && l == c)
            .count() as f64;
        let fp = preds
            .iter()
            .zip(labels)
            .filter(|&(&p, &l)| p == c && l != c)
            .count() as f64;
        let fn_ = preds
            .iter()
            .zip(labels)
            .filter(|&(&p, &l)| p != c && l == c)
            .count() as f64;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        if precision + recall > 0.0 {
            f1_total += 2.0 * precision * recall / (precision + recall);
        }
    }
    let macro_f1 = f1_total / num_classes as f64;

    let probs = crate::numerics::stable_softmax_rows(logits);
    let mut auc_sum = 0.0;
    let mut auc_count = 0usize;
    for c in 0..num_classes {
        let positive: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        let pos = positive.iter().filter(|&&p| p).count();
        if pos == 0 || pos == n {
            continue;
        }
        let col: Vec<f64> = (0..n).map(|i| probs.get(i, c)).collect();
        if let Some(a) = binary_auc(&col, &positive) {
            auc_sum += a;
            auc_count += 1;
        }
    }
    let auc = if auc_count == 0 {
        None
    } else {
        Some(auc_sum / auc_count as f64)
    };
    Ok(ClassificationMetrics { acc, macro_f1, auc })
}

/// Harrell's concordance: over pairs where patient i died before patient j's
/// recorded time, the fraction whose predicted risks agree, ties half.
/// None when no pair is comparable.
pub fn concordance_index(
    risks: &[f64],
    times: &[f64],
    censored: &[bool],
) -> Result<Option<f64>> {
    let n = risks.len();
    if n == 0 {
        return Err(Error::Param("concordance over zero patients".into()));
    }
    if times.len() != n || censored.len() != n {
        return Err(Error::Shape(format!(
            "{} risks, {} times, {} censor flags",
            n,
            times.len(),
            censored.len()
        )));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..n {
        if censored[i] {
            continue;
        }
        for j in 0..n {
            if times[i] < times[j] {
                den += 1.0;
                if risks[i] > risks[j] {
                    num += 1.0;
                } else if risks[i] == risks[j] {
                    num += 0.5;
                }
            }
        }
    }
    if den == 0.0 {
        Ok(None)
    } else {
        Ok(Some(num / den))
    }
}

/// 1-based quartile bin per time, with nearest-rank quartile boundaries.
pub fn quartile_bins(times: &[f64]) -> Result<Vec<u32>> {
    if times.is_empty() {
        return Err(Error::Param("quartile bins over zero times".into()));
    }
    if !times.iter().all(|t| t.is_finite()) {
        return Err(Error::Numeric("non-finite survival time".into()));
    }
    let mut sorted = times.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let quart = |m: usize| sorted[(m * n).div_ceil(4) - 1];
    let cuts = [quart(1), quart(2), quart(3)];
    Ok(times
        .iter()
        .map(|&t| 1 + cuts.iter().filter(|&&q| t > q).count() as u32)
        .collect())
}

/// `metric,value` rows, six decimals, empty value for undefined metrics.
pub fn metrics_csv(pairs: &[(&str, Option<f64>)]) -> String {
    let mut out = String::from("metric,value\n");
    for (name, value) in pairs {
        match value {
            Some(v) => out.push_str(&format!("{name},{v:.6}\n")),
            None => out.push_str(&format!("{name},\n")),
        }
    }
    out
}
