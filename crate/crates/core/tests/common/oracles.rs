//! Brute-force reference implementations of the evaluation metrics, written
//! from the definitions without sharing code with the library.

#![allow(clippy::needless_range_loop)]

#![allow(dead_code)]

use std::collections::BTreeSet;

/// `(label, frame set)` per maximal run.
pub fn segments(labels: &[usize]) -> Vec<(usize, BTreeSet<usize>)> {
    let mut out: Vec<(usize, BTreeSet<usize>)> = Vec::new();
    for (t, &l) in labels.iter().enumerate() {
        let new_run = t == 0 || labels[t - 1] != l;
        if new_run {
            out.push((l, BTreeSet::new()));
        }
        out.last_mut().unwrap().1.insert(t);
    }
    out
}

pub fn confusion(pred: &[usize], gt: &[usize], c: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; c]; c];
    for (&p, &g) in pred.iter().zip(gt) {
        m[g][p] += 1;
    }
    m
}

pub fn accuracy(pred: &[usize], gt: &[usize], c: usize) -> f64 {
    let m = confusion(pred, gt, c);
    let diag: usize = (0..c).map(|k| m[k][k]).sum();
    100.0 * diag as f64 / gt.len() as f64
}

pub fn macro_f1(pred: &[usize], gt: &[usize], c: usize) -> f64 {
    let m = confusion(pred, gt, c);
    let mut scores = Vec::new();
    for k in 0..c {
        let row: usize = m[k].iter().sum();
        if row == 0 {
            continue;
        }
        let col: usize = (0..c).map(|g| m[g][k]).sum();
        let tp = m[k][k];
        // 2PR / (P + R) with P = tp / col, R = tp / row, cleared of fractions.
        scores.push(2.0 * tp as f64 / (row + col) as f64);
    }
    100.0 * scores.iter().sum::<f64>() / scores.len() as f64
}

pub fn mean_iou(pred: &[usize], gt: &[usize], c: usize) -> f64 {
    let mut scores = Vec::new();
    for k in 0..c {
        let p: BTreeSet<usize> = (0..pred.len()).filter(|&t| pred[t] == k).collect();
        let g: BTreeSet<usize> = (0..gt.len()).filter(|&t| gt[t] == k).collect();
        let union = p.union(&g).count();
        if union == 0 {
            continue;
        }
        scores.push(p.intersection(&g).count() as f64 / union as f64);
    }
    100.0 * scores.iter().sum::<f64>() / scores.len() as f64
}

/// Full-matrix Levenshtein over segment label sequences.
pub fn edit(pred: &[usize], gt: &[usize]) -> f64 {
    let p: Vec<usize> = segments(pred).into_iter().map(|s| s.0).collect();
    let g: Vec<usize> = segments(gt).into_iter().map(|s| s.0).collect();
    let (n, m) = (p.len(), g.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let cost = if p[i - 1] == g[j - 1] { 0 } else { 1 };
            d[i][j] = (d[i - 1][j] + 1).min(d[i][j - 1] + 1).min(d[i - 1][j - 1] + cost);
        }
    }
    let longest = n.max(m);
    if longest == 0 {
        return 100.0;
    }
    (100.0 * (1.0 - d[n][m] as f64 / longest as f64)).max(0.0)
}

fn iou(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    a.intersection(b).count() as f64 / a.union(b).count() as f64
}

/// Full IoU matrix between predicted and ground-truth segments; cross-label
/// pairs are `None`.
pub fn iou_matrix(pred: &[usize], gt: &[usize]) -> Vec<Vec<Option<f64>>> {
    let ps = segments(pred);
    let gs = segments(gt);
    ps.iter()
        .map(|(pl, pf)| gs.iter().map(|(gl, gf)| (pl == gl).then(|| iou(pf, gf))).collect())
        .collect()
}

/// Greedy rule: each predicted segment in order takes its best same-label
/// ground truth (earliest on ties); TP when IoU >= tau and still unmatched.
pub fn greedy_f1(pred: &[usize], gt: &[usize], tau: f64) -> f64 {
    let m = iou_matrix(pred, gt);
    let n_gt = segments(gt).len();
    let mut used = vec![false; n_gt];
    let mut tp = 0;
    for row in &m {
        let mut best: Option<(usize, f64)> = None;
        for (j, v) in row.iter().enumerate() {
            if let Some(v) = *v {
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
        }
        if let Some((j, v)) = best {
            if v >= tau && !used[j] {
                used[j] = true;
                tp += 1;
            }
        }
    }
    f1_from(tp, m.len(), n_gt)
}

/// Maximum-cardinality matching among same-label pairs with IoU >= tau
/// (augmenting paths), i.e. the best any assignment could do.
pub fn optimal_f1(pred: &[usize], gt: &[usize], tau: f64) -> f64 {
    let m = iou_matrix(pred, gt);
    let n_gt = segments(gt).len();
    fn augment(m: &[Vec<Option<f64>>], i: usize, tau: f64, seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for j in 0..owner.len() {
            if seen[j] || !m[i][j].is_some_and(|v| v >= tau) {
                continue;
            }
            seen[j] = true;
            if owner[j].is_none_or(|o| augment(m, o, tau, seen, owner)) {
                owner[j] = Some(i);
                return true;
            }
        }
        false
    }
    let mut owner = vec![None; n_gt];
    let mut tp = 0;
    for i in 0..m.len() {
        if augment(&m, i, tau, &mut vec![false; n_gt], &mut owner) {
            tp += 1;
        }
    }
    f1_from(tp, m.len(), n_gt)
}

fn f1_from(tp: usize, n_pred: usize, n_gt: usize) -> f64 {
    let denom = n_pred + n_gt;
    if denom == 0 {
        return 100.0;
    }
    100.0 * 2.0 * tp as f64 / denom as f64
}

/// Threshold sweep: for each distinct score, predict positive when
/// `score >= threshold`, then integrate precision over recall steps.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Option<f64> {
    let total = positives.iter().filter(|&&p| p).count();
    if total == 0 {
        return None;
    }
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for th in thresholds {
        let selected: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= th).collect();
        let tp = selected.iter().filter(|&&i| positives[i]).count();
        let recall = tp as f64 / total as f64;
        let precision = tp as f64 / selected.len() as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

/// Macro AP over classes with a positive frame; `probs[k][t]`.
pub fn pr_auc(probs: &[Vec<f64>], gt: &[usize]) -> f64 {
    let aps: Vec<f64> = probs
        .iter()
        .enumerate()
        .filter_map(|(k, s)| {
            let pos: Vec<bool> = gt.iter().map(|&g| g == k).collect();
            average_precision(s, &pos)
        })
        .collect();
    100.0 * aps.iter().sum::<f64>() / aps.len() as f64
}
