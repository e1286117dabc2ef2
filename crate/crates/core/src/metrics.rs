//! Prediction metrics (AUC, ACC, RMSE), degree of agreement and the
//! Inconsistency of mastery rows across similar students.

use rayon::prelude::*;
use serde::Serialize;

use crate::dataio::{QMatrix, RatingMatrix, ResponseLog};
use crate::diffcore::Mat;
use crate::error::{IcdmError, Result};

fn check_lengths(preds: &[f64], labels: &[f64]) -> Result<()> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(IcdmError::Metric(format!(
            "need equal non-empty lengths, got {} predictions and {} labels",
            preds.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Mann-Whitney AUC with tied scores sharing their average rank.
pub fn auc(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(preds, labels)?;
    let n_pos = labels.iter().filter(|&&y| y > 0.5).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(IcdmError::Metric("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[a].total_cmp(&preds[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && preds[order[j + 1]] == preds[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] > 0.5 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Fraction of predictions on the right side of 0.5 (≥ 0.5 means right).
pub fn acc(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(preds, labels)?;
    let hits = preds
        .iter()
        .zip(labels)
        .filter(|(&p, &y)| (p >= 0.5) == (y > 0.5))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

pub fn rmse(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(preds, labels)?;
    let se: f64 = preds.iter().zip(labels).map(|(p, y)| (p - y) * (p - y)).sum();
    Ok((se / preds.len() as f64).sqrt())
}

#[derive(Clone)]
struct Bits(Vec<u64>);

impl Bits {
    fn new(n: usize) -> Self {
        Bits(vec![0; n.div_ceil(64)])
    }

    fn set(&mut self, i: usize) {
        self.0[i / 64] |= 1 << (i % 64);
    }
}

/// Per-concept DOA; `None` when no pair has a nonzero denominator.
fn doa_concept(mas: &Mat, logs_by_student: &[Vec<(usize, bool)>], q: &QMatrix, k: usize) -> Option<f64> {
    let exercises: Vec<usize> = (0..q.n_exercises()).filter(|&j| q.get(j, k)).collect();
    if exercises.is_empty() {
        return None;
    }
    let local = |j: usize| exercises.binary_search(&j).ok();
    let mut students = Vec::new();
    for (s, logs) in logs_by_student.iter().enumerate() {
        let mut answered = Bits::new(exercises.len());
        let mut right = Bits::new(exercises.len());
        let mut any = false;
        for &(j, r) in logs {
            if let Some(l) = local(j) {
                answered.set(l);
                if r {
                    right.set(l);
                }
                any = true;
            }
        }
        if any {
            students.push((s, answered, right));
        }
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (a, ans_a, cor_a) in &students {
        for (b, ans_b, cor_b) in &students {
            if mas.get(*a, k) <= mas.get(*b, k) {
                continue;
            }
            let (mut num, mut den) = (0u32, 0u32);
            for w in 0..ans_a.0.len() {
                let both = ans_a.0[w] & ans_b.0[w];
                num += (both & cor_a.0[w] & !cor_b.0[w]).count_ones();
                den += (both & (cor_a.0[w] ^ cor_b.0[w])).count_ones();
            }
            if den > 0 {
                total += num as f64 / den as f64;
                pairs += 1;
            }
        }
    }
    (pairs > 0).then(|| total / pairs as f64)
}

fn group_logs(n_students: usize, logs: &[ResponseLog]) -> Result<Vec<Vec<(usize, bool)>>> {
    let mut by = vec![Vec::new(); n_students];
    for l in logs {
        if l.student >= n_students {
            return Err(IcdmError::Metric(format!("no mastery row for student {}", l.student)));
        }
        by[l.student].push((l.exercise, l.is_correct()));
    }
    Ok(by)
}

/// Degree of agreement averaged over `concepts`.
///
/// Only ordered pairs with strictly greater mastery and at least one
/// commonly answered exercise with differing responses count; concepts
/// without such a pair are left out of the average.
pub fn doa(mas: &Mat, logs: &[ResponseLog], q: &QMatrix, concepts: &[usize]) -> Result<f64> {
    if concepts.is_empty() {
        return Err(IcdmError::Metric("DOA needs at least one concept".into()));
    }
    if let Some(&k) = concepts.iter().find(|&&k| k >= mas.cols() || k >= q.n_concepts()) {
        return Err(IcdmError::Metric(format!("concept {k} out of range")));
    }
    let by = group_logs(mas.rows(), logs)?;
    let per: Vec<f64> = concepts
        .par_iter()
        .filter_map(|&k| doa_concept(mas, &by, q, k))
        .collect();
    if per.is_empty() {
        return Err(IcdmError::Metric("no concept has a comparable student pair".into()));
    }
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Concepts ordered by descending log count, lower index first on ties;
/// concepts without logs are excluded.
pub fn top_concepts_by_logs(logs: &[ResponseLog], q: &QMatrix, n: usize) -> Vec<usize> {
    let mut counts = vec![0usize; q.n_concepts()];
    for l in logs {
        for &k in q.concepts(l.exercise) {
            counts[k] += 1;
        }
    }
    let mut order: Vec<usize> = (0..counts.len()).filter(|&k| counts[k] > 0).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    order.truncate(n);
    order
}

pub fn doa_at_10(mas: &Mat, logs: &[ResponseLog], q: &QMatrix) -> Result<f64> {
    doa(mas, logs, q, &top_concepts_by_logs(logs, q, 10))
}

fn cosine(a: &[(usize, i8)], b: &[(usize, i8)], na: f64, nb: f64) -> f64 {
    let (mut i, mut j, mut dot) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                dot += (a[i].1 as f64) * (b[j].1 as f64);
                i += 1;
                j += 1;
            }
        }
    }
    dot / (na * nb)
}

/// Most similar other student by cosine of rating rows, lowest index on
/// ties. `None` for students with an empty row or no valid partner.
pub fn nearest_students(r: &RatingMatrix) -> Vec<Option<usize>> {
    let n = r.n_students();
    let norms: Vec<f64> = (0..n).map(|s| (r.row(s).len() as f64).sqrt()).collect();
    (0..n)
        .into_par_iter()
        .map(|i| {
            if norms[i] == 0.0 {
                return None;
            }
            let mut best: Option<(usize, f64)> = None;
            for j in 0..n {
                if j == i || norms[j] == 0.0 {
                    continue;
                }
                let c = cosine(r.row(i), r.row(j), norms[i], norms[j]);
                if best.is_none_or(|(_, b)| c > b) {
                    best = Some((j, c));
                }
            }
            best.map(|(j, _)| j)
        })
        .collect()
}

/// `(1/Z)(1/N') Σ_i ‖Mas_i − Mas_{nn(i)}‖₁` over the N' students that have
/// a defined nearest neighbor.
pub fn inconsistency(mas: &Mat, r: &RatingMatrix) -> Result<f64> {
    if r.n_students() < 2 {
        return Err(IcdmError::Metric("Inconsistency needs at least two students".into()));
    }
    if mas.rows() != r.n_students() {
        return Err(IcdmError::Metric("mastery rows and rating rows differ".into()));
    }
    let nn = nearest_students(r);
    let mut total = 0.0;
    let mut counted = 0usize;
    for (i, j) in nn.iter().enumerate() {
        if let Some(j) = *j {
            total += mas.row(i).iter().zip(mas.row(j)).map(|(a, b)| (a - b).abs()).sum::<f64>();
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(IcdmError::Metric("no student has a comparable neighbor".into()));
    }
    Ok(total / mas.cols() as f64 / counted as f64)
}

/// Agreement of estimated mastery with known binary mastery: per concept,
/// the fraction of (master, non-master) pairs ordered correctly, ties ½,
/// averaged over concepts that have both groups.
pub fn truth_doa(mas: &Mat, truth: &[Vec<u8>]) -> Result<f64> {
    if truth.len() != mas.rows() {
        return Err(IcdmError::Metric("truth rows and mastery rows differ".into()));
    }
    let mut per = Vec::new();
    for k in 0..mas.cols() {
        let preds: Vec<f64> = (0..mas.rows()).map(|s| mas.get(s, k)).collect();
        let labels: Vec<f64> = truth.iter().map(|row| row[k] as f64).collect();
        if let Ok(v) = auc(&preds, &labels) {
            per.push(v);
        }
    }
    if per.is_empty() {
        return Err(IcdmError::Metric("no concept has both masters and non-masters".into()));
    }
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub auc: Option<f64>,
    pub acc: f64,
    pub rmse: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub doa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub doa_at_10: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inconsistency: Option<f64>,
    pub n_predictions: usize,
}

impl EvalReport {
    pub fn from_predictions(preds: &[f64], labels: &[f64]) -> Result<Self> {
        Ok(Self {
            auc: auc(preds, labels).ok(),
            acc: acc(preds, labels)?,
            rmse: rmse(preds, labels)?,
            doa: None,
            doa_at_10: None,
            inconsistency: None,
            n_predictions: preds.len(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn brute_auc(preds: &[f64], labels: &[f64]) -> f64 {
        let (mut s, mut n) = (0.0, 0.0);
        for i in 0..preds.len() {
            for j in 0..preds.len() {
                if labels[i] == 1.0 && labels[j] == 0.0 {
                    n += 1.0;
                    s += if preds[i] > preds[j] {
                        1.0
                    } else if preds[i] == preds[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        s / n
    }

    pub(crate) fn brute_doa(mas: &Mat, logs: &[ResponseLog], q: &QMatrix, concepts: &[usize]) -> Option<f64> {
        let resp = |s: usize, j: usize| logs.iter().find(|l| l.student == s && l.exercise == j).map(|l| l.score);
        let mut per = Vec::new();
        for &k in concepts {
            let (mut total, mut z) = (0.0, 0);
            for a in 0..mas.rows() {
                for b in 0..mas.rows() {
                    if mas.get(a, k) <= mas.get(b, k) {
                        continue;
                    }
                    let (mut num, mut den) = (0, 0);
                    for j in 0..q.n_exercises() {
                        if !q.get(j, k) {
                            continue;
                        }
                        if let (Some(ra), Some(rb)) = (resp(a, j), resp(b, j)) {
                            if ra != rb {
                                den += 1;
                                if ra == 1 {
                                    num += 1;
                                }
                            }
                        }
                    }
                    if den > 0 {
                        total += num as f64 / den as f64;
                        z += 1;
                    }
                }
            }
            if z > 0 {
                per.push(total / z as f64);
            }
        }
        (!per.is_empty()).then(|| per.iter().sum::<f64>() / per.len() as f64)
    }

    #[test]
    fn auc_acc_rmse_examples() {
        assert_eq!(auc(&[0.9, 0.1], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(acc(&[0.9, 0.1], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), 0.5);
        assert_eq!(auc(&[0.8, 0.6, 0.4], &[1.0, 0.0, 1.0]).unwrap(), 0.5);
        assert!(auc(&[0.3, 0.6], &[1.0, 1.0]).is_err());
        assert_eq!(acc(&[0.3, 0.6], &[1.0, 1.0]).unwrap(), 0.5);
        assert!((rmse(&[0.5, 1.0], &[1.0, 1.0]).unwrap() - 0.125f64.sqrt()).abs() < 1e-15);
        assert!(rmse(&[], &[]).is_err());
    }

    fn dataset(n: usize, m: usize, z: usize, rng: &mut ChaCha8Rng) -> (Mat, Vec<ResponseLog>, QMatrix) {
        let rows = (0..m)
            .map(|_| {
                let mut r: Vec<usize> = (0..z).filter(|_| rng.gen_bool(0.5)).collect();
                if r.is_empty() {
                    r.push(rng.gen_range(0..z));
                }
                r
            })
            .collect();
        let q = QMatrix::from_rows(z, rows).unwrap();
        let mut logs = Vec::new();
        for s in 0..n {
            for j in 0..m {
                if rng.gen_bool(0.7) {
                    logs.push(ResponseLog::new(s, j, rng.gen_bool(0.5) as u8));
                }
            }
        }
        // Coarse values so ties occur.
        let mas = Mat::from_vec(n, z, (0..n * z).map(|_| rng.gen_range(0..4) as f64 / 4.0).collect());
        (mas, logs, q)
    }

    #[test]
    fn doa_examples() {
        let q = QMatrix::from_rows(1, vec![vec![0]]).unwrap();
        let logs = [ResponseLog::new(0, 0, 1), ResponseLog::new(1, 0, 0)];
        let up = Mat::from_rows(&[vec![0.9], vec![0.1]]);
        let down = Mat::from_rows(&[vec![0.1], vec![0.9]]);
        assert_eq!(doa(&up, &logs, &q, &[0]).unwrap(), 1.0);
        assert_eq!(doa(&down, &logs, &q, &[0]).unwrap(), 0.0);
        let flat = Mat::from_rows(&[vec![0.5], vec![0.5]]);
        assert!(doa(&flat, &logs, &q, &[0]).is_err());
    }

    #[test]
    fn doa_matches_brute_force_4x3() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let (mas, logs, q) = dataset(4, 3, 2, &mut rng);
            let fast = doa(&mas, &logs, &q, &[0, 1]).ok();
            let slow = brute_doa(&mas, &logs, &q, &[0, 1]);
            match (fast, slow) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12),
                (None, None) => {}
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn doa_bitsets_span_words() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mas, logs, q) = dataset(6, 130, 3, &mut rng);
        let a = doa(&mas, &logs, &q, &[0, 1, 2]).unwrap();
        let b = brute_doa(&mas, &logs, &q, &[0, 1, 2]).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn top_concepts_selection() {
        let mut rows = vec![vec![0]; 3];
        rows.extend((1..10).map(|k| vec![k]));
        // Concepts 10 and 11 never appear in a logged exercise.
        rows.push(vec![10, 11]);
        let q = QMatrix::from_rows(12, rows).unwrap();
        let logs: Vec<ResponseLog> = (0..12).map(|j| ResponseLog::new(0, j, 1)).collect();
        let top = top_concepts_by_logs(&logs, &q, 10);
        assert_eq!(top, vec![0, 1, 2, 3, 4, 5, 6, 7, 8, 9]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (_, logs, q) = dataset(30, 40, 20, &mut rng);
        let mut counts: Vec<(usize, usize)> = (0..20)
            .map(|k| (k, logs.iter().filter(|l| q.get(l.exercise, k)).count()))
            .collect();
        counts.sort_by_key(|&(k, c)| (std::cmp::Reverse(c), k));
        let want: Vec<usize> = counts.iter().filter(|c| c.1 > 0).take(10).map(|c| c.0).collect();
        assert_eq!(top_concepts_by_logs(&logs, &q, 10), want);
    }

    #[test]
    fn inconsistency_examples() {
        let logs = [ResponseLog::new(0, 0, 1), ResponseLog::new(1, 0, 1)];
        let r = RatingMatrix::from_logs(2, 1, &logs);
        let mas = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(inconsistency(&mas, &r).unwrap(), 1.0);
        let same = Mat::from_rows(&[vec![0.3, 0.4], vec![0.3, 0.4]]);
        assert_eq!(inconsistency(&same, &r).unwrap(), 0.0);
    }

    #[test]
    fn inconsistency_skips_empty_rows_and_breaks_ties_low() {
        // s2 has no logs. s0's neighbors s1 and s3 tie; s1 wins.
        let logs = [
            ResponseLog::new(0, 0, 1),
            ResponseLog::new(1, 0, 1),
            ResponseLog::new(3, 0, 1),
        ];
        let r = RatingMatrix::from_logs(4, 1, &logs);
        assert_eq!(nearest_students(&r), vec![Some(1), Some(0), None, Some(0)]);
        let mas = Mat::from_rows(&[vec![0.0], vec![1.0], vec![5.0], vec![0.5]]);
        assert!((inconsistency(&mas, &r).unwrap() - (1.0 + 1.0 + 0.5) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn truth_doa_perfect_and_reversed() {
        let truth = vec![vec![1, 0], vec![0, 1], vec![1, 1]];
        let mas = Mat::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8], vec![0.7, 0.6]]);
        assert_eq!(truth_doa(&mas, &truth).unwrap(), 1.0);
        let rev = mas.map(|x| -x);
        assert_eq!(truth_doa(&rev, &truth).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn auc_matches_pair_enumeration(vals in proptest::collection::vec((0u8..5, any::<bool>()), 2..40)) {
            let preds: Vec<f64> = vals.iter().map(|v| v.0 as f64 / 4.0).collect();
            let labels: Vec<f64> = vals.iter().map(|v| v.1 as u8 as f64).collect();
            match auc(&preds, &labels) {
                Ok(a) => prop_assert!((a - brute_auc(&preds, &labels)).abs() < 1e-12),
                Err(_) => prop_assert!(labels.iter().all(|&y| y == labels[0])),
            }
        }

        #[test]
        fn auc_invariant_under_increasing_map(vals in proptest::collection::vec((-3.0f64..3.0, any::<bool>()), 2..30)) {
            let preds: Vec<f64> = vals.iter().map(|v| v.0).collect();
            let labels: Vec<f64> = vals.iter().map(|v| v.1 as u8 as f64).collect();
            let mapped: Vec<f64> = preds.iter().map(|p| p.exp()).collect();
            if let (Ok(a), Ok(b)) = (auc(&preds, &labels), auc(&mapped, &labels)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn doa_matches_oracle_small(seed in 0u64..10_000, n in 2usize..=8, m in 1usize..=6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (mas, logs, q) = dataset(n, m, 3, &mut rng);
            let fast = doa(&mas, &logs, &q, &[0, 1, 2]).ok();
            let slow = brute_doa(&mas, &logs, &q, &[0, 1, 2]);
            prop_assert_eq!(fast.is_some(), slow.is_some());
            if let (Some(a), Some(b)) = (fast, slow) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn doa_invariant_under_increasing_map(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (mas, logs, q) = dataset(6, 5, 3, &mut rng);
            let mapped = mas.map(|x| 1.0 / (1.0 + (-3.0 * x).exp()));
            prop_assert_eq!(doa(&mas, &logs, &q, &[0, 1, 2]).ok(), doa(&mapped, &logs, &q, &[0, 1, 2]).ok());
        }
    }
}
