//! ROUGE, abstraction rate, ranking AUCs, selection coverage and Pearson
//! correlation, plus the plain `key value` report format.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision > 0.0 && recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf { precision, recall, f1 }
    }

    fn from_counts(overlap: usize, hyp: usize, reference: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Prf::new(ratio(overlap, hyp), ratio(overlap, reference))
    }
}

fn ngram_counts<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram overlap.
pub fn rouge_n<T: Eq + Hash>(reference: &[T], hypothesis: &[T], n: usize) -> Result<Prf> {
    if n == 0 {
        return Err(Error::Metric("ROUGE-N needs n >= 1".into()));
    }
    let r = ngram_counts(reference, n);
    let h = ngram_counts(hypothesis, n);
    let overlap = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
    Ok(Prf::from_counts(
        overlap,
        hypothesis.len().saturating_sub(n - 1),
        reference.len().saturating_sub(n - 1),
    ))
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Sequence-level LCS.
pub fn rouge_l<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Prf {
    Prf::from_counts(lcs_len(reference, hypothesis), hypothesis.len(), reference.len())
}

/// Lowercased whitespace tokens with punctuation removed; tokens that were
/// all punctuation disappear.
pub fn rouge_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| !c.is_ascii_punctuation())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScores {
    pub rouge1: Prf,
    pub rouge2: Prf,
    pub rouge_l: Prf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeReport {
    /// Means over examples of each component.
    pub mean: RougeScores,
    pub per_example: Vec<RougeScores>,
}

pub fn rouge_scores(reference: &str, hypothesis: &str) -> RougeScores {
    let r = rouge_tokens(reference);
    let h = rouge_tokens(hypothesis);
    RougeScores {
        rouge1: rouge_n(&r, &h, 1).expect("n = 1"),
        rouge2: rouge_n(&r, &h, 2).expect("n = 2"),
        rouge_l: rouge_l(&r, &h),
    }
}

fn mean_prf(xs: impl Iterator<Item = Prf> + Clone) -> Prf {
    let n = xs.clone().count().max(1) as f64;
    let (p, r, f) = xs.fold((0.0, 0.0, 0.0), |acc, x| {
        (acc.0 + x.precision, acc.1 + x.recall, acc.2 + x.f1)
    });
    Prf {
        precision: p / n,
        recall: r / n,
        f1: f / n,
    }
}

/// Per-example ROUGE over detokenized texts and the corpus means.
pub fn rouge_report(references: &[String], hypotheses: &[String]) -> Result<RougeReport> {
    if references.len() != hypotheses.len() {
        return Err(Error::Report(format!(
            "{} references against {} hypotheses",
            references.len(),
            hypotheses.len()
        )));
    }
    if references.is_empty() {
        return Err(Error::Report("ROUGE over an empty corpus".into()));
    }
    let per_example: Vec<RougeScores> = references
        .iter()
        .zip(hypotheses)
        .map(|(r, h)| rouge_scores(r, h))
        .collect();
    let mean = RougeScores {
        rouge1: mean_prf(per_example.iter().map(|s| s.rouge1)),
        rouge2: mean_prf(per_example.iter().map(|s| s.rouge2)),
        rouge_l: mean_prf(per_example.iter().map(|s| s.rouge_l)),
    };
    Ok(RougeReport { mean, per_example })
}

/// Percentage of summary tokens that never occur in the source.
pub fn abstraction_rate<T: Eq + Hash>(source: &[T], summary: &[T]) -> Result<f64> {
    let (novel, total) = novel_counts(source, summary);
    if total == 0 {
        return Err(Error::Metric("abstraction rate of an empty summary".into()));
    }
    Ok(100.0 * novel as f64 / total as f64)
}

fn novel_counts<T: Eq + Hash>(source: &[T], summary: &[T]) -> (usize, usize) {
    let set: HashSet<&T> = source.iter().collect();
    (summary.iter().filter(|t| !set.contains(t)).count(), summary.len())
}

/// Pooled abstraction rate over a corpus of (source, summary) pairs:
/// novel tokens over all summary tokens.
pub fn corpus_abstraction_rate<T: Eq + Hash>(pairs: &[(&[T], &[T])]) -> Result<f64> {
    let (novel, total) = pairs
        .iter()
        .map(|(s, y)| novel_counts(s, y))
        .fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    if total == 0 {
        return Err(Error::Metric("abstraction rate of empty summaries".into()));
    }
    Ok(100.0 * novel as f64 / total as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Auc {
    pub roc: f64,
    pub pr: f64,
}

fn check_scores(scores: &[f64], labels: &[bool]) -> Result<usize> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&y| y).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::Metric("AUC needs both label classes".into()));
    }
    Ok(pos)
}

/// AUC-ROC as the Mann–Whitney statistic with tied ranks averaged, and
/// AUC-PR as average precision (step interpolation over distinct scores).
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<Auc> {
    let pos = check_scores(scores, labels)?;
    let neg = labels.len() - pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Ascending ranks, ties sharing their average rank.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += avg_rank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    let roc = u / (pos * neg) as f64;

    // Descending sweep; each distinct score is one threshold.
    let mut ap = 0.0;
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut i = order.len();
    while i > 0 {
        let v = scores[order[i - 1]];
        while i > 0 && scores[order[i - 1]] == v {
            seen += 1;
            tp += usize::from(labels[order[i - 1]]);
            i -= 1;
        }
        let recall = tp as f64 / pos as f64;
        ap += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
    }
    Ok(Auc { roc, pr: ap })
}

/// Word-piece coverage counts of a selection against the reference summary.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageCounts {
    pub selected: usize,
    pub selected_labelled: usize,
    pub summary_pieces: usize,
    pub covered_pieces: usize,
}

impl CoverageCounts {
    /// Precision is the share of selected positions that carry a label
    /// (vacuously 1 when nothing is selected); recall is the share of summary
    /// pieces whose piece occurs at a selected, labelled position.
    pub fn prf(&self) -> Prf {
        let precision = if self.selected == 0 {
            1.0
        } else {
            self.selected_labelled as f64 / self.selected as f64
        };
        let recall = if self.summary_pieces == 0 {
            0.0
        } else {
            self.covered_pieces as f64 / self.summary_pieces as f64
        };
        Prf::new(precision, recall)
    }
}

impl std::ops::AddAssign for CoverageCounts {
    fn add_assign(&mut self, o: Self) {
        self.selected += o.selected;
        self.selected_labelled += o.selected_labelled;
        self.summary_pieces += o.summary_pieces;
        self.covered_pieces += o.covered_pieces;
    }
}

pub fn coverage_counts(
    selected: &[bool],
    labels: &[bool],
    source: &[usize],
    summary: &[usize],
) -> Result<CoverageCounts> {
    if selected.len() != labels.len() || labels.len() != source.len() {
        return Err(Error::Metric(format!(
            "selection over {}, labels over {}, source of {}",
            selected.len(),
            labels.len(),
            source.len()
        )));
    }
    let hits: HashSet<usize> = source
        .iter()
        .zip(selected.iter().zip(labels))
        .filter(|(_, (&s, &y))| s && y)
        .map(|(&id, _)| id)
        .collect();
    Ok(CoverageCounts {
        selected: selected.iter().filter(|&&s| s).count(),
        selected_labelled: selected.iter().zip(labels).filter(|(&s, &y)| s && y).count(),
        summary_pieces: summary.len(),
        covered_pieces: summary.iter().filter(|id| hits.contains(id)).count(),
    })
}

pub fn coverage_prf(selected: &[bool], labels: &[bool], source: &[usize], summary: &[usize]) -> Result<Prf> {
    Ok(coverage_counts(selected, labels, source, summary)?.prf())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionEvalReport {
    pub auc_pr: f64,
    pub auc_roc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl SelectionEvalReport {
    pub fn lines(&self, prefix: &str) -> Vec<(String, f64)> {
        vec![
            (format!("{prefix}auc_pr"), self.auc_pr),
            (format!("{prefix}auc_roc"), self.auc_roc),
            (format!("{prefix}precision"), self.precision),
            (format!("{prefix}recall"), self.recall),
            (format!("{prefix}f1"), self.f1),
        ]
    }
}

/// Sample Pearson correlation.
pub fn pearson_r(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Metric(format!(
            "Pearson r needs two equal-length series of at least 2 (got {} and {})",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Metric("Pearson r of a constant series".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Sample standard deviation (n − 1); 0 for fewer than two values.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

pub fn rouge_lines(prefix: &str, s: &RougeScores) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (name, p) in [("rouge1", s.rouge1), ("rouge2", s.rouge2), ("rougeL", s.rouge_l)] {
        out.push((format!("{prefix}{name}_precision"), p.precision));
        out.push((format!("{prefix}{name}_recall"), p.recall));
        out.push((format!("{prefix}{name}_f1"), p.f1));
    }
    out
}

/// `key value` per line, values printed with round-trip precision.
pub fn format_report(lines: &[(String, f64)]) -> String {
    let mut out = String::new();
    for (k, v) in lines {
        writeln!(out, "{k} {v:?}").expect("writing to a String");
    }
    out
}

pub fn parse_report(text: &str) -> Result<Vec<(String, f64)>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (k, v) = l
                .split_once(' ')
                .ok_or_else(|| Error::Parse(format!("report line without value: {l:?}")))?;
            let v = v
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad value in report line {l:?}")))?;
            Ok((k.to_string(), v))
        })
        .collect()
}

pub fn report_value(lines: &[(String, f64)], key: &str) -> Option<f64> {
    lines.iter().find(|(k, _)| k == key).map(|&(_, v)| v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn rouge_n_examples() {
        let p = rouge_n(&["a", "b", "c"], &["a", "b", "c"], 1).unwrap();
        assert_eq!(
            p,
            Prf {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0
            }
        );
        let p = rouge_n(&["a", "b", "c"], &["a", "b"], 1).unwrap();
        assert!(close(p.precision, 1.0) && close(p.recall, 2.0 / 3.0) && close(p.f1, 0.8));
        let p = rouge_n(&["a", "b", "c", "d"], &["a", "b", "c"], 2).unwrap();
        assert!(close(p.precision, 1.0) && close(p.recall, 2.0 / 3.0) && close(p.f1, 0.8));
        // Clipping: a repeated hypothesis token counts at most as often as in the reference.
        let p = rouge_n(&["a", "b"], &["a", "a", "a"], 1).unwrap();
        assert!(close(p.precision, 1.0 / 3.0));
        assert_eq!(rouge_n::<&str>(&[], &[], 1).unwrap().f1, 0.0);
        assert!(rouge_n(&["a"], &["a"], 0).is_err());
    }

    #[test]
    fn rouge_l_examples() {
        assert_eq!(rouge_l(&[1, 2, 3], &[1, 2, 3]).f1, 1.0);
        let p = rouge_l(&["a", "b", "c"], &["a", "c"]);
        assert!(close(p.precision, 1.0) && close(p.recall, 2.0 / 3.0) && close(p.f1, 0.8));
        assert_eq!(rouge_l(&[1, 2], &[3, 4]), Prf::default());
    }

    #[test]
    fn rouge_text_recipe() {
        assert_eq!(
            rouge_tokens("The Farmer, visits . river!"),
            ["the", "farmer", "visits", "river"]
        );
        let s = rouge_scores("the farmer visits the river .", "The farmer visits the river");
        assert_eq!(s.rouge_l.f1, 1.0);
        let r = rouge_report(&["a b".into(), "c".into()], &["a b".into(), "d".into()]).unwrap();
        assert!(close(r.mean.rouge1.f1, 0.5));
        assert!(rouge_report(&["a".into()], &[]).is_err());
    }

    #[test]
    fn abstraction_examples() {
        assert_eq!(abstraction_rate(&["a", "b", "c"], &["a", "b"]).unwrap(), 0.0);
        assert_eq!(abstraction_rate(&["a", "b", "c"], &["a", "d"]).unwrap(), 50.0);
        assert!(abstraction_rate::<u8>(&[1], &[]).is_err());
        let pairs: Vec<(&[u8], &[u8])> = vec![(&[1, 2], &[1, 3, 4]), (&[5], &[5])];
        assert_eq!(corpus_abstraction_rate(&pairs).unwrap(), 50.0);
    }

    #[test]
    fn auc_examples() {
        let a = auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap();
        assert_eq!(a.roc, 1.0);
        assert_eq!(a.pr, 1.0);
        let a = auc(&[0.9, 0.8, 0.2, 0.1], &[false, false, true, true]).unwrap();
        assert_eq!(a.roc, 0.0);
        let a = auc(&[0.5, 0.5], &[true, false]).unwrap();
        assert_eq!(a.roc, 0.5);
        assert_eq!(a.pr, 0.5);
        assert!(auc(&[0.1, 0.2], &[true, true]).is_err());
        // Average precision by hand: ranks +, -, + → 1·½ + ⅔·½.
        let a = auc(&[0.9, 0.5, 0.3], &[true, false, true]).unwrap();
        assert!(close(a.pr, 0.5 + 1.0 / 3.0));
    }

    #[test]
    fn coverage_examples() {
        let labels = [true, false, true, false];
        let source = [7, 8, 9, 10];
        let summary = [7, 9, 11];
        let oracle = coverage_prf(&labels, &labels, &source, &summary).unwrap();
        assert_eq!(oracle.precision, 1.0);
        assert!(close(oracle.recall, 2.0 / 3.0));
        let none = coverage_prf(&[false; 4], &labels, &source, &summary).unwrap();
        assert_eq!(none.recall, 0.0);
        assert_eq!(none.f1, 0.0);
        let all = coverage_prf(&[true; 4], &labels, &source, &summary).unwrap();
        assert_eq!(all.precision, 0.5);
    }

    #[test]
    fn pearson_examples() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let twice: Vec<f64> = xs.iter().map(|x| 2.0 * x).collect();
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!(close(pearson_r(&xs, &twice).unwrap(), 1.0));
        assert!(close(pearson_r(&xs, &neg).unwrap(), -1.0));
        // Σdx·dy = 8, Σdx² = Σdy² = 10 for ys = [2,1,4,3,5].
        let r = pearson_r(&xs, &[2.0, 1.0, 4.0, 3.0, 5.0]).unwrap();
        assert!(close(r, 0.8));
        assert!(pearson_r(&xs, &[1.0; 5]).is_err());
        assert!(pearson_r(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn report_round_trip() {
        let lines = vec![("rougeL_f1".to_string(), 0.1 + 0.2), ("n".to_string(), 3.0)];
        let text = format_report(&lines);
        assert_eq!(parse_report(&text).unwrap(), lines);
        assert_eq!(report_value(&lines, "n"), Some(3.0));
    }

    /// Longest common subsequence by enumerating every subsequence of `a`.
    fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
        let mut best = 0;
        for mask in 0u32..(1 << a.len()) {
            let sub: Vec<u8> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
            let mut it = b.iter();
            if sub.iter().all(|x| it.any(|y| y == x)) {
                best = best.max(sub.len());
            }
        }
        best
    }

    /// Pairwise definition of AUC-ROC.
    fn brute_roc(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] && !labels[j] {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    proptest! {
        #[test]
        fn lcs_matches_brute_force(a in prop::collection::vec(0u8..4, 0..9), b in prop::collection::vec(0u8..4, 0..9)) {
            prop_assert_eq!(lcs_len(&a, &b), brute_lcs(&a, &b));
        }

        #[test]
        fn rouge_invariant_under_relabeling(
            a in prop::collection::vec(0u8..5, 0..12),
            b in prop::collection::vec(0u8..5, 0..12),
            shift in 1u8..5,
        ) {
            let relabel = |s: &[u8]| s.iter().map(|x| (x + shift) % 5).collect::<Vec<_>>();
            prop_assert_eq!(rouge_l(&a, &b), rouge_l(&relabel(&a), &relabel(&b)));
            prop_assert_eq!(rouge_n(&a, &b, 2).unwrap(), rouge_n(&relabel(&a), &relabel(&b), 2).unwrap());
            let p = rouge_l(&a, &b);
            prop_assert!((0.0..=1.0).contains(&p.f1));
            if p.precision == 0.0 || p.recall == 0.0 {
                prop_assert_eq!(p.f1, 0.0);
            }
        }

        #[test]
        fn roc_matches_pairwise_and_is_rank_invariant(
            pts in prop::collection::vec((0u8..30, any::<bool>()), 2..60)
        ) {
            let scores: Vec<f64> = pts.iter().map(|p| p.0 as f64 / 7.0).collect();
            let labels: Vec<bool> = pts.iter().map(|p| p.1).collect();
            let pos = labels.iter().filter(|&&y| y).count();
            prop_assume!(pos > 0 && pos < labels.len());
            let a = auc(&scores, &labels).unwrap();
            prop_assert!((a.roc - brute_roc(&scores, &labels)).abs() < 1e-9);
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 4.0).collect();
            let b = auc(&warped, &labels).unwrap();
            prop_assert!((a.roc - b.roc).abs() < 1e-12);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&a.pr));
        }
    }
}
