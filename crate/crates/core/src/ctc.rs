//! Connectionist temporal classification: loss, greedy decoding and prefix
//! beam search. Index 0 of every log-probability row is the blank.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::ops::Deref;

use crate::error::{Error, Result};

pub const BLANK: usize = 0;

/// Gloss ids, 1-based; 0 is reserved for the blank.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LabelSeq(Vec<usize>);

impl LabelSeq {
    /// Checks every id lies in `1..=vocab`.
    pub fn new(ids: Vec<usize>, vocab: usize) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&id| id == BLANK || id > vocab) {
            return Err(Error::invalid(
                "LabelSeq",
                format!("gloss id {bad} outside 1..={vocab}"),
            ));
        }
        Ok(LabelSeq(ids))
    }

    pub fn into_vec(self) -> Vec<usize> {
        self.0
    }

    /// Minimum number of steps a CTC alignment of this label needs: one per
    /// symbol plus a separating blank between equal neighbours.
    pub fn min_steps(&self) -> usize {
        min_steps(&self.0)
    }
}

impl Deref for LabelSeq {
    type Target = [usize];
    fn deref(&self) -> &[usize] {
        &self.0
    }
}

impl From<LabelSeq> for Vec<usize> {
    fn from(l: LabelSeq) -> Self {
        l.0
    }
}

pub fn min_steps(label: &[usize]) -> usize {
    label.len() + label.windows(2).filter(|w| w[0] == w[1]).count()
}

/// `ln(exp(a) + exp(b))`, exact when either side is `-inf`.
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Label with blanks interleaved: `[_, l1, _, l2, ..., lU, _]`.
fn extend_label(label: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * label.len() + 1);
    ext.push(BLANK);
    for &l in label {
        ext.push(l);
        ext.push(BLANK);
    }
    ext
}

fn validate(logprobs: &[f64], steps: usize, classes: usize, label: &[usize]) -> Result<()> {
    if logprobs.len() != steps * classes || classes == 0 {
        return Err(Error::shape(
            "ctc_loss",
            format!("{} values for [{steps}, {classes}]", logprobs.len()),
        ));
    }
    if let Some(&bad) = label.iter().find(|&&l| l == BLANK || l >= classes) {
        return Err(Error::invalid(
            "ctc_loss",
            format!("label id {bad} outside 1..{classes}"),
        ));
    }
    let required = min_steps(label);
    if steps < required || steps == 0 {
        return Err(Error::InfeasibleLabel {
            label_len: label.len(),
            required: required.max(1),
            steps,
        });
    }
    Ok(())
}

/// Log-space forward variables `alpha[t][s]` (emission at `t` included).
fn forward(lp: &[f64], steps: usize, classes: usize, ext: &[usize]) -> Vec<f64> {
    let s_len = ext.len();
    let mut alpha = vec![f64::NEG_INFINITY; steps * s_len];
    alpha[0] = lp[ext[0]];
    if s_len > 1 {
        alpha[1] = lp[ext[1]];
    }
    for t in 1..steps {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        let row = &lp[t * classes..(t + 1) * classes];
        for s in 0..s_len {
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2] {
                acc = log_add(acc, prev[s - 2]);
            }
            cur[s] = if acc == f64::NEG_INFINITY {
                acc
            } else {
                acc + row[ext[s]]
            };
        }
    }
    alpha
}

/// Log-space backward variables `beta[t][s]` (emission at `t` excluded).
fn backward(lp: &[f64], steps: usize, classes: usize, ext: &[usize]) -> Vec<f64> {
    let s_len = ext.len();
    let mut beta = vec![f64::NEG_INFINITY; steps * s_len];
    let last = (steps - 1) * s_len;
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..steps - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        let row = &lp[(t + 1) * classes..(t + 2) * classes];
        for s in 0..s_len {
            let mut acc = next[s] + row[ext[s]];
            if s + 1 < s_len {
                acc = log_add(acc, next[s + 1] + row[ext[s + 1]]);
            }
            if s + 2 < s_len && ext[s + 2] != BLANK && ext[s + 2] != ext[s] {
                acc = log_add(acc, next[s + 2] + row[ext[s + 2]]);
            }
            cur[s] = acc;
        }
    }
    beta
}

/// Negative log-likelihood `-ln p(label | logprobs)` for a row-major
/// `[steps, classes]` log-probability matrix.
pub fn ctc_loss(logprobs: &[f64], steps: usize, classes: usize, label: &[usize]) -> Result<f64> {
    validate(logprobs, steps, classes, label)?;
    let ext = extend_label(label);
    let alpha = forward(logprobs, steps, classes, &ext);
    Ok(-final_log_prob(&alpha, steps, ext.len()))
}

fn final_log_prob(alpha: &[f64], steps: usize, s_len: usize) -> f64 {
    let last = &alpha[(steps - 1) * s_len..];
    if s_len > 1 {
        log_add(last[s_len - 1], last[s_len - 2])
    } else {
        last[0]
    }
}

/// Loss together with its gradient with respect to every log-probability.
pub fn ctc_loss_and_grad(
    logprobs: &[f64],
    steps: usize,
    classes: usize,
    label: &[usize],
) -> Result<(f64, Vec<f64>)> {
    validate(logprobs, steps, classes, label)?;
    let ext = extend_label(label);
    let s_len = ext.len();
    let alpha = forward(logprobs, steps, classes, &ext);
    let beta = backward(logprobs, steps, classes, &ext);
    let log_p = final_log_prob(&alpha, steps, s_len);
    if !log_p.is_finite() {
        return Err(Error::NonFinite { op: "ctc_loss" });
    }
    let mut grad = vec![0.0; steps * classes];
    let mut occupancy = vec![f64::NEG_INFINITY; classes];
    for t in 0..steps {
        occupancy.fill(f64::NEG_INFINITY);
        for s in 0..s_len {
            let v = alpha[t * s_len + s] + beta[t * s_len + s];
            occupancy[ext[s]] = log_add(occupancy[ext[s]], v);
        }
        for (k, &occ) in occupancy.iter().enumerate() {
            grad[t * classes + k] = -(occ - log_p).exp();
        }
    }
    Ok((-log_p, grad))
}

/// Per-step argmax (ties to the lowest id), repeats collapsed, blanks dropped.
pub fn greedy_decode(logprobs: &[f64], classes: usize) -> LabelSeq {
    let mut out = Vec::new();
    let mut last = BLANK;
    for row in logprobs.chunks_exact(classes) {
        let best = argmax(row);
        if best != last && best != BLANK {
            out.push(best);
        }
        last = best;
    }
    LabelSeq(out)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// A labeling returned by [`beam_decode`] with its beam log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub label: LabelSeq,
    pub log_prob: f64,
}

#[derive(Clone, Copy)]
struct PrefixScore {
    blank: f64,
    non_blank: f64,
}

impl PrefixScore {
    const EMPTY: PrefixScore = PrefixScore {
        blank: f64::NEG_INFINITY,
        non_blank: f64::NEG_INFINITY,
    };

    fn total(&self) -> f64 {
        log_add(self.blank, self.non_blank)
    }
}

fn rank(a: &(Vec<usize>, PrefixScore), b: &(Vec<usize>, PrefixScore)) -> Ordering {
    b.1.total()
        .partial_cmp(&a.1.total())
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.0.cmp(&b.0))
}

/// CTC prefix beam search. Each prefix carries the log mass of paths ending
/// in a blank and ending in its last symbol; at most `width` prefixes survive
/// each step (ties broken by lexicographic prefix order).
///
/// The candidate pool is the union of the final survivors of every width
/// `1..=width`, rescored exactly. A single pruned search is not monotone in
/// its width (a wider beam can prune the labeling a narrower one finds);
/// pooling the nested widths makes widening never lower the returned
/// probability, at `O(width^2)` cost, which is negligible next to the model.
pub fn beam_decode(logprobs: &[f64], classes: usize, width: usize) -> Result<Hypothesis> {
    if width < 1 {
        return Err(Error::invalid("beam_decode", "beam width must be at least 1"));
    }
    if classes == 0 || logprobs.len() % classes != 0 {
        return Err(Error::shape(
            "beam_decode",
            format!("{} values for {classes} classes", logprobs.len()),
        ));
    }
    let steps = logprobs.len() / classes;
    let mut pool = BTreeSet::new();
    for w in 1..=width {
        pool.extend(prefix_search(logprobs, classes, w));
    }
    let mut best: Option<Hypothesis> = None;
    // the pool iterates in lexicographic order, so strict > keeps the smallest on ties
    for prefix in pool {
        let lp = labeling_log_prob(logprobs, steps, classes, &prefix);
        if best.as_ref().is_none_or(|b| lp > b.log_prob) {
            best = Some(Hypothesis {
                label: LabelSeq(prefix),
                log_prob: lp,
            });
        }
    }
    Ok(best.expect("every search keeps at least one prefix"))
}

/// Surviving prefixes of one pruned search of the given width.
fn prefix_search(logprobs: &[f64], classes: usize, width: usize) -> Vec<Vec<usize>> {
    let mut beams: Vec<(Vec<usize>, PrefixScore)> = vec![(
        Vec::new(),
        PrefixScore {
            blank: 0.0,
            non_blank: f64::NEG_INFINITY,
        },
    )];
    for row in logprobs.chunks_exact(classes) {
        let mut next: BTreeMap<Vec<usize>, PrefixScore> = BTreeMap::new();
        for (prefix, score) in &beams {
            let total = score.total();
            let entry = next.entry(prefix.clone()).or_insert(PrefixScore::EMPTY);
            entry.blank = log_add(entry.blank, total + row[BLANK]);
            let last = prefix.last().copied();
            if let Some(l) = last {
                entry.non_blank = log_add(entry.non_blank, score.non_blank + row[l]);
            }
            for (k, &lp) in row.iter().enumerate().skip(1) {
                let mut extended = prefix.clone();
                extended.push(k);
                let entry = next.entry(extended).or_insert(PrefixScore::EMPTY);
                let from = if last == Some(k) { score.blank } else { total };
                entry.non_blank = log_add(entry.non_blank, from + lp);
            }
        }
        let mut ranked: Vec<_> = next.into_iter().collect();
        ranked.sort_by(rank);
        ranked.truncate(width);
        beams = ranked;
    }
    beams.into_iter().map(|(p, _)| p).collect()
}

/// Exact `ln p(label | logprobs)`, `-inf` when the label cannot be aligned.
pub fn labeling_log_prob(logprobs: &[f64], steps: usize, classes: usize, label: &[usize]) -> f64 {
    ctc_loss(logprobs, steps, classes, label).map_or(f64::NEG_INFINITY, |l| -l)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(steps: usize, classes: usize) -> Vec<f64> {
        vec![-(classes as f64).ln(); steps * classes]
    }

    #[test]
    fn single_step_single_symbol() {
        let lp = [0.3f64.ln(), 0.7f64.ln()];
        let loss = ctc_loss(&lp, 1, 2, &[1]).unwrap();
        assert!((loss - -(0.7f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn two_uniform_steps_have_three_paths() {
        // paths aa, _a, a_ each with probability 1/4
        let loss = ctc_loss(&uniform(2, 2), 2, 2, &[1]).unwrap();
        assert!((loss - -(0.75f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn empty_label_is_sum_of_blank_logprobs() {
        let lp = [-0.1, -2.0, -0.7, -0.9, -1.5, -0.3];
        let loss = ctc_loss(&lp, 3, 2, &[]).unwrap();
        assert_eq!(loss, -(lp[0] + lp[2] + lp[4]));
    }

    #[test]
    fn infeasible_label_is_an_error() {
        let err = ctc_loss(&uniform(2, 3), 2, 3, &[1, 1]).unwrap_err();
        assert!(matches!(
            err,
            Error::InfeasibleLabel {
                required: 3,
                steps: 2,
                ..
            }
        ));
        assert!(ctc_loss(&uniform(3, 3), 3, 3, &[1, 1]).is_ok());
        assert!(ctc_loss(&uniform(3, 3), 3, 3, &[3]).is_err());
    }

    #[test]
    fn greedy_collapse_rules() {
        let onehot = |ids: &[usize]| -> Vec<f64> {
            ids.iter()
                .flat_map(|&id| (0..3).map(move |k| if k == id { 0.0 } else { -5.0 }))
                .collect()
        };
        assert!(greedy_decode(&onehot(&[0, 0, 0]), 3).is_empty());
        assert_eq!(&*greedy_decode(&onehot(&[1, 1, 0, 2]), 3), &[1, 2]);
        assert_eq!(&*greedy_decode(&onehot(&[1, 0, 1]), 3), &[1, 1]);
        // tie between blank and 1 resolves to blank
        assert!(greedy_decode(&[-0.5, -0.5, -3.0], 3).is_empty());
    }

    #[test]
    fn beam_rejects_zero_width() {
        assert!(beam_decode(&uniform(2, 2), 2, 0).is_err());
    }

    #[test]
    fn label_seq_validates_ids() {
        assert!(LabelSeq::new(vec![1, 10], 10).is_ok());
        assert!(LabelSeq::new(vec![0], 10).is_err());
        assert!(LabelSeq::new(vec![11], 10).is_err());
        assert_eq!(LabelSeq::new(vec![2, 2, 3], 5).unwrap().min_steps(), 4);
    }
}
