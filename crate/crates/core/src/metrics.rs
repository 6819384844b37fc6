//! Word error rate with insertion / deletion / substitution accounting.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WerBreakdown {
    pub ins: usize,
    pub del: usize,
    pub sub: usize,
    /// Reference length.
    pub sum: usize,
    /// `100 * (ins + del + sub) / sum`.
    pub wer: f64,
}

impl WerBreakdown {
    pub fn edits(&self) -> usize {
        self.ins + self.del + self.sub
    }

    fn from_counts(ins: usize, del: usize, sub: usize, sum: usize) -> Self {
        WerBreakdown {
            ins,
            del,
            sub,
            sum,
            wer: 100.0 * (ins + del + sub) as f64 / sum as f64,
        }
    }
}

/// Plain Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = (diag + usize::from(x != y)).min(up + 1).min(row[j] + 1);
            diag = up;
        }
    }
    row[b.len()]
}

/// Minimal edit alignment of `hyp` onto `reference`. Among equally cheap
/// alignments the backtrace prefers a match or substitution, then a deletion,
/// then an insertion, so the split of the total is deterministic.
pub fn wer<T: PartialEq>(reference: &[T], hyp: &[T]) -> Result<WerBreakdown> {
    if reference.is_empty() {
        return Err(Error::invalid("wer", "reference must not be empty"));
    }
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut cost = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        cost[i * w] = i;
    }
    for j in 0..=m {
        cost[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = cost[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let del = cost[(i - 1) * w + j] + 1;
            let ins = cost[i * w + j - 1] + 1;
            cost[i * w + j] = diag.min(del).min(ins);
        }
    }
    let (mut i, mut j) = (n, m);
    let (mut ins, mut del, mut sub) = (0, 0, 0);
    while i > 0 || j > 0 {
        let here = cost[i * w + j];
        if i > 0 && j > 0 {
            let mismatch = usize::from(reference[i - 1] != hyp[j - 1]);
            if here == cost[(i - 1) * w + j - 1] + mismatch {
                sub += mismatch;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == cost[(i - 1) * w + j] + 1 {
            del += 1;
            i -= 1;
        } else {
            ins += 1;
            j -= 1;
        }
    }
    Ok(WerBreakdown::from_counts(ins, del, sub, n))
}

/// Pooled WER over a corpus: summed edit counts over summed reference length.
pub fn corpus_wer<T: PartialEq>(pairs: &[(&[T], &[T])]) -> Result<WerBreakdown> {
    if pairs.is_empty() {
        return Err(Error::invalid("corpus_wer", "empty corpus"));
    }
    let parts = pairs
        .iter()
        .map(|(r, h)| wer(r, h))
        .collect::<Result<Vec<_>>>()?;
    Ok(pool(&parts))
}

/// Pools per-sentence breakdowns (each must have a non-empty reference).
pub fn pool(parts: &[WerBreakdown]) -> WerBreakdown {
    let (mut ins, mut del, mut sub, mut sum) = (0, 0, 0, 0);
    for p in parts {
        ins += p.ins;
        del += p.del;
        sub += p.sub;
        sum += p.sum;
    }
    WerBreakdown::from_counts(ins, del, sub, sum.max(1))
}
