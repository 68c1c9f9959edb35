//! Transducer lattice losses.
//!
//! A transducer scores a `T x (U+1)` grid: cell `(t, u)` holds a distribution
//! over the vocabulary given encoder frame `t` and `u` emitted tokens. A blank
//! moves `(t, u) -> (t+1, u)`, the target token `y[u]` moves `(t, u) -> (t, u+1)`,
//! and the blank out of `(T-1, U)` terminates the path.
//!
//! Everything here works on a precomputed [`LogitLattice`]. Normalizing it
//! yields a [`LogProbLattice`], which all losses, gradients and alignments
//! consume. Scores are `f64` and every sum over paths is done in log space.

mod align;
mod loss;
mod oracle;

pub use align::{viterbi_align, AlignStep, AlignmentPath, BandMask};
pub use loss::{
    forward_backward, restricted_forward_backward, restricted_grad, restricted_loss,
    restricted_loss_and_grad, rnnt_backward, rnnt_forward, rnnt_grad, rnnt_loss_and_grad,
    rnnt_loss_full, Forward, ForwardBackwardGrids, Grid,
};
pub use oracle::{
    brute_force_best_path, brute_force_loss, count_paths, for_each_path, DEFAULT_PATH_LIMIT,
};

use crate::error::{Error, Result};

/// `log(exp(a) + exp(b))` without overflow.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Log-sum-exp of a slice with max subtraction.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// In-place log-softmax of one row.
pub fn log_softmax_in_place(row: &mut [f64]) {
    let lse = log_sum_exp(row);
    for x in row.iter_mut() {
        *x -= lse;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Dims {
    pub t_len: usize,
    pub u_len: usize,
    pub vocab: usize,
    pub blank_id: usize,
}

impl Dims {
    #[inline]
    pub fn cell(&self, t: usize, u: usize) -> usize {
        t * (self.u_len + 1) + u
    }

    #[inline]
    pub fn offset(&self, t: usize, u: usize) -> usize {
        self.cell(t, u) * self.vocab
    }

    pub fn cells(&self) -> usize {
        self.t_len * (self.u_len + 1)
    }
}

fn validate(
    len: usize,
    t_len: usize,
    targets: &[usize],
    vocab: usize,
    blank_id: usize,
) -> Result<Dims> {
    if t_len == 0 {
        return Err(Error::LatticeShape("T must be at least 1".into()));
    }
    if vocab < 2 {
        return Err(Error::LatticeShape(format!("vocab {vocab} < 2")));
    }
    if blank_id >= vocab {
        return Err(Error::LatticeShape(format!(
            "blank id {blank_id} outside vocab {vocab}"
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&y| y >= vocab || y == blank_id) {
        return Err(Error::LatticeShape(format!(
            "target token {bad} is blank or outside vocab {vocab}"
        )));
    }
    let dims = Dims {
        t_len,
        u_len: targets.len(),
        vocab,
        blank_id,
    };
    if len != dims.cells() * vocab {
        return Err(Error::LatticeShape(format!(
            "expected {} scores for T={t_len} U={} V={vocab}, got {len}",
            dims.cells() * vocab,
            targets.len()
        )));
    }
    Ok(dims)
}

/// Raw joiner scores over the decoding grid, laid out `[T][U+1][V]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitLattice {
    scores: Vec<f64>,
    targets: Vec<usize>,
    dims: Dims,
}

impl LogitLattice {
    pub fn new(
        scores: Vec<f64>,
        t_len: usize,
        targets: Vec<usize>,
        vocab: usize,
        blank_id: usize,
    ) -> Result<Self> {
        let dims = validate(scores.len(), t_len, &targets, vocab, blank_id)?;
        Ok(LogitLattice {
            scores,
            targets,
            dims,
        })
    }

    /// All-zero scores, i.e. uniform cell distributions after normalizing.
    pub fn uniform(
        t_len: usize,
        targets: Vec<usize>,
        vocab: usize,
        blank_id: usize,
    ) -> Result<Self> {
        let n = t_len * (targets.len() + 1) * vocab;
        Self::new(vec![0.0; n], t_len, targets, vocab, blank_id)
    }

    pub fn t_len(&self) -> usize {
        self.dims.t_len
    }

    pub fn u_len(&self) -> usize {
        self.dims.u_len
    }

    pub fn vocab(&self) -> usize {
        self.dims.vocab
    }

    pub fn blank_id(&self) -> usize {
        self.dims.blank_id
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn scores_mut(&mut self) -> &mut [f64] {
        &mut self.scores
    }

    pub fn row(&self, t: usize, u: usize) -> &[f64] {
        let o = self.dims.offset(t, u);
        &self.scores[o..o + self.dims.vocab]
    }

    /// Per-cell log-softmax. Rejects non-finite scores.
    pub fn normalize(&self) -> Result<LogProbLattice> {
        if self.scores.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("lattice scores"));
        }
        let mut logp = self.scores.clone();
        for row in logp.chunks_exact_mut(self.dims.vocab) {
            log_softmax_in_place(row);
        }
        Ok(LogProbLattice {
            logp,
            targets: self.targets.clone(),
            dims: self.dims,
        })
    }
}

/// A lattice whose cells hold log-probabilities (each row log-sums to zero).
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbLattice {
    logp: Vec<f64>,
    targets: Vec<usize>,
    dims: Dims,
}

impl LogProbLattice {
    pub fn t_len(&self) -> usize {
        self.dims.t_len
    }

    pub fn u_len(&self) -> usize {
        self.dims.u_len
    }

    pub fn vocab(&self) -> usize {
        self.dims.vocab
    }

    pub fn blank_id(&self) -> usize {
        self.dims.blank_id
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.logp
    }

    pub(crate) fn dims(&self) -> Dims {
        self.dims
    }

    pub fn row(&self, t: usize, u: usize) -> &[f64] {
        let o = self.dims.offset(t, u);
        &self.logp[o..o + self.dims.vocab]
    }

    #[inline]
    pub fn blank(&self, t: usize, u: usize) -> f64 {
        self.logp[self.dims.offset(t, u) + self.dims.blank_id]
    }

    /// Log-probability of emitting `targets[u]` from cell `(t, u)`; requires `u < U`.
    #[inline]
    pub fn emit(&self, t: usize, u: usize) -> f64 {
        self.logp[self.dims.offset(t, u) + self.targets[u]]
    }
}
