//! Forward-backward over the full grid or a band of it.
//!
//! The full-sum loss and the band-restricted loss share one kernel; the full
//! loss is the restricted one with every cell valid. Cell distributions are
//! always the full-vocabulary softmax; the band only removes paths.

use super::{log_add, BandMask, Dims, LogProbLattice};
use crate::error::{Error, Result};

/// A `[T][U+1]` grid of log-space values.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    data: Vec<f64>,
    cols: usize,
}

impl Grid {
    fn new(t_len: usize, u_len: usize) -> Self {
        Grid {
            data: vec![f64::NEG_INFINITY; t_len * (u_len + 1)],
            cols: u_len + 1,
        }
    }

    #[inline]
    pub fn get(&self, t: usize, u: usize) -> f64 {
        self.data[t * self.cols + u]
    }

    #[inline]
    fn set(&mut self, t: usize, u: usize, v: f64) {
        self.data[t * self.cols + u] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardBackwardGrids {
    pub log_alpha: Grid,
    pub log_beta: Grid,
    pub total_log_prob: f64,
}

/// Forward half of the result, also used on its own by [`rnnt_forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub log_alpha: Grid,
    pub total_log_prob: f64,
}

#[inline]
fn allowed(mask: Option<&BandMask>, t: usize, u: usize) -> bool {
    mask.is_none_or(|m| m.is_valid(t, u))
}

fn check_mask(lattice: &LogProbLattice, mask: &BandMask) -> Result<()> {
    if mask.t_len() != lattice.t_len() || mask.u_len() != lattice.u_len() {
        return Err(Error::PathMismatch(format!(
            "mask is {}x{}, lattice is {}x{}",
            mask.t_len(),
            mask.u_len() + 1,
            lattice.t_len(),
            lattice.u_len() + 1
        )));
    }
    if !mask.is_connected() {
        return Err(Error::DisconnectedMask);
    }
    Ok(())
}

fn alpha(lattice: &LogProbLattice, mask: Option<&BandMask>) -> Forward {
    let Dims { t_len, u_len, .. } = lattice.dims();
    let mut a = Grid::new(t_len, u_len);
    for t in 0..t_len {
        for u in 0..=u_len {
            if !allowed(mask, t, u) {
                continue;
            }
            if t == 0 && u == 0 {
                a.set(0, 0, 0.0);
                continue;
            }
            let mut acc = f64::NEG_INFINITY;
            if t > 0 && allowed(mask, t - 1, u) {
                acc = log_add(acc, a.get(t - 1, u) + lattice.blank(t - 1, u));
            }
            if u > 0 && allowed(mask, t, u - 1) {
                acc = log_add(acc, a.get(t, u - 1) + lattice.emit(t, u - 1));
            }
            a.set(t, u, acc);
        }
    }
    let total_log_prob = a.get(t_len - 1, u_len) + lattice.blank(t_len - 1, u_len);
    Forward {
        log_alpha: a,
        total_log_prob,
    }
}

fn beta(lattice: &LogProbLattice, mask: Option<&BandMask>) -> Grid {
    let Dims { t_len, u_len, .. } = lattice.dims();
    let mut b = Grid::new(t_len, u_len);
    for t in (0..t_len).rev() {
        for u in (0..=u_len).rev() {
            if !allowed(mask, t, u) {
                continue;
            }
            if t == t_len - 1 && u == u_len {
                b.set(t, u, lattice.blank(t, u));
                continue;
            }
            let mut acc = f64::NEG_INFINITY;
            if t + 1 < t_len && allowed(mask, t + 1, u) {
                acc = log_add(acc, b.get(t + 1, u) + lattice.blank(t, u));
            }
            if u < u_len && allowed(mask, t, u + 1) {
                acc = log_add(acc, b.get(t, u + 1) + lattice.emit(t, u));
            }
            b.set(t, u, acc);
        }
    }
    b
}

/// Gradient of `-log P` with respect to the raw logits that produced
/// `lattice`, given both grids.
///
/// For each cell, `d/dz_k = p_k * occ(cell) - occ(k)`, where `occ(k)` is the
/// posterior mass of the transition labelled `k` leaving the cell.
fn grad_from_grids(
    lattice: &LogProbLattice,
    mask: Option<&BandMask>,
    fb: &ForwardBackwardGrids,
) -> Vec<f64> {
    let d = lattice.dims();
    let mut grad = vec![0.0; lattice.log_probs().len()];
    let total = fb.total_log_prob;
    for t in 0..d.t_len {
        for u in 0..=d.u_len {
            if !allowed(mask, t, u) {
                continue;
            }
            let a = fb.log_alpha.get(t, u);
            if a == f64::NEG_INFINITY {
                continue;
            }
            let occ_blank = if t + 1 < d.t_len {
                if allowed(mask, t + 1, u) {
                    (a + lattice.blank(t, u) + fb.log_beta.get(t + 1, u) - total).exp()
                } else {
                    0.0
                }
            } else if u == d.u_len {
                (a + lattice.blank(t, u) - total).exp()
            } else {
                0.0
            };
            let occ_emit = if u < d.u_len && allowed(mask, t, u + 1) {
                (a + lattice.emit(t, u) + fb.log_beta.get(t, u + 1) - total).exp()
            } else {
                0.0
            };
            let occ = occ_blank + occ_emit;
            if occ == 0.0 {
                continue;
            }
            let o = d.offset(t, u);
            let row = lattice.row(t, u);
            let out = &mut grad[o..o + d.vocab];
            for (g, &lp) in out.iter_mut().zip(row) {
                *g = lp.exp() * occ;
            }
            out[d.blank_id] -= occ_blank;
            if u < d.u_len {
                out[lattice.targets()[u]] -= occ_emit;
            }
        }
    }
    grad
}

fn grids(lattice: &LogProbLattice, mask: Option<&BandMask>) -> ForwardBackwardGrids {
    let fwd = alpha(lattice, mask);
    ForwardBackwardGrids {
        log_alpha: fwd.log_alpha,
        log_beta: beta(lattice, mask),
        total_log_prob: fwd.total_log_prob,
    }
}

/// Forward variables: `log_alpha[t][u]` sums every partial path from `(0, 0)`
/// to `(t, u)`.
pub fn rnnt_forward(lattice: &LogProbLattice) -> Forward {
    alpha(lattice, None)
}

/// Backward variables: `log_beta[t][u]` sums every path from `(t, u)` through
/// the terminating blank.
pub fn rnnt_backward(lattice: &LogProbLattice) -> Grid {
    beta(lattice, None)
}

pub fn forward_backward(lattice: &LogProbLattice) -> ForwardBackwardGrids {
    grids(lattice, None)
}

pub fn restricted_forward_backward(
    lattice: &LogProbLattice,
    mask: &BandMask,
) -> Result<ForwardBackwardGrids> {
    check_mask(lattice, mask)?;
    Ok(grids(lattice, Some(mask)))
}

/// Negative log-likelihood summed over all alignments.
pub fn rnnt_loss_full(lattice: &LogProbLattice) -> f64 {
    nll(alpha(lattice, None).total_log_prob)
}

// Rounding can push a near-certain total marginally above zero.
#[inline]
fn nll(total_log_prob: f64) -> f64 {
    (-total_log_prob).max(0.0)
}

/// Gradient of [`rnnt_loss_full`] with respect to the raw logits, `[T][U+1][V]`.
pub fn rnnt_grad(lattice: &LogProbLattice) -> Vec<f64> {
    grad_from_grids(lattice, None, &grids(lattice, None))
}

pub fn rnnt_loss_and_grad(lattice: &LogProbLattice) -> (f64, Vec<f64>) {
    let fb = grids(lattice, None);
    (nll(fb.total_log_prob), grad_from_grids(lattice, None, &fb))
}

/// Negative log of the probability mass on paths that stay inside `mask`.
pub fn restricted_loss(lattice: &LogProbLattice, mask: &BandMask) -> Result<f64> {
    check_mask(lattice, mask)?;
    Ok(nll(alpha(lattice, Some(mask)).total_log_prob))
}

/// Gradient of [`restricted_loss`]; rows of cells outside the mask are zero.
pub fn restricted_grad(lattice: &LogProbLattice, mask: &BandMask) -> Result<Vec<f64>> {
    restricted_loss_and_grad(lattice, mask).map(|(_, g)| g)
}

pub fn restricted_loss_and_grad(
    lattice: &LogProbLattice,
    mask: &BandMask,
) -> Result<(f64, Vec<f64>)> {
    let fb = restricted_forward_backward(lattice, mask)?;
    Ok((
        nll(fb.total_log_prob),
        grad_from_grids(lattice, Some(mask), &fb),
    ))
}
