//! Exhaustive path enumeration, used as an independent check on the
//! dynamic programs.

use super::{log_sum_exp, AlignStep, AlignmentPath, LogProbLattice};
use crate::error::{Error, Result};

pub const DEFAULT_PATH_LIMIT: u128 = 10_000;

/// `C(T-1+U, U)`: the number of monotone alignments of a `T x (U+1)` grid
/// (the final blank out of `(T-1, U)` is forced).
pub fn count_paths(t_len: usize, u_len: usize) -> u128 {
    let n = (t_len - 1 + u_len) as u128;
    let k = u_len.min(t_len - 1) as u128;
    (0..k).fold(1u128, |acc, i| acc * (n - i) / (i + 1))
}

/// Calls `visit` with the steps of every alignment, in lexicographic order
/// with blank moves before emit moves.
pub fn for_each_path(
    lattice: &LogProbLattice,
    limit: u128,
    mut visit: impl FnMut(&[AlignStep]),
) -> Result<()> {
    let paths = count_paths(lattice.t_len(), lattice.u_len());
    if paths > limit {
        return Err(Error::TooManyPaths { paths, limit });
    }
    let mut steps = Vec::with_capacity(lattice.t_len() + lattice.u_len());
    walk(lattice, 0, 0, &mut steps, &mut visit);
    Ok(())
}

fn walk(
    lattice: &LogProbLattice,
    t: usize,
    u: usize,
    steps: &mut Vec<AlignStep>,
    visit: &mut impl FnMut(&[AlignStep]),
) {
    let (t_len, u_len) = (lattice.t_len(), lattice.u_len());
    let blank = lattice.blank_id();
    if t == t_len - 1 && u == u_len {
        steps.push(AlignStep { t, u, label: blank });
        visit(steps);
        steps.pop();
        return;
    }
    if t + 1 < t_len {
        steps.push(AlignStep { t, u, label: blank });
        walk(lattice, t + 1, u, steps, visit);
        steps.pop();
    }
    if u < u_len {
        steps.push(AlignStep {
            t,
            u,
            label: lattice.targets()[u],
        });
        walk(lattice, t, u + 1, steps, visit);
        steps.pop();
    }
}

fn path_log_prob(lattice: &LogProbLattice, steps: &[AlignStep]) -> f64 {
    steps
        .iter()
        .fold(0.0, |acc, s| acc + lattice.row(s.t, s.u)[s.label])
}

/// `-log` of the summed probability of every enumerated alignment.
pub fn brute_force_loss(lattice: &LogProbLattice, limit: u128) -> Result<f64> {
    let mut scores = Vec::new();
    for_each_path(lattice, limit, |steps| {
        scores.push(path_log_prob(lattice, steps))
    })?;
    Ok(-log_sum_exp(&scores))
}

/// The highest-scoring enumerated alignment and its log-probability.
/// On exact ties the first path in enumeration order wins.
pub fn brute_force_best_path(
    lattice: &LogProbLattice,
    limit: u128,
) -> Result<(f64, AlignmentPath)> {
    let mut best: Option<(f64, Vec<AlignStep>)> = None;
    for_each_path(lattice, limit, |steps| {
        let lp = path_log_prob(lattice, steps);
        if best.as_ref().is_none_or(|(b, _)| lp > *b) {
            best = Some((lp, steps.to_vec()));
        }
    })?;
    let (log_prob, steps) = best.expect("every lattice has at least one path");
    Ok((log_prob, AlignmentPath { steps, log_prob }))
}
