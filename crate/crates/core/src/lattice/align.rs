//! Monotone alignment paths, Viterbi forced alignment, and alignment bands.

use super::LogProbLattice;
use crate::error::{Error, Result};

/// One transition of an alignment: leave cell `(t, u)` by emitting `label`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlignStep {
    pub t: usize,
    pub u: usize,
    pub label: usize,
}

/// A monotone route through the lattice with `T` blanks and `U` emissions.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentPath {
    pub steps: Vec<AlignStep>,
    /// Sum of step log-probabilities under the lattice that produced the
    /// path. Paths built from emission frames alone carry `0.0`.
    pub log_prob: f64,
}

impl AlignmentPath {
    /// Builds the path that emits `targets[u]` at frame `frames[u]`.
    /// Frames must be non-decreasing and below `t_len`.
    pub fn from_emit_frames(
        targets: &[usize],
        frames: &[usize],
        t_len: usize,
        blank_id: usize,
    ) -> Result<Self> {
        if targets.len() != frames.len() {
            return Err(Error::PathMismatch(format!(
                "{} targets but {} emission frames",
                targets.len(),
                frames.len()
            )));
        }
        if t_len == 0 {
            return Err(Error::PathMismatch("T must be at least 1".into()));
        }
        if frames.windows(2).any(|w| w[0] > w[1]) || frames.iter().any(|&f| f >= t_len) {
            return Err(Error::PathMismatch(format!(
                "emission frames {frames:?} not monotone within T={t_len}"
            )));
        }
        let mut steps = Vec::with_capacity(t_len + targets.len());
        let mut u = 0;
        for t in 0..t_len {
            while u < targets.len() && frames[u] == t {
                steps.push(AlignStep {
                    t,
                    u,
                    label: targets[u],
                });
                u += 1;
            }
            steps.push(AlignStep {
                t,
                u,
                label: blank_id,
            });
        }
        Ok(AlignmentPath {
            steps,
            log_prob: 0.0,
        })
    }

    /// Whether step `i` is an emission, judged by where the next step starts.
    fn is_emit(&self, i: usize) -> bool {
        let s = &self.steps[i];
        matches!(self.steps.get(i + 1), Some(n) if n.u == s.u + 1 && n.t == s.t)
    }

    /// Number of blank steps, which equals the frame count of a valid path.
    pub fn frames(&self) -> usize {
        (0..self.steps.len()).filter(|&i| !self.is_emit(i)).count()
    }

    /// Frame at which each token is emitted, in order.
    pub fn emit_frames(&self) -> Vec<usize> {
        (0..self.steps.len())
            .filter(|&i| self.is_emit(i))
            .map(|i| self.steps[i].t)
            .collect()
    }

    /// Labels of the emission steps, in order.
    pub fn tokens(&self) -> Vec<usize> {
        (0..self.steps.len())
            .filter(|&i| self.is_emit(i))
            .map(|i| self.steps[i].label)
            .collect()
    }

    /// Checks the path is a complete monotone alignment of `targets` over
    /// `t_len` frames.
    pub fn validate(&self, t_len: usize, targets: &[usize], blank_id: usize) -> Result<()> {
        let fail = |msg: String| Err(Error::PathMismatch(msg));
        if self.steps.len() != t_len + targets.len() {
            return fail(format!(
                "path has {} steps, expected T+U = {}",
                self.steps.len(),
                t_len + targets.len()
            ));
        }
        let (mut t, mut u) = (0usize, 0usize);
        for (i, s) in self.steps.iter().enumerate() {
            if s.t != t || s.u != u {
                return fail(format!(
                    "step {i} at ({}, {}) but path is at ({t}, {u})",
                    s.t, s.u
                ));
            }
            if s.label == blank_id {
                t += 1;
            } else if u < targets.len() && s.label == targets[u] {
                u += 1;
            } else {
                return fail(format!(
                    "step {i} label {} is neither blank nor y[{u}]",
                    s.label
                ));
            }
        }
        if t != t_len || u != targets.len() {
            return fail(format!("path ends at ({t}, {u})"));
        }
        Ok(())
    }

    /// Sum of the step log-probabilities under `lattice`, accumulated from
    /// the first step.
    pub fn score(&self, lattice: &LogProbLattice) -> Result<f64> {
        self.validate(lattice.t_len(), lattice.targets(), lattice.blank_id())?;
        Ok(self
            .steps
            .iter()
            .fold(0.0, |acc, s| acc + lattice.row(s.t, s.u)[s.label]))
    }

    /// Maps emission frames onto a resampled time axis of `new_t_len`
    /// frames, where output frame `i` reads input frame `floor(i * rate)`.
    pub fn resample(&self, rate: f64, new_t_len: usize, blank_id: usize) -> Result<Self> {
        let frames: Vec<usize> = self
            .emit_frames()
            .into_iter()
            .map(|f| ((f as f64 / rate).round() as usize).min(new_t_len.saturating_sub(1)))
            .collect();
        Self::from_emit_frames(&self.tokens(), &frames, new_t_len, blank_id)
    }
}

/// Maximum-probability monotone path through the lattice.
///
/// Ties between a blank move and an emit move out of the same cell go to the
/// blank, so among equally likely paths the one that emits latest is chosen.
pub fn viterbi_align(lattice: &LogProbLattice) -> AlignmentPath {
    let d = lattice.dims();
    let (t_len, u_len) = (d.t_len, d.u_len);
    // best[t][u]: best log-prob from (t, u) to termination.
    let mut best = vec![f64::NEG_INFINITY; d.cells()];
    for t in (0..t_len).rev() {
        for u in (0..=u_len).rev() {
            let via_blank = if t + 1 < t_len {
                lattice.blank(t, u) + best[d.cell(t + 1, u)]
            } else if u == u_len {
                lattice.blank(t, u)
            } else {
                f64::NEG_INFINITY
            };
            let via_emit = if u < u_len {
                lattice.emit(t, u) + best[d.cell(t, u + 1)]
            } else {
                f64::NEG_INFINITY
            };
            best[d.cell(t, u)] = via_blank.max(via_emit);
        }
    }

    let mut steps = Vec::with_capacity(t_len + u_len);
    let (mut t, mut u) = (0, 0);
    loop {
        let via_blank = if t + 1 < t_len {
            lattice.blank(t, u) + best[d.cell(t + 1, u)]
        } else if u == u_len {
            lattice.blank(t, u)
        } else {
            f64::NEG_INFINITY
        };
        let via_emit = if u < u_len {
            lattice.emit(t, u) + best[d.cell(t, u + 1)]
        } else {
            f64::NEG_INFINITY
        };
        if via_blank >= via_emit {
            steps.push(AlignStep {
                t,
                u,
                label: d.blank_id,
            });
            if t + 1 == t_len {
                break;
            }
            t += 1;
        } else {
            steps.push(AlignStep {
                t,
                u,
                label: lattice.targets()[u],
            });
            u += 1;
        }
    }
    let log_prob = steps
        .iter()
        .fold(0.0, |acc, s| acc + lattice.row(s.t, s.u)[s.label]);
    AlignmentPath { steps, log_prob }
}

/// Cells of the grid that restricted losses may visit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BandMask {
    valid: Vec<bool>,
    t_len: usize,
    u_len: usize,
    pub b_left: usize,
    pub b_right: usize,
}

impl BandMask {
    /// Every cell valid.
    pub fn full(t_len: usize, u_len: usize) -> Self {
        BandMask {
            valid: vec![true; t_len * (u_len + 1)],
            t_len,
            u_len,
            b_left: t_len.max(u_len),
            b_right: t_len.max(u_len),
        }
    }

    /// Mask from an explicit `[T][U+1]` validity grid, rejecting grids whose
    /// valid cells do not connect `(0, 0)` to `(T-1, U)`.
    pub fn from_cells(valid: Vec<bool>, t_len: usize, u_len: usize) -> Result<Self> {
        if t_len == 0 || valid.len() != t_len * (u_len + 1) {
            return Err(Error::PathMismatch(format!(
                "mask has {} cells, expected {}",
                valid.len(),
                t_len * (u_len + 1)
            )));
        }
        let mask = BandMask {
            valid,
            t_len,
            u_len,
            b_left: 0,
            b_right: 0,
        };
        if !mask.is_connected() {
            return Err(Error::DisconnectedMask);
        }
        Ok(mask)
    }

    /// Band of half-widths `(b_left, b_right)` frames around the emission
    /// frames of `path`.
    ///
    /// Token `u` may only be emitted at frames `[a_u - b_left, a_u + b_right]`
    /// where `a_u` is its frame on `path`; blanks are unrestricted. A cell is
    /// valid when it lies on some start-to-end route obeying those windows.
    pub fn around(
        path: &AlignmentPath,
        b_left: usize,
        b_right: usize,
        t_len: usize,
        u_len: usize,
    ) -> Result<Self> {
        if t_len == 0 {
            return Err(Error::PathMismatch("T must be at least 1".into()));
        }
        if path.steps.len() != t_len + u_len {
            return Err(Error::PathMismatch(format!(
                "path with {} steps over a T={t_len}, U={u_len} grid",
                path.steps.len()
            )));
        }
        let frames = path.emit_frames();
        if frames.len() != u_len || path.frames() != t_len {
            return Err(Error::PathMismatch(format!(
                "path emits {} tokens over {} frames, grid is T={t_len}, U={u_len}",
                frames.len(),
                path.frames()
            )));
        }
        let window = |u: usize, t: usize| {
            let a = frames[u];
            t + b_left >= a && t <= a + b_right
        };
        let cols = u_len + 1;
        let mut fwd = vec![false; t_len * cols];
        fwd[0] = true;
        for t in 0..t_len {
            for u in 0..=u_len {
                if t == 0 && u == 0 {
                    continue;
                }
                let from_blank = t > 0 && fwd[(t - 1) * cols + u];
                let from_emit = u > 0 && fwd[t * cols + u - 1] && window(u - 1, t);
                fwd[t * cols + u] = from_blank || from_emit;
            }
        }
        let mut bwd = vec![false; t_len * cols];
        bwd[t_len * cols - 1] = true;
        for t in (0..t_len).rev() {
            for u in (0..=u_len).rev() {
                if t == t_len - 1 && u == u_len {
                    continue;
                }
                let to_blank = t + 1 < t_len && bwd[(t + 1) * cols + u];
                let to_emit = u < u_len && bwd[t * cols + u + 1] && window(u, t);
                bwd[t * cols + u] = to_blank || to_emit;
            }
        }
        let mut valid: Vec<bool> = fwd.iter().zip(&bwd).map(|(&a, &b)| a && b).collect();
        valid[0] = true;
        valid[t_len * cols - 1] = true;
        Ok(BandMask {
            valid,
            t_len,
            u_len,
            b_left,
            b_right,
        })
    }

    pub fn t_len(&self) -> usize {
        self.t_len
    }

    pub fn u_len(&self) -> usize {
        self.u_len
    }

    #[inline]
    pub fn is_valid(&self, t: usize, u: usize) -> bool {
        self.valid[t * (self.u_len + 1) + u]
    }

    pub fn cells(&self) -> &[bool] {
        &self.valid
    }

    /// Number of cells the restricted forward-backward visits.
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Whether `(T-1, U)` is reachable from `(0, 0)` through valid cells.
    pub fn is_connected(&self) -> bool {
        let cols = self.u_len + 1;
        if !self.valid[0] {
            return false;
        }
        let mut reach = vec![false; self.valid.len()];
        for t in 0..self.t_len {
            for u in 0..=self.u_len {
                let i = t * cols + u;
                if !self.valid[i] {
                    continue;
                }
                reach[i] =
                    (t == 0 && u == 0) || (t > 0 && reach[i - cols]) || (u > 0 && reach[i - 1]);
            }
        }
        reach[self.valid.len() - 1]
    }
}
