//! Numerical self-checks: losses and alignments against exhaustive
//! enumeration, and analytic gradients against central differences.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::lattice::{
    brute_force_best_path, brute_force_loss, restricted_grad, restricted_loss, rnnt_forward,
    rnnt_grad, rnnt_loss_full, viterbi_align, AlignmentPath, BandMask, LogitLattice,
    DEFAULT_PATH_LIMIT,
};
use crate::model::{model_backward, model_forward, Features, ModelConfig, ParameterSet};
use crate::rng::SeedPath;

pub const FD_STEP: f64 = 1e-5;

/// Random raw scores with `T <= max_t`, `U <= max_u`, `2 <= V <= max_v`.
pub fn random_lattice(
    rng: &mut ChaCha8Rng,
    max_t: usize,
    max_u: usize,
    max_v: usize,
) -> LogitLattice {
    let t = rng.random_range(1..=max_t);
    let u = rng.random_range(0..=max_u);
    let v = rng.random_range(2..=max_v);
    let targets: Vec<usize> = (0..u).map(|_| rng.random_range(1..v)).collect();
    let scores = (0..t * (u + 1) * v)
        .map(|_| rng.random_range(-3.0..3.0))
        .collect();
    LogitLattice::new(scores, t, targets, v, 0).expect("shape is consistent")
}

/// A uniformly random monotone path through the lattice's grid.
pub fn random_path(rng: &mut ChaCha8Rng, lattice: &LogitLattice) -> AlignmentPath {
    let (t, u) = (lattice.t_len(), lattice.u_len());
    let mut frames: Vec<usize> = (0..u).map(|_| rng.random_range(0..t)).collect();
    frames.sort_unstable();
    AlignmentPath::from_emit_frames(lattice.targets(), &frames, t, lattice.blank_id())
        .expect("sorted frames in range")
}

/// Central differences of `loss` with respect to every raw score.
pub fn fd_lattice_grad(
    lattice: &LogitLattice,
    loss: impl Fn(&LogitLattice) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut work = lattice.clone();
    let mut out = Vec::with_capacity(lattice.scores().len());
    for i in 0..lattice.scores().len() {
        let x = lattice.scores()[i];
        work.scores_mut()[i] = x + FD_STEP;
        let plus = loss(&work)?;
        work.scores_mut()[i] = x - FD_STEP;
        let minus = loss(&work)?;
        work.scores_mut()[i] = x;
        out.push((plus - minus) / (2.0 * FD_STEP));
    }
    Ok(out)
}

/// `||a - b|| / max(||a||, ||b||)` with elementwise maxima in the
/// denominator, floored to avoid dividing by zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let den: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| x.powi(2).max(y.powi(2)))
        .sum::<f64>()
        .sqrt();
    num / den.max(1e-12)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleReport {
    pub instances: usize,
    /// Max `|rnnt_loss_full - brute_force_loss|`.
    pub max_loss_err: f64,
    /// Max `|viterbi log-prob - best enumerated path log-prob|`.
    pub max_viterbi_err: f64,
    /// Every Viterbi score was `<=` its lattice's total log-probability.
    pub viterbi_below_total: bool,
}

/// Compares the dynamic programs against exhaustive enumeration on random
/// lattices with `T <= 5`, `U <= 4`, `V <= 6`.
pub fn oracle_check(instances: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = SeedPath::new(seed).label("oracle-check").rng();
    let mut report = OracleReport {
        instances,
        max_loss_err: 0.0,
        max_viterbi_err: 0.0,
        viterbi_below_total: true,
    };
    for _ in 0..instances {
        let lp = random_lattice(&mut rng, 5, 4, 6).normalize()?;
        let dp = rnnt_loss_full(&lp);
        let brute = brute_force_loss(&lp, DEFAULT_PATH_LIMIT)?;
        report.max_loss_err = report.max_loss_err.max((dp - brute).abs());
        let vit = viterbi_align(&lp);
        let (best, _) = brute_force_best_path(&lp, DEFAULT_PATH_LIMIT)?;
        report.max_viterbi_err = report.max_viterbi_err.max((vit.log_prob - best).abs());
        if vit.log_prob > rnnt_forward(&lp).total_log_prob {
            report.viterbi_below_total = false;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    pub instances: usize,
    pub max_full_rel: f64,
    pub max_restricted_rel: f64,
}

/// Full and restricted lattice gradients against central differences.
pub fn lattice_gradcheck(instances: usize, seed: u64) -> Result<GradReport> {
    let mut rng = SeedPath::new(seed).label("gradcheck").rng();
    let mut report = GradReport {
        instances,
        max_full_rel: 0.0,
        max_restricted_rel: 0.0,
    };
    for _ in 0..instances {
        let lat = random_lattice(&mut rng, 5, 4, 6);
        let analytic = rnnt_grad(&lat.normalize()?);
        let fd = fd_lattice_grad(&lat, |l| Ok(rnnt_loss_full(&l.normalize()?)))?;
        report.max_full_rel = report.max_full_rel.max(relative_error(&analytic, &fd));

        let path = random_path(&mut rng, &lat);
        let (bl, br) = (rng.random_range(0..3), rng.random_range(0..3));
        let mask = BandMask::around(&path, bl, br, lat.t_len(), lat.u_len())?;
        let analytic = restricted_grad(&lat.normalize()?, &mask)?;
        let fd = fd_lattice_grad(&lat, |l| restricted_loss(&l.normalize()?, &mask))?;
        report.max_restricted_rel = report
            .max_restricted_rel
            .max(relative_error(&analytic, &fd));
    }
    Ok(report)
}

/// The small model used for end-to-end gradient checks.
pub fn gradcheck_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        feat_dim: 3,
        hidden_dim: 4,
        joint_dim: 4,
        vocab: 5,
        blank_id: 0,
        seed,
    }
}

/// Worst per-group relative error of the model's analytic gradient of the
/// full loss against central differences over every parameter.
pub fn model_gradcheck(seed: u64) -> Result<f64> {
    let cfg = gradcheck_model_config(seed);
    let params = ParameterSet::init(&cfg);
    let mut rng = SeedPath::new(seed).label("model-gradcheck").rng();
    let x = Features::new(
        (0..5 * cfg.feat_dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
        cfg.feat_dim,
    )?;
    let y = [1, 3, 2];
    let loss = |p: &ParameterSet| -> Result<f64> {
        let (lat, _) = model_forward(p, &x, &y)?;
        Ok(rnnt_loss_full(&lat.normalize()?))
    };
    let (lat, cache) = model_forward(&params, &x, &y)?;
    let dlogits = rnnt_grad(&lat.normalize()?);
    let grads = model_backward(&params, &cache, &dlogits)?;
    let mut worst: f64 = 0.0;
    for g in grads.groups() {
        let mut fd = Vec::with_capacity(g.data.len());
        for i in 0..g.data.len() {
            let mut plus = params.clone();
            plus.get_mut(g.group)[i] += FD_STEP;
            let mut minus = params.clone();
            minus.get_mut(g.group)[i] -= FD_STEP;
            fd.push((loss(&plus)? - loss(&minus)?) / (2.0 * FD_STEP));
        }
        worst = worst.max(relative_error(&g.data, &fd));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_oracle_run() {
        let r = oracle_check(30, 1).unwrap();
        assert!(r.max_loss_err < 1e-10);
        assert_eq!(r.max_viterbi_err, 0.0);
        assert!(r.viterbi_below_total);
    }

    #[test]
    fn small_gradcheck_run() {
        let r = lattice_gradcheck(5, 2).unwrap();
        assert!(
            r.max_full_rel < 1e-5 && r.max_restricted_rel < 1e-5,
            "{r:?}"
        );
        assert!(model_gradcheck(3).unwrap() < 1e-4);
    }

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!((relative_error(&[1.0], &[0.0]) - 1.0).abs() < 1e-15);
    }
}
