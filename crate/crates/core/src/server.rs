//! Central federated server: broadcast, local rounds, averaging and the
//! block-momentum update `w_t = w_{t-1} + beta (w_{t-1} - w_{t-2}) + mean delta`.

use rayon::prelude::*;
use rayon::ThreadPool;

use crate::error::{Error, Result};
use crate::model::{AdaptationMask, ParameterSet};
use crate::rng::SeedPath;
use crate::trainer::{local_round, Device, TrainerConfig};

/// Global weights and the momentum history.
#[derive(Debug, Clone)]
pub struct ServerState {
    /// `w_{t-1}`.
    pub w_curr: ParameterSet,
    /// `w_{t-2}`; equal to `w_curr` before the first round.
    pub w_prev: ParameterSet,
    /// Completed rounds.
    pub round: usize,
    pub beta: f64,
    pub mask: AdaptationMask,
}

impl ServerState {
    pub fn new(w0: ParameterSet, beta: f64, mask: AdaptationMask) -> Self {
        ServerState {
            w_prev: w0.clone(),
            w_curr: w0,
            round: 0,
            beta,
            mask,
        }
    }

    /// Applies one momentum update in place.
    pub fn apply(&mut self, delta_mean: &ParameterSet) -> Result<()> {
        self.w_curr.check_layout(delta_mean)?;
        let mut w_new = self.w_curr.clone();
        for group in self.mask.groups() {
            let curr = self.w_curr.get(group);
            let prev = self.w_prev.get(group);
            let delta = delta_mean.get(group);
            for (i, w) in w_new.get_mut(group).iter_mut().enumerate() {
                *w = curr[i] + self.beta * (curr[i] - prev[i]) + delta[i];
            }
        }
        self.w_prev = std::mem::replace(&mut self.w_curr, w_new);
        self.round += 1;
        Ok(())
    }
}

/// Functional form of [`ServerState::apply`].
pub fn fedavgm_update(state: &ServerState, delta_mean: &ParameterSet) -> Result<ServerState> {
    let mut next = state.clone();
    next.apply(delta_mean)?;
    Ok(next)
}

/// One device's contribution to a round.
#[derive(Debug, Clone)]
pub struct DeviceUpdate {
    pub delta: ParameterSet,
    pub device_id: usize,
    pub round: usize,
}

/// Element-wise mean of the deltas, summed in ascending device-id order.
pub fn aggregate(updates: &[DeviceUpdate]) -> Result<ParameterSet> {
    let first = updates.first().ok_or(Error::EmptyUpdates)?;
    if let Some(bad) = updates.iter().find(|u| u.round != first.round) {
        return Err(Error::MixedRounds {
            expected: first.round,
            got: bad.round,
        });
    }
    let mut order: Vec<&DeviceUpdate> = updates.iter().collect();
    order.sort_by_key(|u| u.device_id);
    let mut sum = first.delta.zeros_like();
    for u in order {
        sum.check_layout(&u.delta)?;
        sum.add_assign(&u.delta);
    }
    let n = updates.len() as f64;
    let mut groups = sum.groups().to_vec();
    for g in &mut groups {
        g.data.iter_mut().for_each(|x| *x /= n);
    }
    ParameterSet::from_groups(sum.config(), groups)
}

/// Per-round training statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    /// Mean local loss per device, in device order.
    pub device_losses: Vec<Option<f64>>,
    pub device_keep_rates: Vec<f64>,
    pub delta_norms: Vec<f64>,
    /// L2 norm of the averaged delta.
    pub mean_delta_norm: f64,
    seen: usize,
    kept: usize,
}

impl RoundMetrics {
    /// Mean over devices that trained at least once.
    pub fn mean_loss(&self) -> Option<f64> {
        let losses: Vec<f64> = self.device_losses.iter().flatten().copied().collect();
        (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64)
    }

    /// Fraction of examples surviving the filter across all devices.
    pub fn keep_rate(&self) -> f64 {
        if self.seen == 0 {
            0.0
        } else {
            self.kept as f64 / self.seen as f64
        }
    }
}

/// The random stream a device uses in a given round.
pub fn device_seed(master: u64, device_id: usize, round: usize) -> SeedPath {
    SeedPath::new(master)
        .label("device")
        .index(device_id as u64)
        .index(round as u64)
}

/// Broadcasts `w_curr`, runs every device's local round on `pool`, then
/// aggregates and applies the momentum update. Any device failure aborts
/// the round and leaves `state` unchanged.
pub fn run_round(
    state: &mut ServerState,
    devices: &mut [Device],
    config: &TrainerConfig,
    master_seed: u64,
    pool: &ThreadPool,
) -> Result<RoundMetrics> {
    let round = state.round + 1;
    let trainer = TrainerConfig {
        mask: state.mask.clone(),
        ..config.clone()
    };
    let w = &state.w_curr;
    let results: Vec<Result<_>> = pool.install(|| {
        devices
            .par_iter_mut()
            .map(|device| {
                let mut rng = device_seed(master_seed, device.id, round).rng();
                local_round(w, device, &trainer, round, &mut rng).map(|r| (device.id, r))
            })
            .collect()
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    if results.is_empty() {
        return Err(Error::EmptyUpdates);
    }

    let mut metrics = RoundMetrics {
        round,
        device_losses: Vec::new(),
        device_keep_rates: Vec::new(),
        delta_norms: Vec::new(),
        mean_delta_norm: 0.0,
        seen: 0,
        kept: 0,
    };
    let mut updates = Vec::with_capacity(results.len());
    for (device_id, r) in results {
        metrics.device_losses.push(r.mean_loss);
        metrics.device_keep_rates.push(r.keep_rate());
        metrics.delta_norms.push(r.delta.l2_norm());
        metrics.seen += r.seen;
        metrics.kept += r.kept;
        updates.push(DeviceUpdate {
            delta: r.delta,
            device_id,
            round,
        });
    }
    let mean = aggregate(&updates)?;
    metrics.mean_delta_norm = mean.l2_norm();
    state.apply(&mean)?;
    Ok(metrics)
}

/// A pool with exactly `workers` threads.
pub fn worker_pool(workers: usize) -> Result<ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Group, ModelConfig};

    fn cfg() -> ModelConfig {
        ModelConfig {
            feat_dim: 2,
            hidden_dim: 2,
            joint_dim: 2,
            vocab: 3,
            blank_id: 0,
            seed: 1,
        }
    }

    fn filled(v: f64) -> ParameterSet {
        let mut p = ParameterSet::zeros(&cfg());
        for g in Group::ALL {
            p.get_mut(g).fill(v);
        }
        p
    }

    fn update(v: f64, device_id: usize, round: usize) -> DeviceUpdate {
        DeviceUpdate {
            delta: filled(v),
            device_id,
            round,
        }
    }

    #[test]
    fn aggregate_means() {
        let m = aggregate(&[update(1.0, 0, 1), update(3.0, 1, 1)]).unwrap();
        assert!(m.bits_eq(&filled(2.0)));
        let one = aggregate(&[update(0.7, 4, 1)]).unwrap();
        assert!(one.bits_eq(&filled(0.7)));
    }

    #[test]
    fn aggregate_errors() {
        assert!(matches!(aggregate(&[]), Err(Error::EmptyUpdates)));
        assert!(matches!(
            aggregate(&[update(1.0, 0, 1), update(1.0, 1, 2)]),
            Err(Error::MixedRounds {
                expected: 1,
                got: 2
            })
        ));
    }

    #[test]
    fn aggregate_ignores_arrival_order() {
        let vals = [0.1, 1e16, -1e16, 0.3, 7.0];
        let ups: Vec<_> = vals
            .iter()
            .enumerate()
            .map(|(i, &v)| update(v, i, 3))
            .collect();
        let mut rev = ups.clone();
        rev.reverse();
        rev.swap(1, 3);
        assert!(aggregate(&ups).unwrap().bits_eq(&aggregate(&rev).unwrap()));
    }

    #[test]
    fn momentum_scalar_examples() {
        let mut s = ServerState::new(filled(0.0), 0.8, AdaptationMask::all());
        s.apply(&filled(2.0)).unwrap();
        assert!(s.w_curr.bits_eq(&filled(2.0)));
        assert_eq!(s.round, 1);
        s.apply(&filled(0.0)).unwrap();
        let w2 = s.w_curr.get(Group::Joiner)[0];
        assert!((w2 - 3.6).abs() < 1e-15);
        assert!(s.w_prev.bits_eq(&filled(2.0)));
    }

    #[test]
    fn zero_beta_is_fedavg() {
        let s = ServerState::new(filled(1.0), 0.0, AdaptationMask::all());
        let s = fedavgm_update(&s, &filled(0.5)).unwrap();
        let s = fedavgm_update(&s, &filled(0.25)).unwrap();
        assert!(s.w_curr.bits_eq(&filled(1.75)));
    }

    #[test]
    fn update_respects_mask_and_shape() {
        let mask = AdaptationMask::preset("keyvalue").unwrap();
        let mut s = ServerState::new(filled(1.0), 0.8, mask.clone());
        s.apply(&filled(0.5)).unwrap();
        for g in Group::ALL {
            let v = s.w_curr.get(g)[0];
            assert_eq!(v, if mask.contains(g) { 1.5 } else { 1.0 });
        }
        let other = ParameterSet::zeros(&ModelConfig::default());
        assert!(matches!(s.apply(&other), Err(Error::ShapeMismatch { .. })));
    }
}
