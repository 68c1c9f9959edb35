//! On-device training: labeling, filtering, augmentation and local updates.
//!
//! A [`Device`] pulls utterances from its [`RequestSource`], labels them
//! with the frozen pretrained model through its [`AsrService`] and queues the
//! results. [`local_round`] then runs `K` optimizer steps from the broadcast
//! weights and returns the masked weight delta.

mod augment;
mod optim;
mod queue;

pub use augment::{augment, perturbed_len, speed_perturb, AugmentConfig};
pub use optim::{adam_step, sgd_step, AdamConfig, AdamState, Optimizer, OptimizerKind};
pub use queue::{
    label_example, AsrService, Device, ExampleQueue, LabelMode, PseudoExample, Request,
    RequestSource, VecSource,
};

use rand::Rng;

use crate::error::{Error, Result};
use crate::lattice::{
    restricted_loss_and_grad, rnnt_loss_and_grad, viterbi_align, AlignmentPath, BandMask,
};
use crate::model::{model_backward, model_forward, AdaptationMask, Features, ParameterSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Sum over every alignment.
    Full,
    /// Band around the ground-truth alignment.
    Ar,
    /// Band around the model's own alignment.
    Sr,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Full => "full",
            LossKind::Ar => "ar",
            LossKind::Sr => "sr",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(LossKind::Full),
            "ar" => Ok(LossKind::Ar),
            "sr" => Ok(LossKind::Sr),
            other => Err(Error::Config(format!("unknown loss `{other}`"))),
        }
    }
}

/// Reference alignment for the self-restricted loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignmentSource {
    /// Viterbi alignment under the current adapting weights, per example.
    ViterbiOnline,
    /// Best beam-search alignment from labeling time.
    BeamCached,
}

impl std::str::FromStr for AlignmentSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "viterbi_online" => Ok(AlignmentSource::ViterbiOnline),
            "beam_cached" => Ok(AlignmentSource::BeamCached),
            other => Err(Error::Config(format!("unknown alignment source `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub local_updates: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    /// `(b_left, b_right)` in frames.
    pub band: (usize, usize),
    pub alignment_source: AlignmentSource,
    /// Examples with confidence below this are dropped; `-inf` disables.
    pub filter_threshold: f64,
    pub augment: AugmentConfig,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub mask: AdaptationMask,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            local_updates: 20,
            batch_size: 8,
            loss: LossKind::Sr,
            band: (2, 2),
            alignment_source: AlignmentSource::ViterbiOnline,
            filter_threshold: f64::NEG_INFINITY,
            augment: AugmentConfig::off(),
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-4,
            adam: AdamConfig::default(),
            mask: AdaptationMask::all(),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_updates == 0 {
            return Err(Error::Config("local_updates must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if self.filter_threshold.is_nan() {
            return Err(Error::Config("filter_threshold is NaN".into()));
        }
        if self.augment.speed_rates.iter().any(|&r| r.is_nan() || r <= 0.0) {
            return Err(Error::Config("speed rates must be positive".into()));
        }
        if self.augment.noise_sigma.is_nan() || self.augment.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// Keeps the examples whose confidence is at least `threshold`, in order.
pub fn filter_batch(batch: Vec<PseudoExample>, threshold: f64) -> Vec<PseudoExample> {
    batch
        .into_iter()
        .filter(|ex| crate::decoder::confidence(&ex.hypothesis) >= threshold)
        .collect()
}

/// Loss of one utterance and its gradient with respect to every parameter.
///
/// `reference` is the alignment the band is built around; it is required for
/// [`LossKind::Ar`] and for [`LossKind::Sr`] with a cached alignment, and
/// ignored otherwise.
pub fn example_loss_and_grad(
    params: &ParameterSet,
    features: &Features,
    targets: &[usize],
    config: &TrainerConfig,
    reference: Option<&AlignmentPath>,
) -> Result<(f64, ParameterSet)> {
    let (logits, cache) = model_forward(params, features, targets)?;
    let lattice = logits.normalize()?;
    let (t_len, u_len) = (lattice.t_len(), lattice.u_len());
    let banded = |path: &AlignmentPath| {
        let mask = BandMask::around(path, config.band.0, config.band.1, t_len, u_len)?;
        restricted_loss_and_grad(&lattice, &mask)
    };
    let (loss, dlogits) = match (config.loss, config.alignment_source) {
        (LossKind::Full, _) => rnnt_loss_and_grad(&lattice),
        (LossKind::Sr, AlignmentSource::ViterbiOnline) => banded(&viterbi_align(&lattice))?,
        (LossKind::Ar, _) | (LossKind::Sr, AlignmentSource::BeamCached) => {
            let path = reference.ok_or_else(|| {
                Error::Config(format!(
                    "{} loss needs a reference alignment for every example",
                    config.loss.name()
                ))
            })?;
            banded(path)?
        }
    };
    let grads = model_backward(params, &cache, &dlogits)?;
    Ok((loss, grads))
}

/// Outcome of one optimizer step slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Mean loss over the kept examples; `None` when all were filtered.
    pub loss: Option<f64>,
    pub seen: usize,
    pub kept: usize,
}

/// Filter, augment, and take one optimizer step on the mean loss of the
/// surviving examples. `step` only labels divergence errors.
pub fn train_step<R: Rng + ?Sized>(
    params: &mut ParameterSet,
    optimizer: &mut Optimizer,
    batch: Vec<PseudoExample>,
    config: &TrainerConfig,
    rng: &mut R,
    step: usize,
) -> Result<StepStats> {
    let seen = batch.len();
    let kept = filter_batch(batch, config.filter_threshold);
    if kept.is_empty() {
        return Ok(StepStats {
            loss: None,
            seen,
            kept: 0,
        });
    }
    let weight = 1.0 / kept.len() as f64;
    let mut grads = params.zeros_like();
    let mut total = 0.0;
    for ex in &kept {
        let reference = match config.loss {
            LossKind::Ar => ex.true_alignment.as_ref(),
            _ => Some(&ex.cached_alignment),
        };
        let (loss, g) = if config.augment.is_off() {
            example_loss_and_grad(params, &ex.features, ex.targets(), config, reference)?
        } else {
            let (x, rate) = augment(&ex.features, rng, &config.augment);
            let resampled = match reference {
                Some(path) if x.frames() != ex.features.frames() || rate != 1.0 => {
                    Some(path.resample(rate, x.frames(), params.config().blank_id)?)
                }
                Some(path) => Some(path.clone()),
                None => None,
            };
            example_loss_and_grad(params, &x, ex.targets(), config, resampled.as_ref())?
        };
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        total += loss;
        grads.axpy(weight, &g);
    }
    let loss = total * weight;
    if !grads.is_finite() {
        return Err(Error::Divergence { step, loss });
    }
    config.mask.apply_in_place(&mut grads);
    optimizer.step(params, &grads, &config.mask);
    Ok(StepStats {
        loss: Some(loss),
        seen,
        kept: kept.len(),
    })
}

/// What a device sends back after a round, plus its local statistics.
#[derive(Debug, Clone)]
pub struct LocalResult {
    /// `mask(w_K - w_in)`.
    pub delta: ParameterSet,
    /// Mean of the per-step batch losses over steps that trained.
    pub mean_loss: Option<f64>,
    pub seen: usize,
    pub kept: usize,
}

impl LocalResult {
    pub fn keep_rate(&self) -> f64 {
        if self.seen == 0 {
            0.0
        } else {
            self.kept as f64 / self.seen as f64
        }
    }
}

/// `K` local steps on `device` starting from `w_in`. Optimizer state starts
/// fresh. Fails with [`Error::QueueExhausted`] if the device runs dry.
pub fn local_round<R: Rng + ?Sized>(
    w_in: &ParameterSet,
    device: &mut Device,
    config: &TrainerConfig,
    round: usize,
    rng: &mut R,
) -> Result<LocalResult> {
    config.validate()?;
    let mut params = w_in.clone();
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, config.adam, w_in);
    let (mut seen, mut kept, mut loss_sum, mut trained) = (0, 0, 0.0, 0);
    for k in 0..config.local_updates {
        let batch = device
            .next_batch(config.batch_size)?
            .ok_or(Error::QueueExhausted {
                device: device.id,
                round,
            })?;
        let stats = train_step(&mut params, &mut optimizer, batch, config, rng, k)?;
        seen += stats.seen;
        kept += stats.kept;
        if let Some(l) = stats.loss {
            loss_sum += l;
            trained += 1;
        }
    }
    let delta = config.mask.apply(&params.sub(w_in));
    Ok(LocalResult {
        delta,
        mean_loss: (trained > 0).then(|| loss_sum / trained as f64),
        seen,
        kept,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::Hypothesis;
    use crate::lattice::rnnt_loss_full;
    use crate::model::{Group, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn cfg() -> ModelConfig {
        ModelConfig {
            feat_dim: 3,
            hidden_dim: 4,
            joint_dim: 4,
            vocab: 5,
            blank_id: 0,
            seed: 9,
        }
    }

    fn request(rng: &mut ChaCha8Rng) -> Request {
        let u = rng.random_range(0..4);
        let tokens: Vec<usize> = (0..u).map(|_| rng.random_range(1..5)).collect();
        let t_len = u + rng.random_range(1..5);
        let mut frames: Vec<usize> = (0..u).map(|_| rng.random_range(0..t_len)).collect();
        frames.sort();
        let truth = AlignmentPath::from_emit_frames(&tokens, &frames, t_len, 0).unwrap();
        let data = (0..t_len * 3)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Request {
            features: Features::new(data, 3).unwrap(),
            truth: Some(truth),
        }
    }

    fn requests(n: usize, seed: u64) -> Vec<Request> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| request(&mut rng)).collect()
    }

    fn device(w0: &ParameterSet, reqs: Vec<Request>, mode: LabelMode) -> Device {
        let service = AsrService::new(Arc::new(w0.clone()), 3, mode);
        Device::new(0, Box::new(VecSource::new(reqs)), service)
    }

    fn with_conf(c: f64) -> PseudoExample {
        let path = AlignmentPath::from_emit_frames(&[], &[], 1, 0).unwrap();
        let mut ex = PseudoExample::supervised(Features::new(vec![c; 3], 3).unwrap(), path.clone());
        ex.hypothesis = Hypothesis::new(vec![], c, path);
        ex
    }

    #[test]
    fn filter_examples() {
        let batch = vec![with_conf(-0.1), with_conf(-0.3)];
        let kept = filter_batch(batch.clone(), -0.2);
        assert_eq!(kept, vec![batch[0].clone()]);
        assert_eq!(filter_batch(batch.clone(), f64::NEG_INFINITY), batch);
        let confs = [-0.05, -0.5, -0.2, -1.0, -0.15, 0.0];
        let batch: Vec<_> = confs.iter().map(|&c| with_conf(c)).collect();
        let mut prev = batch.len() + 1;
        for th in [-2.0, -0.6, -0.3, -0.2, -0.1, 0.0, 0.1] {
            let kept = filter_batch(batch.clone(), th);
            assert!(kept.len() <= prev);
            prev = kept.len();
            let looser = filter_batch(batch.clone(), th - 0.05);
            assert!(kept.iter().all(|k| looser.contains(k)));
        }
    }

    #[test]
    fn zero_learning_rate_gives_exact_zero_delta() {
        let w0 = ParameterSet::init(&cfg());
        for optimizer in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut dev = device(&w0, requests(40, 1), LabelMode::Pseudo);
            let config = TrainerConfig {
                local_updates: 4,
                batch_size: 3,
                learning_rate: 0.0,
                optimizer,
                augment: AugmentConfig::default(),
                ..TrainerConfig::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let r = local_round(&w0, &mut dev, &config, 0, &mut rng).unwrap();
            assert!(r.delta.bits_eq(&w0.zeros_like()));
            assert_eq!(r.seen, 12);
            assert!(r.mean_loss.unwrap() > 0.0);
        }
    }

    #[test]
    fn keyvalue_mask_confines_delta() {
        let w0 = ParameterSet::init(&cfg());
        let w0_copy = w0.clone();
        let mut dev = device(&w0, requests(40, 2), LabelMode::Pseudo);
        let config = TrainerConfig {
            local_updates: 3,
            batch_size: 4,
            learning_rate: 1e-2,
            mask: AdaptationMask::preset("keyvalue").unwrap(),
            augment: AugmentConfig::default(),
            ..TrainerConfig::default()
        };
        let r = local_round(&w0, &mut dev, &config, 0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let zero = w0.zeros_like();
        for g in Group::ALL {
            let inside = config.mask.contains(g);
            assert_eq!(r.delta.group_bits_eq(&zero, g), !inside, "{g}");
        }
        assert!(w0.bits_eq(&w0_copy));
        assert!(dev.service().w0().bits_eq(&w0_copy));
    }

    #[test]
    fn saturated_sr_matches_full_step_for_step() {
        let w0 = ParameterSet::init(&cfg());
        let full = TrainerConfig {
            local_updates: 1,
            batch_size: 4,
            loss: LossKind::Full,
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.05,
            ..TrainerConfig::default()
        };
        let sr = TrainerConfig {
            loss: LossKind::Sr,
            band: (100, 100),
            ..full.clone()
        };
        let mut a = w0.clone();
        let mut b = w0.clone();
        let mut dev_a = device(&w0, requests(40, 3), LabelMode::Pseudo);
        let mut dev_b = device(&w0, requests(40, 3), LabelMode::Pseudo);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for round in 0..8 {
            let ra = local_round(&a, &mut dev_a, &full, round, &mut rng).unwrap();
            let rb = local_round(&b, &mut dev_b, &sr, round, &mut rng).unwrap();
            assert!((ra.mean_loss.unwrap() - rb.mean_loss.unwrap()).abs() < 1e-12);
            a.add_assign(&ra.delta);
            b.add_assign(&rb.delta);
            let diff = a.sub(&b);
            for g in diff.groups() {
                assert!(g.data.iter().all(|x| x.abs() < 1e-12));
            }
        }
    }

    #[test]
    fn ar_needs_true_alignment() {
        let w0 = ParameterSet::init(&cfg());
        let config = TrainerConfig {
            local_updates: 1,
            batch_size: 2,
            loss: LossKind::Ar,
            ..TrainerConfig::default()
        };
        let mut dev = device(&w0, requests(4, 4), LabelMode::Pseudo);
        let err = local_round(&w0, &mut dev, &config, 0, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(err, Err(Error::Config(_))));
        let mut dev = device(&w0, requests(4, 4), LabelMode::True);
        assert!(local_round(&w0, &mut dev, &config, 0, &mut ChaCha8Rng::seed_from_u64(0)).is_ok());
    }

    #[test]
    fn exhausted_queue_aborts_round() {
        let w0 = ParameterSet::init(&cfg());
        let mut dev = device(&w0, requests(3, 5), LabelMode::Pseudo);
        let config = TrainerConfig {
            local_updates: 3,
            batch_size: 2,
            ..TrainerConfig::default()
        };
        let err = local_round(&w0, &mut dev, &config, 7, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(
            err,
            Err(Error::QueueExhausted {
                device: 0,
                round: 7
            })
        ));
    }

    #[test]
    fn filtered_batches_still_consume_steps() {
        let w0 = ParameterSet::init(&cfg());
        let mut dev = device(&w0, requests(6, 6), LabelMode::Pseudo);
        let config = TrainerConfig {
            local_updates: 3,
            batch_size: 2,
            filter_threshold: 1.0,
            learning_rate: 0.1,
            ..TrainerConfig::default()
        };
        let r = local_round(&w0, &mut dev, &config, 0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!((r.seen, r.kept), (6, 0));
        assert_eq!(r.mean_loss, None);
        assert!(r.delta.bits_eq(&w0.zeros_like()));
        assert!(dev.next_batch(1).unwrap().is_none());
    }

    #[test]
    fn round_matches_plain_steps_without_filter_or_augment() {
        let w0 = ParameterSet::init(&cfg());
        let config = TrainerConfig {
            local_updates: 5,
            batch_size: 3,
            loss: LossKind::Full,
            learning_rate: 1e-2,
            ..TrainerConfig::default()
        };
        let mut dev = device(&w0, requests(15, 7), LabelMode::Pseudo);
        let r = local_round(&w0, &mut dev, &config, 0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();

        let mut w = w0.clone();
        let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-2, AdamConfig::default(), &w0);
        let reqs = requests(15, 7);
        for chunk in reqs.chunks(3) {
            let mut grads = w.zeros_like();
            for req in chunk {
                let ex = label_example(&w0, req.features.clone(), 3).unwrap();
                let (lat, cache) = model_forward(&w, &ex.features, ex.targets()).unwrap();
                let (_, d) = rnnt_loss_and_grad(&lat.normalize().unwrap());
                grads.axpy(1.0 / 3.0, &model_backward(&w, &cache, &d).unwrap());
            }
            opt.step(&mut w, &grads, &AdaptationMask::all());
        }
        let expected = w.sub(&w0);
        let diff = expected.sub(&r.delta);
        assert!(diff
            .groups()
            .iter()
            .all(|g| g.data.iter().all(|x| x.abs() < 1e-15)));
    }

    #[test]
    fn supervised_training_lowers_loss() {
        let w0 = ParameterSet::init(&cfg());
        let reqs = requests(8, 8);
        let examples: Vec<PseudoExample> = reqs
            .iter()
            .map(|r| PseudoExample::supervised(r.features.clone(), r.truth.clone().unwrap()))
            .collect();
        let mean_loss = |w: &ParameterSet| {
            examples
                .iter()
                .map(|ex| {
                    let (lat, _) = model_forward(w, &ex.features, ex.targets()).unwrap();
                    rnnt_loss_full(&lat.normalize().unwrap())
                })
                .sum::<f64>()
                / examples.len() as f64
        };
        for loss in [LossKind::Full, LossKind::Ar, LossKind::Sr] {
            let config = TrainerConfig {
                loss,
                band: (1, 2),
                learning_rate: 1e-2,
                ..TrainerConfig::default()
            };
            let mut w = w0.clone();
            let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-2, AdamConfig::default(), &w);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            for step in 0..60 {
                train_step(&mut w, &mut opt, examples.clone(), &config, &mut rng, step).unwrap();
            }
            assert!(mean_loss(&w) < mean_loss(&w0), "{}", loss.name());
        }
    }

    #[test]
    fn band_two_touches_fewer_cells() {
        let t_len = 12;
        let tokens = vec![1, 2, 3, 4, 1, 2];
        let frames = vec![1, 2, 4, 6, 8, 10];
        let path = AlignmentPath::from_emit_frames(&tokens, &frames, t_len, 0).unwrap();
        let mask = BandMask::around(&path, 2, 2, t_len, tokens.len()).unwrap();
        assert!(mask.valid_count() < t_len * (tokens.len() + 1));
    }

    #[test]
    fn config_validation() {
        assert!(TrainerConfig::default().validate().is_ok());
        let bad = TrainerConfig {
            local_updates: 0,
            ..TrainerConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!("sr".parse::<LossKind>().is_ok());
        assert!("xx".parse::<LossKind>().is_err());
        assert!("beam_cached".parse::<AlignmentSource>().is_ok());
    }
}
