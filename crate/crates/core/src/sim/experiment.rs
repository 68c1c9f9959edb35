use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{AdaptationMask, ModelConfig, ParameterSet};
use crate::rng::SeedPath;
use crate::server::{run_round, worker_pool, ServerState};
use crate::trainer::{
    train_step, AlignmentSource, AsrService, AugmentConfig, Device, LabelMode, LossKind, Optimizer,
    OptimizerKind, PseudoExample, TrainerConfig,
};

use super::config::ExperimentConfig;
use super::data::{gen_dataset, make_domains, DomainConfig, DomainStream, Utterance};
use super::eval::{evaluate, Evaluation};

pub const CSV_HEADER: &str = "round,target_ter,source_ter,mean_local_loss,keep_rate,delta_norm";

/// One line of the adaptation metrics table. Round 0 is the pretrained
/// model and has no training statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    pub target_ter: f64,
    pub source_ter: f64,
    pub mean_local_loss: Option<f64>,
    pub keep_rate: Option<f64>,
    pub delta_norm: Option<f64>,
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        let opt = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "{},{:.6},{:.6},{},{},{}",
            self.round,
            self.target_ter,
            self.source_ter,
            opt(self.mean_local_loss),
            opt(self.keep_rate),
            opt(self.delta_norm)
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.to_csv_line());
    }
    s
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub params: ParameterSet,
    /// Batch loss at every step.
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Adaptation {
    pub rows: Vec<MetricsRow>,
    pub state: ServerState,
}

impl Adaptation {
    pub fn final_row(&self) -> &MetricsRow {
        self.rows.last().expect("round 0 is always present")
    }
}

/// Domains, evaluation sets and drivers for one [`ExperimentConfig`].
pub struct Experiment {
    pub config: ExperimentConfig,
    pub source: Arc<DomainConfig>,
    pub target: Arc<DomainConfig>,
    pub source_eval: Vec<Utterance>,
    pub target_eval: Vec<Utterance>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let root = SeedPath::new(config.seed);
        let m = &config.model;
        let (source, target) = make_domains(&config.data, m.vocab, m.blank_id, m.feat_dim, root)?;
        let source_eval = gen_dataset(&source, config.eval_utterances, root.label("eval").value());
        let target_eval = gen_dataset(&target, config.eval_utterances, root.label("eval").value());
        Ok(Experiment {
            config,
            source: Arc::new(source),
            target: Arc::new(target),
            source_eval,
            target_eval,
        })
    }

    fn root(&self) -> SeedPath {
        SeedPath::new(self.config.seed)
    }

    /// Model shape from the config with an initialization seed derived from
    /// the master seed.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seed: self.root().label("init").value(),
            ..self.config.model.clone()
        }
    }

    pub fn source_train(&self) -> Vec<Utterance> {
        gen_dataset(
            &self.source,
            self.config.pretrain_utterances,
            self.root().label("pretrain").value(),
        )
    }

    /// `(target, source)` evaluations.
    pub fn evaluate(&self, params: &ParameterSet) -> Result<(Evaluation, Evaluation)> {
        Ok((
            evaluate(params, &self.target_eval)?,
            evaluate(params, &self.source_eval)?,
        ))
    }

    /// Centralized alignment-restricted training on labeled source data.
    pub fn pretrain(&self) -> Result<Pretrained> {
        let cfg = &self.config;
        let data = self.source_train();
        let mut params = ParameterSet::init(&self.model_config());
        let trainer = TrainerConfig {
            local_updates: 1,
            batch_size: cfg.pretrain_batch,
            loss: LossKind::Ar,
            band: cfg.pretrain_band,
            alignment_source: AlignmentSource::ViterbiOnline,
            filter_threshold: f64::NEG_INFINITY,
            augment: AugmentConfig::off(),
            optimizer: OptimizerKind::Adam,
            learning_rate: cfg.pretrain_lr,
            adam: Default::default(),
            mask: AdaptationMask::all(),
        };
        let mut optimizer =
            Optimizer::new(OptimizerKind::Adam, cfg.pretrain_lr, trainer.adam, &params);
        let mut rng = self.root().label("pretrain-batches").rng();
        let mut losses = Vec::with_capacity(cfg.pretrain_steps);
        for step in 0..cfg.pretrain_steps {
            let batch: Vec<PseudoExample> = (0..cfg.pretrain_batch)
                .map(|_| {
                    let u = &data[rng.random_range(0..data.len())];
                    PseudoExample::supervised(u.features.clone(), u.true_alignment.clone())
                })
                .collect();
            let stats = train_step(&mut params, &mut optimizer, batch, &trainer, &mut rng, step)?;
            losses.push(stats.loss.unwrap_or(f64::NAN));
        }
        Ok(Pretrained { params, losses })
    }

    /// One device per index, each with its own endless target-domain stream.
    pub fn devices(&self, w0: &Arc<ParameterSet>, labels: LabelMode) -> Vec<Device> {
        (0..self.config.devices)
            .map(|id| {
                let stream = DomainStream::new(
                    self.target.clone(),
                    self.root().label("stream").index(id as u64),
                );
                let service = AsrService::new(w0.clone(), self.config.beam_size, labels);
                Device::new(id, Box::new(stream), service)
            })
            .collect()
    }

    /// Federated adaptation from `w0` using `config.workers` threads.
    pub fn adapt(&self, w0: &ParameterSet) -> Result<Adaptation> {
        self.adapt_with_workers(w0, self.config.workers)
    }

    pub fn adapt_with_workers(&self, w0: &ParameterSet, workers: usize) -> Result<Adaptation> {
        self.adapt_observed(w0, workers, |_| Ok(()))
    }

    /// Like [`Experiment::adapt_with_workers`], handing every row to
    /// `on_row` as soon as its round is evaluated.
    pub fn adapt_observed(
        &self,
        w0: &ParameterSet,
        workers: usize,
        mut on_row: impl FnMut(&MetricsRow) -> Result<()>,
    ) -> Result<Adaptation> {
        let cfg = &self.config;
        if !cfg.model.same_shape(w0.config()) {
            return Err(Error::Config(
                "checkpoint shape differs from the experiment's model config".into(),
            ));
        }
        let pool = worker_pool(workers)?;
        let w0_shared = Arc::new(w0.clone());
        let mut devices = self.devices(&w0_shared, cfg.labels);
        let mut state = ServerState::new(w0.clone(), cfg.block_momentum, cfg.trainer.mask.clone());
        let (target, source) = pool.install(|| self.evaluate(w0))?;
        let mut rows = vec![MetricsRow {
            round: 0,
            target_ter: target.ter,
            source_ter: source.ter,
            mean_local_loss: None,
            keep_rate: None,
            delta_norm: None,
        }];
        on_row(&rows[0])?;
        let round_seed = self.root().label("rounds").value();
        for _ in 0..cfg.rounds {
            let m = run_round(&mut state, &mut devices, &cfg.trainer, round_seed, &pool)?;
            let (target, source) = pool.install(|| self.evaluate(&state.w_curr))?;
            let row = MetricsRow {
                round: m.round,
                target_ter: target.ter,
                source_ter: source.ter,
                mean_local_loss: m.mean_loss(),
                keep_rate: Some(m.keep_rate()),
                delta_norm: Some(m.mean_delta_norm),
            };
            on_row(&row)?;
            rows.push(row);
        }
        Ok(Adaptation { rows, state })
    }

    /// Centralized training on ground-truth target labels with the same
    /// loss, optimizer and mask as the devices, for `rounds * local_updates`
    /// steps of `devices * batch_size` examples.
    pub fn supervised_baseline(&self, w0: &ParameterSet) -> Result<ParameterSet> {
        let cfg = &self.config;
        let trainer = TrainerConfig {
            batch_size: cfg.devices * cfg.trainer.batch_size,
            filter_threshold: f64::NEG_INFINITY,
            ..cfg.trainer.clone()
        };
        let mut stream = DomainStream::new(self.target.clone(), self.root().label("supervised"));
        let mut rng = self.root().label("supervised-augment").rng();
        let mut params = w0.clone();
        let mut optimizer =
            Optimizer::new(trainer.optimizer, trainer.learning_rate, trainer.adam, w0);
        for step in 0..cfg.rounds * cfg.trainer.local_updates {
            let batch = (0..trainer.batch_size)
                .map(|_| {
                    let u = stream.next_utterance();
                    PseudoExample::supervised(u.features, u.true_alignment)
                })
                .collect();
            train_step(&mut params, &mut optimizer, batch, &trainer, &mut rng, step)?;
        }
        Ok(params)
    }
}
