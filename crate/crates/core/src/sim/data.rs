use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::lattice::AlignmentPath;
use crate::model::Features;
use crate::rng::SeedPath;
use crate::trainer::{Request, RequestSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::Config(format!("unknown domain `{other}`"))),
        }
    }
}

/// A synthetic utterance with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub features: Features,
    pub tokens: Vec<usize>,
    /// Each token is emitted at the first frame of its span.
    pub true_alignment: AlignmentPath,
    pub domain: Domain,
}

impl Utterance {
    pub fn request(&self) -> Request {
        Request {
            features: self.features.clone(),
            truth: Some(self.true_alignment.clone()),
        }
    }
}

/// Generative model of one domain.
///
/// Each token owns a prototype feature vector. An utterance is a sequence
/// of `U ~ uniform[u_min, u_max]` tokens drawn from `prior` without
/// immediate repeats; token `k` fills `d ~ uniform[d_min, d_max]` frames of
/// `prototypes[k]` plus Gaussian noise.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainConfig {
    pub domain: Domain,
    pub vocab: usize,
    pub blank_id: usize,
    /// Sampling weight per token; the blank's weight is ignored.
    pub prior: Vec<f64>,
    pub d_min: usize,
    pub d_max: usize,
    pub u_min: usize,
    pub u_max: usize,
    /// `[vocab][feat_dim]`; the blank's row is unused.
    pub prototypes: Vec<Vec<f64>>,
    pub noise_sigma: f64,
    /// Scale of the per-token offset applied to the source prototypes.
    pub perturbation: f64,
}

/// Knobs for building a source/target pair.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub d_min: usize,
    pub d_max: usize,
    pub u_min: usize,
    pub u_max: usize,
    pub source_noise: f64,
    pub target_noise: f64,
    pub perturbation: f64,
    /// Log-weights of the target prior are `prior_shift * N(0, 1)`.
    pub prior_shift: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            d_min: 1,
            d_max: 3,
            u_min: 2,
            u_max: 10,
            source_noise: 0.1,
            target_noise: 0.3,
            perturbation: 0.2,
            prior_shift: 0.5,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_min == 0 || self.d_min > self.d_max {
            return Err(Error::Config(format!(
                "token duration range [{}, {}] is empty or starts at 0",
                self.d_min, self.d_max
            )));
        }
        if self.u_min > self.u_max || self.u_max == 0 {
            return Err(Error::Config(format!(
                "token count range [{}, {}] is empty",
                self.u_min, self.u_max
            )));
        }
        for (name, v) in [
            ("source_noise", self.source_noise),
            ("target_noise", self.target_noise),
            ("perturbation", self.perturbation),
            ("prior_shift", self.prior_shift),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Builds the source and target domains for one experiment seed. Both share
/// the vocabulary; the target moves every prototype by
/// `perturbation * N(0, I)`, uses its own noise level and a shifted prior.
pub fn make_domains(
    data: &DataConfig,
    vocab: usize,
    blank_id: usize,
    feat_dim: usize,
    seed: SeedPath,
) -> Result<(DomainConfig, DomainConfig)> {
    data.validate()?;
    if vocab < 3 {
        return Err(Error::Config("need at least two non-blank tokens".into()));
    }
    let mut rng = seed.label("prototypes").rng();
    let source_protos: Vec<Vec<f64>> = (0..vocab)
        .map(|_| {
            (0..feat_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect()
        })
        .collect();
    let mut rng = seed.label("perturbation").rng();
    let target_protos: Vec<Vec<f64>> = source_protos
        .iter()
        .map(|p| {
            p.iter()
                .map(|&x| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    x + data.perturbation * z
                })
                .collect()
        })
        .collect();
    let mut rng = seed.label("prior").rng();
    let target_prior: Vec<f64> = (0..vocab)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (data.prior_shift * z).exp()
        })
        .collect();
    let base = DomainConfig {
        domain: Domain::Source,
        vocab,
        blank_id,
        prior: vec![1.0; vocab],
        d_min: data.d_min,
        d_max: data.d_max,
        u_min: data.u_min,
        u_max: data.u_max,
        prototypes: source_protos,
        noise_sigma: data.source_noise,
        perturbation: 0.0,
    };
    let target = DomainConfig {
        domain: Domain::Target,
        prior: target_prior,
        prototypes: target_protos,
        noise_sigma: data.target_noise,
        perturbation: data.perturbation,
        ..base.clone()
    };
    Ok((base, target))
}

impl DomainConfig {
    pub fn feat_dim(&self) -> usize {
        self.prototypes.first().map_or(0, Vec::len)
    }

    /// Draws a token from the prior, excluding the blank and `avoid`.
    fn sample_token<R: Rng + ?Sized>(&self, rng: &mut R, avoid: Option<usize>) -> usize {
        let weight = |k: usize| {
            if k == self.blank_id || Some(k) == avoid {
                0.0
            } else {
                self.prior[k]
            }
        };
        let total: f64 = (0..self.vocab).map(weight).sum();
        let mut x = rng.random_range(0.0..total);
        let mut last = 0;
        for k in 0..self.vocab {
            let w = weight(k);
            if w > 0.0 {
                last = k;
                if x < w {
                    return k;
                }
                x -= w;
            }
        }
        last
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Utterance {
        let u_len = rng.random_range(self.u_min..=self.u_max);
        let mut tokens = Vec::with_capacity(u_len);
        for _ in 0..u_len {
            let prev = tokens.last().copied();
            tokens.push(self.sample_token(rng, prev));
        }
        let noise = (self.noise_sigma > 0.0)
            .then(|| Normal::new(0.0, self.noise_sigma).expect("sigma is positive"));
        let dim = self.feat_dim();
        let mut data = Vec::new();
        let mut starts = Vec::with_capacity(u_len);
        let mut t = 0;
        for &k in &tokens {
            let d = rng.random_range(self.d_min..=self.d_max);
            starts.push(t);
            for _ in 0..d {
                for &p in &self.prototypes[k] {
                    let n = noise.as_ref().map_or(0.0, |n| n.sample(rng));
                    data.push(p + n);
                }
            }
            t += d;
        }
        if t == 0 {
            // An empty utterance still has one frame of noise.
            for _ in 0..dim {
                data.push(noise.as_ref().map_or(0.0, |n| n.sample(rng)));
            }
            t = 1;
        }
        let features = Features::new(data, dim).expect("frames are whole");
        let true_alignment = AlignmentPath::from_emit_frames(&tokens, &starts, t, self.blank_id)
            .expect("span starts are ordered and in range");
        Utterance {
            features,
            tokens,
            true_alignment,
            domain: self.domain,
        }
    }
}

/// `n` utterances, deterministic in `seed`.
pub fn gen_dataset(domain: &DomainConfig, n: usize, seed: u64) -> Vec<Utterance> {
    let mut rng = SeedPath::new(seed).label(domain.domain.name()).rng();
    (0..n).map(|_| domain.sample(&mut rng)).collect()
}

/// An endless deterministic stream of utterances from one domain.
pub struct DomainStream {
    domain: Arc<DomainConfig>,
    rng: ChaCha8Rng,
}

impl DomainStream {
    pub fn new(domain: Arc<DomainConfig>, seed: SeedPath) -> Self {
        DomainStream {
            domain,
            rng: seed.rng(),
        }
    }

    pub fn next_utterance(&mut self) -> Utterance {
        self.domain.sample(&mut self.rng)
    }
}

impl RequestSource for DomainStream {
    fn next_request(&mut self) -> Option<Request> {
        Some(self.next_utterance().request())
    }
}
