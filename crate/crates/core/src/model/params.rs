//! Named parameter groups, adaptation masks, and parameter arithmetic.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::SeedPath;

/// The fixed set of parameter groups of the toy transducer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    /// Input projection `[D, F]`.
    EncIn,
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    /// Encoder output projection `[J, D]`.
    EncOut,
    /// Token embeddings `[V, D]`; row `blank_id` doubles as the start symbol.
    PredEmb,
    /// `[D + J, D]`: rows `0..D` are the recurrent matrix, rows `D..D+J` the
    /// projection of the predictor state into the joint space.
    PredRnn,
    /// Joiner output layer `[V, J]`.
    Joiner,
    /// Every bias vector, concatenated (see [`BiasLayout`]).
    BiasAll,
}

impl Group {
    pub const ALL: [Group; 10] = [
        Group::EncIn,
        Group::AttnQ,
        Group::AttnK,
        Group::AttnV,
        Group::AttnO,
        Group::EncOut,
        Group::PredEmb,
        Group::PredRnn,
        Group::Joiner,
        Group::BiasAll,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::EncIn => "enc_in",
            Group::AttnQ => "attn_q",
            Group::AttnK => "attn_k",
            Group::AttnV => "attn_v",
            Group::AttnO => "attn_o",
            Group::EncOut => "enc_out",
            Group::PredEmb => "pred_emb",
            Group::PredRnn => "pred_rnn",
            Group::Joiner => "joiner",
            Group::BiasAll => "bias_all",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// `[rows, cols]` (or `[len]` for the bias group) under `config`.
    pub fn shape(self, config: &ModelConfig) -> Vec<usize> {
        let (f, d, j, v) = (
            config.feat_dim,
            config.hidden_dim,
            config.joint_dim,
            config.vocab,
        );
        match self {
            Group::EncIn => vec![d, f],
            Group::AttnQ | Group::AttnK | Group::AttnV | Group::AttnO => vec![d, d],
            Group::EncOut => vec![j, d],
            Group::PredEmb => vec![v, d],
            Group::PredRnn => vec![d + j, d],
            Group::Joiner => vec![v, j],
            Group::BiasAll => vec![BiasLayout::new(config).len],
        }
    }

    fn fan_in(self, shape: &[usize]) -> usize {
        match self {
            // Embedding rows are selected by a one-hot input.
            Group::PredEmb => 1,
            _ => shape[shape.len() - 1],
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Group::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::UnknownGroup(s.to_string()))
    }
}

/// Offsets of the individual bias vectors inside [`Group::BiasAll`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BiasLayout {
    pub enc_in: usize,
    pub attn_o: usize,
    pub enc_out: usize,
    pub pred_rnn: usize,
    pub pred_proj: usize,
    pub joiner: usize,
    pub len: usize,
}

impl BiasLayout {
    pub fn new(config: &ModelConfig) -> Self {
        let (d, j, v) = (config.hidden_dim, config.joint_dim, config.vocab);
        let enc_in = 0;
        let attn_o = enc_in + d;
        let enc_out = attn_o + d;
        let pred_rnn = enc_out + j;
        let pred_proj = pred_rnn + d;
        let joiner = pred_proj + j;
        BiasLayout {
            enc_in,
            attn_o,
            enc_out,
            pred_rnn,
            pred_proj,
            joiner,
            len: joiner + v,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub group: Group,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Model weights (or gradients, or deltas) organised by [`Group`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    config: ModelConfig,
    groups: Vec<ParamGroup>,
}

impl ParameterSet {
    /// All groups zero-filled with the shapes implied by `config`.
    pub fn zeros(config: &ModelConfig) -> Self {
        let groups = Group::ALL
            .into_iter()
            .map(|group| {
                let shape = group.shape(config);
                let n = shape.iter().product();
                ParamGroup {
                    group,
                    shape,
                    data: vec![0.0; n],
                }
            })
            .collect();
        ParameterSet {
            config: config.clone(),
            groups,
        }
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, one random stream per group
    /// derived from `(config.seed, group name)`; biases zero.
    pub fn init(config: &ModelConfig) -> Self {
        let mut params = Self::zeros(config);
        let root = SeedPath::new(config.seed);
        for g in params.groups.iter_mut() {
            if g.group == Group::BiasAll {
                continue;
            }
            let bound = 1.0 / (g.group.fan_in(&g.shape) as f64).sqrt();
            let mut rng = root.label(g.group.name()).rng();
            for x in g.data.iter_mut() {
                *x = rng.random_range(-bound..bound);
            }
        }
        params
    }

    /// Assembles a set from explicit groups, checking them against `config`.
    pub fn from_groups(config: &ModelConfig, groups: Vec<ParamGroup>) -> Result<Self> {
        if groups.len() != Group::ALL.len() {
            return Err(Error::ShapeMismatch {
                group: "*".into(),
                detail: format!("expected {} groups, got {}", Group::ALL.len(), groups.len()),
            });
        }
        for (g, expected) in groups.iter().zip(Group::ALL) {
            if g.group != expected {
                return Err(Error::ShapeMismatch {
                    group: g.group.name().into(),
                    detail: format!("expected group `{expected}` at this position"),
                });
            }
            let shape = expected.shape(config);
            if g.shape != shape || g.data.len() != shape.iter().product::<usize>() {
                return Err(Error::ShapeMismatch {
                    group: expected.name().into(),
                    detail: format!("expected shape {shape:?}, got {:?}", g.shape),
                });
            }
        }
        Ok(ParameterSet {
            config: config.clone(),
            groups,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn get(&self, group: Group) -> &[f64] {
        &self.groups[group.index()].data
    }

    pub fn get_mut(&mut self, group: Group) -> &mut [f64] {
        &mut self.groups[group.index()].data
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    /// Errors unless `other` has exactly this set's group shapes.
    pub fn check_layout(&self, other: &ParameterSet) -> Result<()> {
        for (a, b) in self.groups.iter().zip(&other.groups) {
            if a.shape != b.shape {
                return Err(Error::ShapeMismatch {
                    group: a.group.name().into(),
                    detail: format!("{:?} vs {:?}", a.shape, b.shape),
                });
            }
        }
        Ok(())
    }

    /// Element count of the groups selected by `mask` (all groups if `None`).
    pub fn param_count(&self, mask: Option<&AdaptationMask>) -> usize {
        self.groups
            .iter()
            .filter(|g| mask.is_none_or(|m| m.contains(g.group)))
            .map(|g| g.data.len())
            .sum()
    }

    /// `self += scale * other`, element-wise.
    pub fn axpy(&mut self, scale: f64, other: &ParameterSet) {
        for (a, b) in self.groups.iter_mut().zip(&other.groups) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
    }

    pub fn add_assign(&mut self, other: &ParameterSet) {
        for (a, b) in self.groups.iter_mut().zip(&other.groups) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.groups {
            for x in &mut g.data {
                *x *= s;
            }
        }
    }

    /// `self - other`.
    pub fn sub(&self, other: &ParameterSet) -> ParameterSet {
        let mut out = self.clone();
        for (a, b) in out.groups.iter_mut().zip(&other.groups) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x -= y;
            }
        }
        out
    }

    pub fn l2_norm(&self) -> f64 {
        self.groups
            .iter()
            .flat_map(|g| g.data.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.groups
            .iter()
            .all(|g| g.data.iter().all(|x| x.is_finite()))
    }

    /// Whether every element of `group` has the same bit pattern in both sets.
    pub fn group_bits_eq(&self, other: &ParameterSet, group: Group) -> bool {
        let (a, b) = (self.get(group), other.get(group));
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
    }

    pub fn bits_eq(&self, other: &ParameterSet) -> bool {
        Group::ALL.into_iter().all(|g| self.group_bits_eq(other, g))
    }
}

/// Which parameter groups are allowed to change.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdaptationMask {
    selected: BTreeSet<Group>,
}

impl AdaptationMask {
    pub fn all() -> Self {
        Self::of(&Group::ALL)
    }

    pub fn none() -> Self {
        AdaptationMask {
            selected: BTreeSet::new(),
        }
    }

    pub fn of(groups: &[Group]) -> Self {
        AdaptationMask {
            selected: groups.iter().copied().collect(),
        }
    }

    /// Parses group names; any unknown name is an error.
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let groups = names
            .iter()
            .map(|n| n.as_ref().parse())
            .collect::<Result<Vec<Group>>>()?;
        Ok(Self::of(&groups))
    }

    /// Named presets: `all`, `encoder`, `attention`, `keyvalue`, `predictor`,
    /// `joiner`, `bias`.
    pub fn preset(name: &str) -> Result<Self> {
        use Group::*;
        Ok(match name {
            "all" => Self::all(),
            "encoder" => Self::of(&[EncIn, AttnQ, AttnK, AttnV, AttnO, EncOut]),
            "attention" => Self::of(&[AttnQ, AttnK, AttnV, AttnO]),
            "keyvalue" => Self::of(&[AttnK, AttnV]),
            "predictor" => Self::of(&[PredEmb, PredRnn]),
            "joiner" => Self::of(&[Joiner]),
            "bias" => Self::of(&[BiasAll]),
            other => return Err(Error::Config(format!("unknown mask preset `{other}`"))),
        })
    }

    pub fn contains(&self, group: Group) -> bool {
        self.selected.contains(&group)
    }

    pub fn groups(&self) -> impl Iterator<Item = Group> + '_ {
        self.selected.iter().copied()
    }

    /// Copy of `params` with every group outside the mask zeroed.
    pub fn apply(&self, params: &ParameterSet) -> ParameterSet {
        let mut out = params.clone();
        self.apply_in_place(&mut out);
        out
    }

    pub fn apply_in_place(&self, params: &mut ParameterSet) {
        for g in &mut params.groups {
            if !self.contains(g.group) {
                g.data.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    /// Space-separated group names, the inverse of [`AdaptationMask::from_names`].
    pub fn to_names(&self) -> String {
        self.selected
            .iter()
            .map(|g| g.name())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Zeroes the groups of `params` that are not named in `names`.
pub fn apply_mask<S: AsRef<str>>(params: &ParameterSet, names: &[S]) -> Result<ParameterSet> {
    Ok(AdaptationMask::from_names(names)?.apply(params))
}
