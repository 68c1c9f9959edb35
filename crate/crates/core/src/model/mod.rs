//! A tiny transducer: attention encoder, tanh-recurrent predictor, ReLU joiner.
//!
//! Encoder, per frame `t`:
//!
//! ```text
//! z0_t = W_in x_t + b_in
//! q_t, k_t, v_t = W_q z0_t, W_k z0_t, W_v z0_t
//! c_t = sum_s softmax_s(q_t . k_s / sqrt(D)) v_s
//! z1_t = z0_t + W_o c_t + b_o
//! h_t = tanh(W_eo z1_t + b_eo)
//! ```
//!
//! Predictor over `[blank] ++ targets`, `s_{-1} = 0`:
//!
//! ```text
//! s_u = tanh(W_h s_{u-1} + E[token_u] + b_rnn)
//! g_u = W_p s_u + b_p
//! ```
//!
//! Joiner: `logits(t, u) = W_j relu(h_t + g_u) + b_j`.
//!
//! Backpropagation is derived by hand; [`model_backward`] is checked against
//! finite differences in the tests.

mod params;

pub use params::{apply_mask, AdaptationMask, BiasLayout, Group, ParamGroup, ParameterSet};

use crate::error::{Error, Result};
use crate::lattice::{log_softmax_in_place, LogitLattice};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub hidden_dim: usize,
    pub joint_dim: usize,
    /// Vocabulary size including blank.
    pub vocab: usize,
    pub blank_id: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feat_dim: 8,
            hidden_dim: 16,
            joint_dim: 16,
            vocab: 17,
            blank_id: 0,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feat_dim == 0 || self.hidden_dim == 0 || self.joint_dim == 0 {
            return Err(Error::Config("model dimensions must be at least 1".into()));
        }
        if self.vocab < 2 || self.blank_id >= self.vocab {
            return Err(Error::Config(format!(
                "vocab {} with blank id {} is invalid",
                self.vocab, self.blank_id
            )));
        }
        Ok(())
    }

    /// Same shapes, ignoring the seed.
    pub fn same_shape(&self, other: &ModelConfig) -> bool {
        self.feat_dim == other.feat_dim
            && self.hidden_dim == other.hidden_dim
            && self.joint_dim == other.joint_dim
            && self.vocab == other.vocab
            && self.blank_id == other.blank_id
    }
}

/// Frame-major feature matrix `[T][F]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    data: Vec<f64>,
    dim: usize,
}

impl Features {
    pub fn new(data: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::InputShape(format!(
                "{} values do not divide into frames of {dim}",
                data.len()
            )));
        }
        Ok(Features { data, dim })
    }

    pub fn from_frames(frames: &[Vec<f64>]) -> Result<Self> {
        let dim = frames.first().map_or(0, Vec::len);
        if frames.iter().any(|f| f.len() != dim) {
            return Err(Error::InputShape("ragged feature frames".into()));
        }
        Self::new(frames.concat(), dim)
    }

    pub fn frames(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

// Row-major dense helpers. `w` is `[rows, cols]`.

/// `out = w x` (+ `bias` if given).
fn matvec(w: &[f64], cols: usize, x: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = bias.map_or(0.0, |b| b[r]);
        for (a, b) in row.iter().zip(x) {
            acc += a * b;
        }
        *o = acc;
    }
}

/// `out += w^T y`.
fn matvec_t_acc(w: &[f64], cols: usize, y: &[f64], out: &mut [f64]) {
    for (r, &yr) in y.iter().enumerate() {
        if yr == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * yr;
        }
    }
}

/// `gw += y x^T`.
fn outer_acc(gw: &mut [f64], cols: usize, y: &[f64], x: &[f64]) {
    for (r, &yr) in y.iter().enumerate() {
        if yr == 0.0 {
            continue;
        }
        let row = &mut gw[r * cols..(r + 1) * cols];
        for (g, b) in row.iter_mut().zip(x) {
            *g += yr * b;
        }
    }
}

fn add_acc(out: &mut [f64], x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += v;
    }
}

/// Encoder activations for every frame.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderCache {
    pub frames: usize,
    pub z0: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Attention weights `[T][T]`, rows sum to one.
    pub attn: Vec<Vec<f64>>,
    pub ctx: Vec<Vec<f64>>,
    pub z1: Vec<Vec<f64>>,
    /// Encoder outputs `h`, `[T][J]`.
    pub h: Vec<Vec<f64>>,
}

/// Runs the encoder over `features`.
pub fn encode(params: &ParameterSet, features: &Features) -> Result<EncoderCache> {
    let cfg = params.config();
    let (f, d, j) = (cfg.feat_dim, cfg.hidden_dim, cfg.joint_dim);
    if features.dim() != f {
        return Err(Error::InputShape(format!(
            "feature dim {} but model expects {f}",
            features.dim()
        )));
    }
    let t_len = features.frames();
    if t_len == 0 {
        return Err(Error::InputShape("no frames".into()));
    }
    let bias = BiasLayout::new(cfg);
    let b = params.get(Group::BiasAll);

    let mut z0 = vec![vec![0.0; d]; t_len];
    let mut q = vec![vec![0.0; d]; t_len];
    let mut k = vec![vec![0.0; d]; t_len];
    let mut v = vec![vec![0.0; d]; t_len];
    for t in 0..t_len {
        matvec(
            params.get(Group::EncIn),
            f,
            features.frame(t),
            Some(&b[bias.enc_in..bias.enc_in + d]),
            &mut z0[t],
        );
        matvec(params.get(Group::AttnQ), d, &z0[t], None, &mut q[t]);
        matvec(params.get(Group::AttnK), d, &z0[t], None, &mut k[t]);
        matvec(params.get(Group::AttnV), d, &z0[t], None, &mut v[t]);
    }

    let scale = 1.0 / (d as f64).sqrt();
    let mut attn = vec![vec![0.0; t_len]; t_len];
    let mut ctx = vec![vec![0.0; d]; t_len];
    for t in 0..t_len {
        for s in 0..t_len {
            attn[t][s] = q[t].iter().zip(&k[s]).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        log_softmax_in_place(&mut attn[t]);
        for a in attn[t].iter_mut() {
            *a = a.exp();
        }
        for s in 0..t_len {
            let w = attn[t][s];
            for (c, x) in ctx[t].iter_mut().zip(&v[s]) {
                *c += w * x;
            }
        }
    }

    let mut z1 = vec![vec![0.0; d]; t_len];
    let mut h = vec![vec![0.0; j]; t_len];
    for t in 0..t_len {
        matvec(
            params.get(Group::AttnO),
            d,
            &ctx[t],
            Some(&b[bias.attn_o..bias.attn_o + d]),
            &mut z1[t],
        );
        add_acc(&mut z1[t], &z0[t]);
        matvec(
            params.get(Group::EncOut),
            d,
            &z1[t],
            Some(&b[bias.enc_out..bias.enc_out + j]),
            &mut h[t],
        );
        for x in h[t].iter_mut() {
            *x = x.tanh();
        }
    }
    Ok(EncoderCache {
        frames: t_len,
        z0,
        q,
        k,
        v,
        attn,
        ctx,
        z1,
        h,
    })
}

/// Recurrent predictor state after consuming some prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorState {
    /// Hidden state `s_u`.
    pub hidden: Vec<f64>,
    /// Projected output `g_u`.
    pub output: Vec<f64>,
}

impl PredictorState {
    /// State after consuming the start symbol.
    pub fn start(params: &ParameterSet) -> Self {
        let d = params.config().hidden_dim;
        let zero = PredictorState {
            hidden: vec![0.0; d],
            output: Vec::new(),
        };
        zero.step(params, params.config().blank_id)
    }

    /// Consumes `token` and returns the next state.
    pub fn step(&self, params: &ParameterSet, token: usize) -> Self {
        let cfg = params.config();
        let (d, j) = (cfg.hidden_dim, cfg.joint_dim);
        let bias = BiasLayout::new(cfg);
        let b = params.get(Group::BiasAll);
        let rnn = params.get(Group::PredRnn);
        let emb = &params.get(Group::PredEmb)[token * d..(token + 1) * d];
        let mut hidden = vec![0.0; d];
        matvec(
            &rnn[..d * d],
            d,
            &self.hidden,
            Some(&b[bias.pred_rnn..bias.pred_rnn + d]),
            &mut hidden,
        );
        for (s, e) in hidden.iter_mut().zip(emb) {
            *s = (*s + e).tanh();
        }
        let mut output = vec![0.0; j];
        matvec(
            &rnn[d * d..],
            d,
            &hidden,
            Some(&b[bias.pred_proj..bias.pred_proj + j]),
            &mut output,
        );
        PredictorState { hidden, output }
    }
}

/// Raw joiner scores for one `(h_t, g_u)` pair, written into `out` (`[V]`).
pub fn joint_logits(params: &ParameterSet, h: &[f64], g: &[f64], out: &mut [f64]) {
    let cfg = params.config();
    let bias = BiasLayout::new(cfg);
    let b = params.get(Group::BiasAll);
    let hidden: Vec<f64> = h.iter().zip(g).map(|(a, b)| (a + b).max(0.0)).collect();
    matvec(
        params.get(Group::Joiner),
        cfg.joint_dim,
        &hidden,
        Some(&b[bias.joiner..bias.joiner + cfg.vocab]),
        out,
    );
}

/// Log-softmax of [`joint_logits`].
pub fn joint_log_probs(params: &ParameterSet, h: &[f64], g: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; params.config().vocab];
    joint_logits(params, h, g, &mut out);
    log_softmax_in_place(&mut out);
    out
}

/// Everything [`model_backward`] needs from a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCache {
    pub features: Features,
    pub encoder: EncoderCache,
    /// Predictor inputs: the start symbol followed by the targets.
    pub tokens: Vec<usize>,
    /// Predictor hidden states `s_u`, `[U+1][D]`.
    pub pred_hidden: Vec<Vec<f64>>,
    /// Predictor outputs `g_u`, `[U+1][J]`.
    pub pred_out: Vec<Vec<f64>>,
    config: ModelConfig,
}

impl ActivationCache {
    pub fn h(&self) -> &[Vec<f64>] {
        &self.encoder.h
    }

    pub fn g(&self) -> &[Vec<f64>] {
        &self.pred_out
    }
}

/// Runs the whole model and returns the raw `[T][U+1][V]` lattice.
pub fn model_forward(
    params: &ParameterSet,
    features: &Features,
    targets: &[usize],
) -> Result<(LogitLattice, ActivationCache)> {
    let cfg = params.config();
    if let Some(&bad) = targets
        .iter()
        .find(|&&y| y >= cfg.vocab || y == cfg.blank_id)
    {
        return Err(Error::InputShape(format!(
            "target token {bad} is blank or outside vocab {}",
            cfg.vocab
        )));
    }
    let encoder = encode(params, features)?;
    let t_len = encoder.frames;

    let mut tokens = Vec::with_capacity(targets.len() + 1);
    tokens.push(cfg.blank_id);
    tokens.extend_from_slice(targets);
    let mut state = PredictorState::start(params);
    let mut pred_hidden = vec![state.hidden.clone()];
    let mut pred_out = vec![state.output.clone()];
    for &y in targets {
        state = state.step(params, y);
        pred_hidden.push(state.hidden.clone());
        pred_out.push(state.output.clone());
    }

    let v = cfg.vocab;
    let cols = targets.len() + 1;
    let mut scores = vec![0.0; t_len * cols * v];
    for t in 0..t_len {
        for (u, g) in pred_out.iter().enumerate() {
            let o = (t * cols + u) * v;
            joint_logits(params, &encoder.h[t], g, &mut scores[o..o + v]);
        }
    }
    let lattice = LogitLattice::new(scores, t_len, targets.to_vec(), v, cfg.blank_id)?;
    let cache = ActivationCache {
        features: features.clone(),
        encoder,
        tokens,
        pred_hidden,
        pred_out,
        config: cfg.clone(),
    };
    Ok((lattice, cache))
}

/// Gradient of a scalar loss with respect to every parameter, given the
/// loss gradient with respect to the raw lattice scores.
pub fn model_backward(
    params: &ParameterSet,
    cache: &ActivationCache,
    dlogits: &[f64],
) -> Result<ParameterSet> {
    let cfg = params.config();
    if &cache.config != cfg {
        return Err(Error::CacheMismatch("model config differs".into()));
    }
    let (f, d, j, v) = (cfg.feat_dim, cfg.hidden_dim, cfg.joint_dim, cfg.vocab);
    let t_len = cache.encoder.frames;
    let cols = cache.pred_out.len();
    if dlogits.len() != t_len * cols * v {
        return Err(Error::CacheMismatch(format!(
            "gradient has {} entries, lattice has {}",
            dlogits.len(),
            t_len * cols * v
        )));
    }
    let bias = BiasLayout::new(cfg);
    let mut grads = params.zeros_like();
    let mut gb = vec![0.0; bias.len];

    // Joiner.
    let w_joiner = params.get(Group::Joiner);
    let mut dh = vec![vec![0.0; j]; t_len];
    let mut dg = vec![vec![0.0; j]; cols];
    {
        let gj = grads.get_mut(Group::Joiner);
        let mut hidden = vec![0.0; j];
        let mut dhidden = vec![0.0; j];
        for t in 0..t_len {
            for u in 0..cols {
                let o = (t * cols + u) * v;
                let gl = &dlogits[o..o + v];
                if gl.iter().all(|&x| x == 0.0) {
                    continue;
                }
                for (x, (a, b)) in hidden
                    .iter_mut()
                    .zip(cache.encoder.h[t].iter().zip(&cache.pred_out[u]))
                {
                    *x = (a + b).max(0.0);
                }
                outer_acc(gj, j, gl, &hidden);
                add_acc(&mut gb[bias.joiner..bias.joiner + v], gl);
                dhidden.iter_mut().for_each(|x| *x = 0.0);
                matvec_t_acc(w_joiner, j, gl, &mut dhidden);
                for i in 0..j {
                    if hidden[i] > 0.0 {
                        dh[t][i] += dhidden[i];
                        dg[u][i] += dhidden[i];
                    }
                }
            }
        }
    }

    // Predictor, backwards through the recurrence.
    {
        let rnn = params.get(Group::PredRnn);
        let (w_rec, w_proj) = rnn.split_at(d * d);
        let mut g_rnn = vec![0.0; rnn.len()];
        let mut g_emb = vec![0.0; v * d];
        let mut ds_next = vec![0.0; d];
        for u in (0..cols).rev() {
            let s = &cache.pred_hidden[u];
            outer_acc(&mut g_rnn[d * d..], d, &dg[u], s);
            add_acc(&mut gb[bias.pred_proj..bias.pred_proj + j], &dg[u]);
            let mut ds = std::mem::replace(&mut ds_next, vec![0.0; d]);
            matvec_t_acc(w_proj, d, &dg[u], &mut ds);
            let da: Vec<f64> = ds.iter().zip(s).map(|(g, s)| g * (1.0 - s * s)).collect();
            if u > 0 {
                outer_acc(&mut g_rnn[..d * d], d, &da, &cache.pred_hidden[u - 1]);
                matvec_t_acc(w_rec, d, &da, &mut ds_next);
            }
            add_acc(&mut gb[bias.pred_rnn..bias.pred_rnn + d], &da);
            let tok = cache.tokens[u];
            add_acc(&mut g_emb[tok * d..(tok + 1) * d], &da);
        }
        grads.get_mut(Group::PredRnn).copy_from_slice(&g_rnn);
        grads.get_mut(Group::PredEmb).copy_from_slice(&g_emb);
    }

    // Encoder.
    let enc = &cache.encoder;
    let mut dz0 = vec![vec![0.0; d]; t_len];
    let mut dctx = vec![vec![0.0; d]; t_len];
    {
        let w_out = params.get(Group::EncOut);
        let w_o = params.get(Group::AttnO);
        let mut g_out = vec![0.0; j * d];
        let mut g_o = vec![0.0; d * d];
        for t in 0..t_len {
            let dm: Vec<f64> = dh[t]
                .iter()
                .zip(&enc.h[t])
                .map(|(g, h)| g * (1.0 - h * h))
                .collect();
            outer_acc(&mut g_out, d, &dm, &enc.z1[t]);
            add_acc(&mut gb[bias.enc_out..bias.enc_out + j], &dm);
            let mut dz1 = vec![0.0; d];
            matvec_t_acc(w_out, d, &dm, &mut dz1);
            // residual
            add_acc(&mut dz0[t], &dz1);
            outer_acc(&mut g_o, d, &dz1, &enc.ctx[t]);
            add_acc(&mut gb[bias.attn_o..bias.attn_o + d], &dz1);
            matvec_t_acc(w_o, d, &dz1, &mut dctx[t]);
        }
        grads.get_mut(Group::EncOut).copy_from_slice(&g_out);
        grads.get_mut(Group::AttnO).copy_from_slice(&g_o);
    }

    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = vec![vec![0.0; d]; t_len];
    let mut dk = vec![vec![0.0; d]; t_len];
    let mut dv = vec![vec![0.0; d]; t_len];
    for t in 0..t_len {
        // d attn[t][s] = dctx_t . v_s ; softmax backward to scores.
        let da: Vec<f64> = (0..t_len)
            .map(|s| dctx[t].iter().zip(&enc.v[s]).map(|(a, b)| a * b).sum())
            .collect();
        let dot: f64 = enc.attn[t].iter().zip(&da).map(|(a, b)| a * b).sum();
        for s in 0..t_len {
            let w = enc.attn[t][s];
            for (o, c) in dv[s].iter_mut().zip(&dctx[t]) {
                *o += w * c;
            }
            let dscore = w * (da[s] - dot) * scale;
            if dscore == 0.0 {
                continue;
            }
            for i in 0..d {
                dq[t][i] += dscore * enc.k[s][i];
                dk[s][i] += dscore * enc.q[t][i];
            }
        }
    }
    for (group, dproj) in [
        (Group::AttnQ, &dq),
        (Group::AttnK, &dk),
        (Group::AttnV, &dv),
    ] {
        let w = params.get(group);
        let mut gw = vec![0.0; d * d];
        for t in 0..t_len {
            outer_acc(&mut gw, d, &dproj[t], &enc.z0[t]);
            matvec_t_acc(w, d, &dproj[t], &mut dz0[t]);
        }
        grads.get_mut(group).copy_from_slice(&gw);
    }
    {
        let mut g_in = vec![0.0; d * f];
        for t in 0..t_len {
            outer_acc(&mut g_in, f, &dz0[t], cache.features.frame(t));
            add_acc(&mut gb[bias.enc_in..bias.enc_in + d], &dz0[t]);
        }
        grads.get_mut(Group::EncIn).copy_from_slice(&g_in);
    }
    grads.get_mut(Group::BiasAll).copy_from_slice(&gb);
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{rnnt_loss_and_grad, rnnt_loss_full};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            feat_dim: 3,
            hidden_dim: 4,
            joint_dim: 4,
            vocab: 5,
            blank_id: 0,
            seed: 3,
        }
    }

    fn random_features(rng: &mut ChaCha8Rng, t: usize, f: usize) -> Features {
        Features::new((0..t * f).map(|_| rng.random_range(-1.0..1.0)).collect(), f).unwrap()
    }

    /// Params with non-zero biases so every bias path is exercised.
    fn random_params(cfg: &ModelConfig) -> ParameterSet {
        let mut p = ParameterSet::init(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for x in p.get_mut(Group::BiasAll) {
            *x = rng.random_range(-0.5..0.5);
        }
        p
    }

    fn loss(p: &ParameterSet, x: &Features, y: &[usize]) -> f64 {
        let (lat, _) = model_forward(p, x, y).unwrap();
        rnnt_loss_full(&lat.normalize().unwrap())
    }

    #[test]
    fn zero_params_give_uniform_cells() {
        let cfg = ModelConfig::default();
        let p = ParameterSet::zeros(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_features(&mut rng, 4, cfg.feat_dim);
        let (lat, _) = model_forward(&p, &x, &[1, 2]).unwrap();
        assert!(lat.scores().iter().all(|&s| s == 0.0));
        let lp = lat.normalize().unwrap();
        let uniform = -(cfg.vocab as f64).ln();
        assert!(lp.log_probs().iter().all(|&x| (x - uniform).abs() < 1e-15));
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let cfg = ModelConfig::default();
        let p = ParameterSet::init(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_features(&mut rng, 1, cfg.feat_dim);
        let (lat, cache) = model_forward(&p, &x, &[]).unwrap();
        assert_eq!((lat.t_len(), lat.u_len(), lat.vocab()), (1, 0, 17));
        assert_eq!(cache.h().len(), 1);
        assert_eq!(cache.g().len(), 1);

        let x = random_features(&mut rng, 6, cfg.feat_dim);
        let (a, _) = model_forward(&p, &x, &[3, 1, 4]).unwrap();
        let (b, _) = model_forward(&ParameterSet::init(&cfg), &x, &[3, 1, 4]).unwrap();
        assert!(a
            .scores()
            .iter()
            .zip(b.scores())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let cfg = ModelConfig::default();
        let p = ParameterSet::init(&cfg);
        let x = Features::new(vec![0.0; 12], 3).unwrap();
        assert!(matches!(
            model_forward(&p, &x, &[1]),
            Err(Error::InputShape(_))
        ));
        let x = Features::new(vec![0.0; 16], 8).unwrap();
        assert!(model_forward(&p, &x, &[17]).is_err());
        assert!(model_forward(&p, &x, &[0]).is_err());
        assert!(Features::new(vec![0.0; 5], 2).is_err());
    }

    #[test]
    fn incremental_predictor_matches_forward() {
        let cfg = ModelConfig::default();
        let p = ParameterSet::init(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_features(&mut rng, 3, cfg.feat_dim);
        let (lat, cache) = model_forward(&p, &x, &[5, 9]).unwrap();
        let mut st = PredictorState::start(&p);
        for (u, &y) in [5usize, 9].iter().enumerate() {
            assert_eq!(st.output, cache.pred_out[u]);
            st = st.step(&p, y);
        }
        let enc = encode(&p, &x).unwrap();
        let mut row = vec![0.0; cfg.vocab];
        joint_logits(&p, &enc.h[2], &st.output, &mut row);
        assert_eq!(&row[..], lat.row(2, 2));
    }

    #[test]
    fn zero_upstream_gradient() {
        let cfg = small_config();
        let p = random_params(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_features(&mut rng, 3, cfg.feat_dim);
        let (lat, cache) = model_forward(&p, &x, &[1, 2]).unwrap();
        let g = model_backward(&p, &cache, &vec![0.0; lat.scores().len()]).unwrap();
        assert_eq!(g.l2_norm(), 0.0);
    }

    #[test]
    fn backward_rejects_mismatched_cache() {
        let cfg = small_config();
        let p = random_params(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_features(&mut rng, 3, cfg.feat_dim);
        let (lat, cache) = model_forward(&p, &x, &[1]).unwrap();
        assert!(model_backward(&p, &cache, &vec![0.0; lat.scores().len() + 1]).is_err());
        let other = ParameterSet::init(&ModelConfig {
            hidden_dim: 5,
            ..cfg
        });
        assert!(matches!(
            model_backward(&other, &cache, lat.scores()),
            Err(Error::CacheMismatch(_))
        ));
    }

    #[test]
    fn unused_embedding_rows_get_no_gradient() {
        let cfg = small_config();
        let p = random_params(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_features(&mut rng, 4, cfg.feat_dim);
        let (lat, cache) = model_forward(&p, &x, &[1, 3]).unwrap();
        let (_, dl) = rnnt_loss_and_grad(&lat.normalize().unwrap());
        let g = model_backward(&p, &cache, &dl).unwrap();
        let d = cfg.hidden_dim;
        let emb = g.get(Group::PredEmb);
        for tok in [2usize, 4] {
            assert!(emb[tok * d..(tok + 1) * d].iter().all(|&x| x == 0.0));
        }
        for tok in [0usize, 1, 3] {
            assert!(emb[tok * d..(tok + 1) * d].iter().any(|&x| x != 0.0));
        }
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let cfg = small_config();
        let p = random_params(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_features(&mut rng, 4, cfg.feat_dim);
        let y = [2usize, 4, 1];
        let (lat, cache) = model_forward(&p, &x, &y).unwrap();
        let (_, dl) = rnnt_loss_and_grad(&lat.normalize().unwrap());
        let g = model_backward(&p, &cache, &dl).unwrap();
        let h = 1e-5;
        for group in Group::ALL {
            let mut num = 0.0f64;
            let mut den = 0.0f64;
            for i in 0..p.get(group).len() {
                let mut plus = p.clone();
                plus.get_mut(group)[i] += h;
                let mut minus = p.clone();
                minus.get_mut(group)[i] -= h;
                let fd = (loss(&plus, &x, &y) - loss(&minus, &x, &y)) / (2.0 * h);
                let an = g.get(group)[i];
                num += (fd - an).powi(2);
                den += fd.powi(2).max(an.powi(2));
            }
            let rel = num.sqrt() / den.sqrt().max(1e-12);
            assert!(rel < 1e-4, "group {group}: rel err {rel}");
        }
    }
}
