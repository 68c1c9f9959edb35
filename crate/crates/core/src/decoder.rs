//! Greedy and beam decoding of the toy transducer.
//!
//! Both decoders are frame-synchronous: at frame `t` a hypothesis may emit up
//! to `max_emits_per_frame` tokens and then takes a blank to frame `t+1`.
//! The beam search keeps per-prefix total scores (log-sum over the
//! alignments it has seen) and, separately, the single best alignment of
//! each prefix, which is what self-restricted training can band around.

use std::cmp::Ordering;

use crate::error::Result;
use crate::lattice::{log_add, AlignStep, AlignmentPath};
use crate::model::{encode, joint_log_probs, Features, ParameterSet, PredictorState};

pub const DEFAULT_MAX_EMITS_PER_FRAME: usize = 4;

/// A decoded token sequence with its score and best alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// Total log-probability of the sequence over the alignments the decoder
    /// kept. For greedy decoding this is the single path's log-probability.
    pub log_prob: f64,
    pub alignment: AlignmentPath,
    /// `log_prob / (tokens + frames)`.
    pub norm_score: f64,
}

impl Hypothesis {
    pub fn new(tokens: Vec<usize>, log_prob: f64, alignment: AlignmentPath) -> Self {
        let steps = (tokens.len() + alignment.frames()).max(1);
        let norm_score = log_prob / steps as f64;
        Hypothesis {
            tokens,
            log_prob,
            alignment,
            norm_score,
        }
    }

    pub fn frames(&self) -> usize {
        self.alignment.frames()
    }
}

/// Per-step normalized log-probability used for confidence filtering.
pub fn confidence(h: &Hypothesis) -> f64 {
    h.norm_score
}

/// Index of the largest entry; ties go to the lowest index.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Frame-synchronous greedy search.
pub fn greedy_decode(
    params: &ParameterSet,
    features: &Features,
    max_emits_per_frame: usize,
) -> Result<Hypothesis> {
    let enc = encode(params, features)?;
    let blank = params.config().blank_id;
    let mut state = PredictorState::start(params);
    let mut tokens = Vec::new();
    let mut steps = Vec::new();
    let mut log_prob = 0.0;
    for t in 0..enc.frames {
        let mut emitted = 0;
        loop {
            let lp = joint_log_probs(params, &enc.h[t], &state.output);
            let mut k = argmax(&lp);
            if emitted >= max_emits_per_frame.max(1) {
                k = blank;
            }
            steps.push(AlignStep {
                t,
                u: tokens.len(),
                label: k,
            });
            log_prob += lp[k];
            if k == blank {
                break;
            }
            tokens.push(k);
            state = state.step(params, k);
            emitted += 1;
        }
    }
    let alignment = AlignmentPath { steps, log_prob };
    Ok(Hypothesis::new(tokens, log_prob, alignment))
}

#[derive(Debug, Clone)]
struct Beam {
    tokens: Vec<usize>,
    state: PredictorState,
    score: f64,
    best: f64,
    steps: Vec<AlignStep>,
}

struct Candidate {
    score: f64,
    parent: usize,
    label: usize,
}

fn by_score_desc(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.parent.cmp(&b.parent))
        .then(a.label.cmp(&b.label))
}

/// Beam search with [`DEFAULT_MAX_EMITS_PER_FRAME`].
pub fn beam_decode(
    params: &ParameterSet,
    features: &Features,
    beam_size: usize,
) -> Result<Vec<Hypothesis>> {
    beam_decode_with(params, features, beam_size, DEFAULT_MAX_EMITS_PER_FRAME)
}

/// Transducer beam search, best hypothesis first.
///
/// Within a frame, expansion proceeds in levels (number of tokens emitted in
/// this frame so far). At each level every active hypothesis proposes a
/// blank and, below the emission cap, every token; the `beam_size` best
/// proposals survive. Surviving blanks move to the next frame, where
/// identical prefixes are merged by log-sum of their scores while keeping
/// the better single alignment. With `beam_size = 1` this is exactly
/// [`greedy_decode`].
pub fn beam_decode_with(
    params: &ParameterSet,
    features: &Features,
    beam_size: usize,
    max_emits_per_frame: usize,
) -> Result<Vec<Hypothesis>> {
    let beam_size = beam_size.max(1);
    let max_emits = max_emits_per_frame.max(1);
    let enc = encode(params, features)?;
    let blank = params.config().blank_id;
    let vocab = params.config().vocab;

    let mut hyps = vec![Beam {
        tokens: Vec::new(),
        state: PredictorState::start(params),
        score: 0.0,
        best: 0.0,
        steps: Vec::new(),
    }];
    for t in 0..enc.frames {
        let mut next: Vec<Beam> = Vec::new();
        let mut active = std::mem::take(&mut hyps);
        for level in 0..=max_emits {
            if active.is_empty() {
                break;
            }
            let log_probs: Vec<Vec<f64>> = active
                .iter()
                .map(|b| joint_log_probs(params, &enc.h[t], &b.state.output))
                .collect();
            let mut cands = Vec::with_capacity(active.len() * vocab);
            for (i, (beam, lp)) in active.iter().zip(&log_probs).enumerate() {
                for (k, &p) in lp.iter().enumerate() {
                    if k != blank && level == max_emits {
                        continue;
                    }
                    cands.push(Candidate {
                        score: beam.score + p,
                        parent: i,
                        label: k,
                    });
                }
            }
            cands.sort_by(by_score_desc);
            cands.truncate(beam_size);

            let mut expanded = Vec::new();
            for c in cands {
                let parent = &active[c.parent];
                let step_lp = log_probs[c.parent][c.label];
                let mut steps = parent.steps.clone();
                steps.push(AlignStep {
                    t,
                    u: parent.tokens.len(),
                    label: c.label,
                });
                let best = parent.best + step_lp;
                if c.label == blank {
                    if let Some(existing) = next.iter_mut().find(|b| b.tokens == parent.tokens) {
                        existing.score = log_add(existing.score, c.score);
                        if best > existing.best {
                            existing.best = best;
                            existing.steps = steps;
                        }
                    } else {
                        next.push(Beam {
                            tokens: parent.tokens.clone(),
                            state: parent.state.clone(),
                            score: c.score,
                            best,
                            steps,
                        });
                    }
                } else {
                    let mut tokens = parent.tokens.clone();
                    tokens.push(c.label);
                    expanded.push(Beam {
                        tokens,
                        state: parent.state.step(params, c.label),
                        score: c.score,
                        best,
                        steps,
                    });
                }
            }
            active = expanded;
        }
        next.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        next.truncate(beam_size);
        hyps = next;
    }
    Ok(hyps
        .into_iter()
        .map(|b| {
            let alignment = AlignmentPath {
                steps: b.steps,
                log_prob: b.best,
            };
            Hypothesis::new(b.tokens, b.score, alignment)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{rnnt_forward, viterbi_align};
    use crate::model::{model_forward, Group, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn config(vocab: usize) -> ModelConfig {
        ModelConfig {
            feat_dim: 3,
            hidden_dim: 4,
            joint_dim: 4,
            vocab,
            blank_id: 0,
            seed: 11,
        }
    }

    fn sharpened(cfg: &ModelConfig, seed: u64, gain: f64) -> ParameterSet {
        let mut p = ParameterSet::init(&ModelConfig {
            seed,
            ..cfg.clone()
        });
        for x in p.get_mut(Group::Joiner) {
            *x *= gain;
        }
        p
    }

    fn features(rng: &mut ChaCha8Rng, t: usize, f: usize) -> Features {
        Features::new((0..t * f).map(|_| rng.random_range(-2.0..2.0)).collect(), f).unwrap()
    }

    #[test]
    fn all_blank_model_decodes_nothing() {
        let cfg = config(5);
        let mut p = ParameterSet::zeros(&cfg);
        let bias = crate::model::BiasLayout::new(&cfg);
        p.get_mut(Group::BiasAll)[bias.joiner + cfg.blank_id] = 3.0;
        let x = Features::new(vec![0.5; 4 * 3], 3).unwrap();
        let h = greedy_decode(&p, &x, 4).unwrap();
        assert!(h.tokens.is_empty());
        assert_eq!(h.alignment.steps.len(), 4);
        assert!(h.alignment.steps.iter().all(|s| s.label == 0));
        let beams = beam_decode(&p, &x, 3).unwrap();
        assert!(beams[0].tokens.is_empty());
    }

    #[test]
    fn single_frame_forced_emission() {
        // Token 2 dominates at the start state, blank dominates afterwards.
        let cfg = config(4);
        let mut p = ParameterSet::zeros(&cfg);
        let d = cfg.hidden_dim;
        let bias = crate::model::BiasLayout::new(&cfg);
        // Start symbol embedding drives the predictor output positive on
        // unit 0; token 2 drives it negative.
        p.get_mut(Group::PredEmb)[0] = 3.0; // blank/start row
        p.get_mut(Group::PredEmb)[2 * d] = -3.0;
        // W_p: g[0] = s[0].
        p.get_mut(Group::PredRnn)[d * d] = 1.0;
        // Joiner: unit 0 of relu(h+g) votes for token 2.
        p.get_mut(Group::Joiner)[2 * cfg.joint_dim] = 5.0;
        p.get_mut(Group::BiasAll)[bias.joiner] = 1.0;
        let x = Features::new(vec![0.0; 3], 3).unwrap();
        let h = greedy_decode(&p, &x, 4).unwrap();
        assert_eq!(h.tokens, vec![2]);
        h.alignment.validate(1, &[2], 0).unwrap();
    }

    #[test]
    fn confidence_is_per_step_log_prob() {
        let path = AlignmentPath::from_emit_frames(&[1], &[0], 2, 0).unwrap();
        let h = Hypothesis::new(vec![1], -0.6, path.clone());
        assert!((confidence(&h) + 0.2).abs() < 1e-15);
        assert_eq!(
            confidence(&Hypothesis::new(vec![1], 0.0, path.clone())),
            0.0
        );
        let worse = Hypothesis::new(vec![1], -0.9, path);
        assert!(confidence(&worse) < confidence(&h));
    }

    #[test]
    fn greedy_alignment_and_score_bounds() {
        let cfg = config(5);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for seed in 0..30 {
            let p = sharpened(&cfg, seed, 4.0);
            let t_len = rng.random_range(1..7);
            let x = features(&mut rng, t_len, 3);
            let h = greedy_decode(&p, &x, 4).unwrap();
            h.alignment.validate(x.frames(), &h.tokens, 0).unwrap();
            assert!(h.log_prob <= 0.0);
            let (lat, _) = model_forward(&p, &x, &h.tokens).unwrap();
            let lp = lat.normalize().unwrap();
            assert_eq!(h.alignment.score(&lp).unwrap(), h.log_prob);
            let vit = viterbi_align(&lp);
            let total = rnnt_forward(&lp).total_log_prob;
            assert!(h.log_prob <= vit.log_prob);
            assert!(vit.log_prob <= total);
        }
    }

    #[test]
    fn unit_beam_equals_greedy() {
        let cfg = config(6);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for seed in 0..30 {
            let p = sharpened(&cfg, seed, 3.0);
            let t_len = rng.random_range(1..8);
            let x = features(&mut rng, t_len, 3);
            let g = greedy_decode(&p, &x, 2).unwrap();
            let b = beam_decode_with(&p, &x, 1, 2).unwrap();
            assert_eq!(b.len(), 1);
            assert_eq!(b[0].tokens, g.tokens);
            assert_eq!(b[0].alignment.steps, g.alignment.steps);
        }
    }

    #[test]
    fn beam_contract_and_monotone_in_beam() {
        let cfg = config(6);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for seed in 0..40 {
            let p = sharpened(&cfg, seed, 3.0);
            let t_len = rng.random_range(1..8);
            let x = features(&mut rng, t_len, 3);
            let g = greedy_decode(&p, &x, 4).unwrap();
            let beams = beam_decode(&p, &x, 4).unwrap();
            assert!(!beams.is_empty() && beams.len() <= 4);
            for w in beams.windows(2) {
                assert!(w[0].log_prob >= w[1].log_prob);
            }
            for h in &beams {
                h.alignment.validate(x.frames(), &h.tokens, 0).unwrap();
                assert!(h.log_prob <= 0.0);
                assert!(h.alignment.log_prob <= h.log_prob + 1e-12);
            }
            assert!(beams[0].log_prob >= g.log_prob - 1e-12, "seed {seed}");
        }
    }

    #[test]
    fn decoding_is_deterministic() {
        let cfg = config(6);
        let p = sharpened(&cfg, 3, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let x = features(&mut rng, 6, 3);
        assert_eq!(
            beam_decode(&p, &x, 4).unwrap(),
            beam_decode(&p, &x, 4).unwrap()
        );
        assert_eq!(
            greedy_decode(&p, &x, 4).unwrap(),
            greedy_decode(&p, &x, 4).unwrap()
        );
    }

    /// Every decoding path with at most `cap` emissions per frame, grouped by
    /// token sequence: (total log-prob, best single path log-prob).
    fn enumerate_decodings(
        p: &ParameterSet,
        x: &Features,
        cap: usize,
    ) -> HashMap<Vec<usize>, (f64, f64)> {
        let enc = encode(p, x).unwrap();
        let mut out: HashMap<Vec<usize>, (f64, f64)> = HashMap::new();
        fn go(
            p: &ParameterSet,
            h: &[Vec<f64>],
            t: usize,
            emitted: usize,
            cap: usize,
            tokens: &mut Vec<usize>,
            state: &PredictorState,
            score: f64,
            out: &mut HashMap<Vec<usize>, (f64, f64)>,
        ) {
            let lp = joint_log_probs(p, &h[t], &state.output);
            let blank = p.config().blank_id;
            let after_blank = score + lp[blank];
            if t + 1 == h.len() {
                let e = out
                    .entry(tokens.clone())
                    .or_insert((f64::NEG_INFINITY, f64::NEG_INFINITY));
                e.0 = log_add(e.0, after_blank);
                e.1 = e.1.max(after_blank);
            } else {
                go(p, h, t + 1, 0, cap, tokens, state, after_blank, out);
            }
            if emitted < cap {
                for k in 0..lp.len() {
                    if k == blank {
                        continue;
                    }
                    tokens.push(k);
                    let next = state.step(p, k);
                    go(p, h, t, emitted + 1, cap, tokens, &next, score + lp[k], out);
                    tokens.pop();
                }
            }
        }
        let start = PredictorState::start(p);
        go(p, &enc.h, 0, 0, cap, &mut Vec::new(), &start, 0.0, &mut out);
        out
    }

    #[test]
    fn unbounded_beam_finds_enumerated_best_sequence() {
        let cfg = config(3);
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        for seed in 0..20 {
            let p = sharpened(&cfg, seed, 2.0);
            let t_len = rng.random_range(1..=4);
            let x = features(&mut rng, t_len, 3);
            let table = enumerate_decodings(&p, &x, 2);
            let (best_seq, &(best_total, best_path)) = table
                .iter()
                .max_by(|a, b| a.1 .0.partial_cmp(&b.1 .0).unwrap())
                .unwrap();
            let beams = beam_decode_with(&p, &x, 100_000, 2).unwrap();
            assert_eq!(beams.len(), table.len());
            assert_eq!(&beams[0].tokens, best_seq);
            assert!((beams[0].log_prob - best_total).abs() < 1e-9);
            assert!((beams[0].alignment.log_prob - best_path).abs() < 1e-9);
        }
    }
}
