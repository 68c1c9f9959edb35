use rayon::prelude::*;

use crate::decoder::{greedy_decode, DEFAULT_MAX_EMITS_PER_FRAME};
use crate::error::{Error, Result};
use crate::lattice::rnnt_loss_full;
use crate::model::{model_forward, ParameterSet};

use super::data::Utterance;

/// Unit-cost edit distance.
pub fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            curr[j + 1] = sub.min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// `levenshtein(hyp, reference) / |reference|`. An empty reference counts
/// every hypothesis token as an error.
pub fn token_error_rate(hyp: &[usize], reference: &[usize]) -> f64 {
    levenshtein(hyp, reference) as f64 / reference.len().max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    /// Total edit distance over total reference length.
    pub ter: f64,
    /// Mean full transducer loss under the true labels.
    pub mean_loss: f64,
}

/// Greedy-decodes every utterance and scores it against the truth.
pub fn evaluate(params: &ParameterSet, dataset: &[Utterance]) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per_utt: Vec<(usize, usize, f64)> = dataset
        .par_iter()
        .map(|u| {
            let hyp = greedy_decode(params, &u.features, DEFAULT_MAX_EMITS_PER_FRAME)?;
            let (lat, _) = model_forward(params, &u.features, &u.tokens)?;
            let loss = rnnt_loss_full(&lat.normalize()?);
            Ok((levenshtein(&hyp.tokens, &u.tokens), u.tokens.len(), loss))
        })
        .collect::<Result<_>>()?;
    let (mut errs, mut words, mut loss) = (0, 0, 0.0);
    for (e, w, l) in per_utt {
        errs += e;
        words += w;
        loss += l;
    }
    Ok(Evaluation {
        ter: errs as f64 / words.max(1) as f64,
        mean_loss: loss / dataset.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edit_distance_examples() {
        assert_eq!(levenshtein(&[1, 3], &[1, 2, 3]), 1);
        assert!((token_error_rate(&[1, 3], &[1, 2, 3]) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(levenshtein(&[2, 3], &[1]), 2);
        assert_eq!(token_error_rate(&[2, 3], &[1]), 2.0);
        assert_eq!(token_error_rate(&[1, 2], &[2, 1]), 1.0);
        assert_eq!(token_error_rate(&[4, 5], &[4, 5]), 0.0);
        assert_eq!(token_error_rate(&[], &[1, 2, 3, 4]), 1.0);
        assert_eq!(levenshtein(&[], &[]), 0);
    }

    #[test]
    fn distance_is_symmetric_and_bounded() {
        let seqs: [&[usize]; 5] = [&[], &[1], &[1, 2, 3], &[3, 2, 1, 1], &[2, 2]];
        for a in seqs {
            for b in seqs {
                let d = levenshtein(a, b);
                assert_eq!(d, levenshtein(b, a));
                assert!(d <= a.len().max(b.len()));
                assert!(d >= a.len().abs_diff(b.len()));
            }
        }
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let p = ParameterSet::zeros(&crate::model::ModelConfig::default());
        assert!(matches!(evaluate(&p, &[]), Err(Error::EmptyDataset)));
    }
}
