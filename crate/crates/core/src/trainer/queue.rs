use std::collections::VecDeque;
use std::sync::Arc;

use crate::decoder::{beam_decode_with, Hypothesis, DEFAULT_MAX_EMITS_PER_FRAME};
use crate::error::{Error, Result};
use crate::lattice::AlignmentPath;
use crate::model::{Features, ParameterSet};

/// A raw utterance arriving at a device, before labeling.
#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub features: Features,
    /// Ground-truth tokens and alignment, when the source knows them.
    pub truth: Option<AlignmentPath>,
}

/// A labeled training example.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoExample {
    pub features: Features,
    pub hypothesis: Hypothesis,
    /// Best alignment seen while decoding the hypothesis.
    pub cached_alignment: AlignmentPath,
    /// Present only for examples labeled with ground truth.
    pub true_alignment: Option<AlignmentPath>,
}

impl PseudoExample {
    /// An example labeled with its ground truth. Confidence is 0, so no
    /// threshold filters it out.
    pub fn supervised(features: Features, truth: AlignmentPath) -> Self {
        let hypothesis = Hypothesis::new(truth.tokens(), 0.0, truth.clone());
        PseudoExample {
            features,
            hypothesis,
            cached_alignment: truth.clone(),
            true_alignment: Some(truth),
        }
    }

    pub fn targets(&self) -> &[usize] {
        &self.hypothesis.tokens
    }
}

/// Decodes `features` with the frozen model and keeps the top hypothesis.
pub fn label_example(
    w0: &ParameterSet,
    features: Features,
    beam_size: usize,
) -> Result<PseudoExample> {
    let mut beams = beam_decode_with(w0, &features, beam_size, DEFAULT_MAX_EMITS_PER_FRAME)?;
    let hypothesis = beams.swap_remove(0);
    Ok(PseudoExample {
        features,
        cached_alignment: hypothesis.alignment.clone(),
        hypothesis,
        true_alignment: None,
    })
}

/// Bounded FIFO of labeled examples.
#[derive(Debug, Clone)]
pub struct ExampleQueue {
    buf: VecDeque<PseudoExample>,
    capacity: usize,
}

impl ExampleQueue {
    pub fn new(capacity: usize) -> Self {
        ExampleQueue {
            buf: VecDeque::new(),
            capacity: capacity.max(1),
        }
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Returns `false` (dropping nothing) when the queue is full.
    pub fn push(&mut self, example: PseudoExample) -> bool {
        if self.buf.len() >= self.capacity {
            return false;
        }
        self.buf.push_back(example);
        true
    }

    /// `None` when empty.
    pub fn pop(&mut self) -> Option<PseudoExample> {
        self.buf.pop_front()
    }

    /// Up to `n` examples in push order.
    pub fn pop_batch(&mut self, n: usize) -> Vec<PseudoExample> {
        let n = n.min(self.buf.len());
        self.buf.drain(..n).collect()
    }
}

/// Where a device's utterances come from.
pub trait RequestSource: Send {
    /// `None` once the source is exhausted.
    fn next_request(&mut self) -> Option<Request>;
}

/// A finite source replaying a fixed list.
#[derive(Debug, Clone, Default)]
pub struct VecSource {
    items: VecDeque<Request>,
}

impl VecSource {
    pub fn new(items: Vec<Request>) -> Self {
        VecSource {
            items: items.into(),
        }
    }
}

impl RequestSource for VecSource {
    fn next_request(&mut self) -> Option<Request> {
        self.items.pop_front()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMode {
    /// Beam-search labels from the frozen model.
    Pseudo,
    /// Ground truth carried by the request.
    True,
}

impl std::str::FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pseudo" => Ok(LabelMode::Pseudo),
            "true" => Ok(LabelMode::True),
            other => Err(Error::Config(format!("unknown label mode `{other}`"))),
        }
    }
}

/// Labels incoming requests with the frozen pretrained model.
#[derive(Debug, Clone)]
pub struct AsrService {
    w0: Arc<ParameterSet>,
    beam_size: usize,
    mode: LabelMode,
}

impl AsrService {
    pub fn new(w0: Arc<ParameterSet>, beam_size: usize, mode: LabelMode) -> Self {
        AsrService {
            w0,
            beam_size,
            mode,
        }
    }

    pub fn w0(&self) -> &ParameterSet {
        &self.w0
    }

    pub fn label(&self, request: Request) -> Result<PseudoExample> {
        match self.mode {
            LabelMode::Pseudo => label_example(&self.w0, request.features, self.beam_size),
            LabelMode::True => {
                let truth = request.truth.ok_or_else(|| {
                    Error::Config("true labels requested but the source has none".into())
                })?;
                Ok(PseudoExample::supervised(request.features, truth))
            }
        }
    }
}

/// One client: its data stream, labeler and example queue.
pub struct Device {
    pub id: usize,
    source: Box<dyn RequestSource>,
    service: AsrService,
    queue: ExampleQueue,
}

impl Device {
    pub fn new(id: usize, source: Box<dyn RequestSource>, service: AsrService) -> Self {
        Device {
            id,
            source,
            service,
            queue: ExampleQueue::new(1024),
        }
    }

    pub fn service(&self) -> &AsrService {
        &self.service
    }

    pub fn queue(&self) -> &ExampleQueue {
        &self.queue
    }

    /// Pops a batch, labeling new requests as needed. Returns a short batch
    /// when the source runs dry, and `None` when nothing at all is left.
    pub fn next_batch(&mut self, batch_size: usize) -> Result<Option<Vec<PseudoExample>>> {
        while self.queue.len() < batch_size {
            let Some(request) = self.source.next_request() else {
                break;
            };
            let example = self.service.label(request)?;
            if !self.queue.push(example) {
                break;
            }
        }
        if self.queue.is_empty() {
            return Ok(None);
        }
        Ok(Some(self.queue.pop_batch(batch_size)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn example(tag: f64) -> PseudoExample {
        let truth = AlignmentPath::from_emit_frames(&[], &[], 1, 0).unwrap();
        PseudoExample::supervised(Features::new(vec![tag; 2], 2).unwrap(), truth)
    }

    #[test]
    fn queue_is_fifo_and_signals_empty() {
        let mut q = ExampleQueue::new(3);
        assert!(q.pop().is_none());
        for i in 0..3 {
            assert!(q.push(example(i as f64)));
        }
        assert!(!q.push(example(9.0)));
        assert_eq!(q.pop().unwrap().features.as_slice()[0], 0.0);
        let rest = q.pop_batch(5);
        assert_eq!(rest.len(), 2);
        assert_eq!(rest[0].features.as_slice()[0], 1.0);
        assert_eq!(rest[1].features.as_slice()[0], 2.0);
        assert!(q.pop().is_none());
    }

    #[test]
    fn labeling_is_deterministic_and_uses_w0() {
        let cfg = ModelConfig {
            feat_dim: 3,
            hidden_dim: 4,
            joint_dim: 4,
            vocab: 5,
            blank_id: 0,
            seed: 3,
        };
        let w0 = ParameterSet::init(&cfg);
        let x = Features::new((0..15).map(|i| (i as f64 * 0.7).sin()).collect(), 3).unwrap();
        let a = label_example(&w0, x.clone(), 4).unwrap();
        let b = label_example(&w0, x.clone(), 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.cached_alignment, a.hypothesis.alignment);
        a.cached_alignment.validate(5, a.targets(), 0).unwrap();
        assert!(a.true_alignment.is_none());
    }

    #[test]
    fn device_batches_drain_finite_source() {
        let cfg = ModelConfig {
            feat_dim: 2,
            hidden_dim: 3,
            joint_dim: 3,
            vocab: 4,
            blank_id: 0,
            seed: 1,
        };
        let truth = AlignmentPath::from_emit_frames(&[2], &[0], 2, 0).unwrap();
        let reqs: Vec<Request> = (0..5)
            .map(|i| Request {
                features: Features::new(vec![i as f64; 4], 2).unwrap(),
                truth: Some(truth.clone()),
            })
            .collect();
        let service = AsrService::new(Arc::new(ParameterSet::init(&cfg)), 2, LabelMode::True);
        let mut dev = Device::new(0, Box::new(VecSource::new(reqs)), service);
        assert_eq!(dev.next_batch(2).unwrap().unwrap().len(), 2);
        assert_eq!(dev.next_batch(2).unwrap().unwrap().len(), 2);
        let last = dev.next_batch(2).unwrap().unwrap();
        assert_eq!(last.len(), 1);
        assert_eq!(last[0].features.as_slice()[0], 4.0);
        assert_eq!(last[0].targets(), &[2]);
        assert!(dev.next_batch(2).unwrap().is_none());
    }

    #[test]
    fn true_labels_require_truth() {
        let cfg = ModelConfig::default();
        let service = AsrService::new(Arc::new(ParameterSet::zeros(&cfg)), 2, LabelMode::True);
        let req = Request {
            features: Features::new(vec![0.0; 8], 8).unwrap(),
            truth: None,
        };
        assert!(matches!(service.label(req), Err(Error::Config(_))));
    }
}
