//! In-memory video and caption records.

use std::collections::BTreeMap;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `T×d` frame-level features of one expert for one video.
pub type FeatureSequence<T = f64> = Tensor<T>;

/// `L×d_w` word vectors of one caption.
pub type CaptionSequence<T = f64> = Tensor<T>;

#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord<T = f64> {
    pub id: String,
    /// Expert name → features; `None` (or an absent key) marks a missing expert.
    pub experts: BTreeMap<String, Option<FeatureSequence<T>>>,
    pub captions: Vec<CaptionSequence<T>>,
}

impl<T: Scalar> VideoRecord<T> {
    pub fn new(id: impl Into<String>) -> Self {
        VideoRecord {
            id: id.into(),
            experts: BTreeMap::new(),
            captions: Vec::new(),
        }
    }

    pub fn with_expert(mut self, name: &str, seq: Option<FeatureSequence<T>>) -> Self {
        self.experts.insert(name.to_string(), seq);
        self
    }

    pub fn with_caption(mut self, caption: CaptionSequence<T>) -> Self {
        self.captions.push(caption);
        self
    }

    /// Features of `name` when present and non-empty. Zero-row sequences are
    /// treated exactly like missing ones.
    pub fn expert(&self, name: &str) -> Option<&FeatureSequence<T>> {
        match self.experts.get(name) {
            Some(Some(seq)) if seq.rows() > 0 && !seq.is_empty() => Some(seq),
            _ => None,
        }
    }
}
