use crate::autodiff::Tensor;
use crate::{Error, Result};

/// Frame matrix (`frames × dim`) plus the duration of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    frames: Tensor,
    frame_ms: f64,
}

impl FeatureSequence {
    pub fn new(frames: Tensor, frame_ms: f64) -> Result<Self> {
        if frames.rows() == 0 {
            return Err(Error::EmptyFeatures);
        }
        if !(frame_ms > 0.0) {
            return Err(Error::InvalidConfig(format!("frame duration must be positive, got {frame_ms}")));
        }
        Ok(FeatureSequence { frames, frame_ms })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn frame_ms(&self) -> f64 {
        self.frame_ms
    }

    pub fn duration_ms(&self) -> f64 {
        self.len() as f64 * self.frame_ms
    }

    /// First `n` frames.
    pub fn prefix(&self, n: usize) -> Result<FeatureSequence> {
        let n = n.min(self.len());
        let cols = self.dim();
        let data = self.frames.data()[..n * cols].to_vec();
        FeatureSequence::new(Tensor::from_vec(n, cols, data)?, self.frame_ms)
    }
}
