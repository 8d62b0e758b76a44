//! Array-shaped domain types flowing between blocks.

use ndarray::{Array3, Array4};

use crate::config::{INPUT_SIZE, NUM_CLASSES};
use crate::error::ShapeError;

/// Rank-4 real feature map in (batch, channel, height, width) layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap(pub Array4<f64>);

impl FeatureMap {
    pub fn new(data: Array4<f64>) -> Result<FeatureMap, ShapeError> {
        let (b, c, h, w) = data.dim();
        if b == 0 || c == 0 || h == 0 || w == 0 {
            return Err(ShapeError(format!(
                "feature map dims must all be >= 1, got ({b},{c},{h},{w})"
            )));
        }
        let fm = FeatureMap(data);
        fm.debug_assert_finite("new feature map");
        Ok(fm)
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.0.dim()
    }

    /// Debug-mode guard: no NaN/Inf anywhere. Compiled out in release.
    pub fn debug_assert_finite(&self, context: &str) {
        debug_assert!(
            self.0.iter().all(|v| v.is_finite()),
            "non-finite value in {context}"
        );
    }
}

/// A batch of preprocessed single-channel images, (B, 1, 224, 224) in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch(pub Array4<f64>);

impl ImageBatch {
    pub fn new(pixels: Array4<f64>) -> Result<ImageBatch, ShapeError> {
        let (b, c, h, w) = pixels.dim();
        if b == 0 || c != 1 || h != INPUT_SIZE || w != INPUT_SIZE {
            return Err(ShapeError(format!(
                "image batch must be (B,1,{INPUT_SIZE},{INPUT_SIZE}) with B >= 1, got ({b},{c},{h},{w})"
            )));
        }
        Ok(ImageBatch(pixels))
    }

    pub fn batch(&self) -> usize {
        self.0.dim().0
    }
}

/// Integer class masks for a batch of slices, (B, 224, 224), values 0..=8.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask(pub Array3<u8>);

impl LabelMask {
    pub fn new(labels: Array3<u8>) -> Result<LabelMask, ShapeError> {
        let (b, h, w) = labels.dim();
        if b == 0 || h != INPUT_SIZE || w != INPUT_SIZE {
            return Err(ShapeError(format!(
                "label mask must be (B,{INPUT_SIZE},{INPUT_SIZE}) with B >= 1, got ({b},{h},{w})"
            )));
        }
        if let Some(bad) = labels.iter().find(|v| **v as usize >= NUM_CLASSES) {
            return Err(ShapeError(format!(
                "label value {bad} outside 0..={}",
                NUM_CLASSES - 1
            )));
        }
        Ok(LabelMask(labels))
    }
}
