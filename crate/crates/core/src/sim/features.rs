use super::{CsiFrame, CsiShape};
use crate::error::{Error, Result};
use crate::numerics::{minmax_in_place, RealVector, SpectrumPlan};

/// Per-frame feature map: magnitude spectrum across subcarriers for every
/// antenna pair, concatenated and min-max normalized to [0, 1].
#[derive(Clone)]
pub struct FeatureExtractor {
    shape: CsiShape,
    plan: SpectrumPlan,
}

impl FeatureExtractor {
    pub fn new(shape: CsiShape) -> Result<Self> {
        shape.validate()?;
        Ok(Self {
            shape,
            plan: SpectrumPlan::new(shape.n_sub)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn extract_into(&mut self, frame: &CsiFrame, out: &mut [f64]) -> Result<()> {
        if frame.shape != self.shape {
            return Err(Error::shape(format!(
                "extractor built for {:?}, frame has {:?}",
                self.shape, frame.shape
            )));
        }
        if out.len() != self.dim() {
            return Err(Error::shape(format!(
                "feature buffer of {} for dim {}",
                out.len(),
                self.dim()
            )));
        }
        if let Some(index) = frame
            .values
            .iter()
            .position(|c| !c.re.is_finite() || !c.im.is_finite())
        {
            return Err(Error::NonFinite {
                index,
                value: frame.values[index].norm(),
            });
        }
        let k = self.shape.n_sub;
        for (pair, chunk) in frame.values.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
            self.plan.magnitudes_into(pair, chunk)?;
        }
        minmax_in_place(out);
        Ok(())
    }

    pub fn extract(&mut self, frame: &CsiFrame) -> Result<RealVector> {
        let mut out = vec![0.0; self.dim()];
        self.extract_into(frame, &mut out)?;
        RealVector::new(out)
    }
}

/// One-shot feature extraction for a single frame.
pub fn frame_to_features(frame: &CsiFrame) -> Result<RealVector> {
    FeatureExtractor::new(frame.shape)?.extract(frame)
}
