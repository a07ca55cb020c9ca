//! Training/evaluation samples and the trait the training loop reads them through.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::grid::{Mask, Volume};
use crate::projector::Projection;

/// One (projection, angle, target volume, target mask) tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub angle_deg: f64,
    pub coeffs: Vec<f64>,
    pub projection: Projection,
    pub volume: Volume,
    pub mask: Mask,
}

impl Sample {
    /// Checks the value ranges and label binarity the network relies on.
    pub fn validate(&self) -> Result<()> {
        let unit = |d: &[f32]| d.iter().all(|v| (0.0..=1.0).contains(v));
        if !unit(&self.projection.pixels) {
            return Err(Error::Source(alloc::format!("{}: projection outside [0,1]", self.id)));
        }
        if !unit(&self.volume.data) {
            return Err(Error::Source(alloc::format!("{}: volume outside [0,1]", self.id)));
        }
        if self.mask.data.iter().any(|&v| v > 1) {
            return Err(Error::Source(alloc::format!("{}: mask is not binary", self.id)));
        }
        self.volume.grid.ensure_same(&self.mask.grid, "sample volume/mask")?;
        Ok(())
    }
}

/// Indexed, read-only access to samples (in memory or on disk).
pub trait SampleSource {
    fn len(&self) -> usize;

    fn sample(&self, index: usize) -> Result<Sample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for [Sample] {
    fn len(&self) -> usize {
        <[Sample]>::len(self)
    }

    fn sample(&self, index: usize) -> Result<Sample> {
        self.get(index)
            .cloned()
            .ok_or_else(|| Error::Source(alloc::format!("index {index} out of {}", <[Sample]>::len(self))))
    }
}

impl SampleSource for Vec<Sample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn sample(&self, index: usize) -> Result<Sample> {
        self.as_slice().sample(index)
    }
}

impl<S: SampleSource + ?Sized> SampleSource for &S {
    fn len(&self) -> usize {
        (**self).len()
    }

    fn sample(&self, index: usize) -> Result<Sample> {
        (**self).sample(index)
    }
}
