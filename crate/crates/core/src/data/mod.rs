//! Procedural depth scenes and the on-disk corpus format.

mod io;
mod scene;

pub use io::{read_corpus, read_corpus_file, write_corpus, write_corpus_file, CORPUS_MAGIC};
pub use scene::{generate_corpus, generate_scene, INVALID_FRACTION};

use crate::error::{shape_err, Result};
use crate::model::DepthRange;
use crate::tensor::Tensor;

/// Image `[3, H, W]` in `[0, 1]`, depth `[1, H, W]` in meters and a
/// row-major validity mask. Invalid pixels carry depth 0.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub image: Tensor<f32>,
    pub depth: Tensor<f32>,
    pub mask: Vec<bool>,
}

impl SceneSample {
    pub fn new(image: Tensor<f32>, depth: Tensor<f32>, mask: Vec<bool>) -> Result<Self> {
        let s = Self { image, depth, mask };
        s.check_shapes()?;
        Ok(s)
    }

    pub fn height(&self) -> usize {
        self.depth.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.depth.shape()[2]
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|v| **v).count()
    }

    fn check_shapes(&self) -> Result<()> {
        let d = self.depth.shape();
        if d.len() != 3 || d[0] != 1 {
            return Err(shape_err!("depth must be [1, H, W], got {d:?}"));
        }
        if self.image.shape() != [3, d[1], d[2]] {
            return Err(shape_err!("image {:?} does not match depth {d:?}", self.image.shape()));
        }
        if self.mask.len() != d[1] * d[2] {
            return Err(shape_err!("mask has {} entries for {}x{}", self.mask.len(), d[1], d[2]));
        }
        Ok(())
    }

    /// Checks shapes and that every valid depth lies inside `range`.
    pub fn validate(&self, range: DepthRange) -> Result<()> {
        self.check_shapes()?;
        for (d, m) in self.depth.data().iter().zip(&self.mask) {
            if *m && !range.contains(*d as f64) {
                return Err(crate::error::Error::Invalid(format!(
                    "depth {d} outside [{}, {}]",
                    range.d_min, range.d_max
                )));
            }
        }
        Ok(())
    }
}
