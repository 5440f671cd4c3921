use std::path::PathBuf;

use crate::error::Result;
use crate::montage::MontageCube;
use crate::tensor::Volume;

/// Random access to network inputs by flat sample index.
pub trait CubeSource: Sync {
    fn len(&self) -> usize;
    fn volume(&self, sample: usize) -> Result<Volume>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl CubeSource for Vec<Volume> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn volume(&self, sample: usize) -> Result<Volume> {
        Ok(self[sample].clone())
    }
}

/// Cubes read lazily from montage files on disk.
#[derive(Debug, Clone)]
pub struct CubeFiles {
    pub paths: Vec<PathBuf>,
}

impl CubeSource for CubeFiles {
    fn len(&self) -> usize {
        self.paths.len()
    }

    fn volume(&self, sample: usize) -> Result<Volume> {
        Ok(MontageCube::load(&self.paths[sample])?.into_volume())
    }
}
