//! Dense channels-last volumes used throughout the network.

use crate::error::{Error, Result};

/// A `(t, h, w, c)` volume stored contiguously with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 4],
    pub data: Vec<f64>,
}

impl Volume {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Volume {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape(n, data.len()));
        }
        Ok(Volume { dims, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.dims[3]
    }

    /// Number of spatio-temporal positions (`t * h * w`).
    pub fn positions(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn index(&self, t: usize, h: usize, w: usize, c: usize) -> usize {
        ((t * self.dims[1] + h) * self.dims[2] + w) * self.dims[3] + c
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
