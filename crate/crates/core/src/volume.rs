//! Dense 3-D containers: scalar volumes, multi-channel fields, boolean masks.
//!
//! Linear layout is row-major over `(i0, i1, i2)` with the channel index
//! fastest for `Field`: `idx = ((i0*n1 + i1)*n2 + i2)*channels + c`.

use alloc::vec;
use alloc::vec::Vec;

pub type Dims = [usize; 3];

#[inline]
pub fn num_voxels(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
pub fn voxel_index(dims: Dims, i0: usize, i1: usize, i2: usize) -> usize {
    (i0 * dims[1] + i1) * dims[2] + i2
}

/// Scalar 3-D volume, f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: Dims,
    pub data: Vec<f64>,
}

impl Volume {
    pub fn zeros(dims: Dims) -> Self {
        Volume {
            dims,
            data: vec![0.0; num_voxels(dims)],
        }
    }

    pub fn from_vec(dims: Dims, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), num_voxels(dims), "volume data length mismatch");
        Volume { dims, data }
    }

    #[inline]
    pub fn at(&self, i0: usize, i1: usize, i2: usize) -> f64 {
        self.data[voxel_index(self.dims, i0, i1, i2)]
    }

    #[inline]
    pub fn at_mut(&mut self, i0: usize, i1: usize, i2: usize) -> &mut f64 {
        &mut self.data[voxel_index(self.dims, i0, i1, i2)]
    }
}

/// Multi-channel 3-D field, channel-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    pub dims: Dims,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Field {
    pub fn zeros(dims: Dims, channels: usize) -> Self {
        Field {
            dims,
            channels,
            data: vec![0.0; num_voxels(dims) * channels],
        }
    }

    pub fn from_vec(dims: Dims, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            num_voxels(dims) * channels,
            "field data length mismatch"
        );
        Field {
            dims,
            channels,
            data,
        }
    }

    #[inline]
    pub fn voxel(&self, v: usize) -> &[f64] {
        &self.data[v * self.channels..(v + 1) * self.channels]
    }

    #[inline]
    pub fn voxel_mut(&mut self, v: usize) -> &mut [f64] {
        &mut self.data[v * self.channels..(v + 1) * self.channels]
    }

    #[inline]
    pub fn at(&self, i0: usize, i1: usize, i2: usize, c: usize) -> f64 {
        self.data[voxel_index(self.dims, i0, i1, i2) * self.channels + c]
    }

    /// Extract one channel as a scalar volume.
    pub fn channel(&self, c: usize) -> Volume {
        assert!(c < self.channels);
        let n = num_voxels(self.dims);
        let mut out = Vec::with_capacity(n);
        for v in 0..n {
            out.push(self.data[v * self.channels + c]);
        }
        Volume::from_vec(self.dims, out)
    }

    /// Zero every voxel outside `mask`.
    pub fn apply_mask(&mut self, mask: &Mask) {
        assert_eq!(self.dims, mask.dims);
        let c = self.channels;
        for (v, &inside) in mask.data.iter().enumerate() {
            if !inside {
                for x in &mut self.data[v * c..(v + 1) * c] {
                    *x = 0.0;
                }
            }
        }
    }
}

/// Boolean voxel mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub dims: Dims,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn full(dims: Dims) -> Self {
        Mask {
            dims,
            data: vec![true; num_voxels(dims)],
        }
    }

    pub fn from_vec(dims: Dims, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), num_voxels(dims), "mask data length mismatch");
        Mask { dims, data }
    }

    #[inline]
    pub fn get(&self, v: usize) -> bool {
        self.data[v]
    }

    /// Number of voxels inside the mask.
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}
