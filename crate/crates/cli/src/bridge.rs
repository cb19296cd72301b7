//! Conversions between on-disk NIfTI buffers (x fastest) and the core
//! containers (last spatial index fastest). All functions reorder copies;
//! nothing aliases.

use dodti_core::dti::{DwiStack, GradientScheme, ParamField};
use dodti_core::volume::{num_voxels, Dims, Field, Mask, Volume};

use crate::errors::CliError;
use crate::nifti::NiftiImage;

fn spatial_dims(img: &NiftiImage) -> Dims {
    [img.dims[0], img.dims[1], img.dims[2]]
}

/// Index into an x-fastest buffer with `nv` trailing volumes.
#[inline]
fn nifti_index(dims: Dims, x: usize, y: usize, z: usize, v: usize) -> usize {
    x + dims[0] * (y + dims[1] * (z + dims[2] * v))
}

fn require_3d(img: &NiftiImage, what: &str) -> Result<Dims, CliError> {
    if img.n_volumes() != 1 {
        return Err(CliError::Data(format!(
            "{what}: expected a 3-D volume, got {} volumes",
            img.n_volumes()
        )));
    }
    Ok(spatial_dims(img))
}

pub fn image_to_volume(img: &NiftiImage, what: &str) -> Result<Volume, CliError> {
    let dims = require_3d(img, what)?;
    let mut out = Volume::zeros(dims);
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                *out.at_mut(x, y, z) = img.data[nifti_index(dims, x, y, z, 0)];
            }
        }
    }
    Ok(out)
}

pub fn volume_to_image(vol: &Volume) -> NiftiImage {
    let dims = vol.dims;
    let mut data = vec![0.0; num_voxels(dims)];
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                data[nifti_index(dims, x, y, z, 0)] = vol.at(x, y, z);
            }
        }
    }
    NiftiImage::new(vec![dims[0], dims[1], dims[2]], data)
}

pub fn field_to_image(field: &Field) -> NiftiImage {
    let dims = field.dims;
    let nc = field.channels;
    let mut data = vec![0.0; num_voxels(dims) * nc];
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                for c in 0..nc {
                    data[nifti_index(dims, x, y, z, c)] = field.at(x, y, z, c);
                }
            }
        }
    }
    NiftiImage::new(vec![dims[0], dims[1], dims[2], nc], data)
}

pub fn image_to_field(img: &NiftiImage) -> Field {
    let dims = spatial_dims(img);
    let nc = img.n_volumes();
    let mut out = Field::zeros(dims, nc);
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                let vox = out.voxel_mut(dodti_core::volume::voxel_index(dims, x, y, z));
                for (c, slot) in vox.iter_mut().enumerate() {
                    *slot = img.data[nifti_index(dims, x, y, z, c)];
                }
            }
        }
    }
    out
}

pub fn stack_to_image(stack: &DwiStack) -> NiftiImage {
    let dims = stack.dims;
    let m = stack.n_meas();
    let mut data = vec![0.0; num_voxels(dims) * m];
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                let v = dodti_core::volume::voxel_index(dims, x, y, z);
                let sig = stack.voxel_signals(v);
                for (j, &s) in sig.iter().enumerate() {
                    data[nifti_index(dims, x, y, z, j)] = s;
                }
            }
        }
    }
    NiftiImage::new(vec![dims[0], dims[1], dims[2], m], data)
}

pub fn image_to_stack(img: &NiftiImage, scheme: GradientScheme) -> Result<DwiStack, CliError> {
    let m = img.n_volumes();
    if m != scheme.len() {
        return Err(CliError::Data(format!(
            "volume count {} does not match gradient table length {}",
            m,
            scheme.len()
        )));
    }
    let dims = spatial_dims(img);
    let mut stack = DwiStack::zeros(dims, scheme);
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                let v = dodti_core::volume::voxel_index(dims, x, y, z);
                let sig = stack.voxel_signals_mut(v);
                for (j, slot) in sig.iter_mut().enumerate() {
                    *slot = img.data[nifti_index(dims, x, y, z, j)];
                }
            }
        }
    }
    Ok(stack)
}

/// Nonzero (and finite) voxels are in-mask.
pub fn image_to_mask(img: &NiftiImage, what: &str) -> Result<Mask, CliError> {
    let dims = require_3d(img, what)?;
    let mut data = vec![false; num_voxels(dims)];
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                let v = img.data[nifti_index(dims, x, y, z, 0)];
                data[dodti_core::volume::voxel_index(dims, x, y, z)] = v.is_finite() && v != 0.0;
            }
        }
    }
    Ok(Mask::from_vec(dims, data))
}

pub fn mask_to_image(mask: &Mask) -> NiftiImage {
    let dims = mask.dims;
    let mut data = vec![0.0; num_voxels(dims)];
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                if mask.get(dodti_core::volume::voxel_index(dims, x, y, z)) {
                    data[nifti_index(dims, x, y, z, 0)] = 1.0;
                }
            }
        }
    }
    NiftiImage::new(vec![dims[0], dims[1], dims[2]], data)
}

/// Pair a 7-channel parameter image with a mask image.
pub fn image_to_params(img: &NiftiImage, mask: Mask) -> Result<ParamField, CliError> {
    if img.n_volumes() != dodti_core::dti::PARAM_CHANNELS {
        return Err(CliError::Data(format!(
            "parameter image must have {} volumes, got {}",
            dodti_core::dti::PARAM_CHANNELS,
            img.n_volumes()
        )));
    }
    let dims = spatial_dims(img);
    if dims != mask.dims {
        return Err(CliError::Data(format!(
            "parameter image dims {:?} do not match mask dims {:?}",
            dims, mask.dims
        )));
    }
    Ok(ParamField::new(image_to_field(img), mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use dodti_core::dti::GradientEntry;

    #[test]
    fn volume_round_trip_preserves_axis_order() {
        let mut vol = Volume::zeros([4, 5, 6]);
        *vol.at_mut(1, 2, 3) = 5.0;
        *vol.at_mut(3, 0, 5) = -2.0;
        let img = volume_to_image(&vol);
        // x-fastest placement.
        assert_eq!(img.data[1 + 4 * (2 + 5 * 3)], 5.0);
        assert_eq!(img.data[3 + 4 * (0 + 5 * 5)], -2.0);
        let back = image_to_volume(&img, "t").unwrap();
        assert_eq!(back.data, vol.data);
    }

    #[test]
    fn field_round_trip() {
        let mut f = Field::zeros([3, 4, 5], 7);
        for (i, v) in f.data.iter_mut().enumerate() {
            *v = i as f64 * 0.25;
        }
        let img = field_to_image(&f);
        assert_eq!(img.dims, vec![3, 4, 5, 7]);
        let back = image_to_field(&img);
        assert_eq!(back.data, f.data);
        assert_eq!(back.channels, 7);
    }

    #[test]
    fn stack_round_trip() {
        let entries = vec![
            GradientEntry { b: 0.0, g: [0.0; 3] },
            GradientEntry {
                b: 1000.0,
                g: [1.0, 0.0, 0.0],
            },
        ];
        let scheme = GradientScheme::new(entries).unwrap();
        let mut stack = DwiStack::zeros([3, 3, 3], scheme.clone());
        for (i, v) in stack.data.iter_mut().enumerate() {
            *v = (i % 13) as f64;
        }
        let img = stack_to_image(&stack);
        let back = image_to_stack(&img, scheme).unwrap();
        assert_eq!(back.data, stack.data);
    }

    #[test]
    fn mask_round_trip_and_volume_count_check() {
        let mut m = Mask::from_vec([3, 3, 3], vec![false; 27]);
        m.data[5] = true;
        m.data[20] = true;
        let img = mask_to_image(&m);
        let back = image_to_mask(&img, "t").unwrap();
        assert_eq!(back.data, m.data);

        let entries = vec![GradientEntry { b: 0.0, g: [0.0; 3] }];
        let scheme = GradientScheme::new(entries).unwrap();
        let img4 = NiftiImage::new(vec![2, 2, 2, 3], vec![0.0; 24]);
        assert!(image_to_stack(&img4, scheme).is_err());
    }
}
