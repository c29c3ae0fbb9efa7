//! Conversions between `ndarray` images and NCHW tensors, and a
//! differentiable Lab -> sRGB mapping used by the training loss.

use ndarray::{Array2, Array3};
use tch::{Kind, Tensor};

use crate::colorspace::{RgbImage, WHITE, XYZ_TO_RGB};

const DELTA: f64 = 6.0 / 29.0;

/// `(H, W)` plane to a `(1, 1, H, W)` float tensor.
pub fn plane_to_tensor(plane: &Array2<f32>) -> Tensor {
    let (h, w) = plane.dim();
    let std = plane.as_standard_layout();
    Tensor::from_slice(std.as_slice().expect("standard layout")).view([1, 1, h as i64, w as i64])
}

/// `(H, W, C)` array to a `(1, C, H, W)` float tensor.
pub fn hwc_to_tensor(arr: &Array3<f32>) -> Tensor {
    let (h, w, c) = arr.dim();
    let std = arr.as_standard_layout();
    Tensor::from_slice(std.as_slice().expect("standard layout"))
        .view([1, h as i64, w as i64, c as i64])
        .permute([0, 3, 1, 2])
        .contiguous()
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    hwc_to_tensor(img.pixels())
}

/// Stack images of equal size into `(N, 3, H, W)`.
pub fn rgb_batch(images: &[&RgbImage]) -> Tensor {
    let parts: Vec<Tensor> = images.iter().map(|img| rgb_to_tensor(img)).collect();
    Tensor::cat(&parts, 0)
}

/// Element `index` of an `(N, C, H, W)` tensor as `(H, W, C)`.
pub fn tensor_to_hwc(t: &Tensor, index: i64) -> Array3<f32> {
    let t = t.get(index).to_kind(Kind::Float).permute([1, 2, 0]).contiguous();
    let dims = t.size();
    let (h, w, c) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
    let data = Vec::<f32>::try_from(t.view([-1])).expect("float tensor");
    Array3::from_shape_vec((h, w, c), data).expect("shape from tensor")
}

/// Channel 0 of element `index` of an `(N, C, H, W)` tensor.
pub fn tensor_to_plane(t: &Tensor, index: i64) -> Array2<f32> {
    let t = t.get(index).get(0).to_kind(Kind::Float).contiguous();
    let dims = t.size();
    let data = Vec::<f32>::try_from(t.view([-1])).expect("float tensor");
    Array2::from_shape_vec((dims[0] as usize, dims[1] as usize), data).expect("shape from tensor")
}

fn lab_f_inv(t: &Tensor) -> Tensor {
    let cube = t * t * t;
    let linear = (t - 4.0 / 29.0) * (3.0 * DELTA * DELTA);
    cube.where_self(&t.gt(DELTA), &linear)
}

fn srgb_encode(linear: &Tensor) -> Tensor {
    // Clamp first: the power branch must never see values below its threshold,
    // or its gradient turns into NaN even where it is not selected.
    let c = linear.clamp(0.0, 1.0);
    let curve = c.clamp_min(0.003_130_8).pow_tensor_scalar(1.0 / 2.4) * 1.055 - 0.055;
    curve.where_self(&c.gt(0.003_130_8), &(&c * 12.92))
}

/// Differentiable Lab -> sRGB. `l` is `(N, 1, H, W)` in `[0, 100]`, `ab` is
/// `(N, 2, H, W)`; the result is `(N, 3, H, W)` clamped to `[0, 1]`.
pub fn lab_to_rgb_tensor(l: &Tensor, ab: &Tensor) -> Tensor {
    let fy = (l + 16.0) / 116.0;
    let fx = &fy + ab.narrow(1, 0, 1) / 500.0;
    let fz = &fy - ab.narrow(1, 1, 1) / 200.0;
    let xyz = [lab_f_inv(&fx) * WHITE[0], lab_f_inv(&fy) * WHITE[1], lab_f_inv(&fz) * WHITE[2]];
    let channels: Vec<Tensor> = XYZ_TO_RGB
        .iter()
        .map(|row| {
            let lin = &xyz[0] * row[0] + &xyz[1] * row[1] + &xyz[2] * row[2];
            srgb_encode(&lin)
        })
        .collect();
    Tensor::cat(&channels, 1)
}

/// Gray sRGB rendering of a lightness tensor, replicated to 3 channels.
pub fn gray_rgb_tensor(l: &Tensor) -> Tensor {
    let fy = (l + 16.0) / 116.0;
    srgb_encode(&lab_f_inv(&fy)).repeat([1, 3, 1, 1])
}
