use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::generate::{FrameSample, Wedge};
use crate::tensor::Tensor;

pub const MAX_ROTATION_DEG: f64 = 30.0;
pub const GAIN_RANGE: (f64, f64) = (0.7, 1.3);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub rotation_deg: f64,
    pub gain: f64,
    pub shadow: Option<Wedge>,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            rotation_deg: 0.0,
            gain: 1.0,
            shadow: None,
        }
    }
}

impl AugmentParams {
    pub fn new(rotation_deg: f64, gain: f64, shadow: Option<Wedge>) -> Result<Self> {
        if rotation_deg.abs() > MAX_ROTATION_DEG {
            return Err(Error::contract(format!(
                "rotation {rotation_deg} outside [-{MAX_ROTATION_DEG}, {MAX_ROTATION_DEG}] degrees"
            )));
        }
        if !(GAIN_RANGE.0..=GAIN_RANGE.1).contains(&gain) {
            return Err(Error::contract(format!("gain {gain} outside {GAIN_RANGE:?}")));
        }
        Ok(AugmentParams {
            rotation_deg,
            gain,
            shadow,
        })
    }

    /// Random rotation, brightness jitter, and (with probability
    /// `shadow_probability`) a shadow wedge.
    pub fn sample(rng: &mut impl Rng, image_size: usize, shadow_probability: f64) -> Self {
        let rotation_deg = rng.gen_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG);
        let gain = rng.gen_range(GAIN_RANGE.0..=GAIN_RANGE.1);
        let roll: f64 = rng.gen();
        let n = image_size as f64;
        let apex_x = rng.gen_range(0.25 * n..0.75 * n);
        let direction_deg = rng.gen_range(-20.0..20.0);
        let start_y = rng.gen_range(0.3 * n..0.6 * n);
        let shadow = (roll < shadow_probability).then_some(Wedge {
            apex: [apex_x, 0.0],
            direction_deg,
            width_deg: 10.0,
            start_y,
        });
        AugmentParams {
            rotation_deg,
            gain,
            shadow,
        }
    }
}

fn bilinear(src: &[f32], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let (fx, fy) = (x - x0, y - y0);
    let get = |xi: f64, yi: f64| -> f64 {
        if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
            0.0
        } else {
            src[yi as usize * w + xi as usize] as f64
        }
    };
    let mut acc = 0.0;
    for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
        for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
            let weight = wx * wy;
            if weight != 0.0 {
                acc += weight * get(x0 + dx, y0 + dy);
            }
        }
    }
    acc
}

/// Rotates an `[H, W]` map about its center by `deg` (counter-clockwise in
/// image coordinates) with bilinear resampling and zero fill.
pub fn rotate(map: &Tensor, deg: f64) -> Tensor {
    if deg == 0.0 {
        return map.detached();
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (s, c) = deg.to_radians().sin_cos();
    let src = map.data();
    Tensor::from_fn([h, w], |i| {
        let (x, y) = ((i % w) as f64 - cx, (i / w) as f64 - cy);
        // inverse mapping: rotate the output coordinate back by -deg
        let sx = c * x + s * y + cx;
        let sy = -s * x + c * y + cy;
        bilinear(src, w, h, sx, sy) as f32
    })
}

fn binarize_half(map: &Tensor) -> Tensor {
    map.map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
}

/// Applies rotation to the image and both masks identically, then brightness
/// gain and an optional shadow to the image only. Masks are re-binarized at
/// 0.5.
pub fn augment(frame: &FrameSample, params: &AugmentParams) -> FrameSample {
    augment_unchecked(frame, params.rotation_deg, params.gain, params.shadow.as_ref())
}

/// Same as [`augment`] without the range checks on rotation and gain.
pub fn augment_unchecked(
    frame: &FrameSample,
    rotation_deg: f64,
    gain: f64,
    shadow: Option<&Wedge>,
) -> FrameSample {
    let mut image = rotate(&frame.image, rotation_deg);
    let g = gain as f32;
    for v in image.data_mut() {
        *v = (*v * g).clamp(0.0, 1.0);
    }
    if let Some(w) = shadow {
        w.apply(&mut image);
    }
    let aorta = binarize_half(&rotate(&frame.aorta_mask, rotation_deg));
    let cath = binarize_half(&rotate(&frame.catheter_mask, rotation_deg));
    // keep the catheter intravascular after resampling
    let cath = Tensor::from_fn(cath.shape().to_vec(), |i| cath.data()[i] * aorta.data()[i]);
    FrameSample {
        frame_index: frame.frame_index,
        image,
        aorta_mask: aorta,
        catheter_mask: cath,
    }
}
