use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probe tilts the generator accepts, in degrees.
pub const TILT_ANGLES: [i32; 5] = [-60, -30, 0, 30, 60];

/// Largest center displacement between consecutive frames, in pixels.
pub const MAX_FRAME_DISPLACEMENT: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AortaSpec {
    /// Center at frame 0, `[x, y]` in pixels.
    pub center: [f64; 2],
    /// Outer semi-axes `[a, b]` before tilt and pulsation.
    pub semi_axes: [f64; 2],
    pub wall_thickness: f64,
    /// Center drift radius in pixels.
    pub drift_amplitude: f64,
    /// Frames per full drift cycle.
    pub drift_period: f64,
    pub drift_phase: f64,
    /// Relative semi-axis oscillation amplitude.
    pub pulsation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatheterSpec {
    /// Position relative to the aorta center as a fraction of the lumen
    /// semi-axes; must stay inside the unit disc.
    pub offset: [f64; 2],
    /// Extra circular motion of the catheter, fraction of lumen semi-axes.
    pub wobble: f64,
    pub radius: f64,
    pub peak_intensity: f64,
    /// First frame in which the catheter crosses the imaging plane.
    pub enter_frame: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intensities {
    pub background: f64,
    pub wall: f64,
    pub lumen: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeckleSpec {
    /// Multiplicative noise strength.
    pub sigma: f64,
    /// Gaussian smoothing width in pixels; zero means white noise.
    pub smoothing: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShadowSpec {
    /// Per-frame probability that a shadow wedge is cast.
    pub probability: f64,
    pub angular_width_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub frames: usize,
    pub image_size: usize,
    pub aorta: AortaSpec,
    pub catheter: CatheterSpec,
    pub intensities: Intensities,
    pub speckle: SpeckleSpec,
    pub shadow: ShadowSpec,
    pub tilt_deg: i32,
    pub seed: u64,
}

/// One generated frame: image in `[0, 1]` and two binary masks, all `[H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSample {
    pub frame_index: usize,
    pub image: Tensor,
    pub aorta_mask: Tensor,
    pub catheter_mask: Tensor,
}

impl FrameSample {
    pub fn has_catheter(&self) -> bool {
        self.catheter_mask.data().iter().any(|&v| v > 0.5)
    }
}

/// Per-frame geometry derived from a spec.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameGeometry {
    pub center: [f64; 2],
    /// Outer semi-axes after tilt and pulsation.
    pub outer: [f64; 2],
    pub inner: [f64; 2],
    pub catheter: Option<[f64; 2]>,
}

impl FrameGeometry {
    fn ellipse_level(&self, axes: [f64; 2], x: f64, y: f64) -> f64 {
        let dx = (x - self.center[0]) / axes[0];
        let dy = (y - self.center[1]) / axes[1];
        dx * dx + dy * dy
    }

    pub fn in_outer(&self, x: f64, y: f64) -> bool {
        self.ellipse_level(self.outer, x, y) <= 1.0
    }

    pub fn in_lumen(&self, x: f64, y: f64) -> bool {
        self.ellipse_level(self.inner, x, y) <= 1.0
    }
}

impl SequenceSpec {
    /// A plain spec centered in the image, useful as a starting point.
    pub fn basic(image_size: usize, frames: usize, seed: u64) -> Self {
        let c = (image_size as f64 - 1.0) / 2.0;
        let s = image_size as f64 / 64.0;
        SequenceSpec {
            frames,
            image_size,
            aorta: AortaSpec {
                center: [c, c],
                semi_axes: [18.0 * s, 14.0 * s],
                wall_thickness: 3.0 * s,
                drift_amplitude: 2.0 * s,
                drift_period: 16.0,
                drift_phase: 0.0,
                pulsation: 0.04,
            },
            catheter: CatheterSpec {
                offset: [0.3, 0.2],
                wobble: 0.1,
                radius: 2.0,
                peak_intensity: 1.0,
                enter_frame: 0,
            },
            intensities: Intensities {
                background: 0.3,
                wall: 0.5,
                lumen: 0.08,
            },
            speckle: SpeckleSpec {
                sigma: 0.25,
                smoothing: 1.0,
            },
            shadow: ShadowSpec {
                probability: 0.0,
                angular_width_deg: 12.0,
            },
            tilt_deg: 0,
            seed,
        }
    }

    /// Draws a randomized spec from the default desk-scale distribution.
    pub fn sample(image_size: usize, frames: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed_5eed_5eed);
        let s = image_size as f64 / 64.0;
        let tilt = TILT_ANGLES[rng.gen_range(0..TILT_ANGLES.len())];
        let elong = tilt_elongation(tilt);
        let b = rng.gen_range(11.0..15.0) * s;
        let a = (b * rng.gen_range(1.0..1.25)).min(22.0 * s / elong);
        let a = a.max(b / elong * 0.9);
        let margin_x = a * elong + 3.0 * s;
        let margin_y = b + 3.0 * s;
        let size = image_size as f64;
        let cx = rng.gen_range(margin_x..(size - 1.0 - margin_x).max(margin_x + 1e-6));
        let cy = rng.gen_range(margin_y..(size - 1.0 - margin_y).max(margin_y + 1e-6));
        let radius = [1.5, 2.0, 2.5][rng.gen_range(0..3)];
        let ang = rng.gen_range(0.0..2.0 * PI);
        let rad = rng.gen_range(0.0..0.45);
        SequenceSpec {
            frames,
            image_size,
            aorta: AortaSpec {
                center: [cx, cy],
                semi_axes: [a, b],
                wall_thickness: rng.gen_range(2.5..3.5) * s,
                drift_amplitude: rng.gen_range(0.5..2.5) * s,
                drift_period: rng.gen_range(12.0..24.0),
                drift_phase: rng.gen_range(0.0..2.0 * PI),
                pulsation: rng.gen_range(0.0..0.05),
            },
            catheter: CatheterSpec {
                offset: [rad * ang.cos(), rad * ang.sin()],
                wobble: rng.gen_range(0.0..0.15),
                radius,
                peak_intensity: rng.gen_range(0.9..1.0),
                enter_frame: 0,
            },
            intensities: Intensities {
                background: rng.gen_range(0.25..0.35),
                wall: rng.gen_range(0.45..0.55),
                lumen: rng.gen_range(0.05..0.1),
            },
            speckle: SpeckleSpec {
                sigma: rng.gen_range(0.1..0.3),
                smoothing: 1.0,
            },
            shadow: ShadowSpec {
                probability: 0.1,
                angular_width_deg: 10.0,
            },
            tilt_deg: tilt,
            seed,
        }
    }

    /// Geometry of frame `t`, without validation.
    pub fn geometry(&self, t: usize) -> FrameGeometry {
        let a = &self.aorta;
        let tf = t as f64;
        let phase = 2.0 * PI * tf / a.drift_period.max(1.0) + a.drift_phase;
        let center = [
            a.center[0] + a.drift_amplitude * (phase.sin() - a.drift_phase.sin()),
            a.center[1] + a.drift_amplitude * (phase.cos() - a.drift_phase.cos()),
        ];
        let pulse = 1.0 + a.pulsation * (2.0 * PI * tf / 6.0).sin();
        let elong = tilt_elongation(self.tilt_deg);
        let outer = [a.semi_axes[0] * elong * pulse, a.semi_axes[1] / pulse];
        let inner = [
            (outer[0] - a.wall_thickness).max(0.0),
            (outer[1] - a.wall_thickness).max(0.0),
        ];
        let c = &self.catheter;
        let catheter = (t >= c.enter_frame).then(|| {
            let w = 2.0 * PI * tf / 10.0;
            let ox = c.offset[0] + c.wobble * w.cos();
            let oy = c.offset[1] + c.wobble * w.sin();
            [center[0] + ox * inner[0], center[1] + oy * inner[1]]
        });
        FrameGeometry {
            center,
            outer,
            inner,
            catheter,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |frame, reason: String| Err(Error::Spec { frame, reason });
        if self.frames == 0 || self.image_size == 0 {
            return bad(0, "frames and image_size must be positive".into());
        }
        if !TILT_ANGLES.contains(&self.tilt_deg) {
            return bad(0, format!("tilt {} not in {TILT_ANGLES:?}", self.tilt_deg));
        }
        if !(1.0..=3.0).contains(&self.catheter.radius) {
            return bad(0, format!("catheter radius {} outside [1, 3] px", self.catheter.radius));
        }
        if self.speckle.sigma < 0.0 || !(0.0..=1.0).contains(&self.shadow.probability) {
            return bad(0, "speckle sigma must be >= 0 and shadow probability in [0, 1]".into());
        }
        let mut prev: Option<[f64; 2]> = None;
        for t in 0..self.frames {
            let g = self.geometry(t);
            if g.inner[0] <= 0.0 || g.inner[1] <= 0.0 {
                return bad(t, "wall thicker than the vessel".into());
            }
            if let Some(p) = prev {
                let d = ((g.center[0] - p[0]).powi(2) + (g.center[1] - p[1]).powi(2)).sqrt();
                if d > MAX_FRAME_DISPLACEMENT + 1e-9 {
                    return bad(t, format!("aorta center moved {d:.3} px (limit {MAX_FRAME_DISPLACEMENT})"));
                }
            }
            prev = Some(g.center);
            if let Some(c) = g.catheter {
                if g.ellipse_level(g.inner, c[0], c[1]) >= 1.0 {
                    return bad(t, format!("catheter center {c:?} leaves the lumen"));
                }
            }
        }
        Ok(())
    }
}

/// Cross-section stretch along x when the probe is tilted off the vessel
/// axis.
pub fn tilt_elongation(tilt_deg: i32) -> f64 {
    1.0 / (tilt_deg as f64).to_radians().cos()
}

/// A dark acoustic-shadow wedge cast from the probe (top edge) through a
/// strong reflector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wedge {
    pub apex: [f64; 2],
    /// Central direction, degrees from straight down.
    pub direction_deg: f64,
    pub width_deg: f64,
    /// Rows at or above this y are untouched.
    pub start_y: f64,
}

impl Wedge {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        if y <= self.start_y {
            return false;
        }
        let ang = (x - self.apex[0]).atan2(y - self.apex[1]).to_degrees();
        (ang - self.direction_deg).abs() <= self.width_deg / 2.0
    }

    /// Zeroes image intensity inside the wedge.
    pub fn apply(&self, image: &mut Tensor) {
        let w = image.shape()[1];
        for (i, v) in image.data_mut().iter_mut().enumerate() {
            if self.contains((i % w) as f64, (i / w) as f64) {
                *v = 0.0;
            }
        }
    }
}

fn gaussian_kernel(width: f64) -> Vec<f64> {
    let r = (3.0 * width).ceil() as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i as f64).powi(2) / (2.0 * width * width)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn blur(field: &[f64], size: usize, width: f64) -> Vec<f64> {
    if width <= 0.0 {
        return field.to_vec();
    }
    let k = gaussian_kernel(width);
    let r = (k.len() / 2) as isize;
    let n = size as isize;
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..n {
            for x in 0..n {
                let mut acc = 0.0;
                for (j, &w) in k.iter().enumerate() {
                    let o = j as isize - r;
                    let (sx, sy) = if horizontal { (x + o, y) } else { (x, y + o) };
                    // reflect at borders
                    let sx = sx.clamp(0, n - 1);
                    let sy = sy.clamp(0, n - 1);
                    acc += w * src[(sy * n + sx) as usize];
                }
                out[(y * n + x) as usize] = acc;
            }
        }
        out
    };
    pass(&pass(field, true), false)
}

/// Unit-mean multiplicative speckle field `max(0, 1 + sigma * g)` where `g`
/// is smoothed Gaussian noise standardized to zero mean and unit variance.
pub fn speckle_field(size: usize, spec: SpeckleSpec, rng: &mut impl Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..size * size).map(|_| rng.sample(StandardNormal)).collect();
    if spec.sigma == 0.0 {
        return vec![1.0; size * size];
    }
    let s = blur(&raw, size, spec.smoothing);
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let std = (s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
    s.iter()
        .map(|v| (1.0 + spec.sigma * (v - mean) / std).max(0.0))
        .collect()
}

/// Renders a whole sequence. Pure function of the spec (including its seed).
pub fn generate_sequence(spec: &SequenceSpec) -> Result<Vec<FrameSample>> {
    spec.validate()?;
    let n = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut frames = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let g = spec.geometry(t);
        let field = speckle_field(n, spec.speckle, &mut rng);
        let shadow_roll: f64 = rng.gen();
        let shadow_offset: f64 = rng.gen_range(-1.0..1.0);

        let mut image = vec![0f32; n * n];
        let mut aorta = vec![0f32; n * n];
        let mut cath = vec![0f32; n * n];
        let r2 = spec.catheter.radius * spec.catheter.radius;
        for y in 0..n {
            for x in 0..n {
                let (xf, yf) = (x as f64, y as f64);
                let i = y * n + x;
                let base = if g.in_lumen(xf, yf) {
                    spec.intensities.lumen
                } else if g.in_outer(xf, yf) {
                    spec.intensities.wall
                } else {
                    spec.intensities.background
                };
                let inside = g.in_outer(xf, yf);
                aorta[i] = if inside { 1.0 } else { 0.0 };
                let mut value = base;
                if let Some(c) = g.catheter {
                    let d2 = (xf - c[0]).powi(2) + (yf - c[1]).powi(2);
                    if inside && d2 <= r2 {
                        cath[i] = 1.0;
                        value = spec.catheter.peak_intensity;
                    }
                }
                image[i] = (value * field[i]).clamp(0.0, 1.0) as f32;
            }
        }
        let mut image = Tensor::new([n, n], image)?;
        if shadow_roll < spec.shadow.probability {
            let wedge = Wedge {
                apex: [g.center[0], 0.0],
                direction_deg: shadow_offset * spec.shadow.angular_width_deg,
                width_deg: spec.shadow.angular_width_deg,
                start_y: g.center[1] - g.inner[1],
            };
            wedge.apply(&mut image);
        }
        frames.push(FrameSample {
            frame_index: t,
            image,
            aorta_mask: Tensor::new([n, n], aorta)?,
            catheter_mask: Tensor::new([n, n], cath)?,
        });
    }
    Ok(frames)
}
