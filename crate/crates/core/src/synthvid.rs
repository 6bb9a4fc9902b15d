//! Procedural "moving shape" clips with discrete prompt conditioning.
//!
//! Stands in for a text–video corpus: each clip is a single anti-aliased
//! shape moving over a fixed dark gradient, with analytic kinematics so the
//! metrics in [`crate::evalkit`] have closed-form expectations. Rendering is
//! a pure function of `(spec, seed)`.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Scalar, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&s| s == self).unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorName {
    Red,
    Green,
    Blue,
    Yellow,
}

impl ColorName {
    pub const ALL: [ColorName; 4] = [
        ColorName::Red,
        ColorName::Green,
        ColorName::Blue,
        ColorName::Yellow,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).unwrap()
    }

    /// Shape fill in [−1, 1] RGB. Bright variants so the subject always has
    /// a channel well above the background's 0.215 intensity ceiling.
    pub fn rgb(self) -> [f64; 3] {
        match self {
            ColorName::Red => [1.0, -0.8, -0.8],
            ColorName::Green => [-0.8, 1.0, -0.8],
            ColorName::Blue => [-0.8, -0.8, 1.0],
            ColorName::Yellow => [1.0, 1.0, -0.8],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    Static,
    Linear,
    Bounce,
    Circular,
}

impl MotionKind {
    pub const ALL: [MotionKind; 4] = [
        MotionKind::Static,
        MotionKind::Linear,
        MotionKind::Bounce,
        MotionKind::Circular,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&m| m == self).unwrap()
    }
}

/// Discrete conditioning in place of a text prompt.
///
/// `speed` is the centroid displacement per frame as a fraction of frame
/// width, in [0, 0.1]; it is zero exactly when `motion` is static.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub shape: ShapeKind,
    pub color: ColorName,
    pub motion: MotionKind,
    pub speed: f64,
    pub direction: f64,
}

impl PromptSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.1).contains(&self.speed) {
            return Err(Error::Precondition(format!(
                "speed {} outside [0, 0.1]",
                self.speed
            )));
        }
        let static_motion = self.motion == MotionKind::Static;
        if static_motion != (self.speed == 0.0) {
            return Err(Error::Precondition(
                "speed must be 0 exactly when motion is static".into(),
            ));
        }
        Ok(())
    }
}

/// A rendered clip: frames `[T, H, W, C]` in [−1, 1].
#[derive(Debug, Clone)]
pub struct VideoClip<S: Scalar> {
    pub frames: Tensor<S>,
    pub prompt: PromptSpec,
    pub seed: u64,
}

impl<S: Scalar> VideoClip<S> {
    pub fn frame_count(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.frames.shape()[3]
    }

    /// One frame as a `[H, W, C]` tensor.
    pub fn frame(&self, t: usize) -> Tensor<S> {
        let (h, w, c) = (self.height(), self.width(), self.channels());
        let n = h * w * c;
        Tensor::from_vec(&[h, w, c], self.frames.data()[t * n..(t + 1) * n].to_vec())
            .expect("frame extraction")
    }
}

/// Uniform draw over the prompt grid. Non-static motions get a speed range
/// that keeps the whole path inside the frame at the default geometry:
/// linear [0.02, 0.04], bounce/circular [0.02, 0.1].
pub fn sample_prompt(seed: u64) -> PromptSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = ShapeKind::ALL[rng.gen_range(0..ShapeKind::ALL.len())];
    let color = ColorName::ALL[rng.gen_range(0..ColorName::ALL.len())];
    let motion = MotionKind::ALL[rng.gen_range(0..MotionKind::ALL.len())];
    let speed = match motion {
        MotionKind::Static => 0.0,
        MotionKind::Linear => rng.gen_range(0.02..0.04),
        MotionKind::Bounce | MotionKind::Circular => rng.gen_range(0.02..0.1),
    };
    let direction = rng.gen_range(0.0..std::f64::consts::TAU);
    PromptSpec {
        shape,
        color,
        motion,
        speed,
        direction,
    }
}

/// Background value at (row, col, channel): a fixed dark diagonal gradient.
/// Stays within [−0.93, −0.57] so max-channel intensity never exceeds 0.215.
pub fn background(y: usize, x: usize, c: usize, h: usize, w: usize) -> f64 {
    let span = (h + w).saturating_sub(2).max(1) as f64;
    let g = (x + y) as f64 / span - 0.5;
    const CH_OFFSET: [f64; 3] = [-0.03, 0.0, 0.03];
    -0.75 + 0.3 * g + CH_OFFSET[c % 3]
}

/// Analytic centroid track for a spec/seed/geometry, in (x, y) pixels.
/// The renderer places the shape on exactly this track; test oracles reuse it.
pub fn centroid_track(
    spec: &PromptSpec,
    t_len: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Vec<(f64, f64)> {
    let geo = ShapeGeometry::derive(spec, t_len, h, w, seed);
    (0..t_len).map(|t| geo.center_at(t)).collect()
}

/// Seed-derived placement: size, start position, orbit phase.
struct ShapeGeometry {
    radius: f64,
    start: (f64, f64),
    velocity: (f64, f64),
    orbit_center: (f64, f64),
    orbit_radius: f64,
    orbit_phase: f64,
    orbit_rate: f64,
    motion: MotionKind,
    bounds: (f64, f64, f64, f64), // min_x, max_x, min_y, max_y for bounce
    t_anchor: f64,
}

impl ShapeGeometry {
    fn derive(spec: &PromptSpec, t_len: usize, h: usize, w: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5f37_59df);
        let radius = rng.gen_range(3.0..5.0);
        let margin = 1.25 * radius + 1.5;
        let (wf, hf) = (w as f64, h as f64);
        let center = ((wf - 1.0) / 2.0, (hf - 1.0) / 2.0);
        let speed_px = spec.speed * wf;
        let dir = (spec.direction.cos(), spec.direction.sin());
        let jitter = 0.15 * wf.min(hf);
        let jittered = (
            center.0 + rng.gen_range(-jitter..jitter),
            center.1 + rng.gen_range(-jitter..jitter),
        );
        let orbit_radius = 0.22 * wf.min(hf);
        ShapeGeometry {
            radius,
            start: match spec.motion {
                MotionKind::Static | MotionKind::Bounce => jittered,
                // Linear and circular are frame-center anchored.
                MotionKind::Linear | MotionKind::Circular => center,
            },
            velocity: (speed_px * dir.0, speed_px * dir.1),
            orbit_center: center,
            orbit_radius,
            orbit_rate: if orbit_radius > 0.0 {
                speed_px / orbit_radius
            } else {
                0.0
            },
            orbit_phase: rng.gen_range(0.0..std::f64::consts::TAU),
            motion: spec.motion,
            bounds: (margin, wf - 1.0 - margin, margin, hf - 1.0 - margin),
            // Linear paths are anchored mid-clip so the track stays in frame.
            t_anchor: if spec.motion == MotionKind::Linear {
                (t_len.saturating_sub(1)) as f64 / 2.0
            } else {
                0.0
            },
        }
    }

    fn center_at(&self, t: usize) -> (f64, f64) {
        let tf = t as f64 - self.t_anchor;
        match self.motion {
            MotionKind::Static => self.start,
            MotionKind::Linear => (
                self.start.0 + tf * self.velocity.0,
                self.start.1 + tf * self.velocity.1,
            ),
            MotionKind::Bounce => {
                let (min_x, max_x, min_y, max_y) = self.bounds;
                (
                    reflect(self.start.0 + tf * self.velocity.0, min_x, max_x),
                    reflect(self.start.1 + tf * self.velocity.1, min_y, max_y),
                )
            }
            MotionKind::Circular => {
                let a = self.orbit_phase + self.orbit_rate * tf;
                (
                    self.orbit_center.0 + self.orbit_radius * a.cos(),
                    self.orbit_center.1 + self.orbit_radius * a.sin(),
                )
            }
        }
    }
}

/// Fold a coordinate back into [lo, hi] by specular (perfectly elastic)
/// reflection.
fn reflect(x: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    let span = hi - lo;
    let mut u = (x - lo).rem_euclid(2.0 * span);
    if u > span {
        u = 2.0 * span - u;
    }
    lo + u
}

/// Point-membership test for a shape of size parameter `r` centered at the
/// origin; the renderer rasterizes exactly this predicate and the metrics
/// classifier templates reuse it.
pub fn shape_contains(shape: ShapeKind, dx: f64, dy: f64, r: f64) -> bool {
    inside(shape, dx, dy, r)
}

fn inside(shape: ShapeKind, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
        ShapeKind::Circle => dx * dx + dy * dy <= r * r,
        ShapeKind::Triangle => {
            // Equilateral, apex up (screen y grows downward), circumradius
            // 1.25·r; vertices symmetric about the center so the intensity
            // centroid coincides with the track.
            let cr = 1.25 * r;
            let half = cr * (std::f64::consts::PI / 6.0).cos();
            let verts = [(0.0, -cr), (half, cr * 0.5), (-half, cr * 0.5)];
            let sign = |a: (f64, f64), b: (f64, f64)| -> f64 {
                (dx - b.0) * (a.1 - b.1) - (a.0 - b.0) * (dy - b.1)
            };
            let d1 = sign(verts[0], verts[1]);
            let d2 = sign(verts[1], verts[2]);
            let d3 = sign(verts[2], verts[0]);
            let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
            let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
            !(has_neg && has_pos)
        }
    }
}

fn render_frame_into<S: Scalar>(
    out: &mut [S],
    shape: ShapeKind,
    radius: f64,
    (cx, cy): (f64, f64),
    h: usize,
    w: usize,
    rgb: &[f64; 3],
) {
    const SS: usize = 4;
    let reach = 1.25 * radius + 1.0;
    for y in 0..h {
        for x in 0..w {
            let near = (x as f64 - cx).abs() <= reach && (y as f64 - cy).abs() <= reach;
            let mut coverage = 0.0;
            if near {
                let mut hits = 0;
                for sy in 0..SS {
                    for sx in 0..SS {
                        let px = x as f64 + (sx as f64 + 0.5) / SS as f64 - 0.5;
                        let py = y as f64 + (sy as f64 + 0.5) / SS as f64 - 0.5;
                        if inside(shape, px - cx, py - cy, radius) {
                            hits += 1;
                        }
                    }
                }
                coverage = hits as f64 / (SS * SS) as f64;
            }
            for c in 0..3 {
                let bg = background(y, x, c, h, w);
                out[(y * w + x) * 3 + c] = S::from_f64(bg + coverage * (rgb[c] - bg));
            }
        }
    }
}

/// Render a clip with analytic kinematics: linear advance of `speed·W` per
/// frame, specular bounce at borders, fixed-radius orbit, or static. The
/// shape is rasterized with 4×4 supersampled coverage over the gradient
/// background.
pub fn render_clip<S: Scalar>(
    spec: &PromptSpec,
    t_len: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<VideoClip<S>> {
    spec.validate()?;
    if t_len < 1 || h < 1 || w < 1 {
        return Err(Error::Precondition(format!(
            "geometry T={} H={} W={} must all be >= 1",
            t_len, h, w
        )));
    }
    let geo = ShapeGeometry::derive(spec, t_len, h, w, seed);
    // Triangle circumradius is the largest footprint.
    let footprint = 2.0 * (1.25 * geo.radius + 1.0);
    if footprint > h.min(w) as f64 {
        return Err(Error::Precondition(format!(
            "shape footprint {:.1}px exceeds frame side {}",
            footprint,
            h.min(w)
        )));
    }
    let rgb = spec.color.rgb();
    let n_frame = h * w * 3;
    let mut data = vec![S::ZERO; t_len * n_frame];
    for t in 0..t_len {
        render_frame_into(
            &mut data[t * n_frame..(t + 1) * n_frame],
            spec.shape,
            geo.radius,
            geo.center_at(t),
            h,
            w,
            &rgb,
        );
    }
    Ok(VideoClip {
        frames: Tensor::from_vec(&[t_len, h, w, 3], data)?,
        prompt: *spec,
        seed,
    })
}

// ── Prompt conditioning ──────────────────────────────────────────────

/// Width of the learned embedding for each enum field.
pub const ENUM_EMBED_DIM: usize = 12;
/// Width of each sinusoidal scalar block (speed, direction).
pub const SCALAR_ENC_DIM: usize = 8;
/// Total conditioning width: three enum blocks plus two scalar blocks.
pub const COND_DIM: usize = 3 * ENUM_EMBED_DIM + 2 * SCALAR_ENC_DIM;

/// Parameter names and shapes of the conditioning embedding tables.
pub fn cond_table_specs() -> [(&'static str, [usize; 2]); 3] {
    [
        ("cond/shape_emb", [3, ENUM_EMBED_DIM]),
        ("cond/color_emb", [4, ENUM_EMBED_DIM]),
        ("cond/motion_emb", [4, ENUM_EMBED_DIM]),
    ]
}

/// Sinusoidal features of a scalar in [0, 1]: sin/cos at 4 octaves.
fn sinusoid_block(u: f64) -> [f64; SCALAR_ENC_DIM] {
    let mut out = [0.0; SCALAR_ENC_DIM];
    for (k, freq) in [1.0, 2.0, 4.0, 8.0].iter().enumerate() {
        let a = std::f64::consts::TAU * freq * u;
        out[2 * k] = a.sin();
        out[2 * k + 1] = a.cos();
    }
    out
}

/// Conditioning embedding tables bound on a tape.
pub struct CondTables {
    pub shape: Var,
    pub color: Var,
    pub motion: Var,
}

/// Conditioning vector `[1, COND_DIM]`: looked-up enum embeddings
/// concatenated with sinusoidal encodings of speed and direction. Built on
/// the tape so gradients reach the embedding tables.
pub fn encode_prompt<S: Scalar>(
    tape: &mut Tape<S>,
    tables: &CondTables,
    spec: &PromptSpec,
) -> Result<Var> {
    let shape_e = tape.embed(tables.shape, Arc::new(vec![spec.shape.index()]))?;
    let color_e = tape.embed(tables.color, Arc::new(vec![spec.color.index()]))?;
    let motion_e = tape.embed(tables.motion, Arc::new(vec![spec.motion.index()]))?;
    let speed_block = sinusoid_block(spec.speed / 0.1);
    let dir_block = sinusoid_block(spec.direction / std::f64::consts::TAU);
    let speed_v = tape.leaf(Tensor::from_f64_slice(&[1, SCALAR_ENC_DIM], &speed_block)?);
    let dir_v = tape.leaf(Tensor::from_f64_slice(&[1, SCALAR_ENC_DIM], &dir_block)?);
    tape.concat(&[shape_e, color_e, motion_e, speed_v, dir_v], 1)
}

// ── PPM export / import ──────────────────────────────────────────────

fn to_u8(v: f64) -> u8 {
    ((v + 1.0) / 2.0 * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Write one frame as binary PPM (P6), mapping [−1, 1] to [0, 255].
pub fn write_ppm<S: Scalar>(path: &Path, frame: &Tensor<S>) -> Result<()> {
    let sh = frame.shape();
    if sh.len() != 3 || sh[2] != 3 {
        return Err(Error::invalid(
            "write_ppm",
            format!("expected [H,W,3], got {:?}", sh),
        ));
    }
    let (h, w) = (sh[0], sh[1]);
    let mut out = Vec::with_capacity(h * w * 3 + 32);
    out.extend_from_slice(format!("P6\n{} {}\n255\n", w, h).as_bytes());
    for v in frame.data() {
        out.push(to_u8(v.to_f64()));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Read a binary PPM (P6) back into a `[H, W, 3]` tensor in [−1, 1].
pub fn read_ppm<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let header_err = || Error::Format(format!("{}: not a maxval-255 P6 ppm", path.display()));
    let mut fields: Vec<&str> = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| header_err())?);
    }
    if fields.len() != 4 || fields[0] != "P6" || fields[3] != "255" {
        return Err(header_err());
    }
    let w: usize = fields[1].parse().map_err(|_| header_err())?;
    let h: usize = fields[2].parse().map_err(|_| header_err())?;
    pos += 1; // single whitespace after maxval
    let need = h * w * 3;
    if bytes.len() < pos + need {
        return Err(Error::Format(format!(
            "{}: truncated pixel data",
            path.display()
        )));
    }
    let data = bytes[pos..pos + need]
        .iter()
        .map(|&b| S::from_f64(b as f64 / 255.0 * 2.0 - 1.0))
        .collect();
    Tensor::from_vec(&[h, w, 3], data)
}

/// Sidecar metadata written next to exported frame sequences.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipSidecar {
    pub prompt: PromptSpec,
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

/// Export a clip as `frame_NNNN.ppm` files plus a `clip.json` sidecar.
pub fn export_clip<S: Scalar>(dir: &Path, clip: &VideoClip<S>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for t in 0..clip.frame_count() {
        write_ppm(&dir.join(format!("frame_{:04}.ppm", t)), &clip.frame(t))?;
    }
    let sidecar = ClipSidecar {
        prompt: clip.prompt,
        seed: clip.seed,
        frames: clip.frame_count(),
        height: clip.height(),
        width: clip.width(),
    };
    let json =
        serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(dir.join("clip.json"), json)?;
    Ok(())
}

/// Load a clip exported by [`export_clip`].
pub fn import_clip<S: Scalar>(dir: &Path) -> Result<VideoClip<S>> {
    let sidecar: ClipSidecar =
        serde_json::from_str(&std::fs::read_to_string(dir.join("clip.json"))?)
            .map_err(|e| Error::Format(e.to_string()))?;
    let mut data = Vec::with_capacity(sidecar.frames * sidecar.height * sidecar.width * 3);
    for t in 0..sidecar.frames {
        let frame: Tensor<S> = read_ppm(&dir.join(format!("frame_{:04}.ppm", t)))?;
        if frame.shape() != [sidecar.height, sidecar.width, 3] {
            return Err(Error::Format(format!(
                "frame {} shape {:?} disagrees with sidecar",
                t,
                frame.shape()
            )));
        }
        data.extend_from_slice(frame.data());
    }
    let frames = Tensor::from_vec(&[sidecar.frames, sidecar.height, sidecar.width, 3], data)?;
    Ok(VideoClip {
        frames,
        prompt: sidecar.prompt,
        seed: sidecar.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_spec(motion: MotionKind, speed: f64) -> PromptSpec {
        PromptSpec {
            shape: ShapeKind::Square,
            color: ColorName::Red,
            motion,
            speed,
            direction: 0.7,
        }
    }

    /// Intensity-weighted centroid of the brightest mass in a frame.
    fn measured_centroid(frame: &Tensor<f64>) -> (f64, f64) {
        let (h, w) = (frame.shape()[0], frame.shape()[1]);
        let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                let px = &frame.data()[(y * w + x) * 3..(y * w + x) * 3 + 3];
                let maxc = px.iter().fold(f64::MIN, |a, &b| a.max(b));
                let weight = (((maxc + 1.0) / 2.0) - 0.3).max(0.0);
                sx += weight * x as f64;
                sy += weight * y as f64;
                sw += weight;
            }
        }
        (sx / sw, sy / sw)
    }

    #[test]
    fn same_seed_same_prompt() {
        assert_eq!(sample_prompt(123), sample_prompt(123));
    }

    #[test]
    fn static_prompts_have_zero_speed() {
        for seed in 0..500 {
            let p = sample_prompt(seed);
            p.validate().unwrap();
            assert_eq!(p.motion == MotionKind::Static, p.speed == 0.0);
        }
    }

    #[test]
    fn shape_frequencies_within_three_sigma() {
        let n = 10_000;
        let mut counts = [0usize; 3];
        for seed in 0..n {
            counts[sample_prompt(seed as u64).shape.index()] += 1;
        }
        // Binomial(n, 1/3): sigma = sqrt(n·p·(1−p)).
        let p = 1.0 / 3.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for &c in &counts {
            let dev = (c as f64 - n as f64 * p).abs();
            assert!(dev < 3.0 * sigma, "count {} deviates {:.1}σ", c, dev / sigma);
        }
    }

    #[test]
    fn static_clip_frames_identical() {
        let spec = default_spec(MotionKind::Static, 0.0);
        let clip: VideoClip<f64> = render_clip(&spec, 4, 32, 32, 9).unwrap();
        let f0 = clip.frame(0);
        for t in 1..4 {
            assert_eq!(clip.frame(t).data(), f0.data());
        }
    }

    #[test]
    fn same_inputs_bit_identical() {
        let spec = sample_prompt(5);
        let a: VideoClip<f32> = render_clip(&spec, 8, 32, 32, 11).unwrap();
        let b: VideoClip<f32> = render_clip(&spec, 8, 32, 32, 11).unwrap();
        assert_eq!(a.frames.data(), b.frames.data());
    }

    #[test]
    fn linear_displacement_matches_speed() {
        let spec = default_spec(MotionKind::Linear, 0.03);
        let clip: VideoClip<f64> = render_clip(&spec, 8, 32, 32, 3).unwrap();
        let expected = 0.03 * 32.0;
        for t in 0..7 {
            let (x0, y0) = measured_centroid(&clip.frame(t));
            let (x1, y1) = measured_centroid(&clip.frame(t + 1));
            let d = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();
            assert!(
                (d - expected).abs() < 0.5,
                "frame {}: displacement {} vs {}",
                t,
                d,
                expected
            );
        }
    }

    #[test]
    fn linear_displacement_constant_within_1px() {
        for seed in [1_u64, 2, 3, 4, 5] {
            let mut spec = sample_prompt(seed);
            spec.motion = MotionKind::Linear;
            spec.speed = 0.02 + 0.02 * (seed as f64 / 5.0);
            let track = centroid_track(&spec, 16, 32, 32, seed);
            let disp: Vec<f64> = track
                .windows(2)
                .map(|p| ((p[1].0 - p[0].0).powi(2) + (p[1].1 - p[0].1).powi(2)).sqrt())
                .collect();
            for d in &disp {
                assert!((d - disp[0]).abs() < 1.0);
            }
        }
    }

    #[test]
    fn bounce_reflects_and_tracks() {
        let spec = PromptSpec {
            shape: ShapeKind::Circle,
            color: ColorName::Blue,
            motion: MotionKind::Bounce,
            speed: 0.09,
            direction: 0.5,
        };
        let clip: VideoClip<f64> = render_clip(&spec, 24, 32, 32, 7).unwrap();
        let track = centroid_track(&spec, 24, 32, 32, 7);
        for (t, &(cx, cy)) in track.iter().enumerate() {
            let (mx, my) = measured_centroid(&clip.frame(t));
            assert!(
                (mx - cx).abs() < 0.5 && (my - cy).abs() < 0.5,
                "frame {}: measured ({:.2},{:.2}) vs track ({:.2},{:.2})",
                t,
                mx,
                my,
                cx,
                cy
            );
            assert!(cx > 0.0 && cx < 31.0 && cy > 0.0 && cy < 31.0);
        }
        // Elastic reflection preserves speed: mean sampled displacement
        // stays within 1 px of speed·W (chords shorten only at bounces).
        let d = |a: (f64, f64), b: (f64, f64)| ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
        let mean: f64 =
            track.windows(2).map(|p| d(p[0], p[1])).sum::<f64>() / (track.len() - 1) as f64;
        assert!(
            (mean - 0.09 * 32.0).abs() < 1.0,
            "mean displacement {} vs {}",
            mean,
            0.09 * 32.0
        );
    }

    #[test]
    fn oversized_shape_rejected() {
        let spec = default_spec(MotionKind::Static, 0.0);
        assert!(render_clip::<f64>(&spec, 2, 8, 8, 0).is_err());
    }

    #[test]
    fn pixel_range_bounded() {
        for seed in 0..50 {
            let spec = sample_prompt(seed);
            let clip: VideoClip<f64> = render_clip(&spec, 4, 32, 32, seed).unwrap();
            for &v in clip.frames.data() {
                assert!((-1.0..=1.0).contains(&v), "pixel {} out of range", v);
            }
        }
    }

    #[test]
    fn encode_prompt_blocks() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::<f64>::new();
        let tables = CondTables {
            shape: tape.param("cond/shape_emb", Tensor::randn(&[3, ENUM_EMBED_DIM], &mut rng)),
            color: tape.param("cond/color_emb", Tensor::randn(&[4, ENUM_EMBED_DIM], &mut rng)),
            motion: tape.param(
                "cond/motion_emb",
                Tensor::randn(&[4, ENUM_EMBED_DIM], &mut rng),
            ),
        };
        let a = default_spec(MotionKind::Linear, 0.03);
        let mut b = a;
        b.color = ColorName::Green;
        let va = encode_prompt(&mut tape, &tables, &a).unwrap();
        let vb = encode_prompt(&mut tape, &tables, &b).unwrap();
        assert_eq!(tape.value(va).shape(), &[1, COND_DIM]);
        let da = tape.value(va).data();
        let db = tape.value(vb).data();
        // Only the color sub-block [E, 2E) may differ.
        for i in 0..COND_DIM {
            if da[i] != db[i] {
                assert!(
                    (ENUM_EMBED_DIM..2 * ENUM_EMBED_DIM).contains(&i),
                    "index {} differs outside color block",
                    i
                );
            }
        }
        // Equal specs produce equal vectors.
        let va2 = encode_prompt(&mut tape, &tables, &a).unwrap();
        assert_eq!(tape.value(va).data(), tape.value(va2).data());
    }

    #[test]
    fn ppm_round_trip() {
        let spec = default_spec(MotionKind::Static, 0.0);
        let clip: VideoClip<f32> = render_clip(&spec, 2, 16, 16, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_clip(dir.path(), &clip).unwrap();
        let loaded: VideoClip<f32> = import_clip(dir.path()).unwrap();
        assert_eq!(loaded.prompt, clip.prompt);
        assert_eq!(loaded.frame_count(), 2);
        // Quantization to u8 bounds the round-trip error by half a step.
        let err = clip.frames.max_abs_diff(&loaded.frames);
        assert!(err <= 1.0 / 255.0 + 1e-6, "round trip err {}", err);
    }
}
