//! Analytic video-quality metrics, score aggregation, and the runtime
//! harness.
//!
//! All metrics are pure functions of pixel content in [0, 1]. Motion
//! dimensions track the intensity-weighted centroid of the brightest mass
//! (an adaptive threshold keeps dim generated blobs trackable); consistency
//! dimensions compare masked color histograms across frames; semantic
//! adherence re-uses the renderer's own shape templates. Aggregates:
//! quality is the uniform mean of the six quality dimensions, semantic the
//! mean of the three adherence components, total 0.8·quality + 0.2·semantic.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Scalar, Tensor};
use crate::flowmatch::TimeGrid;
use crate::model::{DitModel, ParamStore};
use crate::rollout::{generate_clip_causal, generate_clip_uncached, generate_first_chunk};
use crate::synthvid::{ColorName, MotionKind, PromptSpec, ShapeKind, VideoClip};
use crate::threads;
use crate::{Error, Result};

// ── Frame access helpers (f64 view of any scalar clip) ───────────────

struct Frames {
    t: usize,
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl Frames {
    fn of<S: Scalar>(clip: &Tensor<S>) -> Result<Frames> {
        let sh = clip.shape();
        if sh.len() != 4 {
            return Err(Error::invalid(
                "metrics",
                format!("expected [T,H,W,C], got {:?}", sh),
            ));
        }
        Ok(Frames {
            t: sh[0],
            h: sh[1],
            w: sh[2],
            c: sh[3],
            data: clip.to_f64_vec(),
        })
    }

    #[inline]
    fn px(&self, t: usize, y: usize, x: usize, c: usize) -> f64 {
        self.data[((t * self.h + y) * self.w + x) * self.c + c]
    }

    /// Max-channel intensity in [0, 1].
    #[inline]
    fn intensity(&self, t: usize, y: usize, x: usize) -> f64 {
        let mut m = f64::MIN;
        for c in 0..self.c {
            m = m.max(self.px(t, y, x, c));
        }
        (m + 1.0) / 2.0
    }
}

/// Per-frame subject mask and centroid. The threshold adapts to the frame:
/// midway between the mean and the maximum intensity, so dim but structured
/// content still yields a track.
struct FrameTrack {
    centroid: (f64, f64),
    /// Pixel weights above threshold (len H·W); zero means background.
    weights: Vec<f64>,
    degenerate: bool,
}

fn frame_track(f: &Frames, t: usize) -> FrameTrack {
    let n = f.h * f.w;
    let mut intens = Vec::with_capacity(n);
    let mut sum = 0.0;
    let mut max_i = f64::MIN;
    for y in 0..f.h {
        for x in 0..f.w {
            let v = f.intensity(t, y, x);
            sum += v;
            max_i = max_i.max(v);
            intens.push(v);
        }
    }
    let mean_i = sum / n as f64;
    let thr = mean_i + 0.5 * (max_i - mean_i);
    let mut weights = vec![0.0; n];
    let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
    for y in 0..f.h {
        for x in 0..f.w {
            let w = (intens[y * f.w + x] - thr).max(0.0);
            weights[y * f.w + x] = w;
            sx += w * x as f64;
            sy += w * y as f64;
            sw += w;
        }
    }
    if sw < 1e-9 {
        return FrameTrack {
            centroid: ((f.w as f64 - 1.0) / 2.0, (f.h as f64 - 1.0) / 2.0),
            weights,
            degenerate: true,
        };
    }
    FrameTrack {
        centroid: (sx / sw, sy / sw),
        weights,
        degenerate: false,
    }
}

/// Centroid track over all frames; `degenerate` counts empty-mass frames.
pub struct CentroidTrack {
    pub points: Vec<(f64, f64)>,
    pub degenerate_frames: usize,
}

pub fn centroid_track<S: Scalar>(clip: &Tensor<S>) -> Result<CentroidTrack> {
    let f = Frames::of(clip)?;
    let mut points = Vec::with_capacity(f.t);
    let mut degenerate = 0;
    for t in 0..f.t {
        let tr = frame_track(&f, t);
        if tr.degenerate {
            degenerate += 1;
        }
        points.push(tr.centroid);
    }
    Ok(CentroidTrack {
        points,
        degenerate_frames: degenerate,
    })
}

/// Score plus a degeneracy flag for the centroid-based dimensions.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FlaggedScore {
    pub score: f64,
    pub degenerate: bool,
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// 1 − clamp(mean |frame_{i+1} − frame_i| / 2, 0, 1). Range of pixel values
/// is [−1, 1], so 2 is the largest possible per-pixel step.
pub fn temporal_flickering<S: Scalar>(clip: &Tensor<S>) -> Result<f64> {
    let f = Frames::of(clip)?;
    if f.t < 2 {
        return Err(Error::Precondition("temporal_flickering needs T >= 2".into()));
    }
    let per_frame = f.h * f.w * f.c;
    let mut acc = 0.0;
    for t in 0..f.t - 1 {
        for i in 0..per_frame {
            acc += (f.data[(t + 1) * per_frame + i] - f.data[t * per_frame + i]).abs();
        }
    }
    let mean = acc / ((f.t - 1) * per_frame) as f64;
    Ok(1.0 - clamp01(mean / 2.0))
}

/// Normalized mean first-difference magnitude of the centroid track; full
/// scale is the maximum prompt speed, 0.1·W per frame.
pub fn dynamic_degree<S: Scalar>(clip: &Tensor<S>) -> Result<FlaggedScore> {
    let f = Frames::of(clip)?;
    if f.t < 2 {
        return Err(Error::Precondition("dynamic_degree needs T >= 2".into()));
    }
    let track = centroid_track(clip)?;
    if track.degenerate_frames > 0 {
        return Ok(FlaggedScore {
            score: 0.0,
            degenerate: true,
        });
    }
    let mean_disp = track
        .points
        .windows(2)
        .map(|p| ((p[1].0 - p[0].0).powi(2) + (p[1].1 - p[0].1).powi(2)).sqrt())
        .sum::<f64>()
        / (f.t - 1) as f64;
    Ok(FlaggedScore {
        score: clamp01(mean_disp / (0.1 * f.w as f64)),
        degenerate: false,
    })
}

/// 1 − normalized mean second difference of the centroid track; full scale
/// is 0.2·W (a dead-stop reversal at top speed).
pub fn motion_smoothness<S: Scalar>(clip: &Tensor<S>) -> Result<FlaggedScore> {
    let f = Frames::of(clip)?;
    if f.t < 3 {
        return Err(Error::Precondition("motion_smoothness needs T >= 3".into()));
    }
    let track = centroid_track(clip)?;
    if track.degenerate_frames > 0 {
        return Ok(FlaggedScore {
            score: 0.0,
            degenerate: true,
        });
    }
    let pts = &track.points;
    let mut acc = 0.0;
    for i in 1..pts.len() - 1 {
        let ax = pts[i + 1].0 - 2.0 * pts[i].0 + pts[i - 1].0;
        let ay = pts[i + 1].1 - 2.0 * pts[i].1 + pts[i - 1].1;
        acc += (ax * ax + ay * ay).sqrt();
    }
    let mean = acc / (pts.len() - 2) as f64;
    // Half a pixel of second difference is raster noise of the subpixel
    // tracker, not motion irregularity.
    let excess = (mean - 0.5).max(0.0);
    Ok(FlaggedScore {
        score: 1.0 - clamp01(excess / (0.2 * f.w as f64)),
        degenerate: false,
    })
}

// ── Histogram consistency ────────────────────────────────────────────

const HIST_BINS: usize = 4;

fn masked_histogram(f: &Frames, t: usize, weights: &[f64], subject: bool) -> Vec<f64> {
    let mut hist = vec![0.0; HIST_BINS * HIST_BINS * HIST_BINS];
    let mut total = 0.0;
    for y in 0..f.h {
        for x in 0..f.w {
            let masked = weights[y * f.w + x] > 0.0;
            if masked != subject {
                continue;
            }
            let mut idx = 0;
            for c in 0..3 {
                let v01 = (f.px(t, y, x, c.min(f.c - 1)) + 1.0) / 2.0;
                let bin = ((v01 * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
                idx = idx * HIST_BINS + bin;
            }
            hist[idx] += 1.0;
            total += 1.0;
        }
    }
    if total > 0.0 {
        for h in &mut hist {
            *h /= total;
        }
    }
    hist
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    clamp01(dot / (na * nb))
}

fn histogram_consistency<S: Scalar>(clip: &Tensor<S>, subject: bool) -> Result<f64> {
    let f = Frames::of(clip)?;
    if f.t < 2 {
        return Err(Error::Precondition("consistency needs T >= 2".into()));
    }
    let hists: Vec<Vec<f64>> = (0..f.t)
        .map(|t| {
            let tr = frame_track(&f, t);
            masked_histogram(&f, t, &tr.weights, subject)
        })
        .collect();
    let mut acc = 0.0;
    for t in 1..f.t {
        acc += 0.5 * (cosine(&hists[t], &hists[0]) + cosine(&hists[t], &hists[t - 1]));
    }
    Ok(acc / (f.t - 1) as f64)
}

/// Cross-frame agreement of the subject's color histogram, anchored to the
/// first frame and to the previous frame.
pub fn subject_consistency<S: Scalar>(clip: &Tensor<S>) -> Result<f64> {
    histogram_consistency(clip, true)
}

/// Same agreement over the masked-out background pixels.
pub fn background_consistency<S: Scalar>(clip: &Tensor<S>) -> Result<f64> {
    histogram_consistency(clip, false)
}

// ── Semantic adherence ───────────────────────────────────────────────

/// Angular-harmonic shape classification. A soft low-threshold mask keeps
/// anti-aliased edges; boundary-weighted 3rd and 4th harmonics separate the
/// template family: a triangle's 3-fold symmetry cancels the 4th harmonic,
/// a square's 4-fold symmetry cancels the 3rd, a circle cancels both.
fn classify_shape(f: &Frames, t: usize, _tr: &FrameTrack) -> Option<ShapeKind> {
    let n = f.h * f.w;
    let mut intens = Vec::with_capacity(n);
    let mut sum = 0.0;
    let mut max_i = f64::MIN;
    for y in 0..f.h {
        for x in 0..f.w {
            let v = f.intensity(t, y, x);
            sum += v;
            max_i = max_i.max(v);
            intens.push(v);
        }
    }
    let mean_i = sum / n as f64;
    let thr = mean_i + 0.25 * (max_i - mean_i);
    let weight = |y: usize, x: usize| (intens[y * f.w + x] - thr).max(0.0);
    let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
    for y in 0..f.h {
        for x in 0..f.w {
            let w = weight(y, x);
            sx += w * x as f64;
            sy += w * y as f64;
            sw += w;
        }
    }
    if sw < 1e-6 {
        return None;
    }
    let (cx, cy) = (sx / sw, sy / sw);
    let (mut a3_re, mut a3_im, mut a4_re, mut a4_im, mut norm) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for y in 0..f.h {
        for x in 0..f.w {
            let w = weight(y, x);
            if w <= 0.0 {
                continue;
            }
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let r2 = dx * dx + dy * dy;
            if r2 < 1e-9 {
                continue;
            }
            let theta = dy.atan2(dx);
            let m = w * r2;
            a3_re += m * (3.0 * theta).cos();
            a3_im += m * (3.0 * theta).sin();
            a4_re += m * (4.0 * theta).cos();
            a4_im += m * (4.0 * theta).sin();
            norm += m;
        }
    }
    if norm < 1e-9 {
        return None;
    }
    let a3 = (a3_re * a3_re + a3_im * a3_im).sqrt() / norm;
    let a4 = (a4_re * a4_re + a4_im * a4_im).sqrt() / norm;
    // Rendered templates measure a3 ≈ 0.5 for triangles (< 0.05 otherwise)
    // and a4 ≈ 0.24..0.31 for squares (< 0.10 for circles, where the pixel
    // lattice itself leaves a small 4-fold residue).
    Some(if a3 > 0.2 {
        ShapeKind::Triangle
    } else if a4 > 0.17 {
        ShapeKind::Square
    } else {
        ShapeKind::Circle
    })
}

fn classify_color(f: &Frames, t: usize, tr: &FrameTrack) -> Option<ColorName> {
    let (mut r, mut g, mut b, mut wsum) = (0.0, 0.0, 0.0, 0.0);
    for y in 0..f.h {
        for x in 0..f.w {
            let w = tr.weights[y * f.w + x];
            if w > 0.0 {
                r += w * f.px(t, y, x, 0);
                g += w * f.px(t, y, x, 1.min(f.c - 1));
                b += w * f.px(t, y, x, 2.min(f.c - 1));
                wsum += w;
            }
        }
    }
    if wsum < 1e-9 {
        return None;
    }
    let mean = [r / wsum, g / wsum, b / wsum];
    let mut best = (f64::MAX, ColorName::Red);
    for color in ColorName::ALL {
        let target = color.rgb();
        let d: f64 = mean
            .iter()
            .zip(&target)
            .map(|(m, t)| (m - t) * (m - t))
            .sum();
        if d < best.0 {
            best = (d, color);
        }
    }
    Some(best.1)
}

/// Motion classification from the centroid track: static by displacement,
/// circular by smooth same-sign turning with consistent radius, bounce by a
/// per-axis velocity reversal, linear otherwise.
pub fn classify_motion(points: &[(f64, f64)], width: usize) -> MotionKind {
    let n = points.len();
    if n < 2 {
        return MotionKind::Static;
    }
    let disps: Vec<(f64, f64)> = points
        .windows(2)
        .map(|p| (p[1].0 - p[0].0, p[1].1 - p[0].1))
        .collect();
    let mean_disp = disps
        .iter()
        .map(|d| (d.0 * d.0 + d.1 * d.1).sqrt())
        .sum::<f64>()
        / disps.len() as f64;
    if mean_disp < 0.012 * width as f64 {
        return MotionKind::Static;
    }

    // Turning statistics. An orbit turns by a constant angle each frame in
    // one direction; a bounce path keeps a straight heading with a few hard
    // jumps; a straight line barely turns at all.
    let headings: Vec<f64> = disps
        .iter()
        .filter(|d| (d.0 * d.0 + d.1 * d.1).sqrt() > 0.05)
        .map(|d| d.1.atan2(d.0))
        .collect();
    let mut turns = Vec::new();
    for w in headings.windows(2) {
        let mut dh = w[1] - w[0];
        while dh > std::f64::consts::PI {
            dh -= std::f64::consts::TAU;
        }
        while dh < -std::f64::consts::PI {
            dh += std::f64::consts::TAU;
        }
        turns.push(dh);
    }
    if !turns.is_empty() {
        let total_turn: f64 = turns.iter().map(|t| t.abs()).sum();
        let dominant_sign = turns
            .iter()
            .map(|t| t.signum())
            .sum::<f64>()
            .signum();
        let same_sign = turns
            .iter()
            .filter(|&&t| t.signum() == dominant_sign || t.abs() < 0.02)
            .count() as f64
            / turns.len() as f64;
        let active = turns.iter().filter(|t| t.abs() >= 0.03).count() as f64
            / turns.len() as f64;
        let max_turn = turns.iter().fold(0.0_f64, |a, t| a.max(t.abs()));
        // An orbit turns in one direction at every step, with no single
        // sharp event; a bounce concentrates its turning in wall hits.
        if total_turn > 0.7 && same_sign >= 0.9 && active >= 0.6 && max_turn < 1.0 {
            return MotionKind::Circular;
        }
        // Bounce: a hard velocity reversal on either axis (specular walls
        // flip one component) or any single sharp turn.
        let axis_reversal = disps.windows(2).any(|w| {
            (w[0].0.abs() > 0.2 && w[1].0.abs() > 0.2 && w[0].0.signum() != w[1].0.signum())
                || (w[0].1.abs() > 0.2 && w[1].1.abs() > 0.2 && w[0].1.signum() != w[1].1.signum())
        });
        if axis_reversal || max_turn > 1.0 {
            return MotionKind::Bounce;
        }
    }
    MotionKind::Linear
}

/// Per-component adherence of a clip to its prompt: shape template match,
/// dominant masked color, and classified motion pattern, each in {0, 1} per
/// frame (motion per clip), averaged.
pub struct Adherence {
    pub shape_match: f64,
    pub color_match: f64,
    pub motion_match: f64,
}

impl Adherence {
    pub fn mean(&self) -> f64 {
        (self.shape_match + self.color_match + self.motion_match) / 3.0
    }
}

pub fn prompt_adherence<S: Scalar>(clip: &Tensor<S>, spec: &PromptSpec) -> Result<Adherence> {
    let f = Frames::of(clip)?;
    let mut shape_hits = 0.0;
    let mut color_hits = 0.0;
    let mut points = Vec::with_capacity(f.t);
    for t in 0..f.t {
        let tr = frame_track(&f, t);
        if classify_shape(&f, t, &tr) == Some(spec.shape) {
            shape_hits += 1.0;
        }
        if classify_color(&f, t, &tr) == Some(spec.color) {
            color_hits += 1.0;
        }
        points.push(tr.centroid);
    }
    let motion = classify_motion(&points, f.w);
    Ok(Adherence {
        shape_match: shape_hits / f.t as f64,
        color_match: color_hits / f.t as f64,
        motion_match: if motion == spec.motion { 1.0 } else { 0.0 },
    })
}

// ── Aesthetic proxy ──────────────────────────────────────────────────

/// Analytic stand-in for a learned aesthetic score: edge energy and
/// opponent-axis colorfulness, penalized by out-of-gamut mass. All terms
/// are normalized against the renderer's typical ranges and clamped.
pub fn aesthetic_proxy<S: Scalar>(clip: &Tensor<S>) -> Result<f64> {
    let f = Frames::of(clip)?;
    let mut sharp = 0.0;
    let mut sharp_n = 0usize;
    let mut color = 0.0;
    let mut oog = 0.0;
    for t in 0..f.t {
        for y in 0..f.h {
            for x in 0..f.w {
                for c in 0..f.c {
                    let v = f.px(t, y, x, c);
                    oog += (v.abs() - 1.0).max(0.0);
                    if x + 1 < f.w {
                        let d = f.px(t, y, x + 1, c) - v;
                        sharp += d * d;
                        sharp_n += 1;
                    }
                    if y + 1 < f.h {
                        let d = f.px(t, y + 1, x, c) - v;
                        sharp += d * d;
                        sharp_n += 1;
                    }
                }
            }
        }
        // Opponent-axis colorfulness over the frame.
        let n = (f.h * f.w) as f64;
        let (mut rg_m, mut yb_m, mut rg_s, mut yb_s) = (0.0, 0.0, 0.0, 0.0);
        for y in 0..f.h {
            for x in 0..f.w {
                let r = f.px(t, y, x, 0);
                let g = f.px(t, y, x, 1.min(f.c - 1));
                let b = f.px(t, y, x, 2.min(f.c - 1));
                let rg = (r - g) / 2.0;
                let yb = (r + g) / 4.0 - b / 2.0;
                rg_m += rg;
                yb_m += yb;
                rg_s += rg * rg;
                yb_s += yb * yb;
            }
        }
        rg_m /= n;
        yb_m /= n;
        let var = (rg_s / n - rg_m * rg_m).max(0.0) + (yb_s / n - yb_m * yb_m).max(0.0);
        color += var.sqrt() + 0.3 * (rg_m * rg_m + yb_m * yb_m).sqrt();
    }
    let sharp = sharp / sharp_n.max(1) as f64;
    let color = color / f.t as f64;
    let oog = oog / f.data.len() as f64;
    Ok(clamp01(
        0.5 * clamp01(sharp / 0.03) + 0.5 * clamp01(color / 0.25) - 10.0 * oog,
    ))
}

// ── Aggregation and reports ──────────────────────────────────────────

/// All per-dimension scores in [0, 1].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DimensionScores {
    pub subject_consistency: f64,
    pub background_consistency: f64,
    pub temporal_flickering: f64,
    pub motion_smoothness: f64,
    pub dynamic_degree: f64,
    pub aesthetic_proxy: f64,
    pub adherence_shape: f64,
    pub adherence_color: f64,
    pub adherence_motion: f64,
}

impl DimensionScores {
    pub const KEYS: [&'static str; 9] = [
        "subject_consistency",
        "background_consistency",
        "temporal_flickering",
        "motion_smoothness",
        "dynamic_degree",
        "aesthetic_proxy",
        "adherence_shape",
        "adherence_color",
        "adherence_motion",
    ];

    pub fn values(&self) -> [f64; 9] {
        [
            self.subject_consistency,
            self.background_consistency,
            self.temporal_flickering,
            self.motion_smoothness,
            self.dynamic_degree,
            self.aesthetic_proxy,
            self.adherence_shape,
            self.adherence_color,
            self.adherence_motion,
        ]
    }

    /// Build from a key→score map; any missing dimension is rejected.
    pub fn from_map(map: &std::collections::BTreeMap<String, f64>) -> Result<Self> {
        let get = |k: &str| -> Result<f64> {
            map.get(k)
                .copied()
                .ok_or_else(|| Error::Precondition(format!("missing dimension {k}")))
        };
        Ok(DimensionScores {
            subject_consistency: get("subject_consistency")?,
            background_consistency: get("background_consistency")?,
            temporal_flickering: get("temporal_flickering")?,
            motion_smoothness: get("motion_smoothness")?,
            dynamic_degree: get("dynamic_degree")?,
            aesthetic_proxy: get("aesthetic_proxy")?,
            adherence_shape: get("adherence_shape")?,
            adherence_color: get("adherence_color")?,
            adherence_motion: get("adherence_motion")?,
        })
    }
}

/// quality = mean of the six quality dimensions, semantic = mean of the
/// three adherence components, total = 0.8·quality + 0.2·semantic.
pub fn aggregate(dims: &DimensionScores) -> (f64, f64, f64) {
    let quality = (dims.subject_consistency
        + dims.background_consistency
        + dims.temporal_flickering
        + dims.motion_smoothness
        + dims.dynamic_degree
        + dims.aesthetic_proxy)
        / 6.0;
    let semantic = (dims.adherence_shape + dims.adherence_color + dims.adherence_motion) / 3.0;
    let total = 0.8 * quality + 0.2 * semantic;
    (quality, semantic, total)
}

/// Published large-scale reference magnitudes, carried in every report
/// header for context only; desk-scale scores are internal comparisons and
/// are not calibrated against them.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ExternalReference {
    pub total: f64,
    pub quality: f64,
    pub semantic: f64,
    pub throughput_fps: f64,
    pub latency_s: f64,
    pub note: &'static str,
}

impl Default for ExternalReference {
    fn default() -> Self {
        ExternalReference {
            total: 84.92,
            quality: 85.91,
            semantic: 80.97,
            throughput_fps: 17.0,
            latency_s: 0.69,
            note: "published large-scale reference values; internal desk-scale \
                   scores are not comparable to them",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub external_reference: ExternalReference,
    pub dimensions: DimensionScores,
    pub quality_score: f64,
    pub semantic_score: f64,
    pub total_score: f64,
    pub clip_count: usize,
    pub degenerate_clips: usize,
    pub seed: u64,
    pub throughput_fps: Option<f64>,
    pub first_chunk_latency_s: Option<f64>,
    pub runtime_reliable: Option<bool>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }

    /// Plot-ready CSV: one `dimension,score` row per dimension plus the
    /// aggregates.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dimension,score\n");
        for (key, value) in DimensionScores::KEYS.iter().zip(self.dimensions.values()) {
            out.push_str(&format!("{},{:.6}\n", key, value));
        }
        out.push_str(&format!("quality_score,{:.6}\n", self.quality_score));
        out.push_str(&format!("semantic_score,{:.6}\n", self.semantic_score));
        out.push_str(&format!("total_score,{:.6}\n", self.total_score));
        if let Some(fps) = self.throughput_fps {
            out.push_str(&format!("throughput_fps,{:.6}\n", fps));
        }
        if let Some(lat) = self.first_chunk_latency_s {
            out.push_str(&format!("first_chunk_latency_s,{:.6}\n", lat));
        }
        out
    }
}

/// Score a set of clips against their prompts; per-clip metrics run on the
/// worker pool, means are accumulated in clip order.
pub fn evaluate_clips<S: Scalar>(clips: &[VideoClip<S>], seed: u64) -> Result<MetricsReport> {
    if clips.is_empty() {
        return Err(Error::Precondition("no clips to evaluate".into()));
    }
    struct PerClip {
        dims: DimensionScores,
        degenerate: bool,
    }
    let eval_one = |clip: &VideoClip<S>| -> Result<PerClip> {
        let deg = dynamic_degree(&clip.frames)?;
        let smooth = motion_smoothness(&clip.frames)?;
        let adherence = prompt_adherence(&clip.frames, &clip.prompt)?;
        Ok(PerClip {
            dims: DimensionScores {
                subject_consistency: subject_consistency(&clip.frames)?,
                background_consistency: background_consistency(&clip.frames)?,
                temporal_flickering: temporal_flickering(&clip.frames)?,
                motion_smoothness: smooth.score,
                dynamic_degree: deg.score,
                aesthetic_proxy: aesthetic_proxy(&clip.frames)?,
                adherence_shape: adherence.shape_match,
                adherence_color: adherence.color_match,
                adherence_motion: adherence.motion_match,
            },
            degenerate: deg.degenerate || smooth.degenerate,
        })
    };
    let per: Vec<Result<PerClip>> = threads::pool().install(|| {
        use rayon::prelude::*;
        clips.par_iter().map(eval_one).collect()
    });
    let per = per.into_iter().collect::<Result<Vec<_>>>()?;
    let n = per.len() as f64;
    let mut sums = [0.0; 9];
    let mut degenerate_clips = 0;
    for p in &per {
        for (s, v) in sums.iter_mut().zip(p.dims.values()) {
            *s += v;
        }
        if p.degenerate {
            degenerate_clips += 1;
        }
    }
    let dims = DimensionScores {
        subject_consistency: sums[0] / n,
        background_consistency: sums[1] / n,
        temporal_flickering: sums[2] / n,
        motion_smoothness: sums[3] / n,
        dynamic_degree: sums[4] / n,
        aesthetic_proxy: sums[5] / n,
        adherence_shape: sums[6] / n,
        adherence_color: sums[7] / n,
        adherence_motion: sums[8] / n,
    };
    let (quality, semantic, total) = aggregate(&dims);
    Ok(MetricsReport {
        external_reference: ExternalReference::default(),
        dimensions: dims,
        quality_score: quality,
        semantic_score: semantic,
        total_score: total,
        clip_count: per.len(),
        degenerate_clips,
        seed,
        throughput_fps: None,
        first_chunk_latency_s: None,
        runtime_reliable: None,
    })
}

// ── Runtime harness ──────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct RuntimeReport {
    pub throughput_fps: f64,
    pub first_chunk_latency_s: f64,
    pub full_clip_seconds: f64,
    pub uncached_seconds: f64,
    /// (max − min) / median of the per-run throughput samples.
    pub relative_spread: f64,
    pub runs: usize,
    pub reliable: bool,
}

fn timer_resolution() -> f64 {
    let mut best = f64::MAX;
    for _ in 0..64 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b.duration_since(a).as_secs_f64());
    }
    best
}

/// Wall-clock throughput and first-chunk latency: median over `runs`
/// measured runs after `warmup` discarded ones, pinned to one thread.
/// Also times the cache-free baseline on the same seeds.
pub fn measure_runtime<S: Scalar>(
    model: &DitModel,
    params: &ParamStore<S>,
    prompts: &[(PromptSpec, u64)],
    grid: &TimeGrid,
    warmup: usize,
    runs: usize,
) -> Result<RuntimeReport> {
    if warmup < 1 {
        return Err(Error::Precondition(
            "runtime measurement needs at least one warmup run".into(),
        ));
    }
    if runs < 5 {
        return Err(Error::Precondition("need at least 5 measured runs".into()));
    }
    if prompts.is_empty() {
        return Err(Error::Precondition("no prompts to time".into()));
    }
    let clip_shape = model.cfg.clip_shape();
    let noises: Vec<(PromptSpec, Tensor<S>)> = prompts
        .iter()
        .map(|(spec, seed)| {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(*seed);
            (*spec, Tensor::randn(&clip_shape, &mut rng))
        })
        .collect();

    let run_cached = |do_work: bool| -> Result<f64> {
        let start = Instant::now();
        for (spec, z) in &noises {
            if do_work {
                generate_clip_causal(model, params, spec, grid, z)?;
            }
        }
        Ok(start.elapsed().as_secs_f64())
    };

    for _ in 0..warmup {
        run_cached(true)?;
    }

    let mut full_secs = Vec::with_capacity(runs);
    let mut latency_secs = Vec::with_capacity(runs);
    let mut uncached_secs = Vec::with_capacity(runs);
    for _ in 0..runs {
        full_secs.push(run_cached(true)?);
        let (spec, z) = &noises[0];
        let start = Instant::now();
        generate_first_chunk(model, params, spec, grid, z)?;
        latency_secs.push(start.elapsed().as_secs_f64());
        let start = Instant::now();
        for (spec, z) in &noises {
            generate_clip_uncached(model, params, spec, grid, z)?;
        }
        uncached_secs.push(start.elapsed().as_secs_f64());
    }
    let median = |v: &mut Vec<f64>| -> f64 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    let full = median(&mut full_secs.clone());
    let latency = median(&mut latency_secs.clone());
    let uncached = median(&mut uncached_secs.clone());
    let frames_total = (prompts.len() * model.cfg.frames) as f64;
    let fps_samples: Vec<f64> = full_secs.iter().map(|s| frames_total / s).collect();
    let mut sorted = fps_samples.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let fps_median = sorted[sorted.len() / 2];
    let spread = (sorted[sorted.len() - 1] - sorted[0]) / fps_median;

    let resolution = timer_resolution();
    let reliable = latency > 50.0 * resolution && full > 50.0 * resolution;
    Ok(RuntimeReport {
        throughput_fps: frames_total / full,
        first_chunk_latency_s: latency,
        full_clip_seconds: full,
        uncached_seconds: uncached,
        relative_spread: spread,
        runs,
        reliable,
    })
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthvid::{render_clip, sample_prompt};

    fn clip_of(spec: &PromptSpec, t: usize, seed: u64) -> VideoClip<f64> {
        render_clip(spec, t, 32, 32, seed).unwrap()
    }

    fn static_spec(color: ColorName) -> PromptSpec {
        PromptSpec {
            shape: ShapeKind::Square,
            color,
            motion: MotionKind::Static,
            speed: 0.0,
            direction: 0.0,
        }
    }

    #[test]
    fn flicker_extremes() {
        let clip = clip_of(&static_spec(ColorName::Red), 4, 1);
        assert_eq!(temporal_flickering(&clip.frames).unwrap(), 1.0);

        // Alternating all-white / all-black frames.
        let mut data = Vec::new();
        for t in 0..4 {
            let v = if t % 2 == 0 { 1.0 } else { -1.0 };
            data.extend(std::iter::repeat(v).take(8 * 8 * 3));
        }
        let alt = Tensor::<f64>::from_vec(&[4, 8, 8, 3], data).unwrap();
        assert_eq!(temporal_flickering(&alt).unwrap(), 0.0);

        let single = clip_of(&static_spec(ColorName::Red), 1, 1);
        assert!(temporal_flickering(&single.frames).is_err());
    }

    #[test]
    fn flicker_matches_reference_loop_on_rendered_clip() {
        let spec = PromptSpec {
            shape: ShapeKind::Circle,
            color: ColorName::Green,
            motion: MotionKind::Linear,
            speed: 0.02,
            direction: 0.3,
        };
        let clip = clip_of(&spec, 8, 2);
        // Independent per-pixel loop oracle.
        let f = &clip.frames;
        let (t, h, w, c) = (8, 32, 32, 3);
        let mut acc = 0.0;
        for ti in 0..t - 1 {
            for y in 0..h {
                for x in 0..w {
                    for ci in 0..c {
                        let a = f.data()[(((ti + 1) * h + y) * w + x) * c + ci];
                        let b = f.data()[((ti * h + y) * w + x) * c + ci];
                        acc += (a - b).abs();
                    }
                }
            }
        }
        let expect = 1.0 - (acc / ((t - 1) * h * w * c) as f64 / 2.0).clamp(0.0, 1.0);
        let got = temporal_flickering(&clip.frames).unwrap();
        assert!((got - expect).abs() < 1e-6);
    }

    #[test]
    fn degree_and_smoothness_on_kinematics() {
        // Static clip: zero degree, full smoothness.
        let s = clip_of(&static_spec(ColorName::Blue), 6, 3);
        assert_eq!(dynamic_degree(&s.frames).unwrap().score, 0.0);
        assert_eq!(motion_smoothness(&s.frames).unwrap().score, 1.0);

        // Constant-velocity clip: smoothness 1 within tracker noise.
        let lin = PromptSpec {
            shape: ShapeKind::Square,
            color: ColorName::Red,
            motion: MotionKind::Linear,
            speed: 0.03,
            direction: 0.9,
        };
        let l = clip_of(&lin, 8, 4);
        let sm = motion_smoothness(&l.frames).unwrap();
        assert!(sm.score > 0.97, "smoothness {}", sm.score);

        // Bounce clip: degree equals speed·W / (0.1·W) within 1px worth.
        let b = PromptSpec {
            shape: ShapeKind::Circle,
            color: ColorName::Yellow,
            motion: MotionKind::Bounce,
            speed: 0.08,
            direction: 0.5,
        };
        let bc = clip_of(&b, 16, 5);
        let deg = dynamic_degree(&bc.frames).unwrap();
        let expect = 0.08 * 32.0 / (0.1 * 32.0);
        let tol = 1.0 / (0.1 * 32.0);
        assert!(
            (deg.score - expect).abs() < tol,
            "degree {} vs {}",
            deg.score,
            expect
        );
    }

    #[test]
    fn degenerate_clip_flags() {
        let flat = Tensor::<f64>::filled(&[4, 8, 8, 3], -0.5);
        let deg = dynamic_degree(&flat).unwrap();
        assert_eq!(deg.score, 0.0);
        assert!(deg.degenerate);
    }

    #[test]
    fn subject_consistency_high_for_fixed_color_low_for_switch() {
        let spec = PromptSpec {
            shape: ShapeKind::Square,
            color: ColorName::Red,
            motion: MotionKind::Linear,
            speed: 0.03,
            direction: 0.4,
        };
        let clip = clip_of(&spec, 16, 6);
        let sc = subject_consistency(&clip.frames).unwrap();
        assert!(sc >= 0.99, "subject consistency {}", sc);

        // Adversarial: shape switches color halfway through.
        let mut swapped = spec;
        swapped.color = ColorName::Blue;
        let second = clip_of(&swapped, 16, 6);
        let hwc = 32 * 32 * 3;
        let mut data = clip.frames.data()[..8 * hwc].to_vec();
        data.extend_from_slice(&second.frames.data()[8 * hwc..]);
        let spliced = Tensor::<f64>::from_vec(&[16, 32, 32, 3], data).unwrap();
        let sc2 = subject_consistency(&spliced).unwrap();
        assert!(sc2 < 0.8, "spliced subject consistency {}", sc2);

        let single = clip_of(&spec, 1, 6);
        assert!(subject_consistency(&single.frames).is_err());
    }

    #[test]
    fn adherence_on_ground_truth_is_perfect() {
        for seed in 0..12 {
            let spec = sample_prompt(seed * 31 + 7);
            let clip = clip_of(&spec, 16, seed);
            let a = prompt_adherence(&clip.frames, &spec).unwrap();
            assert_eq!(a.shape_match, 1.0, "shape mismatch for {:?}", spec);
            assert_eq!(a.color_match, 1.0, "color mismatch for {:?}", spec);
            assert_eq!(a.motion_match, 1.0, "motion mismatch for {:?}", spec);
        }
    }

    #[test]
    fn adherence_counts_components() {
        // Correct shape and motion, wrong color: 2/3.
        let spec = static_spec(ColorName::Red);
        let clip = clip_of(&spec, 8, 8);
        let mut wrong_color = spec;
        wrong_color.color = ColorName::Blue;
        let a = prompt_adherence(&clip.frames, &wrong_color).unwrap();
        assert_eq!(a.shape_match, 1.0);
        assert_eq!(a.color_match, 0.0);
        assert_eq!(a.motion_match, 1.0);
        assert!((a.mean() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn aggregation_extremes_and_monotonicity() {
        let ones = DimensionScores {
            subject_consistency: 1.0,
            background_consistency: 1.0,
            temporal_flickering: 1.0,
            motion_smoothness: 1.0,
            dynamic_degree: 1.0,
            aesthetic_proxy: 1.0,
            adherence_shape: 1.0,
            adherence_color: 1.0,
            adherence_motion: 1.0,
        };
        assert_eq!(aggregate(&ones), (1.0, 1.0, 1.0));
        let mut zeros = ones;
        for v in [
            &mut zeros.subject_consistency,
            &mut zeros.background_consistency,
            &mut zeros.temporal_flickering,
            &mut zeros.motion_smoothness,
            &mut zeros.dynamic_degree,
            &mut zeros.aesthetic_proxy,
            &mut zeros.adherence_shape,
            &mut zeros.adherence_color,
            &mut zeros.adherence_motion,
        ] {
            *v = 0.0;
        }
        assert_eq!(aggregate(&zeros), (0.0, 0.0, 0.0));

        // Raising any dimension never lowers any aggregate.
        let base = DimensionScores {
            subject_consistency: 0.4,
            background_consistency: 0.5,
            temporal_flickering: 0.6,
            motion_smoothness: 0.7,
            dynamic_degree: 0.3,
            aesthetic_proxy: 0.2,
            adherence_shape: 0.5,
            adherence_color: 0.5,
            adherence_motion: 0.0,
        };
        let (q0, s0, t0) = aggregate(&base);
        for i in 0..9 {
            let mut bumped = base;
            let fields: [&mut f64; 9] = [
                &mut bumped.subject_consistency,
                &mut bumped.background_consistency,
                &mut bumped.temporal_flickering,
                &mut bumped.motion_smoothness,
                &mut bumped.dynamic_degree,
                &mut bumped.aesthetic_proxy,
                &mut bumped.adherence_shape,
                &mut bumped.adherence_color,
                &mut bumped.adherence_motion,
            ];
            *fields[i] += 0.2;
            let (q, s, t) = aggregate(&bumped);
            assert!(q >= q0 && s >= s0 && t > t0 - 1e-12);
        }
    }

    #[test]
    fn missing_dimension_rejected() {
        let mut map = std::collections::BTreeMap::new();
        map.insert("subject_consistency".to_string(), 1.0);
        assert!(DimensionScores::from_map(&map).is_err());
    }

    #[test]
    fn metrics_invariant_to_frame_index_offset() {
        // Pure functions of pixel content: re-evaluating the same tensor
        // must reproduce identical scores (no hidden per-call state).
        let spec = sample_prompt(40);
        let clip = clip_of(&spec, 8, 9);
        let a = evaluate_clips(&[clip.clone()], 0).unwrap();
        let b = evaluate_clips(&[clip], 0).unwrap();
        assert_eq!(a.total_score, b.total_score);
        assert_eq!(a.dimensions.values(), b.dimensions.values());
    }

    #[test]
    fn report_serializes_with_reference_header() {
        let spec = sample_prompt(41);
        let clip = clip_of(&spec, 8, 10);
        let report = evaluate_clips(&[clip], 7).unwrap();
        let json = report.to_json();
        assert!(json.contains("external_reference"));
        assert!(json.contains("84.92"));
        let csv = report.to_csv();
        assert!(csv.lines().count() >= 12);
        assert!(csv.starts_with("dimension,score"));
    }
}
