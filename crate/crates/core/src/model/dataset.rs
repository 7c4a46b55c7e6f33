//! Synthetic clips: one soft-edged shape translating over a flat background.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const NUM_SHAPES: usize = 3;
pub const SHAPE_NAMES: [&str; NUM_SHAPES] = ["disk", "square", "triangle"];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip {
    /// `[F, 3, H, W]` in `[0, 1]`.
    pub frames: Tensor,
    /// Shape class, doubling as the generation condition.
    pub label: usize,
    /// Per-frame displacement in pixels `(dx, dy)`; `None` for generated clips.
    pub velocity: Option<(i32, i32)>,
}

impl SyntheticClip {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    /// Frame `k` as a `[3, H, W]` image.
    pub fn frame(&self, k: usize) -> Tensor {
        let s = self.frames.shape();
        self.frames.narrow0(k, 1).and_then(|t| t.reshape(vec![s[1], s[2], s[3]])).expect("frame index within clip")
    }
}

/// Signed distance to the shape boundary (negative inside), in pixels.
fn signed_distance(label: usize, px: f64, py: f64, r: f64) -> f64 {
    match label {
        0 => (px * px + py * py).sqrt() - r,
        1 => {
            let (dx, dy) = (px.abs() - r, py.abs() - r);
            let outside = (dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt();
            outside + dx.max(dy).min(0.0)
        }
        _ => {
            // equilateral triangle, apex up
            let k = 3f64.sqrt();
            let mut x = px.abs() - r;
            let mut y = -py + r / k;
            if x + k * y > 0.0 {
                (x, y) = ((x - k * y) / 2.0, (-k * x - y) / 2.0);
            }
            x -= x.clamp(-2.0 * r, 0.0);
            -(x * x + y * y).sqrt() * y.signum()
        }
    }
}

struct ShapeParams {
    label: usize,
    center: (f64, f64),
    radius: f64,
    fg: [f64; 3],
    bg: [f64; 3],
    velocity: (i32, i32),
}

fn render(p: &ShapeParams, frames: usize, h: usize, w: usize) -> Tensor {
    let plane = h * w;
    Tensor::from_fn(vec![frames, 3, h, w], |k| {
        let f = k / (3 * plane);
        let c = (k / plane) % 3;
        let (y, x) = ((k % plane) / w, k % w);
        let cx = p.center.0 + (p.velocity.0 * f as i32) as f64;
        let cy = p.center.1 + (p.velocity.1 * f as i32) as f64;
        let sd = signed_distance(p.label, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, p.radius);
        let cover = (0.5 - sd).clamp(0.0, 1.0);
        p.bg[c] + (p.fg[c] - p.bg[c]) * cover
    })
}

/// `n` clips with a balanced class mix, deterministic in `seed`.
pub fn make_synthetic_dataset(n: usize, seed: u64, frames: usize, h: usize, w: usize) -> Result<Vec<SyntheticClip>> {
    if n == 0 || frames == 0 || h < 4 || w < 4 {
        return Err(Error::invalid(format!(
            "dataset needs n >= 1, frames >= 1 and images of at least 4x4 (got n={n}, F={frames}, {h}x{w})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % NUM_SHAPES).collect();
    labels.shuffle(&mut rng);
    let side = h.min(w) as f64;
    Ok(labels
        .into_iter()
        .map(|label| {
            let radius = rng.random_range(side / 8.0..side / 4.0);
            let center = (rng.random_range(0.3..0.7) * w as f64, rng.random_range(0.3..0.7) * h as f64);
            let velocity = loop {
                let v = (rng.random_range(-2..=2), rng.random_range(-2..=2));
                if v != (0, 0) {
                    break v;
                }
            };
            let bg = [(); 3].map(|_| rng.random_range(0.05..0.45));
            let fg = [(); 3].map(|_| rng.random_range(0.55..0.95));
            let p = ShapeParams { label, center, radius, fg, bg, velocity };
            SyntheticClip { frames: render(&p, frames, h, w), label, velocity: Some(velocity) }
        })
        .collect())
}

/// Shift a `[3, H, W]` image by whole pixels, replicating edge pixels.
pub fn translate_clamped(img: &Tensor, dx: i32, dy: i32) -> Tensor {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    Tensor::from_fn(vec![c, h, w], |k| {
        let ch = k / (h * w);
        let y = ((k / w) % h) as i32 - dy;
        let x = (k % w) as i32 - dx;
        let (y, x) = (y.clamp(0, h as i32 - 1) as usize, x.clamp(0, w as i32 - 1) as usize);
        img.data()[(ch * h + y) * w + x]
    })
}

/// Clip whose first frame is `x` and whose later frames translate it by
/// `velocity` per frame. Stands in for a reference video of the subject.
pub fn reference_clip(x: &Tensor, frames: usize, velocity: (i32, i32)) -> Result<Tensor> {
    let items: Vec<Tensor> = (0..frames as i32).map(|f| translate_clamped(x, velocity.0 * f, velocity.1 * f)).collect();
    Tensor::stack(&items)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_are_exact_shifts() {
        let clips = make_synthetic_dataset(12, 4, 4, 32, 32).unwrap();
        for clip in &clips {
            let (dx, dy) = clip.velocity.unwrap();
            for f in 0..3 {
                let (a, b) = (clip.frame(f), clip.frame(f + 1));
                for y in 0..32i32 {
                    for x in 0..32i32 {
                        let (sx, sy) = (x - dx, y - dy);
                        if !(0..32).contains(&sx) || !(0..32).contains(&sy) {
                            continue;
                        }
                        for c in 0..3 {
                            let got = b.get(&[c, y as usize, x as usize]);
                            let want = a.get(&[c, sy as usize, sx as usize]);
                            assert!((got - want).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn class_histogram_is_balanced() {
        let clips = make_synthetic_dataset(300, 17, 1, 8, 8).unwrap();
        let mut counts = [0usize; NUM_SHAPES];
        for c in &clips {
            counts[c.label] += 1;
        }
        for n in counts {
            assert!((n as f64 - 100.0).abs() <= 10.0, "{counts:?}");
        }
    }

    #[test]
    fn pixels_in_unit_range_and_deterministic() {
        let a = make_synthetic_dataset(9, 2, 4, 16, 16).unwrap();
        assert!(a.iter().all(|c| c.frames.data().iter().all(|v| (0.0..=1.0).contains(v))));
        assert_eq!(a, make_synthetic_dataset(9, 2, 4, 16, 16).unwrap());
        assert_ne!(a, make_synthetic_dataset(9, 3, 4, 16, 16).unwrap());
    }

    #[test]
    fn shapes_differ_by_class() {
        // area of each shape at the same radius should differ
        let area = |label| {
            (0..400)
                .flat_map(|y| (0..400).map(move |x| (x, y)))
                .filter(|&(x, y)| signed_distance(label, x as f64 - 200.0, y as f64 - 200.0, 100.0) < 0.0)
                .count()
        };
        let (d, s, t) = (area(0), area(1), area(2));
        assert!(s > d && d > t, "{d} {s} {t}");
    }

    #[test]
    fn reference_clip_starts_with_input() {
        let x = Tensor::from_fn(vec![3, 5, 5], |i| i as f64 / 75.0);
        let clip = reference_clip(&x, 4, (1, -1)).unwrap();
        assert_eq!(clip.shape(), &[4, 3, 5, 5]);
        assert_eq!(clip.narrow0(0, 1).unwrap().reshape(vec![3, 5, 5]).unwrap(), x);
        let f1 = clip.narrow0(1, 1).unwrap().reshape(vec![3, 5, 5]).unwrap();
        assert_eq!(f1.get(&[0, 1, 2]), x.get(&[0, 2, 1]));
    }
}
