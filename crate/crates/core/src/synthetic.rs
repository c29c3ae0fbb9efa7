//! Procedural outdoor-like scenes: a sky gradient over textured ground with
//! buildings and foliage blobs. Colors have moderate saturation and values
//! stay inside `[0.08, 0.9]`, so recoloring with another scene's chroma
//! rarely leaves the sRGB gamut.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::colorspace::RgbImage;

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

enum Shape {
    Rect { y0: f32, x0: f32, y1: f32, x1: f32 },
    Ellipse { cy: f32, cx: f32, ry: f32, rx: f32 },
}

impl Shape {
    fn contains(&self, y: f32, x: f32) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Ellipse { cy, cx, ry, rx } => ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0,
        }
    }
}

struct Layer {
    shape: Shape,
    color: [f32; 3],
    // Stripe texture: amplitude, frequencies in cycles per image side.
    texture: (f32, f32, f32),
}

/// One `height x width` scene determined by `seed`.
pub fn synthetic_scene(height: usize, width: usize, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = rng.gen_range(0.35f32..0.65);
    let sky_hue = rng.gen_range(0.52f32..0.66);
    let sky_top = hsv(sky_hue, rng.gen_range(0.35..0.6), rng.gen_range(0.6..0.8));
    let sky_low = hsv(sky_hue + rng.gen_range(-0.05..0.05), rng.gen_range(0.1..0.3), rng.gen_range(0.75..0.9));
    let ground = hsv(rng.gen_range(0.08f32..0.33), rng.gen_range(0.3..0.6), rng.gen_range(0.3..0.6));
    let ground_texture = (rng.gen_range(0.02f32..0.05), rng.gen_range(3.0f32..9.0), rng.gen_range(5.0f32..15.0));

    let mut layers = Vec::new();
    for _ in 0..rng.gen_range(2..=5) {
        let building = rng.gen_bool(0.5);
        let color = if building {
            hsv(rng.gen_range(0.0..1.0), rng.gen_range(0.15..0.5), rng.gen_range(0.35..0.8))
        } else {
            hsv(rng.gen_range(0.2..0.4), rng.gen_range(0.35..0.65), rng.gen_range(0.25..0.6))
        };
        let shape = if building {
            let x0 = rng.gen_range(0.0f32..0.8);
            let top = rng.gen_range(0.1f32..horizon);
            Shape::Rect { y0: top, x0, y1: horizon + rng.gen_range(0.0..0.15), x1: x0 + rng.gen_range(0.1..0.3) }
        } else {
            let r = rng.gen_range(0.07f32..0.18);
            Shape::Ellipse {
                cy: horizon + rng.gen_range(-0.1..0.15),
                cx: rng.gen_range(0.0..1.0),
                ry: r,
                rx: r * rng.gen_range(0.8..1.5),
            }
        };
        let texture = (rng.gen_range(0.0f32..0.05), rng.gen_range(2.0f32..12.0), rng.gen_range(2.0f32..12.0));
        layers.push(Layer { shape, color, texture });
    }

    let mut px = Array3::zeros((height, width, 3));
    for yi in 0..height {
        let y = (yi as f32 + 0.5) / height as f32;
        for xi in 0..width {
            let x = (xi as f32 + 0.5) / width as f32;
            let mut c = if y < horizon {
                let t = y / horizon;
                [0, 1, 2].map(|k| sky_top[k] * (1.0 - t) + sky_low[k] * t)
            } else {
                let (a, fy, fx) = ground_texture;
                let shade = a * (std::f32::consts::TAU * (fy * y + fx * x * 0.3)).sin() - 0.1 * (y - horizon);
                ground.map(|v| v + shade)
            };
            for layer in &layers {
                if layer.shape.contains(y, x) {
                    let (a, fy, fx) = layer.texture;
                    let t = a * (std::f32::consts::TAU * fy * y).sin() * (std::f32::consts::TAU * fx * x).cos();
                    c = layer.color.map(|v| v + t);
                }
            }
            for k in 0..3 {
                px[[yi, xi, k]] = c[k].clamp(0.08, 0.9);
            }
        }
    }
    RgbImage::new(px).expect("scene values lie in [0, 1]")
}

/// `n` scenes with seeds `seed, seed + 1, ...`.
pub fn synthetic_corpus(n: usize, height: usize, width: usize, seed: u64) -> Vec<RgbImage> {
    (0..n as u64).map(|i| synthetic_scene(height, width, seed.wrapping_add(i))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_and_distinct() {
        assert_eq!(synthetic_scene(24, 32, 5), synthetic_scene(24, 32, 5));
        assert_ne!(synthetic_scene(24, 32, 5), synthetic_scene(24, 32, 6));
    }

    #[test]
    fn scenes_are_colored_and_inside_the_value_band() {
        let img = synthetic_scene(40, 40, 11);
        assert!(!img.is_achromatic());
        assert!(img.pixels().iter().all(|&v| (0.08..=0.9).contains(&v)));
    }

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        assert_eq!(hsv(0.5, 0.0, 0.4), [0.4, 0.4, 0.4]);
    }
}
