//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use colorimagine::colorspace::RgbImage;
use colorimagine::imagination::{LatentCode, ReferenceSet, SegmentationMap};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// IEC 61966-2-1 primaries, linear sRGB -> XYZ. The white is the image of
// RGB (1, 1, 1), so the oracle and the crate share a white point.
const M: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];
const EPSILON: f64 = 216.0 / 24389.0;
const KAPPA: f64 = 24389.0 / 27.0;

fn white() -> [f64; 3] {
    [M[0].iter().sum(), M[1].iter().sum(), M[2].iter().sum()]
}

fn linearize(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

fn compand(v: f64) -> f64 {
    if v <= 0.0031308 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

/// sRGB -> Lab in the epsilon/kappa form of the CIE equations.
pub fn oracle_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(linearize);
    let w = white();
    let f = |row: usize| {
        let t = (M[row][0] * lin[0] + M[row][1] * lin[1] + M[row][2] * lin[2]) / w[row];
        if t > EPSILON {
            t.cbrt()
        } else {
            (KAPPA * t + 16.0) / 116.0
        }
    };
    let (fx, fy, fz) = (f(0), f(1), f(2));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

fn solve3(m: [[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    // Cramer's rule.
    let det = |a: [[f64; 3]; 3]| {
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    };
    let d = det(m);
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let mut a = m;
        for r in 0..3 {
            a[r][c] = v[r];
        }
        *o = det(a) / d;
    }
    out
}

/// Lab -> sRGB without clipping.
pub fn oracle_rgb(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let inv = |f: f64| if f.powi(3) > EPSILON { f.powi(3) } else { (116.0 * f - 16.0) / KAPPA };
    let y = if lab[0] > KAPPA * EPSILON { fy.powi(3) } else { lab[0] / KAPPA };
    let w = white();
    let xyz = [inv(fx) * w[0], y * w[1], inv(fz) * w[2]];
    solve3(M, xyz).map(|c| if c < 0.0 { -compand(-c) } else { compand(c) })
}

/// Per-segment brute force over the label map: scores and first minimizer,
/// with candidate luminance from [`oracle_lab`].
pub fn brute_force_assign(gray: &Array2<f32>, refs: &ReferenceSet) -> BTreeMap<u32, (usize, Vec<f64>)> {
    let labels = refs.segmentation.labels();
    let mut scores: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for ((y, x), &j) in labels.indexed_iter() {
        let s = scores.entry(j).or_insert_with(|| vec![0.0; refs.len()]);
        for (i, r) in refs.references.iter().enumerate() {
            let px = r.get(y, x).map(|v| v as f64);
            let lum = (oracle_lab(px)[0] / 100.0) as f32 as f64;
            s[i] += (lum - gray[[y, x]] as f64).abs();
        }
    }
    scores
        .into_iter()
        .map(|(j, s)| {
            let mut best = 0;
            for i in 0..s.len() {
                if s[i] < s[best] {
                    best = i;
                }
            }
            (j, (best, s))
        })
        .collect()
}

/// Gap between the best and second-best score; infinite with one candidate.
pub fn runner_up_gap(scores: &[f64]) -> f64 {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.len() < 2 {
        f64::INFINITY
    } else {
        sorted[1] - sorted[0]
    }
}

/// Random composition instance: a class map with up to `max_classes`
/// blocky classes, `n` random references and a gray luminance plane.
pub fn random_instance(seed: u64, max_side: usize, max_n: usize, max_classes: u32) -> (Array2<f32>, ReferenceSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = rng.gen_range(1..=max_side);
    let w = rng.gen_range(1..=max_side);
    let n = rng.gen_range(1..=max_n);
    let classes = rng.gen_range(1..=max_classes);
    let block = rng.gen_range(1..=8usize);
    let class_of_block: Vec<u32> = (0..(h / block + 1) * (w / block + 1)).map(|_| rng.gen_range(1..=classes)).collect();
    let class_map = Array2::from_shape_fn((h, w), |(y, x)| class_of_block[(y / block) * (w / block + 1) + x / block]);
    let seg = SegmentationMap::from_class_map(&class_map).unwrap();
    let references: Vec<RgbImage> = (0..n)
        .map(|_| {
            let px = Array3::from_shape_fn((h, w, 3), |_| (rng.gen_range(0..=255u32) as f32) / 255.0);
            RgbImage::new(px).unwrap()
        })
        .collect();
    let latents = (0..n as u64).map(LatentCode::from_seed).collect();
    let gray = Array2::from_shape_fn((h, w), |_| rng.gen_range(0.0f32..=1.0));
    (gray, ReferenceSet::new(references, latents, seg).unwrap())
}

/// Per-pixel `Y (1 - M) + Y_fake M` written out element by element.
pub fn brute_force_mix(y: &Array3<f32>, y_fake: &Array3<f32>, mask: &Array2<u8>) -> Array3<f32> {
    let (h, w, c) = y.dim();
    let mut out = Array3::zeros((h, w, c));
    for yy in 0..h {
        for xx in 0..w {
            let src = if mask[[yy, xx]] == 0 { y } else { y_fake };
            for k in 0..c {
                out[[yy, xx, k]] = src[[yy, xx, k]];
            }
        }
    }
    out
}

/// Hasler–Süsstrunk colorfulness written as a single pass over sums,
/// in `f64`, for cross-checking small fixtures.
pub fn oracle_colorfulness(pixels: &[[f64; 3]]) -> f64 {
    let n = pixels.len() as f64;
    let rg: Vec<f64> = pixels.iter().map(|p| p[0] - p[1]).collect();
    let yb: Vec<f64> = pixels.iter().map(|p| 0.5 * (p[0] + p[1]) - p[2]).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
    let var = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>() / n - mean(v).powi(2);
    (var(&rg) + var(&yb)).max(0.0).sqrt() + 0.3 * (mean(&rg).powi(2) + mean(&yb).powi(2)).sqrt()
}
