use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::SceneSample;
use crate::model::DepthRange;
use crate::par;
use crate::tensor::Tensor;

/// Fraction of pixels marked invalid.
pub const INVALID_FRACTION: f64 = 0.02;
const FOG: [f32; 3] = [0.72, 0.76, 0.82];
const FOG_STRENGTH: f32 = 0.7;
const HAZE_BASE: f32 = 0.1;
const HAZE_GAIN: f32 = 0.8;
const ALBEDO_LEAK: f32 = 0.05;

enum Shape {
    /// Depth `a + gx (u - 0.5) + gy (v - 0.5)` inside `[u0, u1) x [v0, v1)`
    /// in normalized image coordinates.
    Panel {
        rect: [f64; 4],
        a: f64,
        gx: f64,
        gy: f64,
    },
    /// Sphere of normalized radius `r` centered at `(cu, cv)` with nearest
    /// point at depth `front`; `depth_r` is its radius in meters.
    Sphere {
        cu: f64,
        cv: f64,
        r: f64,
        front: f64,
        depth_r: f64,
    },
}

impl Shape {
    fn depth(&self, u: f64, v: f64, aspect: f64) -> Option<f64> {
        match *self {
            Shape::Panel { rect, a, gx, gy } => {
                (u >= rect[0] && u < rect[1] && v >= rect[2] && v < rect[3]).then(|| a + gx * (u - 0.5) + gy * (v - 0.5))
            }
            Shape::Sphere {
                cu,
                cv,
                r,
                front,
                depth_r,
            } => {
                let du = (u - cu) * aspect;
                let dv = v - cv;
                let rho2 = (du * du + dv * dv) / (r * r);
                (rho2 < 1.0).then(|| front + depth_r * (1.0 - (1.0 - rho2).sqrt()))
            }
        }
    }
}

fn random_rect<R: Rng>(rng: &mut R) -> [f64; 4] {
    let w = rng.random_range(0.15..0.6);
    let h = rng.random_range(0.15..0.6);
    let u0 = rng.random_range(0.0..1.0 - w);
    let v0 = rng.random_range(0.0..1.0 - h);
    [u0, u0 + w, v0, v0 + h]
}

/// Procedural scene of 3 to 8 primitives: a full-frame background plane with
/// a depth gradient, then panels, boxes and spheres in front of it.
///
/// Channel 0 is a haze intensity rising with log depth, perturbed slightly by
/// the surface albedo. Channels 1 and 2 blend the albedo towards a fog color
/// with depth and carry a texture whose frequency grows with distance. All
/// channels get small per-pixel noise.
pub fn generate_scene<R: Rng>(rng: &mut R, h: usize, w: usize, range: DepthRange) -> SceneSample {
    let lo = range.d_min + 0.03 * range.span();
    let hi = range.d_max - 0.02 * range.span();
    let n_shapes = rng.random_range(3..=8usize);
    let far = rng.random_range(lo + 0.45 * (hi - lo)..hi);
    let mut shapes = vec![Shape::Panel {
        rect: [0.0, 1.0, 0.0, 1.0],
        a: far,
        gx: rng.random_range(-0.25..0.25) * far,
        gy: -rng.random_range(0.0..0.6) * far,
    }];
    for _ in 1..n_shapes {
        let front = rng.random_range(lo..far);
        let shape = match rng.random_range(0..3) {
            0 => Shape::Panel {
                rect: random_rect(rng),
                a: front,
                gx: rng.random_range(-0.5..0.5) * front,
                gy: rng.random_range(-0.5..0.5) * front,
            },
            1 => Shape::Panel {
                rect: random_rect(rng),
                a: front,
                gx: 0.0,
                gy: 0.0,
            },
            _ => Shape::Sphere {
                cu: rng.random_range(0.1..0.9),
                cv: rng.random_range(0.1..0.9),
                r: rng.random_range(0.08..0.3),
                front,
                depth_r: rng.random_range(0.2..1.0) * (hi - lo) * 0.1,
            },
        };
        shapes.push(shape);
    }
    let albedo: Vec<[f32; 3]> = (0..shapes.len())
        .map(|_| [0; 3].map(|_: i32| rng.random_range(0.15f32..1.0)))
        .collect();
    let texture: Vec<(f64, f64)> = (0..shapes.len())
        .map(|_| (rng.random_range(4.0..16.0), rng.random_range(0.0..std::f64::consts::TAU)))
        .collect();

    let aspect = w as f64 / h as f64;
    let mut depth = vec![0f32; h * w];
    let mut image = vec![0f32; 3 * h * w];
    let mut mask = vec![true; h * w];
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 + 0.5) / w as f64;
            let v = (y as f64 + 0.5) / h as f64;
            let mut best = (f64::INFINITY, 0usize);
            for (id, s) in shapes.iter().enumerate() {
                if let Some(d) = s.depth(u, v, aspect) {
                    if d < best.0 {
                        best = (d, id);
                    }
                }
            }
            let (d, id) = best;
            let d = d.clamp(lo, hi);
            let i = y * w + x;
            depth[i] = d as f32;
            // Texture frequency shrinks with distance like a perspective view.
            let (freq, phase) = texture[id];
            let tex = 0.06 * ((u + v) * freq * hi / d.max(lo) * 0.2 + phase).sin();
            let haze = ((d / lo).ln() / (hi / lo).ln()) as f32;
            let noise = rng.random_range(-0.02f32..0.02);
            let val = HAZE_BASE + HAZE_GAIN * haze + ALBEDO_LEAK * (albedo[id][0] - 0.5) + noise;
            image[i] = val.clamp(0.0, 1.0);
            let t = ((d - lo) / (hi - lo)) as f32 * FOG_STRENGTH;
            for c in 1..3 {
                let noise = rng.random_range(-0.02f32..0.02);
                let val = albedo[id][c] * (1.0 - t) + FOG[c] * t + tex as f32 + noise;
                image[c * h * w + i] = val.clamp(0.0, 1.0);
            }
            if rng.random_bool(INVALID_FRACTION) {
                mask[i] = false;
                depth[i] = 0.0;
            }
        }
    }
    SceneSample::new(
        Tensor::new(vec![3, h, w], image).expect("image shape"),
        Tensor::new(vec![1, h, w], depth).expect("depth shape"),
        mask,
    )
    .expect("consistent scene shapes")
}

/// `n` scenes, scene `i` drawn from its own stream of a generator seeded with
/// `seed`, so the corpus does not depend on how generation is scheduled.
pub fn generate_corpus(n: usize, h: usize, w: usize, range: DepthRange, seed: u64) -> Vec<SceneSample> {
    par::map_range(n, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        generate_scene(&mut rng, h, w, range)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let r = DepthRange::default();
        let a = generate_scene(&mut ChaCha8Rng::seed_from_u64(3), 32, 32, r);
        let b = generate_scene(&mut ChaCha8Rng::seed_from_u64(3), 32, 32, r);
        assert_eq!(a, b);
        a.validate(r).unwrap();
        assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let invalid = a.mask.iter().filter(|m| !**m).count();
        assert!(invalid > 0 && invalid < 100, "{invalid}");
    }

    #[test]
    fn corpus_independent_of_parallelism() {
        let r = DepthRange::default();
        let par_on = generate_corpus(4, 16, 16, r, 7);
        par::set_parallel(false);
        let par_off = generate_corpus(4, 16, 16, r, 7);
        par::set_parallel(true);
        assert_eq!(par_on, par_off);
        assert_ne!(par_on[0], par_on[1]);
    }
}
