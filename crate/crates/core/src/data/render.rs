use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use super::scene::{texture, Scene};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Optical rendering knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct OpticalStyle {
    /// Amplitude of the per-region chromatic class texture.
    pub texture: f64,
    /// Amplitude of the smooth additive illumination field.
    pub noise: f64,
    /// Probability of each of up to three cloud blobs.
    pub cloud_prob: f64,
}

impl Default for OpticalStyle {
    fn default() -> Self {
        OpticalStyle {
            texture: 0.08,
            noise: 0.05,
            cloud_prob: 0.0,
        }
    }
}

/// SAR rendering knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct SarStyle {
    /// Equivalent number of looks; `None` disables speckle.
    pub looks: Option<f64>,
    /// Weight of the brightness latent shared with the optical sensor.
    pub coupling: f64,
    /// Dynamic range of region backscatter in log units.
    pub contrast: f64,
    /// Relative modulation of backscatter by the class texture.
    pub texture: f64,
    /// Log-intensity gain per unit of elevation change along the look direction.
    pub shading: f64,
    /// Look direction in radians (0 = from the left).
    pub azimuth: f64,
}

impl Default for SarStyle {
    fn default() -> Self {
        SarStyle {
            looks: Some(4.0),
            coupling: 0.8,
            contrast: 2.5,
            texture: 0.5,
            shading: 1.5,
            azimuth: 0.0,
        }
    }
}

/// Low-frequency field from a few random sinusoids, roughly in [-1, 1].
fn smooth_field(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let waves: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            [
                rng.random_range(0.5..2.0) / h as f64,
                rng.random_range(0.5..2.0) / w as f64,
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.5..1.0),
            ]
        })
        .collect();
    let norm: f64 = waves.iter().map(|v| v[3]).sum();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = waves
                .iter()
                .map(|&[fy, fx, ph, a]| {
                    a * (std::f64::consts::TAU * (fy * y as f64 + fx * x as f64) + ph).sin()
                })
                .sum::<f64>()
                / norm;
        }
    }
    out
}

/// `[3 × H × W]` optical image in [0, 1].
pub fn render_optical(scene: &Scene, seed: u64, style: &OpticalStyle) -> Tensor<f32> {
    let (h, w) = (scene.height, scene.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6f70_7469_6361_6c00);
    // texture colour direction per region changes with the render seed
    let tint: Vec<[f64; 3]> = scene
        .regions
        .iter()
        .map(|_| [0; 3].map(|_| rng.random_range(0.6..1.4)))
        .collect();
    let field = smooth_field(&mut rng, h, w);
    let mut clouds: Vec<(f64, f64, f64)> = Vec::new();
    for _ in 0..3 {
        if rng.random_bool(style.cloud_prob.clamp(0.0, 1.0)) {
            clouds.push((
                rng.random_range(0.0..h as f64),
                rng.random_range(0.0..w as f64),
                rng.random_range(h.min(w) as f64 / 10.0..h.min(w) as f64 / 4.0),
            ));
        }
    }
    let mut out = vec![0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let id = scene.structure[y * w + x];
            let r = &scene.regions[id];
            let t = texture(r.class, r.phase, y, x) * style.texture;
            let cover = clouds
                .iter()
                .map(|&(cy, cx, rad)| {
                    let d2 = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)) / (rad * rad);
                    (-d2).exp()
                })
                .fold(0.0, f64::max);
            for c in 0..3 {
                let base = 0.15 + 0.7 * r.brightness + r.chroma[c];
                let v = base + t * tint[id][c] + style.noise * field[y * w + x];
                let v = v * (1.0 - cover) + 0.95 * cover;
                out[c * h * w + y * w + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Tensor::new(&[3, h, w], out).expect("render shape")
}

/// Unit-mean Gamma(L, 1/L) speckle sampler.
pub fn speckle(looks: f64) -> Result<Gamma<f64>> {
    Gamma::new(looks, 1.0 / looks)
        .map_err(|e| Error::Config(format!("invalid number of looks {looks}: {e}")))
}

/// `[1 × H × W]` SAR amplitude image in [0, 1].
pub fn render_sar(scene: &Scene, seed: u64, style: &SarStyle) -> Result<Tensor<f32>> {
    let (h, w) = (scene.height, scene.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7361_7200);
    let gamma = style.looks.map(speckle).transpose()?;
    let rho = style.coupling.clamp(0.0, 1.0);
    let indep = (1.0 - rho * rho).sqrt();
    let (dy, dx) = (style.azimuth.sin(), style.azimuth.cos());
    let height_at = |y: f64, x: f64| -> f64 {
        let yy = y.round().clamp(0.0, h as f64 - 1.0) as usize;
        let xx = x.round().clamp(0.0, w as f64 - 1.0) as usize;
        scene.region_at(yy, xx).height
    };
    let mut logi = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let r = scene.region_at(y, x);
            let latent = rho * (r.brightness - 0.5) + indep * (r.roughness - 0.5);
            let tex = 1.0 + style.texture * texture(r.class, r.sar_phase, y, x);
            let (fy, fx) = (y as f64, x as f64);
            let slope = r.height - height_at(fy - 2.0 * dy, fx - 2.0 * dx);
            let mut v = style.contrast * latent + tex.max(1e-3).ln() + style.shading * slope;
            if let Some(g) = &gamma {
                let s: f64 = g.sample(&mut rng);
                v += s.max(1e-12).ln();
            }
            logi[y * w + x] = v;
        }
    }
    let lo = logi.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = logi.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let out = logi.iter().map(|&v| ((v - lo) / span) as f32).collect();
    Tensor::new(&[1, h, w], out)
}

/// Rec. 601 luminance of a `[3 × H × W]` image, as `[H × W]` values.
pub fn luminance(img: &Tensor<f32>) -> Vec<f64> {
    let s = img.shape();
    let n = s[1] * s[2];
    let d = img.data();
    (0..n)
        .map(|i| {
            crate::objectives::LUMA[0] * d[i] as f64
                + crate::objectives::LUMA[1] * d[n + i] as f64
                + crate::objectives::LUMA[2] * d[2 * n + i] as f64
        })
        .collect()
}

/// Pixels whose 4-neighbour differs by more than `threshold` in any channel.
pub fn gradient_edges(img: &Tensor<f32>, threshold: f32) -> Vec<bool> {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = img.data();
    let mut e = vec![false; h * w];
    for ch in 0..c {
        let p = &d[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let v = p[y * w + x];
                let big = |o: f32| (o - v).abs() > threshold;
                if (x + 1 < w && big(p[y * w + x + 1])) || (y + 1 < h && big(p[(y + 1) * w + x])) {
                    e[y * w + x] = true;
                    if x + 1 < w && big(p[y * w + x + 1]) {
                        e[y * w + x + 1] = true;
                    }
                    if y + 1 < h && big(p[(y + 1) * w + x]) {
                        e[(y + 1) * w + x] = true;
                    }
                }
            }
        }
    }
    e
}

#[cfg(test)]
mod tests {
    use super::super::scene::{edge_overlap, gen_scene};
    use super::*;

    #[test]
    fn flat_render_is_piecewise_constant() {
        let s = gen_scene(1, 32, 32, 4).unwrap();
        let st = OpticalStyle {
            texture: 0.0,
            noise: 0.0,
            cloud_prob: 0.0,
        };
        let img = render_optical(&s, 5, &st);
        let n = 32 * 32;
        for c in 0..3 {
            for i in 0..n {
                for j in 0..n {
                    if s.structure[i] == s.structure[j] {
                        assert_eq!(img.data()[c * n + i], img.data()[c * n + j]);
                    }
                }
            }
        }
    }

    #[test]
    fn outputs_in_unit_range() {
        for seed in 0..5 {
            let s = gen_scene(seed, 32, 32, 5).unwrap();
            let st = OpticalStyle {
                cloud_prob: 1.0,
                ..Default::default()
            };
            let o = render_optical(&s, seed, &st);
            let r = render_sar(&s, seed, &SarStyle::default()).unwrap();
            for v in o.data().iter().chain(r.data()) {
                assert!((0.0..=1.0).contains(v));
            }
        }
    }

    #[test]
    fn speckle_free_sar_is_deterministic_per_region() {
        let s = gen_scene(2, 32, 32, 3).unwrap();
        let st = SarStyle {
            looks: None,
            shading: 0.0,
            texture: 0.0,
            ..Default::default()
        };
        let a = render_sar(&s, 1, &st).unwrap();
        let b = render_sar(&s, 2, &st).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn render_seeds_share_boundaries() {
        for seed in 0..5 {
            let s = gen_scene(seed, 32, 32, 4).unwrap();
            let st = OpticalStyle {
                texture: 0.0,
                noise: 0.02,
                cloud_prob: 0.0,
            };
            let a = gradient_edges(&render_optical(&s, 10, &st), 0.02);
            let b = gradient_edges(&render_optical(&s, 11, &st), 0.02);
            assert!(edge_overlap(&a, &b) > 0.9, "seed {seed}");
        }
    }
}
