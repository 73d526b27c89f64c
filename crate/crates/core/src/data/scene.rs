use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Number of texture classes used for probe labels.
pub const NUM_CLASSES: usize = 4;

/// Stripe period of the class textures, in pixels.
pub const TEXTURE_PERIOD: usize = 4;

/// Shared ground geometry that both sensors observe.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Region id per pixel, row-major, contiguous from 0.
    pub structure: Vec<usize>,
    pub regions: Vec<Region>,
}

/// Physical attributes of one region.
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub class: usize,
    /// Optical texture phase offset in pixels.
    pub phase: usize,
    /// Backscatter texture phase; unrelated to the optical one, so the
    /// shared class orientation is the only fine-scale link.
    pub sar_phase: usize,
    /// Brightness latent in [0, 1] seen by both sensors.
    pub brightness: f64,
    /// Zero-mean RGB offset: optical colour independent of the other sensor.
    pub chroma: [f64; 3],
    /// Backscatter jitter in [0, 1], independent of optical attributes.
    pub roughness: f64,
    /// Relative elevation driving side-looking shading.
    pub height: f64,
}

/// Texture value in {-1, 1} of `class` at pixel (y, x).
pub fn texture(class: usize, phase: usize, y: usize, x: usize) -> f64 {
    let half = TEXTURE_PERIOD / 2;
    let v = match class % NUM_CLASSES {
        0 => (y + phase) / half,
        1 => (x + phase) / half,
        2 => (x + y + phase) / half,
        _ => (x + phase) / half + (y + phase) / half,
    };
    if v % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Layered random rectangles and ellipses; later shapes overwrite earlier ones.
pub fn gen_scene(seed: u64, height: usize, width: usize, region_count: usize) -> Result<Scene> {
    if region_count < 2 {
        return Err(Error::Config(format!(
            "a scene needs at least 2 regions, got {region_count}"
        )));
    }
    if height < 2 || width < 2 {
        return Err(Error::Config(format!("scene {height}x{width} is too small")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut raw = vec![0usize; height * width];
    for k in 1..region_count {
        let cy = rng.random_range(0.0..height as f64);
        let cx = rng.random_range(0.0..width as f64);
        let ry = rng.random_range(height as f64 / 8.0..height as f64 / 2.5);
        let rx = rng.random_range(width as f64 / 8.0..width as f64 / 2.5);
        let ellipse = rng.random_bool(0.5);
        for y in 0..height {
            for x in 0..width {
                let dy = (y as f64 + 0.5 - cy) / ry;
                let dx = (x as f64 + 0.5 - cx) / rx;
                let inside = if ellipse {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if inside {
                    raw[y * width + x] = k;
                }
            }
        }
    }
    // relabel in order of first appearance so ids are contiguous
    let mut map = vec![usize::MAX; region_count];
    let mut next = 0;
    let structure = raw
        .iter()
        .map(|&r| {
            if map[r] == usize::MAX {
                map[r] = next;
                next += 1;
            }
            map[r]
        })
        .collect();
    let regions = (0..next)
        .map(|_| {
            let chroma = [0; 3].map(|_| rng.random_range(-0.15..0.15));
            let mean = chroma.iter().sum::<f64>() / 3.0;
            Region {
                class: rng.random_range(0..NUM_CLASSES),
                phase: rng.random_range(0..TEXTURE_PERIOD),
                sar_phase: rng.random_range(0..TEXTURE_PERIOD),
                brightness: rng.random_range(0.0..1.0),
                chroma: chroma.map(|c| c - mean),
                roughness: rng.random_range(0.0..1.0),
                height: rng.random_range(0.0..1.0),
            }
        })
        .collect();
    Ok(Scene {
        height,
        width,
        seed,
        structure,
        regions,
    })
}

impl Scene {
    pub fn region_at(&self, y: usize, x: usize) -> &Region {
        &self.regions[self.structure[y * self.width + x]]
    }

    /// Pixels with a 4-neighbour in another region.
    pub fn edge_map(&self) -> Vec<bool> {
        label_edges(&self.structure, self.height, self.width)
    }

    /// Fraction of pixels per class.
    pub fn class_histogram(&self) -> [f64; NUM_CLASSES] {
        let mut h = [0.0; NUM_CLASSES];
        for &r in &self.structure {
            h[self.regions[r].class] += 1.0;
        }
        let n = self.structure.len() as f64;
        h.map(|v| v / n)
    }

    /// Class covering the most pixels (lowest id on ties).
    pub fn label(&self) -> usize {
        let h = self.class_histogram();
        let mut best = 0;
        for c in 1..NUM_CLASSES {
            if h[c] > h[best] {
                best = c;
            }
        }
        best
    }

    /// Copy with one random region grown by `radius` pixels, emulating a
    /// change between acquisition times.
    pub fn perturbed(&self, seed: u64, radius: usize) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = rng.random_range(0..self.regions.len());
        let mut out = self.clone();
        let (h, w) = (self.height as i64, self.width as i64);
        let r = radius as i64;
        for y in 0..h {
            for x in 0..w {
                let near = (-r..=r).any(|dy| {
                    (-r..=r).any(|dx| {
                        let (yy, xx) = (y + dy, x + dx);
                        yy >= 0
                            && yy < h
                            && xx >= 0
                            && xx < w
                            && self.structure[(yy * w + xx) as usize] == target
                    })
                });
                if near {
                    out.structure[(y * w + x) as usize] = target;
                }
            }
        }
        out
    }
}

/// Boundary pixels of a label image.
pub fn label_edges(labels: &[usize], h: usize, w: usize) -> Vec<bool> {
    let mut e = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let v = labels[y * w + x];
            let diff = (x + 1 < w && labels[y * w + x + 1] != v)
                || (y + 1 < h && labels[(y + 1) * w + x] != v)
                || (x > 0 && labels[y * w + x - 1] != v)
                || (y > 0 && labels[(y - 1) * w + x] != v);
            e[y * w + x] = diff;
        }
    }
    e
}

/// Intersection over union of two boolean maps (1 when both are empty).
pub fn edge_overlap(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_contiguous() {
        let a = gen_scene(3, 32, 32, 5).unwrap();
        let b = gen_scene(3, 32, 32, 5).unwrap();
        assert_eq!(a, b);
        let max = *a.structure.iter().max().unwrap();
        assert_eq!(max + 1, a.regions.len());
        for id in 0..=max {
            assert!(a.structure.contains(&id));
        }
    }

    #[test]
    fn two_regions_at_most() {
        for s in 0..10 {
            let sc = gen_scene(s, 16, 16, 2).unwrap();
            assert!(sc.regions.len() <= 2);
        }
        assert!(gen_scene(0, 16, 16, 1).is_err());
    }

    #[test]
    fn seeds_differ() {
        for s in 0..20u64 {
            let a = gen_scene(s, 32, 32, 5).unwrap();
            let b = gen_scene(s + 1000, 32, 32, 5).unwrap();
            let diff = a
                .structure
                .iter()
                .zip(&b.structure)
                .filter(|(x, y)| x != y)
                .count();
            assert!(diff as f64 >= 0.01 * 1024.0, "seed {s}: {diff}");
        }
    }

    #[test]
    fn histogram_sums_to_one() {
        let s = gen_scene(9, 32, 32, 6).unwrap();
        let h = s.class_histogram();
        assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(h[s.label()] >= h.iter().cloned().fold(0.0, f64::max));
    }

    #[test]
    fn textures_are_balanced() {
        for c in 0..NUM_CLASSES {
            let s: f64 = (0..8).flat_map(|y| (0..8).map(move |x| texture(c, 1, y, x))).sum();
            assert_eq!(s, 0.0, "class {c}");
        }
    }

    #[test]
    fn perturbation_grows_one_region() {
        let s = gen_scene(4, 32, 32, 4).unwrap();
        let p = s.perturbed(1, 2);
        let changed = s.structure.iter().zip(&p.structure).filter(|(a, b)| a != b).count();
        assert!(changed > 0);
        assert_eq!(s.perturbed(1, 0), s);
    }
}
