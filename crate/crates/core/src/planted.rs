//! Deterministic synthetic encoder and scene generator with known ground
//! truth.
//!
//! Each class owns a palette colour and a fixed unit direction in embedding
//! space. An image is encoded by counting palette colours and summing the
//! matching directions weighted by `area_fraction ^ area_power`, so the
//! largest object dominates the whole-image embedding while a snippet
//! covering a small object is dominated by that object. Background pixels
//! map to a direction orthogonal to every class; "tinted" background pixels
//! lean slightly toward one class, giving diffuse sub-threshold evidence
//! for a class that is not present. A content-seeded noise term keeps the
//! encoding deterministic but not exact.

use std::collections::HashMap;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::embedding::{validate_vocabulary, Encoder};
use crate::error::{Error, Result};

fn fnv1a(bytes: &[u8], seed: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn gaussian_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedConfig {
    pub dim: usize,
    pub tau: f64,
    pub seed: u64,
    /// Noise norm relative to the signal norm.
    pub noise: f64,
    pub area_power: f64,
    /// Weight of the class direction inside a tinted background pixel.
    pub tint_strength: f64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            dim: 64,
            tau: 0.01,
            seed: 0,
            noise: 0.02,
            area_power: 2.0,
            tint_strength: 0.03,
        }
    }
}

/// Palette slot of a pixel colour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Slot {
    Background,
    Class(usize),
    Tint(usize),
}

pub struct PlantedEncoder {
    identity: String,
    config: PlantedConfig,
    class_names: Vec<String>,
    background: Vec<f64>,
    directions: Vec<Vec<f64>>,
    palette: Vec<([u8; 3], Slot)>,
    lookup: HashMap<[u8; 3], Slot>,
}

fn palette_colour(index: usize) -> [u8; 3] {
    const LEVELS: [u8; 6] = [10, 55, 100, 145, 190, 235];
    [LEVELS[index / 36 % 6], LEVELS[index / 6 % 6], LEVELS[index % 6]]
}

impl PlantedEncoder {
    pub fn new(class_names: &[String], config: PlantedConfig) -> Result<Self> {
        validate_vocabulary(class_names)?;
        let c = class_names.len();
        if 1 + 2 * c > 216 {
            return Err(Error::Config(format!("planted encoder supports at most 107 classes, got {c}")));
        }
        if config.dim < c + 1 {
            return Err(Error::Config(format!(
                "planted encoder needs dim > number of classes ({} <= {c})",
                config.dim
            )));
        }
        if !(config.tau > 0.0) {
            return Err(Error::Config("temperature must be > 0".into()));
        }

        // Gram-Schmidt over [background, class_0, ..]: exact orthonormal geometry.
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(c + 1);
        let seeds = std::iter::once(fnv1a(b"<background>", config.seed))
            .chain(class_names.iter().map(|n| fnv1a(n.as_bytes(), config.seed)));
        for s in seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut v = gaussian_vector(&mut rng, config.dim);
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
            normalize(&mut v);
            basis.push(v);
        }
        let background = basis.remove(0);

        let mut palette = vec![(palette_colour(0), Slot::Background)];
        palette.extend((0..c).map(|i| (palette_colour(1 + i), Slot::Class(i))));
        palette.extend((0..c).map(|i| (palette_colour(1 + c + i), Slot::Tint(i))));
        let lookup = palette.iter().copied().collect();

        Ok(PlantedEncoder {
            identity: format!(
                "planted-v1(dim={},tau={},seed={},noise={},power={},tint={})",
                config.dim, config.tau, config.seed, config.noise, config.area_power, config.tint_strength
            ),
            config,
            class_names: class_names.to_vec(),
            background,
            directions: basis,
            palette,
            lookup,
        })
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// Planted unit direction of class `i`.
    pub fn direction(&self, i: usize) -> &[f64] {
        &self.directions[i]
    }

    pub fn class_colour(&self, i: usize) -> Rgb<u8> {
        Rgb(palette_colour(1 + i))
    }

    pub fn tint_colour(&self, i: usize) -> Rgb<u8> {
        Rgb(palette_colour(1 + self.class_names.len() + i))
    }

    pub fn background_colour(&self) -> Rgb<u8> {
        Rgb(palette_colour(0))
    }

    fn slot_of(&self, px: [u8; 3]) -> Slot {
        if let Some(&s) = self.lookup.get(&px) {
            return s;
        }
        let dist = |c: [u8; 3]| -> i32 {
            c.iter()
                .zip(px)
                .map(|(&a, b)| (a as i32 - b as i32).pow(2))
                .sum()
        };
        self.palette
            .iter()
            .min_by_key(|(c, _)| dist(*c))
            .map(|&(_, s)| s)
            .unwrap()
    }

    fn direction_of(&self, slot: Slot) -> Vec<f64> {
        match slot {
            Slot::Background => self.background.clone(),
            Slot::Class(i) => self.directions[i].clone(),
            Slot::Tint(i) => self
                .background
                .iter()
                .zip(&self.directions[i])
                .map(|(b, d)| b + self.config.tint_strength * d)
                .collect(),
        }
    }
}

impl Encoder for PlantedEncoder {
    fn identity(&self) -> &str {
        &self.identity
    }

    fn visual_dim(&self) -> usize {
        self.config.dim
    }

    fn temperature(&self) -> f64 {
        self.config.tau
    }

    fn encode_image_raw(&self, image: &RgbImage) -> Result<Vec<f32>> {
        let total = (image.width() as f64) * (image.height() as f64);
        let mut counts: HashMap<Slot, u64> = HashMap::new();
        for p in image.pixels() {
            *counts.entry(self.slot_of(p.0)).or_default() += 1;
        }
        let mut slots: Vec<(Slot, u64)> = counts.into_iter().collect();
        slots.sort_by_key(|&(s, _)| match s {
            Slot::Background => (0, 0),
            Slot::Class(i) => (1, i),
            Slot::Tint(i) => (2, i),
        });

        let mut signal = vec![0.0; self.config.dim];
        for (slot, n) in slots {
            let w = (n as f64 / total).powf(self.config.area_power);
            for (s, d) in signal.iter_mut().zip(self.direction_of(slot)) {
                *s += w * d;
            }
        }
        let signal_norm = signal.iter().map(|x| x * x).sum::<f64>().sqrt();

        let mut key = Vec::with_capacity(image.as_raw().len() + 8);
        key.extend(image.width().to_le_bytes());
        key.extend(image.height().to_le_bytes());
        key.extend_from_slice(image.as_raw());
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(&key, self.config.seed));
        let scale = self.config.noise * signal_norm / (self.config.dim as f64).sqrt();
        Ok(signal
            .iter()
            .map(|&s| {
                let n: f64 = StandardNormal.sample(&mut rng);
                (s + scale * n) as f32
            })
            .collect())
    }

    /// Returns the direction of the longest class name found in `prompt`,
    /// or a prompt-seeded random unit vector when none matches.
    fn encode_text_raw(&self, prompt: &str) -> Result<Vec<f32>> {
        let hit = self
            .class_names
            .iter()
            .enumerate()
            .filter(|(_, n)| prompt.contains(n.as_str()))
            .max_by_key(|(_, n)| n.len());
        Ok(match hit {
            Some((i, _)) => self.directions[i].iter().map(|&x| x as f32).collect(),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(prompt.as_bytes(), self.config.seed));
                let mut v = gaussian_vector(&mut rng, self.config.dim);
                normalize(&mut v);
                v.into_iter().map(|x| x as f32).collect()
            }
        })
    }
}

/// Scene layout knobs for [`generate_scenes`].
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub count: usize,
    pub width: u32,
    pub height: u32,
    pub seed: u64,
    /// Maximum number of secondary objects besides the dominant one.
    pub max_secondary: usize,
    /// Probability that the background carries a tint toward an absent class.
    pub tint_probability: f64,
    /// Minimum visible fraction of the image for a class to count as present.
    pub min_visible: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            count: 200,
            width: 48,
            height: 48,
            seed: 0,
            max_secondary: 2,
            tint_probability: 0.7,
            min_visible: 0.01,
        }
    }
}

/// A rendered scene and its planted labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub image: RgbImage,
    pub labels: Vec<u8>,
    pub dominant: usize,
}

fn fill(img: &mut RgbImage, x0: u32, y0: u32, w: u32, h: u32, colour: Rgb<u8>) {
    for y in y0..(y0 + h).min(img.height()) {
        for x in x0..(x0 + w).min(img.width()) {
            img.put_pixel(x, y, colour);
        }
    }
}

fn span(rng: &mut ChaCha8Rng, total: u32, lo: f64, hi: f64) -> u32 {
    ((total as f64 * rng.random_range(lo..hi)).round() as u32).clamp(1, total)
}

/// Multi-object scenes: one large dominant object, up to `max_secondary`
/// small objects of other classes, and an optional background tint toward
/// a class absent from the scene.
pub fn generate_scenes(encoder: &PlantedEncoder, config: &SceneConfig) -> Vec<Scene> {
    let c = encoder.class_names().len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (w, h) = (config.width, config.height);
    (0..config.count)
        .map(|m| {
            let mut img = RgbImage::from_pixel(w, h, encoder.background_colour());
            let mut classes: Vec<usize> = (0..c).collect();
            let dominant = classes.swap_remove(rng.random_range(0..classes.len()));
            let n_secondary = rng.random_range(0..=config.max_secondary.min(classes.len()));
            let mut secondary = Vec::new();
            for _ in 0..n_secondary {
                secondary.push(classes.swap_remove(rng.random_range(0..classes.len())));
            }
            if !classes.is_empty() && rng.random_bool(config.tint_probability) {
                let tint = classes[rng.random_range(0..classes.len())];
                for p in img.pixels_mut() {
                    *p = encoder.tint_colour(tint);
                }
            }

            let (dw, dh) = (span(&mut rng, w, 0.6, 0.8), span(&mut rng, h, 0.65, 0.9));
            let (dx, dy) = (rng.random_range(0..=w - dw), rng.random_range(0..=h - dh));
            fill(&mut img, dx, dy, dw, dh, encoder.class_colour(dominant));
            for &s in &secondary {
                let (sw, sh) = (span(&mut rng, w, 0.2, 0.34), span(&mut rng, h, 0.2, 0.34));
                let (sx, sy) = (rng.random_range(0..=w - sw), rng.random_range(0..=h - sh));
                fill(&mut img, sx, sy, sw, sh, encoder.class_colour(s));
            }

            let mut visible = vec![0u64; c];
            for p in img.pixels() {
                if let Slot::Class(i) = encoder.slot_of(p.0) {
                    visible[i] += 1;
                }
            }
            let min_px = config.min_visible * (w as f64) * (h as f64);
            let labels = visible.iter().map(|&v| u8::from(v as f64 >= min_px && v > 0)).collect();
            Scene {
                id: format!("planted_{m:05}"),
                image: img,
                labels,
                dominant,
            }
        })
        .collect()
}

/// An image filled with a single class colour.
pub fn pure_class_image(encoder: &PlantedEncoder, class: usize, width: u32, height: u32) -> RgbImage {
    RgbImage::from_pixel(width, height, encoder.class_colour(class))
}

/// Default vocabulary `class00 .. class{n-1}`.
pub fn class_vocabulary(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("class{i:02}")).collect()
}
