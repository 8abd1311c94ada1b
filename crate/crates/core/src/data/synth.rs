//! Synthetic particle tiles: a textured matrix with non-overlapping bright
//! ellipses as the minority class, plus small unlabelled grains that look
//! like particles but belong to the matrix.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{DatasetSplit, ImageTile, LabelMask, LabelledTile, UnlabelledTile, IMAGE_CHANNELS};
use crate::class::Class;
use crate::error::{Error, Result};

/// Allowed gap between the dataset's aggregate fraction and the target.
pub const FRACTION_TOLERANCE: f64 = 0.05;
/// Unlabelled tiles are grouped into pipes of this many tiles.
const UNLABELLED_TILES_PER_PIPE: usize = 36;
const PLACEMENT_ATTEMPTS: usize = 4000;
const TILE_RETRIES: u64 = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub tile_size: usize,
    pub num_labelled: usize,
    pub num_unlabelled: usize,
    /// Labelled tiles are dealt round-robin over this many pipes.
    pub num_pipes: usize,
    pub target_minority_fraction: f64,
    /// Major-axis length range in pixels.
    pub particle_diameter_range: (f64, f64),
    /// Standard deviation of per-pixel intensity noise.
    pub texture_noise_level: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            tile_size: 128,
            num_labelled: 32,
            num_unlabelled: 64,
            num_pipes: 8,
            target_minority_fraction: 0.36,
            particle_diameter_range: (8.0, 40.0),
            texture_noise_level: 0.04,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tile_size < 8 {
            return Err(Error::config("tile_size", "must be at least 8"));
        }
        if self.num_labelled + self.num_unlabelled == 0 {
            return Err(Error::config("num_labelled", "no tiles requested"));
        }
        if self.num_labelled > 0 && self.num_pipes == 0 {
            return Err(Error::config("num_pipes", "labelled tiles need at least one pipe"));
        }
        let f = self.target_minority_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::config("target_minority_fraction", "must lie strictly between 0 and 1"));
        }
        let (lo, hi) = self.particle_diameter_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::config("particle_diameter_range", "need 0 < min <= max"));
        }
        if !(self.texture_noise_level >= 0.0 && self.texture_noise_level.is_finite()) {
            return Err(Error::config("texture_noise_level", "must be finite and non-negative"));
        }
        Ok(())
    }
}

struct Rendered {
    image: ImageTile,
    mask: LabelMask,
}

/// Renders the dataset in memory. Write it out with `save_dataset`.
pub fn generate_synthetic(config: &SynthConfig) -> Result<DatasetSplit> {
    config.validate()?;
    let total = config.num_labelled + config.num_unlabelled;
    let tiles: Vec<Rendered> = (0..total)
        .into_par_iter()
        .map(|i| render_tile(config, i as u64))
        .collect();

    let area = (config.tile_size * config.tile_size) as f64;
    let fraction = tiles.iter().map(|t| t.mask.count(Class::Aggregate) as f64).sum::<f64>() / (area * total as f64);
    if (fraction - config.target_minority_fraction).abs() > FRACTION_TOLERANCE {
        return Err(Error::Generation(format!(
            "aggregate fraction {fraction:.3} misses target {} with diameters {:?} on {}px tiles",
            config.target_minority_fraction, config.particle_diameter_range, config.tile_size
        )));
    }

    let mut split = DatasetSplit {
        tile_size: config.tile_size,
        ..DatasetSplit::default()
    };
    for (i, t) in tiles.into_iter().enumerate() {
        if i < config.num_labelled {
            let pipe = format!("p{:02}", i % config.num_pipes);
            split.labelled.push(LabelledTile {
                name: format!("{pipe}_{:03}", i / config.num_pipes),
                pipe,
                image: t.image,
                mask: t.mask,
            });
        } else {
            let j = i - config.num_labelled;
            let pipe = format!("u{:02}", j / UNLABELLED_TILES_PER_PIPE);
            split.unlabelled.push(UnlabelledTile {
                name: format!("{pipe}_{:03}", j % UNLABELLED_TILES_PER_PIPE),
                pipe,
                image: t.image,
            });
        }
    }
    split.labelled.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(split)
}

#[derive(Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// Normalized radius of a pixel centre; <= 1 inside.
    fn radius(&self, x: usize, y: usize) -> f64 {
        let (dx, dy) = (x as f64 + 0.5 - self.cx, y as f64 + 0.5 - self.cy);
        let u = (dx * self.cos + dy * self.sin) / self.a;
        let v = (-dx * self.sin + dy * self.cos) / self.b;
        (u * u + v * v).sqrt()
    }

    fn pixels(&self, size: usize) -> Vec<(usize, usize)> {
        let r = self.a.ceil() + 1.0;
        let clamp = |v: f64| v.max(0.0).min(size as f64) as usize;
        let (x0, x1) = (clamp(self.cx - r), clamp(self.cx + r));
        let (y0, y1) = (clamp(self.cy - r), clamp(self.cy + r));
        let mut out = Vec::new();
        for y in y0..y1 {
            for x in x0..x1 {
                if self.radius(x, y) <= 1.0 {
                    out.push((x, y));
                }
            }
        }
        out
    }

    fn random<R: Rng>(rng: &mut R, size: usize, (dmin, dmax): (f64, f64)) -> Self {
        let d = (rng.random_range(0.0..=1.0) * (dmax / dmin).ln()).exp() * dmin;
        let a = d / 2.0;
        let theta = rng.random_range(0.0..PI);
        let margin = a / 2.0;
        Ellipse {
            cx: rng.random_range(-margin..size as f64 + margin),
            cy: rng.random_range(-margin..size as f64 + margin),
            a,
            b: a * rng.random_range(0.55..=1.0),
            cos: theta.cos(),
            sin: theta.sin(),
        }
    }
}

/// Places ellipses until the tile's aggregate fraction reaches `target`.
/// Returns per-pixel owner ids (0 = matrix) and the particles.
fn place_particles<R: Rng>(rng: &mut R, config: &SynthConfig, target: f64) -> (Vec<u32>, Vec<Ellipse>) {
    let s = config.tile_size;
    let area = (s * s) as f64;
    let mut owner = vec![0u32; s * s];
    let mut particles = Vec::new();
    let mut covered = 0usize;
    for _ in 0..PLACEMENT_ATTEMPTS {
        if covered as f64 / area >= target - 0.005 {
            break;
        }
        let e = Ellipse::random(rng, s, config.particle_diameter_range);
        let px = e.pixels(s);
        if px.is_empty() || (covered + px.len()) as f64 / area > target + 0.01 {
            continue;
        }
        // One-pixel gap keeps particles from touching.
        let blocked = px.iter().any(|&(x, y)| {
            let (x, y) = (x as isize, y as isize);
            [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)].iter().any(|(dx, dy)| {
                let (nx, ny) = (x + dx, y + dy);
                nx >= 0 && ny >= 0 && (nx as usize) < s && (ny as usize) < s && owner[ny as usize * s + nx as usize] != 0
            })
        });
        if blocked {
            continue;
        }
        particles.push(e);
        let id = particles.len() as u32;
        for &(x, y) in &px {
            owner[y * s + x] = id;
        }
        covered += px.len();
    }
    (owner, particles)
}

fn render_tile(config: &SynthConfig, index: u64) -> Rendered {
    let s = config.tile_size;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index + 1);

    let target = (config.target_minority_fraction + rng.random_range(-0.08..=0.08)).clamp(0.02, 0.95);
    let mut best: Option<(Vec<u32>, Vec<Ellipse>, usize)> = None;
    for _ in 0..TILE_RETRIES {
        let (owner, particles) = place_particles(&mut rng, config, target);
        let covered = owner.iter().filter(|&&o| o != 0).count();
        let better = best
            .as_ref()
            .is_none_or(|(_, _, c)| (covered as f64 - target * (s * s) as f64).abs() < (*c as f64 - target * (s * s) as f64).abs());
        if better {
            best = Some((owner, particles, covered));
        }
        if covered as f64 / (s * s) as f64 >= target - 0.03 {
            break;
        }
    }
    let (owner, particles, _) = best.expect("at least one attempt");

    let noise = Normal::new(0.0, config.texture_noise_level).expect("validated noise level");
    let plane = s * s;
    let mut data = vec![0.0f32; IMAGE_CHANNELS * plane];

    // Matrix: gray-brown base with slow shading.
    let base = rng.random_range(0.32..0.45);
    let tint = [1.0, 0.96, 0.88];
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.01..0.06),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.01..0.04),
            )
        })
        .collect();
    let mut matrix = vec![0.0f64; plane];
    for y in 0..s {
        for x in 0..s {
            let shade: f64 = waves
                .iter()
                .map(|&(f, dir, phase, amp)| amp * ((x as f64 * dir.cos() + y as f64 * dir.sin()) * f + phase).cos())
                .sum();
            matrix[y * s + x] = base + shade;
        }
    }

    // Grains below the annotation size: bright, but part of the matrix.
    let (dmin, _) = config.particle_diameter_range;
    let grains = plane / 300;
    for _ in 0..grains {
        let r = rng.random_range(0.7..(0.3 * dmin).max(1.0));
        let (cx, cy) = (rng.random_range(0.0..s as f64), rng.random_range(0.0..s as f64));
        let level = rng.random_range(0.5..0.8);
        let e = Ellipse {
            cx,
            cy,
            a: r,
            b: r,
            cos: 1.0,
            sin: 0.0,
        };
        for (x, y) in e.pixels(s) {
            if owner[y * s + x] == 0 {
                matrix[y * s + x] = level;
            }
        }
    }

    // Particle appearance: mostly bright, some close to the matrix level.
    let looks: Vec<(f64, [f64; 3], f64, f64)> = particles
        .iter()
        .map(|_| {
            let level = if rng.random_bool(0.2) {
                base + rng.random_range(0.05..0.15)
            } else {
                rng.random_range(0.55..0.9)
            };
            let t = [0, 1, 2].map(|_| 1.0 + rng.random_range(-0.08..0.08));
            (level, t, rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1))
        })
        .collect();

    let mut labels = vec![0u8; plane];
    for y in 0..s {
        for x in 0..s {
            let i = y * s + x;
            let id = owner[i];
            for c in 0..IMAGE_CHANNELS {
                let v = if id == 0 {
                    matrix[i] * tint[c]
                } else {
                    let e = &particles[id as usize - 1];
                    let (level, t, gx, gy) = looks[id as usize - 1];
                    let (dx, dy) = ((x as f64 - e.cx) / e.a, (y as f64 - e.cy) / e.a);
                    let rim = if e.radius(x, y) > 0.8 { -0.08 } else { 0.0 };
                    (level + 0.5 * (gx * dx + gy * dy) + rim) * t[c]
                };
                let v = v + noise.sample(&mut rng);
                // Quantize so the in-memory tile equals its PNG.
                data[c * plane + i] = ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32;
            }
            if id != 0 {
                labels[i] = Class::Aggregate as u8;
            }
        }
    }

    Rendered {
        image: ImageTile::new(s, data).expect("sized"),
        mask: LabelMask::new(s, s, labels).expect("binary"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_dataset, save_dataset};

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            tile_size: 128,
            num_labelled: 8,
            num_unlabelled: 16,
            num_pipes: 4,
            seed,
            ..SynthConfig::default()
        }
    }

    fn fraction(split: &DatasetSplit) -> f64 {
        let masks = split.masks();
        masks.iter().map(|m| m.count(Class::Aggregate)).sum::<usize>() as f64
            / masks.iter().map(|m| m.labels().len()).sum::<usize>() as f64
    }

    #[test]
    fn sizes_and_fraction() {
        let split = generate_synthetic(&small(7)).unwrap();
        assert_eq!(split.labelled.len() + split.unlabelled.len(), 24);
        let f = fraction(&split);
        assert!((0.31..=0.41).contains(&f), "fraction {f}");
    }

    #[test]
    fn seeded_and_reproducible() {
        let a = generate_synthetic(&small(3)).unwrap();
        let b = generate_synthetic(&small(3)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_synthetic(&small(4)).unwrap());
    }

    #[test]
    fn files_are_bitwise_identical() {
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let cfg = SynthConfig {
            num_labelled: 2,
            num_unlabelled: 1,
            num_pipes: 2,
            tile_size: 64,
            ..SynthConfig::default()
        };
        save_dataset(&generate_synthetic(&cfg).unwrap(), d1.path()).unwrap();
        save_dataset(&generate_synthetic(&cfg).unwrap(), d2.path()).unwrap();
        for sub in ["labelled/images/p00_000.png", "labelled/masks/p01_000.png", "unlabelled/images/u00_000.png"] {
            assert_eq!(
                std::fs::read(d1.path().join(sub)).unwrap(),
                std::fs::read(d2.path().join(sub)).unwrap()
            );
        }
    }

    #[test]
    fn load_round_trips_masks_and_pixels() {
        let split = generate_synthetic(&small(11)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&split, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.labelled, split.labelled);
        assert_eq!(loaded.unlabelled.len(), split.unlabelled.len());
        for (a, b) in loaded.unlabelled.iter().zip(&split.unlabelled) {
            assert_eq!(a.image, b.image);
        }
    }

    #[test]
    fn invalid_configs() {
        let bad = |f: fn(&mut SynthConfig)| {
            let mut c = SynthConfig::default();
            f(&mut c);
            matches!(generate_synthetic(&c), Err(Error::Config { .. }))
        };
        assert!(bad(|c| c.target_minority_fraction = 0.0));
        assert!(bad(|c| c.target_minority_fraction = 1.0));
        assert!(bad(|c| c.particle_diameter_range = (0.0, 5.0)));
        assert!(bad(|c| c.particle_diameter_range = (9.0, 5.0)));
    }

    #[test]
    fn unreachable_fraction_is_a_generation_error() {
        // Tiny particles that must keep a gap cannot cover most of a tile.
        let cfg = SynthConfig {
            tile_size: 32,
            num_labelled: 4,
            num_unlabelled: 0,
            num_pipes: 1,
            target_minority_fraction: 0.9,
            particle_diameter_range: (2.0, 2.0),
            ..SynthConfig::default()
        };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Generation(_))));
    }

    #[test]
    fn aggregate_pixels_are_brighter_on_average() {
        
        let split = generate_synthetic(&small(5)).unwrap();
        let t = &split.labelled[0];
        let plane = 128 * 128;
        let (mut agg, mut na, mut sus, mut ns) = (0.0, 0, 0.0, 0);
        for (i, &l) in t.mask.labels().iter().enumerate() {
            let v = t.image.data()[i] as f64;
            if l == 1 {
                agg += v;
                na += 1;
            } else {
                sus += v;
                ns += 1;
            }
            assert!(i < plane);
        }
        assert!(agg / na as f64 > sus / ns as f64);
    }
}
