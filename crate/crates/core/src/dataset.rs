//! Procedurally rendered matched-image dataset.
//!
//! Each class is a scene: a striped background plus a handful of textured
//! parts drawn from a library shared by all classes. Images of a class are
//! renders of its scene under a seeded similarity transform and photometric
//! jitter, so any two of them are true matches.

use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::ImageTensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Ring,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Part {
    pub kind: ShapeKind,
    pub color: [f64; 3],
    /// Checker period in scene units; zero for a solid fill.
    pub checker: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacedPart {
    pub part: Part,
    pub center: [f64; 2],
    pub radius: f64,
    pub angle: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub background: [[f64; 3]; 2],
    pub stripe_angle: f64,
    pub stripe_frequency: f64,
    pub parts: Vec<PlacedPart>,
}

/// Per-image rendering parameters, recorded for reproducibility.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub shift: [f64; 2],
    pub zoom: f64,
    pub rotation: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub noise_std: f64,
    pub noise_seed: u64,
}

impl Perturbation {
    pub fn identity() -> Self {
        Self {
            shift: [0.0, 0.0],
            zoom: 1.0,
            rotation: 0.0,
            brightness: 0.0,
            contrast: 1.0,
            noise_std: 0.0,
            noise_seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticImage {
    pub image: ImageTensor,
    pub label: usize,
    pub perturbation: Perturbation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub num_classes: usize,
    pub images_per_class: usize,
    pub image_size: usize,
    pub parts_per_scene: usize,
    pub library_size: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_classes: 20,
            images_per_class: 4,
            image_size: 64,
            parts_per_scene: 5,
            library_size: 12,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub config: DatasetConfig,
    pub scenes: Vec<Scene>,
    pub images: Vec<SyntheticImage>,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn corpus(&self) -> Corpus {
        Corpus {
            images: self.images.iter().map(|i| i.image.clone()).collect(),
            labels: self.labels(),
        }
    }

    pub fn labels(&self) -> Vec<usize> {
        self.images.iter().map(|i| i.label).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.scenes.len()
    }

    /// Indices of images with the given label.
    pub fn class_members(&self, label: usize) -> Vec<usize> {
        (0..self.images.len())
            .filter(|&i| self.images[i].label == label)
            .collect()
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.gen_range(0.05..0.95),
        rng.gen_range(0.05..0.95),
        rng.gen_range(0.05..0.95),
    ]
}

fn part_library(size: usize, rng: &mut ChaCha8Rng) -> Vec<Part> {
    const KINDS: [ShapeKind; 4] = [ShapeKind::Disk, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Ring];
    (0..size)
        .map(|i| Part {
            kind: KINDS[i % KINDS.len()],
            color: random_color(rng),
            checker: if rng.gen_bool(0.5) {
                rng.gen_range(0.04..0.1)
            } else {
                0.0
            },
        })
        .collect()
}

fn random_scene(library: &[Part], parts: usize, rng: &mut ChaCha8Rng) -> Scene {
    Scene {
        background: [random_color(rng), random_color(rng)],
        stripe_angle: rng.gen_range(0.0..std::f64::consts::PI),
        stripe_frequency: rng.gen_range(6.0..20.0),
        parts: (0..parts)
            .map(|_| PlacedPart {
                part: library[rng.gen_range(0..library.len())],
                center: [rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85)],
                radius: rng.gen_range(0.08..0.2),
                angle: rng.gen_range(0.0..std::f64::consts::TAU),
            })
            .collect(),
    }
}

fn inside(kind: ShapeKind, x: f64, y: f64) -> bool {
    match kind {
        ShapeKind::Disk => x * x + y * y <= 1.0,
        ShapeKind::Square => x.abs() <= 0.8 && y.abs() <= 0.8,
        ShapeKind::Triangle => y >= -0.6 && y <= 0.9 - 1.5 * x.abs(),
        ShapeKind::Ring => {
            let r2 = x * x + y * y;
            (0.35..=1.0).contains(&r2)
        }
    }
}

impl Scene {
    /// Color at scene coordinates; the unit square is the canonical view.
    pub fn color_at(&self, x: f64, y: f64) -> [f64; 3] {
        for placed in self.parts.iter().rev() {
            let dx = x - placed.center[0];
            let dy = y - placed.center[1];
            let (s, c) = placed.angle.sin_cos();
            let lx = (c * dx + s * dy) / placed.radius;
            let ly = (-s * dx + c * dy) / placed.radius;
            if inside(placed.part.kind, lx, ly) {
                let base = placed.part.color;
                if placed.part.checker > 0.0 {
                    let cx = (dx / placed.part.checker).floor() as i64;
                    let cy = (dy / placed.part.checker).floor() as i64;
                    if (cx + cy).rem_euclid(2) == 1 {
                        return [1.0 - base[0], 1.0 - base[1], 1.0 - base[2]];
                    }
                }
                return base;
            }
        }
        let (s, c) = self.stripe_angle.sin_cos();
        let t = 0.5 + 0.5 * (self.stripe_frequency * (c * x + s * y)).sin();
        let [a, b] = self.background;
        [
            a[0] * (1.0 - t) + b[0] * t,
            a[1] * (1.0 - t) + b[1] * t,
            a[2] * (1.0 - t) + b[2] * t,
        ]
    }

    /// Renders a `size x size` view under `p`, with 2x2 supersampling.
    pub fn render(&self, size: usize, p: &Perturbation) -> Array3<f64> {
        let mut noise_rng = ChaCha8Rng::seed_from_u64(p.noise_seed);
        let noise = Normal::new(0.0, p.noise_std.max(0.0)).expect("finite noise std");
        let (s, c) = p.rotation.sin_cos();
        let mut out = Array3::zeros((size, size, 3));
        for py in 0..size {
            for px in 0..size {
                let mut acc = [0.0; 3];
                for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                    let u = (px as f64 + ox) / size as f64 - 0.5;
                    let v = (py as f64 + oy) / size as f64 - 0.5;
                    let x = (c * u - s * v) / p.zoom + 0.5 - p.shift[0];
                    let y = (s * u + c * v) / p.zoom + 0.5 - p.shift[1];
                    let col = self.color_at(x, y);
                    for k in 0..3 {
                        acc[k] += col[k] / 4.0;
                    }
                }
                for (k, a) in acc.iter().enumerate() {
                    let jitter = if p.noise_std > 0.0 {
                        noise.sample(&mut noise_rng)
                    } else {
                        0.0
                    };
                    let v = p.contrast * (a - 0.5) + 0.5 + p.brightness + jitter;
                    out[[py, px, k]] = v.clamp(0.0, 1.0);
                }
            }
        }
        out
    }
}

fn random_perturbation(rng: &mut ChaCha8Rng) -> Perturbation {
    Perturbation {
        shift: [rng.gen_range(-0.12..0.12), rng.gen_range(-0.12..0.12)],
        zoom: rng.gen_range(0.85..1.2),
        rotation: rng.gen_range(-0.25..0.25),
        brightness: rng.gen_range(-0.08..0.08),
        contrast: rng.gen_range(0.8..1.2),
        noise_std: 0.02,
        noise_seed: rng.gen(),
    }
}

/// Labelled images, the form every training and evaluation stage consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    label: usize,
    file: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Corpus {
    pub fn new(images: Vec<ImageTensor>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::invalid("one label per image"));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.images.iter().map(|i| i.id.clone()).collect()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.images.iter().position(|i| i.id == id)
    }

    /// Writes one PNG per image plus `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = Vec::with_capacity(self.len());
        for (im, &label) in self.images.iter().zip(&self.labels) {
            let file = format!("{}.png", im.id);
            crate::eval::save_image_png(&im.pixels, &dir.join(&file))?;
            manifest.push(ManifestEntry {
                id: im.id.clone(),
                label,
                file,
            });
        }
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Reads a directory written by [`Corpus::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let manifest: Vec<ManifestEntry> = serde_json::from_str(&text)?;
        let mut images = Vec::with_capacity(manifest.len());
        let mut labels = Vec::with_capacity(manifest.len());
        for e in manifest {
            images.push(load_image_png(&dir.join(&e.file), e.id)?);
            labels.push(e.label);
        }
        Self::new(images, labels)
    }
}

/// Decodes an 8-bit image file into an RGB tensor in `[0, 1]`.
pub fn load_image_png(path: &Path, id: impl Into<String>) -> Result<ImageTensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        f64::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
    });
    ImageTensor::new(id, pixels)
}

pub fn generate_synthetic_dataset(config: &DatasetConfig) -> Result<SyntheticDataset> {
    if config.num_classes < 2 {
        return Err(Error::invalid("synthetic dataset needs at least 2 classes"));
    }
    if config.images_per_class < 2 {
        return Err(Error::invalid("every class needs at least 2 images"));
    }
    if config.library_size == 0 || config.parts_per_scene == 0 {
        return Err(Error::invalid("part library and scenes must be non-empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let library = part_library(config.library_size, &mut rng);
    let scenes: Vec<Scene> = (0..config.num_classes)
        .map(|_| random_scene(&library, config.parts_per_scene, &mut rng))
        .collect();
    let mut images = Vec::with_capacity(config.num_classes * config.images_per_class);
    for (label, scene) in scenes.iter().enumerate() {
        for k in 0..config.images_per_class {
            let perturbation = random_perturbation(&mut rng);
            let pixels = scene.render(config.image_size, &perturbation);
            images.push(SyntheticImage {
                image: ImageTensor::new(format!("c{label:03}_{k:02}"), pixels)?,
                label,
                perturbation,
            });
        }
    }
    Ok(SyntheticDataset {
        config: config.clone(),
        scenes,
        images,
    })
}
