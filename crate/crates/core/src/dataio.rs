//! Dataset layout on disk, the synthetic shape generator, and map/mask files.
//!
//! A dataset directory holds `images/`, `masks/` and `manifest.json`. Saliency
//! maps are stored as 16-bit grayscale PNGs with `code = round(v · 65535)`;
//! masks as 8-bit grayscale PNGs (0 or 255).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{
    resize_bilinear, resize_mask, BinaryMask, Dataset, Image, MapSource, SaliencyMap, SampleRecord, Split,
};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// Path relative to the dataset root.
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(default)]
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let manifest: Self = serde_json::from_str(&text).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        write_file(path, text.as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Validation {
                    id: e.id.clone(),
                    reason: "duplicate id in manifest".into(),
                });
            }
            for p in std::iter::once(&e.image).chain(e.mask.as_ref()) {
                if Path::new(p).is_absolute() {
                    return Err(Error::Validation {
                        id: e.id.clone(),
                        reason: format!("path `{p}` must be relative to the dataset root"),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

fn load_err(path: &Path, e: impl ToString) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

pub fn read_image(path: &Path) -> Result<Image<f32>> {
    let img = image::open(path).map_err(|e| load_err(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    Image::from_fn(w as usize, h as usize, |x, y| {
        let p = img.get_pixel(x as u32, y as u32).0;
        [p[0] as f32 / 255.0, p[1] as f32 / 255.0, p[2] as f32 / 255.0]
    })
}

pub fn write_image(image: &Image<f32>, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let (w, h) = image.dims();
    let buf = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let c = image.rgb(x as usize, y as usize);
        Rgb(c.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8))
    });
    buf.save(path).map_err(|e| load_err(path, e))
}

/// Reads a mask stored as grayscale; values above half intensity are salient.
pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path).map_err(|e| load_err(path, e))?.to_luma16();
    let (w, h) = img.dimensions();
    let values = img.pixels().map(|p| u8::from(p.0[0] > 32767)).collect();
    BinaryMask::new(w as usize, h as usize, values)
}

pub fn save_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let buf = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, mask.values().iter().map(|&v| v * 255).collect())
        .expect("buffer size matches mask dimensions");
    buf.save(path).map_err(|e| load_err(path, e))
}

/// Quantizes a map value to its 16-bit code.
pub fn map_code(v: f32) -> u16 {
    (f64::from(v).clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Persists a map as a 16-bit grayscale PNG.
pub fn save_map(map: &SaliencyMap<f32>, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(
        map.width() as u32,
        map.height() as u32,
        map.values().iter().map(|&v| map_code(v)).collect(),
    )
    .expect("buffer size matches map dimensions");
    buf.save(path).map_err(|e| load_err(path, e))
}

pub fn load_map(path: &Path) -> Result<SaliencyMap<f32>> {
    let img = image::open(path).map_err(|e| load_err(path, e))?.to_luma16();
    let (w, h) = img.dimensions();
    let values = img.pixels().map(|p| (f64::from(p.0[0]) / 65535.0) as f32).collect();
    SaliencyMap::new(w as usize, h as usize, values, MapSource::Unknown)
}

/// 8-bit visualization of a map.
pub fn save_map_preview(map: &SaliencyMap<f32>, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let buf = GrayImage::from_raw(
        map.width() as u32,
        map.height() as u32,
        map.values().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect(),
    )
    .expect("buffer size matches map dimensions");
    buf.save(path).map_err(|e| load_err(path, e))
}

/// `(stem, path)` of every PNG directly inside `dir`, sorted; empty if the
/// directory does not exist.
pub fn list_pngs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Writes `<dir>/<id>.png` for every mask.
pub fn save_mask_set(masks: &BTreeMap<String, BinaryMask>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (id, m) in masks {
        save_mask(m, &dir.join(format!("{id}.png")))?;
    }
    Ok(())
}

/// Reads every mask in `dir`; a missing directory is a missing artifact.
pub fn load_mask_set(dir: &Path) -> Result<BTreeMap<String, BinaryMask>> {
    if !dir.is_dir() {
        return Err(Error::MissingArtifact(dir.to_path_buf()));
    }
    list_pngs(dir)?.into_iter().map(|(id, p)| Ok((id, load_mask(&p)?))).collect()
}

/// Loads the entries of one split in manifest order.
pub fn load_dataset(root: &Path, manifest: &DatasetManifest, split: Split) -> Result<Dataset> {
    manifest.validate()?;
    let mut samples = Vec::new();
    for entry in manifest.entries.iter().filter(|e| e.split == split) {
        let image = read_image(&root.join(&entry.image))?;
        let gt = match &entry.mask {
            Some(m) if !root.join(m).is_file() => return Err(Error::MissingArtifact(root.join(m))),
            Some(m) => Some(load_mask(&root.join(m))?),
            None => None,
        };
        samples.push(SampleRecord::new(entry.id.clone(), image, gt)?);
    }
    Dataset::new(samples, split)
}

/// Resizes every image (and mask) in a dataset to `size × size`.
pub fn resize_dataset(dataset: &Dataset, size: usize) -> Result<Dataset> {
    let samples = dataset
        .samples()
        .iter()
        .map(|s| {
            let image = resize_bilinear(&s.image, size, size)?;
            let gt = s.gt.as_ref().map(|m| resize_mask(m, size, size)).transpose()?;
            SampleRecord::new(s.id.clone(), image, gt)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples, dataset.split)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    /// Training images.
    pub n_images: i64,
    /// Additional held-out test images.
    pub n_test: i64,
    pub image_size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub distractor_probability: f64,
    pub texture_noise_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_images: 200,
            n_test: 50,
            image_size: 64,
            min_shapes: 1,
            max_shapes: 3,
            distractor_probability: 0.5,
            texture_noise_scale: 0.25,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_images < 0 || self.n_test < 0 {
            return Err(Error::invalid("image counts must be non-negative"));
        }
        if self.image_size < 16 {
            return Err(Error::invalid("synthetic images must be at least 16 pixels wide"));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::invalid("shape count range must satisfy 1 <= min <= max"));
        }
        if !(0.0..=1.0).contains(&self.distractor_probability) {
            return Err(Error::invalid("distractor probability must lie in [0, 1]"));
        }
        if !(self.texture_noise_scale >= 0.0) {
            return Err(Error::invalid("texture noise scale must be non-negative"));
        }
        Ok(())
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Smooth value noise in roughly `[-1, 1]` on a `cells × cells` lattice.
struct ValueNoise {
    cells: usize,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, cells: usize) -> Self {
        let lattice = (0..(cells + 1) * (cells + 1)).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Self { cells, lattice }
    }

    /// `u, v` in `[0, 1]`.
    fn sample(&self, u: f64, v: f64) -> f64 {
        let gx = u * self.cells as f64;
        let gy = v * self.cells as f64;
        let x0 = (gx.floor() as usize).min(self.cells - 1);
        let y0 = (gy.floor() as usize).min(self.cells - 1);
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let fx = smooth(gx - x0 as f64);
        let fy = smooth(gy - y0 as f64);
        let at = |x: usize, y: usize| self.lattice[y * (self.cells + 1) + x];
        let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
        let bot = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
        top * (1.0 - fy) + bot * fy
    }
}

#[derive(Clone, Copy, Debug)]
enum ShapeKind {
    Ellipse,
    Rectangle,
    Blob,
}

#[derive(Clone, Debug)]
struct Shape {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
    harmonics: [(f64, f64); 3],
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng, cx: f64, cy: f64, rx: f64, ry: f64) -> Self {
        let kind = match rng.gen_range(0..3) {
            0 => ShapeKind::Ellipse,
            1 => ShapeKind::Rectangle,
            _ => ShapeKind::Blob,
        };
        let mut harmonics = [(0.0, 0.0); 3];
        for h in &mut harmonics {
            *h = (rng.gen_range(0.0..0.12), rng.gen_range(0.0..std::f64::consts::TAU));
        }
        Self {
            kind,
            cx,
            cy,
            rx,
            ry,
            angle: rng.gen_range(0.0..std::f64::consts::PI),
            harmonics,
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        match self.kind {
            ShapeKind::Ellipse => u * u + v * v <= 1.0,
            ShapeKind::Rectangle => u.abs() <= 0.85 && v.abs() <= 0.85,
            ShapeKind::Blob => {
                let theta = v.atan2(u);
                let scale = 1.0
                    + self
                        .harmonics
                        .iter()
                        .enumerate()
                        .map(|(k, (a, phase))| a * ((k as f64 + 2.0) * theta + phase).sin())
                        .sum::<f64>();
                (u * u + v * v).sqrt() <= scale
            }
        }
    }
}

struct SyntheticSample {
    image: Image<f32>,
    mask: BinaryMask,
}

fn synth_one(config: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Result<SyntheticSample> {
    let size = config.image_size;
    let sf = size as f64;
    let bg_hue: f64 = rng.gen_range(0.0..1.0);
    let bg_sat: f64 = rng.gen_range(0.15..0.45);
    let bg_val: f64 = rng.gen_range(0.35..0.7);
    let coarse = ValueNoise::new(rng, 3);
    let fine = ValueNoise::new(rng, 8);
    let hue_noise = ValueNoise::new(rng, 4);
    let amp = config.texture_noise_scale;

    // Up to three non-salient shapes: the first hugs a border, the others float
    // anywhere as low-saturation clutter that contrast priors pick up.
    let mut distractors = Vec::new();
    for d in 0..3 {
        if !rng.gen_bool(config.distractor_probability) {
            continue;
        }
        let r = rng.gen_range(0.1..0.2) * sf;
        let ry = r * rng.gen_range(0.7..1.3);
        let (cx, cy) = if d == 0 {
            let t = rng.gen_range(0.15..0.85) * sf;
            match rng.gen_range(0..4) {
                0 => (t, r * 0.3),
                1 => (t, sf - r * 0.3),
                2 => (r * 0.3, t),
                _ => (sf - r * 0.3, t),
            }
        } else {
            (rng.gen_range(0.1..0.9) * sf, rng.gen_range(0.1..0.9) * sf)
        };
        let shape = Shape::random(rng, cx, cy, r, ry);
        let hue = bg_hue + rng.gen_range(0.08..0.25) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let color = hsv_to_rgb(
            hue,
            (bg_sat + rng.gen_range(0.05..0.25)).min(0.9),
            (bg_val + rng.gen_range(-0.3..0.3)).clamp(0.15, 0.95),
        );
        distractors.push((shape, color));
    }

    let n_shapes = rng.gen_range(config.min_shapes..=config.max_shapes);
    let mut objects = Vec::new();
    for k in 0..n_shapes {
        let r = if k == 0 { rng.gen_range(0.14..0.24) } else { rng.gen_range(0.08..0.16) } * sf;
        let ry = r * rng.gen_range(0.65..1.35);
        // now and then an object is cut by the frame
        let margin = if rng.gen_bool(0.2) { 0.2 * r } else { r.max(ry) + 2.0 };
        let cx = rng.gen_range(margin..(sf - margin).max(margin + 1.0));
        let cy = rng.gen_range(margin..(sf - margin).max(margin + 1.0));
        let shape = Shape::random(rng, cx, cy, r, ry);
        let hue = bg_hue + rng.gen_range(0.3..0.7);
        let color = hsv_to_rgb(hue, rng.gen_range(0.55..0.95), rng.gen_range(0.5..0.95));
        objects.push((shape, color));
    }

    let jitter: Vec<f64> = (0..size * size).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut mask = vec![0u8; size * size];
    let image = Image::from_fn(size, size, |x, y| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let (u, v) = (px / sf, py / sf);
        let texture = coarse.sample(u, v) + 0.5 * fine.sample(u, v);
        let mut rgb = hsv_to_rgb(
            bg_hue + 0.06 * hue_noise.sample(u, v),
            bg_sat,
            (bg_val + amp * texture).clamp(0.0, 1.0),
        );
        for (shape, color) in distractors.iter().chain(&objects) {
            if shape.contains(px, py) {
                rgb = color.map(|c| (c + 0.5 * amp * texture).clamp(0.0, 1.0));
            }
        }
        if objects.iter().any(|(s, _)| s.contains(px, py)) {
            mask[y * size + x] = 1;
        }
        let j = 0.15 * amp * jitter[y * size + x];
        rgb.map(|c| ((c + j).clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0)
    })?;
    let mask = BinaryMask::new(size, size, mask)?;
    Ok(SyntheticSample { image, mask })
}

/// Writes a synthetic dataset under `out_dir` and returns its manifest.
///
/// Output is a pure function of `config`: every sample draws from its own
/// ChaCha stream derived from the seed.
pub fn generate_synthetic(config: &SyntheticConfig, out_dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    let total = (config.n_images + config.n_test) as usize;
    let mut manifest = DatasetManifest {
        seed: config.seed,
        entries: Vec::with_capacity(total),
    };
    for index in 0..total {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(index as u64 + 1);
        let mut sample = synth_one(config, &mut rng)?;
        // every image must contain a salient object
        while sample.mask.count_ones() == 0 {
            sample = synth_one(config, &mut rng)?;
        }
        let id = format!("syn_{index:05}");
        let image = format!("images/{id}.png");
        let mask = format!("masks/{id}.png");
        write_image(&sample.image, &out_dir.join(&image))?;
        save_mask(&sample.mask, &out_dir.join(&mask))?;
        manifest.entries.push(ManifestEntry {
            id,
            image,
            mask: Some(mask),
            split: if index < config.n_images as usize { Split::Train } else { Split::Test },
        });
    }
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Dataset directories follow the manifest layout; returns `root/manifest.json`.
pub fn manifest_path(root: &Path) -> PathBuf {
    root.join(MANIFEST_FILE)
}
