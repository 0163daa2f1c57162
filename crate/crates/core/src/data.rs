//! Synthetic multi-sprite scenes with instance labels, and their on-disk
//! layout.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{BackgroundMode, SceneSpec, ShapeKind};
use crate::error::{Error, Result};
use crate::params::seeded_rng;

const SUPERSAMPLE: usize = 4;
/// Fraction of the sprite extent allowed to leave the frame along each axis.
const EDGE_SLACK: f64 = 0.2;
const PLACEMENT_TRIES: usize = 64;

/// One rendered scene: interleaved 8-bit RGB and a label per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledScene {
    pub size: usize,
    /// `size * size * 3`, row-major RGB.
    pub image: Vec<u8>,
    /// `size * size`; 0 is background, `1..=n` are sprites in draw order.
    pub labels: Vec<u8>,
}

impl LabeledScene {
    /// Channel-planar `[3, h, w]` values in `[0, 1]`.
    pub fn planar(&self) -> Vec<f64> {
        let n = self.size * self.size;
        let mut out = vec![0.0; 3 * n];
        for p in 0..n {
            for c in 0..3 {
                out[c * n + p] = f64::from(self.image[p * 3 + c]) / 255.0;
            }
        }
        out
    }

    pub fn object_count(&self) -> usize {
        let mut seen = [false; 256];
        self.labels.iter().for_each(|&l| seen[l as usize] = true);
        seen[1..].iter().filter(|&&s| s).count()
    }
}

#[derive(Clone, Copy, Debug)]
struct Sprite {
    shape: ShapeKind,
    cx: f64,
    cy: f64,
    /// Full extent in pixels.
    size: f64,
    color: [f64; 3],
}

impl Sprite {
    fn contains(&self, x: f64, y: f64) -> bool {
        let r = self.size / 2.0;
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.shape {
            ShapeKind::Disc => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            ShapeKind::Triangle => {
                // Apex up, base along the bottom of the bounding box.
                let t = (dy + r) / (2.0 * r);
                (0.0..=1.0).contains(&t) && dx.abs() <= r * t
            }
        }
    }

    fn overlaps(&self, other: &Sprite) -> bool {
        let reach = (self.size + other.size) / 2.0;
        (self.cx - other.cx).abs() < reach && (self.cy - other.cy).abs() < reach
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h * 6.0) % 6.0;
    let x = c * (1.0 - ((hp % 2.0) - 1.0).abs());
    let (r, g, b) = match hp as usize {
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

fn saturated(rng: &mut ChaCha8Rng) -> [f64; 3] {
    hsv(rng.gen(), rng.gen_range(0.75..1.0), rng.gen_range(0.75..1.0))
}

fn muted(rng: &mut ChaCha8Rng) -> [f64; 3] {
    hsv(rng.gen(), rng.gen_range(0.0..0.3), rng.gen_range(0.15..0.6))
}

/// Renders scene `index` of `spec`; a pure function of `(spec, index)`.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> LabeledScene {
    let mut rng = seeded_rng(spec.seed, index);
    let n = spec.image_size;
    let side = n as f64;

    let (top, bottom) = match spec.background {
        BackgroundMode::Solid => {
            let c = muted(&mut rng);
            (c, c)
        }
        BackgroundMode::VerticalGradient => (muted(&mut rng), muted(&mut rng)),
        BackgroundMode::Fixed => {
            let c = [0.35, 0.35, 0.4];
            (c, c)
        }
    };

    let count = rng.gen_range(1..=spec.max_objects);
    let mut sprites: Vec<Sprite> = Vec::with_capacity(count);
    for _ in 0..count {
        for _ in 0..PLACEMENT_TRIES {
            let size = rng.gen_range(spec.size_range[0]..=spec.size_range[1]) * side;
            let margin = size * (0.5 - EDGE_SLACK);
            let sprite = Sprite {
                shape: spec.shapes[rng.gen_range(0..spec.shapes.len())],
                cx: rng.gen_range(margin..=side - margin),
                cy: rng.gen_range(margin..=side - margin),
                size,
                color: saturated(&mut rng),
            };
            if spec.occlusion || sprites.iter().all(|s| !s.overlaps(&sprite)) {
                sprites.push(sprite);
                break;
            }
        }
    }

    let mut image = vec![0u8; n * n * 3];
    let mut labels = vec![0u8; n * n];
    let sub = 1.0 / SUPERSAMPLE as f64;
    let samples = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for py in 0..n {
        let t = if n > 1 { py as f64 / (n - 1) as f64 } else { 0.0 };
        let bg: [f64; 3] = std::array::from_fn(|c| top[c] * (1.0 - t) + bottom[c] * t);
        for px in 0..n {
            let mut color = bg;
            let mut label = 0u8;
            for (id, s) in sprites.iter().enumerate() {
                let mut hits = 0usize;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let x = px as f64 + (sx as f64 + 0.5) * sub;
                        let y = py as f64 + (sy as f64 + 0.5) * sub;
                        hits += s.contains(x, y) as usize;
                    }
                }
                let cov = hits as f64 / samples;
                if cov > 0.0 {
                    color = std::array::from_fn(|c| color[c] * (1.0 - cov) + s.color[c] * cov);
                }
                if cov > 0.5 {
                    label = (id + 1) as u8;
                }
            }
            let p = py * n + px;
            for c in 0..3 {
                image[p * 3 + c] = (color[c].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            labels[p] = label;
        }
    }
    LabeledScene {
        size: n,
        image,
        labels,
    }
}

/// Contents of `dataset.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub spec: SceneSpec,
    pub count: usize,
    pub seed: u64,
}

fn file_name(i: usize) -> String {
    format!("{i:06}.png")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    }
}

pub fn save_rgb(path: &Path, size: usize, rgb: &[u8]) -> Result<()> {
    let img = RgbImage::from_raw(size as u32, size as u32, rgb.to_vec())
        .ok_or_else(|| Error::contract("save_rgb", "buffer does not match image size"))?;
    img.save(path).map_err(image_err(path))
}

pub fn save_labels(path: &Path, size: usize, labels: &[u8]) -> Result<()> {
    let img = GrayImage::from_raw(size as u32, size as u32, labels.to_vec())
        .ok_or_else(|| Error::contract("save_labels", "buffer does not match image size"))?;
    img.save(path).map_err(image_err(path))
}

/// Reads an 8-bit RGB image; returns `(width, height, pixels)`.
pub fn load_rgb(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path).map_err(image_err(path))?.to_rgb8();
    Ok((img.width() as usize, img.height() as usize, img.into_raw()))
}

pub fn load_labels(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path).map_err(image_err(path))?.to_luma8();
    Ok((img.width() as usize, img.height() as usize, img.into_raw()))
}

/// Writes `count` scenes as `images/`, `labels/` and `dataset.json` under `dir`.
pub fn write_dataset(dir: &Path, spec: &SceneSpec, count: usize) -> Result<()> {
    let images = dir.join("images");
    let labels = dir.join("labels");
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    fs::create_dir_all(&labels).map_err(io_err(&labels))?;
    for i in 0..count {
        let scene = generate_scene(spec, i as u64);
        save_rgb(&images.join(file_name(i)), scene.size, &scene.image)?;
        save_labels(&labels.join(file_name(i)), scene.size, &scene.labels)?;
    }
    let info = DatasetInfo {
        spec: spec.clone(),
        count,
        seed: spec.seed,
    };
    let path = dir.join("dataset.json");
    let text = serde_json::to_string_pretty(&info)?;
    fs::write(&path, text).map_err(io_err(&path))
}

/// A dataset in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub info: DatasetInfo,
    pub scenes: Vec<LabeledScene>,
}

impl Dataset {
    /// Generates the scenes directly instead of reading them from disk.
    pub fn generate(spec: &SceneSpec, count: usize) -> Self {
        Self {
            info: DatasetInfo {
                spec: spec.clone(),
                count,
                seed: spec.seed,
            },
            scenes: (0..count).map(|i| generate_scene(spec, i as u64)).collect(),
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("dataset.json");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let info: DatasetInfo = serde_json::from_str(&text)?;
        let mut scenes = Vec::with_capacity(info.count);
        for i in 0..info.count {
            let ip: PathBuf = dir.join("images").join(file_name(i));
            let lp: PathBuf = dir.join("labels").join(file_name(i));
            let (w, h, image) = load_rgb(&ip)?;
            let (lw, lh, labels) = load_labels(&lp)?;
            if w != h || lw != w || lh != h {
                return Err(Error::contract(
                    "load_dataset",
                    format!("{} and its labels must be square and of equal size", ip.display()),
                ));
            }
            scenes.push(LabeledScene {
                size: w,
                image,
                labels,
            });
        }
        Ok(Self { info, scenes })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Profile, RunConfig};

    fn spec() -> SceneSpec {
        RunConfig::profile(Profile::Desk).data
    }

    #[test]
    fn deterministic() {
        let s = spec();
        assert_eq!(generate_scene(&s, 5), generate_scene(&s, 5));
        assert_ne!(generate_scene(&s, 5), generate_scene(&s, 6));
    }

    #[test]
    fn single_object_two_labels() {
        let s = SceneSpec {
            max_objects: 1,
            ..spec()
        };
        for i in 0..10 {
            let scene = generate_scene(&s, i);
            let mut present: Vec<u8> = scene.labels.clone();
            present.sort_unstable();
            present.dedup();
            assert_eq!(present, vec![0, 1]);
        }
    }

    #[test]
    fn counts_within_range() {
        let s = spec();
        for i in 0..50 {
            let c = generate_scene(&s, i).object_count();
            assert!((1..=s.max_objects).contains(&c) || c == 0, "{c}");
        }
    }

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        let g = hsv(1.0 / 3.0, 1.0, 1.0);
        assert!((g[1] - 1.0).abs() < 1e-12 && g[0].abs() < 1e-12);
    }
}
