//! Toy image datasets: a seeded synthetic shape generator and a raw
//! on-disk tensor format.
//!
//! A dataset directory holds `manifest.json`, `images.f32` (little-endian
//! `f32`, `[K, 3, H, W]` row-major) and `labels.txt` (one class id per line).

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
pub const IMAGES: &str = "images.f32";
pub const LABELS: &str = "labels.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[K, 3, H, W]`
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub count: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    #[serde(default = "default_split")]
    pub split: String,
}

fn default_split() -> String {
    "train".to_string()
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, split: impl Into<String>) -> Result<Self> {
        let ds = Dataset {
            images,
            labels,
            num_classes,
            split: split.into(),
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let s = self.images.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Dataset(format!("images must be [K, 3, H, W], got {s:?}")));
        }
        if s[0] != self.labels.len() {
            return Err(Error::Dataset(format!("{} images but {} labels", s[0], self.labels.len())));
        }
        if self.num_classes == 0 {
            return Err(Error::Dataset("num_classes must be positive".into()));
        }
        if let Some(bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::Dataset(format!("label {bad} outside [0, {})", self.num_classes)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(H, W)`.
    pub fn resolution(&self) -> (usize, usize) {
        (self.images.shape()[2], self.images.shape()[3])
    }

    /// Image `i` as `[3, H, W]`.
    pub fn image(&self, i: usize) -> Result<Tensor> {
        self.images.index_first(i)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn manifest(&self) -> Manifest {
        let s = self.images.shape();
        Manifest {
            count: s[0],
            channels: s[1],
            height: s[2],
            width: s[3],
            num_classes: self.num_classes,
            split: self.split.clone(),
        }
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&self.manifest())?)?;
        let bytes: Vec<u8> = self.images.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        fs::write(dir.join(IMAGES), bytes)?;
        let labels: String = self.labels.iter().map(|l| format!("{l}\n")).collect();
        fs::write(dir.join(LABELS), labels)?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            fs::read(dir.join(name)).map_err(|e| Error::Dataset(format!("cannot read {}: {e}", dir.join(name).display())))
        };
        let manifest: Manifest = serde_json::from_slice(&read(MANIFEST)?)
            .map_err(|e| Error::Dataset(format!("invalid {MANIFEST}: {e}")))?;
        if manifest.channels != 3 {
            return Err(Error::Dataset(format!("expected 3 channels, manifest says {}", manifest.channels)));
        }
        let shape = [manifest.count, 3, manifest.height, manifest.width];
        let numel: usize = shape.iter().product();
        let raw = read(IMAGES)?;
        if raw.len() != numel * 4 {
            return Err(Error::Dataset(format!(
                "{IMAGES} holds {} bytes, manifest implies {}",
                raw.len(),
                numel * 4
            )));
        }
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let images = Tensor::new(&shape, data).map_err(|e| Error::Dataset(e.to_string()))?;
        let text = String::from_utf8(read(LABELS)?).map_err(|_| Error::Dataset(format!("{LABELS} is not UTF-8")))?;
        let labels = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                l.trim()
                    .parse()
                    .map_err(|_| Error::Dataset(format!("{LABELS} line {}: `{l}` is not a class id", i + 1)))
            })
            .collect::<Result<Vec<usize>>>()?;
        Dataset::new(images, labels, manifest.num_classes, manifest.split)
    }
}

/// Left-right mirror of a `[C, H, W]` image.
pub fn flip_horizontal(image: &Tensor) -> Result<Tensor> {
    let [c, h, w] = image.shape() else {
        return Err(Error::invalid("flip", format!("expected [C, H, W], got {:?}", image.shape())));
    };
    let w = *w;
    let src = image.data();
    Tensor::from_fn(&[*c, *h, w], |i| {
        let x = i % w;
        src[i - x + (w - 1 - x)]
    })
}

/// Shape drawn in class `k` of the synthetic set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Disk,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Square, ShapeKind::Disk, ShapeKind::Triangle, ShapeKind::Cross];

    /// Whether `(dy, dx)`, relative to the centre, lies inside a shape of radius `r`.
    fn contains(self, dy: f64, dx: f64, r: f64) -> bool {
        match self {
            ShapeKind::Square => dy.abs() <= r && dx.abs() <= r,
            ShapeKind::Disk => dy * dy + dx * dx <= r * r,
            // apex up, base at dy = r
            ShapeKind::Triangle => dy <= r && dy >= -r && dx.abs() <= (dy + r) / 2.0,
            ShapeKind::Cross => {
                let arm = r / 3.0;
                (dy.abs() <= arm && dx.abs() <= r) || (dx.abs() <= arm && dy.abs() <= r)
            }
        }
    }
}

/// Parameters of the synthetic shape set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub samples: usize,
    pub classes: usize,
    pub resolution: usize,
    pub seed: u64,
    /// Background noise amplitude.
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_noise() -> f64 {
    0.2
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            samples: 64,
            classes: 4,
            resolution: 32,
            seed: 0,
            noise: default_noise(),
        }
    }
}

impl SyntheticSpec {
    /// Parses `synthetic[:key=value,...]` with keys `samples`, `classes`,
    /// `size`, `seed` and `noise`.
    pub fn parse(text: &str) -> Result<Self> {
        let rest = text
            .strip_prefix("synthetic")
            .ok_or_else(|| Error::Dataset(format!("`{text}` is not a synthetic dataset spec")))?;
        let mut spec = SyntheticSpec::default();
        let rest = match rest.strip_prefix(':') {
            Some(r) => r,
            None if rest.is_empty() => return Ok(spec),
            None => return Err(Error::Dataset(format!("malformed synthetic spec `{text}`"))),
        };
        for item in rest.split(',').filter(|s| !s.is_empty()) {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Dataset(format!("expected key=value, got `{item}`")))?;
            let bad = || Error::Dataset(format!("invalid value `{v}` for `{k}`"));
            match k {
                "samples" => spec.samples = v.parse().map_err(|_| bad())?,
                "classes" => spec.classes = v.parse().map_err(|_| bad())?,
                "size" => spec.resolution = v.parse().map_err(|_| bad())?,
                "seed" => spec.seed = v.parse().map_err(|_| bad())?,
                "noise" => spec.noise = v.parse().map_err(|_| bad())?,
                _ => return Err(Error::Dataset(format!("unknown synthetic key `{k}`"))),
            }
        }
        Ok(spec)
    }

    /// Balanced classes (`i mod classes`, then shuffled), one coloured shape
    /// per image on uniform noise.
    pub fn generate(&self) -> Result<Dataset> {
        if !(1..=ShapeKind::ALL.len()).contains(&self.classes) {
            return Err(Error::Dataset(format!(
                "synthetic classes must be in 1..={}, got {}",
                ShapeKind::ALL.len(),
                self.classes
            )));
        }
        if self.samples == 0 || self.resolution < 8 {
            return Err(Error::Dataset("synthetic set needs samples > 0 and resolution >= 8".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut labels: Vec<usize> = (0..self.samples).map(|i| i % self.classes).collect();
        labels.shuffle(&mut rng);
        let s = self.resolution;
        let plane = s * s;
        let mut data = Vec::with_capacity(self.samples * 3 * plane);
        for &label in &labels {
            let kind = ShapeKind::ALL[label];
            let r = rng.gen_range(0.22..=0.32) * s as f64;
            let cy = rng.gen_range(r..=s as f64 - 1.0 - r);
            let cx = rng.gen_range(r..=s as f64 - 1.0 - r);
            let color: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.4..=1.0));
            let mut img = vec![0.0; 3 * plane];
            for v in img.iter_mut() {
                *v = rng.gen_range(-self.noise..=self.noise);
            }
            for y in 0..s {
                for x in 0..s {
                    if kind.contains(y as f64 - cy, x as f64 - cx, r) {
                        for (ch, col) in color.iter().enumerate() {
                            img[ch * plane + y * s + x] = *col;
                        }
                    }
                }
            }
            data.extend(img);
        }
        let images = Tensor::new(&[self.samples, 3, s, s], data)?;
        Dataset::new(images, labels, self.classes, "train")
    }
}

/// Where a dataset comes from: a synthetic spec or a directory.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Dir(std::path::PathBuf),
}

impl DataSource {
    pub fn parse(text: &str) -> Result<Self> {
        if text.starts_with("synthetic") {
            Ok(DataSource::Synthetic(SyntheticSpec::parse(text)?))
        } else {
            Ok(DataSource::Dir(text.into()))
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Synthetic(s) => s.generate(),
            DataSource::Dir(p) => Dataset::load_dir(p),
        }
    }
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSource::Synthetic(s) => write!(
                f,
                "synthetic:samples={},classes={},size={},seed={},noise={}",
                s.samples, s.classes, s.resolution, s.seed, s.noise
            ),
            DataSource::Dir(p) => write!(f, "{}", p.display()),
        }
    }
}
