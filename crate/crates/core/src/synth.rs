//! Procedural histology-like scenes with point annotations.
//!
//! Nuclei are dark ellipses on a bright stained background, so localization
//! only needs a luminance contrast. Class identity lives solely in a small
//! per-class hue shift (red minus blue), blurred by per-instance jitter.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point, PointAnnotation};
use crate::nn::Tensor;

/// Placement attempts per nucleus before giving up.
const PLACEMENT_RETRIES: usize = 2000;

/// Visual identity of a synthetic "dataset".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Style {
    pub background: [f64; 3],
    pub nucleus: [f64; 3],
    pub noise_std: f64,
    /// Required luminance gap between background and nucleus colors.
    pub contrast_margin: f64,
    /// Red-minus-blue hue step between consecutive classes is `2 * class_cue`.
    pub class_cue: f64,
    /// Standard deviation of the per-instance hue shift.
    pub hue_jitter: f64,
    /// Amplitude of the class-independent stripe texture inside nuclei.
    pub texture_amplitude: f64,
}

impl Style {
    pub fn preset(name: &str) -> Option<Style> {
        let base = Style {
            background: [0.93, 0.80, 0.88],
            nucleus: [0.45, 0.30, 0.62],
            noise_std: 0.03,
            contrast_margin: 0.2,
            class_cue: 0.01,
            hue_jitter: 0.0025,
            texture_amplitude: 0.03,
        };
        match name {
            "alpha" => Some(base),
            "beta" => Some(Style {
                background: [0.84, 0.82, 0.93],
                nucleus: [0.36, 0.28, 0.58],
                noise_std: 0.04,
                ..base
            }),
            "gamma" => Some(Style {
                background: [0.95, 0.86, 0.80],
                nucleus: [0.50, 0.33, 0.55],
                noise_std: 0.025,
                texture_amplitude: 0.05,
                ..base
            }),
            _ => None,
        }
    }
}

/// Rec. 601 luma.
pub fn luminance(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Poisson mean of the nucleus count; zero yields empty scenes.
    pub mean_count: f64,
    pub radius_min: f64,
    pub radius_max: f64,
    pub min_separation: f64,
    /// Prior over classes `1..=C`.
    pub class_prior: Vec<f64>,
    pub style: Style,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            mean_count: 8.0,
            radius_min: 3.0,
            radius_max: 5.0,
            min_separation: 8.0,
            class_prior: vec![1.0 / 3.0; 3],
            style: Style::preset("alpha").expect("preset exists"),
        }
    }
}

impl SceneSpec {
    pub fn classes(&self) -> usize {
        self.class_prior.len()
    }

    pub fn with_style(mut self, style: Style) -> Self {
        self.style = style;
        self
    }

    /// Distance from the border that every nucleus center keeps.
    pub fn margin(&self) -> f64 {
        self.radius_max
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.height == 0 || self.width == 0 {
            return bad("image size must be positive".into());
        }
        if !(self.mean_count >= 0.0 && self.mean_count.is_finite()) {
            return bad(format!("mean_count {} must be finite and >= 0", self.mean_count));
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return bad(format!(
                "radius range [{}, {}] is invalid",
                self.radius_min, self.radius_max
            ));
        }
        if self.min_separation < 2.0 * self.radius_min {
            return bad(format!(
                "min_separation {} must be at least 2 * radius_min",
                self.min_separation
            ));
        }
        if 2.0 * self.margin() >= self.width.min(self.height) as f64 {
            return bad("image too small for the nucleus radius".into());
        }
        if self.class_prior.is_empty() || self.class_prior.iter().any(|&p| p.is_nan() || p < 0.0) {
            return bad("class prior must be non-empty and non-negative".into());
        }
        let total: f64 = self.class_prior.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("class prior sums to {total}, not 1"));
        }
        let s = &self.style;
        if luminance(s.background) - luminance(s.nucleus) < s.contrast_margin {
            return bad("nucleus color does not meet the contrast margin".into());
        }
        if s.noise_std < 0.0 || s.hue_jitter < 0.0 || s.texture_amplitude < 0.0 || s.class_cue < 0.0 {
            return bad("style amplitudes must be non-negative".into());
        }
        Ok(())
    }

    /// Hue shift that encodes `class_id`, centered on the middle class.
    pub fn class_hue(&self, class_id: usize) -> f64 {
        let center = (self.classes() as f64 + 1.0) / 2.0;
        self.style.class_cue * (class_id as f64 - center)
    }
}

/// Per-instance appearance parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Appearance {
    /// Total hue shift (class cue plus jitter) added to red and removed from blue.
    pub hue_shift: f64,
    /// Minor-to-major axis ratio.
    pub aspect: f64,
    pub angle: f64,
    pub texture_frequency: f64,
    pub texture_angle: f64,
    pub texture_phase: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NucleusInstance {
    pub center: Point,
    pub radius: f64,
    pub class_id: usize,
    pub appearance: Appearance,
}

impl NucleusInstance {
    pub fn annotation(&self) -> PointAnnotation {
        PointAnnotation {
            point: self.center,
            class_id: self.class_id,
        }
    }
}

/// Samples nucleus instances by rejection placement.
pub fn sample_scene(spec: &SceneSpec, seed: u64) -> Result<Vec<NucleusInstance>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = if spec.mean_count == 0.0 {
        0
    } else {
        Poisson::new(spec.mean_count)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?
            .sample(&mut rng) as usize
    };
    let classes = WeightedIndex::new(&spec.class_prior)
        .map_err(|e| Error::InvalidConfig(format!("class prior: {e}")))?;
    let jitter = Normal::new(0.0, spec.style.hue_jitter).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let m = spec.margin();
    let mut placed: Vec<NucleusInstance> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut center = None;
        for _ in 0..PLACEMENT_RETRIES {
            let c = Point::new(
                rng.random_range(m..spec.width as f64 - m),
                rng.random_range(m..spec.height as f64 - m),
            );
            if placed.iter().all(|n| n.center.distance(c) >= spec.min_separation) {
                center = Some(c);
                break;
            }
        }
        let Some(center) = center else {
            return Err(Error::UnsatisfiableDensity {
                requested: count,
                placed: placed.len(),
                separation: spec.min_separation,
            });
        };
        let class_id = classes.sample(&mut rng) + 1;
        let radius = if spec.radius_max > spec.radius_min {
            rng.random_range(spec.radius_min..=spec.radius_max)
        } else {
            spec.radius_min
        };
        let appearance = Appearance {
            hue_shift: spec.class_hue(class_id) + jitter.sample(&mut rng),
            aspect: rng.random_range(0.75..=1.0),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            texture_frequency: rng.random_range(0.8..1.6),
            texture_angle: rng.random_range(0.0..std::f64::consts::PI),
            texture_phase: rng.random_range(0.0..std::f64::consts::TAU),
        };
        placed.push(NucleusInstance {
            center,
            radius,
            class_id,
            appearance,
        });
    }
    Ok(placed)
}

/// Fraction of the pixel centered at `(px, py)` covered by the nucleus,
/// from a first-order signed-distance estimate.
pub fn coverage(n: &NucleusInstance, px: f64, py: f64) -> f64 {
    let (s, c) = n.appearance.angle.sin_cos();
    let dx = px - n.center.x;
    let dy = py - n.center.y;
    let u = c * dx + s * dy;
    let v = -s * dx + c * dy;
    let a = n.radius;
    let b = n.radius * n.appearance.aspect;
    let rho = ((u / a).powi(2) + (v / b).powi(2)).sqrt();
    let signed = (rho - 1.0) * (a * b).sqrt();
    (0.5 - signed).clamp(0.0, 1.0)
}

fn nucleus_color(n: &NucleusInstance, spec: &SceneSpec, px: f64, py: f64) -> [f64; 3] {
    let ap = &n.appearance;
    let (s, c) = ap.texture_angle.sin_cos();
    let t = spec.style.texture_amplitude
        * (ap.texture_frequency * (c * (px - n.center.x) + s * (py - n.center.y)) + ap.texture_phase).sin();
    let base = spec.style.nucleus;
    [
        base[0] + ap.hue_shift + t,
        base[1] + t,
        base[2] - ap.hue_shift + t,
    ]
}

/// Renders a scene to a `[3, H, W]` image with values in `[0, 1]`.
pub fn render(scene: &[NucleusInstance], spec: &SceneSpec, noise_seed: u64) -> Result<Tensor> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut img = vec![0.0; 3 * h * w];
    for ch in 0..3 {
        img[ch * h * w..(ch + 1) * h * w].fill(spec.style.background[ch]);
    }
    let pad = 1.0;
    for n in scene {
        let r = n.radius + pad;
        let i0 = ((n.center.y - r).floor().max(0.0)) as usize;
        let i1 = ((n.center.y + r).ceil() as usize).min(h);
        let j0 = ((n.center.x - r).floor().max(0.0)) as usize;
        let j1 = ((n.center.x + r).ceil() as usize).min(w);
        for i in i0..i1 {
            for j in j0..j1 {
                let (px, py) = (j as f64 + 0.5, i as f64 + 0.5);
                let a = coverage(n, px, py);
                if a <= 0.0 {
                    continue;
                }
                let color = nucleus_color(n, spec, px, py);
                for (ch, &cv) in color.iter().enumerate() {
                    let idx = (ch * h + i) * w + j;
                    img[idx] = (1.0 - a) * img[idx] + a * cv;
                }
            }
        }
    }
    if spec.style.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let noise = Normal::new(0.0, spec.style.noise_std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for v in &mut img {
            *v += noise.sample(&mut rng);
        }
    }
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new(vec![3, h, w], img)
}

/// Rounds an image to 8-bit levels, the precision it has on disk.
pub fn quantize(image: &Tensor) -> Tensor {
    image.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

/// SplitMix64 finalizer mixing a base seed with a stream index.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One annotated image.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub annotations: Vec<PointAnnotation>,
}

impl Sample {
    pub fn points(&self) -> Vec<Point> {
        self.annotations.iter().map(|a| a.point).collect()
    }
}

/// An in-memory dataset together with the `SceneSpec` that generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub seed: u64,
    pub spec: SceneSpec,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn classes(&self) -> usize {
        self.spec.classes()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn nucleus_count(&self) -> usize {
        self.samples.iter().map(|s| s.annotations.len()).sum()
    }

    /// Keeps the first `n` samples.
    pub fn truncated(&self, n: usize) -> Dataset {
        Dataset {
            samples: self.samples.iter().take(n).cloned().collect(),
            ..self.clone()
        }
    }
}

/// Generates `count` images; image `i` depends only on `(spec, seed, i)`.
pub fn generate(spec: &SceneSpec, count: usize, seed: u64, name: &str) -> Result<Dataset> {
    spec.validate()?;
    let samples = (0..count)
        .map(|i| {
            let image_seed = derive_seed(seed, i as u64);
            let scene = sample_scene(spec, derive_seed(image_seed, 0))?;
            let image = quantize(&render(&scene, spec, derive_seed(image_seed, 1))?);
            Ok(Sample {
                image,
                annotations: scene.iter().map(NucleusInstance::annotation).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        name: name.to_string(),
        seed,
        spec: spec.clone(),
        samples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image: String,
    pub annotations: String,
}

/// On-disk description of a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub seed: u64,
    pub spec: SceneSpec,
    pub n_nuclei: usize,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ANNOTATION_HEADER: &str = "x,y,class";

/// Parses one `x,y,class` annotation row.
pub fn parse_annotation_row(row: &str, classes: usize) -> std::result::Result<PointAnnotation, String> {
    let fields: Vec<&str> = row.trim().split(',').map(str::trim).collect();
    if fields.len() != 3 {
        return Err(format!("expected 3 fields `x,y,class`, found {}", fields.len()));
    }
    let coord = |s: &str, what: &str| {
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| format!("invalid {what} coordinate `{s}`"))
    };
    let x = coord(fields[0], "x")?;
    let y = coord(fields[1], "y")?;
    let class_id: usize = fields[2]
        .parse()
        .map_err(|_| format!("invalid class `{}`", fields[2]))?;
    if class_id == 0 || class_id > classes {
        return Err(format!("class {class_id} out of range 1..={classes}"));
    }
    Ok(PointAnnotation {
        point: Point::new(x, y),
        class_id,
    })
}

pub fn format_annotations(annotations: &[PointAnnotation]) -> String {
    let mut out = String::from(ANNOTATION_HEADER);
    out.push('\n');
    for a in annotations {
        out.push_str(&format!("{},{},{}\n", a.point.x, a.point.y, a.class_id));
    }
    out
}

/// Reads an annotation file, reporting errors with file and line.
pub fn read_annotations(path: &Path, classes: usize) -> Result<Vec<PointAnnotation>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["x", "y", "class"] {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected header `{ANNOTATION_HEADER}`"),
        });
    }
    let mut out = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {
                let line = record.position().map_or(0, |p| p.line());
                let row = record.iter().collect::<Vec<_>>().join(",");
                out.push(parse_annotation_row(&row, classes).map_err(|message| Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message,
                })?);
            }
            Err(e) => return Err(csv_error(path, e)),
        }
    }
    Ok(out)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        kind => Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{kind:?}"),
        },
    }
}

/// Writes an image as 8-bit RGB PNG.
pub fn write_png(path: &Path, image: &Tensor) -> Result<()> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::InvalidShape(format!("expected 3 channels, got {c}")));
    }
    let mut bytes = Vec::with_capacity(3 * h * w);
    for i in 0..h {
        for j in 0..w {
            for ch in 0..3 {
                bytes.push((image.at3(ch, i, j).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let img_err = |e: png::EncodingError| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut writer = encoder.write_header().map_err(img_err)?;
    writer.write_image_data(&bytes).map_err(img_err)?;
    writer.finish().map_err(img_err)
}

/// Reads an 8-bit RGB PNG into a `[3, H, W]` tensor in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Tensor> {
    let img_err = |message: String| Error::Image {
        path: path.to_path_buf(),
        message,
    };
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| img_err(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| img_err("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| img_err(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(img_err(format!(
            "expected 8-bit RGB, got {:?} {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let bytes = &buf[..info.buffer_size()];
    let mut data = vec![0.0; 3 * h * w];
    for i in 0..h {
        for j in 0..w {
            for ch in 0..3 {
                data[(ch * h + i) * w + j] = bytes[(i * w + j) * 3 + ch] as f64 / 255.0;
            }
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Writes a dataset as `images/`, `annotations/` and `manifest.json`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<DatasetManifest> {
    let images = dir.join("images");
    let annotations = dir.join("annotations");
    for d in [&images, &annotations] {
        fs::create_dir_all(d).map_err(|e| Error::io(d.as_path(), e))?;
    }
    let mut entries = Vec::with_capacity(dataset.len());
    for (i, sample) in dataset.samples.iter().enumerate() {
        let image = format!("images/img_{i:05}.png");
        let ann = format!("annotations/img_{i:05}.csv");
        write_png(&dir.join(&image), &sample.image)?;
        let path = dir.join(&ann);
        fs::write(&path, format_annotations(&sample.annotations)).map_err(|e| Error::io(&path, e))?;
        entries.push(ManifestEntry {
            image,
            annotations: ann,
        });
    }
    let manifest = DatasetManifest {
        name: dataset.name.clone(),
        seed: dataset.seed,
        spec: dataset.spec.clone(),
        n_nuclei: dataset.nucleus_count(),
        entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let mut file = BufWriter::new(fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
    serde_json::to_writer_pretty(&mut file, &manifest)
        .map_err(|e| Error::io(&path, e.into()))?;
    file.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    file.flush().map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.clone(),
        line: e.line() as u64,
        message: e.to_string(),
    })
}

/// Loads and validates a dataset directory written by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(Dataset, DatasetManifest)> {
    let manifest = read_manifest(dir)?;
    let classes = manifest.spec.classes();
    let mut samples = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let image_path: PathBuf = dir.join(&entry.image);
        let image = read_png(&image_path)?;
        let ann_path = dir.join(&entry.annotations);
        let annotations = read_annotations(&ann_path, classes)?;
        let (_, h, w) = image.dims3()?;
        for (k, a) in annotations.iter().enumerate() {
            let p = a.point;
            if !(p.x >= 0.0 && p.x < w as f64 && p.y >= 0.0 && p.y < h as f64) {
                return Err(Error::Parse {
                    path: ann_path.clone(),
                    line: k as u64 + 2,
                    message: format!("point ({}, {}) outside {w}x{h} image", p.x, p.y),
                });
            }
        }
        samples.push(Sample { image, annotations });
    }
    let dataset = Dataset {
        name: manifest.name.clone(),
        seed: manifest.seed,
        spec: manifest.spec.clone(),
        samples,
    };
    if dataset.nucleus_count() != manifest.n_nuclei {
        return Err(Error::Parse {
            path: dir.join(MANIFEST_FILE),
            line: 0,
            message: format!(
                "manifest lists {} nuclei but annotations hold {}",
                manifest.n_nuclei,
                dataset.nucleus_count()
            ),
        });
    }
    Ok((dataset, manifest))
}
