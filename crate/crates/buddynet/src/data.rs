//! Dataset ingestion: a seeded synthetic texture corpus (so the whole
//! pipeline runs hermetically), plus loaders for uncompressed raster files
//! (P5/P6 portable pixmaps and the raw "BIMG" format) with a sidecar
//! manifest mapping ids to paths and labels.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::{GroundTruth, GroundTruthEntry};
use crate::rng::Rng;

/// Dense raster, row-major, channel-last, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(h: usize, w: usize, channels: usize) -> Self {
        Image { h, w, channels, pixels: vec![0.0; h * w * channels] }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.w + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.pixels[(y * self.w + x) * self.channels + c] = v;
    }
}

#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub id: String,
    pub image: Image,
    pub label: usize,
}

// ---------------------------------------------------------------------------
// synthetic corpus
// ---------------------------------------------------------------------------

/// Per-class oriented-sinusoid texture parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TextureParams {
    pub orientation: f64,
    pub frequency: f64,
    pub amplitude: f64,
}

#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub images_per_class: usize,
    pub image_side: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(n_classes: usize, images_per_class: usize, image_side: usize) -> Self {
        SyntheticSpec { n_classes, images_per_class, image_side, noise_sigma: 0.05, seed: 0 }
    }

    /// Texture family of one class; distinct classes get distinct parameters.
    pub fn class_texture(&self, class: usize) -> TextureParams {
        TextureParams {
            orientation: std::f64::consts::PI * class as f64 / self.n_classes as f64,
            frequency: 3.0 + 1.5 * (class % 3) as f64,
            amplitude: 0.35,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Validation(format!(
                "synthetic spec needs at least 2 classes, got {}",
                self.n_classes
            )));
        }
        if self.images_per_class < 2 {
            return Err(Error::Validation("need at least 2 images per class".into()));
        }
        if self.image_side < 4 {
            return Err(Error::Validation("image side must be at least 4".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Validation("noise sigma must be non-negative".into()));
        }
        Ok(())
    }

    pub fn queries_per_class(&self) -> usize {
        (self.images_per_class / 8).max(1)
    }

    pub fn train_per_class(&self) -> usize {
        let db = self.images_per_class - self.queries_per_class();
        db.min(((self.images_per_class * 3) / 8).max(2))
    }
}

/// A generated corpus: `train` is a subset of `database`; `queries` are held
/// out entirely. Ground truth marks every same-class database image as a
/// positive of each query (junk empty).
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub train: Vec<LabeledImage>,
    pub database: Vec<LabeledImage>,
    pub queries: Vec<LabeledImage>,
    pub ground_truth: GroundTruth,
}

pub fn synth_dataset(spec: &SyntheticSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = Rng::from_seed(spec.seed);
    let side = spec.image_side;
    let mut per_class: Vec<Vec<LabeledImage>> = Vec::with_capacity(spec.n_classes);
    for class in 0..spec.n_classes {
        let tex = spec.class_texture(class);
        let mut members = Vec::with_capacity(spec.images_per_class);
        for j in 0..spec.images_per_class {
            let phase = rng.range(0.0, 2.0 * std::f64::consts::PI);
            let dx = rng.range(0.0, side as f64);
            let dy = rng.range(0.0, side as f64);
            let mut image = Image::new(side, side, 1);
            for y in 0..side {
                for x in 0..side {
                    let proj = (x as f64 + dx) * tex.orientation.cos()
                        + (y as f64 + dy) * tex.orientation.sin();
                    let wave = (2.0 * std::f64::consts::PI * tex.frequency * proj / side as f64
                        + phase)
                        .sin();
                    let mut v = 0.5 + tex.amplitude * wave;
                    if spec.noise_sigma > 0.0 {
                        v += rng.normal_scaled(0.0, spec.noise_sigma);
                    }
                    image.set(y, x, 0, v.clamp(0.0, 1.0));
                }
            }
            members.push(LabeledImage {
                id: format!("c{class:03}_i{j:04}"),
                image,
                label: class,
            });
        }
        per_class.push(members);
    }

    let q = spec.queries_per_class();
    let t = spec.train_per_class();
    let mut train = Vec::new();
    let mut database = Vec::new();
    let mut queries = Vec::new();
    for members in per_class {
        for (j, img) in members.into_iter().enumerate() {
            if j < q {
                queries.push(img);
            } else {
                if j < q + t {
                    train.push(img.clone());
                }
                database.push(img);
            }
        }
    }

    let mut gt = BTreeMap::new();
    for query in &queries {
        let positives = database
            .iter()
            .filter(|d| d.label == query.label)
            .map(|d| d.id.clone())
            .collect();
        gt.insert(
            query.id.clone(),
            GroundTruthEntry { positives, junk: Default::default() },
        );
    }

    Ok(SynthDataset { train, database, queries, ground_truth: GroundTruth::from_map(gt)? })
}

/// Write a generated corpus to disk: BIMG images under `images/`, one
/// manifest per partition, and the ground-truth file.
pub fn write_dataset(dir: &Path, ds: &SynthDataset) -> Result<()> {
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir)?;
    let write_part = |name: &str, images: &[LabeledImage]| -> Result<()> {
        let mut entries = Vec::with_capacity(images.len());
        for img in images {
            let file = format!("{}.bimg", img.id);
            save_bimg(&images_dir.join(&file), &img.image)?;
            entries.push(ManifestEntry {
                id: img.id.clone(),
                path: PathBuf::from(format!("images/{file}")),
                label: img.label,
            });
        }
        write_manifest(&dir.join(format!("{name}.tsv")), &entries)
    };
    write_part("train", &ds.train)?;
    write_part("database", &ds.database)?;
    write_part("queries", &ds.queries)?;
    crate::eval::write_ground_truth(&dir.join("gt.txt"), &ds.ground_truth)
}

// ---------------------------------------------------------------------------
// raster file formats
// ---------------------------------------------------------------------------

const BIMG_MAGIC: &[u8; 4] = b"BIMG";
const BIMG_VERSION: u32 = 1;

/// Raw image format: magic "BIMG", version u32, h u32, w u32, channels u32,
/// then h*w*channels little-endian f64 pixels. Bit-exact round trip.
pub fn save_bimg(path: &Path, image: &Image) -> Result<()> {
    let mut out = Vec::with_capacity(20 + image.pixels.len() * 8);
    out.extend_from_slice(BIMG_MAGIC);
    out.extend_from_slice(&BIMG_VERSION.to_le_bytes());
    out.extend_from_slice(&(image.h as u32).to_le_bytes());
    out.extend_from_slice(&(image.w as u32).to_le_bytes());
    out.extend_from_slice(&(image.channels as u32).to_le_bytes());
    for v in &image.pixels {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format { what: path.display().to_string(), detail: detail.into() }
}

fn load_bimg(path: &Path, bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 20 {
        return Err(format_err(path, format!("header needs 20 bytes, file has {}", bytes.len())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != BIMG_VERSION {
        return Err(format_err(path, format!("unsupported BIMG version {version}")));
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let channels = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    let expected = 20 + h * w * channels * 8;
    if bytes.len() != expected {
        return Err(format_err(
            path,
            format!("expected {expected} bytes, got {}", bytes.len()),
        ));
    }
    let pixels = bytes[20..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Image { h, w, channels, pixels })
}

fn load_pnm(path: &Path, bytes: &[u8]) -> Result<Image> {
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        _ => unreachable!(),
    };
    // header tokens: width, height, maxval; comments start with '#'
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "malformed pnm header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| format_err(path, "malformed pnm header"))?;
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval == 0 || maxval > 65535 {
        return Err(format_err(path, format!("unsupported maxval {maxval}")));
    }
    // single whitespace byte separates header from payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(format_err(path, "missing header/payload separator"));
    }
    pos += 1;
    let bytes_per_sample = if maxval > 255 { 2 } else { 1 };
    let expected = pos + w * h * channels * bytes_per_sample;
    if bytes.len() != expected {
        return Err(format_err(
            path,
            format!("expected {expected} bytes, got {}", bytes.len()),
        ));
    }
    let payload = &bytes[pos..];
    let mut pixels = Vec::with_capacity(w * h * channels);
    if bytes_per_sample == 1 {
        pixels.extend(payload.iter().map(|&b| b as f64 / maxval as f64));
    } else {
        // big-endian per netpbm
        pixels.extend(
            payload
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / maxval as f64),
        );
    }
    Ok(Image { h, w, channels, pixels })
}

/// Load a raster file, dispatching on magic bytes (P5, P6, BIMG).
pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 {
        return Err(format_err(path, "file too short for any supported format"));
    }
    match &bytes[..2] {
        b"P5" | b"P6" => load_pnm(path, &bytes),
        _ if &bytes[..4] == BIMG_MAGIC => load_bimg(path, &bytes),
        _ => Err(format_err(path, "unsupported format (expected P5, P6, or BIMG)")),
    }
}

// ---------------------------------------------------------------------------
// manifest: id <TAB> path <TAB> label
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub label: usize,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&format!("{}\t{}\t{}\n", e.id, e.path.display(), e.label));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(id), Some(p), Some(label)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(format_err(path, format!("line {}: expected id\\tpath\\tlabel", lineno + 1)));
        };
        let label: usize = label
            .trim()
            .parse()
            .map_err(|_| format_err(path, format!("line {}: bad label {label:?}", lineno + 1)))?;
        entries.push(ManifestEntry { id: id.to_string(), path: PathBuf::from(p), label });
    }
    Ok(entries)
}

/// Load every image named by a manifest; relative paths resolve against the
/// manifest's directory. A missing file is a manifest miss.
pub fn load_labeled_images(manifest_path: &Path) -> Result<Vec<LabeledImage>> {
    let entries = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let full = if e.path.is_absolute() { e.path.clone() } else { base.join(&e.path) };
        if !full.exists() {
            return Err(Error::Format {
                what: manifest_path.display().to_string(),
                detail: format!("manifest miss: {} (for id {})", full.display(), e.id),
            });
        }
        out.push(LabeledImage { id: e.id, image: load_image(&full)?, label: e.label });
    }
    Ok(out)
}
