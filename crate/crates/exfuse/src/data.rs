//! Synthetic multi-class shapes dataset, its binary container, augmentation
//! and PPM export.
//!
//! Each non-background class is one shape family (disc, rectangle, triangle,
//! ring) drawn with a random position, target area and color, in random
//! z-order, over a random background with additive noise. Class is therefore
//! a function of geometry alone. A 1-pixel ignore rim around every object
//! exercises the loss's ignore path.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::randn;
use crate::tensor::{Labels, Shape, Tensor, IGNORE_LABEL};

pub const DATASET_MAGIC: &[u8; 4] = b"EXDS";
pub const DATASET_VERSION: u32 = 1;

/// Object area as a fraction of the image, uniform over this range.
pub const AREA_FRACTION: (f64, f64) = (0.02, 0.10);
/// Additive Gaussian pixel noise.
pub const NOISE_SIGMA: f64 = 0.05;
/// Objects per image, uniform over 1..=MAX_OBJECTS.
pub const MAX_OBJECTS: usize = 4;

/// One image with per-pixel class labels. Image values live in [0, 1],
/// channel-major `(3, h, w)`; labels are `[0, classes) ∪ {IGNORE_LABEL}`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub h: usize,
    pub w: usize,
    pub image: Vec<f64>,
    pub labels: Vec<u8>,
}

/// An in-memory dataset with its generation metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub size: usize,
    pub classes: usize,
    pub samples: Vec<SegSample>,
}

#[derive(Clone, Copy)]
enum ShapeKind {
    Disc,
    Rect,
    Triangle,
    Ring,
}

const KINDS: [ShapeKind; 4] = [ShapeKind::Disc, ShapeKind::Rect, ShapeKind::Triangle, ShapeKind::Ring];

struct Object {
    kind: ShapeKind,
    class: u8,
    cx: f64,
    cy: f64,
    // interpretation depends on kind: radii or half-extents
    a: f64,
    b: f64,
    color: [f64; 3],
}

impl Object {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.kind {
            ShapeKind::Disc => dx * dx + dy * dy <= self.a * self.a,
            ShapeKind::Rect => dx.abs() <= self.a && dy.abs() <= self.b,
            ShapeKind::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= self.a * self.a && d2 >= self.b * self.b
            }
            ShapeKind::Triangle => {
                // isoceles, apex up: a = half base, b = half height
                let t = (dy + self.b) / (2.0 * self.b);
                (0.0..=1.0).contains(&t) && dx.abs() <= self.a * t
            }
        }
    }

    /// Half extent of the bounding box, used to keep objects inside.
    fn extent(&self) -> f64 {
        match self.kind {
            ShapeKind::Disc | ShapeKind::Ring => self.a,
            ShapeKind::Rect => self.a.max(self.b),
            ShapeKind::Triangle => self.a.max(self.b),
        }
    }
}

/// Analytic expected painted area (pixels) of one object, before occlusion.
pub fn expected_object_area(size: usize) -> f64 {
    let lo = AREA_FRACTION.0 * (size * size) as f64;
    let hi = AREA_FRACTION.1 * (size * size) as f64;
    (lo + hi) / 2.0
}

fn sample_object(rng: &mut ChaCha8Rng, size: usize, classes: usize, bg: [f64; 3]) -> Object {
    let kinds = classes - 1;
    let kind_idx = rng.random_range(0..kinds);
    let kind = KINDS[kind_idx];
    let class = (kind_idx + 1) as u8;
    let s2 = (size * size) as f64;
    let area = (AREA_FRACTION.0 + rng.random::<f64>() * (AREA_FRACTION.1 - AREA_FRACTION.0)) * s2;
    let (a, b) = match kind {
        ShapeKind::Disc => {
            let r = (area / std::f64::consts::PI).sqrt();
            (r, r)
        }
        ShapeKind::Rect => {
            // aspect in [0.5, 2]; half extents keep width*height = area
            let aspect = 0.5 + rng.random::<f64>() * 1.5;
            let w = (area * aspect).sqrt();
            (w / 2.0, area / w / 2.0)
        }
        ShapeKind::Ring => {
            // inner radius is half the outer: painted area = 3/4 pi r^2
            let r = (area / (0.75 * std::f64::consts::PI)).sqrt();
            (r, r / 2.0)
        }
        ShapeKind::Triangle => {
            // height/base ratio in [0.6, 1.4]; base*height/2 = area
            let t = 0.6 + rng.random::<f64>() * 0.8;
            let base = (2.0 * area / t).sqrt();
            (base / 2.0, t * base / 2.0)
        }
    };
    let ext = a.max(b) + 1.0;
    let lo = ext;
    let hi = size as f64 - ext;
    let cx = lo + rng.random::<f64>() * (hi - lo).max(0.0);
    let cy = lo + rng.random::<f64>() * (hi - lo).max(0.0);
    // keep objects visible against the background
    let color = loop {
        let c = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        let dist = c
            .iter()
            .zip(bg.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if dist >= 0.25 {
            break c;
        }
    };
    Object {
        kind,
        class,
        cx,
        cy,
        a,
        b,
        color,
    }
}

fn gen_sample(rng: &mut ChaCha8Rng, size: usize, classes: usize) -> SegSample {
    let bg = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
    let count = rng.random_range(1..=MAX_OBJECTS);
    let objects: Vec<Object> = (0..count).map(|_| sample_object(rng, size, classes, bg)).collect();

    let mut image = vec![0.0; 3 * size * size];
    let mut labels = vec![0u8; size * size];
    for c in 0..3 {
        image[c * size * size..(c + 1) * size * size].fill(bg[c]);
    }
    // z-order is draw order: later objects occlude earlier ones
    for obj in &objects {
        let ext = obj.extent().ceil() as isize + 1;
        let (cx, cy) = (obj.cx as isize, obj.cy as isize);
        for y in (cy - ext).max(0)..(cy + ext + 1).min(size as isize) {
            for x in (cx - ext).max(0)..(cx + ext + 1).min(size as isize) {
                if obj.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    let p = y as usize * size + x as usize;
                    labels[p] = obj.class;
                    for c in 0..3 {
                        image[c * size * size + p] = obj.color[c];
                    }
                }
            }
        }
    }
    // 1-pixel ignore rim: background pixels touching any object
    let mut rim = Vec::new();
    for y in 0..size as isize {
        for x in 0..size as isize {
            let p = y as usize * size + x as usize;
            if labels[p] != 0 {
                continue;
            }
            'scan: for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny >= 0 && nx >= 0 && (ny as usize) < size && (nx as usize) < size {
                        let q = ny as usize * size + nx as usize;
                        if labels[q] != 0 && labels[q] != IGNORE_LABEL {
                            rim.push(p);
                            break 'scan;
                        }
                    }
                }
            }
        }
    }
    for p in rim {
        labels[p] = IGNORE_LABEL;
    }
    for v in &mut image {
        *v = (*v + NOISE_SIGMA * randn(rng)).clamp(0.0, 1.0);
    }
    SegSample {
        h: size,
        w: size,
        image,
        labels,
    }
}

/// Generate `count` samples, fully determined by `seed`. Per-sample rngs are
/// derived as `seed ^ index`, so generation is order- and worker-independent.
pub fn gen_synthetic(seed: u64, count: usize, size: usize, classes: usize) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
    }
    if classes > 1 + KINDS.len() {
        return Err(Error::Config(format!(
            "at most {} classes (one shape family per non-background class)",
            1 + KINDS.len()
        )));
    }
    if size < 16 {
        return Err(Error::Config(format!("size {size} is below the minimum of 16")));
    }
    let samples = (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ i as u64);
            gen_sample(&mut rng, size, classes)
        })
        .collect();
    Ok(Dataset {
        size,
        classes,
        samples,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stack a batch of samples into an image tensor and a label map.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Labels)> {
        let (h, w) = (self.size, self.size);
        let mut image = Vec::with_capacity(indices.len() * 3 * h * w);
        let mut labels = Vec::with_capacity(indices.len() * h * w);
        for &i in indices {
            let s = &self.samples[i];
            image.extend_from_slice(&s.image);
            labels.extend_from_slice(&s.labels);
        }
        Ok((
            Tensor::from_vec(Shape::new(indices.len(), 3, h, w), image)?,
            Labels::new(indices.len(), h, w, labels)?,
        ))
    }
}

/// Horizontal flip of one sample, image and labels together.
pub fn hflip(sample: &SegSample) -> SegSample {
    let (h, w) = (sample.h, sample.w);
    let mut image = vec![0.0; sample.image.len()];
    let mut labels = vec![0u8; sample.labels.len()];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                image[(c * h + y) * w + x] = sample.image[(c * h + y) * w + (w - 1 - x)];
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            labels[y * w + x] = sample.labels[y * w + (w - 1 - x)];
        }
    }
    SegSample {
        h,
        w,
        image,
        labels,
    }
}

/// Flip with probability `p`; image and labels stay aligned.
pub fn augment_with_prob(sample: &SegSample, p: f64, rng: &mut ChaCha8Rng) -> SegSample {
    if rng.random::<f64>() < p {
        hflip(sample)
    } else {
        sample.clone()
    }
}

/// Default augmentation: horizontal flip with probability 0.5.
pub fn augment(sample: &SegSample, rng: &mut ChaCha8Rng) -> SegSample {
    augment_with_prob(sample, 0.5, rng)
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read, path: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| truncated(path))?;
    Ok(u32::from_le_bytes(buf))
}

fn truncated(path: &str) -> Error {
    Error::Format {
        path: path.to_string(),
        detail: "truncated file".into(),
    }
}

/// Write the "EXDS" container: header, then per sample the image as u8 RGB
/// (`round(255·x)`, channel-major) and the labels as u8.
pub fn save_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    w.write_all(DATASET_MAGIC)?;
    put_u32(&mut w, DATASET_VERSION)?;
    put_u32(&mut w, ds.samples.len() as u32)?;
    put_u32(&mut w, ds.size as u32)?;
    put_u32(&mut w, ds.size as u32)?;
    put_u32(&mut w, ds.classes as u32)?;
    for s in &ds.samples {
        let bytes: Vec<u8> = s.image.iter().map(|&v| (255.0 * v).round() as u8).collect();
        w.write_all(&bytes)?;
        w.write_all(&s.labels)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let name = path.as_ref().display().to_string();
    let mut r = BufReader::new(File::open(path.as_ref())?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| truncated(&name))?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format {
            path: name,
            detail: format!("bad magic {magic:?}"),
        });
    }
    let version = get_u32(&mut r, &name)?;
    if version != DATASET_VERSION {
        return Err(Error::Format {
            path: name,
            detail: format!("unsupported version {version}"),
        });
    }
    let count = get_u32(&mut r, &name)? as usize;
    let h = get_u32(&mut r, &name)? as usize;
    let w = get_u32(&mut r, &name)? as usize;
    let classes = get_u32(&mut r, &name)? as usize;
    if h != w {
        return Err(Error::Format {
            path: name,
            detail: format!("non-square samples {h}x{w}"),
        });
    }
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let mut img = vec![0u8; 3 * h * w];
        r.read_exact(&mut img).map_err(|_| truncated(&name))?;
        let mut labels = vec![0u8; h * w];
        r.read_exact(&mut labels).map_err(|_| truncated(&name))?;
        for &l in &labels {
            if l != IGNORE_LABEL && l as usize >= classes {
                return Err(Error::Format {
                    path: name,
                    detail: format!("label {l} outside 0..{classes}"),
                });
            }
        }
        samples.push(SegSample {
            h,
            w,
            image: img.iter().map(|&b| b as f64 / 255.0).collect(),
            labels,
        });
    }
    // exactly at EOF
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Format {
            path: name,
            detail: "trailing bytes after last sample".into(),
        });
    }
    Ok(Dataset {
        size: h,
        classes,
        samples,
    })
}

/// Fixed 256-entry class palette (bit-interleaved, class 0 black).
pub fn class_color(class: u8) -> [u8; 3] {
    let mut c = [0u8; 3];
    let mut id = class as usize;
    for shift in 0..8 {
        c[0] |= (((id >> 0) & 1) as u8) << (7 - shift);
        c[1] |= (((id >> 1) & 1) as u8) << (7 - shift);
        c[2] |= (((id >> 2) & 1) as u8) << (7 - shift);
        id >>= 3;
    }
    c
}

/// Binary PPM (P6) with the exact header `P6\n{w} {h}\n255\n`.
pub fn write_ppm(path: impl AsRef<Path>, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != 3 * w * h {
        return Err(Error::shape("write_ppm", format!("{} bytes for {w}x{h}", rgb.len())));
    }
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P6\n{w} {h}\n255\n")?;
    f.write_all(rgb)?;
    f.flush()?;
    Ok(())
}

/// Export an image (interleaving the channel-major planes) as PPM.
pub fn export_image_ppm(path: impl AsRef<Path>, sample: &SegSample) -> Result<()> {
    let (h, w) = (sample.h, sample.w);
    let mut rgb = vec![0u8; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                rgb[(y * w + x) * 3 + c] =
                    (255.0 * sample.image[(c * h + y) * w + x]).round() as u8;
            }
        }
    }
    write_ppm(path, w, h, &rgb)
}

/// Export a label map as a paletted PPM.
pub fn export_labels_ppm(path: impl AsRef<Path>, h: usize, w: usize, labels: &[u8]) -> Result<()> {
    let mut rgb = vec![0u8; 3 * h * w];
    for (i, &l) in labels.iter().enumerate() {
        let c = class_color(l);
        rgb[i * 3..i * 3 + 3].copy_from_slice(&c);
    }
    write_ppm(path, w, h, &rgb)
}
