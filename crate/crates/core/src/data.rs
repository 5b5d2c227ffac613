//! Datasets: synthetic generators, corruption, stratified splitting, and the
//! IDX / CSV readers.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, format_err, Error, Result};
use crate::linalg::Matrix;

/// Feature matrix with integer labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    x: Matrix,
    y: Vec<usize>,
    num_classes: usize,
    name: String,
    /// Set for generated out-of-distribution sets whose labels carry no meaning.
    pub is_ood: bool,
}

impl LabeledDataset {
    pub fn new(
        x: Matrix,
        y: Vec<usize>,
        num_classes: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        if x.rows() != y.len() {
            return domain(format!("{} feature rows but {} labels", x.rows(), y.len()));
        }
        if !x.is_finite() {
            return domain("dataset contains NaN or infinite features");
        }
        if let Some(bad) = y.iter().find(|&&l| l >= num_classes) {
            return domain(format!(
                "label {bad} out of range for {num_classes} classes"
            ));
        }
        Ok(Self {
            x,
            y,
            num_classes,
            name: name.into(),
            is_ood: false,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.x
    }

    pub fn labels(&self) -> &[usize] {
        &self.y
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        (self.x.row(i), self.y[i])
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.y {
            counts[l] += 1;
        }
        counts
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.x.row(i));
        }
        Self {
            x: Matrix::from_vec(indices.len(), d, data).expect("subset shape"),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            num_classes: self.num_classes,
            name: self.name.clone(),
            is_ood: self.is_ood,
        }
    }

    /// Per-dimension bounding box `(min, max)`.
    pub fn bounds(&self) -> Vec<(f64, f64)> {
        (0..self.dim())
            .map(|j| {
                self.x
                    .iter_rows()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
                        (lo.min(r[j]), hi.max(r[j]))
                    })
            })
            .collect()
    }
}

/// Two interleaved half circles, `n / 2` points per class.
///
/// Class 0 lies on `(cos t, sin t)` and class 1 on `(1 − cos t, 0.5 − sin t)`
/// for `t` evenly spaced over `[0, π]`, plus isotropic Gaussian noise.
pub fn two_moons(n: usize, noise_std: f64, seed: u64) -> Result<LabeledDataset> {
    if n < 2 || n % 2 != 0 {
        return domain(format!("two_moons needs an even n ≥ 2, got {n}"));
    }
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return domain(format!("noise_std must be non-negative, got {noise_std}"));
    }
    let half = n / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::Domain(e.to_string()))?;
    let mut data = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for class in 0..2 {
        for i in 0..half {
            let t = if half == 1 {
                0.0
            } else {
                std::f64::consts::PI * i as f64 / (half - 1) as f64
            };
            let (px, py) = if class == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            data.push(px + noise.sample(&mut rng));
            data.push(py + noise.sample(&mut rng));
            y.push(class);
        }
    }
    LabeledDataset::new(Matrix::from_vec(n, 2, data)?, y, 2, "two_moons")
}

/// Isotropic Gaussian blobs, one per class, centred on `centers`.
pub fn gaussian_blobs(
    n_per_class: usize,
    centers: &[Vec<f64>],
    std: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    let d = centers.first().map_or(0, Vec::len);
    if centers.len() < 2 || d == 0 || centers.iter().any(|c| c.len() != d) {
        return domain("gaussian_blobs needs at least two centers of equal, non-zero dimension");
    }
    if n_per_class == 0 || !(std > 0.0) {
        return domain("gaussian_blobs needs n_per_class ≥ 1 and std > 0");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, std).map_err(|e| Error::Domain(e.to_string()))?;
    let mut data = Vec::with_capacity(n_per_class * centers.len() * d);
    let mut y = Vec::new();
    for (class, c) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            data.extend(c.iter().map(|m| m + noise.sample(&mut rng)));
            y.push(class);
        }
    }
    LabeledDataset::new(
        Matrix::from_vec(y.len(), d, data)?,
        y,
        centers.len(),
        "gaussian_blobs",
    )
}

/// I.i.d. uniform samples inside the per-dimension `bounds`; labels are all 0.
pub fn uniform_ood(n: usize, bounds: &[(f64, f64)], seed: u64) -> Result<LabeledDataset> {
    if bounds.is_empty() {
        return domain("uniform_ood needs at least one dimension");
    }
    if let Some((lo, hi)) = bounds
        .iter()
        .find(|(lo, hi)| !(lo < hi) || !lo.is_finite() || !hi.is_finite())
    {
        return domain(format!("invalid bounds [{lo}, {hi}]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * bounds.len());
    for _ in 0..n {
        for &(lo, hi) in bounds {
            data.push(rng.gen_range(lo..hi));
        }
    }
    let mut ds = LabeledDataset::new(
        Matrix::from_vec(n, bounds.len(), data)?,
        vec![0; n],
        1,
        "uniform_ood",
    )?;
    ds.is_ood = true;
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    Rotation,
    PixelDropout,
}

impl std::str::FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_noise" => Ok(Self::GaussianNoise),
            "rotation" => Ok(Self::Rotation),
            "pixel_dropout" => Ok(Self::PixelDropout),
            other => domain(format!("unknown corruption kind {other:?}")),
        }
    }
}

impl std::fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::GaussianNoise => "gaussian_noise",
            Self::Rotation => "rotation",
            Self::PixelDropout => "pixel_dropout",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    kind: CorruptionKind,
    severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return domain(format!(
                "corruption severity must be in 1..=5, got {severity}"
            ));
        }
        Ok(Self { kind, severity })
    }

    pub fn kind(&self) -> CorruptionKind {
        self.kind
    }

    pub fn severity(&self) -> u8 {
        self.severity
    }
}

/// Applies a severity-scaled corruption to the inputs; labels are untouched.
pub fn corrupt(ds: &LabeledDataset, spec: CorruptionSpec, seed: u64) -> Result<LabeledDataset> {
    let sev = f64::from(spec.severity);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = (ds.len(), ds.dim());
    let mut x = ds.x.clone();
    match spec.kind {
        CorruptionKind::GaussianNoise => {
            let stds = column_std(&ds.x);
            let unit = Normal::new(0.0, 1.0).expect("unit normal");
            for i in 0..n {
                for (v, s) in x.row_mut(i).iter_mut().zip(&stds) {
                    *v += 0.04 * sev * s * unit.sample(&mut rng);
                }
            }
        }
        CorruptionKind::Rotation => {
            if d != 2 {
                return domain(format!("rotation corruption needs 2-D inputs, got D = {d}"));
            }
            let (cx, cy) = centroid2(&ds.x);
            let theta = (6.0 * sev).to_radians();
            let (sin, cos) = theta.sin_cos();
            for i in 0..n {
                let r = x.row_mut(i);
                let (px, py) = (r[0] - cx, r[1] - cy);
                r[0] = cx + cos * px - sin * py;
                r[1] = cy + sin * px + cos * py;
            }
        }
        CorruptionKind::PixelDropout => {
            let total = n * d;
            let k = ((0.05 * sev * total as f64).round() as usize).min(total);
            let cells = x.as_mut_slice();
            for idx in sample(&mut rng, total, k) {
                cells[idx] = 0.0;
            }
        }
    }
    let mut out = LabeledDataset::new(
        x,
        ds.y.clone(),
        ds.num_classes,
        format!("{}+{:?}{}", ds.name, spec.kind, spec.severity),
    )?;
    out.is_ood = ds.is_ood;
    Ok(out)
}

fn column_std(x: &Matrix) -> Vec<f64> {
    let n = x.rows() as f64;
    (0..x.cols())
        .map(|j| {
            let mean = x.iter_rows().map(|r| r[j]).sum::<f64>() / n;
            (x.iter_rows().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect()
}

fn centroid2(x: &Matrix) -> (f64, f64) {
    let n = x.rows() as f64;
    let (sx, sy) = x
        .iter_rows()
        .fold((0.0, 0.0), |(a, b), r| (a + r[0], b + r[1]));
    (sx / n, sy / n)
}

/// Seeded, class-stratified split into `(train, holdout)`; `ratio` is the
/// train fraction within every class.
pub fn split(
    ds: &LabeledDataset,
    ratio: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return domain(format!("split ratio must lie in (0, 1), got {ratio}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for (i, &l) in ds.y.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut train = Vec::new();
    let mut hold = Vec::new();
    for mut idx in by_class {
        idx.shuffle(&mut rng);
        let k = (ratio * idx.len() as f64).round() as usize;
        train.extend_from_slice(&idx[..k]);
        hold.extend_from_slice(&idx[k..]);
    }
    if train.is_empty() || hold.is_empty() {
        return domain(format!(
            "ratio {ratio} leaves an empty split of {} samples",
            ds.len()
        ));
    }
    train.shuffle(&mut rng);
    hold.shuffle(&mut rng);
    Ok((ds.subset(&train), ds.subset(&hold)))
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Reads an IDX image/label pair, flattening images and scaling pixels to `[0, 1]`.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<LabeledDataset> {
    let images = fs::read(images_path.as_ref())?;
    let labels = fs::read(labels_path.as_ref())?;
    let name = images_path
        .as_ref()
        .file_stem()
        .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    parse_idx(&images, &labels, name)
}

/// Parses in-memory IDX image and label buffers.
pub fn parse_idx(images: &[u8], labels: &[u8], name: impl Into<String>) -> Result<LabeledDataset> {
    let mut img = ByteReader::new(images);
    let magic = img.u32()?;
    if magic != IDX_IMAGES {
        return Err(format_err(
            0,
            format!("image magic {magic:#010x}, expected {IDX_IMAGES:#010x}"),
        ));
    }
    let n = img.u32()? as usize;
    let rows = img.u32()? as usize;
    let cols = img.u32()? as usize;
    let d = rows * cols;
    let pixels = img.take(n * d)?;

    let mut lab = ByteReader::new(labels);
    let magic = lab.u32()?;
    if magic != IDX_LABELS {
        return Err(format_err(
            0,
            format!("label magic {magic:#010x}, expected {IDX_LABELS:#010x}"),
        ));
    }
    let count_offset = lab.pos as u64;
    let m = lab.u32()? as usize;
    if m != n {
        return Err(format_err(
            count_offset,
            format!("label count {m} does not match image count {n}"),
        ));
    }
    let y: Vec<usize> = lab.take(m)?.iter().map(|&b| usize::from(b)).collect();
    let num_classes = y.iter().max().map_or(2, |&m| (m + 1).max(2));
    let x = Matrix::from_vec(n, d, pixels.iter().map(|&p| f64::from(p) / 255.0).collect())?;
    LabeledDataset::new(x, y, num_classes, name)
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, k: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(k)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                format_err(
                    self.buf.len() as u64,
                    format!(
                        "truncated: needed {k} bytes at offset {}, file has {}",
                        self.pos,
                        self.buf.len()
                    ),
                )
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Reads a CSV with header `x0,...,x{D-1},label`.
///
/// The class count is one more than the largest label seen.
pub fn read_csv(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| format_err(0, "empty CSV file"))?;
    let cols: Vec<&str> = header.trim().split(',').collect();
    let d = cols.len().saturating_sub(1);
    let expected: Vec<String> = (0..d)
        .map(|j| format!("x{j}"))
        .chain(["label".to_string()])
        .collect();
    if d == 0 || cols != expected {
        return Err(format_err(
            0,
            format!("CSV header must be x0,...,x{{D-1}},label; got {header:?}"),
        ));
    }
    let mut offset = header.len() as u64 + 1;
    let mut data = Vec::new();
    let mut y = Vec::new();
    for line in lines {
        let line = line?;
        let here = offset;
        offset += line.len() as u64 + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 1 {
            return Err(format_err(
                here,
                format!("expected {} fields, got {}", d + 1, fields.len()),
            ));
        }
        for f in &fields[..d] {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| format_err(here, format!("bad float {f:?}")))?;
            data.push(v);
        }
        let l: usize = fields[d]
            .trim()
            .parse()
            .map_err(|_| format_err(here, format!("bad label {:?}", fields[d])))?;
        y.push(l);
    }
    let num_classes = y.iter().max().map_or(1, |&m| m + 1);
    let name = path
        .file_stem()
        .map_or_else(|| "csv".to_string(), |s| s.to_string_lossy().into_owned());
    LabeledDataset::new(Matrix::from_vec(y.len(), d, data)?, y, num_classes, name)
}

/// Writes the CSV layout read by [`read_csv`]. Floats use Rust's shortest
/// round-trip formatting, so a write/read cycle is lossless.
pub fn write_csv(ds: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    let header: Vec<String> = (0..ds.dim()).map(|j| format!("x{j}")).collect();
    writeln!(out, "{},label", header.join(","))?;
    for (row, l) in ds.x.iter_rows().zip(&ds.y) {
        for v in row {
            write!(out, "{v},")?;
        }
        writeln!(out, "{l}")?;
    }
    out.flush()?;
    Ok(())
}
