//! Labeled datasets, their on-disk formats and seeded synthetic generators.
//!
//! The binary container is one JSON header line followed by the raw payload:
//! `count × d` little-endian `f64` features in row-major order, then `count`
//! little-endian `u32` labels in `1..=K`. A `.csv` file holds one example per
//! row, features first and the 1-based label last; `#` starts a comment and
//! a non-numeric first row is read as a header.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::seed;
use crate::{Error, Result};

/// Features in `[0, 1]` and 0-based labels below `num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    features: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    d: usize,
    #[serde(rename = "K")]
    k: usize,
    count: usize,
    dtype: String,
    layout: String,
    #[serde(default = "default_label_type")]
    labels: String,
    #[serde(default)]
    name: String,
}

fn default_label_type() -> String {
    "u32".into()
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        features: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Dimension {
                expected: features.nrows(),
                found: labels.len(),
            });
        }
        if num_classes == 0 {
            return Err(Error::input("a dataset needs at least one class"));
        }
        if let Some((i, v)) = features
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            let d = features.ncols().max(1);
            return Err(Error::input(format!(
                "feature {v} at row {}, column {} is outside [0, 1]",
                i / d,
                i % d
            )));
        }
        if let Some((i, y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(Error::input(format!(
                "label {} at row {i} is outside 1..={num_classes}",
                y + 1
            )));
        }
        Ok(Self {
            name: name.into(),
            features,
            labels,
            num_classes,
        })
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// The first `n` examples (all of them if `n ≥ len`).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            name: self.name.clone(),
            features: self.features.slice(ndarray::s![..n, ..]).to_owned(),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
        }
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            features: self.features.select(Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Splits into the first `n` examples and the rest.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let rest: Vec<usize> = (n..self.len()).collect();
        (self.head(n), self.select(&rest))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if is_csv(path) {
            Self::from_csv(&fs::read_to_string(path)?, &stem(path))
        } else {
            Self::from_container(&fs::read(path)?, &stem(path))
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = if is_csv(path) {
            self.to_csv()?.into_bytes()
        } else {
            self.to_container()?
        };
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn to_container(&self) -> Result<Vec<u8>> {
        let header = Header {
            d: self.dim(),
            k: self.num_classes,
            count: self.len(),
            dtype: "f64".into(),
            layout: "row-major".into(),
            labels: "u32".into(),
            name: self.name.clone(),
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        out.reserve(self.len() * (8 * self.dim() + 4));
        for v in self.features.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &y in &self.labels {
            let y = u32::try_from(y + 1).map_err(|_| Error::input("label does not fit in u32"))?;
            out.extend_from_slice(&y.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_container(bytes: &[u8], fallback_name: &str) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::input("missing header line"))?;
        let header: Header = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| Error::input(format!("malformed header at byte {}: {e}", e.column())))?;
        if header.dtype != "f64" {
            return Err(Error::input(format!("unsupported dtype '{}'", header.dtype)));
        }
        if header.layout != "row-major" {
            return Err(Error::input(format!("unsupported layout '{}'", header.layout)));
        }
        if header.labels != "u32" {
            return Err(Error::input(format!("unsupported label type '{}'", header.labels)));
        }
        let payload = &bytes[nl + 1..];
        let feat_bytes = header
            .count
            .checked_mul(header.d)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::input("header sizes overflow"))?;
        let want = feat_bytes + 4 * header.count;
        if payload.len() != want {
            return Err(Error::input(format!(
                "payload at byte {} has {} bytes, header implies {want}",
                nl + 1,
                payload.len()
            )));
        }
        let features: Vec<f64> = payload[..feat_bytes]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut labels = Vec::with_capacity(header.count);
        for (i, c) in payload[feat_bytes..].chunks_exact(4).enumerate() {
            let y = u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize;
            if y == 0 || y > header.k {
                return Err(Error::input(format!(
                    "label {y} at byte {} is outside 1..={}",
                    nl + 1 + feat_bytes + 4 * i,
                    header.k
                )));
            }
            labels.push(y - 1);
        }
        let features = Array2::from_shape_vec((header.count, header.d), features)
            .map_err(|e| Error::input(e.to_string()))?;
        let name = if header.name.is_empty() {
            fallback_name.to_string()
        } else {
            header.name
        };
        Self::new(name, features, labels, header.k)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for (row, &y) in self.features.rows().into_iter().zip(&self.labels) {
            let mut rec: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            rec.push((y + 1).to_string());
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        String::from_utf8(bytes).map_err(|e| Error::input(e.to_string()))
    }

    /// Parses CSV text; `K` is the largest label present.
    pub fn from_csv(text: &str, name: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut labels: Vec<usize> = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let line = rec.position().map_or(i as u64 + 1, |p| p.line());
            let parsed: std::result::Result<Vec<f64>, _> =
                rec.iter().map(|f| f.parse::<f64>()).collect();
            let fields = match parsed {
                Ok(v) => v,
                Err(_) if rows.is_empty() && labels.is_empty() && i == 0 => continue,
                Err(e) => return Err(Error::input(format!("line {line}: {e}"))),
            };
            if fields.len() < 2 {
                return Err(Error::input(format!("line {line}: need features and a label")));
            }
            let (feat, label) = fields.split_at(fields.len() - 1);
            let y = label[0];
            if y.fract() != 0.0 || y < 1.0 {
                return Err(Error::input(format!("line {line}: label {y} must be an integer ≥ 1")));
            }
            if let Some(first) = rows.first() {
                if first.len() != feat.len() {
                    return Err(Error::input(format!(
                        "line {line}: {} features, expected {}",
                        feat.len(),
                        first.len()
                    )));
                }
            }
            if let Some(v) = feat.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::input(format!("line {line}: feature {v} outside [0, 1]")));
            }
            rows.push(feat.to_vec());
            labels.push(y as usize - 1);
        }
        if rows.is_empty() {
            return Err(Error::input("no examples"));
        }
        let d = rows[0].len();
        let k = labels.iter().max().expect("nonempty") + 1;
        let features = Array2::from_shape_vec((rows.len(), d), rows.concat())
            .map_err(|e| Error::input(e.to_string()))?;
        Self::new(name, features, labels, k)
    }
}

fn is_csv(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset")
        .to_string()
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Isotropic Gaussian blobs around `k` centers placed on a circle of
/// `radius` around `(0.5, 0.5)`, starting at 45°. Labels cycle `0, 1, …`.
pub fn blobs(n: usize, k: usize, radius: f64, spread: f64, seed_value: u64) -> Result<Dataset> {
    if k == 0 || !(spread >= 0.0) || !(radius >= 0.0) {
        return Err(Error::domain("blobs need k ≥ 1, radius ≥ 0 and spread ≥ 0"));
    }
    let mut rng = seed::rng(seed_value, seed::purpose::DATA, 0);
    let noise = Normal::new(0.0, spread).map_err(|e| Error::domain(e.to_string()))?;
    let mut features = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % k;
        let angle = std::f64::consts::FRAC_PI_4 + std::f64::consts::TAU * y as f64 / k as f64;
        features[[i, 0]] = clamp01(0.5 + radius * angle.cos() + noise.sample(&mut rng));
        features[[i, 1]] = clamp01(0.5 + radius * angle.sin() + noise.sample(&mut rng));
        labels.push(y);
    }
    Dataset::new("blobs", features, labels, k)
}

/// Two interleaved half circles, rescaled into the unit square.
pub fn two_moons(n: usize, noise: f64, seed_value: u64) -> Result<Dataset> {
    if !(noise >= 0.0) {
        return Err(Error::domain("noise must be nonnegative"));
    }
    let mut rng = seed::rng(seed_value, seed::purpose::DATA, 1);
    let jitter = Normal::new(0.0, noise).map_err(|e| Error::domain(e.to_string()))?;
    let mut features = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 2;
        let t = std::f64::consts::PI * rng.random::<f64>();
        let (x0, x1) = if y == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        features[[i, 0]] = clamp01((x0 + 1.0 + jitter.sample(&mut rng)) / 3.0);
        features[[i, 1]] = clamp01((x1 + 1.0 + jitter.sample(&mut rng)) / 3.0);
        labels.push(y);
    }
    Dataset::new("moons", features, labels, 2)
}

/// Noisy corners of the 16-dimensional unit cube, coordinates pulled to
/// `0.2`/`0.8`. The label is the XOR of the first two corner bits.
pub fn hypercube(n: usize, noise: f64, seed_value: u64) -> Result<Dataset> {
    const D: usize = 16;
    if !(noise >= 0.0) {
        return Err(Error::domain("noise must be nonnegative"));
    }
    let mut rng = seed::rng(seed_value, seed::purpose::DATA, 2);
    let jitter = Normal::new(0.0, noise).map_err(|e| Error::domain(e.to_string()))?;
    let mut features = Array2::zeros((n, D));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let bits: Vec<bool> = (0..D).map(|_| rng.random::<bool>()).collect();
        for (j, &b) in bits.iter().enumerate() {
            let c = if b { 0.8 } else { 0.2 };
            features[[i, j]] = clamp01(c + jitter.sample(&mut rng));
        }
        labels.push(usize::from(bits[0] ^ bits[1]));
    }
    Dataset::new("hypercube", features, labels, 2)
}
