//! Dataset generation and ingestion.
//!
//! Synthetic generators are deterministic in (name, n, noise, seed) down to
//! the byte. IDX files are parsed big-endian per the usual convention; CSV
//! expects a header row with the target in the last column.

use std::io::Read;
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::model::Targets;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub enum Task {
    /// k-way classification.
    Classification(usize),
    Regression,
}

/// A complete dataset with a deterministic 80/20 train/test split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub seed: u64,
    /// `[n, features]`
    pub inputs: Tensor,
    /// Class indices for classification.
    pub labels: Vec<usize>,
    /// `[n, out]` values for regression.
    pub values: Option<Tensor>,
    pub task: Task,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn num_classes(&self) -> usize {
        match self.task {
            Task::Classification(k) => k,
            Task::Regression => 0,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.task {
            Task::Classification(k) => k,
            Task::Regression => self.values.as_ref().map(|v| v.shape()[1]).unwrap_or(1),
        }
    }

    /// Materialize (inputs, targets) for a list of sample indices.
    pub fn gather(&self, idx: &[usize]) -> (Tensor, Targets) {
        let d = self.features();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&self.inputs.data()[i * d..(i + 1) * d]);
        }
        let inputs = Tensor::new(vec![idx.len(), d], data).expect("consistent dims");
        let targets = match self.task {
            Task::Classification(_) => Targets::Labels(idx.iter().map(|&i| self.labels[i]).collect()),
            Task::Regression => {
                let vals = self.values.as_ref().expect("regression dataset has values");
                let o = vals.shape()[1];
                let mut t = Vec::with_capacity(idx.len() * o);
                for &i in idx {
                    t.extend_from_slice(&vals.data()[i * o..(i + 1) * o]);
                }
                Targets::Values(Tensor::new(vec![idx.len(), o], t).expect("consistent dims"))
            }
        };
        (inputs, targets)
    }

    pub fn train_batch(&self) -> (Tensor, Targets) {
        self.gather(&self.train_idx)
    }

    pub fn test_batch(&self) -> (Tensor, Targets) {
        self.gather(&self.test_idx)
    }

    /// First `cap` training samples in canonical order: the fixed scoring
    /// batch shared by all criteria in one run.
    pub fn scoring_batch(&self, cap: usize) -> (Tensor, Targets) {
        let take: Vec<usize> = self.train_idx.iter().take(cap).cloned().collect();
        self.gather(&take)
    }

    fn finish(mut self) -> Self {
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = Rng::derive(self.seed, 0x511);
        rng.shuffle(&mut order);
        let split = (n * 4) / 5;
        self.train_idx = order[..split].to_vec();
        self.test_idx = order[split..].to_vec();
        self
    }
}

/// Build a named synthetic dataset: `two_moons`, `spirals`, or
/// `sine_regression`.
pub fn make_synthetic(name: &str, n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 10 {
        return Err(CoreError::Config(format!("dataset size {n} too small (min 10)")));
    }
    match name {
        "two_moons" => Ok(two_moons(n, noise, seed)),
        "spirals" => Ok(spirals(n, noise, seed)),
        "sine_regression" => Ok(sine_regression(n, noise, seed)),
        other => Err(CoreError::Config(format!("unknown dataset {other:?}"))),
    }
}

/// Two interleaved half circles: class 0 on the unit arc centered at the
/// origin, class 1 on the unit arc centered at (1, 0.5), mirrored.
pub fn two_moons(n: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = Rng::derive(seed, 1);
    let n0 = n / 2;
    let n1 = n - n0;
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n0 {
        let t = std::f64::consts::PI * i as f64 / (n0.max(2) - 1) as f64;
        data.push(t.cos() + noise * rng.normal());
        data.push(t.sin() + noise * rng.normal());
        labels.push(0);
    }
    for i in 0..n1 {
        let t = std::f64::consts::PI * i as f64 / (n1.max(2) - 1) as f64;
        data.push(1.0 - t.cos() + noise * rng.normal());
        data.push(0.5 - t.sin() + noise * rng.normal());
        labels.push(1);
    }
    Dataset {
        name: "two_moons".into(),
        seed,
        inputs: Tensor::new(vec![n, 2], data).expect("consistent dims"),
        labels,
        values: None,
        task: Task::Classification(2),
        train_idx: vec![],
        test_idx: vec![],
    }
    .finish()
}

/// Two interleaved Archimedean spirals.
pub fn spirals(n: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = Rng::derive(seed, 2);
    let n0 = n / 2;
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for class in 0..2usize {
        let nk = if class == 0 { n0 } else { n - n0 };
        for i in 0..nk {
            let t = i as f64 / (nk.max(2) - 1) as f64;
            let r = 0.1 + 0.9 * t;
            let angle = 2.5 * std::f64::consts::PI * t + class as f64 * std::f64::consts::PI;
            data.push(r * angle.cos() + noise * rng.normal());
            data.push(r * angle.sin() + noise * rng.normal());
            labels.push(class);
        }
    }
    Dataset {
        name: "spirals".into(),
        seed,
        inputs: Tensor::new(vec![n, 2], data).expect("consistent dims"),
        labels,
        values: None,
        task: Task::Classification(2),
        train_idx: vec![],
        test_idx: vec![],
    }
    .finish()
}

/// 1-D regression: x uniform in [-pi, pi], y = sin(x) + noise.
pub fn sine_regression(n: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = Rng::derive(seed, 3);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.uniform_range(-std::f64::consts::PI, std::f64::consts::PI);
        xs.push(x);
        ys.push(x.sin() + noise * rng.normal());
    }
    Dataset {
        name: "sine_regression".into(),
        seed,
        inputs: Tensor::new(vec![n, 1], xs).expect("consistent dims"),
        labels: vec![],
        values: Some(Tensor::new(vec![n, 1], ys).expect("consistent dims")),
        task: Task::Regression,
        train_idx: vec![],
        test_idx: vec![],
    }
    .finish()
}

// ---- IDX ---------------------------------------------------------------

/// Raw IDX tensor: shape plus values widened to f64.
#[derive(Debug)]
pub struct IdxTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

fn idx_type_size(code: u8) -> Option<(usize, &'static str)> {
    match code {
        0x08 => Some((1, "u8")),
        0x09 => Some((1, "i8")),
        0x0B => Some((2, "i16")),
        0x0C => Some((4, "i32")),
        0x0D => Some((4, "f32")),
        0x0E => Some((8, "f64")),
        _ => None,
    }
}

/// Parse an IDX file (big-endian magic, dims, payload).
pub fn parse_idx(bytes: &[u8]) -> Result<IdxTensor> {
    if bytes.len() < 4 {
        return Err(CoreError::Format {
            offset: 0,
            reason: format!("IDX header needs 4 bytes, file has {}", bytes.len()),
        });
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(CoreError::Format {
            offset: 0,
            reason: format!("bad IDX magic bytes {:02x} {:02x}", bytes[0], bytes[1]),
        });
    }
    let (width, _name) = idx_type_size(bytes[2]).ok_or(CoreError::Format {
        offset: 2,
        reason: format!("unknown IDX type code 0x{:02x}", bytes[2]),
    })?;
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(CoreError::Format {
            offset: bytes.len() as u64,
            reason: format!("IDX header truncated: expected {header} bytes, got {}", bytes.len()),
        });
    }
    let mut shape = Vec::with_capacity(ndim);
    for d in 0..ndim {
        let o = 4 + 4 * d;
        shape.push(u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize);
    }
    let count: usize = shape.iter().product();
    let expected = header + count * width;
    if bytes.len() != expected {
        return Err(CoreError::Format {
            offset: bytes.len() as u64,
            reason: format!(
                "IDX payload truncated: expected {expected} bytes total, got {}",
                bytes.len()
            ),
        });
    }
    let payload = &bytes[header..];
    let values: Vec<f64> = match bytes[2] {
        0x08 => payload.iter().map(|&b| b as f64).collect(),
        0x09 => payload.iter().map(|&b| b as i8 as f64).collect(),
        0x0B => payload
            .chunks_exact(2)
            .map(|c| i16::from_be_bytes([c[0], c[1]]) as f64)
            .collect(),
        0x0C => payload
            .chunks_exact(4)
            .map(|c| i32::from_be_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        0x0D => payload
            .chunks_exact(4)
            .map(|c| f32::from_be_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        0x0E => payload
            .chunks_exact(8)
            .map(|c| f64::from_be_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect(),
        _ => unreachable!("validated above"),
    };
    Ok(IdxTensor { shape, values })
}

pub fn load_idx_tensor(path: &Path) -> Result<IdxTensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_idx(&bytes)
}

/// Load an images/labels IDX pair as a classification dataset. Image
/// values are scaled into [0, 1].
pub fn load_idx(images_path: &Path, labels_path: &Path, seed: u64) -> Result<Dataset> {
    let images = load_idx_tensor(images_path)?;
    let labels = load_idx_tensor(labels_path)?;
    if images.shape.is_empty() || labels.shape.len() != 1 {
        return Err(CoreError::Data(
            "IDX pair must be images [n, ...] and labels [n]".into(),
        ));
    }
    let n = images.shape[0];
    if labels.shape[0] != n {
        return Err(CoreError::Data(format!(
            "IDX pair mismatch: {n} images vs {} labels",
            labels.shape[0]
        )));
    }
    let d: usize = images.shape[1..].iter().product();
    let inputs: Vec<f64> = images.values.iter().map(|v| v / 255.0).collect();
    let labels: Vec<usize> = labels
        .values
        .iter()
        .map(|&v| {
            if v < 0.0 || v.fract() != 0.0 {
                Err(CoreError::Data(format!("non-integer label {v}")))
            } else {
                Ok(v as usize)
            }
        })
        .collect::<Result<_>>()?;
    let k = labels.iter().max().map_or(0, |m| m + 1);
    Ok(Dataset {
        name: "idx".into(),
        seed,
        inputs: Tensor::new(vec![n, d], inputs)?,
        labels,
        values: None,
        task: Task::Classification(k),
        train_idx: vec![],
        test_idx: vec![],
    }
    .finish())
}

// ---- CSV ---------------------------------------------------------------

/// Load a UTF-8 CSV with a header row; features in all columns but the
/// last, target in the last column.
pub fn load_csv(path: &Path, task: Task, seed: u64) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text, task, seed)
}

pub fn parse_csv(text: &str, task: Task, seed: u64) -> Result<Dataset> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| CoreError::Data("CSV is empty".into()))?;
    let cols = header.split(',').count();
    if cols < 2 {
        return Err(CoreError::Data("CSV needs at least one feature column and a target".into()));
    }
    let d = cols - 1;
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut n = 0usize;
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols {
            return Err(CoreError::Data(format!(
                "CSV row {} has {} fields, header has {cols}",
                lineno + 2,
                fields.len()
            )));
        }
        for f in &fields[..d] {
            inputs.push(f.trim().parse::<f64>().map_err(|e| {
                CoreError::Data(format!("CSV row {}: bad number {f:?}: {e}", lineno + 2))
            })?);
        }
        let target = fields[d].trim();
        match task {
            Task::Classification(_) => {
                labels.push(target.parse::<usize>().map_err(|e| {
                    CoreError::Data(format!("CSV row {}: bad label {target:?}: {e}", lineno + 2))
                })?);
            }
            Task::Regression => {
                values.push(target.parse::<f64>().map_err(|e| {
                    CoreError::Data(format!("CSV row {}: bad target {target:?}: {e}", lineno + 2))
                })?);
            }
        }
        n += 1;
    }
    let task = match task {
        Task::Classification(_) => {
            let k = labels.iter().max().map_or(0, |m| m + 1);
            Task::Classification(k)
        }
        t => t,
    };
    Ok(Dataset {
        name: "csv".into(),
        seed,
        inputs: Tensor::new(vec![n, d], inputs)?,
        labels,
        values: match task {
            Task::Regression => Some(Tensor::new(vec![n, 1], values)?),
            _ => None,
        },
        task,
        train_idx: vec![],
        test_idx: vec![],
    }
    .finish())
}
