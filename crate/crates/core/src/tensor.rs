//! Dense row-major tensors and their on-disk format.
//!
//! The file format is a single JSON header line `{"shape":[...]}` followed by
//! the payload as little-endian `f32` values. Arithmetic is always done in
//! `f64`; the payload is narrowed on write.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    shape: Vec<usize>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("Tensor::new", expected, data.len()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("Tensor::from_rows", "equal row lengths", "ragged rows"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor::zeros(&other.shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading extent for a matrix-like tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of all trailing extents.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let w = self.row_len();
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim("Tensor::reshape", self.data.len(), n));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn check_shape(&self, context: &'static str, expected: &[usize]) -> Result<()> {
        if self.shape != expected {
            return Err(Error::dim(context, format!("{expected:?}"), format!("{:?}", self.shape)));
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = serde_json::to_string(&Header {
            shape: self.shape.clone(),
        })?;
        w.write_all(header.as_bytes())?;
        w.write_all(b"\n")?;
        let mut payload = Vec::with_capacity(self.data.len() * 4);
        for &x in &self.data {
            payload.extend_from_slice(&(x as f32).to_le_bytes());
        }
        w.write_all(&payload)?;
        Ok(())
    }

    pub fn read_from(r: impl Read, origin: &Path) -> Result<Self> {
        let mut reader = BufReader::new(r);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let header: Header = serde_json::from_str(line.trim_end()).map_err(|e| Error::Format {
            path: origin.to_path_buf(),
            reason: format!("bad header: {e}"),
        })?;
        let mut payload = Vec::new();
        reader.read_to_end(&mut payload)?;
        let n: usize = header.shape.iter().product();
        if payload.len() != n * 4 {
            return Err(Error::Format {
                path: origin.to_path_buf(),
                reason: format!("expected {} payload bytes, found {}", n * 4, payload.len()),
            });
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Tensor::new(header.shape, data).map_err(|e| Error::Format {
            path: origin.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path)?;
        Tensor::read_from(file, path)
    }
}

/// Manifest record of one tensor file in a saved directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

/// Write each tensor to `dir/<name>.bin`.
pub fn save_named(dir: &Path, named: &[(String, &Tensor)]) -> Result<Vec<TensorEntry>> {
    named
        .iter()
        .map(|(name, t)| {
            let file = format!("{name}.bin");
            t.save(&dir.join(&file))?;
            Ok(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                file,
            })
        })
        .collect()
}

/// Load the entry called `name`, checking its shape against the manifest.
pub fn load_named(dir: &Path, manifest: &Path, entries: &[TensorEntry], name: &str) -> Result<Tensor> {
    let fmt = |reason: String| Error::Format {
        path: manifest.to_path_buf(),
        reason,
    };
    let e = entries.iter().find(|e| e.name == name).ok_or_else(|| fmt(format!("missing tensor {name}")))?;
    let t = Tensor::load(&dir.join(&e.file))?;
    if t.shape() != e.shape.as_slice() {
        return Err(fmt(format!("tensor {name} has shape {:?}, manifest says {:?}", t.shape(), e.shape)));
    }
    Ok(t)
}
