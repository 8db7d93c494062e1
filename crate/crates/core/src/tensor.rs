//! Dense row-major `f32` tensors and the fixture file format.
//!
//! Fixture files are a single UTF-8 JSON header line
//! `{"shape":[...],"dtype":"f32"}` followed by `\n` and the little-endian
//! `f32` payload.

use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                "data length",
                format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(
                "reshape",
                "element count",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(B, C, H, W)` of a rank-4 tensor.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(Error::shape(
                op,
                "rank",
                format!("expected [B,C,H,W], got {:?}", self.shape),
            )),
        }
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(
                op,
                "rank",
                format!("expected a matrix, got {:?}", self.shape),
            )),
        }
    }

    /// Number of elements in one slice along the leading axis.
    pub fn row_len(&self) -> usize {
        if self.shape.is_empty() || self.shape[0] == 0 {
            return 0;
        }
        self.data.len() / self.shape[0]
    }

    /// The `i`-th slice along the leading axis, as a tensor with the
    /// leading axis dropped.
    pub fn index_row(&self, i: usize) -> Tensor {
        let n = self.row_len();
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * n..(i + 1) * n].to_vec(),
        }
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack", "count", "nothing to stack"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape(
                    "stack",
                    "item shape",
                    format!("{:?} vs {:?}", t.shape, first.shape),
                ));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn write_fixture<W: Write>(&self, mut out: W) -> Result<()> {
        let header = FixtureHeader {
            shape: self.shape.clone(),
            dtype: "f32".to_string(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        write_f32_le(&mut out, &self.data)?;
        Ok(())
    }

    pub fn read_fixture<R: BufRead>(mut input: R) -> Result<Tensor> {
        let mut line = String::new();
        input.read_line(&mut line)?;
        let header: FixtureHeader = serde_json::from_str(line.trim_end())?;
        if header.dtype != "f32" {
            return Err(Error::Format(format!("unsupported dtype {}", header.dtype)));
        }
        let numel: usize = header.shape.iter().product();
        let data = read_f32_le(&mut input, numel)?;
        Tensor::new(header.shape, data)
    }
}

#[derive(Serialize, Deserialize)]
struct FixtureHeader {
    shape: Vec<usize>,
    dtype: String,
}

pub(crate) fn write_f32_le<W: Write>(out: &mut W, values: &[f32]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)
}

pub(crate) fn read_f32_le<R: Read>(input: &mut R, count: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; count * 4];
    input.read_exact(&mut buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("payload truncated, expected {count} f32 values"))
        } else {
            Error::Io(e)
        }
    })?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}
