//! Dense row-major tensors.
//!
//! Image-like tensors use the channels-last layout `[batch][H][W][C]`, so a
//! single-channel map broadcasts against a multi-channel tensor with unit
//! stride along the channel axis.

use std::fmt;
use std::iter::Sum;

use num_traits::Float;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::wire::{ByteReader, ByteWriter};

/// Scalar types a [`Tensor`] can hold.
pub trait Real:
    Float + Default + fmt::Debug + fmt::Display + Sum + Send + Sync + 'static
{
    /// Code used by the binary tensor format.
    const DTYPE: u8;
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: u8 = 0;
    const BYTES: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: u8 = 1;
    const BYTES: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// How a new tensor is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Fill(f64),
    /// Uniform in `[-bound, bound)` from a seeded ChaCha stream.
    Uniform { bound: f64, seed: u64 },
    /// Zero-mean normal with the given standard deviation.
    Normal { std: f64, seed: u64 },
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], init: Init) -> Result<Self> {
        let len = check_shape(shape)?;
        let data = match init {
            Init::Fill(v) => vec![T::from_f64(v); len],
            Init::Uniform { bound, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..len)
                    .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
                    .collect()
            }
            Init::Normal { std, seed } => {
                use rand_distr::{Distribution, StandardNormal};
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..len)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        T::from_f64(z * std)
                    })
                    .collect()
            }
        };
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape, Init::Fill(0.0))
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        Self::new(shape, Init::Fill(value))
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return Err(Error::BufferLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    pub fn from_f64_slice(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as a trainable leaf and allocates a zeroed gradient.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![T::zero(); self.data.len()]);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    /// `grad += delta`. Allocates the buffer on first use.
    pub fn accumulate_grad(&mut self, delta: &[T]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::BufferLength {
                shape: self.shape.clone(),
                len: delta.len(),
            });
        }
        let grad = self
            .grad
            .get_or_insert_with(|| vec![T::zero(); delta.len()]);
        for (g, &d) in grad.iter_mut().zip(delta) {
            *g = *g + d;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                debug_assert!(i < d);
                acc * d + i
            })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        )
    }

    /// Copies out one leading-axis slice (e.g. one sample of a batch).
    pub fn index_first(&self, i: usize) -> Tensor<T> {
        let inner: usize = self.shape[1..].iter().product();
        let shape = if self.shape.len() == 1 {
            vec![1]
        } else {
            self.shape[1..].to_vec()
        };
        Tensor::from_parts(shape, self.data[i * inner..(i + 1) * inner].to_vec())
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    lhs: first.shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self::from_parts(shape, data))
    }

    /// Appends the WSBT encoding: magic, dtype, rank, u32 dims, raw scalars.
    pub fn write_wsbt(&self, out: &mut ByteWriter) {
        out.bytes(b"WSBT");
        out.u8(T::DTYPE);
        out.u8(self.shape.len() as u8);
        for &d in &self.shape {
            out.u32(d as u32);
        }
        let buf = out.buf_mut();
        buf.reserve(self.data.len() * T::BYTES);
        for &v in &self.data {
            v.write_le(buf);
        }
    }

    pub fn to_wsbt_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        self.write_wsbt(&mut w);
        w.into_inner()
    }

    pub fn read_wsbt(r: &mut ByteReader<'_>) -> Result<Self> {
        r.expect_magic(b"WSBT")?;
        let at = r.offset();
        let dtype = r.u8()?;
        if dtype != T::DTYPE {
            return Err(Error::Format {
                offset: at,
                message: format!("dtype code {dtype}, expected {}", T::DTYPE),
            });
        }
        let rank = r.u8()? as usize;
        let at = r.offset();
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let len = check_shape(&shape).map_err(|_| Error::Format {
            offset: at,
            message: format!("invalid tensor shape {shape:?}"),
        })?;
        let raw = r.take(len * T::BYTES)?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        Ok(Self::from_parts(shape, data))
    }

    pub fn from_wsbt_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_wsbt(&mut ByteReader::new(bytes))
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:?}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}
