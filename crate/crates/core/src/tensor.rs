//! Dense 4-D tensors in batch/channel/height/width order.

use rand::Rng;

use crate::error::{Error, Result};

/// `(n, c, h, w)`.
pub type Shape = [usize; 4];

/// Contiguous NCHW buffer of `f64`.
///
/// Tensors are plain values; the autodiff tape wraps them in `Arc` and never
/// mutates a recorded tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

pub fn numel(shape: Shape) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != numel(shape) {
            return Err(Error::dim(
                "tensor",
                "data",
                format!(
                    "shape {shape:?} needs {} elements, got {}",
                    numel(shape),
                    data.len()
                ),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; numel(shape)],
        }
    }

    /// Builds a tensor by evaluating `f` at every `(n, c, h, w)` index.
    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> f64) -> Self {
        let mut data = Vec::with_capacity(numel(shape));
        for n in 0..shape[0] {
            for c in 0..shape[1] {
                for h in 0..shape[2] {
                    for w in 0..shape[3] {
                        data.push(f([n, c, h, w]));
                    }
                }
            }
        }
        Self { shape, data }
    }

    /// 1-D vector stored as `(1, len, 1, 1)`, the layout used for biases and norm affine terms.
    pub fn vector(values: Vec<f64>) -> Self {
        Self {
            shape: [1, values.len(), 1, 1],
            data: values,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: [1, 1, 1, 1],
            data: vec![value],
        }
    }

    pub fn uniform(shape: Shape, low: f64, high: f64, rng: &mut impl Rng) -> Self {
        let data = (0..numel(shape))
            .map(|_| rng.gen_range(low..high))
            .collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn at(&self, idx: [usize; 4]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: [usize; 4], value: f64) {
        let off = self.offset(idx);
        self.data[off] = value;
    }

    fn offset(&self, [n, c, h, w]: [usize; 4]) -> usize {
        let [_, cs, hs, ws] = self.shape;
        ((n * cs + c) * hs + h) * ws + w
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::Contract(format!(
                "item() on a tensor of shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::dim(
                "reshape",
                "numel",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Contiguous `h*w` plane for `(n, c)`.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    /// Extracts batch items `range` as a new tensor.
    pub fn batch_slice(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.shape[0] {
            return Err(Error::dim(
                "batch_slice",
                "n",
                format!("{start}..{end} out of 0..{}", self.shape[0]),
            ));
        }
        let per = numel(self.shape) / self.shape[0].max(1);
        let [_, c, h, w] = self.shape;
        Ok(Self {
            shape: [end - start, c, h, w],
            data: self.data[start * per..end * per].to_vec(),
        })
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Contract("stack of zero tensors".into()))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.iter().map(Tensor::numel).sum());
        let mut n = 0;
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::dim(
                    "stack",
                    "chw",
                    format!("{:?} vs {:?}", t.shape, first.shape),
                ));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Self {
            shape: [n, c, h, w],
            data,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}
