use crate::error::{dim_err, Error, Result};

/// Dense row-major `f64` array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return dim_err(format!("dims {dims:?} need {expected} elements, got {}", data.len()));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: (0..n).map(&mut f).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(&[1], value)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.data.len() {
            return dim_err(format!(
                "gradient of length {} for tensor with {} elements",
                delta.len(),
                self.data.len()
            ));
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        self.dims = dims.to_vec();
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), n);
        }
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies out item `index` along the leading axis.
    pub fn slice_leading(&self, index: usize) -> Result<Tensor> {
        self.slice_leading_range(index, index + 1)
    }

    /// Copies rows `start..end` of the leading axis into a new tensor.
    pub fn slice_leading_range(&self, start: usize, end: usize) -> Result<Tensor> {
        if self.dims.is_empty() || start >= end || end > self.dims[0] {
            return dim_err(format!(
                "leading range {start}..{end} out of bounds for {:?}",
                self.dims
            ));
        }
        let stride: usize = self.dims[1..].iter().product();
        let mut dims = self.dims.clone();
        dims[0] = end - start;
        Tensor::new(&dims, self.data[start * stride..end * stride].to_vec())
    }

    /// Gathers the listed leading-axis items, in order, into a new tensor.
    pub fn gather_leading(&self, indices: &[usize]) -> Result<Tensor> {
        if indices.is_empty() {
            return dim_err("empty gather");
        }
        let stride: usize = self.dims[1..].iter().product();
        let mut data = Vec::with_capacity(stride * indices.len());
        for &i in indices {
            if i >= self.dims[0] {
                return dim_err(format!("gather index {i} out of bounds for {:?}", self.dims));
            }
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut dims = self.dims.clone();
        dims[0] = indices.len();
        Tensor::new(&dims, data)
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Dimension("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.dims != first.dims {
                return dim_err(format!("stack mismatch {:?} vs {:?}", t.dims, first.dims));
            }
            data.extend_from_slice(&t.data);
        }
        let mut dims = vec![items.len()];
        dims.extend_from_slice(&first.dims);
        Tensor::new(&dims, data)
    }

    /// Concatenates along the leading axis.
    pub fn concat_leading(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        let tail = &first.dims[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for t in items {
            if &t.dims[1..] != tail {
                return dim_err(format!("concat mismatch {:?} vs {:?}", t.dims, first.dims));
            }
            lead += t.dims[0];
            data.extend_from_slice(&t.data);
        }
        let mut dims = first.dims.clone();
        dims[0] = lead;
        Tensor::new(&dims, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_length() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::new(&[2, 0], vec![]).unwrap().numel(), 0);
    }

    #[test]
    fn grad_shape_matches_data() {
        let mut t = Tensor::zeros(&[2, 2]);
        assert!(t.accumulate_grad(&[1.0; 3]).is_err());
        t.accumulate_grad(&[1.0; 4]).unwrap();
        t.accumulate_grad(&[0.5; 4]).unwrap();
        assert_eq!(t.grad().unwrap(), &[1.5; 4]);
    }

    #[test]
    fn gather_and_stack() {
        let t = Tensor::from_fn(&[3, 2], |i| i as f64);
        let g = t.gather_leading(&[2, 0]).unwrap();
        assert_eq!(g.data(), &[4.0, 5.0, 0.0, 1.0]);
        let s = Tensor::stack(&[g.clone(), g]).unwrap();
        assert_eq!(s.dims(), &[2, 2, 2]);
    }
}
