use rand::Rng;

use super::tensor::{accumulate_column_sums, add_row_bias, gemm, matmul_transposed, Tensor};
use crate::error::{Error, Result};

/// A trainable tensor and its gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.rows(), value.cols());
        Param { value, grad }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Param::new(Tensor::zeros(rows, cols))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill_zero();
    }
}

/// Anything that owns an ordered, named list of parameters.
pub trait Parameterized {
    fn params(&self) -> Vec<(String, &Param)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Param)>;

    fn zero_grads(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_parameters(&self) -> usize {
        self.params().iter().map(|(_, p)| p.value.len()).sum()
    }
}

pub(crate) fn prefixed<'a>(prefix: &str, inner: Vec<(String, &'a Param)>) -> Vec<(String, &'a Param)> {
    inner.into_iter().map(|(n, p)| (format!("{prefix}.{n}"), p)).collect()
}

pub(crate) fn prefixed_mut<'a>(
    prefix: &str,
    inner: Vec<(String, &'a mut Param)>,
) -> Vec<(String, &'a mut Param)> {
    inner.into_iter().map(|(n, p)| (format!("{prefix}.{n}"), p)).collect()
}

/// Affine map `y = x W^T + b` with `W: out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    /// Weights uniform in `±1/sqrt(in)`, zero bias.
    pub fn new<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        Linear {
            weight: Param::new(Tensor::uniform(output, input, bound, rng)),
            bias: Param::zeros(1, output),
        }
    }

    pub fn input_size(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn output_size(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input_size() {
            return Err(Error::Shape(format!(
                "linear layer expects {} inputs, got {}",
                self.input_size(),
                x.cols()
            )));
        }
        let mut y = matmul_transposed(x.data(), x.rows(), &self.weight.value);
        add_row_bias(&mut y, &self.bias.value);
        Ok(y)
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        let (n, out, inp) = (x.rows(), self.output_size(), self.input_size());
        gemm(out, n, inp, 1.0, dy.data(), true, x.data(), false, 1.0, self.weight.grad.data_mut());
        accumulate_column_sums(&mut self.bias.grad, dy.data(), out);
        let mut dx = Tensor::zeros(n, inp);
        gemm(n, out, inp, 1.0, dy.data(), false, self.weight.value.data(), false, 0.0, dx.data_mut());
        dx
    }
}

impl Parameterized for Linear {
    fn params(&self) -> Vec<(String, &Param)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }
}

/// Lookup table with one row per id.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub table: Param,
}

impl Embedding {
    /// Rows uniform in `±0.1`.
    pub fn new<R: Rng>(count: usize, dim: usize, rng: &mut R) -> Self {
        Embedding {
            table: Param::new(Tensor::uniform(count, dim, 0.1, rng)),
        }
    }

    pub fn count(&self) -> usize {
        self.table.value.rows()
    }

    pub fn dim(&self) -> usize {
        self.table.value.cols()
    }

    pub fn lookup(&self, ids: &[usize]) -> Result<Tensor> {
        let dim = self.dim();
        let mut out = Tensor::zeros(ids.len(), dim);
        for (i, &id) in ids.iter().enumerate() {
            if id >= self.count() {
                return Err(Error::invalid(format!(
                    "embedding id {id} out of range for a table of {} rows",
                    self.count()
                )));
            }
            out.row_mut(i).copy_from_slice(self.table.value.row(id));
        }
        Ok(out)
    }

    pub fn accumulate(&mut self, ids: &[usize], d: &[f64]) {
        let dim = self.dim();
        for (&id, row) in ids.iter().zip(d.chunks_exact(dim)) {
            for (g, x) in self.table.grad.row_mut(id).iter_mut().zip(row) {
                *g += x;
            }
        }
    }
}

impl Parameterized for Embedding {
    fn params(&self) -> Vec<(String, &Param)> {
        vec![("table".into(), &self.table)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        vec![("table".into(), &mut self.table)]
    }
}
