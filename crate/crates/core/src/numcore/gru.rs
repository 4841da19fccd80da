//! Single-layer GRU over row batches.
//!
//! Gate equations, for input `x` and previous state `h`:
//!
//! ```text
//! z  = sigmoid(x W_z^T + h U_z^T + b_z)
//! r  = sigmoid(x W_r^T + h U_r^T + b_r)
//! h~ = tanh(x W_h^T + (r * h) U_h^T + b_h)
//! h' = (1 - z) * h + z * h~
//! ```
//!
//! Sequences of different lengths are packed: rows are sorted by length,
//! longest first, so the rows still running at step `k` are always a prefix
//! of the batch. Finished rows keep their last state.

use rand::Rng;

use super::layers::{Param, Parameterized};
use super::tensor::{accumulate_column_sums, add_row_bias, gemm, sigmoid, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Gru {
    pub w_z: Param,
    pub w_r: Param,
    pub w_h: Param,
    pub u_z: Param,
    pub u_r: Param,
    pub u_h: Param,
    pub b_z: Param,
    pub b_r: Param,
    pub b_h: Param,
}

/// Intermediates of one step, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct StepCache {
    rows: usize,
    x: Tensor,
    h_prev: Tensor,
    z: Tensor,
    r: Tensor,
    cand: Tensor,
    rh: Tensor,
}

impl StepCache {
    pub fn z(&self) -> &Tensor {
        &self.z
    }

    pub fn r(&self) -> &Tensor {
        &self.r
    }

    pub fn candidate(&self) -> &Tensor {
        &self.cand
    }
}

#[derive(Clone, Debug)]
pub struct SequenceCache {
    batch: usize,
    steps: Vec<StepCache>,
}

impl SequenceCache {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

impl Gru {
    /// Weight matrices uniform in `±1/sqrt(hidden)`, zero biases.
    pub fn new<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut w = || Param::new(Tensor::uniform(hidden, input, bound, rng));
        let (w_z, w_r, w_h) = (w(), w(), w());
        let mut u = || Param::new(Tensor::uniform(hidden, hidden, bound, rng));
        let (u_z, u_r, u_h) = (u(), u(), u());
        Gru {
            w_z,
            w_r,
            w_h,
            u_z,
            u_r,
            u_h,
            b_z: Param::zeros(1, hidden),
            b_r: Param::zeros(1, hidden),
            b_h: Param::zeros(1, hidden),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Gru {
            w_z: Param::zeros(hidden, input),
            w_r: Param::zeros(hidden, input),
            w_h: Param::zeros(hidden, input),
            u_z: Param::zeros(hidden, hidden),
            u_r: Param::zeros(hidden, hidden),
            u_h: Param::zeros(hidden, hidden),
            b_z: Param::zeros(1, hidden),
            b_r: Param::zeros(1, hidden),
            b_h: Param::zeros(1, hidden),
        }
    }

    pub fn input_size(&self) -> usize {
        self.w_z.value.cols()
    }

    pub fn hidden_size(&self) -> usize {
        self.w_z.value.rows()
    }

    fn preactivation(&self, x: &Tensor, h: &[f64], w: &Param, u: &Param, b: &Param) -> Tensor {
        let (n, din, dh) = (x.rows(), self.input_size(), self.hidden_size());
        let mut a = Tensor::zeros(n, dh);
        gemm(n, din, dh, 1.0, x.data(), false, w.value.data(), true, 0.0, a.data_mut());
        gemm(n, dh, dh, 1.0, h, false, u.value.data(), true, 1.0, a.data_mut());
        add_row_bias(&mut a, &b.value);
        a
    }

    /// One step for a batch of rows.
    pub fn step(&self, x: &Tensor, h_prev: &Tensor) -> Result<(Tensor, StepCache)> {
        let (din, dh) = (self.input_size(), self.hidden_size());
        if x.cols() != din || h_prev.cols() != dh || x.rows() != h_prev.rows() {
            return Err(Error::Shape(format!(
                "gru step expects x: n x {din}, h: n x {dh}; got {:?} and {:?}",
                x.shape(),
                h_prev.shape()
            )));
        }
        let n = x.rows();
        let mut z = self.preactivation(x, h_prev.data(), &self.w_z, &self.u_z, &self.b_z);
        z.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        let mut r = self.preactivation(x, h_prev.data(), &self.w_r, &self.u_r, &self.b_r);
        r.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        let rh_data: Vec<f64> = r.data().iter().zip(h_prev.data()).map(|(r, h)| r * h).collect();
        let rh = Tensor::from_vec(n, dh, rh_data)?;
        let mut cand = self.preactivation(x, rh.data(), &self.w_h, &self.u_h, &self.b_h);
        cand.data_mut().iter_mut().for_each(|v| *v = v.tanh());

        let mut h_new = Tensor::zeros(n, dh);
        for (((o, &zv), &c), &h) in h_new
            .data_mut()
            .iter_mut()
            .zip(z.data())
            .zip(cand.data())
            .zip(h_prev.data())
        {
            *o = (1.0 - zv) * h + zv * c;
        }
        h_new.ensure_finite("gru step")?;
        let cache = StepCache {
            rows: n,
            x: x.clone(),
            h_prev: h_prev.clone(),
            z,
            r,
            cand,
            rh,
        };
        Ok((h_new, cache))
    }

    /// Backward through one step. Accumulates parameter gradients and
    /// returns `(dL/dx, dL/dh_prev)`.
    pub fn step_backward(&mut self, cache: &StepCache, d_h: &Tensor) -> (Tensor, Tensor) {
        let (n, din, dh) = (cache.rows, self.input_size(), self.hidden_size());
        debug_assert_eq!(d_h.shape(), (n, dh));
        let len = n * dh;
        let (z, r, cand, hp) = (cache.z.data(), cache.r.data(), cache.cand.data(), cache.h_prev.data());
        let g = d_h.data();

        let mut da_z = vec![0.0; len];
        let mut da_h = vec![0.0; len];
        let mut dh_prev = Tensor::zeros(n, dh);
        {
            let dhp = dh_prev.data_mut();
            for i in 0..len {
                let dz = g[i] * (cand[i] - hp[i]);
                da_z[i] = dz * z[i] * (1.0 - z[i]);
                da_h[i] = g[i] * z[i] * (1.0 - cand[i] * cand[i]);
                dhp[i] = g[i] * (1.0 - z[i]);
            }
        }

        // Candidate gate: pre-activation is x W_h^T + (r*h) U_h^T + b_h.
        let mut d_rh = vec![0.0; len];
        gemm(n, dh, dh, 1.0, &da_h, false, self.u_h.value.data(), false, 0.0, &mut d_rh);
        gemm(dh, n, dh, 1.0, &da_h, true, cache.rh.data(), false, 1.0, self.u_h.grad.data_mut());
        gemm(dh, n, din, 1.0, &da_h, true, cache.x.data(), false, 1.0, self.w_h.grad.data_mut());
        accumulate_column_sums(&mut self.b_h.grad, &da_h, dh);

        let mut da_r = vec![0.0; len];
        {
            let dhp = dh_prev.data_mut();
            for i in 0..len {
                da_r[i] = d_rh[i] * hp[i] * r[i] * (1.0 - r[i]);
                dhp[i] += d_rh[i] * r[i];
            }
        }

        for (da, w, u, b) in [
            (&da_z, &mut self.w_z, &mut self.u_z, &mut self.b_z),
            (&da_r, &mut self.w_r, &mut self.u_r, &mut self.b_r),
        ] {
            gemm(dh, n, din, 1.0, da, true, cache.x.data(), false, 1.0, w.grad.data_mut());
            gemm(dh, n, dh, 1.0, da, true, hp, false, 1.0, u.grad.data_mut());
            accumulate_column_sums(&mut b.grad, da, dh);
            gemm(n, dh, dh, 1.0, da, false, u.value.data(), false, 1.0, dh_prev.data_mut());
        }

        let mut dx = Tensor::zeros(n, din);
        for (da, w) in [(&da_z, &self.w_z), (&da_r, &self.w_r), (&da_h, &self.w_h)] {
            gemm(n, dh, din, 1.0, da, false, w.value.data(), false, 1.0, dx.data_mut());
        }
        (dx, dh_prev)
    }

    /// Runs packed sequences. `inputs[k]` holds the rows still active at
    /// step `k`; row counts must be non-increasing and at most `h0.rows()`.
    /// Returns the final state of every row.
    pub fn forward_packed(&self, inputs: &[Tensor], h0: &Tensor) -> Result<(Tensor, SequenceCache)> {
        if inputs.is_empty() {
            return Err(Error::invalid("gru sequence must have at least one step"));
        }
        let dh = self.hidden_size();
        if h0.cols() != dh {
            return Err(Error::Shape(format!("initial state has {} columns, expected {dh}", h0.cols())));
        }
        let mut h = h0.clone();
        let mut steps = Vec::with_capacity(inputs.len());
        let mut active = h0.rows();
        for x in inputs {
            let n = x.rows();
            if n > active {
                return Err(Error::Shape(format!(
                    "packed step has {n} rows after a step with {active}"
                )));
            }
            active = n;
            let hp = Tensor::from_vec(n, dh, h.head_rows(n).to_vec())?;
            let (hn, cache) = self.step(x, &hp)?;
            h.head_rows_mut(n).copy_from_slice(hn.data());
            steps.push(cache);
        }
        Ok((
            h,
            SequenceCache {
                batch: h0.rows(),
                steps,
            },
        ))
    }

    /// Backward through a packed sequence given `dL/dh_last`. Returns the
    /// per-step input gradients and `dL/dh0`.
    pub fn backward_packed(&mut self, cache: &SequenceCache, d_last: &Tensor) -> (Vec<Tensor>, Tensor) {
        debug_assert_eq!(d_last.rows(), cache.batch);
        let dh = self.hidden_size();
        let mut d = d_last.clone();
        let mut dxs = Vec::with_capacity(cache.steps.len());
        for step in cache.steps.iter().rev() {
            let n = step.rows;
            let d_step = Tensor::from_vec(n, dh, d.head_rows(n).to_vec()).expect("row prefix");
            let (dx, dhp) = self.step_backward(step, &d_step);
            d.head_rows_mut(n).copy_from_slice(dhp.data());
            dxs.push(dx);
        }
        dxs.reverse();
        (dxs, d)
    }

    /// Single-vector cell evaluation.
    pub fn cell_forward(&self, x: &[f64], h_prev: &[f64]) -> Result<(Vec<f64>, StepCache)> {
        let (h, cache) = self.step(
            &Tensor::row_vector(x.to_vec()),
            &Tensor::row_vector(h_prev.to_vec()),
        )?;
        Ok((h.into_vec(), cache))
    }

    /// Final state after folding the cell over `xs` from `h0`.
    pub fn sequence(&self, xs: &[Vec<f64>], h0: &[f64]) -> Result<(Vec<f64>, SequenceCache)> {
        let inputs: Vec<Tensor> = xs.iter().map(|x| Tensor::row_vector(x.clone())).collect();
        let (h, cache) = self.forward_packed(&inputs, &Tensor::row_vector(h0.to_vec()))?;
        Ok((h.into_vec(), cache))
    }

    pub fn sequence_backward(&mut self, cache: &SequenceCache, d_last: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let (dxs, dh0) = self.backward_packed(cache, &Tensor::row_vector(d_last.to_vec()));
        (dxs.into_iter().map(Tensor::into_vec).collect(), dh0.into_vec())
    }
}

impl Parameterized for Gru {
    fn params(&self) -> Vec<(String, &Param)> {
        vec![
            ("w_z".into(), &self.w_z),
            ("w_r".into(), &self.w_r),
            ("w_h".into(), &self.w_h),
            ("u_z".into(), &self.u_z),
            ("u_r".into(), &self.u_r),
            ("u_h".into(), &self.u_h),
            ("b_z".into(), &self.b_z),
            ("b_r".into(), &self.b_r),
            ("b_h".into(), &self.b_h),
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        vec![
            ("w_z".into(), &mut self.w_z),
            ("w_r".into(), &mut self.w_r),
            ("w_h".into(), &mut self.w_h),
            ("u_z".into(), &mut self.u_z),
            ("u_r".into(), &mut self.u_r),
            ("u_h".into(), &mut self.u_h),
            ("b_z".into(), &mut self.b_z),
            ("b_r".into(), &mut self.b_r),
            ("b_h".into(), &mut self.b_h),
        ]
    }
}
