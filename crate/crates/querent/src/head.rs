//! Attentive pooling over attended patch rows and the linear output head,
//! plus the mean/max pooling baselines.

use crate::error::{Error, Result};
use crate::exec;
use crate::numerics::{gelu, matmul, sigmoid, softmax_slice, Matrix, RngStream};

/// Weights for the pooling gate (a two-layer perceptron scoring each row)
/// and the output classifier.
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub w_a1: Matrix,
    pub b_a1: Vec<f64>,
    pub w_a2: Matrix,
    pub b_a2: Vec<f64>,
    pub w_c: Matrix,
    pub b_c: Vec<f64>,
}

impl HeadParams {
    pub fn new(
        w_a1: Matrix,
        b_a1: Vec<f64>,
        w_a2: Matrix,
        b_a2: Vec<f64>,
        w_c: Matrix,
        b_c: Vec<f64>,
    ) -> Result<HeadParams> {
        let d = w_a1.rows();
        let hidden = w_a1.cols();
        if d == 0 || hidden == 0 {
            return Err(Error::Shape("pooling gate needs d >= 1 and hidden >= 1".into()));
        }
        if b_a1.len() != hidden {
            return Err(Error::Shape(format!(
                "gate hidden bias has {} slots for width {hidden}",
                b_a1.len()
            )));
        }
        if w_a2.rows() != hidden || w_a2.cols() != 1 {
            return Err(Error::Shape(format!(
                "gate output layer must be {hidden}x1, got {}x{}",
                w_a2.rows(),
                w_a2.cols()
            )));
        }
        if b_a2.len() != 1 {
            return Err(Error::Shape(format!(
                "gate output bias has {} slots, wants 1",
                b_a2.len()
            )));
        }
        if w_c.rows() != d {
            return Err(Error::Shape(format!(
                "classifier takes width {}, pooled vectors have width {d}",
                w_c.rows()
            )));
        }
        if w_c.cols() == 0 {
            return Err(Error::Shape("classifier needs at least one output".into()));
        }
        if b_c.len() != w_c.cols() {
            return Err(Error::Shape(format!(
                "classifier bias has {} slots for {} outputs",
                b_c.len(),
                w_c.cols()
            )));
        }
        if !b_a1
            .iter()
            .chain(&b_a2)
            .chain(&b_c)
            .all(|v| v.is_finite())
        {
            return Err(Error::Numeric("head bias with non-finite entry".into()));
        }
        Ok(HeadParams {
            w_a1,
            b_a1,
            w_a2,
            b_a2,
            w_c,
            b_c,
        })
    }

    /// Gaussian init scaled by each layer's fan-in, zero biases.
    pub fn random(d: usize, hidden: usize, n_out: usize, rng: &mut RngStream) -> Result<HeadParams> {
        HeadParams::new(
            Matrix::gaussian(d, hidden, (1.0 / d as f64).sqrt(), rng),
            vec![0.0; hidden],
            Matrix::gaussian(hidden, 1, (1.0 / hidden as f64).sqrt(), rng),
            vec![0.0],
            Matrix::gaussian(d, n_out, (1.0 / d as f64).sqrt(), rng),
            vec![0.0; n_out],
        )
    }

    pub fn d(&self) -> usize {
        self.w_a1.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_a1.cols()
    }

    pub fn n_outputs(&self) -> usize {
        self.w_c.cols()
    }
}

/// Every intermediate of one pooling pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct PoolCache {
    /// Gate hidden layer before the activation.
    pub hidden_pre: Matrix,
    /// Gate hidden layer after GELU.
    pub hidden: Matrix,
    /// Per-row gate logit (before the sigmoid).
    pub gate_pre: Vec<f64>,
    /// Per-row gate value: sigmoid of the logit, or the logit itself when
    /// pooling on raw scores.
    pub gate: Vec<f64>,
    /// Softmax of the gate values; the pooling weights.
    pub alpha: Vec<f64>,
    /// The pooled vector, sum of alpha-weighted rows.
    pub z: Vec<f64>,
}

/// Gate-weighted pooling: alpha = softmax(sigmoid(gate(x))), z = sum alpha_j x_j.
/// `raw_score_pool` skips the sigmoid, letting the gate logits hit the
/// softmax directly for sharper pooling contrast.
pub fn attentive_pool(x: &Matrix, params: &HeadParams, raw_score_pool: bool) -> Result<PoolCache> {
    if x.cols() != params.d() {
        return Err(Error::Shape(format!(
            "rows have width {}, pooling gate takes {}",
            x.cols(),
            params.d()
        )));
    }
    let n = x.rows();
    if n == 0 {
        return Err(Error::EmptyRegion("pooling over zero rows".into()));
    }
    let hidden_dim = params.hidden_dim();
    let mut hidden_pre = matmul(x, &params.w_a1)?;
    exec::for_each_row(hidden_pre.data_mut(), hidden_dim, 0, |_, row| {
        for (slot, b) in row.iter_mut().zip(&params.b_a1) {
            *slot += b;
        }
    });
    let mut hidden = hidden_pre.clone();
    for v in hidden.data_mut() {
        *v = gelu(*v);
    }

    let mut gate_pre = vec![0.0; n];
    for (i, slot) in gate_pre.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (r, h) in hidden.row(i).iter().enumerate() {
            acc += h * params.w_a2.get(r, 0);
        }
        *slot = acc + params.b_a2[0];
    }
    let gate: Vec<f64> = if raw_score_pool {
        gate_pre.clone()
    } else {
        gate_pre.iter().map(|&t| sigmoid(t)).collect()
    };
    let mut alpha = gate.clone();
    softmax_slice(&mut alpha);

    let mut z = vec![0.0; x.cols()];
    for (i, &a) in alpha.iter().enumerate() {
        for (slot, &v) in z.iter_mut().zip(x.row(i)) {
            *slot += a * v;
        }
    }
    Ok(PoolCache {
        hidden_pre,
        hidden,
        gate_pre,
        gate,
        alpha,
        z,
    })
}

/// `z @ w_c + b_c`.
pub fn classify(z: &[f64], params: &HeadParams) -> Result<Vec<f64>> {
    if z.len() != params.d() {
        return Err(Error::Shape(format!(
            "pooled vector has width {}, classifier takes {}",
            z.len(),
            params.d()
        )));
    }
    let mut logits = params.b_c.clone();
    for (r, &v) in z.iter().enumerate() {
        for (slot, w) in logits.iter_mut().zip(params.w_c.row(r)) {
            *slot += v * w;
        }
    }
    Ok(logits)
}

/// Pool and classify in one call.
pub fn predict(
    x: &Matrix,
    params: &HeadParams,
    raw_score_pool: bool,
) -> Result<(Vec<f64>, PoolCache)> {
    let cache = attentive_pool(x, params, raw_score_pool)?;
    let logits = classify(&cache.z, params)?;
    Ok((logits, cache))
}

/// Selection-free pooling used by the baseline models.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselinePool {
    Mean,
    Max,
}

/// Columnwise mean or max over all rows.
pub fn baseline_pool(x: &Matrix, kind: BaselinePool) -> Result<Vec<f64>> {
    let n = x.rows();
    if n == 0 {
        return Err(Error::EmptyRegion("pooling over zero rows".into()));
    }
    let mut z = x.row(0).to_vec();
    match kind {
        BaselinePool::Mean => {
            for i in 1..n {
                for (slot, &v) in z.iter_mut().zip(x.row(i)) {
                    *slot += v;
                }
            }
            for slot in z.iter_mut() {
                *slot /= n as f64;
            }
        }
        BaselinePool::Max => {
            for i in 1..n {
                for (slot, &v) in z.iter_mut().zip(x.row(i)) {
                    if v > *slot {
                        *slot = v;
                    }
                }
            }
        }
    }
    Ok(z)
}
