use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::Uniform;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub(crate) fn uniform_matrix<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Array2<f64> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(dist))
}

/// Affine map `y = x Wᵀ + b` applied row-wise; `weight` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Linear {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    /// Uniform weights bounded by `1/sqrt(fan_in)`, zero bias.
    pub fn init<R: Rng>(out_dim: usize, in_dim: usize, rng: &mut R) -> Self {
        Linear {
            weight: uniform_matrix(out_dim, in_dim, 1.0 / (in_dim as f64).sqrt(), rng),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    pub fn forward_vec(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.weight.dot(&x) + &self.bias
    }

    /// Accumulate parameter grads into `grad`, return the input grad.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &dy.t().dot(x);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }

    pub fn backward_vec(&self, x: ArrayView1<f64>, dy: ArrayView1<f64>, grad: &mut Linear) -> Array1<f64> {
        for (i, &d) in dy.iter().enumerate() {
            if d != 0.0 {
                grad.weight.row_mut(i).scaled_add(d, &x);
            }
        }
        grad.bias += &dy;
        self.weight.t().dot(&dy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

pub(crate) struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gain: Array1::ones(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        LayerNorm {
            gain: Array1::zeros(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub(crate) fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let n = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / n;
            *s = 1.0 / (var + LN_EPS).sqrt();
            row *= *s;
        }
        let y = &xhat * &self.gain + &self.bias;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub(crate) fn backward(
        &self,
        cache: &LayerNormCache,
        dy: &Array2<f64>,
        grad: &mut LayerNorm,
    ) -> Array2<f64> {
        grad.gain += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.bias += &dy.sum_axis(Axis(0));
        let n = dy.ncols() as f64;
        let dxhat = dy * &self.gain;
        let mut dx = Array2::zeros(dy.raw_dim());
        for (((mut out, dh), xh), &s) in dx
            .rows_mut()
            .into_iter()
            .zip(dxhat.rows())
            .zip(cache.xhat.rows())
            .zip(cache.inv_std.iter())
        {
            let mean_dh = dh.sum() / n;
            let mean_dh_xh = dh.dot(&xh) / n;
            for ((o, &d), &x) in out.iter_mut().zip(dh.iter()).zip(xh.iter()) {
                *o = s * (d - mean_dh - x * mean_dh_xh);
            }
        }
        dx
    }
}

/// Row-wise softmax with max subtraction.
pub(crate) fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}
