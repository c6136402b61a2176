use crate::params::{Init, ParamBuilder, ParamId, ParamSet};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Real, Tensor};

/// `y = x·W + b` over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, d_in: usize, d_out: usize) -> Self {
        Self::with_gain(pb, d_in, d_out, 1.0)
    }

    pub fn with_gain<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        d_in: usize,
        d_out: usize,
        gain: f64,
    ) -> Self {
        let init = if gain == 0.0 {
            Init::Zeros
        } else {
            Init::FanIn { fan_in: d_in, gain }
        };
        Self {
            weight: pb.add("weight", &[d_in, d_out], init),
            bias: pb.add("bias", &[d_out], Init::Zeros),
            d_in,
            d_out,
        }
    }

    fn out_shape(&self, x: &Tensor<impl Real>) -> Vec<usize> {
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = self.d_out;
        shape
    }

    pub fn forward<T: Real>(&self, p: &ParamSet<T>, x: &Tensor<T>) -> Tensor<T> {
        debug_assert_eq!(x.cols(), self.d_in);
        let n = x.rows();
        let bias = p.get(self.bias).data();
        let mut out = Tensor::from_fn(&self.out_shape(x), |i| bias[i % self.d_out]);
        gemm_nn(
            n,
            self.d_in,
            self.d_out,
            x.data(),
            p.get(self.weight).data(),
            out.data_mut(),
        );
        out
    }

    pub fn backward<T: Real>(
        &self,
        p: &ParamSet<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        g: &mut ParamSet<T>,
    ) -> Tensor<T> {
        let n = x.rows();
        gemm_tn(
            n,
            self.d_in,
            self.d_out,
            x.data(),
            dy.data(),
            g.get_mut(self.weight).data_mut(),
        );
        let gb = g.get_mut(self.bias).data_mut();
        for row in dy.data().chunks_exact(self.d_out) {
            for (b, &d) in gb.iter_mut().zip(row) {
                *b += d;
            }
        }
        let mut dx = Tensor::zeros(x.shape());
        gemm_nt(
            n,
            self.d_out,
            self.d_in,
            dy.data(),
            p.get(self.weight).data(),
            dx.data_mut(),
        );
        dx
    }
}

const LN_EPS: f64 = 1e-5;

/// Layer normalization over the last axis with learned scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    x_hat: Tensor<T>,
    inv_std: Vec<T>,
}

impl LayerNorm {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, dim: usize) -> Self {
        Self {
            gamma: pb.add("gamma", &[dim], Init::Ones),
            beta: pb.add("beta", &[dim], Init::Zeros),
            dim,
        }
    }

    pub fn forward<T: Real>(&self, p: &ParamSet<T>, x: &Tensor<T>) -> (Tensor<T>, LayerNormCache<T>) {
        let d = self.dim;
        let gamma = p.get(self.gamma).data();
        let beta = p.get(self.beta).data();
        let n = T::of(d as f64);
        let eps = T::of(LN_EPS);
        let mut x_hat = x.clone();
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        for (xh_row, y_row) in x_hat
            .data_mut()
            .chunks_exact_mut(d)
            .zip(out.data_mut().chunks_exact_mut(d))
        {
            let mean = xh_row.iter().copied().sum::<T>() / n;
            let var = xh_row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            for (k, (xh, y)) in xh_row.iter_mut().zip(y_row.iter_mut()).enumerate() {
                *xh = (*xh - mean) * inv;
                *y = gamma[k] * *xh + beta[k];
            }
            inv_std.push(inv);
        }
        (out, LayerNormCache { x_hat, inv_std })
    }

    pub fn backward<T: Real>(
        &self,
        p: &ParamSet<T>,
        cache: &LayerNormCache<T>,
        dy: &Tensor<T>,
        g: &mut ParamSet<T>,
    ) -> Tensor<T> {
        let d = self.dim;
        let n = T::of(d as f64);
        let gamma = p.get(self.gamma).data();
        {
            let gg = g.get_mut(self.gamma).data_mut();
            for (xh_row, dy_row) in cache
                .x_hat
                .data()
                .chunks_exact(d)
                .zip(dy.data().chunks_exact(d))
            {
                for k in 0..d {
                    gg[k] += dy_row[k] * xh_row[k];
                }
            }
        }
        {
            let gb = g.get_mut(self.beta).data_mut();
            for dy_row in dy.data().chunks_exact(d) {
                for k in 0..d {
                    gb[k] += dy_row[k];
                }
            }
        }
        let mut dx = dy.clone();
        for ((dx_row, xh_row), &inv) in dx
            .data_mut()
            .chunks_exact_mut(d)
            .zip(cache.x_hat.data().chunks_exact(d))
            .zip(&cache.inv_std)
        {
            let mut sum_d = T::zero();
            let mut sum_dx = T::zero();
            for k in 0..d {
                let dxh = dx_row[k] * gamma[k];
                sum_d += dxh;
                sum_dx += dxh * xh_row[k];
            }
            for k in 0..d {
                let dxh = dx_row[k] * gamma[k];
                dx_row[k] = inv / n * (n * dxh - sum_d - xh_row[k] * sum_dx);
            }
        }
        dx
    }
}
