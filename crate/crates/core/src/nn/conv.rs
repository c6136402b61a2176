use crate::error::{Error, Result};
use crate::params::{Init, ParamBuilder, ParamId, ParamSet};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Real, Tensor};

use super::{gelu, gelu_backward};

/// 2-D convolution over a single `H×W×C` feature map (channels last).
///
/// Weights are stored as a `(k·k·C_in) × C_out` matrix with rows ordered `(ky, kx, c_in)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
pub struct Conv2dCache<T> {
    cols: Vec<T>,
    in_shape: [usize; 3],
    out_hw: [usize; 2],
}

impl Conv2d {
    /// Convolution with `pad = kernel / 2`; `gain = 0` zero-initializes the weights.
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
    ) -> Self {
        Self::with_padding(pb, c_in, c_out, kernel, stride, kernel / 2, gain)
    }

    pub fn with_padding<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        gain: f64,
    ) -> Self {
        let fan_in = kernel * kernel * c_in;
        let init = if gain == 0.0 {
            Init::Zeros
        } else {
            Init::FanIn { fan_in, gain }
        };
        Self {
            weight: pb.add("weight", &[fan_in, c_out], init),
            bias: pb.add("bias", &[c_out], Init::Zeros),
            c_in,
            c_out,
            kernel,
            stride,
            pad,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> [usize; 2] {
        [
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        ]
    }

    fn im2col<T: Real>(&self, x: &Tensor<T>) -> (Vec<T>, [usize; 2]) {
        let [h, w, c] = [x.shape()[0], x.shape()[1], x.shape()[2]];
        let [ho, wo] = self.output_hw(h, w);
        let k = self.kernel;
        let row_len = k * k * c;
        let mut cols = vec![T::zero(); ho * wo * row_len];
        let src = x.data();
        for oy in 0..ho {
            for ox in 0..wo {
                let row = &mut cols[(oy * wo + ox) * row_len..(oy * wo + ox + 1) * row_len];
                for ky in 0..k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let s = (iy as usize * w + ix as usize) * c;
                        let d = (ky * k + kx) * c;
                        row[d..d + c].copy_from_slice(&src[s..s + c]);
                    }
                }
            }
        }
        (cols, [ho, wo])
    }

    pub fn forward<T: Real>(&self, p: &ParamSet<T>, x: &Tensor<T>) -> Result<(Tensor<T>, Conv2dCache<T>)> {
        if x.shape().len() != 3 || x.shape()[2] != self.c_in {
            return Err(Error::shape("conv input (H, W, C)", &[self.c_in], x.shape()));
        }
        let (h, w) = (x.shape()[0], x.shape()[1]);
        if h + 2 * self.pad < self.kernel || w + 2 * self.pad < self.kernel {
            return Err(Error::config(format!(
                "{h}x{w} input is smaller than a {}x{} kernel",
                self.kernel, self.kernel
            )));
        }
        let (cols, [ho, wo]) = self.im2col(x);
        let bias = p.get(self.bias).data();
        let mut out = Tensor::from_fn(&[ho, wo, self.c_out], |i| bias[i % self.c_out]);
        let row_len = self.kernel * self.kernel * self.c_in;
        gemm_nn(
            ho * wo,
            row_len,
            self.c_out,
            &cols,
            p.get(self.weight).data(),
            out.data_mut(),
        );
        Ok((
            out,
            Conv2dCache {
                cols,
                in_shape: [h, w, self.c_in],
                out_hw: [ho, wo],
            },
        ))
    }

    pub fn backward<T: Real>(
        &self,
        p: &ParamSet<T>,
        cache: &Conv2dCache<T>,
        dy: &Tensor<T>,
        g: &mut ParamSet<T>,
    ) -> Tensor<T> {
        let [ho, wo] = cache.out_hw;
        let [h, w, c] = cache.in_shape;
        let k = self.kernel;
        let row_len = k * k * c;
        let m = ho * wo;
        gemm_tn(
            m,
            row_len,
            self.c_out,
            &cache.cols,
            dy.data(),
            g.get_mut(self.weight).data_mut(),
        );
        let gb = g.get_mut(self.bias).data_mut();
        for row in dy.data().chunks_exact(self.c_out) {
            for (b, &d) in gb.iter_mut().zip(row) {
                *b += d;
            }
        }
        let mut dcols = vec![T::zero(); m * row_len];
        gemm_nt(m, self.c_out, row_len, dy.data(), p.get(self.weight).data(), &mut dcols);
        let mut dx = Tensor::zeros(&[h, w, c]);
        let dst = dx.data_mut();
        for oy in 0..ho {
            for ox in 0..wo {
                let row = &dcols[(oy * wo + ox) * row_len..(oy * wo + ox + 1) * row_len];
                for ky in 0..k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let s = (iy as usize * w + ix as usize) * c;
                        let d = (ky * k + kx) * c;
                        for (o, &v) in dst[s..s + c].iter_mut().zip(&row[d..d + c]) {
                            *o += v;
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Convolutions applied in sequence with GELU between consecutive layers (none after the
/// last). Used for the downsampling stage and for the prediction heads.
#[derive(Debug, Clone)]
pub struct ConvStack {
    pub layers: Vec<Conv2d>,
}

#[derive(Debug, Clone)]
pub struct ConvStackCache<T> {
    convs: Vec<Conv2dCache<T>>,
    pre_act: Vec<Tensor<T>>,
}

impl ConvStack {
    pub fn forward<T: Real>(&self, p: &ParamSet<T>, x: &Tensor<T>) -> Result<(Tensor<T>, ConvStackCache<T>)> {
        let mut convs = Vec::with_capacity(self.layers.len());
        let mut pre_act = Vec::with_capacity(self.layers.len().saturating_sub(1));
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, c) = layer.forward(p, &cur)?;
            convs.push(c);
            if i + 1 < self.layers.len() {
                cur = gelu(&y);
                pre_act.push(y);
            } else {
                cur = y;
            }
        }
        Ok((cur, ConvStackCache { convs, pre_act }))
    }

    pub fn backward<T: Real>(
        &self,
        p: &ParamSet<T>,
        cache: &ConvStackCache<T>,
        dy: &Tensor<T>,
        g: &mut ParamSet<T>,
    ) -> Tensor<T> {
        let mut d = dy.clone();
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                d = gelu_backward(&cache.pre_act[i], &d);
            }
            d = self.layers[i].backward(p, &cache.convs[i], &d, g);
        }
        d
    }

    pub fn total_stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.c_out)
    }
}

/// Small trainable stand-in for an image backbone: a non-overlapping patch convolution
/// (kernel = stride) followed by GELU and a 1×1 convolution. Frames and the query share it.
#[derive(Debug, Clone)]
pub struct PatchEncoder {
    pub stack: ConvStack,
    pub stride: usize,
}

impl PatchEncoder {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, c_in: usize, channels: usize, stride: usize) -> Self {
        let patch = Conv2d::with_padding(&mut pb.scoped("patch"), c_in, channels, stride, stride, 0, 1.0);
        let mix = Conv2d::new(&mut pb.scoped("mix"), channels, channels, 1, 1, 1.0);
        Self {
            stack: ConvStack {
                layers: vec![patch, mix],
            },
            stride,
        }
    }

    /// Encodes one `S×S×C_in` image into `(S/stride)×(S/stride)×channels` features.
    pub fn forward<T: Real>(&self, p: &ParamSet<T>, image: &Tensor<T>) -> Result<(Tensor<T>, ConvStackCache<T>)> {
        let shape = image.shape();
        if shape.len() != 3 || shape[0] != shape[1] {
            return Err(Error::shape("encoder input must be square (S, S, C)", &[], shape));
        }
        if shape[0] % self.stride != 0 {
            return Err(Error::config(format!(
                "image side {} is not divisible by patch stride {}",
                shape[0], self.stride
            )));
        }
        self.stack.forward(p, image)
    }

    pub fn backward<T: Real>(
        &self,
        p: &ParamSet<T>,
        cache: &ConvStackCache<T>,
        dy: &Tensor<T>,
        g: &mut ParamSet<T>,
    ) -> Tensor<T> {
        self.stack.backward(p, cache, dy, g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_kernel_passes_input_through() {
        let mut set = ParamSet::<f64>::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::new(&mut ParamBuilder::new(&mut set, &mut rng), 3, 3, 3, 1, 0.0);
        let w = set.get_mut(conv.weight).data_mut();
        for c in 0..3 {
            // centre tap (ky = 1, kx = 1)
            w[((3 + 1) * 3 + c) * 3 + c] = 1.0;
        }
        let stack = ConvStack { layers: vec![conv] };
        let x = Tensor::from_fn(&[4, 4, 3], |i| i as f64 * 0.5 - 3.0);
        let (y, _) = stack.forward(&set, &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn stride_two_layers_quarter_each_side() {
        let mut set = ParamSet::<f32>::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pb = ParamBuilder::new(&mut set, &mut rng);
        let stack = ConvStack {
            layers: vec![
                Conv2d::new(&mut pb.scoped("a"), 4, 4, 3, 2, 1.0),
                Conv2d::new(&mut pb.scoped("b"), 4, 4, 3, 2, 1.0),
            ],
        };
        let (y, _) = stack.forward(&set, &Tensor::zeros(&[32, 32, 4])).unwrap();
        assert_eq!(y.shape(), [8, 8, 4]);
        assert_eq!(stack.total_stride(), 4);
    }

    #[test]
    fn encoder_shapes_and_determinism() {
        let build = || {
            let mut set = ParamSet::<f32>::default();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let enc = PatchEncoder::new(&mut ParamBuilder::new(&mut set, &mut rng), 3, 64, 8);
            (enc, set)
        };
        let (enc, set) = build();
        let img = Tensor::from_fn(&[64, 64, 3], |i| ((i * 7919) % 255) as f32 / 255.0);
        let (a, _) = enc.forward(&set, &img).unwrap();
        assert_eq!(a.shape(), [8, 8, 64]);
        let (enc2, set2) = build();
        let (b, _) = enc2.forward(&set2, &img).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            enc.forward(&set, &Tensor::zeros(&[60, 60, 3])),
            Err(Error::Config(_))
        ));
    }
}
