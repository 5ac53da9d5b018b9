use burn::module::Param;
use burn::nn::{BatchNorm, BatchNormConfig};
use burn::prelude::*;
use burn::tensor::activation::relu;
use burn::tensor::module::deform_conv2d;
use burn::tensor::ops::DeformConvOptions;
use burn::tensor::{Distribution, Int};

/// Boundary handling for the implicit padding of [`gemm_conv2d`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PadMode {
    #[default]
    Zeros,
    /// Clamp sample coordinates to the border. Keeps convolutions of
    /// constant fields exactly constant, which the atrous branches rely on.
    Replicate,
}

fn im2col_indices(h: usize, w: usize, k: usize, pad: usize, dil: usize) -> (Vec<i32>, [usize; 4]) {
    let hp = h + 2 * pad;
    let wp = w + 2 * pad;
    let ho = hp - dil * (k - 1);
    let wo = wp - dil * (k - 1);
    let mut idx = Vec::with_capacity(k * k * ho * wo);
    for ky in 0..k {
        for kx in 0..k {
            for oy in 0..ho {
                for ox in 0..wo {
                    idx.push(((oy + ky * dil) * wp + (ox + kx * dil)) as i32);
                }
            }
        }
    }
    (idx, [hp, wp, ho, wo])
}

/// Like [`im2col_indices`] but sampling the unpadded input with clamped
/// coordinates (replicate padding), so no padded copy is materialized.
fn im2col_indices_clamped(h: usize, w: usize, k: usize, pad: usize, dil: usize) -> (Vec<i32>, [usize; 2]) {
    let ho = h + 2 * pad - dil * (k - 1);
    let wo = w + 2 * pad - dil * (k - 1);
    let mut idx = Vec::with_capacity(k * k * ho * wo);
    for ky in 0..k {
        for kx in 0..k {
            for oy in 0..ho {
                for ox in 0..wo {
                    let y = (oy + ky * dil) as isize - pad as isize;
                    let x = (ox + kx * dil) as isize - pad as isize;
                    let y = y.clamp(0, h as isize - 1) as usize;
                    let x = x.clamp(0, w as isize - 1) as usize;
                    idx.push((y * w + x) as i32);
                }
            }
        }
    }
    (idx, [ho, wo])
}

/// Stride-1 2D convolution lowered to a batched matmul.
///
/// Zero padding is materialized with `slice_assign` and the im2col gather
/// uses `select`, so the whole op differentiates through standard tensor
/// primitives.
pub fn gemm_conv2d<B: Backend>(
    x: Tensor<B, 4>,
    weight: Tensor<B, 4>,
    bias: Option<Tensor<B, 1>>,
    pad: usize,
    dil: usize,
    pad_mode: PadMode,
) -> Tensor<B, 4> {
    let device = x.device();
    let [b, c, h, w] = x.dims();
    let [o, ci, k, kw] = weight.dims();
    assert_eq!(c, ci, "conv input has {c} channels, weight expects {ci}");
    assert_eq!(k, kw, "only square kernels are supported");

    let out = if k == 1 {
        weight
            .reshape([1, o, c])
            .matmul(x.reshape([b, c, h * w]))
            .reshape([b, o, h, w])
    } else {
        let (idx, x, [ho, wo]) = match pad_mode {
            PadMode::Zeros => {
                let (idx, [hp, wp, ho, wo]) = im2col_indices(h, w, k, pad, dil);
                let x = if pad > 0 {
                    Tensor::zeros([b, c, hp, wp], &device)
                        .slice_assign([0..b, 0..c, pad..pad + h, pad..pad + w], x)
                } else {
                    x
                };
                (idx, x.reshape([b, c, hp * wp]), [ho, wo])
            }
            PadMode::Replicate => {
                let (idx, dims) = im2col_indices_clamped(h, w, k, pad, dil);
                (idx, x.reshape([b, c, h * w]), dims)
            }
        };
        let idx = Tensor::<B, 1, Int>::from_data(idx.as_slice(), &device);
        let cols = x.select(2, idx).reshape([b, c * k * k, ho * wo]);
        weight
            .reshape([1, o, c * k * k])
            .matmul(cols)
            .reshape([b, o, ho, wo])
    };
    match bias {
        Some(bias) => out + bias.reshape([1, o, 1, 1]),
        None => out,
    }
}

/// Convolution layer holding its own parameters.
///
/// Weights follow the usual fan-in uniform init; biases start at zero so
/// sigmoid heads emit exactly 0.5 on zero input at initialization.
#[derive(Clone, Debug)]
pub struct Conv2d<B: Backend> {
    pub weight: Param<Tensor<B, 4>>,
    pub bias: Option<Param<Tensor<B, 1>>>,
    pub padding: usize,
    pub dilation: usize,
}

impl<B: Backend> Conv2d<B> {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, device: &B::Device) -> Self {
        let pad = kernel / 2;
        Self::with_dilation(c_in, c_out, kernel, pad, 1, device)
    }

    pub fn with_dilation(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        padding: usize,
        dilation: usize,
        device: &B::Device,
    ) -> Self {
        let bound = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
        let weight = Tensor::random(
            [c_out, c_in, kernel, kernel],
            Distribution::Uniform(-bound, bound),
            device,
        );
        Self {
            weight: Param::from_tensor(weight),
            bias: Some(Param::from_tensor(Tensor::zeros([c_out], device))),
            padding,
            dilation,
        }
    }

    /// All-zero weights and biases; used for offset predictors so training
    /// starts from a standard convolution.
    pub fn zeros(c_in: usize, c_out: usize, kernel: usize, device: &B::Device) -> Self {
        Self {
            weight: Param::from_tensor(Tensor::zeros([c_out, c_in, kernel, kernel], device)),
            bias: Some(Param::from_tensor(Tensor::zeros([c_out], device))),
            padding: kernel / 2,
            dilation: 1,
        }
    }

    pub fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        gemm_conv2d(
            x,
            self.weight.val(),
            self.bias.as_ref().map(Param::val),
            self.padding,
            self.dilation,
        )
    }
}

/// Conv + batch norm + ReLU, the decoder's standard unit.
#[derive(Clone, Debug)]
pub struct ConvBlock<B: Backend> {
    pub conv: Conv2d<B>,
    pub bn: BatchNorm<B>,
}

impl<B: Backend> ConvBlock<B> {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, device: &B::Device) -> Self {
        Self::with_dilation(c_in, c_out, kernel, kernel / 2, 1, device)
    }

    pub fn with_dilation(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        padding: usize,
        dilation: usize,
        device: &B::Device,
    ) -> Self {
        Self {
            conv: Conv2d::with_dilation(c_in, c_out, kernel, padding, dilation, device),
            bn: BatchNormConfig::new(c_out).init(device),
        }
    }

    pub fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        relu(self.bn.forward(self.conv.forward(x)))
    }
}

/// 3x3 deformable convolution with a zero-initialized offset predictor
/// (no modulation masks). With zero offsets it reduces to `gemm_conv2d`
/// with the same weights, which is exactly its state at initialization.
#[derive(Clone, Debug)]
pub struct DeformConv2d<B: Backend> {
    pub offset: Conv2d<B>,
    pub weight: Param<Tensor<B, 4>>,
    pub bias: Param<Tensor<B, 1>>,
}

impl<B: Backend> DeformConv2d<B> {
    pub fn new(channels: usize, device: &B::Device) -> Self {
        let bound = 1.0 / ((channels * 9) as f64).sqrt();
        Self {
            offset: Conv2d::zeros(channels, 2 * 9, 3, device),
            weight: Param::from_tensor(Tensor::random(
                [channels, channels, 3, 3],
                Distribution::Uniform(-bound, bound),
                device,
            )),
            bias: Param::from_tensor(Tensor::zeros([channels], device)),
        }
    }

    pub fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        let offsets = self.offset.forward(x.clone());
        self.forward_with_offsets(x, offsets)
    }

    /// Forward with caller-provided offsets; tests use this to pin offsets
    /// to zero and compare against the standard convolution path.
    pub fn forward_with_offsets(&self, x: Tensor<B, 4>, offsets: Tensor<B, 4>) -> Tensor<B, 4> {
        deform_conv2d(
            x,
            offsets,
            self.weight.val(),
            None,
            Some(self.bias.val()),
            DeformConvOptions::new([1, 1], [1, 1], [1, 1], 1, 1),
        )
    }

    /// The plain 3x3 convolution this layer collapses to when offsets are zero.
    pub fn forward_standard(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        gemm_conv2d(x, self.weight.val(), Some(self.bias.val()), 1, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::TestBackend;
    use burn::tensor::module::conv2d;
    use burn::tensor::ops::ConvOptions;

    #[test]
    fn gemm_conv_matches_reference_conv() {
        let device = Default::default();
        for (k, pad, dil) in [(3, 1, 1), (1, 0, 1), (3, 6, 6), (5, 2, 1)] {
            let x = Tensor::<TestBackend, 4>::random([2, 5, 14, 14], Distribution::Default, &device);
            let w = Tensor::<TestBackend, 4>::random([7, 5, k, k], Distribution::Default, &device);
            let b = Tensor::<TestBackend, 1>::random([7], Distribution::Default, &device);
            let got = gemm_conv2d(x.clone(), w.clone(), Some(b.clone()), pad, dil);
            let want = conv2d(
                x,
                w,
                Some(b),
                ConvOptions::new([1, 1], [pad, pad], [dil, dil], 1),
            );
            let diff = (got - want).abs().max().into_scalar();
            assert!(diff <= 1e-5, "k={k} pad={pad} dil={dil}: diff {diff}");
        }
    }

    #[test]
    fn deform_conv_zero_offsets_equals_standard() {
        let device = Default::default();
        let layer = DeformConv2d::<TestBackend>::new(8, &device);
        let x = Tensor::random([2, 8, 10, 10], Distribution::Default, &device);
        // Offsets are zero-initialized, so plain forward is the init state.
        let deformed = layer.forward(x.clone());
        let standard = layer.forward_standard(x);
        let diff = (deformed - standard).abs().max().into_scalar();
        assert!(diff <= 1e-5, "zero-offset mismatch {diff}");
    }

    #[test]
    fn conv_bias_starts_at_zero() {
        let device = Default::default();
        let conv = Conv2d::<TestBackend>::new(4, 4, 3, &device);
        let bias_norm = conv.bias.unwrap().val().abs().sum().into_scalar();
        assert_eq!(bias_norm, 0.0);
    }
}
