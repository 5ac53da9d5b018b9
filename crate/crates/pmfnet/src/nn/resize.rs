use burn::prelude::*;

/// Row-interpolation matrix for bilinear resampling with half-pixel centers.
/// Each row sums to 1, so constant inputs are preserved exactly.
fn interp_matrix(n_in: usize, n_out: usize) -> Vec<f32> {
    let mut m = vec![0f32; n_out * n_in];
    let scale = n_in as f32 / n_out as f32;
    for r in 0..n_out {
        let src = ((r as f32 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f32);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        let frac = src - i0 as f32;
        m[r * n_in + i0] += 1.0 - frac;
        m[r * n_in + i1] += frac;
    }
    m
}

/// Bilinear resize of a `[batch, channel, h, w]` tensor to `[h_out, w_out]`.
///
/// Implemented as `A_h · x · A_wᵀ` with constant interpolation matrices, so
/// it is linear, differentiable through `matmul`, and bit-deterministic.
pub fn bilinear_resize<B: Backend>(x: Tensor<B, 4>, h_out: usize, w_out: usize) -> Tensor<B, 4> {
    let device = x.device();
    let [b, c, h, w] = x.dims();
    if h == h_out && w == w_out {
        return x;
    }
    let rows = Tensor::<B, 1>::from_data(interp_matrix(h, h_out).as_slice(), &device)
        .reshape([1, h_out, h]);
    let cols_t = Tensor::<B, 1>::from_data(interp_matrix(w, w_out).as_slice(), &device)
        .reshape([1, w_out, w])
        .transpose();
    rows.matmul(x.reshape([b * c, h, w]))
        .matmul(cols_t)
        .reshape([b, c, h_out, w_out])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::TestBackend;
    use burn::tensor::Distribution;

    #[test]
    fn preserves_constants_exactly() {
        let device = Default::default();
        let x = Tensor::<TestBackend, 4>::full([2, 3, 5, 7], 0.73, &device);
        let y = bilinear_resize(x, 11, 13);
        let diff = (y - 0.73).abs().max().into_scalar();
        assert!(diff <= 1e-6, "constant drifted by {diff}");
    }

    #[test]
    fn is_linear() {
        let device = Default::default();
        let x = Tensor::<TestBackend, 4>::random([1, 2, 6, 6], Distribution::Default, &device);
        let y = Tensor::<TestBackend, 4>::random([1, 2, 6, 6], Distribution::Default, &device);
        let lhs = bilinear_resize(x.clone() * 2.5 + y.clone() * (-0.5), 12, 12);
        let rhs = bilinear_resize(x, 12, 12) * 2.5 + bilinear_resize(y, 12, 12) * (-0.5);
        let diff = (lhs - rhs).abs().max().into_scalar();
        assert!(diff <= 1e-6, "linearity violated by {diff}");
    }

    #[test]
    fn doubling_shape() {
        let device = Default::default();
        let x = Tensor::<TestBackend, 4>::random([1, 4, 8, 8], Distribution::Default, &device);
        assert_eq!(bilinear_resize(x, 16, 16).dims(), [1, 4, 16, 16]);
    }

    #[test]
    fn identity_when_size_matches() {
        let device = Default::default();
        let x = Tensor::<TestBackend, 4>::random([1, 1, 4, 4], Distribution::Default, &device);
        let y = bilinear_resize(x.clone(), 4, 4);
        assert!((y - x).abs().max().into_scalar() == 0.0);
    }
}
