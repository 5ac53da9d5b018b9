//! Mask-guided refinement: the upsampled semantic stream predicts a gate
//! for the RGB features, and a deformable 3x3 path over the same stream
//! widens the receptive field before the two are summed.

use burn::prelude::*;

use crate::mgfa::{GateMask, MaskHead};
use crate::nn::{bilinear_resize, join, DeformConv2d, NamedParams, ParamRef, ParamValue};

#[derive(Clone, Debug)]
pub struct Mgrm<B: Backend> {
    mask_head: MaskHead<B>,
    deform: DeformConv2d<B>,
}

impl<B: Backend> Mgrm<B> {
    pub fn new(channels: usize, device: &B::Device) -> Self {
        Self {
            // One hidden 3x3 convolution plus the 1x1 reduction; distinct
            // parameters from the aggregation module's mask head.
            mask_head: MaskHead::new(channels, 1, device),
            deform: DeformConv2d::new(channels, device),
        }
    }

    /// Sigmoid gate for the RGB features, computed at the target scale.
    pub fn rgb_mask(&self, stream: Tensor<B, 4>) -> GateMask<B> {
        self.mask_head.forward(stream)
    }

    pub fn deform(&self) -> &DeformConv2d<B> {
        &self.deform
    }

    /// Refine RGB features given the coarser-scale stream. The stream is
    /// bilinearly upsampled to the RGB resolution first (identity at the
    /// deepest scale, where the sizes already agree).
    pub fn refine(&self, stream: Tensor<B, 4>, rgb: Tensor<B, 4>) -> (Tensor<B, 4>, GateMask<B>) {
        let [_, cs, _, _] = stream.dims();
        let [_, cr, h, w] = rgb.dims();
        assert_eq!(cs, cr, "stream width {cs} does not match rgb width {cr}");
        self.refine_upsampled(bilinear_resize(stream, h, w), rgb)
    }

    /// Same as [`refine`](Self::refine) but with the stream already at the
    /// RGB resolution, so the caller can share one upsample across modules.
    pub fn refine_upsampled(
        &self,
        upsampled: Tensor<B, 4>,
        rgb: Tensor<B, 4>,
    ) -> (Tensor<B, 4>, GateMask<B>) {
        let mask = self.rgb_mask(upsampled.clone());
        let gated = mask.gate(rgb);
        let refined = self.deform.forward(upsampled) + gated;
        (refined, mask)
    }
}

impl<B: Backend> NamedParams<B> for Mgrm<B> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, ParamRef<'_, B>)) {
        self.mask_head.visit_params(&join(prefix, "mask"), f);
        self.deform.visit_params(&join(prefix, "deform"), f);
    }

    fn map_params(
        mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ParamValue<B>) -> ParamValue<B>,
    ) -> Self {
        self.mask_head = self.mask_head.map_params(&join(prefix, "mask"), f);
        self.deform = self.deform.map_params(&join(prefix, "deform"), f);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mgfa::Mgfa;
    use crate::nn::{param_manifest, save_to_store};
    use crate::testing::TestBackend;
    use burn::tensor::Distribution;

    fn device() -> Device<TestBackend> {
        Default::default()
    }

    #[test]
    fn mask_range_and_zero_input_half() {
        let mgrm = Mgrm::<TestBackend>::new(8, &device());
        let x = Tensor::random([1, 8, 6, 6], Distribution::Normal(0.0, 3.0), &device());
        let mask = mgrm.rgb_mask(x).values;
        assert!(mask.clone().min().into_scalar() > 0.0);
        assert!(mask.max().into_scalar() < 1.0);

        let zeros = Tensor::zeros([1, 8, 6, 6], &device());
        let mask = mgrm.rgb_mask(zeros).values;
        assert_eq!((mask - 0.5).abs().max().into_scalar(), 0.0);
    }

    #[test]
    fn mask_heads_do_not_share_parameters() {
        let mgrm = Mgrm::<TestBackend>::new(8, &device());
        let mgfa = Mgfa::<TestBackend>::new(8, &device());
        // N2 is one hidden conv, N1 is two; independent random values.
        let n2: Vec<String> = param_manifest(&mgrm)
            .into_iter()
            .filter(|(n, _, _)| n.starts_with("mask."))
            .map(|(n, _, _)| n)
            .collect();
        assert_eq!(n2.len(), 4, "one hidden conv + reduce, weight+bias each");
        let s_mgrm = save_to_store(&mgrm);
        let s_mgfa = save_to_store(&mgfa);
        assert_ne!(
            s_mgrm["mask.hidden.0.weight"].data,
            s_mgfa["mask.hidden.0.weight"].data
        );
    }

    #[test]
    fn refine_shapes_across_scale_gap() {
        let mgrm = Mgrm::<TestBackend>::new(8, &device());
        let stream = Tensor::random([1, 8, 8, 8], Distribution::Default, &device());
        let rgb = Tensor::random([1, 8, 16, 16], Distribution::Default, &device());
        let (refined, mask) = mgrm.refine(stream, rgb);
        assert_eq!(refined.dims(), [1, 8, 16, 16]);
        assert_eq!(mask.values.dims(), [1, 1, 16, 16]);
    }

    #[test]
    fn refine_is_identity_resize_at_deepest_scale() {
        let mgrm = Mgrm::<TestBackend>::new(4, &device());
        let stream =
            Tensor::<TestBackend, 4>::random([1, 4, 8, 8], Distribution::Default, &device());
        let rgb = Tensor::random([1, 4, 8, 8], Distribution::Default, &device());
        let (a, _) = mgrm.refine(stream.clone(), rgb.clone());
        let (b, _) = mgrm.refine_upsampled(stream, rgb);
        assert_eq!((a - b).abs().max().into_scalar(), 0.0);
    }

    #[test]
    fn constant_stream_upsamples_to_same_constant() {
        let stream = Tensor::<TestBackend, 4>::full([1, 3, 4, 4], 1.25, &device());
        let up = bilinear_resize(stream, 8, 8);
        assert!((up - 1.25).abs().max().into_scalar() <= 1e-6);
    }

    #[test]
    fn gated_term_bounded_by_rgb() {
        let mgrm = Mgrm::<TestBackend>::new(8, &device());
        let stream = Tensor::random([1, 8, 6, 6], Distribution::Default, &device());
        let rgb = Tensor::random([1, 8, 6, 6], Distribution::Normal(0.0, 2.0), &device());
        let mask = mgrm.rgb_mask(stream);
        let gated = mask.gate(rgb.clone());
        assert!((gated.abs() - rgb.abs()).max().into_scalar() <= 0.0);
    }
}
