//! Five-scale feature extraction: VGG19 stages with lateral projections,
//! plus the atrous pyramid head that seeds the semantic stream.

use burn::nn::pool::{MaxPool2d, MaxPool2dConfig};
use burn::prelude::*;
use burn::tensor::activation::relu;

use crate::error::{PmfError, Result};
use crate::nn::{
    bilinear_resize, join, Conv2d, ConvBlock, NamedParams, ParamRef, ParamStore, ParamValue,
};

/// Raw channel width after the last convolution of each VGG19 stage.
pub const VGG_STAGE_CHANNELS: [usize; 5] = [64, 128, 256, 512, 512];
/// Convolutions per VGG19 stage.
const STAGE_CONVS: [usize; 5] = [2, 2, 4, 4, 4];

#[derive(Clone, Debug)]
pub struct BackboneConfig {
    /// Common channel width C every pyramid level is projected to.
    pub common_channels: usize,
    /// Load ImageNet-pretrained VGG19 weights (requires a weights file).
    pub pretrained: bool,
    /// Dilation rates of the atrous branches.
    pub aspp_rates: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            common_channels: 64,
            pretrained: false,
            aspp_rates: vec![6, 12, 18],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.common_channels == 0 {
            return Err(PmfError::Config("common_channels must be positive".into()));
        }
        let mut rates = self.aspp_rates.clone();
        rates.sort_unstable();
        rates.dedup();
        if rates.len() != self.aspp_rates.len() || rates.iter().any(|&r| r == 0) {
            return Err(PmfError::Config(format!(
                "aspp rates must be distinct positive integers, got {:?}",
                self.aspp_rates
            )));
        }
        Ok(())
    }
}

/// Multi-level features from one backbone stream after lateral projection.
/// `levels[0]` is the shallowest projected level (`min_level`), the last
/// entry is level 5. Level i has spatial size `S / 2^(i-1)`.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<B: Backend> {
    pub levels: Vec<Tensor<B, 4>>,
    pub min_level: usize,
}

impl<B: Backend> FeaturePyramid<B> {
    /// Feature tensor of 1-based level `level`.
    pub fn level(&self, level: usize) -> &Tensor<B, 4> {
        assert!(
            level >= self.min_level && level <= 5,
            "level {level} outside [{}..5]",
            self.min_level
        );
        &self.levels[level - self.min_level]
    }
}

#[derive(Clone, Debug)]
pub struct VggStage<B: Backend> {
    convs: Vec<Conv2d<B>>,
}

impl<B: Backend> VggStage<B> {
    fn new(c_in: usize, c_out: usize, n_convs: usize, device: &B::Device) -> Self {
        let convs = (0..n_convs)
            .map(|i| Conv2d::new(if i == 0 { c_in } else { c_out }, c_out, 3, device))
            .collect();
        Self { convs }
    }

    fn forward(&self, mut x: Tensor<B, 4>) -> Tensor<B, 4> {
        for conv in &self.convs {
            x = relu(conv.forward(x));
        }
        x
    }
}

/// One VGG19 feature stream. Stage outputs are tapped before pooling and
/// projected to the common width by per-level 1x1 lateral convolutions;
/// levels below `min_level` carry no lateral and are skipped.
#[derive(Clone, Debug)]
pub struct VggEncoder<B: Backend> {
    stages: Vec<VggStage<B>>,
    laterals: Vec<Option<Conv2d<B>>>,
    pool: MaxPool2d,
    min_level: usize,
}

impl<B: Backend> VggEncoder<B> {
    pub fn new(common_channels: usize, min_level: usize, device: &B::Device) -> Self {
        assert!((1..=5).contains(&min_level));
        let mut stages = Vec::with_capacity(5);
        let mut c_in = 3;
        for (i, &c_out) in VGG_STAGE_CHANNELS.iter().enumerate() {
            stages.push(VggStage::new(c_in, c_out, STAGE_CONVS[i], device));
            c_in = c_out;
        }
        let laterals = VGG_STAGE_CHANNELS
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                (i + 1 >= min_level).then(|| Conv2d::new(c, common_channels, 1, device))
            })
            .collect();
        Self {
            stages,
            laterals,
            pool: MaxPool2dConfig::new([2, 2]).with_strides([2, 2]).init(),
            min_level,
        }
    }

    pub fn min_level(&self) -> usize {
        self.min_level
    }

    /// Raw stage taps (post-activation, pre-pooling), levels 1..=5.
    fn taps(&self, x: Tensor<B, 4>) -> Vec<Tensor<B, 4>> {
        let [_, c, h, w] = x.dims();
        assert_eq!(c, 3, "backbone expects a 3-channel input, got {c}");
        assert!(
            h % 16 == 0 && w % 16 == 0,
            "input size {h}x{w} must be divisible by 16"
        );
        let mut taps = Vec::with_capacity(5);
        let mut x = x;
        for (i, stage) in self.stages.iter().enumerate() {
            x = stage.forward(x);
            taps.push(x.clone());
            if i + 1 < 5 {
                x = self.pool.forward(x);
            }
        }
        taps
    }

    /// Project the stage taps to the common width.
    pub fn extract_pyramid(&self, x: Tensor<B, 4>) -> FeaturePyramid<B> {
        let taps = self.taps(x);
        let levels = taps
            .into_iter()
            .zip(&self.laterals)
            .filter_map(|(tap, lateral)| lateral.as_ref().map(|l| l.forward(tap)))
            .collect();
        FeaturePyramid {
            levels,
            min_level: self.min_level,
        }
    }

    /// Overwrite the stage convolutions from a store of torchvision-style
    /// keys (`features.{idx}.weight` / `.bias`), as produced by converting
    /// the classification checkpoint. Laterals keep their random init.
    pub fn load_vgg19(self, store: &ParamStore) -> Result<Self> {
        // Indices of the conv layers inside torchvision's `features` stack.
        const FEATURE_IDX: [&[usize]; 5] = [
            &[0, 2],
            &[5, 7],
            &[10, 12, 14, 16],
            &[19, 21, 23, 25],
            &[28, 30, 32, 34],
        ];
        let mut translated = ParamStore::new();
        for (s, idxs) in FEATURE_IDX.iter().enumerate() {
            for (j, idx) in idxs.iter().enumerate() {
                for field in ["weight", "bias"] {
                    let src = format!("features.{idx}.{field}");
                    let tensor = store.get(&src).ok_or_else(|| {
                        PmfError::Checkpoint(format!("pretrained weights missing key {src}"))
                    })?;
                    translated.insert(format!("{s}.convs.{j}.{field}"), tensor.clone());
                }
            }
        }
        let stages = crate::nn::load_from_store(self.stages, &translated)?;
        Ok(Self { stages, ..self })
    }
}

impl<B: Backend> NamedParams<B> for VggEncoder<B> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, ParamRef<'_, B>)) {
        self.stages.visit_params(&join(prefix, "stages"), f);
        self.laterals.visit_params(&join(prefix, "laterals"), f);
    }

    fn map_params(
        mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ParamValue<B>) -> ParamValue<B>,
    ) -> Self {
        self.stages = self.stages.map_params(&join(prefix, "stages"), f);
        self.laterals = self.laterals.map_params(&join(prefix, "laterals"), f);
        self
    }
}

impl<B: Backend> NamedParams<B> for VggStage<B> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, ParamRef<'_, B>)) {
        self.convs.visit_params(&join(prefix, "convs"), f);
    }

    fn map_params(
        mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ParamValue<B>) -> ParamValue<B>,
    ) -> Self {
        self.convs = self.convs.map_params(&join(prefix, "convs"), f);
        self
    }
}

/// Atrous spatial pyramid pooling over the deepest RGB level: a 1x1 branch,
/// one 3x3 atrous branch per rate, and a global-average branch, concatenated
/// and projected back to the common width.
#[derive(Clone, Debug)]
pub struct Aspp<B: Backend> {
    pointwise: Option<ConvBlock<B>>,
    atrous: Vec<ConvBlock<B>>,
    global_conv: Option<Conv2d<B>>,
    project: ConvBlock<B>,
}

impl<B: Backend> Aspp<B> {
    pub fn new(channels: usize, rates: &[usize], device: &B::Device) -> Self {
        Self::with_branches(channels, rates, true, true, device)
    }

    /// Branch-configurable constructor; tests use a single-rate variant.
    pub fn with_branches(
        channels: usize,
        rates: &[usize],
        with_pointwise: bool,
        with_global: bool,
        device: &B::Device,
    ) -> Self {
        let atrous: Vec<ConvBlock<B>> = rates
            .iter()
            .map(|&r| ConvBlock::with_dilation(channels, channels, 3, r, r, device))
            .collect();
        let n_branches = atrous.len() + usize::from(with_pointwise) + usize::from(with_global);
        Self {
            pointwise: with_pointwise.then(|| ConvBlock::new(channels, channels, 1, device)),
            atrous,
            // No batch norm here: the branch works on a 1x1 map.
            global_conv: with_global.then(|| Conv2d::new(channels, channels, 1, device)),
            project: ConvBlock::new(n_branches * channels, channels, 1, device),
        }
    }

    pub fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        let [_, _, h, w] = x.dims();
        let mut branches = Vec::new();
        if let Some(pw) = &self.pointwise {
            branches.push(pw.forward(x.clone()));
        }
        for branch in &self.atrous {
            branches.push(branch.forward(x.clone()));
        }
        if let Some(gc) = &self.global_conv {
            let pooled = x.clone().mean_dim(3).mean_dim(2);
            let pooled = relu(gc.forward(pooled));
            branches.push(bilinear_resize(pooled, h, w));
        }
        self.project.forward(Tensor::cat(branches, 1))
    }

    /// Apply atrous branch `i` followed by the projection, bypassing the
    /// concatenation; only meaningful when it is the sole branch.
    pub fn compose_single_branch(&self, i: usize, x: Tensor<B, 4>) -> Tensor<B, 4> {
        self.project.forward(self.atrous[i].forward(x))
    }
}

impl<B: Backend> NamedParams<B> for Aspp<B> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, ParamRef<'_, B>)) {
        self.pointwise.visit_params(&join(prefix, "pointwise"), f);
        self.atrous.visit_params(&join(prefix, "atrous"), f);
        self.global_conv.visit_params(&join(prefix, "global"), f);
        self.project.visit_params(&join(prefix, "project"), f);
    }

    fn map_params(
        mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ParamValue<B>) -> ParamValue<B>,
    ) -> Self {
        self.pointwise = self.pointwise.map_params(&join(prefix, "pointwise"), f);
        self.atrous = self.atrous.map_params(&join(prefix, "atrous"), f);
        self.global_conv = self.global_conv.map_params(&join(prefix, "global"), f);
        self.project = self.project.map_params(&join(prefix, "project"), f);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::save_to_store;
    use crate::testing::TestBackend;
    use burn::tensor::Distribution;

    fn device() -> Device<TestBackend> {
        Default::default()
    }

    #[test]
    fn pyramid_shape_law_at_32() {
        let enc = VggEncoder::<TestBackend>::new(16, 1, &device());
        let x = Tensor::random([1, 3, 32, 32], Distribution::Default, &device());
        let pyr = enc.extract_pyramid(x);
        assert_eq!(pyr.levels.len(), 5);
        for level in 1..=5 {
            let dims = pyr.level(level).dims();
            let expect = 32 >> (level - 1);
            assert_eq!(dims, [1, 16, expect, expect], "level {level}");
        }
    }

    #[test]
    fn rejects_input_not_divisible_by_16() {
        let enc = VggEncoder::<TestBackend>::new(8, 1, &device());
        let x = Tensor::zeros([1, 3, 24, 24], &device());
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            enc.extract_pyramid(x)
        }));
        assert!(result.is_err());
    }

    #[test]
    fn zero_input_stays_finite() {
        let enc = VggEncoder::<TestBackend>::new(8, 1, &device());
        let x = Tensor::zeros([1, 3, 32, 32], &device());
        let pyr = enc.extract_pyramid(x);
        for level in pyr.levels {
            assert!(level.abs().max().into_scalar().is_finite());
        }
    }

    #[test]
    fn two_encoders_have_independent_weights() {
        let a = VggEncoder::<TestBackend>::new(8, 1, &device());
        let b = VggEncoder::<TestBackend>::new(8, 1, &device());
        let sa = save_to_store(&a);
        let sb = save_to_store(&b);
        assert_eq!(
            sa.keys().collect::<Vec<_>>(),
            sb.keys().collect::<Vec<_>>()
        );
        let w_a = &sa["stages.0.convs.0.weight"];
        let w_b = &sb["stages.0.convs.0.weight"];
        assert_ne!(w_a.data, w_b.data, "streams must not share weights");
    }

    #[test]
    fn truncated_encoder_skips_shallow_laterals() {
        let enc = VggEncoder::<TestBackend>::new(8, 3, &device());
        let x = Tensor::random([1, 3, 32, 32], Distribution::Default, &device());
        let pyr = enc.extract_pyramid(x);
        assert_eq!(pyr.levels.len(), 3);
        assert_eq!(pyr.level(3).dims(), [1, 8, 8, 8]);
        let store = save_to_store(&enc);
        assert!(!store.keys().any(|k| k.starts_with("laterals.0")));
        assert!(store.keys().any(|k| k.starts_with("laterals.4")));
    }

    #[test]
    fn aspp_preserves_shape() {
        let aspp = Aspp::<TestBackend>::new(16, &[6, 12, 18], &device());
        let x = Tensor::random([2, 16, 16, 16], Distribution::Default, &device());
        assert_eq!(aspp.forward(x).dims(), [2, 16, 16, 16]);
    }

    #[test]
    fn aspp_constant_input_gives_spatially_constant_output() {
        let aspp = Aspp::<TestBackend>::new(8, &[6, 12, 18], &device());
        let x = Tensor::full([1, 8, 16, 16], 0.37, &device());
        let y = aspp.forward(x);
        let per_channel_spread = (y.clone().max_dim(3).max_dim(2)
            - y.min_dim(3).min_dim(2))
        .abs()
        .max()
        .into_scalar();
        assert!(
            per_channel_spread <= 1e-5,
            "output varies spatially by {per_channel_spread}"
        );
    }

    #[test]
    fn aspp_single_rate_reduces_to_stacked_convs() {
        let aspp = Aspp::<TestBackend>::with_branches(8, &[1], false, false, &device());
        let x = Tensor::random([1, 8, 12, 12], Distribution::Default, &device());
        let via_aspp = aspp.forward(x.clone());
        let via_composition = aspp.compose_single_branch(0, x);
        let diff = (via_aspp - via_composition).abs().max().into_scalar();
        assert!(diff <= 1e-5, "single-branch mismatch {diff}");
    }

    #[test]
    fn config_rejects_duplicate_rates() {
        let cfg = BackboneConfig {
            aspp_rates: vec![6, 6, 12],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert!(BackboneConfig::default().validate().is_ok());
    }

    #[test]
    fn pretrained_loader_maps_torchvision_keys() {
        use crate::nn::StoredTensor;
        let mut store = ParamStore::new();
        const FEATURE_IDX: [&[usize]; 5] = [
            &[0, 2],
            &[5, 7],
            &[10, 12, 14, 16],
            &[19, 21, 23, 25],
            &[28, 30, 32, 34],
        ];
        let mut c_in = 3;
        for (s, idxs) in FEATURE_IDX.iter().enumerate() {
            let c_out = VGG_STAGE_CHANNELS[s];
            for (j, idx) in idxs.iter().enumerate() {
                let ci = if j == 0 { c_in } else { c_out };
                store.insert(
                    format!("features.{idx}.weight"),
                    StoredTensor {
                        shape: vec![c_out, ci, 3, 3],
                        data: vec![0.5; c_out * ci * 9],
                    },
                );
                store.insert(
                    format!("features.{idx}.bias"),
                    StoredTensor {
                        shape: vec![c_out],
                        data: vec![0.25; c_out],
                    },
                );
            }
            c_in = c_out;
        }
        let enc = VggEncoder::<TestBackend>::new(8, 1, &device());
        let enc = enc.load_vgg19(&store).unwrap();
        let loaded = save_to_store(&enc);
        assert!(loaded["stages.0.convs.0.weight"].data.iter().all(|&v| v == 0.5));
        assert!(loaded["stages.4.convs.3.bias"].data.iter().all(|&v| v == 0.25));
    }
}
