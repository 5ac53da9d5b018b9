//! Progressive multi-scale fusion: per scale from deep to shallow, refine
//! the RGB features against the carried semantic stream (stage 1), gate and
//! aggregate the depth features (stage 2), and sum into the scale output
//! (stage 3), which becomes the stream for the next finer scale. Every
//! scale output feeds its own supervised prediction head.

use std::str::FromStr;

use burn::prelude::*;
use burn::tensor::activation::{relu, sigmoid};

use crate::backbone::{Aspp, BackboneConfig, FeaturePyramid, VggEncoder};
use crate::error::{PmfError, Result};
use crate::mgfa::{GateMask, Mgfa};
use crate::mgrm::Mgrm;
use crate::nn::{bilinear_resize, join, Conv2d, ConvBlock, NamedParams, ParamRef, ParamValue};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Mask-guided aggregation of the two modalities.
    Mgfa,
    /// Plain summation of RGB, depth, and the carried stream.
    Add,
}

impl FromStr for FusionMode {
    type Err = PmfError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mgfa" => Ok(FusionMode::Mgfa),
            "add" => Ok(FusionMode::Add),
            other => Err(PmfError::Config(format!(
                "unknown fusion mode `{other}` (expected mgfa|add)"
            ))),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionMode::Mgfa => "mgfa",
            FusionMode::Add => "add",
        })
    }
}

/// Named model variants used by the ablation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    /// Single-stream FPN on the VGG19 backbone.
    Base,
    /// Two streams fused by the aggregation module, no atrous head, no refinement.
    Mgfa,
    /// Aggregation plus the atrous pyramid head.
    Aspp,
    /// The full model (aggregation, atrous head, refinement).
    Mgrm,
    S3,
    S4,
    S5,
}

impl FromStr for Ablation {
    type Err = PmfError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Ablation::Base),
            "mgfa" => Ok(Ablation::Mgfa),
            "aspp" => Ok(Ablation::Aspp),
            "mgrm" => Ok(Ablation::Mgrm),
            "s3" => Ok(Ablation::S3),
            "s4" => Ok(Ablation::S4),
            "s5" => Ok(Ablation::S5),
            other => Err(PmfError::Config(format!(
                "unknown ablation `{other}` (expected base|mgfa|aspp|mgrm|s3|s4|s5)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_size: usize,
    pub common_channels: usize,
    pub num_scales: usize,
    pub fusion_mode: FusionMode,
    pub use_aspp: bool,
    pub use_mgrm: bool,
    pub two_stream: bool,
    pub aspp_rates: Vec<usize>,
    pub pretrained: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 256,
            common_channels: 64,
            num_scales: 5,
            fusion_mode: FusionMode::Mgfa,
            use_aspp: true,
            use_mgrm: true,
            two_stream: true,
            aspp_rates: vec![6, 12, 18],
            pretrained: false,
        }
    }
}

impl ModelConfig {
    /// The full model with a given scale count and fusion mode.
    pub fn configure(num_scales: usize, fusion_mode: FusionMode) -> Result<Self> {
        let cfg = Self {
            num_scales,
            fusion_mode,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn ablation(which: Ablation) -> Self {
        let full = Self::default();
        match which {
            Ablation::Base => Self {
                two_stream: false,
                use_aspp: false,
                use_mgrm: false,
                ..full
            },
            Ablation::Mgfa => Self {
                use_aspp: false,
                use_mgrm: false,
                ..full
            },
            Ablation::Aspp => Self {
                use_mgrm: false,
                ..full
            },
            Ablation::Mgrm | Ablation::S5 => full,
            Ablation::S3 => Self {
                num_scales: 3,
                ..full
            },
            Ablation::S4 => Self {
                num_scales: 4,
                ..full
            },
        }
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            common_channels: self.common_channels,
            pretrained: self.pretrained,
            aspp_rates: self.aspp_rates.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 16 != 0 {
            return Err(PmfError::Config(format!(
                "input_size must be a positive multiple of 16, got {}",
                self.input_size
            )));
        }
        if !(3..=5).contains(&self.num_scales) {
            return Err(PmfError::Config(format!(
                "num_scales must be 3, 4 or 5, got {}",
                self.num_scales
            )));
        }
        self.backbone().validate()
    }

    /// Deepest-to-shallowest fused levels; `6 - num_scales` is the finest.
    pub fn min_level(&self) -> usize {
        6 - self.num_scales
    }
}

/// Initial semantic stream over the deepest RGB level: the atrous pyramid,
/// or a plain 1x1 block when it is ablated away.
#[derive(Clone, Debug)]
pub struct SemanticHead<B: Backend> {
    aspp: Option<Aspp<B>>,
    fallback: Option<ConvBlock<B>>,
}

impl<B: Backend> SemanticHead<B> {
    fn new(channels: usize, rates: &[usize], use_aspp: bool, device: &B::Device) -> Self {
        Self {
            aspp: use_aspp.then(|| Aspp::new(channels, rates, device)),
            fallback: (!use_aspp).then(|| ConvBlock::new(channels, channels, 1, device)),
        }
    }

    pub fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        match (&self.aspp, &self.fallback) {
            (Some(aspp), _) => aspp.forward(x),
            (None, Some(fallback)) => fallback.forward(x),
            (None, None) => unreachable!("semantic head has exactly one branch"),
        }
    }
}

impl<B: Backend> NamedParams<B> for SemanticHead<B> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, ParamRef<'_, B>)) {
        self.aspp.visit_params(prefix, f);
        self.fallback.visit_params(&join(prefix, "fallback"), f);
    }

    fn map_params(
        mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ParamValue<B>) -> ParamValue<B>,
    ) -> Self {
        self.aspp = self.aspp.map_params(prefix, f);
        self.fallback = self.fallback.map_params(&join(prefix, "fallback"), f);
        self
    }
}

/// Per-scale prediction head: 3x3 then 1x1 to a single logit channel.
#[derive(Clone, Debug)]
pub struct PredHead<B: Backend> {
    conv3: Conv2d<B>,
    reduce: Conv2d<B>,
}

impl<B: Backend> PredHead<B> {
    fn new(channels: usize, device: &B::Device) -> Self {
        Self {
            conv3: Conv2d::new(channels, channels, 3, device),
            reduce: Conv2d::new(channels, 1, 1, device),
        }
    }

    pub fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        self.reduce.forward(relu(self.conv3.forward(x)))
    }
}

impl<B: Backend> NamedParams<B> for PredHead<B> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, ParamRef<'_, B>)) {
        self.conv3.visit_params(&join(prefix, "conv3"), f);
        self.reduce.visit_params(&join(prefix, "reduce"), f);
    }

    fn map_params(
        mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ParamValue<B>) -> ParamValue<B>,
    ) -> Self {
        self.conv3 = self.conv3.map_params(&join(prefix, "conv3"), f);
        self.reduce = self.reduce.map_params(&join(prefix, "reduce"), f);
        self
    }
}

/// Gate masks produced at one scale, at that scale's native resolution.
#[derive(Clone, Debug)]
pub struct ScaleMasks<B: Backend> {
    pub level: usize,
    pub mgfa: Option<GateMask<B>>,
    pub mgrm: Option<GateMask<B>>,
}

/// Per-scale logit maps plus the final probability map.
#[derive(Clone, Debug)]
pub struct SaliencyOutput<B: Backend> {
    /// One logit map per fused scale, deepest first, each upsampled to the
    /// input resolution for supervision.
    pub logits: Vec<Tensor<B, 4>>,
    /// Sigmoid of the shallowest scale's logits; values in [0, 1].
    pub final_prob: Tensor<B, 4>,
    /// Gate masks per scale, deepest first.
    pub masks: Vec<ScaleMasks<B>>,
}

#[derive(Clone, Debug)]
struct ScaleBlock<B: Backend> {
    level: usize,
    mgrm: Option<Mgrm<B>>,
    mgfa: Option<Mgfa<B>>,
    head: PredHead<B>,
}

impl<B: Backend> ScaleBlock<B> {
    /// Run one scale. `stream_up` is the carried stream already resized to
    /// this scale. Returns the scale output, its raw logits, and the masks.
    fn forward(
        &self,
        stream_up: Tensor<B, 4>,
        rgb: Tensor<B, 4>,
        depth: Option<Tensor<B, 4>>,
        trace: &mut Option<&mut Vec<String>>,
    ) -> (Tensor<B, 4>, Tensor<B, 4>, ScaleMasks<B>) {
        if let Some(t) = trace.as_deref_mut() {
            t.push(format!("s{}:stage1", self.level));
        }
        let (rgb_refined, mgrm_mask) = match &self.mgrm {
            Some(mgrm) => {
                let (refined, mask) = mgrm.refine_upsampled(stream_up.clone(), rgb.clone());
                (refined, Some(mask))
            }
            None => (rgb.clone(), None),
        };

        if let Some(t) = trace.as_deref_mut() {
            t.push(format!("s{}:stage2", self.level));
        }
        let (fused, mgfa_mask) = match (&self.mgfa, depth) {
            (Some(mgfa), Some(depth)) => {
                let out = mgfa.forward(stream_up, depth, rgb_refined.clone());
                (out.fused, Some(out.mask))
            }
            // Additive fusion ablation: raw modalities plus the stream.
            (None, Some(depth)) => (rgb + depth + stream_up, None),
            // Single-stream FPN: the carried stream alone.
            (None, None) => (stream_up, None),
            (Some(_), None) => panic!("aggregation block requires depth features"),
        };

        if let Some(t) = trace.as_deref_mut() {
            t.push(format!("s{}:stage3", self.level));
        }
        let output = fused + rgb_refined;
        let logits = self.head.forward(output.clone());
        (
            output,
            logits,
            ScaleMasks {
                level: self.level,
                mgfa: mgfa_mask,
                mgrm: mgrm_mask,
            },
        )
    }
}

impl<B: Backend> NamedParams<B> for ScaleBlock<B> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, ParamRef<'_, B>)) {
        self.mgrm.visit_params(&join(prefix, "mgrm"), f);
        self.mgfa.visit_params(&join(prefix, "mgfa"), f);
        self.head.visit_params(&join(prefix, "head"), f);
    }

    fn map_params(
        mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ParamValue<B>) -> ParamValue<B>,
    ) -> Self {
        self.mgrm = self.mgrm.map_params(&join(prefix, "mgrm"), f);
        self.mgfa = self.mgfa.map_params(&join(prefix, "mgfa"), f);
        self.head = self.head.map_params(&join(prefix, "head"), f);
        self
    }
}

/// The progressive multi-scale fusion network.
#[derive(Clone, Debug)]
pub struct PmfNet<B: Backend> {
    pub config: ModelConfig,
    rgb_stream: VggEncoder<B>,
    depth_stream: Option<VggEncoder<B>>,
    semantic: SemanticHead<B>,
    scales: Vec<ScaleBlock<B>>,
}

impl<B: Backend> PmfNet<B> {
    pub fn new(config: ModelConfig, device: &B::Device) -> Result<Self> {
        config.validate()?;
        let c = config.common_channels;
        let min_level = config.min_level();
        let rgb_stream = VggEncoder::new(c, min_level, device);
        let depth_stream = config
            .two_stream
            .then(|| VggEncoder::new(c, min_level, device));
        let semantic = SemanticHead::new(c, &config.aspp_rates, config.use_aspp, device);
        let scales = (min_level..=5)
            .rev()
            .map(|level| ScaleBlock {
                level,
                mgrm: config.use_mgrm.then(|| Mgrm::new(c, device)),
                mgfa: (config.two_stream && config.fusion_mode == FusionMode::Mgfa)
                    .then(|| Mgfa::new(c, device)),
                head: PredHead::new(c, device),
            })
            .collect();
        Ok(Self {
            config,
            rgb_stream,
            depth_stream,
            semantic,
            scales,
        })
    }

    pub fn rgb_stream(&self) -> &VggEncoder<B> {
        &self.rgb_stream
    }

    pub fn depth_stream(&self) -> Option<&VggEncoder<B>> {
        self.depth_stream.as_ref()
    }

    /// Load pretrained VGG19 weights into both backbone streams.
    pub fn load_pretrained_vgg(mut self, store: &crate::nn::ParamStore) -> Result<Self> {
        self.rgb_stream = self.rgb_stream.load_vgg19(store)?;
        if let Some(ds) = self.depth_stream.take() {
            self.depth_stream = Some(ds.load_vgg19(store)?);
        }
        Ok(self)
    }

    /// Full forward from images. `depth` is a single-channel map replicated
    /// to three channels for its backbone stream; it may be omitted only
    /// for single-stream configurations.
    pub fn forward(&self, rgb: Tensor<B, 4>, depth: Option<Tensor<B, 4>>) -> SaliencyOutput<B> {
        self.forward_traced(rgb, depth, None)
    }

    pub fn forward_traced(
        &self,
        rgb: Tensor<B, 4>,
        depth: Option<Tensor<B, 4>>,
        trace: Option<&mut Vec<String>>,
    ) -> SaliencyOutput<B> {
        let [_, c, h, w] = rgb.dims();
        assert_eq!(c, 3, "rgb input must have 3 channels");
        assert_eq!(h, w, "inputs must be square, got {h}x{w}");
        let rgb_pyr = self.rgb_stream.extract_pyramid(rgb);
        let depth_pyr = match (&self.depth_stream, depth) {
            (Some(stream), Some(depth)) => {
                let [_, dc, dh, dw] = depth.dims();
                assert_eq!(dc, 1, "depth input must be single-channel");
                assert_eq!((dh, dw), (h, w), "depth size must match rgb");
                Some(stream.extract_pyramid(depth.repeat_dim(1, 3)))
            }
            (Some(_), None) => panic!("two-stream model requires a depth input"),
            (None, _) => None,
        };
        self.forward_pyramids_traced(rgb_pyr, depth_pyr, trace)
    }

    /// Run the fusion decoder over already-extracted pyramids.
    pub fn forward_pyramids(
        &self,
        rgb_pyr: FeaturePyramid<B>,
        depth_pyr: Option<FeaturePyramid<B>>,
    ) -> SaliencyOutput<B> {
        self.forward_pyramids_traced(rgb_pyr, depth_pyr, None)
    }

    pub fn forward_pyramids_traced(
        &self,
        rgb_pyr: FeaturePyramid<B>,
        depth_pyr: Option<FeaturePyramid<B>>,
        mut trace: Option<&mut Vec<String>>,
    ) -> SaliencyOutput<B> {
        let min_level = self.config.min_level();
        assert_eq!(rgb_pyr.min_level, min_level, "pyramid depth mismatch");
        if let Some(dp) = &depth_pyr {
            assert_eq!(dp.min_level, min_level, "pyramid depth mismatch");
            for level in min_level..=5 {
                assert_eq!(
                    rgb_pyr.level(level).dims(),
                    dp.level(level).dims(),
                    "rgb/depth pyramids disagree at level {level}"
                );
            }
        }
        // Full input resolution recovered from the shallowest fused level.
        let fine = rgb_pyr.level(min_level).dims();
        let full = fine[2] << (min_level - 1);

        let mut stream = self.semantic.forward(rgb_pyr.level(5).clone());
        let mut logits = Vec::with_capacity(self.scales.len());
        let mut masks = Vec::with_capacity(self.scales.len());
        for block in &self.scales {
            let rgb_f = rgb_pyr.level(block.level).clone();
            let depth_f = depth_pyr.as_ref().map(|p| p.level(block.level).clone());
            let [_, _, th, tw] = rgb_f.dims();
            let upsampled = bilinear_resize(stream, th, tw);
            let (output, logit, scale_masks) =
                block.forward(upsampled, rgb_f, depth_f, &mut trace);
            logits.push(bilinear_resize(logit, full, full));
            masks.push(scale_masks);
            stream = output;
        }
        let final_prob = sigmoid(logits.last().expect("at least 3 scales").clone());
        SaliencyOutput {
            logits,
            final_prob,
            masks,
        }
    }
}

impl<B: Backend> NamedParams<B> for PmfNet<B> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, ParamRef<'_, B>)) {
        self.rgb_stream.visit_params(&join(prefix, "rgb_stream"), f);
        self.depth_stream
            .visit_params(&join(prefix, "depth_stream"), f);
        self.semantic.visit_params(&join(prefix, "aspp"), f);
        for block in &self.scales {
            block.visit_params(&join(prefix, &format!("scales.{}", block.level)), f);
        }
    }

    fn map_params(
        mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ParamValue<B>) -> ParamValue<B>,
    ) -> Self {
        self.rgb_stream = self.rgb_stream.map_params(&join(prefix, "rgb_stream"), f);
        self.depth_stream = self
            .depth_stream
            .map_params(&join(prefix, "depth_stream"), f);
        self.semantic = self.semantic.map_params(&join(prefix, "aspp"), f);
        self.scales = self
            .scales
            .into_iter()
            .map(|block| {
                let level = block.level;
                block.map_params(&join(prefix, &format!("scales.{level}")), f)
            })
            .collect();
        self
    }
}
