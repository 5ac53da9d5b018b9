//! Mask-guided feature aggregation: a sigmoid mask predicted from the
//! semantic stream gates the depth features, a dense block enriches the
//! stream, and refined RGB, gated depth, and dense features are
//! concatenated and projected back to the common width.

use burn::prelude::*;
use burn::tensor::activation::{relu, sigmoid};

use crate::nn::{join, Conv2d, ConvBlock, NamedParams, ParamRef, ParamValue};

/// Growth rate of the dense block.
pub const DENSE_GROWTH: usize = 32;
/// Number of densely connected layers.
pub const DENSE_LAYERS: usize = 3;

/// Single-channel sigmoid gate, entries strictly inside (0, 1), broadcast
/// across feature channels.
#[derive(Clone, Debug)]
pub struct GateMask<B: Backend> {
    pub values: Tensor<B, 4>,
}

impl<B: Backend> GateMask<B> {
    /// Element-wise product with a feature tensor, mask broadcast over
    /// channels. Since every entry lies in (0, 1) this never grows a value.
    pub fn gate(&self, features: Tensor<B, 4>) -> Tensor<B, 4> {
        let [bm, cm, hm, wm] = self.values.dims();
        let [bf, _, hf, wf] = features.dims();
        assert_eq!(cm, 1, "gate mask must be single-channel");
        assert_eq!(
            (bm, hm, wm),
            (bf, hf, wf),
            "mask {:?} does not match features {:?}",
            self.values.dims(),
            features.dims()
        );
        features * self.values.clone()
    }
}

/// Stack of hidden 3x3 convolutions followed by a 1x1 reduction to one
/// channel and a sigmoid. No batch norm: the head must emit exactly 0.5 on
/// zero input with zero-initialized biases.
#[derive(Clone, Debug)]
pub struct MaskHead<B: Backend> {
    hidden: Vec<Conv2d<B>>,
    reduce: Conv2d<B>,
}

impl<B: Backend> MaskHead<B> {
    pub fn new(channels: usize, n_hidden: usize, device: &B::Device) -> Self {
        Self {
            hidden: (0..n_hidden)
                .map(|_| Conv2d::new(channels, channels, 3, device))
                .collect(),
            reduce: Conv2d::new(channels, 1, 1, device),
        }
    }

    pub fn forward(&self, x: Tensor<B, 4>) -> GateMask<B> {
        let mut x = x;
        for conv in &self.hidden {
            x = relu(conv.forward(x));
        }
        GateMask {
            values: sigmoid(self.reduce.forward(x)),
        }
    }
}

impl<B: Backend> NamedParams<B> for MaskHead<B> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, ParamRef<'_, B>)) {
        self.hidden.visit_params(&join(prefix, "hidden"), f);
        self.reduce.visit_params(&join(prefix, "reduce"), f);
    }

    fn map_params(
        mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ParamValue<B>) -> ParamValue<B>,
    ) -> Self {
        self.hidden = self.hidden.map_params(&join(prefix, "hidden"), f);
        self.reduce = self.reduce.map_params(&join(prefix, "reduce"), f);
        self
    }
}

/// Three densely connected 3x3 layers (each sees the input plus all
/// previous outputs) with a 1x1 projection back to the common width.
#[derive(Clone, Debug)]
pub struct DenseBlock<B: Backend> {
    layers: Vec<ConvBlock<B>>,
    project: ConvBlock<B>,
}

impl<B: Backend> DenseBlock<B> {
    pub fn new(channels: usize, device: &B::Device) -> Self {
        let layers = (0..DENSE_LAYERS)
            .map(|k| ConvBlock::new(channels + k * DENSE_GROWTH, DENSE_GROWTH, 3, device))
            .collect();
        Self {
            layers,
            project: ConvBlock::new(channels + DENSE_LAYERS * DENSE_GROWTH, channels, 1, device),
        }
    }

    pub fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        let mut feats = vec![x];
        for layer in &self.layers {
            let out = layer.forward(Tensor::cat(feats.clone(), 1));
            feats.push(out);
        }
        self.project.forward(Tensor::cat(feats, 1))
    }

    /// Input width of the final projection; `C + layers * growth`.
    pub fn projection_in_channels(&self) -> usize {
        self.project.conv.weight.val().dims()[1]
    }
}

impl<B: Backend> NamedParams<B> for DenseBlock<B> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, ParamRef<'_, B>)) {
        self.layers.visit_params(&join(prefix, "layers"), f);
        self.project.visit_params(&join(prefix, "project"), f);
    }

    fn map_params(
        mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ParamValue<B>) -> ParamValue<B>,
    ) -> Self {
        self.layers = self.layers.map_params(&join(prefix, "layers"), f);
        self.project = self.project.map_params(&join(prefix, "project"), f);
        self
    }
}

#[derive(Clone, Debug)]
pub struct MgfaOutput<B: Backend> {
    /// Aggregated feature map at the common width.
    pub fused: Tensor<B, 4>,
    /// The depth gate, retained for inspection and mask dumps.
    pub mask: GateMask<B>,
}

/// The aggregation module for one scale.
#[derive(Clone, Debug)]
pub struct Mgfa<B: Backend> {
    mask_head: MaskHead<B>,
    dense: DenseBlock<B>,
    project: ConvBlock<B>,
}

impl<B: Backend> Mgfa<B> {
    pub fn new(channels: usize, device: &B::Device) -> Self {
        Self {
            // Two hidden 3x3 convolutions plus the 1x1 reduction.
            mask_head: MaskHead::new(channels, 2, device),
            dense: DenseBlock::new(channels, device),
            project: ConvBlock::new(3 * channels, channels, 1, device),
        }
    }

    /// Sigmoid gate predicted from the semantic stream.
    pub fn depth_mask(&self, stream: Tensor<B, 4>) -> GateMask<B> {
        self.mask_head.forward(stream)
    }

    pub fn dense_block(&self, stream: Tensor<B, 4>) -> Tensor<B, 4> {
        self.dense.forward(stream)
    }

    /// Concatenate refined RGB, gated depth and dense features (3C) and
    /// project back to C. The projection makes the later sum with the
    /// refined RGB features dimensionally valid.
    pub fn aggregate(
        &self,
        rgb_refined: Tensor<B, 4>,
        depth_gated: Tensor<B, 4>,
        dense: Tensor<B, 4>,
    ) -> Tensor<B, 4> {
        let c = rgb_refined.dims()[1];
        assert!(
            depth_gated.dims()[1] == c && dense.dims()[1] == c,
            "aggregate inputs must share the common width"
        );
        self.project
            .forward(Tensor::cat(vec![rgb_refined, depth_gated, dense], 1))
    }

    /// Full per-scale aggregation given the upsampled stream, the depth
    /// level features, and the refined RGB features from the refinement
    /// module.
    pub fn forward(
        &self,
        stream: Tensor<B, 4>,
        depth: Tensor<B, 4>,
        rgb_refined: Tensor<B, 4>,
    ) -> MgfaOutput<B> {
        let mask = self.depth_mask(stream.clone());
        let gated = mask.gate(depth);
        let dense = self.dense_block(stream);
        let fused = self.aggregate(rgb_refined, gated, dense);
        MgfaOutput { fused, mask }
    }
}

impl<B: Backend> NamedParams<B> for Mgfa<B> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, ParamRef<'_, B>)) {
        self.mask_head.visit_params(&join(prefix, "mask"), f);
        self.dense.visit_params(&join(prefix, "dense"), f);
        self.project.visit_params(&join(prefix, "project"), f);
    }

    fn map_params(
        mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ParamValue<B>) -> ParamValue<B>,
    ) -> Self {
        self.mask_head = self.mask_head.map_params(&join(prefix, "mask"), f);
        self.dense = self.dense.map_params(&join(prefix, "dense"), f);
        self.project = self.project.map_params(&join(prefix, "project"), f);
        self
    }
}
