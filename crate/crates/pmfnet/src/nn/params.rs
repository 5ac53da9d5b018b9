//! Named traversal of module parameters.
//!
//! Checkpoints are flat dictionaries keyed by dotted paths (for example
//! `rgb_stream.stages.0.convs.0.weight`), and the optimizer keeps momentum
//! buffers under the same names. Every module therefore implements
//! [`NamedParams`], which walks parameters in declaration order with their
//! full path.

use std::collections::BTreeMap;

use burn::module::{Param, RunningState};
use burn::nn::BatchNorm;
use burn::prelude::*;
use burn::tensor::backend::AutodiffBackend;
use burn::tensor::ElementConversion;

use crate::error::{PmfError, Result};
use crate::nn::conv::{Conv2d, ConvBlock, DeformConv2d};

/// Borrowed view of one named tensor in a module tree.
pub enum ParamRef<'a, B: Backend> {
    /// Trainable rank-1 parameter (biases, batch-norm scale/shift).
    Weight1(&'a Param<Tensor<B, 1>>),
    /// Trainable rank-4 parameter (convolution kernels).
    Weight4(&'a Param<Tensor<B, 4>>),
    /// Non-trainable running statistic (batch-norm mean/variance).
    Buffer1(&'a RunningState<Tensor<B, 1>>),
}

/// Owned tensor passing through [`NamedParams::map_params`].
pub enum ParamValue<B: Backend> {
    Weight1(Tensor<B, 1>),
    Weight4(Tensor<B, 4>),
    Buffer1(Tensor<B, 1>),
}

pub trait NamedParams<B: Backend>: Sized {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, ParamRef<'_, B>));

    fn map_params(
        self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ParamValue<B>) -> ParamValue<B>,
    ) -> Self;
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn map_w1<B: Backend>(
    p: Param<Tensor<B, 1>>,
    name: &str,
    f: &mut dyn FnMut(&str, ParamValue<B>) -> ParamValue<B>,
) -> Param<Tensor<B, 1>> {
    p.map(|t| match f(name, ParamValue::Weight1(t)) {
        ParamValue::Weight1(t) => t,
        _ => panic!("parameter {name} changed rank during map"),
    })
}

fn map_w4<B: Backend>(
    p: Param<Tensor<B, 4>>,
    name: &str,
    f: &mut dyn FnMut(&str, ParamValue<B>) -> ParamValue<B>,
) -> Param<Tensor<B, 4>> {
    p.map(|t| match f(name, ParamValue::Weight4(t)) {
        ParamValue::Weight4(t) => t,
        _ => panic!("parameter {name} changed rank during map"),
    })
}

fn map_running<B: Backend>(
    rs: RunningState<Tensor<B, 1>>,
    name: &str,
    f: &mut dyn FnMut(&str, ParamValue<B>) -> ParamValue<B>,
) -> RunningState<Tensor<B, 1>> {
    let value = rs.value_sync();
    match f(name, ParamValue::Buffer1(value)) {
        ParamValue::Buffer1(t) => RunningState::new(t),
        _ => panic!("buffer {name} changed rank during map"),
    }
}

impl<B: Backend> NamedParams<B> for Conv2d<B> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, ParamRef<'_, B>)) {
        f(join(prefix, "weight"), ParamRef::Weight4(&self.weight));
        if let Some(bias) = &self.bias {
            f(join(prefix, "bias"), ParamRef::Weight1(bias));
        }
    }

    fn map_params(
        mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ParamValue<B>) -> ParamValue<B>,
    ) -> Self {
        self.weight = map_w4(self.weight, &join(prefix, "weight"), f);
        self.bias = self.bias.map(|b| map_w1(b, &join(prefix, "bias"), f));
        self
    }
}

impl<B: Backend> NamedParams<B> for BatchNorm<B> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, ParamRef<'_, B>)) {
        f(join(prefix, "gamma"), ParamRef::Weight1(&self.gamma));
        f(join(prefix, "beta"), ParamRef::Weight1(&self.beta));
        f(
            join(prefix, "running_mean"),
            ParamRef::Buffer1(&self.running_mean),
        );
        f(
            join(prefix, "running_var"),
            ParamRef::Buffer1(&self.running_var),
        );
    }

    fn map_params(
        mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ParamValue<B>) -> ParamValue<B>,
    ) -> Self {
        self.gamma = map_w1(self.gamma, &join(prefix, "gamma"), f);
        self.beta = map_w1(self.beta, &join(prefix, "beta"), f);
        self.running_mean = map_running(self.running_mean, &join(prefix, "running_mean"), f);
        self.running_var = map_running(self.running_var, &join(prefix, "running_var"), f);
        self
    }
}

impl<B: Backend> NamedParams<B> for ConvBlock<B> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, ParamRef<'_, B>)) {
        self.conv.visit_params(&join(prefix, "conv"), f);
        self.bn.visit_params(&join(prefix, "bn"), f);
    }

    fn map_params(
        mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ParamValue<B>) -> ParamValue<B>,
    ) -> Self {
        self.conv = self.conv.map_params(&join(prefix, "conv"), f);
        self.bn = self.bn.map_params(&join(prefix, "bn"), f);
        self
    }
}

impl<B: Backend> NamedParams<B> for DeformConv2d<B> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, ParamRef<'_, B>)) {
        self.offset.visit_params(&join(prefix, "offset"), f);
        f(join(prefix, "weight"), ParamRef::Weight4(&self.weight));
        f(join(prefix, "bias"), ParamRef::Weight1(&self.bias));
    }

    fn map_params(
        mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ParamValue<B>) -> ParamValue<B>,
    ) -> Self {
        self.offset = self.offset.map_params(&join(prefix, "offset"), f);
        self.weight = map_w4(self.weight, &join(prefix, "weight"), f);
        self.bias = map_w1(self.bias, &join(prefix, "bias"), f);
        self
    }
}

impl<B: Backend, T: NamedParams<B>> NamedParams<B> for Vec<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, ParamRef<'_, B>)) {
        for (i, m) in self.iter().enumerate() {
            m.visit_params(&join(prefix, &i.to_string()), f);
        }
    }

    fn map_params(
        self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ParamValue<B>) -> ParamValue<B>,
    ) -> Self {
        self.into_iter()
            .enumerate()
            .map(|(i, m)| m.map_params(&join(prefix, &i.to_string()), f))
            .collect()
    }
}

impl<B: Backend, T: NamedParams<B>> NamedParams<B> for Option<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, ParamRef<'_, B>)) {
        if let Some(m) = self {
            m.visit_params(prefix, f);
        }
    }

    fn map_params(
        self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ParamValue<B>) -> ParamValue<B>,
    ) -> Self {
        self.map(|m| m.map_params(prefix, f))
    }
}

/// Flat tensor snapshot used by checkpoints and the optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub type ParamStore = BTreeMap<String, StoredTensor>;

fn snapshot1<B: Backend>(t: Tensor<B, 1>) -> StoredTensor {
    let shape = t.dims().to_vec();
    let data = t.into_data().to_vec::<f32>().expect("f32 tensor data");
    StoredTensor { shape, data }
}

fn snapshot4<B: Backend>(t: Tensor<B, 4>) -> StoredTensor {
    let shape = t.dims().to_vec();
    let data = t.into_data().to_vec::<f32>().expect("f32 tensor data");
    StoredTensor { shape, data }
}

/// Snapshot every parameter and buffer under its dotted path.
pub fn save_to_store<B: Backend, M: NamedParams<B>>(module: &M) -> ParamStore {
    let mut store = ParamStore::new();
    module.visit_params("", &mut |name, p| {
        let stored = match p {
            ParamRef::Weight1(p) => snapshot1(p.val()),
            ParamRef::Weight4(p) => snapshot4(p.val()),
            ParamRef::Buffer1(rs) => snapshot1(rs.value_sync()),
        };
        store.insert(name, stored);
    });
    store
}

/// Replace every parameter and buffer from the store.
///
/// Fails if the store is missing a key, has a shape mismatch, or carries
/// keys the module does not know about.
pub fn load_from_store<B: Backend, M: NamedParams<B>>(module: M, store: &ParamStore) -> Result<M> {
    let mut missing: Vec<String> = Vec::new();
    let mut mismatched: Vec<String> = Vec::new();
    let mut seen: Vec<String> = Vec::new();

    let module = module.map_params("", &mut |name, old| {
        seen.push(name.to_string());
        let stored = match store.get(name) {
            Some(s) => s,
            None => {
                missing.push(name.to_string());
                return old;
            }
        };
        match old {
            ParamValue::Weight4(t) => {
                if stored.shape != t.dims().to_vec() {
                    mismatched.push(name.to_string());
                    return ParamValue::Weight4(t);
                }
                let new = Tensor::from_data(
                    burn::tensor::TensorData::new(stored.data.clone(), stored.shape.clone()),
                    &t.device(),
                );
                ParamValue::Weight4(new)
            }
            ParamValue::Weight1(t) => {
                if stored.shape != t.dims().to_vec() {
                    mismatched.push(name.to_string());
                    return ParamValue::Weight1(t);
                }
                let new = Tensor::from_data(
                    burn::tensor::TensorData::new(stored.data.clone(), stored.shape.clone()),
                    &t.device(),
                );
                ParamValue::Weight1(new)
            }
            ParamValue::Buffer1(t) => {
                if stored.shape != t.dims().to_vec() {
                    mismatched.push(name.to_string());
                    return ParamValue::Buffer1(t);
                }
                let new = Tensor::from_data(
                    burn::tensor::TensorData::new(stored.data.clone(), stored.shape.clone()),
                    &t.device(),
                );
                ParamValue::Buffer1(new)
            }
        }
    });

    let unused: Vec<&String> = store.keys().filter(|k| !seen.contains(k)).collect();
    if !missing.is_empty() || !mismatched.is_empty() || !unused.is_empty() {
        return Err(PmfError::Checkpoint(format!(
            "parameter mismatch; missing: {missing:?}, shape-mismatched: {mismatched:?}, unknown: {unused:?}"
        )));
    }
    Ok(module)
}

/// `(path, shape, trainable)` for every named tensor.
pub fn param_manifest<B: Backend, M: NamedParams<B>>(module: &M) -> Vec<(String, Vec<usize>, bool)> {
    let mut out = Vec::new();
    module.visit_params("", &mut |name, p| {
        let (shape, trainable) = match p {
            ParamRef::Weight1(p) => (p.val().dims().to_vec(), true),
            ParamRef::Weight4(p) => (p.val().dims().to_vec(), true),
            ParamRef::Buffer1(rs) => (rs.value_sync().dims().to_vec(), false),
        };
        out.push((name, shape, trainable));
    });
    out
}

/// Total number of trainable scalar parameters.
pub fn num_trainable_params<B: Backend, M: NamedParams<B>>(module: &M) -> usize {
    param_manifest(module)
        .iter()
        .filter(|(_, _, trainable)| *trainable)
        .map(|(_, shape, _)| shape.iter().product::<usize>())
        .sum()
}

/// Gradient of one named parameter on the inner (non-autodiff) backend.
pub enum GradTensor<B: Backend> {
    D1(Tensor<B, 1>),
    D4(Tensor<B, 4>),
}

impl<B: Backend> GradTensor<B> {
    pub fn l2_norm(&self) -> f32 {
        match self {
            GradTensor::D1(t) => t.clone().powf_scalar(2.0).sum().sqrt().into_scalar().elem::<f32>(),
            GradTensor::D4(t) => t.clone().powf_scalar(2.0).sum().sqrt().into_scalar().elem::<f32>(),
        }
    }
}

/// Collect gradients for every trainable parameter, keyed by path.
/// `None` marks a parameter the backward pass never reached.
pub fn named_grads<B: AutodiffBackend, M: NamedParams<B>>(
    module: &M,
    grads: &B::Gradients,
) -> BTreeMap<String, Option<GradTensor<B::InnerBackend>>> {
    let mut out = BTreeMap::new();
    module.visit_params("", &mut |name, p| match p {
        ParamRef::Weight1(p) => {
            out.insert(name, p.val().grad(grads).map(GradTensor::D1));
        }
        ParamRef::Weight4(p) => {
            out.insert(name, p.val().grad(grads).map(GradTensor::D4));
        }
        ParamRef::Buffer1(_) => {}
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::TestBackend;

    #[test]
    fn store_round_trip_restores_values() {
        let device = Default::default();
        let block = ConvBlock::<TestBackend>::new(3, 8, 3, &device);
        let store = save_to_store(&block);
        assert!(store.contains_key("conv.weight"));
        assert!(store.contains_key("bn.running_mean"));

        let other = ConvBlock::<TestBackend>::new(3, 8, 3, &device);
        let loaded = load_from_store(other, &store).unwrap();
        let restored = save_to_store(&loaded);
        assert_eq!(store, restored);
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let device = Default::default();
        let block = ConvBlock::<TestBackend>::new(3, 8, 3, &device);
        let mut store = save_to_store(&block);
        store.insert(
            "conv.weight".into(),
            StoredTensor {
                shape: vec![8, 3, 1, 1],
                data: vec![0.0; 24],
            },
        );
        assert!(load_from_store(ConvBlock::<TestBackend>::new(3, 8, 3, &device), &store).is_err());
    }

    #[test]
    fn load_rejects_unknown_keys() {
        let device = Default::default();
        let block = ConvBlock::<TestBackend>::new(3, 8, 3, &device);
        let mut store = save_to_store(&block);
        store.insert(
            "ghost".into(),
            StoredTensor {
                shape: vec![1],
                data: vec![0.0],
            },
        );
        assert!(load_from_store(ConvBlock::<TestBackend>::new(3, 8, 3, &device), &store).is_err());
    }

    #[test]
    fn trainable_count_excludes_running_stats() {
        let device = Default::default();
        let block = ConvBlock::<TestBackend>::new(3, 8, 3, &device);
        // conv: 8*3*3*3 weights + 8 bias; bn: gamma 8 + beta 8.
        assert_eq!(num_trainable_params(&block), 8 * 3 * 3 * 3 + 8 + 8 + 8);
    }
}
