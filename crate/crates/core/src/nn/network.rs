//! Sequential residual CNN with named, freezable nodes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{BatchNorm, Conv2d, Dense, GlobalAvgPool, Layer, Mode, Param, Relu, ResidualBlock};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Width of the hidden layer in the adapted head.
pub const HEAD_UNITS: usize = 32;

/// Shape of the convolutional backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub input_side: usize,
    pub input_channels: usize,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    /// Output width of each stage; stages after the first halve the resolution.
    pub widths: Vec<usize>,
    /// Residual blocks per stage.
    pub blocks: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl BackboneConfig {
    /// Small backbone that trains in seconds on one core.
    pub fn desk() -> Self {
        BackboneConfig {
            input_side: 64,
            input_channels: 3,
            stem_channels: 8,
            stem_kernel: 3,
            stem_stride: 1,
            widths: vec![8, 16, 32],
            blocks: vec![1, 1, 1],
        }
    }

    /// ResNet-18 layout: 7x7/2 stem with 64 channels, four stages of two blocks.
    pub fn resnet18(input_side: usize) -> Self {
        BackboneConfig {
            input_side,
            input_channels: 3,
            stem_channels: 64,
            stem_kernel: 7,
            stem_stride: 2,
            widths: vec![64, 128, 256, 512],
            blocks: vec![2, 2, 2, 2],
        }
    }

    pub fn downsampling(&self) -> usize {
        self.stem_stride << self.widths.len().saturating_sub(1)
    }

    pub fn feature_width(&self) -> usize {
        *self.widths.last().unwrap_or(&self.stem_channels)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.input_side == 0 || self.input_channels == 0 || self.stem_channels == 0 {
            return bad("backbone sizes must be positive".into());
        }
        if self.stem_kernel == 0 || self.stem_stride == 0 {
            return bad("stem kernel and stride must be positive".into());
        }
        if self.widths.is_empty() || self.widths.len() != self.blocks.len() {
            return bad("widths and blocks must be non-empty and of equal length".into());
        }
        if self.widths.contains(&0) || self.blocks.contains(&0) {
            return bad("stage widths and block counts must be positive".into());
        }
        if !self.input_side.is_multiple_of(self.downsampling()) {
            return bad(format!(
                "downsampling factor {} does not divide input side {}",
                self.downsampling(),
                self.input_side
            ));
        }
        Ok(())
    }
}

/// Which part of the model a node belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Backbone,
    Adapter,
    Output,
    Head,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Node<T> {
    pub name: String,
    pub group: Group,
    pub frozen: bool,
    pub layer: Layer<T>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Network<T> {
    pub config: BackboneConfig,
    pub nodes: Vec<Node<T>>,
}

impl<T: Scalar> Network<T> {
    /// Backbone, appended residual block, global pooling and a single-logit output.
    pub fn base(config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pad = config.stem_kernel / 2;
        let mut nodes = Vec::new();
        let mut push = |name: String, group: Group, layer: Layer<T>| {
            nodes.push(Node {
                name,
                group,
                frozen: false,
                layer,
            })
        };
        push(
            "stem.conv".into(),
            Group::Backbone,
            Layer::Conv(Conv2d::new(
                config.input_channels,
                config.stem_channels,
                config.stem_kernel,
                config.stem_stride,
                pad,
                false,
                &mut rng,
            )),
        );
        push("stem.bn".into(), Group::Backbone, Layer::BatchNorm(BatchNorm::new(config.stem_channels)));
        push("stem.relu".into(), Group::Backbone, Layer::Relu(Relu::default()));
        let mut channels = config.stem_channels;
        for (s, (&width, &blocks)) in config.widths.iter().zip(&config.blocks).enumerate() {
            for b in 0..blocks {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let block = ResidualBlock::new(channels, width, stride, &mut rng);
                push(format!("stage{}.block{}", s + 1, b + 1), Group::Backbone, Layer::Residual(Box::new(block)));
                channels = width;
            }
        }
        push(
            "adapter.block".into(),
            Group::Adapter,
            Layer::Residual(Box::new(ResidualBlock::new(channels, channels, 1, &mut rng))),
        );
        push("pool".into(), Group::Adapter, Layer::GlobalAvgPool(GlobalAvgPool::default()));
        push("output".into(), Group::Output, Layer::Dense(Dense::glorot(channels, 1, &mut rng)));
        Ok(Network {
            config: config.clone(),
            nodes,
        })
    }

    /// Replaces the output layer with `dense(F->32) -> batch norm -> relu -> dense(32->1)`
    /// and freezes every other node.
    pub fn adapt_head(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.nodes.retain(|n| n.group != Group::Output && n.group != Group::Head);
        for n in &mut self.nodes {
            n.frozen = true;
        }
        let f = self.config.feature_width();
        let head = [
            ("head.dense", Layer::Dense(Dense::he(f, HEAD_UNITS, &mut rng))),
            ("head.bn", Layer::BatchNorm(BatchNorm::new(HEAD_UNITS))),
            ("head.relu", Layer::Relu(Relu::default())),
            ("head.output", Layer::Dense(Dense::glorot(HEAD_UNITS, 1, &mut rng))),
        ];
        for (name, layer) in head {
            self.nodes.push(Node {
                name: name.into(),
                group: Group::Head,
                frozen: false,
                layer,
            });
        }
    }

    /// Sets the frozen flag of every node from a predicate.
    pub fn freeze_where(&mut self, pred: impl Fn(&Node<T>) -> bool) {
        for n in &mut self.nodes {
            n.frozen = pred(n);
        }
    }

    pub fn freeze_all(&mut self) {
        self.freeze_where(|_| true);
    }

    pub fn unfreeze_all(&mut self) {
        self.freeze_where(|_| false);
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.config.input_channels, self.config.input_side, self.config.input_side]
    }

    /// Index of the first node with trainable parameters, or `nodes.len()`.
    pub fn first_trainable(&self) -> usize {
        self.nodes
            .iter()
            .position(|n| !n.frozen && n.layer.has_params())
            .unwrap_or(self.nodes.len())
    }

    /// Index of the global pooling node (the feature layer).
    pub fn pool_index(&self) -> usize {
        self.nodes
            .iter()
            .position(|n| matches!(n.layer, Layer::GlobalAvgPool(_)))
            .expect("network has a pooling node")
    }

    /// Runs nodes `start..end`. Frozen nodes always use running statistics in
    /// `Mode::Train`; `record` keeps the state needed by [`Network::backward`].
    pub fn forward_range(&mut self, x: &Tensor<T>, start: usize, end: usize, mode: Mode, record: bool) -> Result<Tensor<T>> {
        if start == 0 {
            let expect = self.input_shape();
            if x.shape().len() != 4 || x.shape()[1..] != expect {
                let mut e = vec![x.batch()];
                e.extend_from_slice(&expect);
                return Err(Error::ShapeMismatch {
                    expected: e,
                    actual: x.shape().to_vec(),
                });
            }
        }
        let mut h = x.clone();
        for node in &mut self.nodes[start..end] {
            let node_mode = if node.frozen && mode == Mode::Train { Mode::Eval } else { mode };
            h = node.layer.forward(&h, node_mode, record)?;
            if !h.all_finite() {
                return Err(Error::NonFinite { layer: node.name.clone() });
            }
        }
        Ok(h)
    }

    /// Logits `(N, 1)` for a batch `(N, C, S, S)`.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let end = self.nodes.len();
        self.forward_range(x, 0, end, mode, false)
    }

    /// Clamped sigmoid probabilities for a batch.
    pub fn predict_proba(&mut self, x: &Tensor<T>) -> Result<Vec<T>> {
        let logits = self.forward(x, Mode::Eval)?;
        Ok(logits.data().iter().map(|&z| super::loss::sigmoid(z)).collect())
    }

    /// Back-propagates `dy` through nodes `start..` (which must have been run with
    /// `record`), accumulating gradients of trainable nodes. Stops below the first
    /// trainable node, so frozen prefixes cost nothing.
    pub fn backward(&mut self, dy: &Tensor<T>, start: usize) -> Result<()> {
        let first = self.first_trainable().max(start);
        let mut g = dy.clone();
        for idx in (first..self.nodes.len()).rev() {
            let node = &mut self.nodes[idx];
            let accumulate = !node.frozen;
            let need_dx = idx > first;
            match node.layer.backward(&g, accumulate, need_dx) {
                Some(dx) => {
                    if !dx.all_finite() {
                        return Err(Error::NonFinite { layer: node.name.clone() });
                    }
                    g = dx;
                }
                None => break,
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.layer.visit_params_mut(&mut |p| p.zero_grad());
        }
    }

    /// Re-estimates batch-norm running statistics as the average of batch statistics
    /// over `batches`, without touching learned parameters.
    pub fn calibrate_batchnorm(&mut self, batches: &[Tensor<T>]) -> Result<()> {
        for n in &mut self.nodes {
            for bn in n.layer.batch_norms_mut() {
                bn.reset_running_stats();
            }
        }
        let end = self.nodes.len();
        for b in batches {
            self.forward_range(b, 0, end, Mode::Calibrate, false)?;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        for node in &self.nodes {
            node.layer.visit_params(&mut |p| n += p.value.len());
        }
        n
    }

    /// All parameter values in declaration order.
    pub fn params_flat(&self) -> Vec<T> {
        let mut out = Vec::new();
        for node in &self.nodes {
            node.layer.visit_params(&mut |p| out.extend_from_slice(&p.value));
        }
        out
    }

    /// Gradients in the same order as [`Network::params_flat`]; zero where none.
    pub fn grads_flat(&self) -> Vec<T> {
        let mut out = Vec::new();
        for node in &self.nodes {
            node.layer.visit_params(&mut |p: &Param<T>| {
                if p.grad.len() == p.value.len() {
                    out.extend_from_slice(&p.grad);
                } else {
                    out.extend(std::iter::repeat_n(T::zero(), p.value.len()));
                }
            });
        }
        out
    }

    /// Trainable flag per flat parameter coordinate.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            let t = !node.frozen;
            node.layer.visit_params(&mut |p| out.extend(std::iter::repeat_n(t, p.value.len())));
        }
        out
    }

    pub fn set_param(&mut self, index: usize, value: T) {
        let mut offset = 0;
        for node in &mut self.nodes {
            let mut done = false;
            node.layer.visit_params_mut(&mut |p| {
                if !done && index < offset + p.value.len() {
                    p.value[index - offset] = value;
                    done = true;
                }
                offset += p.value.len();
            });
            if done {
                return;
            }
        }
        panic!("parameter index {index} out of range");
    }

    /// Applies `f(global_index, value, grad)` to every parameter of trainable nodes.
    pub fn update_trainable(&mut self, mut f: impl FnMut(usize, &mut T, T)) {
        let mut offset = 0;
        for node in &mut self.nodes {
            let frozen = node.frozen;
            node.layer.visit_params_mut(&mut |p| {
                if !frozen {
                    let len = p.value.len();
                    let grad = std::mem::take(&mut p.grad);
                    for i in 0..len {
                        let g = grad.get(i).copied().unwrap_or_else(T::zero);
                        f(offset + i, &mut p.value[i], g);
                    }
                    p.grad = grad;
                }
                offset += p.value.len();
            });
        }
    }

    /// SHA-256 over configuration, node layout, parameters and running statistics.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for node in &self.nodes {
            h.update(node.name.as_bytes());
            h.update([node.frozen as u8]);
            node.layer.visit_params(&mut |p| {
                for v in &p.value {
                    h.update(v.le_bytes());
                }
            });
            node.layer.visit_buffers(&mut |b| {
                for v in b {
                    h.update(v.le_bytes());
                }
            });
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            input_side: 8,
            input_channels: 1,
            stem_channels: 2,
            stem_kernel: 3,
            stem_stride: 1,
            widths: vec![2, 4],
            blocks: vec![1, 1],
        }
    }

    #[test]
    fn downsampling_must_divide_side() {
        let mut c = tiny();
        c.input_side = 6;
        c.widths = vec![2, 4, 4];
        c.blocks = vec![1, 1, 1];
        assert!(c.validate().is_err());
        assert!(BackboneConfig::desk().validate().is_ok());
        assert!(BackboneConfig::resnet18(64).validate().is_ok());
    }

    #[test]
    fn base_network_outputs_one_logit_per_sample() {
        let mut net = Network::<f64>::base(&tiny(), 3).unwrap();
        let x = Tensor::new(vec![2, 1, 8, 8], (0..128).map(|i| (i % 3) as f64).collect()).unwrap();
        let y = net.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.shape(), &[2, 1]);
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let mut net = Network::<f64>::base(&tiny(), 3).unwrap();
        let x = Tensor::zeros(vec![1, 1, 4, 4]);
        assert!(matches!(net.forward(&x, Mode::Eval), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn head_adaptation_freezes_everything_else() {
        let mut net = Network::<f64>::base(&tiny(), 3).unwrap();
        net.adapt_head(4);
        let names: Vec<_> = net.nodes.iter().filter(|n| !n.frozen).map(|n| n.name.as_str()).collect();
        assert_eq!(names, ["head.dense", "head.bn", "head.relu", "head.output"]);
        assert_eq!(net.first_trainable(), net.pool_index() + 1);
    }

    #[test]
    fn set_param_addresses_flat_order() {
        let mut net = Network::<f64>::base(&tiny(), 3).unwrap();
        let n = net.param_count();
        net.set_param(n - 1, 7.5);
        net.set_param(0, -1.0);
        let flat = net.params_flat();
        assert_eq!(flat[n - 1], 7.5);
        assert_eq!(flat[0], -1.0);
    }

    #[test]
    fn hash_changes_with_parameters() {
        let mut net = Network::<f64>::base(&tiny(), 3).unwrap();
        let before = net.hash();
        assert_eq!(before, net.clone().hash());
        net.set_param(5, 0.123);
        assert_ne!(before, net.hash());
    }
}
