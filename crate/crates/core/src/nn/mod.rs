//! CPU neural-network kernel: tensors, layers, a freezable residual network,
//! focal loss, optimizers and checkpoints.

mod gemm;

pub mod checkpoint;
pub mod layers;
pub mod loss;
pub mod network;
pub mod optim;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use layers::{BatchNorm, Conv2d, Dense, GlobalAvgPool, Layer, Mode, Param, Relu, ResidualBlock};
pub use loss::{focal_loss, focal_loss_logits, sigmoid, FocalLossParams, FocalOutput, PROB_EPS};
pub use network::{BackboneConfig, Group, Network, Node, HEAD_UNITS};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use tensor::Tensor;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Train-mode forward from node `start` (with `input` being that node's input),
/// loss, and back-propagation into freshly zeroed gradients. Returns the mean loss.
pub fn loss_and_grad<T: Scalar>(
    net: &mut Network<T>,
    input: &Tensor<T>,
    labels: &[u8],
    params: &FocalLossParams<T>,
    start: usize,
) -> Result<T> {
    if input.batch() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![labels.len()],
            actual: vec![input.batch()],
        });
    }
    net.zero_grad();
    let end = net.nodes.len();
    let logits = net.forward_range(input, start, end, Mode::Train, true)?;
    let out = focal_loss_logits(logits.data(), labels, params);
    if !out.loss.is_finite() {
        return Err(Error::NonFinite { layer: "loss".into() });
    }
    let dy = Tensor::new(logits.shape().to_vec(), out.grad)?;
    net.backward(&dy, start)?;
    Ok(out.loss)
}

/// One optimisation step on a batch. Non-finite values abort before any parameter changes.
pub fn backward_and_step<T: Scalar>(
    net: &mut Network<T>,
    input: &Tensor<T>,
    labels: &[u8],
    params: &FocalLossParams<T>,
    optimizer: &mut Optimizer<T>,
    start: usize,
) -> Result<T> {
    let loss = loss_and_grad(net, input, labels, params, start)?;
    for node in &net.nodes {
        if node.frozen {
            continue;
        }
        let mut finite = true;
        node.layer.visit_params(&mut |p| finite &= p.grad.iter().all(|g| g.is_finite()));
        if !finite {
            return Err(Error::NonFinite { layer: node.name.clone() });
        }
    }
    optimizer.step(net);
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_net() -> Network<f64> {
        let cfg = BackboneConfig {
            input_side: 4,
            input_channels: 1,
            stem_channels: 2,
            stem_kernel: 3,
            stem_stride: 1,
            widths: vec![2],
            blocks: vec![1],
        };
        Network::base(&cfg, 11).unwrap()
    }

    fn batch() -> (Tensor<f64>, Vec<u8>) {
        let data = (0..64).map(|i| ((i * 7) % 5) as f64 / 4.0).collect();
        (Tensor::new(vec![4, 1, 4, 4], data).unwrap(), vec![0, 1, 1, 0])
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let mut net = tiny_net();
        let before = net.params_flat();
        let (x, y) = batch();
        for cfg in [OptimizerConfig::sgd(0.0), OptimizerConfig::nadam(0.0)] {
            let mut opt = Optimizer::new(cfg);
            backward_and_step(&mut net, &x, &y, &FocalLossParams::default(), &mut opt, 0).unwrap();
        }
        assert_eq!(before, net.params_flat());
    }

    #[test]
    fn frozen_nodes_do_not_move() {
        let mut net = tiny_net();
        net.freeze_where(|n| n.group != Group::Output);
        let before = net.params_flat();
        let mask = net.trainable_mask();
        let (x, y) = batch();
        let mut opt = Optimizer::new(OptimizerConfig::nadam(0.1));
        for _ in 0..10 {
            backward_and_step(&mut net, &x, &y, &FocalLossParams::default(), &mut opt, 0).unwrap();
        }
        let after = net.params_flat();
        let mut moved = false;
        for i in 0..before.len() {
            if mask[i] {
                moved |= before[i] != after[i];
            } else {
                assert_eq!(before[i].to_bits(), after[i].to_bits());
            }
        }
        assert!(moved);
    }

    #[test]
    fn non_finite_input_is_reported_with_layer_name() {
        let mut net = tiny_net();
        let (mut x, y) = batch();
        x.data_mut()[0] = f64::NAN;
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1));
        let err = backward_and_step(&mut net, &x, &y, &FocalLossParams::default(), &mut opt, 0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { ref layer } if layer == "stem.conv"), "{err}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut net = tiny_net();
        let (x, y) = batch();
        let mut opt = Optimizer::new(OptimizerConfig::nadam(0.01));
        backward_and_step(&mut net, &x, &y, &FocalLossParams::default(), &mut opt, 0).unwrap();
        let ck = Checkpoint::new(net.clone(), Some(opt.clone()));
        let back = Checkpoint::<f64>::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back.network.hash(), net.hash());
        let a: Vec<u64> = net.params_flat().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.network.params_flat().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(back.optimizer.unwrap(), opt);
        let mut restored = back.network;
        assert_eq!(restored.forward(&x, Mode::Eval).unwrap(), net.forward(&x, Mode::Eval).unwrap());
    }
}
