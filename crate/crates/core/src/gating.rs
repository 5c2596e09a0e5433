//! Salience gates: the ReLU-1 activation (standard and leaky), the block-level
//! predictor (L-Net) and the channel-level predictor (C-Net).
//!
//! Both predictors are global-avg-pool -> fully-connected -> ReLU-1. In
//! inference mode every salience lies in [0,1], and a non-positive
//! pre-activation yields an exact zero, which is what makes structural
//! skipping sound.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{self, LinearParams};
use crate::tensor::{Scalar, Tensor};

/// ReLU-1 activation mode. Inference clamps to [0,1]; training uses a small
/// leak slope on both saturation sides so gradients flow through the clamps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Relu1Mode {
    Inference,
    Leaky { leak: f64 },
}

/// Default leak slope for training.
pub const DEFAULT_LEAK: f64 = 0.01;

impl Relu1Mode {
    pub fn training() -> Self {
        Relu1Mode::Leaky { leak: DEFAULT_LEAK }
    }

    pub fn leak<T: Scalar>(&self) -> T {
        match self {
            Relu1Mode::Inference => T::zero(),
            Relu1Mode::Leaky { leak } => T::from_f64(*leak),
        }
    }
}

/// Scalar ReLU-1: 0 for x <= 0, x on (0,1], 1 above; leak slopes outside
/// (0,1] in leaky mode.
pub fn relu1_scalar<T: Scalar>(x: T, mode: Relu1Mode) -> T {
    let leak: T = mode.leak();
    let one = T::one();
    if x <= T::zero() {
        leak * x
    } else if x <= one {
        x
    } else {
        one + leak * (x - one)
    }
}

pub fn relu1<T: Scalar>(x: &Tensor<T>, mode: Relu1Mode) -> Tensor<T> {
    x.map(|v| relu1_scalar(v, mode))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum GateKind {
    Block,
    Channel,
}

/// A salience predictor head: one fully-connected layer applied to the host
/// block's pooled input. Block gates have a single output unit; channel gates
/// have one unit per gated channel.
#[derive(Debug, Clone)]
pub struct GateNet<T> {
    pub fc: LinearParams<T>,
    pub kind: GateKind,
}

impl<T: Scalar> GateNet<T> {
    /// Gate init: small zero-mean weights, bias +1, so initial saliences are
    /// close to 1 and the gated network starts out dense.
    fn init_fc(in_size: usize, out_size: usize, rng: &mut impl Rng) -> LinearParams<T> {
        let normal = Normal::new(0.0, 0.01).unwrap();
        let data: Vec<T> = (0..out_size * in_size)
            .map(|_| T::from_f64(normal.sample(rng)))
            .collect();
        LinearParams {
            weight: Tensor::new(vec![out_size, in_size], data).unwrap(),
            bias: Tensor::full(vec![out_size], T::one()),
        }
    }

    pub fn block(in_channels: usize, rng: &mut impl Rng) -> Self {
        GateNet { fc: Self::init_fc(in_channels, 1, rng), kind: GateKind::Block }
    }

    pub fn channel(in_channels: usize, gated_channels: usize, rng: &mut impl Rng) -> Self {
        GateNet { fc: Self::init_fc(in_channels, gated_channels, rng), kind: GateKind::Channel }
    }

    fn check_kind(&self, expected: GateKind) -> Result<()> {
        if self.kind != expected {
            return Err(Error::Config {
                field: "gate.kind".into(),
                reason: format!("expected {:?} gate, got {:?}", expected, self.kind),
            });
        }
        Ok(())
    }
}

/// Salience from an already pooled (N, C) vector. L-Net and C-Net for one
/// block share a single pooled vector, so this is the common path.
pub fn gate_forward_pooled<T: Scalar>(
    pooled: &Tensor<T>,
    gate: &GateNet<T>,
    mode: Relu1Mode,
) -> Result<Tensor<T>> {
    let pre = ops::linear_forward(pooled, &gate.fc)?;
    Ok(relu1(&pre, mode))
}

/// Block salience per instance: ReLU-1(FC(global-avg-pool(x))), shape (N, 1).
pub fn lnet_forward<T: Scalar>(x: &Tensor<T>, gate: &GateNet<T>, mode: Relu1Mode) -> Result<Tensor<T>> {
    gate.check_kind(GateKind::Block)?;
    let pooled = ops::global_avg_pool_forward(x)?;
    gate_forward_pooled(&pooled, gate, mode)
}

/// Channel salience per instance, shape (N, gated_channels).
pub fn cnet_forward<T: Scalar>(x: &Tensor<T>, gate: &GateNet<T>, mode: Relu1Mode) -> Result<Tensor<T>> {
    gate.check_kind(GateKind::Channel)?;
    let pooled = ops::global_avg_pool_forward(x)?;
    gate_forward_pooled(&pooled, gate, mode)
}

/// Tape version used during training.
pub fn gate_forward_pooled_taped<T: Scalar>(
    tape: &mut Tape<T>,
    pooled: Var,
    fc_weight: Var,
    fc_bias: Var,
    mode: Relu1Mode,
) -> Result<Var> {
    let pre = tape.linear(pooled, fc_weight, fc_bias)?;
    Ok(tape.leaky_relu1(pre, mode.leak()))
}

/// Per-instance gate outputs of one gated block: one block scalar and one
/// channel vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SalienceRecord {
    pub block_salience: f64,
    pub channel_salience: Vec<f64>,
}

impl SalienceRecord {
    pub fn executed(&self) -> bool {
        self.block_salience > 0.0
    }

    pub fn active_channels(&self) -> usize {
        self.channel_salience.iter().filter(|&&s| s > 0.0).count()
    }
}

/// lambda * (sum |S_L| + sum |S_C|) over all gate outputs on the tape,
/// differentiable. Saliences are non-negative in inference mode, so the
/// absolute value only matters for leaky training values.
pub fn gate_l1_penalty<T: Scalar>(
    tape: &mut Tape<T>,
    saliences: &[(Var, Var)],
    lambda: f64,
) -> Result<Var> {
    let mut acc = tape.constant(Tensor::scalar(T::zero()));
    for &(s_l, s_c) in saliences {
        let al = tape.abs(s_l);
        let sl = tape.sum(al);
        let ac = tape.abs(s_c);
        let sc = tape.sum(ac);
        acc = tape.add(acc, sl)?;
        acc = tape.add(acc, sc)?;
    }
    Ok(tape.scale(acc, T::from_f64(lambda)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu1_three_branches() {
        let m = Relu1Mode::Inference;
        assert_eq!(relu1_scalar(-0.5f64, m), 0.0);
        assert_eq!(relu1_scalar(0.3f64, m), 0.3);
        assert_eq!(relu1_scalar(2.0f64, m), 1.0);
    }

    #[test]
    fn relu1_leaky_branches() {
        let m = Relu1Mode::Leaky { leak: 0.01 };
        assert!((relu1_scalar(-1.0f64, m) - (-0.01)).abs() < 1e-15);
        assert!((relu1_scalar(2.0f64, m) - 1.01).abs() < 1e-15);
        assert_eq!(relu1_scalar(0.5f64, m), 0.5);
    }

    #[test]
    fn inference_equals_leak_zero() {
        for x in [-3.0f64, -0.1, 0.0, 0.4, 1.0, 1.7] {
            assert_eq!(
                relu1_scalar(x, Relu1Mode::Inference),
                relu1_scalar(x, Relu1Mode::Leaky { leak: 0.0 })
            );
        }
    }

    #[test]
    fn lnet_constant_fc_saturates() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::full(vec![2, 3, 4, 4], 0.7);
        let mut g = GateNet::<f64>::block(3, &mut rng);
        g.fc.weight.fill(0.0);
        g.fc.bias.fill(1.0);
        let s = lnet_forward(&x, &g, Relu1Mode::Inference).unwrap();
        assert_eq!(s.data(), &[1.0, 1.0]);

        g.fc.bias.fill(-1.0);
        let s = lnet_forward(&x, &g, Relu1Mode::Inference).unwrap();
        assert_eq!(s.data(), &[0.0, 0.0]);
    }

    #[test]
    fn cnet_bias_controls_all_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::full(vec![1, 3, 2, 2], 0.2);
        let mut g = GateNet::<f64>::channel(3, 5, &mut rng);
        g.fc.weight.fill(0.0);
        g.fc.bias.fill(1.0);
        let s = cnet_forward(&x, &g, Relu1Mode::Inference).unwrap();
        assert_eq!(s.shape(), &[1, 5]);
        assert!(s.data().iter().all(|&v| v == 1.0));

        g.fc.bias.fill(-1.0);
        let s = cnet_forward(&x, &g, Relu1Mode::Inference).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gate_forward_matches_composed_primitives() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::from_f64_slice(
            vec![2, 3, 2, 2],
            &(0..24).map(|i| (i as f64) * 0.1 - 1.0).collect::<Vec<_>>(),
        )
        .unwrap();
        let g = GateNet::<f64>::channel(3, 4, &mut rng);
        let got = cnet_forward(&x, &g, Relu1Mode::training()).unwrap();
        let pooled = ops::global_avg_pool_forward(&x).unwrap();
        let pre = ops::linear_forward(&pooled, &g.fc).unwrap();
        let want = relu1(&pre, Relu1Mode::training());
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_gate_kind_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::zeros(vec![1, 3, 2, 2]);
        let g = GateNet::<f64>::channel(3, 4, &mut rng);
        assert!(lnet_forward(&x, &g, Relu1Mode::Inference).is_err());
    }

    #[test]
    fn l1_penalty_sums_saliences() {
        let mut tape = Tape::<f64>::new();
        let s_l = tape.leaf(Tensor::new(vec![1, 1], vec![0.5]).unwrap(), true);
        let s_c = tape.leaf(Tensor::new(vec![1, 2], vec![0.25, 0.25]).unwrap(), true);
        let p = gate_l1_penalty(&mut tape, &[(s_l, s_c)], 1.0).unwrap();
        assert!((tape.value(p).data()[0] - 1.0).abs() < 1e-12);

        let mut tape = Tape::<f64>::new();
        let s_l = tape.leaf(Tensor::new(vec![1, 1], vec![0.5]).unwrap(), true);
        let s_c = tape.leaf(Tensor::new(vec![1, 2], vec![0.25, 0.25]).unwrap(), true);
        let p = gate_l1_penalty(&mut tape, &[(s_l, s_c)], 0.0).unwrap();
        assert_eq!(tape.value(p).data()[0], 0.0);
    }

    #[test]
    fn salience_record_counts() {
        let r = SalienceRecord {
            block_salience: 0.2,
            channel_salience: vec![0.0, 0.4, 0.0, 1.0],
        };
        assert!(r.executed());
        assert_eq!(r.active_channels(), 2);
    }
}
