//! Training: SGD with Nesterov momentum, stepped learning-rate schedule,
//! separate backbone/gate parameter groups, and the epoch loop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::gating::Relu1Mode;
use crate::model::{self, argmax_row, NetVars, Network, ParamGroup};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    FromScratch,
    FineTunePretrained,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub backbone_lr: f64,
    pub gate_lr: f64,
    pub decay_factor: f64,
    pub decay_period: usize,
    pub lambda: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 96,
            momentum: 0.9,
            weight_decay: 0.0005,
            backbone_lr: 0.01,
            gate_lr: 0.01,
            decay_factor: 10.0,
            decay_period: 30,
            lambda: 0.0,
            seed: 0,
            mode: TrainMode::FromScratch,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("backbone_lr", self.backbone_lr),
            ("gate_lr", self.gate_lr),
            ("decay_factor", self.decay_factor),
        ];
        for (name, v) in positive {
            if v <= 0.0 || !v.is_finite() {
                return Err(Error::Config { field: name.into(), reason: format!("must be positive, got {v}") });
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config { field: "batch_size".into(), reason: "must be positive".into() });
        }
        if self.decay_period == 0 || self.decay_period > self.epochs.max(1) {
            return Err(Error::Config {
                field: "decay_period".into(),
                reason: format!("must be in 1..={} (epochs), got {}", self.epochs.max(1), self.decay_period),
            });
        }
        if self.momentum < 0.0 || self.momentum >= 1.0 {
            return Err(Error::Config {
                field: "momentum".into(),
                reason: format!("must be in [0,1), got {}", self.momentum),
            });
        }
        if self.lambda < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config {
                field: "lambda/weight_decay".into(),
                reason: "penalties must be non-negative".into(),
            });
        }
        Ok(())
    }
}

/// Stepped schedule: initial rate divided by decay_factor^(epoch / period).
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> (f64, f64) {
    let steps = (epoch / cfg.decay_period) as i32;
    let scale = cfg.decay_factor.powi(-steps);
    (cfg.backbone_lr * scale, cfg.gate_lr * scale)
}

/// Nesterov-momentum SGD state, one velocity slot per parameter in the
/// network's fixed traversal order.
pub struct Sgd<T> {
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(net: &Network<T>) -> Self {
        let mut velocity = Vec::new();
        net.visit_params(|p, _, _| velocity.push(Tensor::zeros(p.shape().to_vec())));
        Sgd { velocity }
    }

    /// One update: v <- mu*v + g, w <- w - lr*(g + mu*v), where g already
    /// includes the weight-decay term for backbone parameters. `grads` is
    /// aligned with the traversal order; `None` leaves a parameter untouched.
    pub fn step(
        &mut self,
        net: &mut Network<T>,
        grads: &[Option<Tensor<T>>],
        backbone_lr: f64,
        gate_lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) -> Result<()> {
        if grads.len() != self.velocity.len() {
            return Err(Error::Config {
                field: "grads".into(),
                reason: format!("expected {} gradient slots, got {}", self.velocity.len(), grads.len()),
            });
        }
        let mu = T::from_f64(momentum);
        let mut i = 0usize;
        let mut out: Result<()> = Ok(());
        net.visit_params_mut(|w, group| {
            if out.is_err() {
                return;
            }
            let slot = i;
            i += 1;
            let Some(g) = &grads[slot] else { return };
            if g.shape() != w.shape() {
                out = Err(Error::ShapeMismatch { left: g.shape().to_vec(), right: w.shape().to_vec() });
                return;
            }
            let (lr, wd) = match group {
                ParamGroup::Backbone => (T::from_f64(backbone_lr), T::from_f64(weight_decay)),
                ParamGroup::Gate => (T::from_f64(gate_lr), T::zero()),
            };
            let v = &mut self.velocity[slot];
            let (vd, wdta, gd) = (v.data_mut(), w.data_mut(), g.data());
            for k in 0..gd.len() {
                let g_full = gd[k] + wd * wdta[k];
                vd[k] = mu * vd[k] + g_full;
                wdta[k] = wdta[k] - lr * (g_full + mu * vd[k]);
            }
        });
        out
    }
}

/// Per-epoch training metrics.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub mean_block_salience: f64,
    /// Fraction of gate outputs (block and channel) that an inference-mode
    /// ReLU-1 would clamp to exactly zero.
    pub gate_sparsity: f64,
    pub backbone_lr: f64,
    pub gate_lr: f64,
}

/// Collect gradients for the tape leaves of `vars`, in the same order as the
/// network parameter traversal.
fn ordered_grads<T: Scalar>(tape: &crate::autograd::Tape<T>, vars: &NetVars) -> Vec<Option<Tensor<T>>> {
    let mut out = Vec::new();
    let mut push = |v: crate::autograd::Var| out.push(tape.grad(v).cloned());
    push(vars.stem.0);
    push(vars.stem.1);
    push(vars.stem.2);
    for b in &vars.blocks {
        for &(w, s, sh) in &b.layers {
            push(w);
            push(s);
            push(sh);
        }
        if let Some((w, s, sh)) = b.projection {
            push(w);
            push(s);
            push(sh);
        }
        push(b.lnet.0);
        push(b.lnet.1);
        push(b.cnet.0);
        push(b.cnet.1);
    }
    push(vars.classifier.0);
    push(vars.classifier.1);
    out
}

/// Run one optimization step on a batch. Returns (loss, correct count).
pub fn train_step<T: Scalar>(
    net: &mut Network<T>,
    opt: &mut Sgd<T>,
    x: Tensor<T>,
    labels: &[usize],
    cfg: &TrainConfig,
    backbone_lr: f64,
    gate_lr: f64,
    sparsity_acc: Option<&mut SparsityAccumulator>,
) -> Result<(f64, usize)> {
    let mut tape = crate::autograd::Tape::new();
    let fwd = net.forward_taped(&mut tape, x, Relu1Mode::training(), true, true, true)?;
    let loss = model::total_loss(&mut tape, fwd.logits, labels, &fwd.saliences, cfg.lambda)?;
    let loss_value = Scalar::to_f64(tape.value(loss).data()[0]);
    if !loss_value.is_finite() {
        return Err(Error::NonFinite { context: "training loss".into() });
    }
    let logits = tape.value(fwd.logits);
    let classes = logits.shape()[1];
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax_row(&logits.data()[i * classes..(i + 1) * classes]) == l)
        .count();
    if let Some(acc) = sparsity_acc {
        for per_instance in &fwd.traces {
            for entry in per_instance {
                acc.add(entry.record.block_salience, &entry.record.channel_salience);
            }
        }
    }
    tape.backward(loss)?;
    let grads = ordered_grads(&tape, &fwd.vars);
    opt.step(net, &grads, backbone_lr, gate_lr, cfg.momentum, cfg.weight_decay)?;
    Ok((loss_value, correct))
}

#[derive(Debug, Default, Clone)]
pub struct SparsityAccumulator {
    pub gates: u64,
    pub zero_gates: u64,
    pub block_salience_sum: f64,
    pub blocks: u64,
}

impl SparsityAccumulator {
    pub fn add(&mut self, block_salience: f64, channel_salience: &[f64]) {
        self.blocks += 1;
        self.block_salience_sum += block_salience.clamp(0.0, 1.0);
        self.gates += 1 + channel_salience.len() as u64;
        if block_salience <= 0.0 {
            self.zero_gates += 1;
        }
        self.zero_gates += channel_salience.iter().filter(|&&s| s <= 0.0).count() as u64;
    }

    pub fn sparsity(&self) -> f64 {
        if self.gates == 0 {
            0.0
        } else {
            self.zero_gates as f64 / self.gates as f64
        }
    }

    pub fn mean_block_salience(&self) -> f64 {
        if self.blocks == 0 {
            0.0
        } else {
            self.block_salience_sum / self.blocks as f64
        }
    }
}

/// Full training loop. Deterministic for a fixed seed and config.
pub fn train<T: Scalar>(
    net: &mut Network<T>,
    train_set: &Dataset<T>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics, &Network<T>),
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::DataExhausted { requested: cfg.batch_size, available: 0 });
    }
    let mut opt = Sgd::new(net);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (backbone_lr, gate_lr) = lr_at_epoch(cfg, epoch);
        let order = data::shuffled_indices(train_set.len(), &mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        let mut sparsity = SparsityAccumulator::default();
        for chunk in order.chunks(cfg.batch_size) {
            let (mut x, labels) = train_set.gather(chunk)?;
            if cfg.augment {
                x = data::augment_batch(&x, &mut rng)?;
            }
            let (loss, batch_correct) =
                train_step(net, &mut opt, x, &labels, cfg, backbone_lr, gate_lr, Some(&mut sparsity))?;
            loss_sum += loss * chunk.len() as f64;
            correct += batch_correct;
            seen += chunk.len();
        }
        let metrics = EpochMetrics {
            epoch,
            loss: loss_sum / seen as f64,
            accuracy: correct as f64 / seen as f64,
            mean_block_salience: sparsity.mean_block_salience(),
            gate_sparsity: sparsity.sparsity(),
            backbone_lr,
            gate_lr,
        };
        on_epoch(&metrics, net);
        history.push(metrics);
    }
    Ok(history)
}

/// Dense-mode top-1 accuracy over a dataset, batched.
pub fn evaluate<T: Scalar>(net: &Network<T>, set: &Dataset<T>, batch: usize) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::EmptyTraceSet);
    }
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..set.len()).collect();
    for chunk in indices.chunks(batch.max(1)) {
        let (x, labels) = set.gather(chunk)?;
        let (logits, _) = net.forward_dense(&x, Relu1Mode::Inference, None)?;
        let classes = logits.shape()[1];
        for (i, &l) in labels.iter().enumerate() {
            if argmax_row(&logits.data()[i * classes..(i + 1) * classes]) == l {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / set.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetworkArch;

    fn micro_net(seed: u64) -> Network<f64> {
        let arch = NetworkArch::micro_basic(4, &[(4, 1, 1), (8, 1, 2)], 3);
        Network::init(&arch, seed).unwrap()
    }

    #[test]
    fn schedule_matches_formula() {
        let cfg = TrainConfig {
            epochs: 270,
            decay_period: 90,
            backbone_lr: 0.01,
            gate_lr: 0.01,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at_epoch(&cfg, 0), (0.01, 0.01));
        let (b, _) = lr_at_epoch(&cfg, 90);
        assert!((b - 0.001).abs() < 1e-12);
        let (b, _) = lr_at_epoch(&cfg, 269);
        assert!((b - 0.0001).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { backbone_lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { decay_period: 31, epochs: 30, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { momentum: 1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn zero_momentum_zero_wd_is_plain_sgd() {
        let mut net = micro_net(0);
        let mut opt = Sgd::new(&net);
        let mut grads: Vec<Option<Tensor<f64>>> = Vec::new();
        net.visit_params(|p, _, _| grads.push(Some(Tensor::full(p.shape().to_vec(), 0.5))));
        let mut before: Vec<Tensor<f64>> = Vec::new();
        net.visit_params(|p, _, _| before.push(p.clone()));
        opt.step(&mut net, &grads, 0.1, 0.1, 0.0, 0.0).unwrap();
        let mut i = 0;
        net.visit_params(|p, _, _| {
            for (a, b) in p.data().iter().zip(before[i].data()) {
                assert!((a - (b - 0.05)).abs() < 1e-12);
            }
            i += 1;
        });
    }

    #[test]
    fn constant_gradient_velocity_unrolls() {
        // two steps with constant g and mu=0.9: v1 = g, v2 = 1.9 g
        let mut net = micro_net(1);
        let mut opt = Sgd::new(&net);
        let mut grads: Vec<Option<Tensor<f64>>> = Vec::new();
        net.visit_params(|p, _, _| grads.push(Some(Tensor::full(p.shape().to_vec(), 1.0))));
        opt.step(&mut net, &grads, 0.0, 0.0, 0.9, 0.0).unwrap();
        opt.step(&mut net, &grads, 0.0, 0.0, 0.9, 0.0).unwrap();
        for v in &opt.velocity {
            for &x in v.data() {
                assert!((x - 1.9).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weight_decay_alone_shrinks_backbone_not_gates() {
        let mut net = micro_net(2);
        let mut opt = Sgd::new(&net);
        let mut grads: Vec<Option<Tensor<f64>>> = Vec::new();
        net.visit_params(|p, _, _| grads.push(Some(Tensor::zeros(p.shape().to_vec()))));
        let mut before: Vec<(Tensor<f64>, ParamGroup)> = Vec::new();
        net.visit_params(|p, g, _| before.push((p.clone(), g)));
        opt.step(&mut net, &grads, 1.0, 1.0, 0.0, 0.001).unwrap();
        let mut i = 0;
        net.visit_params(|p, _, _| {
            let (b, group) = &before[i];
            for (a, bv) in p.data().iter().zip(b.data()) {
                match group {
                    ParamGroup::Backbone => assert!((a - bv * 0.999).abs() < 1e-12),
                    ParamGroup::Gate => assert_eq!(a, bv),
                }
            }
            i += 1;
        });
    }

    #[test]
    fn training_reduces_loss_on_synthetic_data() {
        let mut net = micro_net(3);
        let mut ds = crate::data::make_synthetic::<f64>(3, 60, 7).unwrap();
        let stats = ds.compute_norm();
        ds.apply_norm(&stats);
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 20,
            backbone_lr: 0.05,
            gate_lr: 0.05,
            decay_period: 5,
            seed: 1,
            ..Default::default()
        };
        let hist = train(&mut net, &ds, &cfg, |_, _| {}).unwrap();
        assert_eq!(hist.len(), 5);
        assert!(hist.last().unwrap().loss < hist[0].loss, "loss did not decrease: {hist:?}");
    }

    #[test]
    fn identical_seeds_produce_identical_parameters() {
        let run = || {
            let mut net = micro_net(4);
            let mut ds = crate::data::make_synthetic::<f64>(2, 24, 3).unwrap();
            let stats = ds.compute_norm();
            ds.apply_norm(&stats);
            let cfg = TrainConfig {
                epochs: 2,
                batch_size: 8,
                decay_period: 2,
                seed: 9,
                augment: true,
                ..Default::default()
            };
            train(&mut net, &ds, &cfg, |_, _| {}).unwrap();
            let mut bytes: Vec<f64> = Vec::new();
            net.visit_params(|p, _, _| bytes.extend(p.data().iter().copied()));
            bytes
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn micro_net_separates_synthetic_classes() {
        // separability sanity: a small net reaches high train accuracy fast
        let mut net = micro_net(5);
        let mut ds = crate::data::make_synthetic::<f64>(3, 120, 11).unwrap();
        let stats = ds.compute_norm();
        ds.apply_norm(&stats);
        let cfg = TrainConfig {
            epochs: 10,
            batch_size: 24,
            backbone_lr: 0.05,
            gate_lr: 0.05,
            decay_period: 10,
            seed: 2,
            ..Default::default()
        };
        let hist = train(&mut net, &ds, &cfg, |_, _| {}).unwrap();
        assert!(
            hist.last().unwrap().accuracy >= 0.95,
            "train accuracy {:.3} below 0.95",
            hist.last().unwrap().accuracy
        );
    }
}
