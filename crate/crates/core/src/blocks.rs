//! Gated residual blocks (basic and bottleneck) with two execution semantics:
//! dense-gated (training / reference) and structurally-skipping (inference).
//!
//! The channel gate scales the first layer's output after its BN and ReLU, so
//! a zero salience yields an exactly-zero channel entering the next conv. The
//! block gate scales the whole residual branch before the shortcut addition.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::cost::{FlopTally, Placement};
use crate::error::{Error, Result};
use crate::gating::{self, GateNet, Relu1Mode, SalienceRecord};
use crate::ops::{self, BatchNormParams, Conv2dParams};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BlockKind {
    Basic,
    Bottleneck,
}

/// A convolution followed by batch norm. Convs carry no bias; BN's shift
/// plays that role.
#[derive(Debug, Clone)]
pub struct ConvBn<T> {
    pub conv: Conv2dParams<T>,
    pub bn: BatchNormParams<T>,
}

impl<T: Scalar> ConvBn<T> {
    fn new(in_c: usize, out_c: usize, k: usize, stride: usize, padding: usize, rng: &mut impl Rng) -> Self {
        ConvBn {
            conv: Conv2dParams::kaiming(in_c, out_c, k, k, stride, padding, false, rng),
            bn: BatchNormParams::new(out_c),
        }
    }
}

/// A residual block bundled with its block-gate (L-Net) and channel-gate
/// (C-Net) parameters. The two gates share one pooled input vector.
#[derive(Debug, Clone)]
pub struct GatedBlock<T> {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub mid_channels: usize,
    pub stride: usize,
    pub layers: Vec<ConvBn<T>>,
    pub projection: Option<ConvBn<T>>,
    pub lnet: GateNet<T>,
    pub cnet: GateNet<T>,
}

/// Per-instance record of one block's gate decisions.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTraceEntry {
    pub block_index: usize,
    pub record: SalienceRecord,
    pub executed: bool,
    pub active_channels: usize,
}

impl BlockTraceEntry {
    fn from_record(block_index: usize, record: SalienceRecord) -> Self {
        let executed = record.executed();
        let active_channels = record.active_channels();
        BlockTraceEntry { block_index, record, executed, active_channels }
    }
}

/// Tape handles for one block's parameters.
pub struct BlockVars {
    pub layers: Vec<(Var, Var, Var)>, // (conv weight, bn scale, bn shift)
    pub projection: Option<(Var, Var, Var)>,
    pub lnet: (Var, Var),
    pub cnet: (Var, Var),
}

/// Output of a taped block forward: the result plus the salience vars the
/// loss needs for the L1 penalty.
pub struct TapedBlockOut {
    pub out: Var,
    pub s_l: Var,
    pub s_c: Var,
    pub traces: Vec<BlockTraceEntry>,
}

fn needs_projection(in_c: usize, out_c: usize, stride: usize) -> bool {
    stride != 1 || in_c != out_c
}

impl<T: Scalar> GatedBlock<T> {
    /// Basic block: two 3x3 convs. The channel gate covers the first conv's
    /// `out_channels` outputs.
    pub fn basic(in_c: usize, out_c: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let layers = vec![
            ConvBn::new(in_c, out_c, 3, stride, 1, rng),
            ConvBn::new(out_c, out_c, 3, 1, 1, rng),
        ];
        let projection =
            needs_projection(in_c, out_c, stride).then(|| ConvBn::new(in_c, out_c, 1, stride, 0, rng));
        GatedBlock {
            kind: BlockKind::Basic,
            in_channels: in_c,
            out_channels: out_c,
            mid_channels: out_c,
            stride,
            layers,
            projection,
            lnet: GateNet::block(in_c, rng),
            cnet: GateNet::channel(in_c, out_c, rng),
        }
    }

    /// Bottleneck block: 1x1 -> 3x3 -> 1x1. The channel gate covers the first
    /// 1x1 conv's `mid_c` outputs.
    pub fn bottleneck(in_c: usize, mid_c: usize, out_c: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let layers = vec![
            ConvBn::new(in_c, mid_c, 1, 1, 0, rng),
            ConvBn::new(mid_c, mid_c, 3, stride, 1, rng),
            ConvBn::new(mid_c, out_c, 1, 1, 0, rng),
        ];
        let projection =
            needs_projection(in_c, out_c, stride).then(|| ConvBn::new(in_c, out_c, 1, stride, 0, rng));
        GatedBlock {
            kind: BlockKind::Bottleneck,
            in_channels: in_c,
            out_channels: out_c,
            mid_channels: mid_c,
            stride,
            layers,
            projection,
            lnet: GateNet::block(in_c, rng),
            cnet: GateNet::channel(in_c, mid_c, rng),
        }
    }

    pub fn has_projection(&self) -> bool {
        self.projection.is_some()
    }

    /// Channel count gated by the channel gate (the first layer's outputs).
    pub fn gated_channels(&self) -> usize {
        self.mid_channels
    }

    /// Register this block's parameters as tape leaves.
    pub fn leaf_params(&self, tape: &mut Tape<T>, train_backbone: bool, train_gates: bool) -> BlockVars {
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            layers.push((
                tape.leaf(l.conv.weight.clone(), train_backbone),
                tape.leaf(l.bn.scale.clone(), train_backbone),
                tape.leaf(l.bn.shift.clone(), train_backbone),
            ));
        }
        let projection = self.projection.as_ref().map(|p| {
            (
                tape.leaf(p.conv.weight.clone(), train_backbone),
                tape.leaf(p.bn.scale.clone(), train_backbone),
                tape.leaf(p.bn.shift.clone(), train_backbone),
            )
        });
        let lnet = (
            tape.leaf(self.lnet.fc.weight.clone(), train_gates),
            tape.leaf(self.lnet.fc.bias.clone(), train_gates),
        );
        let cnet = (
            tape.leaf(self.cnet.fc.weight.clone(), train_gates),
            tape.leaf(self.cnet.fc.bias.clone(), train_gates),
        );
        BlockVars { layers, projection, lnet, cnet }
    }

    fn traces_from_saliences(&self, index: usize, s_l: &Tensor<T>, s_c: &Tensor<T>) -> Vec<BlockTraceEntry> {
        let n = s_l.numel();
        let c = self.gated_channels();
        (0..n)
            .map(|i| {
                let record = SalienceRecord {
                    block_salience: Scalar::to_f64(s_l.data()[i]),
                    channel_salience: s_c.data()[i * c..(i + 1) * c]
                        .iter()
                        .map(|&v| Scalar::to_f64(v))
                        .collect(),
                };
                BlockTraceEntry::from_record(index, record)
            })
            .collect()
    }

    /// Differentiable forward on the tape. `bn_train` selects batch-statistics
    /// normalization (mutates running stats) versus running-stats eval mode.
    pub fn forward_taped(
        &mut self,
        tape: &mut Tape<T>,
        x: Var,
        vars: &BlockVars,
        mode: Relu1Mode,
        bn_train: bool,
        index: usize,
    ) -> Result<TapedBlockOut> {
        let pooled = tape.global_avg_pool(x)?;
        let s_l = gating::gate_forward_pooled_taped(tape, pooled, vars.lnet.0, vars.lnet.1, mode)?;
        let s_c = gating::gate_forward_pooled_taped(tape, pooled, vars.cnet.0, vars.cnet.1, mode)?;

        let mut h = x;
        let layer_count = self.layers.len();
        for (li, (layer, &(w, scale, shift))) in self.layers.iter_mut().zip(&vars.layers).enumerate() {
            h = tape.conv2d(h, w, None, layer.conv.stride, layer.conv.padding)?;
            h = if bn_train {
                tape.batch_norm_train(h, scale, shift, &mut layer.bn)?
            } else {
                tape.batch_norm_eval(h, scale, shift, &layer.bn)?
            };
            let last = li + 1 == layer_count;
            if !last {
                h = tape.relu(h);
            }
            if li == 0 {
                h = tape.mul_channels(h, s_c)?;
            }
        }
        let branch = tape.mul_instance(h, s_l)?;

        let shortcut = match (&mut self.projection, vars.projection) {
            (Some(p), Some((w, scale, shift))) => {
                let s = tape.conv2d(x, w, None, p.conv.stride, p.conv.padding)?;
                if bn_train {
                    tape.batch_norm_train(s, scale, shift, &mut p.bn)?
                } else {
                    tape.batch_norm_eval(s, scale, shift, &p.bn)?
                }
            }
            _ => x,
        };
        let out = tape.add(branch, shortcut)?;
        tape.value(out).check_finite("gated block output")?;
        let traces = self.traces_from_saliences(index, tape.value(s_l), tape.value(s_c));
        Ok(TapedBlockOut { out, s_l, s_c, traces })
    }

    /// Dense-gated inference forward (eval-mode BN, batched). The reference
    /// semantics for the skipping executor.
    pub fn forward_dense(
        &self,
        x: &Tensor<T>,
        mode: Relu1Mode,
        index: usize,
        mut tally: Option<&mut FlopTally>,
    ) -> Result<(Tensor<T>, Vec<BlockTraceEntry>)> {
        let (n, _c, h_in, w_in) = x.dims4()?;
        let pooled = ops::global_avg_pool_forward(x)?;
        if let Some(t) = tally.as_deref_mut() {
            t.gate_elementwise((n * self.in_channels * h_in * w_in) as u64);
            t.gate_macs((n * self.lnet.fc.in_size() * self.lnet.fc.out_size()) as u64);
            t.gate_bias((n * self.lnet.fc.out_size()) as u64);
            t.gate_macs((n * self.cnet.fc.in_size() * self.cnet.fc.out_size()) as u64);
            t.gate_bias((n * self.cnet.fc.out_size()) as u64);
            t.gate_elementwise((n * (1 + self.gated_channels())) as u64);
        }
        let s_l = gating::gate_forward_pooled(&pooled, &self.lnet, mode)?;
        let s_c = gating::gate_forward_pooled(&pooled, &self.cnet, mode)?;

        let mut h = x.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            let (hc, macs) = ops::conv2d_forward_masked(&h, &layer.conv, None, None)?;
            h = hc;
            let (_, c_l, oh, ow) = h.dims4()?;
            if let Some(t) = tally.as_deref_mut() {
                t.macs(macs);
                t.elementwise(2 * (n * c_l * oh * ow) as u64); // bn affine
            }
            h = ops::batch_norm_eval_forward(&h, &layer.bn, None)?;
            let last = li + 1 == self.layers.len();
            if !last {
                h = ops::relu_forward(&h);
                if let Some(t) = tally.as_deref_mut() {
                    t.elementwise((n * c_l * oh * ow) as u64);
                }
            }
            if li == 0 {
                h = h.mul_channels(&s_c)?;
                if let Some(t) = tally.as_deref_mut() {
                    t.elementwise((n * c_l * oh * ow) as u64);
                }
            }
        }
        let branch = h.mul_instance(&s_l)?;
        let (_, c_out, oh, ow) = branch.dims4()?;
        if let Some(t) = tally.as_deref_mut() {
            t.elementwise((n * c_out * oh * ow) as u64); // branch scale
        }

        let shortcut = self.shortcut(x, tally.as_deref_mut())?;
        let out = branch.add(&shortcut)?;
        if let Some(t) = tally.as_deref_mut() {
            t.elementwise((n * c_out * oh * ow) as u64); // residual add
        }
        out.check_finite("gated block output")?;
        Ok((out, self.traces_from_saliences(index, &s_l, &s_c)))
    }

    fn shortcut(&self, x: &Tensor<T>, mut tally: Option<&mut FlopTally>) -> Result<Tensor<T>> {
        match &self.projection {
            None => Ok(x.clone()),
            Some(p) => {
                let (s, macs) = ops::conv2d_forward_masked(x, &p.conv, None, None)?;
                let (n, c, oh, ow) = s.dims4()?;
                if let Some(t) = tally.as_deref_mut() {
                    t.macs(macs);
                    t.elementwise(2 * (n * c * oh * ow) as u64);
                }
                ops::batch_norm_eval_forward(&s, &p.bn, None)
            }
        }
    }

    /// Structurally-skipping inference forward for a single instance. Only
    /// convolutions feeding or fed by nonzero-salience channels are executed.
    /// `placement` controls whether the first conv runs dense (parallel: the
    /// gates overlap it) or masked (sequential: gates finish first).
    pub fn forward_skipping(
        &self,
        x: &Tensor<T>,
        index: usize,
        placement: Placement,
        mut tally: Option<&mut FlopTally>,
    ) -> Result<(Tensor<T>, BlockTraceEntry)> {
        let (n, _c, h_in, w_in) = x.dims4()?;
        if n != 1 {
            return Err(Error::Config {
                field: "batch".into(),
                reason: format!("skipping execution is per-instance, got batch of {n}"),
            });
        }
        let pooled = ops::global_avg_pool_forward(x)?;
        if let Some(t) = tally.as_deref_mut() {
            t.gate_elementwise((self.in_channels * h_in * w_in) as u64);
            t.gate_macs((self.lnet.fc.in_size() * self.lnet.fc.out_size()) as u64);
            t.gate_bias(self.lnet.fc.out_size() as u64);
            t.gate_macs((self.cnet.fc.in_size() * self.cnet.fc.out_size()) as u64);
            t.gate_bias(self.cnet.fc.out_size() as u64);
            t.gate_elementwise((1 + self.gated_channels()) as u64);
        }
        let s_l = gating::gate_forward_pooled(&pooled, &self.lnet, Relu1Mode::Inference)?;
        let s_c = gating::gate_forward_pooled(&pooled, &self.cnet, Relu1Mode::Inference)?;
        let trace = self.traces_from_saliences(index, &s_l, &s_c).pop().unwrap();

        let block_on = s_l.data()[0] > T::zero();
        let active: Vec<usize> = (0..self.gated_channels())
            .filter(|&k| s_c.data()[k] > T::zero())
            .collect();

        // Projection shortcuts always execute so the addition stays
        // shape-correct even for skipped blocks.
        let shortcut = self.shortcut(x, tally.as_deref_mut())?;
        if !block_on {
            // In the parallel configuration the first conv is already in
            // flight when the gates resolve, so its cost is paid regardless.
            if placement == Placement::Parallel {
                if let Some(t) = tally.as_deref_mut() {
                    let first = &self.layers[0];
                    let (kh, kw) = first.conv.kernel();
                    let (oh, ow) = ops::conv_out_hw(h_in, w_in, kh, kw, first.conv.stride, first.conv.padding)?;
                    t.macs((first.conv.in_channels() * kh * kw * first.conv.out_channels() * oh * ow) as u64);
                }
            }
            return Ok((shortcut, trace));
        }

        let first = &self.layers[0];
        let (h1, macs1) = match placement {
            Placement::Sequential => ops::conv2d_forward_masked(x, &first.conv, None, Some(&active))?,
            Placement::Parallel | Placement::Dense => ops::conv2d_forward_masked(x, &first.conv, None, None)?,
        };
        if let Some(t) = tally.as_deref_mut() {
            t.macs(macs1);
        }
        let (_, c1, oh1, ow1) = h1.dims4()?;
        debug_assert_eq!(c1, self.gated_channels());
        let h1 = ops::batch_norm_eval_forward(&h1, &first.bn, Some(&active))?;
        let mut h1 = ops::relu_forward(&h1);
        // scale the surviving channels by their salience
        for &k in &active {
            let sc = s_c.data()[k];
            let base = k * oh1 * ow1;
            for v in &mut h1.data_mut()[base..base + oh1 * ow1] {
                *v = *v * sc;
            }
        }
        if let Some(t) = tally.as_deref_mut() {
            let a = active.len() as u64;
            let hw = (oh1 * ow1) as u64;
            t.elementwise(2 * a * hw); // bn
            t.elementwise(a * hw); // relu
            t.elementwise(a * hw); // channel scale
        }

        // Remaining layers treat zeroed channels as absent inputs.
        let mut h = h1;
        for (li, layer) in self.layers.iter().enumerate().skip(1) {
            let active_in: Option<&[usize]> = if li == 1 { Some(&active) } else { None };
            let (hc, macs) = ops::conv2d_forward_masked(&h, &layer.conv, active_in, None)?;
            if let Some(t) = tally.as_deref_mut() {
                t.macs(macs);
            }
            let (_, c_l, oh, ow) = hc.dims4()?;
            h = ops::batch_norm_eval_forward(&hc, &layer.bn, None)?;
            if let Some(t) = tally.as_deref_mut() {
                t.elementwise(2 * (c_l * oh * ow) as u64);
            }
            let last = li + 1 == self.layers.len();
            if !last {
                h = ops::relu_forward(&h);
                if let Some(t) = tally.as_deref_mut() {
                    t.elementwise((c_l * oh * ow) as u64);
                }
            }
        }

        let branch = h.mul_instance(&s_l)?;
        let (_, c_out, oh, ow) = branch.dims4()?;
        let out = branch.add(&shortcut)?;
        if let Some(t) = tally.as_deref_mut() {
            t.elementwise((c_out * oh * ow) as u64); // branch scale
            t.elementwise((c_out * oh * ow) as u64); // residual add
        }
        out.check_finite("gated block output")?;
        Ok((out, trace))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn randn(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect()).unwrap()
    }

    /// Randomize BN running stats so eval mode is a non-trivial affine map.
    fn scramble_bn(b: &mut GatedBlock<f64>, rng: &mut ChaCha8Rng) {
        let normal = Normal::new(0.0, 0.5).unwrap();
        for l in b.layers.iter_mut().chain(b.projection.iter_mut()) {
            for v in l.bn.running_mean.data_mut() {
                *v = normal.sample(rng);
            }
            for v in l.bn.running_var.data_mut() {
                *v = 0.5 + normal.sample(rng).abs();
            }
            for v in l.bn.scale.data_mut() {
                *v = 1.0 + 0.3 * normal.sample(rng);
            }
            for v in l.bn.shift.data_mut() {
                *v = 0.3 * normal.sample(rng);
            }
        }
    }

    #[test]
    fn gates_forced_on_reduces_to_plain_residual_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = GatedBlock::<f64>::basic(4, 4, 1, &mut rng);
        scramble_bn(&mut b, &mut rng);
        b.lnet.fc.weight.fill(0.0);
        b.lnet.fc.bias.fill(1.0);
        b.cnet.fc.weight.fill(0.0);
        b.cnet.fc.bias.fill(1.0);
        let x = randn(vec![2, 4, 6, 6], &mut rng);
        let (out, traces) = b.forward_dense(&x, Relu1Mode::Inference, 0, None).unwrap();

        // plain residual: conv-bn-relu-conv-bn + x
        let h = ops::conv2d_forward(&x, &b.layers[0].conv).unwrap();
        let h = ops::batch_norm_eval_forward(&h, &b.layers[0].bn, None).unwrap();
        let h = ops::relu_forward(&h);
        let h = ops::conv2d_forward(&h, &b.layers[1].conv).unwrap();
        let h = ops::batch_norm_eval_forward(&h, &b.layers[1].bn, None).unwrap();
        let want = h.add(&x).unwrap();
        for (a, w) in out.data().iter().zip(want.data()) {
            assert!((a - w).abs() < 1e-12);
        }
        assert!(traces.iter().all(|t| t.executed && t.active_channels == 4));
    }

    #[test]
    fn block_gate_off_is_identity_for_identity_shortcut() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = GatedBlock::<f64>::basic(4, 4, 1, &mut rng);
        b.lnet.fc.weight.fill(0.0);
        b.lnet.fc.bias.fill(-1.0);
        let x = randn(vec![3, 4, 5, 5], &mut rng);
        let (out, traces) = b.forward_dense(&x, Relu1Mode::Inference, 0, None).unwrap();
        // S_L = 0 scales the whole branch to exactly zero
        assert_eq!(out.data(), x.data());
        assert!(traces.iter().all(|t| !t.executed));

        let xi = x.instance(0).unwrap();
        let (skip, trace) = b.forward_skipping(&xi, 0, Placement::Sequential, None).unwrap();
        assert_eq!(skip.data(), xi.data());
        assert!(!trace.executed);
    }

    #[test]
    fn dense_matches_hand_composition_with_random_gates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut b = GatedBlock::<f64>::basic(3, 5, 2, &mut rng);
        scramble_bn(&mut b, &mut rng);
        let x = randn(vec![2, 3, 8, 8], &mut rng);
        let (out, _) = b.forward_dense(&x, Relu1Mode::Inference, 0, None).unwrap();

        let pooled = ops::global_avg_pool_forward(&x).unwrap();
        let s_l = gating::gate_forward_pooled(&pooled, &b.lnet, Relu1Mode::Inference).unwrap();
        let s_c = gating::gate_forward_pooled(&pooled, &b.cnet, Relu1Mode::Inference).unwrap();
        let h = ops::conv2d_forward(&x, &b.layers[0].conv).unwrap();
        let h = ops::batch_norm_eval_forward(&h, &b.layers[0].bn, None).unwrap();
        let h = ops::relu_forward(&h).mul_channels(&s_c).unwrap();
        let h = ops::conv2d_forward(&h, &b.layers[1].conv).unwrap();
        let h = ops::batch_norm_eval_forward(&h, &b.layers[1].bn, None).unwrap();
        let branch = h.mul_instance(&s_l).unwrap();
        let p = b.projection.as_ref().unwrap();
        let s = ops::conv2d_forward(&x, &p.conv).unwrap();
        let s = ops::batch_norm_eval_forward(&s, &p.bn, None).unwrap();
        let want = branch.add(&s).unwrap();
        for (a, w) in out.data().iter().zip(want.data()) {
            assert!((a - w).abs() < 1e-6);
        }
    }

    #[test]
    fn skipping_equals_dense_random_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in 0..2 {
            let mut b = if kind == 0 {
                GatedBlock::<f64>::basic(6, 6, 1, &mut rng)
            } else {
                GatedBlock::<f64>::bottleneck(6, 4, 12, 2, &mut rng)
            };
            scramble_bn(&mut b, &mut rng);
            // push some channel gates negative so a subset is skipped
            for v in b.cnet.fc.bias.data_mut().iter_mut().step_by(2) {
                *v = -0.5;
            }
            for trial in 0..20 {
                let x = randn(vec![1, 6, 8, 8], &mut rng);
                let (dense, dt) = b.forward_dense(&x, Relu1Mode::Inference, 0, None).unwrap();
                for placement in [Placement::Sequential, Placement::Parallel] {
                    let (skip, st) = b.forward_skipping(&x, 0, placement, None).unwrap();
                    let max_dev = dense
                        .data()
                        .iter()
                        .zip(skip.data())
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0f64, f64::max);
                    assert!(max_dev < 1e-5, "trial {trial} deviation {max_dev}");
                    assert_eq!(st, dt[0]);
                }
            }
        }
    }

    #[test]
    fn all_channels_zero_still_runs_later_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut b = GatedBlock::<f64>::basic(4, 4, 1, &mut rng);
        scramble_bn(&mut b, &mut rng);
        b.cnet.fc.weight.fill(0.0);
        b.cnet.fc.bias.fill(-1.0); // all channel saliences zero
        b.lnet.fc.weight.fill(0.0);
        b.lnet.fc.bias.fill(0.5); // block still on
        let x = randn(vec![1, 4, 5, 5], &mut rng);
        let (dense, _) = b.forward_dense(&x, Relu1Mode::Inference, 0, None).unwrap();
        let (skip, trace) = b.forward_skipping(&x, 0, Placement::Sequential, None).unwrap();
        assert_eq!(trace.active_channels, 0);
        assert!(trace.executed);
        // later layers on the zero map are nonzero through BN shifts
        assert!(dense.data().iter().zip(x.data()).any(|(a, b)| (a - b).abs() > 1e-9));
        for (a, w) in skip.data().iter().zip(dense.data()) {
            assert!((a - w).abs() < 1e-9);
        }
    }

    #[test]
    fn taped_dense_matches_plain_dense_in_eval_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut b = GatedBlock::<f64>::bottleneck(4, 3, 8, 1, &mut rng);
        scramble_bn(&mut b, &mut rng);
        let x = randn(vec![2, 4, 6, 6], &mut rng);
        let (plain, _) = b.forward_dense(&x, Relu1Mode::Inference, 0, None).unwrap();

        let mut tape = Tape::<f64>::new();
        let vars = b.leaf_params(&mut tape, true, true);
        let xv = tape.constant(x);
        let out = b
            .forward_taped(&mut tape, xv, &vars, Relu1Mode::Inference, false, 0)
            .unwrap();
        for (a, w) in tape.value(out.out).data().iter().zip(plain.data()) {
            assert!((a - w).abs() < 1e-9);
        }
    }

    #[test]
    fn trace_fidelity_recomputed_from_saliences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut b = GatedBlock::<f64>::basic(4, 6, 1, &mut rng);
        for v in b.cnet.fc.bias.data_mut() {
            *v = if rng.random::<f64>() < 0.5 { -0.3 } else { 0.4 };
        }
        let x = randn(vec![4, 4, 6, 6], &mut rng);
        let (_, traces) = b.forward_dense(&x, Relu1Mode::Inference, 0, None).unwrap();
        for t in traces {
            assert_eq!(t.executed, t.record.block_salience > 0.0);
            assert_eq!(
                t.active_channels,
                t.record.channel_salience.iter().filter(|&&s| s > 0.0).count()
            );
        }
    }
}
