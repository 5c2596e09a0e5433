//! Network assembly: stem -> gated blocks -> global pool -> classifier, plus
//! the loss and the three whole-network execution paths (taped training,
//! dense reference, structural skipping).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::blocks::{BlockKind, BlockTraceEntry, BlockVars, ConvBn, GatedBlock};
use crate::cost::{CostConfig, FlopTally, InstanceTrace, Placement};
use crate::error::{Error, Result};
use crate::gating::{self, Relu1Mode};
use crate::ops::{self, BatchNormParams, Conv2dParams, LinearParams};
use crate::tensor::{Scalar, Tensor};

/// Serializable architecture description; enough to rebuild a `Network`
/// skeleton before loading parameters into it.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct NetworkArch {
    pub input_channels: usize,
    pub input_hw: (usize, usize),
    pub stem_channels: usize,
    pub blocks: Vec<BlockArch>,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BlockArch {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl NetworkArch {
    /// Basic-block micro-net: stages of (out_channels, block_count, stride).
    pub fn micro_basic(stem_channels: usize, stages: &[(usize, usize, usize)], classes: usize) -> Self {
        let mut blocks = Vec::new();
        let mut in_c = stem_channels;
        for &(out_c, count, stride) in stages {
            for i in 0..count {
                blocks.push(BlockArch {
                    kind: BlockKind::Basic,
                    in_channels: in_c,
                    mid_channels: out_c,
                    out_channels: out_c,
                    stride: if i == 0 { stride } else { 1 },
                });
                in_c = out_c;
            }
        }
        NetworkArch {
            input_channels: 3,
            input_hw: (32, 32),
            stem_channels,
            blocks,
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut in_c = self.stem_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.in_channels != in_c {
                return Err(Error::Config {
                    field: format!("blocks[{i}].in_channels"),
                    reason: format!("expected {in_c}, got {}", b.in_channels),
                });
            }
            in_c = b.out_channels;
        }
        if self.classes == 0 {
            return Err(Error::Config { field: "classes".into(), reason: "must be positive".into() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    pub stem: ConvBn<T>,
    pub blocks: Vec<GatedBlock<T>>,
    pub classifier: LinearParams<T>,
    pub classes: usize,
    pub input_hw: (usize, usize),
}

/// Parameter group for per-group learning rates and weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Gate,
}

pub struct NetVars {
    pub stem: (Var, Var, Var),
    pub blocks: Vec<BlockVars>,
    pub classifier: (Var, Var),
}

pub struct TapedForward {
    pub logits: Var,
    pub saliences: Vec<(Var, Var)>,
    pub traces: Vec<Vec<BlockTraceEntry>>,
    pub vars: NetVars,
}

impl<T: Scalar> Network<T> {
    pub fn init(arch: &NetworkArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = ConvBn {
            conv: Conv2dParams::kaiming(arch.input_channels, arch.stem_channels, 3, 3, 1, 1, false, &mut rng),
            bn: BatchNormParams::new(arch.stem_channels),
        };
        let blocks = arch
            .blocks
            .iter()
            .map(|b| match b.kind {
                BlockKind::Basic => GatedBlock::basic(b.in_channels, b.out_channels, b.stride, &mut rng),
                BlockKind::Bottleneck => {
                    GatedBlock::bottleneck(b.in_channels, b.mid_channels, b.out_channels, b.stride, &mut rng)
                }
            })
            .collect::<Vec<_>>();
        let last = blocks.last().map_or(arch.stem_channels, |b| b.out_channels);
        let classifier = LinearParams::kaiming(last, arch.classes, &mut rng);
        Ok(Network {
            stem,
            blocks,
            classifier,
            classes: arch.classes,
            input_hw: arch.input_hw,
        })
    }

    pub fn arch(&self) -> NetworkArch {
        NetworkArch {
            input_channels: self.stem.conv.in_channels(),
            input_hw: self.input_hw,
            stem_channels: self.stem.conv.out_channels(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockArch {
                    kind: b.kind,
                    in_channels: b.in_channels,
                    mid_channels: b.mid_channels,
                    out_channels: b.out_channels,
                    stride: b.stride,
                })
                .collect(),
            classes: self.classes,
        }
    }

    /// Visit every trainable parameter in a fixed traversal order. The same
    /// order is used by `leaf_params`, the optimizer state, and checkpoints.
    pub fn visit_params(&self, mut f: impl FnMut(&Tensor<T>, ParamGroup, String)) {
        let conv_bn = |l: &ConvBn<T>, prefix: &str, f: &mut dyn FnMut(&Tensor<T>, ParamGroup, String)| {
            f(&l.conv.weight, ParamGroup::Backbone, format!("{prefix}.conv.weight"));
            f(&l.bn.scale, ParamGroup::Backbone, format!("{prefix}.bn.scale"));
            f(&l.bn.shift, ParamGroup::Backbone, format!("{prefix}.bn.shift"));
        };
        conv_bn(&self.stem, "stem", &mut f);
        for (bi, b) in self.blocks.iter().enumerate() {
            for (li, l) in b.layers.iter().enumerate() {
                conv_bn(l, &format!("blocks.{bi}.layers.{li}"), &mut f);
            }
            if let Some(p) = &b.projection {
                conv_bn(p, &format!("blocks.{bi}.projection"), &mut f);
            }
            f(&b.lnet.fc.weight, ParamGroup::Gate, format!("blocks.{bi}.lnet.weight"));
            f(&b.lnet.fc.bias, ParamGroup::Gate, format!("blocks.{bi}.lnet.bias"));
            f(&b.cnet.fc.weight, ParamGroup::Gate, format!("blocks.{bi}.cnet.weight"));
            f(&b.cnet.fc.bias, ParamGroup::Gate, format!("blocks.{bi}.cnet.bias"));
        }
        f(&self.classifier.weight, ParamGroup::Backbone, "classifier.weight".into());
        f(&self.classifier.bias, ParamGroup::Backbone, "classifier.bias".into());
    }

    /// Mutable counterpart of `visit_params`, same traversal order.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&mut Tensor<T>, ParamGroup)) {
        let conv_bn = |l: &mut ConvBn<T>, f: &mut dyn FnMut(&mut Tensor<T>, ParamGroup)| {
            f(&mut l.conv.weight, ParamGroup::Backbone);
            f(&mut l.bn.scale, ParamGroup::Backbone);
            f(&mut l.bn.shift, ParamGroup::Backbone);
        };
        conv_bn(&mut self.stem, &mut f);
        for b in &mut self.blocks {
            for l in &mut b.layers {
                conv_bn(l, &mut f);
            }
            if let Some(p) = &mut b.projection {
                conv_bn(p, &mut f);
            }
            f(&mut b.lnet.fc.weight, ParamGroup::Gate);
            f(&mut b.lnet.fc.bias, ParamGroup::Gate);
            f(&mut b.cnet.fc.weight, ParamGroup::Gate);
            f(&mut b.cnet.fc.bias, ParamGroup::Gate);
        }
        f(&mut self.classifier.weight, ParamGroup::Backbone);
        f(&mut self.classifier.bias, ParamGroup::Backbone);
    }

    /// Non-trainable state that checkpoints must still carry.
    pub fn visit_buffers(&self, mut f: impl FnMut(&Tensor<T>, String)) {
        let bufs = |bn: &BatchNormParams<T>, prefix: &str, f: &mut dyn FnMut(&Tensor<T>, String)| {
            f(&bn.running_mean, format!("{prefix}.running_mean"));
            f(&bn.running_var, format!("{prefix}.running_var"));
        };
        bufs(&self.stem.bn, "stem.bn", &mut f);
        for (bi, b) in self.blocks.iter().enumerate() {
            for (li, l) in b.layers.iter().enumerate() {
                bufs(&l.bn, &format!("blocks.{bi}.layers.{li}.bn"), &mut f);
            }
            if let Some(p) = &b.projection {
                bufs(&p.bn, &format!("blocks.{bi}.projection.bn"), &mut f);
            }
        }
    }

    pub fn visit_buffers_mut(&mut self, mut f: impl FnMut(&mut Tensor<T>)) {
        let bufs = |bn: &mut BatchNormParams<T>, f: &mut dyn FnMut(&mut Tensor<T>)| {
            f(&mut bn.running_mean);
            f(&mut bn.running_var);
        };
        bufs(&mut self.stem.bn, &mut f);
        for b in &mut self.blocks {
            for l in &mut b.layers {
                bufs(&mut l.bn, &mut f);
            }
            if let Some(p) = &mut b.projection {
                bufs(&mut p.bn, &mut f);
            }
        }
    }

    /// Register all parameters on a tape, same order as `visit_params`.
    pub fn leaf_params(&self, tape: &mut Tape<T>, train_backbone: bool, train_gates: bool) -> NetVars {
        let stem = (
            tape.leaf(self.stem.conv.weight.clone(), train_backbone),
            tape.leaf(self.stem.bn.scale.clone(), train_backbone),
            tape.leaf(self.stem.bn.shift.clone(), train_backbone),
        );
        let blocks = self
            .blocks
            .iter()
            .map(|b| b.leaf_params(tape, train_backbone, train_gates))
            .collect();
        let classifier = (
            tape.leaf(self.classifier.weight.clone(), train_backbone),
            tape.leaf(self.classifier.bias.clone(), train_backbone),
        );
        NetVars { stem, blocks, classifier }
    }

    /// Differentiable forward for training.
    pub fn forward_taped(
        &mut self,
        tape: &mut Tape<T>,
        x: Tensor<T>,
        mode: Relu1Mode,
        bn_train: bool,
        train_backbone: bool,
        train_gates: bool,
    ) -> Result<TapedForward> {
        let vars = self.leaf_params(tape, train_backbone, train_gates);
        let xv = tape.constant(x);
        let h = tape.conv2d(xv, vars.stem.0, None, self.stem.conv.stride, self.stem.conv.padding)?;
        let h = if bn_train {
            tape.batch_norm_train(h, vars.stem.1, vars.stem.2, &mut self.stem.bn)?
        } else {
            tape.batch_norm_eval(h, vars.stem.1, vars.stem.2, &self.stem.bn)?
        };
        let mut h = tape.relu(h);

        let mut saliences = Vec::with_capacity(self.blocks.len());
        let mut traces = Vec::with_capacity(self.blocks.len());
        for (bi, (block, bvars)) in self.blocks.iter_mut().zip(&vars.blocks).enumerate() {
            let out = block.forward_taped(tape, h, bvars, mode, bn_train, bi)?;
            h = out.out;
            saliences.push((out.s_l, out.s_c));
            traces.push(out.traces);
        }
        let pooled = tape.global_avg_pool(h)?;
        let logits = tape.linear(pooled, vars.classifier.0, vars.classifier.1)?;
        // reorder traces to per-instance
        let n = tape.value(logits).shape()[0];
        let per_instance: Vec<Vec<BlockTraceEntry>> = (0..n)
            .map(|i| traces.iter().map(|bt| bt[i].clone()).collect())
            .collect();
        Ok(TapedForward { logits, saliences, traces: per_instance, vars })
    }

    /// Dense-gated inference forward (batched, eval-mode BN). Returns logits
    /// and per-instance block traces.
    pub fn forward_dense(
        &self,
        x: &Tensor<T>,
        mode: Relu1Mode,
        mut tally: Option<&mut FlopTally>,
    ) -> Result<(Tensor<T>, Vec<Vec<BlockTraceEntry>>)> {
        let (n, _c, _h, _w) = x.dims4()?;
        let (h_out, block_traces) = self.dense_trunk(x, mode, tally.as_deref_mut())?;
        let pooled = ops::global_avg_pool_forward(&h_out)?;
        let logits = ops::linear_forward(&pooled, &self.classifier)?;
        if let Some(t) = tally.as_deref_mut() {
            let (_, c, hh, ww) = h_out.dims4()?;
            t.elementwise((n * c * hh * ww) as u64);
            t.macs((n * self.classifier.in_size() * self.classifier.out_size()) as u64);
            t.bias((n * self.classifier.out_size()) as u64);
        }
        let per_instance = (0..n)
            .map(|i| block_traces.iter().map(|bt| bt[i].clone()).collect())
            .collect();
        Ok((logits, per_instance))
    }

    fn dense_trunk(
        &self,
        x: &Tensor<T>,
        mode: Relu1Mode,
        mut tally: Option<&mut FlopTally>,
    ) -> Result<(Tensor<T>, Vec<Vec<BlockTraceEntry>>)> {
        let (n, _, _, _) = x.dims4()?;
        let (h, macs) = ops::conv2d_forward_masked(x, &self.stem.conv, None, None)?;
        let (_, c0, sh, sw) = h.dims4()?;
        if let Some(t) = tally.as_deref_mut() {
            t.macs(macs);
            t.elementwise(2 * (n * c0 * sh * sw) as u64);
            t.elementwise((n * c0 * sh * sw) as u64);
        }
        let h = ops::batch_norm_eval_forward(&h, &self.stem.bn, None)?;
        let mut h = ops::relu_forward(&h);
        let mut block_traces = Vec::with_capacity(self.blocks.len());
        for (bi, block) in self.blocks.iter().enumerate() {
            let (out, tr) = block.forward_dense(&h, mode, bi, tally.as_deref_mut())?;
            h = out;
            block_traces.push(tr);
        }
        Ok((h, block_traces))
    }

    /// Structurally-skipping inference for a single instance. Returns logits
    /// (1, classes) and one trace entry per block.
    pub fn forward_skipping(
        &self,
        x: &Tensor<T>,
        placement: Placement,
        mut tally: Option<&mut FlopTally>,
    ) -> Result<(Tensor<T>, Vec<BlockTraceEntry>)> {
        if placement == Placement::Dense {
            let (logits, mut traces) = self.forward_dense(x, Relu1Mode::Inference, tally)?;
            return Ok((logits, traces.pop().unwrap()));
        }
        let (n, _c, _h, _w) = x.dims4()?;
        if n != 1 {
            return Err(Error::Config {
                field: "batch".into(),
                reason: format!("skipping execution is per-instance, got batch of {n}"),
            });
        }
        let (h, macs) = ops::conv2d_forward_masked(x, &self.stem.conv, None, None)?;
        let (_, c0, sh, sw) = h.dims4()?;
        if let Some(t) = tally.as_deref_mut() {
            t.macs(macs);
            t.elementwise(2 * (c0 * sh * sw) as u64);
            t.elementwise((c0 * sh * sw) as u64);
        }
        let h = ops::batch_norm_eval_forward(&h, &self.stem.bn, None)?;
        let mut h = ops::relu_forward(&h);
        let mut traces = Vec::with_capacity(self.blocks.len());
        for (bi, block) in self.blocks.iter().enumerate() {
            let (out, tr) = block.forward_skipping(&h, bi, placement, tally.as_deref_mut())?;
            h = out;
            traces.push(tr);
        }
        let pooled = ops::global_avg_pool_forward(&h)?;
        let logits = ops::linear_forward(&pooled, &self.classifier)?;
        if let Some(t) = tally.as_deref_mut() {
            let (_, c, hh, ww) = h.dims4()?;
            t.elementwise((c * hh * ww) as u64);
            t.macs((self.classifier.in_size() * self.classifier.out_size()) as u64);
            t.bias(self.classifier.out_size() as u64);
        }
        Ok((logits, traces))
    }

    /// Run the skipping executor over a dataset slice, producing per-instance
    /// traces with predictions.
    pub fn trace_dataset(
        &self,
        images: &Tensor<T>,
        labels: &[usize],
        placement: Placement,
    ) -> Result<Vec<InstanceTrace>> {
        let (n, _, _, _) = images.dims4()?;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let xi = images.instance(i)?;
            let (logits, blocks) = self.forward_skipping(&xi, placement, None)?;
            out.push(InstanceTrace {
                id: i,
                label: labels[i],
                predicted: argmax_row(logits.data()),
                blocks,
            });
        }
        Ok(out)
    }
}

pub fn argmax_row<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy plus the gate L1 penalty.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    saliences: &[(Var, Var)],
    lambda: f64,
) -> Result<Var> {
    let ce = tape.cross_entropy_mean(logits, labels)?;
    if lambda == 0.0 {
        return Ok(ce);
    }
    let penalty = gating::gate_l1_penalty(tape, saliences, lambda)?;
    tape.add(ce, penalty)
}

/// Instrumented whole-network FLOPs for one instance, used as the counting
/// oracle against the analytic cost model.
pub fn counted_instance_flops<T: Scalar>(
    net: &Network<T>,
    x: &Tensor<T>,
    cfg: &CostConfig,
) -> Result<(u64, Vec<BlockTraceEntry>)> {
    let mut tally = FlopTally::new(cfg);
    let (_, traces) = net.forward_skipping(x, cfg.placement, Some(&mut tally))?;
    Ok((tally.total(), traces))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch() -> NetworkArch {
        NetworkArch {
            input_channels: 3,
            input_hw: (8, 8),
            stem_channels: 4,
            blocks: vec![
                BlockArch { kind: BlockKind::Basic, in_channels: 4, mid_channels: 4, out_channels: 4, stride: 1 },
                BlockArch { kind: BlockKind::Basic, in_channels: 4, mid_channels: 8, out_channels: 8, stride: 2 },
            ],
            classes: 3,
        }
    }

    #[test]
    fn arch_validation_catches_channel_breaks() {
        let mut arch = tiny_arch();
        arch.blocks[1].in_channels = 5;
        assert!(arch.validate().is_err());
        assert!(tiny_arch().validate().is_ok());
    }

    #[test]
    fn zero_weight_classifier_gives_uniform_loss() {
        let arch = tiny_arch();
        let mut net = Network::<f64>::init(&arch, 0).unwrap();
        net.classifier.weight.fill(0.0);
        net.classifier.bias.fill(0.0);
        let x = Tensor::zeros(vec![2, 3, 8, 8]);
        let mut tape = Tape::new();
        let fwd = net
            .forward_taped(&mut tape, x, Relu1Mode::Inference, false, true, true)
            .unwrap();
        let loss = total_loss(&mut tape, fwd.logits, &[0, 2], &fwd.saliences, 0.0).unwrap();
        assert!((tape.value(loss).data()[0] - (3.0f64).ln()).abs() < 1e-10);
    }

    #[test]
    fn all_gates_on_equals_ungated_backbone() {
        let arch = tiny_arch();
        let mut net = Network::<f64>::init(&arch, 1).unwrap();
        for b in &mut net.blocks {
            b.lnet.fc.weight.fill(0.0);
            b.lnet.fc.bias.fill(1.0);
            b.cnet.fc.weight.fill(0.0);
            b.cnet.fc.bias.fill(1.0);
        }
        let x = Tensor::from_f64_slice(
            vec![1, 3, 8, 8],
            &(0..192).map(|i| (i as f64 % 17.0) / 17.0).collect::<Vec<_>>(),
        )
        .unwrap();
        let (gated, _) = net.forward_dense(&x, Relu1Mode::Inference, None).unwrap();

        // ungated reference composed from the primitives
        let h = ops::conv2d_forward(&x, &net.stem.conv).unwrap();
        let h = ops::batch_norm_eval_forward(&h, &net.stem.bn, None).unwrap();
        let mut h = ops::relu_forward(&h);
        for b in &net.blocks {
            let mut br = h.clone();
            for (li, l) in b.layers.iter().enumerate() {
                br = ops::conv2d_forward(&br, &l.conv).unwrap();
                br = ops::batch_norm_eval_forward(&br, &l.bn, None).unwrap();
                if li + 1 != b.layers.len() {
                    br = ops::relu_forward(&br);
                }
            }
            let sc = match &b.projection {
                Some(p) => {
                    let s = ops::conv2d_forward(&h, &p.conv).unwrap();
                    ops::batch_norm_eval_forward(&s, &p.bn, None).unwrap()
                }
                None => h.clone(),
            };
            h = br.add(&sc).unwrap();
        }
        let pooled = ops::global_avg_pool_forward(&h).unwrap();
        let want = ops::linear_forward(&pooled, &net.classifier).unwrap();
        for (a, b) in gated.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn skipping_logits_match_dense_logits() {
        let arch = tiny_arch();
        let mut net = Network::<f64>::init(&arch, 2).unwrap();
        // force some channel gates off
        for b in &mut net.blocks {
            for (k, v) in b.cnet.fc.bias.data_mut().iter_mut().enumerate() {
                if k % 3 == 0 {
                    *v = -0.2;
                }
            }
        }
        let x = Tensor::from_f64_slice(
            vec![1, 3, 8, 8],
            &(0..192).map(|i| ((i * 7) % 23) as f64 / 23.0 - 0.4).collect::<Vec<_>>(),
        )
        .unwrap();
        let (dense, _) = net.forward_dense(&x, Relu1Mode::Inference, None).unwrap();
        for placement in [Placement::Sequential, Placement::Parallel] {
            let (skip, _) = net.forward_skipping(&x, placement, None).unwrap();
            for (a, b) in dense.data().iter().zip(skip.data()) {
                assert!((a - b).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn instrumented_flops_match_analytic_model() {
        let arch = tiny_arch();
        let mut net = Network::<f64>::init(&arch, 3).unwrap();
        for b in &mut net.blocks {
            for (k, v) in b.cnet.fc.bias.data_mut().iter_mut().enumerate() {
                if k % 2 == 0 {
                    *v = -0.4;
                }
            }
        }
        let x = Tensor::from_f64_slice(
            vec![1, 3, 8, 8],
            &(0..192).map(|i| ((i * 11) % 31) as f64 / 31.0 - 0.3).collect::<Vec<_>>(),
        )
        .unwrap();
        for placement in [Placement::Parallel, Placement::Sequential] {
            let cfg = CostConfig::new(placement);
            let (counted, traces) = counted_instance_flops(&net, &x, &cfg).unwrap();
            let (analytic, _) = crate::cost::network_flops(&net, &traces, &cfg).unwrap();
            assert_eq!(counted, analytic, "{placement}");
        }
    }
}
