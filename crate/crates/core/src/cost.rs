//! Exact FLOPs accounting for dense, parallel-gated, and sequential-gated
//! execution, derived analytically from execution traces.
//!
//! Conventions: one MAC = 2 FLOPs; BN at inference = 2 FLOPs/element (affine);
//! ReLU / ReLU-1 / pooling / scaling / residual add = 1 FLOP/element; gate FC
//! counted like any linear layer. Gate-net FLOPs are included by default and
//! toggleable. The instrumented executors in `blocks`/`model` tally the work
//! they actually perform; `block_flops` here must agree with them to the
//! integer.

use crate::blocks::{BlockTraceEntry, GatedBlock};
use crate::error::{Error, Result};
use crate::model::Network;
use crate::ops::conv_out_hw;
use crate::tensor::Scalar;

/// Gate-placement mode: where the control nets sit relative to the block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    /// No skip savings credited; every layer at nominal width.
    Dense,
    /// Gates overlap the first conv: first conv always paid, later layers
    /// credited for skipped channels.
    Parallel,
    /// Gates run before the block: maximal savings, first conv pays only
    /// active output channels.
    Sequential,
}

impl std::fmt::Display for Placement {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Placement::Dense => write!(f, "dense"),
            Placement::Parallel => write!(f, "parallel"),
            Placement::Sequential => write!(f, "sequential"),
        }
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct CostConfig {
    pub placement: Placement,
    pub flops_per_mac: u64,
    pub count_gate_flops: bool,
}

impl CostConfig {
    pub fn new(placement: Placement) -> Self {
        CostConfig { placement, flops_per_mac: 2, count_gate_flops: true }
    }
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig::new(Placement::Sequential)
    }
}

/// Running FLOPs tally used by the instrumented executors.
#[derive(Debug, Clone)]
pub struct FlopTally {
    flops: u64,
    flops_per_mac: u64,
    count_gates: bool,
}

impl FlopTally {
    pub fn new(cfg: &CostConfig) -> Self {
        FlopTally {
            flops: 0,
            flops_per_mac: cfg.flops_per_mac,
            count_gates: cfg.count_gate_flops,
        }
    }

    pub fn total(&self) -> u64 {
        self.flops
    }

    pub fn macs(&mut self, n: u64) {
        self.flops += self.flops_per_mac * n;
    }

    pub fn elementwise(&mut self, n: u64) {
        self.flops += n;
    }

    pub fn bias(&mut self, n: u64) {
        self.flops += n;
    }

    pub fn gate_macs(&mut self, n: u64) {
        if self.count_gates {
            self.macs(n);
        }
    }

    pub fn gate_elementwise(&mut self, n: u64) {
        if self.count_gates {
            self.elementwise(n);
        }
    }

    pub fn gate_bias(&mut self, n: u64) {
        if self.count_gates {
            self.bias(n);
        }
    }
}

/// Convolution cost restricted to active channel counts (per instance):
/// flops_per_mac * active_in * kH * kW * active_out * outH * outW, plus
/// active_out * outH * outW when a bias is present.
#[allow(clippy::too_many_arguments)]
pub fn conv_flops(
    active_in: usize,
    kh: usize,
    kw: usize,
    active_out: usize,
    out_h: usize,
    out_w: usize,
    bias: bool,
    flops_per_mac: u64,
) -> u64 {
    let ohw = (out_h * out_w) as u64;
    let macs = (active_in * kh * kw * active_out) as u64 * ohw;
    flops_per_mac * macs + if bias { active_out as u64 * ohw } else { 0 }
}

/// Cost of both gate nets for one block (shared pooling counted once).
fn gate_flops<T: Scalar>(block: &GatedBlock<T>, in_h: usize, in_w: usize, cfg: &CostConfig) -> u64 {
    if !cfg.count_gate_flops {
        return 0;
    }
    let c_in = block.in_channels as u64;
    let c1 = block.gated_channels() as u64;
    let pool = c_in * (in_h * in_w) as u64;
    let fc_l = cfg.flops_per_mac * c_in + 1;
    let fc_c = cfg.flops_per_mac * c_in * c1 + c1;
    let relu1 = 1 + c1;
    pool + fc_l + fc_c + relu1
}

/// Per-layer output spatial extents for a block applied to an (in_h, in_w) map.
fn layer_out_hw<T: Scalar>(block: &GatedBlock<T>, in_h: usize, in_w: usize) -> Result<Vec<(usize, usize)>> {
    let mut dims = Vec::with_capacity(block.layers.len());
    let (mut h, mut w) = (in_h, in_w);
    for l in &block.layers {
        let (kh, kw) = l.conv.kernel();
        let (oh, ow) = conv_out_hw(h, w, kh, kw, l.conv.stride, l.conv.padding)?;
        dims.push((oh, ow));
        h = oh;
        w = ow;
    }
    Ok(dims)
}

/// Analytical per-instance FLOPs of one block under `cfg`, derived from the
/// trace entry alone.
pub fn block_flops<T: Scalar>(
    entry: &BlockTraceEntry,
    block: &GatedBlock<T>,
    in_h: usize,
    in_w: usize,
    cfg: &CostConfig,
) -> Result<u64> {
    if entry.record.channel_salience.len() != block.gated_channels() {
        return Err(Error::TraceMismatch {
            reason: format!(
                "trace has {} channel saliences, block gates {} channels",
                entry.record.channel_salience.len(),
                block.gated_channels()
            ),
        });
    }
    let dims = layer_out_hw(block, in_h, in_w)?;
    let (last_h, last_w) = *dims.last().unwrap();
    let out_hw = (last_h * last_w) as u64;
    let fpm = cfg.flops_per_mac;

    let mut total = gate_flops(block, in_h, in_w, cfg);

    // Projection shortcuts always execute.
    if let Some(p) = &block.projection {
        let (kh, kw) = p.conv.kernel();
        total += conv_flops(p.conv.in_channels(), kh, kw, p.conv.out_channels(), last_h, last_w, false, fpm);
        total += 2 * p.conv.out_channels() as u64 * out_hw; // bn
    }

    let first = &block.layers[0].conv;
    let (k1h, k1w) = first.kernel();
    let (oh1, ow1) = dims[0];
    let nominal_conv1 = conv_flops(first.in_channels(), k1h, k1w, first.out_channels(), oh1, ow1, false, fpm);

    if !entry.executed {
        return Ok(match cfg.placement {
            Placement::Dense => total + dense_branch_flops(block, &dims, fpm) + out_hw * block.out_channels as u64 * 2,
            Placement::Parallel => total + nominal_conv1,
            Placement::Sequential => total,
        });
    }

    match cfg.placement {
        Placement::Dense => {
            total += dense_branch_flops(block, &dims, fpm);
            total += 2 * block.out_channels as u64 * out_hw; // branch scale + residual add
        }
        Placement::Parallel | Placement::Sequential => {
            let a = entry.active_channels as u64;
            let hw1 = (oh1 * ow1) as u64;
            // first conv
            total += if cfg.placement == Placement::Parallel {
                nominal_conv1
            } else {
                conv_flops(first.in_channels(), k1h, k1w, entry.active_channels, oh1, ow1, false, fpm)
            };
            // bn + relu + channel scale on active channels only
            total += 2 * a * hw1 + a * hw1 + a * hw1;
            // remaining layers: active input channels on the layer right
            // after the gated one, nominal elsewhere
            for (li, l) in block.layers.iter().enumerate().skip(1) {
                let (kh, kw) = l.conv.kernel();
                let (oh, ow) = dims[li];
                let in_ch = if li == 1 { entry.active_channels } else { l.conv.in_channels() };
                total += conv_flops(in_ch, kh, kw, l.conv.out_channels(), oh, ow, false, fpm);
                total += 2 * l.conv.out_channels() as u64 * (oh * ow) as u64; // bn
                if li + 1 != block.layers.len() {
                    total += l.conv.out_channels() as u64 * (oh * ow) as u64; // relu
                }
            }
            total += 2 * block.out_channels as u64 * out_hw; // branch scale + residual add
        }
    }
    Ok(total)
}

/// All branch layers at nominal width: conv + bn (+ relu except after the
/// last layer) + the channel-scale multiply on the gated layer.
fn dense_branch_flops<T: Scalar>(block: &GatedBlock<T>, dims: &[(usize, usize)], fpm: u64) -> u64 {
    let mut total = 0;
    for (li, l) in block.layers.iter().enumerate() {
        let (kh, kw) = l.conv.kernel();
        let (oh, ow) = dims[li];
        let c = l.conv.out_channels() as u64;
        let ohw = (oh * ow) as u64;
        total += conv_flops(l.conv.in_channels(), kh, kw, l.conv.out_channels(), oh, ow, false, fpm);
        total += 2 * c * ohw; // bn
        if li + 1 != block.layers.len() {
            total += c * ohw; // relu
        }
        if li == 0 {
            total += c * ohw; // channel scale
        }
    }
    total
}

/// Stem + blocks + pool + classifier for one instance, from its per-block
/// trace entries.
pub fn network_flops<T: Scalar>(
    net: &Network<T>,
    entries: &[BlockTraceEntry],
    cfg: &CostConfig,
) -> Result<(u64, Vec<u64>)> {
    if entries.len() != net.blocks.len() {
        return Err(Error::TraceMismatch {
            reason: format!("{} trace entries for {} blocks", entries.len(), net.blocks.len()),
        });
    }
    let (in_h, in_w) = (net.input_hw.0, net.input_hw.1);
    let (kh, kw) = net.stem.conv.kernel();
    let (mut h, mut w) = conv_out_hw(in_h, in_w, kh, kw, net.stem.conv.stride, net.stem.conv.padding)?;
    let c0 = net.stem.conv.out_channels() as u64;
    let mut total = conv_flops(net.stem.conv.in_channels(), kh, kw, net.stem.conv.out_channels(), h, w, false, cfg.flops_per_mac);
    total += 2 * c0 * (h * w) as u64 + c0 * (h * w) as u64; // stem bn + relu

    let mut per_block = Vec::with_capacity(net.blocks.len());
    for (block, entry) in net.blocks.iter().zip(entries) {
        let b = block_flops(entry, block, h, w, cfg)?;
        per_block.push(b);
        total += b;
        let dims = layer_out_hw(block, h, w)?;
        let (oh, ow) = *dims.last().unwrap();
        h = oh;
        w = ow;
    }

    // final global average pool + classifier
    let c_last = net.blocks.last().map_or(net.stem.conv.out_channels(), |b| b.out_channels) as u64;
    total += c_last * (h * w) as u64;
    total += cfg.flops_per_mac * c_last * net.classes as u64 + net.classes as u64;
    Ok((total, per_block))
}

/// Per-instance decisions plus identity, the unit the report aggregates.
#[derive(Debug, Clone)]
pub struct InstanceTrace {
    pub id: usize,
    pub label: usize,
    pub predicted: usize,
    pub blocks: Vec<BlockTraceEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceCost {
    pub id: usize,
    pub label: usize,
    pub predicted: usize,
    pub total: u64,
    pub per_block: Vec<u64>,
}

/// Dataset-level FLOPs aggregates for one placement.
#[derive(Debug, Clone)]
pub struct FlopsReport {
    pub placement: Placement,
    pub instances: Vec<InstanceCost>,
    pub mean: f64,
    pub min: u64,
    pub max: u64,
    pub histogram: Vec<(u64, u64, usize)>,
}

pub const HISTOGRAM_BINS: usize = 10;

pub fn dataset_flops_report<T: Scalar>(
    traces: &[InstanceTrace],
    net: &Network<T>,
    cfg: &CostConfig,
) -> Result<FlopsReport> {
    if traces.is_empty() {
        return Err(Error::EmptyTraceSet);
    }
    let mut instances = Vec::with_capacity(traces.len());
    for t in traces {
        let (total, per_block) = network_flops(net, &t.blocks, cfg)?;
        instances.push(InstanceCost {
            id: t.id,
            label: t.label,
            predicted: t.predicted,
            total,
            per_block,
        });
    }
    let min = instances.iter().map(|i| i.total).min().unwrap();
    let max = instances.iter().map(|i| i.total).max().unwrap();
    let mean = instances.iter().map(|i| i.total as f64).sum::<f64>() / instances.len() as f64;
    let span = (max - min).max(1);
    let mut histogram: Vec<(u64, u64, usize)> = (0..HISTOGRAM_BINS)
        .map(|b| {
            let lo = min + span * b as u64 / HISTOGRAM_BINS as u64;
            let hi = min + span * (b as u64 + 1) / HISTOGRAM_BINS as u64;
            (lo, hi, 0)
        })
        .collect();
    for i in &instances {
        let bin = (((i.total - min) as u128 * HISTOGRAM_BINS as u128) / (span as u128 + 1)) as usize;
        histogram[bin.min(HISTOGRAM_BINS - 1)].2 += 1;
    }
    Ok(FlopsReport { placement: cfg.placement, instances, mean, min, max, histogram })
}

impl FlopsReport {
    /// One row per instance: id, label, predicted, total FLOPs, per-block columns.
    pub fn to_csv(&self) -> String {
        let blocks = self.instances.first().map_or(0, |i| i.per_block.len());
        let mut out = String::from("instance_id,label,predicted,total_flops");
        for b in 0..blocks {
            out.push_str(&format!(",block_{b}"));
        }
        out.push('\n');
        for i in &self.instances {
            out.push_str(&format!("{},{},{},{}", i.id, i.label, i.predicted, i.total));
            for v in &i.per_block {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_csv(text: &str, placement: Placement) -> Result<FlopsReport> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(Error::EmptyTraceSet)?;
        let blocks = header.split(',').count().saturating_sub(4);
        let mut instances = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let parse = |s: &str| -> Result<u64> {
                s.parse().map_err(|_| Error::CheckpointFormat {
                    reason: format!("bad CSV field `{s}`"),
                })
            };
            instances.push(InstanceCost {
                id: parse(fields[0])? as usize,
                label: parse(fields[1])? as usize,
                predicted: parse(fields[2])? as usize,
                total: parse(fields[3])?,
                per_block: fields[4..4 + blocks].iter().map(|f| parse(f)).collect::<Result<_>>()?,
            });
        }
        if instances.is_empty() {
            return Err(Error::EmptyTraceSet);
        }
        let min = instances.iter().map(|i| i.total).min().unwrap();
        let max = instances.iter().map(|i| i.total).max().unwrap();
        let mean = instances.iter().map(|i| i.total as f64).sum::<f64>() / instances.len() as f64;
        Ok(FlopsReport { placement, instances, mean, min, max, histogram: Vec::new() })
    }
}
