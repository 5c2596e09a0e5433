//! Post-hoc trace analysis: per-class channel-activation matrices and
//! instance-complexity extremes.

use crate::cost::{FlopsReport, InstanceTrace};
use crate::error::{Error, Result};

/// Per-class channel activation rates for one block's gated channel set.
/// Entry (i, j) is the percentage of class-i instances whose channel-j
/// salience is strictly positive (the skip predicate).
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    pub block_index: usize,
    pub class_names: Vec<String>,
    /// rows per class, columns per channel; values in [0, 100]
    pub rows: Vec<Vec<f64>>,
}

/// Build the activation matrix for `block_index` over a traced instance set.
/// `first_k` truncates to the first k channels for display, if given.
pub fn channel_activation_matrix(
    traces: &[InstanceTrace],
    class_names: &[String],
    block_index: usize,
    first_k: Option<usize>,
) -> Result<ActivationMatrix> {
    if traces.is_empty() {
        return Err(Error::EmptyTraceSet);
    }
    let blocks = traces[0].blocks.len();
    if block_index >= blocks {
        return Err(Error::IndexOutOfRange { index: block_index, len: blocks });
    }
    let channels = traces[0].blocks[block_index].record.channel_salience.len();
    let cols = first_k.map_or(channels, |k| k.min(channels));
    let classes = class_names.len();
    let mut counts = vec![vec![0u64; cols]; classes];
    let mut totals = vec![0u64; classes];
    for t in traces {
        if t.label >= classes {
            return Err(Error::LabelOutOfRange { label: t.label, classes });
        }
        let sal = &t.blocks[block_index].record.channel_salience;
        if sal.len() != channels {
            return Err(Error::TraceMismatch {
                reason: format!(
                    "instance {} has {} channel saliences at block {block_index}, expected {channels}",
                    t.id,
                    sal.len()
                ),
            });
        }
        totals[t.label] += 1;
        for (j, &s) in sal[..cols].iter().enumerate() {
            if s > 0.0 {
                counts[t.label][j] += 1;
            }
        }
    }
    if let Some(empty) = totals.iter().position(|&n| n == 0) {
        return Err(Error::EmptyClass { class: class_names[empty].clone() });
    }
    let rows = counts
        .iter()
        .zip(&totals)
        .map(|(row, &n)| row.iter().map(|&c| 100.0 * c as f64 / n as f64).collect())
        .collect();
    Ok(ActivationMatrix {
        block_index,
        class_names: class_names.to_vec(),
        rows,
    })
}

impl ActivationMatrix {
    /// CSV: header of channel indices, one row per class name.
    pub fn to_csv(&self) -> String {
        let cols = self.rows.first().map_or(0, |r| r.len());
        let mut out = String::from("class");
        for j in 0..cols {
            out.push_str(&format!(",ch_{j}"));
        }
        out.push('\n');
        for (name, row) in self.class_names.iter().zip(&self.rows) {
            out.push_str(name);
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Fraction of instances executing each block (mean of the trace `executed`
/// flags), one value per block.
pub fn block_execution_rates(traces: &[InstanceTrace]) -> Result<Vec<f64>> {
    if traces.is_empty() {
        return Err(Error::EmptyTraceSet);
    }
    let blocks = traces[0].blocks.len();
    let mut counts = vec![0u64; blocks];
    for t in traces {
        if t.blocks.len() != blocks {
            return Err(Error::TraceMismatch {
                reason: format!("instance {} has {} blocks, expected {blocks}", t.id, t.blocks.len()),
            });
        }
        for (b, e) in t.blocks.iter().enumerate() {
            if e.executed {
                counts[b] += 1;
            }
        }
    }
    Ok(counts.iter().map(|&c| c as f64 / traces.len() as f64).collect())
}

/// One ranked instance in a FLOPs-extremes listing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankedInstance {
    pub id: usize,
    pub label: usize,
    pub flops: u64,
}

/// Lowest-k and highest-k instances by total FLOPs; ties break by instance id
/// ascending in both lists.
pub fn extreme_instances(report: &FlopsReport, k: usize) -> Result<(Vec<RankedInstance>, Vec<RankedInstance>)> {
    let n = report.instances.len();
    if k > n {
        return Err(Error::IndexOutOfRange { index: k, len: n });
    }
    let mut ranked: Vec<RankedInstance> = report
        .instances
        .iter()
        .map(|i| RankedInstance { id: i.id, label: i.label, flops: i.total })
        .collect();
    ranked.sort_by(|a, b| a.flops.cmp(&b.flops).then(a.id.cmp(&b.id)));
    let lowest = ranked[..k].to_vec();
    // descending flops, ids ascending within equal flops
    ranked.sort_by(|a, b| b.flops.cmp(&a.flops).then(a.id.cmp(&b.id)));
    let highest = ranked[..k].to_vec();
    Ok((lowest, highest))
}

/// CSV for one extremes listing: rank, id, label, flops.
pub fn extremes_to_csv(items: &[RankedInstance]) -> String {
    let mut out = String::from("rank,instance_id,label,flops\n");
    for (rank, it) in items.iter().enumerate() {
        out.push_str(&format!("{},{},{},{}\n", rank, it.id, it.label, it.flops));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::BlockTraceEntry;
    use crate::cost::{InstanceCost, Placement};
    use crate::gating::SalienceRecord;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trace(id: usize, label: usize, saliences: Vec<Vec<f64>>) -> InstanceTrace {
        let blocks = saliences
            .into_iter()
            .enumerate()
            .map(|(bi, channel_salience)| {
                let record = SalienceRecord { block_salience: 1.0, channel_salience };
                let executed = record.executed();
                let active_channels = record.active_channels();
                BlockTraceEntry { block_index: bi, record, executed, active_channels }
            })
            .collect();
        InstanceTrace { id, label, predicted: label, blocks }
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn all_gates_on_gives_all_hundred() {
        let traces = vec![
            trace(0, 0, vec![vec![0.5, 1.0]]),
            trace(1, 1, vec![vec![0.1, 0.9]]),
        ];
        let m = channel_activation_matrix(&traces, &names(2), 0, None).unwrap();
        assert_eq!(m.rows, vec![vec![100.0, 100.0], vec![100.0, 100.0]]);
    }

    #[test]
    fn empty_class_is_an_error() {
        let traces = vec![trace(0, 0, vec![vec![1.0]])];
        match channel_activation_matrix(&traces, &names(2), 0, None).unwrap_err() {
            Error::EmptyClass { class } => assert_eq!(class, "c1"),
            other => panic!("expected empty-class error, got {other}"),
        }
    }

    #[test]
    fn entries_match_brute_force_tally() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let classes = 3;
        let channels = 6;
        let traces: Vec<InstanceTrace> = (0..120)
            .map(|i| {
                let sal: Vec<f64> = (0..channels)
                    .map(|_| if rng.random::<f64>() < 0.4 { 0.0 } else { rng.random::<f64>() })
                    .collect();
                trace(i, i % classes, vec![sal])
            })
            .collect();
        let m = channel_activation_matrix(&traces, &names(classes), 0, None).unwrap();
        for ci in 0..classes {
            for j in 0..channels {
                let of_class: Vec<&InstanceTrace> = traces.iter().filter(|t| t.label == ci).collect();
                let hits = of_class
                    .iter()
                    .filter(|t| t.blocks[0].record.channel_salience[j] > 0.0)
                    .count();
                let want = 100.0 * hits as f64 / of_class.len() as f64;
                assert!((m.rows[ci][j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn first_k_truncates_columns() {
        let traces = vec![trace(0, 0, vec![vec![1.0, 0.0, 1.0, 0.0]])];
        let m = channel_activation_matrix(&traces, &names(1), 0, Some(2)).unwrap();
        assert_eq!(m.rows, vec![vec![100.0, 0.0]]);
        let csv = m.to_csv();
        assert!(csv.starts_with("class,ch_0,ch_1\n"));
        assert!(csv.contains("c0,100,0"));
    }

    #[test]
    fn bad_block_index_rejected() {
        let traces = vec![trace(0, 0, vec![vec![1.0]])];
        assert!(matches!(
            channel_activation_matrix(&traces, &names(1), 3, None).unwrap_err(),
            Error::IndexOutOfRange { index: 3, len: 1 }
        ));
    }

    #[test]
    fn execution_rates_match_flags() {
        let mut t0 = trace(0, 0, vec![vec![1.0], vec![1.0]]);
        t0.blocks[1].executed = false;
        let t1 = trace(1, 0, vec![vec![1.0], vec![1.0]]);
        let rates = block_execution_rates(&[t0, t1]).unwrap();
        assert_eq!(rates, vec![1.0, 0.5]);
    }

    fn report(flops: &[u64]) -> FlopsReport {
        let instances: Vec<InstanceCost> = flops
            .iter()
            .enumerate()
            .map(|(i, &f)| InstanceCost { id: i, label: i % 2, predicted: 0, total: f, per_block: vec![f] })
            .collect();
        let mean = flops.iter().sum::<u64>() as f64 / flops.len() as f64;
        FlopsReport {
            placement: Placement::Sequential,
            instances,
            mean,
            min: *flops.iter().min().unwrap(),
            max: *flops.iter().max().unwrap(),
            histogram: vec![],
        }
    }

    #[test]
    fn constant_flops_ties_break_by_id() {
        let r = report(&[7, 7, 7, 7]);
        let (lo, hi) = extreme_instances(&r, 2).unwrap();
        assert_eq!(lo.iter().map(|x| x.id).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(hi.iter().map(|x| x.id).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn k_equals_n_covers_all() {
        let r = report(&[5, 3, 9]);
        let (lo, hi) = extreme_instances(&r, 3).unwrap();
        assert_eq!(lo.iter().map(|x| x.flops).collect::<Vec<_>>(), vec![3, 5, 9]);
        assert_eq!(hi.iter().map(|x| x.flops).collect::<Vec<_>>(), vec![9, 5, 3]);
        assert!(extreme_instances(&r, 4).is_err());
    }

    #[test]
    fn extremes_match_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let flops: Vec<u64> = (0..50).map(|_| rng.random_range(0..1000)).collect();
        let r = report(&flops);
        let (lo, hi) = extreme_instances(&r, 10).unwrap();
        let mut sorted: Vec<(u64, usize)> = flops.iter().enumerate().map(|(i, &f)| (f, i)).collect();
        sorted.sort();
        for (k, item) in lo.iter().enumerate() {
            assert_eq!((item.flops, item.id), sorted[k]);
        }
        let mut desc = sorted.clone();
        desc.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        for (k, item) in hi.iter().enumerate() {
            assert_eq!((item.flops, item.id), desc[k]);
        }
    }

    #[test]
    fn extremes_csv_layout() {
        let r = report(&[4, 2]);
        let (lo, _) = extreme_instances(&r, 2).unwrap();
        let csv = extremes_to_csv(&lo);
        assert_eq!(csv, "rank,instance_id,label,flops\n0,1,1,2\n1,0,0,4\n");
    }
}
