//! Structured pruning of whole output channels.
//!
//! Channels are ranked by their summed normalized importance divided by the
//! FLOPs their removal saves. Channels that meet at an `add` layer form one
//! group and are removed together. Removing a channel zeroes its row in the
//! producing layer and the matching input columns of every consumer.
//!
//! FLOPs of a parameterized layer are `2 · rows · (cols + 1) · locations`,
//! where `rows` counts output channels with any unmasked weight and `cols`
//! counts non-bias input columns with any unmasked weight.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::kfac::ModelStats;
use crate::nn::{Architecture, LayerKind, LayerState, Model};
use crate::obs::{block_inverses, check_fraction, importance_map, ImportanceMap};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerFlops {
    pub layer: usize,
    pub kind: LayerKind,
    pub flops: u64,
    /// Unmasked parameters.
    pub params: usize,
    pub total_params: usize,
    pub channels: usize,
    pub channels_alive: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlopsReport {
    pub layers: Vec<LayerFlops>,
    pub total_flops: u64,
    pub baseline_flops: u64,
    pub params: usize,
    pub baseline_params: usize,
}

impl FlopsReport {
    /// Dense FLOPs over current FLOPs.
    pub fn flops_ratio(&self) -> f64 {
        self.baseline_flops as f64 / self.total_flops.max(1) as f64
    }

    /// Dense parameter count over remaining parameter count.
    pub fn compression(&self) -> f64 {
        self.baseline_params as f64 / self.params.max(1) as f64
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("layer\tkind\tflops\tparams\ttotal_params\tchannels_alive\tchannels\n");
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                l.layer, l.kind, l.flops, l.params, l.total_params, l.channels_alive, l.channels
            );
        }
        let _ = writeln!(
            out,
            "total\t-\t{}\t{}\t{}\t-\t-\nbaseline\t-\t{}\t-\t{}\t-\t-\nflops_ratio\t{:.6}\ncompression\t{:.6}",
            self.total_flops,
            self.params,
            self.baseline_params,
            self.baseline_flops,
            self.baseline_params,
            self.flops_ratio(),
            self.compression()
        );
        out
    }
}

/// Unmasked-entry counts per row and per column of one weight matrix.
struct Occupancy {
    rows: Vec<usize>,
    cols: Vec<usize>,
}

impl Occupancy {
    fn of(layer: &LayerState) -> Self {
        let (r, c) = (layer.rows(), layer.cols());
        let mut rows = vec![0; r];
        let mut cols = vec![0; c];
        for (k, &m) in layer.mask.data().iter().enumerate() {
            if m != 0.0 {
                rows[k / c] += 1;
                cols[k % c] += 1;
            }
        }
        Self { rows, cols }
    }

    fn alive_rows(&self) -> usize {
        self.rows.iter().filter(|&&n| n > 0).count()
    }

    /// Non-bias columns with any unmasked entry.
    fn alive_cols(&self) -> usize {
        self.cols[..self.cols.len() - 1].iter().filter(|&&n| n > 0).count()
    }
}

fn layer_flops(rows: usize, cols: usize, locations: usize) -> u64 {
    2 * rows as u64 * (cols as u64 + 1) * locations as u64
}

fn dense_flops(kind: &LayerKind, locations: usize) -> u64 {
    kind.weight_dims().map_or(0, |(r, c)| layer_flops(r, c - 1, locations))
}

pub fn flops_report(model: &Model) -> FlopsReport {
    let mut layers = Vec::with_capacity(model.layers().len());
    let mut baseline_flops = 0;
    for (idx, layer) in model.layers().iter().enumerate() {
        let locs = model.locations(idx);
        baseline_flops += dense_flops(&layer.kind, locs);
        let entry = if layer.kind.is_parameterized() {
            let occ = Occupancy::of(layer);
            LayerFlops {
                layer: idx,
                kind: layer.kind,
                flops: layer_flops(occ.alive_rows(), occ.alive_cols(), locs),
                params: layer.remaining(),
                total_params: layer.weights.len(),
                channels: layer.rows(),
                channels_alive: occ.alive_rows(),
            }
        } else {
            LayerFlops {
                layer: idx,
                kind: layer.kind,
                flops: 0,
                params: 0,
                total_params: 0,
                channels: 0,
                channels_alive: 0,
            }
        };
        layers.push(entry);
    }
    FlopsReport {
        total_flops: layers.iter().map(|l| l.flops).sum(),
        params: layers.iter().map(|l| l.params).sum(),
        baseline_params: layers.iter().map(|l| l.total_params).sum(),
        baseline_flops,
        layers,
    }
}

/// How output channels flow between parameterized layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelTopology {
    /// For every layer: the channel class of its output if it is a prunable
    /// parameterized layer. A class is named by its smallest producer layer.
    pub producer: Vec<Option<usize>>,
    /// For every parameterized layer: the class of its input and the number
    /// of input features per channel.
    pub consumer: Vec<Option<(usize, usize)>>,
}

impl ChannelTopology {
    pub fn classes(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.producer.iter().flatten().copied().collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn producers(&self, class: usize) -> Vec<usize> {
        (0..self.producer.len())
            .filter(|&l| self.producer[l] == Some(class))
            .collect()
    }

    pub fn consumers(&self, class: usize) -> Vec<usize> {
        (0..self.consumer.len())
            .filter(|&l| matches!(self.consumer[l], Some((c, _)) if c == class))
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct Space {
    node: usize,
    channels: usize,
    /// Features per channel (spatial extent for feature maps).
    block: usize,
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

fn union(parent: &mut [usize], a: usize, b: usize) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        // The frozen sentinel always wins; otherwise the smaller root does.
        let frozen = parent.len() - 1;
        if ra == frozen || (rb != frozen && ra < rb) {
            parent[rb] = ra;
        } else {
            parent[ra] = rb;
        }
    }
}

/// Traces channel identity through relu, flatten and add layers. The logits
/// layer and anything summed with the network input are not prunable.
pub fn channel_topology(model: &Model) -> Result<ChannelTopology> {
    let n = model.layers().len();
    let frozen = n;
    let mut parent: Vec<usize> = (0..=n).collect();
    let mut spaces: Vec<Option<Space>> = vec![None; n];
    let mut inputs: Vec<Option<Space>> = vec![None; n];
    let mut cur: Option<Space> = None;
    for (idx, layer) in model.layers().iter().enumerate() {
        match layer.kind {
            LayerKind::Dense { outputs, .. } => {
                inputs[idx] = cur;
                cur = Some(Space {
                    node: idx,
                    channels: outputs,
                    block: 1,
                });
            }
            LayerKind::Conv2d { out_ch, .. } => {
                inputs[idx] = cur;
                cur = Some(Space {
                    node: idx,
                    channels: out_ch,
                    block: model.locations(idx),
                });
            }
            LayerKind::Relu | LayerKind::Flatten => {}
            LayerKind::Add { from } => match (cur, spaces[from]) {
                (Some(a), Some(b)) => {
                    if a.channels != b.channels || a.block != b.block {
                        return Err(Error::Topology(format!(
                            "add at layer {idx}: {} channels x {} vs {} channels x {}",
                            a.channels, a.block, b.channels, b.block
                        )));
                    }
                    union(&mut parent, a.node, b.node);
                }
                (Some(s), None) | (None, Some(s)) => union(&mut parent, s.node, frozen),
                (None, None) => {}
            },
        }
        spaces[idx] = cur;
    }
    if let Some(last) = model.param_layers().last() {
        union(&mut parent, *last, frozen);
    }
    let frozen_root = find(&mut parent, frozen);
    let class_of = |parent: &mut Vec<usize>, node: usize| {
        let r = find(parent, node);
        (r != frozen_root).then_some(r)
    };
    let mut producer = vec![None; n];
    let mut consumer = vec![None; n];
    for idx in 0..n {
        let kind = model.layer(idx).kind;
        if !kind.is_parameterized() {
            continue;
        }
        producer[idx] = class_of(&mut parent, idx);
        if let Some(s) = inputs[idx] {
            let per_channel = match kind {
                LayerKind::Conv2d { kh, kw, .. } => kh * kw,
                _ => s.block,
            };
            consumer[idx] = class_of(&mut parent, s.node).map(|c| (c, per_channel));
        }
    }
    // Class ids are roots; rename to the smallest producer for readability.
    let mut rename = BTreeMap::new();
    for (idx, p) in producer.iter().enumerate() {
        if let Some(c) = p {
            rename.entry(*c).or_insert(idx);
        }
    }
    for p in producer.iter_mut().flatten() {
        *p = rename[p];
    }
    for (c, _) in consumer.iter_mut().flatten() {
        *c = rename[c];
    }
    Ok(ChannelTopology { producer, consumer })
}

/// Output channels pruned together.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelGroup {
    /// `(layer, output channel)` pairs.
    pub members: Vec<(usize, usize)>,
    pub agg_loss: f64,
    pub flops_delta: u64,
    pub score: f64,
}

/// Sum of normalized importances over row `channel` of `layer`.
pub fn channel_importance(imap: &ImportanceMap, layer: usize, channel: usize) -> f64 {
    imap.layer(layer).map_or(0.0, |l| {
        l.normalized
            .iter()
            .filter(|(q, _)| q / l.cols == channel)
            .map(|e| e.1)
            .sum()
    })
}

fn row_sums(imap: &ImportanceMap, layer: usize, rows: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows];
    if let Some(l) = imap.layer(layer) {
        for &(q, v) in &l.normalized {
            out[q / l.cols] += v;
        }
    }
    out
}

/// Rows and columns a group removal touches in one layer.
#[derive(Default)]
struct Cut {
    rows: Vec<usize>,
    cols: Vec<usize>,
}

fn group_cuts(topo: &ChannelTopology, members: &[(usize, usize)], class: usize) -> BTreeMap<usize, Cut> {
    let mut cuts: BTreeMap<usize, Cut> = BTreeMap::new();
    for &(l, c) in members {
        cuts.entry(l).or_default().rows.push(c);
    }
    let channel = members[0].1;
    for l in topo.consumers(class) {
        let (_, per) = topo.consumer[l].expect("consumer");
        cuts.entry(l)
            .or_default()
            .cols
            .extend(channel * per..(channel + 1) * per);
    }
    cuts
}

/// FLOPs saved by applying `cuts`, computed from occupancy counts.
fn cut_savings(model: &Model, occ: &[Option<Occupancy>], cuts: &BTreeMap<usize, Cut>) -> u64 {
    let mut saved = 0;
    for (&l, cut) in cuts {
        let layer = model.layer(l);
        let o = occ[l].as_ref().expect("parameterized");
        let cols = layer.cols();
        let mask = layer.mask.data();
        let mut row_gone = vec![false; layer.rows()];
        for &r in &cut.rows {
            row_gone[r] = true;
        }
        let mut col_gone = vec![false; cols];
        for &c in &cut.cols {
            col_gone[c] = true;
        }
        let mut rows_after = 0;
        for (r, &count) in o.rows.iter().enumerate() {
            if row_gone[r] || count == 0 {
                continue;
            }
            let lost: usize = cut.cols.iter().filter(|&&c| mask[r * cols + c] != 0.0).count();
            if count > lost {
                rows_after += 1;
            }
        }
        let mut cols_after = 0;
        for (c, &count) in o.cols[..cols - 1].iter().enumerate() {
            if col_gone[c] || count == 0 {
                continue;
            }
            let lost: usize = cut.rows.iter().filter(|&&r| mask[r * cols + c] != 0.0).count();
            if count > lost {
                cols_after += 1;
            }
        }
        let locs = model.locations(l);
        saved += layer_flops(o.alive_rows(), o.alive_cols(), locs) - layer_flops(rows_after, cols_after, locs);
    }
    saved
}

/// Every group with at least one live member channel, with its aggregated
/// importance, FLOPs saving and score.
pub fn make_groups(model: &Model, imap: &ImportanceMap) -> Result<Vec<ChannelGroup>> {
    let topo = channel_topology(model)?;
    let occ: Vec<Option<Occupancy>> = model
        .layers()
        .iter()
        .map(|l| l.kind.is_parameterized().then(|| Occupancy::of(l)))
        .collect();
    let mut groups = Vec::new();
    for class in topo.classes() {
        let producers = topo.producers(class);
        let channels = model.layer(producers[0]).rows();
        if producers.iter().any(|&l| model.layer(l).rows() != channels) {
            return Err(Error::Topology(format!(
                "class {class}: producers disagree on channel count"
            )));
        }
        let sums: Vec<Vec<f64>> = producers.iter().map(|&l| row_sums(imap, l, channels)).collect();
        for c in 0..channels {
            let alive = producers
                .iter()
                .any(|&l| occ[l].as_ref().expect("parameterized").rows[c] > 0);
            if !alive {
                continue;
            }
            let members: Vec<(usize, usize)> = producers.iter().map(|&l| (l, c)).collect();
            let agg_loss: f64 = sums.iter().map(|s| s[c]).sum();
            let cuts = group_cuts(&topo, &members, class);
            let flops_delta = cut_savings(model, &occ, &cuts);
            groups.push(ChannelGroup {
                score: agg_loss / flops_delta as f64,
                members,
                agg_loss,
                flops_delta,
            });
        }
    }
    Ok(groups)
}

/// Zeroes the member rows of `group` and the consumer columns reading them.
pub fn remove_group(model: &mut Model, topo: &ChannelTopology, group: &ChannelGroup) {
    let class = topo.producer[group.members[0].0].expect("prunable group");
    let cuts = group_cuts(topo, &group.members, class);
    for (l, cut) in cuts {
        let layer = model.layer_mut(l);
        let cols = layer.cols();
        for r in cut.rows {
            for c in 0..cols {
                layer.kill(r * cols + c);
            }
        }
        for c in cut.cols {
            for r in 0..layer.rows() {
                layer.kill(r * cols + c);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelPlan {
    /// Largest removed score, or 0 when nothing was removed.
    pub lambda: f64,
    pub candidates: usize,
    /// `⌊p · candidates⌋`.
    pub k: usize,
    pub removed: Vec<ChannelGroup>,
    /// Groups passed over because a layer would have lost its last channel.
    pub skipped: Vec<ChannelGroup>,
    /// Output channels removed, counting every member of every group.
    pub raw_channels: usize,
    pub flops_before: u64,
    pub flops_after: u64,
    pub remaining_before: usize,
    pub remaining_after: usize,
}

impl ChannelPlan {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# lambda={} candidates={} k={} removed={} skipped={} raw_channels={} flops_before={} flops_after={} remaining_before={} remaining_after={}",
            self.lambda,
            self.candidates,
            self.k,
            self.removed.len(),
            self.skipped.len(),
            self.raw_channels,
            self.flops_before,
            self.flops_after,
            self.remaining_before,
            self.remaining_after
        );
        out.push_str("status\tmembers\tagg_loss\tflops_delta\tscore\n");
        for (status, list) in [("removed", &self.removed), ("skipped", &self.skipped)] {
            for g in list {
                let members: Vec<String> = g.members.iter().map(|(l, c)| format!("{l}:{c}")).collect();
                let _ = writeln!(
                    out,
                    "{status}\t{}\t{}\t{}\t{}",
                    members.join(","),
                    g.agg_loss,
                    g.flops_delta,
                    g.score
                );
            }
        }
        out
    }
}

fn group_order(a: &ChannelGroup, b: &ChannelGroup) -> std::cmp::Ordering {
    a.score.total_cmp(&b.score).then(a.members[0].cmp(&b.members[0]))
}

/// Chooses up to `⌊p · groups.len()⌋` lowest-scoring groups, passing over
/// any whose removal would leave a layer without a live channel.
pub fn select_groups(
    model: &Model,
    groups: &[ChannelGroup],
    p: f64,
) -> Result<(usize, Vec<ChannelGroup>, Vec<ChannelGroup>)> {
    check_fraction(p)?;
    let k = (p * groups.len() as f64).floor() as usize;
    let mut ranked: Vec<&ChannelGroup> = groups.iter().collect();
    ranked.sort_by(|a, b| group_order(a, b));
    let mut alive: Vec<usize> = model
        .layers()
        .iter()
        .map(|l| {
            if l.kind.is_parameterized() {
                Occupancy::of(l).alive_rows()
            } else {
                0
            }
        })
        .collect();
    let (mut removed, mut skipped) = (Vec::new(), Vec::new());
    for g in ranked {
        if removed.len() == k {
            break;
        }
        let mut need: BTreeMap<usize, usize> = BTreeMap::new();
        for &(l, _) in &g.members {
            *need.entry(l).or_default() += 1;
        }
        if need.iter().any(|(&l, &n)| alive[l] <= n) {
            skipped.push(g.clone());
            continue;
        }
        for (l, n) in need {
            alive[l] -= n;
        }
        removed.push(g.clone());
    }
    Ok((k, removed, skipped))
}

/// One round of channel pruning. No compensating update is applied.
pub fn channel_prune_step(model: &mut Model, stats: &ModelStats, p: f64, damping: f64) -> Result<ChannelPlan> {
    channel_prune_step_to(model, stats, p, damping, None)
}

/// As [`channel_prune_step`], but stops removing selected groups once the
/// FLOPs reduction reaches `target_ratio`.
pub fn channel_prune_step_to(
    model: &mut Model,
    stats: &ModelStats,
    p: f64,
    damping: f64,
    target_ratio: Option<f64>,
) -> Result<ChannelPlan> {
    check_fraction(p)?;
    let inverses = block_inverses(model, stats, damping)?;
    let imap = importance_map(model, &inverses)?;
    let groups = make_groups(model, &imap)?;
    if groups.is_empty() {
        return Err(Error::InvalidArgument("no prunable channel groups".into()));
    }
    let topo = channel_topology(model)?;
    let flops_before = flops_report(model).total_flops;
    let remaining_before = model.remaining_params();
    let (k, mut removed, skipped) = select_groups(model, &groups, p)?;
    for (n, g) in removed.iter().enumerate() {
        if target_ratio.is_some_and(|r| flops_report(model).flops_ratio() >= r) {
            removed.truncate(n);
            break;
        }
        remove_group(model, &topo, g);
    }
    Ok(ChannelPlan {
        lambda: removed.last().map_or(0.0, |g| g.score),
        candidates: groups.len(),
        k,
        raw_channels: removed.iter().map(|g| g.members.len()).sum(),
        removed,
        skipped,
        flops_before,
        flops_after: flops_report(model).total_flops,
        remaining_before,
        remaining_after: model.remaining_params(),
    })
}

/// Rebuilds the model without dead channels. Logits are unchanged.
pub fn compact(model: &Model) -> Result<Model> {
    let topo = channel_topology(model)?;
    let mut kept: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for class in topo.classes() {
        let producers = topo.producers(class);
        let channels = model.layer(producers[0]).rows();
        let keep: Vec<usize> = (0..channels)
            .filter(|&c| producers.iter().any(|&l| Occupancy::of(model.layer(l)).rows[c] > 0))
            .collect();
        kept.insert(class, keep);
    }
    let mut kinds = Vec::with_capacity(model.layers().len());
    let mut parts = Vec::new();
    for (idx, layer) in model.layers().iter().enumerate() {
        if !layer.kind.is_parameterized() {
            kinds.push(layer.kind);
            continue;
        }
        let (rows, cols) = (layer.rows(), layer.cols());
        let row_keep: Vec<usize> = match topo.producer[idx] {
            Some(c) => kept[&c].clone(),
            None => (0..rows).collect(),
        };
        let (col_keep, in_channels): (Vec<usize>, Option<usize>) = match topo.consumer[idx] {
            Some((c, per)) => (
                kept[&c].iter().flat_map(|&ch| ch * per..(ch + 1) * per).collect(),
                Some(kept[&c].len()),
            ),
            None => ((0..cols - 1).collect(), None),
        };
        let new_cols = col_keep.len() + 1;
        let mut w = Vec::with_capacity(row_keep.len() * new_cols);
        let mut m = Vec::with_capacity(row_keep.len() * new_cols);
        for &r in &row_keep {
            for &c in col_keep.iter().chain(std::iter::once(&(cols - 1))) {
                w.push(layer.weights.data()[r * cols + c]);
                m.push(layer.mask.data()[r * cols + c]);
            }
        }
        kinds.push(match layer.kind {
            LayerKind::Dense { .. } => LayerKind::Dense {
                inputs: col_keep.len(),
                outputs: row_keep.len(),
            },
            LayerKind::Conv2d {
                in_ch,
                kh,
                kw,
                stride,
                pad,
                ..
            } => LayerKind::Conv2d {
                in_ch: in_channels.unwrap_or(in_ch),
                out_ch: row_keep.len(),
                kh,
                kw,
                stride,
                pad,
            },
            other => other,
        });
        parts.push((
            Tensor::matrix(row_keep.len(), new_cols, w)?,
            Tensor::matrix(row_keep.len(), new_cols, m)?,
        ));
    }
    let arch = Architecture {
        input_shape: model.arch().input_shape.clone(),
        layers: kinds,
    };
    Model::from_parts(arch, parts)
}
