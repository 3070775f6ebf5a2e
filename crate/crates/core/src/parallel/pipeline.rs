//! Pipeline schedules and their expansion into per-rank programs.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::config::{Axis, Coords, ParallelismConfig, PpSchedule};
use crate::graph::{attr, OpKind, OperatorGraph, Phase, TensorRef};
use crate::sched::{NodeInstance, Program, RankProgram, Rendezvous, Segment, SegmentOp, Stream};
use crate::{Error, Result};

/// Stream of pipeline point-to-point transfers.
pub const P2P_STREAM: Stream = Stream::Comm(1);
/// Stream of collectives issued by graph nodes.
pub const COLLECTIVE_STREAM: Stream = Stream::Comm(0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SlotKind {
    Forward,
    Backward,
}

impl SlotKind {
    /// Duration in the unit-time model used to order slots.
    fn units(self) -> u64 {
        match self {
            SlotKind::Forward => 1,
            SlotKind::Backward => 2,
        }
    }
}

/// One forward or backward pass of a microbatch through a stage, placed in
/// the unit-time schedule (forward = 1, backward = 2).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    /// Pipeline direction: 0 runs stage 0 first; 1 (DualPipe only) runs the reverse.
    pub chunk: u8,
    pub microbatch: u32,
    pub kind: SlotKind,
    pub start: u64,
    pub end: u64,
}

/// Chain position of device `d` in direction `chunk`; its own inverse.
fn pos(chunk: u8, d: u64, p: u64) -> u64 {
    if chunk == 0 {
        d
    } else {
        p - 1 - d
    }
}

type SlotKey = (u8, u32, SlotKind, u64);

/// Slots that must finish before `(chunk, mb, kind)` can start on device `d`.
fn slot_deps(chunk: u8, mb: u32, kind: SlotKind, d: u64, p: u64) -> Vec<SlotKey> {
    let at = pos(chunk, d, p);
    match kind {
        SlotKind::Forward if at > 0 => vec![(chunk, mb, kind, pos(chunk, at - 1, p))],
        SlotKind::Forward => Vec::new(),
        SlotKind::Backward => {
            let mut v = vec![(chunk, mb, SlotKind::Forward, d)];
            if at + 1 < p {
                v.push((chunk, mb, kind, pos(chunk, at + 1, p)));
            }
            v
        }
    }
}

/// 1F1B order of stage `s`: `min(p - s, m)` warm-up forwards, then
/// alternating backward and forward, then the remaining backwards.
pub fn one_f_one_b_order(p: u64, m: u64, s: u64) -> Vec<(u32, SlotKind)> {
    let warm = (p - s).min(m);
    let mut order: Vec<(u32, SlotKind)> = (0..warm).map(|i| (i as u32, SlotKind::Forward)).collect();
    for i in 0..m {
        order.push((i as u32, SlotKind::Backward));
        if warm + i < m {
            order.push(((warm + i) as u32, SlotKind::Forward));
        }
    }
    order
}

/// Places fixed per-device slot orders in unit time; fails if the orders
/// wait on each other.
fn place(p: u64, orders: &[Vec<(u8, u32, SlotKind)>]) -> Result<Vec<Vec<Slot>>> {
    let mut done: BTreeMap<SlotKey, u64> = BTreeMap::new();
    let mut placed: Vec<Vec<Slot>> = vec![Vec::new(); orders.len()];
    let mut free = vec![0u64; orders.len()];
    loop {
        let mut progress = false;
        for d in 0..orders.len() {
            while let Some(&(c, mb, kind)) = orders[d].get(placed[d].len()) {
                let deps = slot_deps(c, mb, kind, d as u64, p);
                let Some(ready) = deps.iter().map(|k| done.get(k).copied()).collect::<Option<Vec<u64>>>() else { break };
                let start = ready.into_iter().fold(free[d], u64::max);
                let end = start + kind.units();
                done.insert((c, mb, kind, d as u64), end);
                placed[d].push(Slot { chunk: c, microbatch: mb, kind, start, end });
                free[d] = end;
                progress = true;
            }
        }
        if placed.iter().zip(orders).all(|(a, b)| a.len() == b.len()) {
            return Ok(placed);
        }
        if !progress {
            return Err(Error::Planning("pipeline slot orders wait on each other".into()));
        }
    }
}

/// Greedy unit-time list schedule for two opposite pipeline directions:
/// an idle device takes a ready backward before a forward, older
/// microbatches first. Forwards in flight per direction are capped like 1F1B.
fn dualpipe(p: u64, m: u64) -> Result<Vec<Vec<Slot>>> {
    let half = m / 2;
    let mut todo: Vec<Vec<(u8, u32, SlotKind)>> = (0..p)
        .map(|_| {
            let mut v = Vec::new();
            for c in 0..2u8 {
                let mbs = if c == 0 { 0..half } else { half..m };
                for mb in mbs {
                    v.push((c, mb as u32, SlotKind::Forward));
                    v.push((c, mb as u32, SlotKind::Backward));
                }
            }
            v
        })
        .collect();
    let mut done: BTreeMap<SlotKey, u64> = BTreeMap::new();
    let mut placed: Vec<Vec<Slot>> = vec![Vec::new(); p as usize];
    let mut free = vec![0u64; p as usize];
    let mut inflight = vec![[0u64; 2]; p as usize];
    let horizon = 3 * m * p + 8;
    let mut t = 0;
    while todo.iter().any(|v| !v.is_empty()) {
        if t > horizon * 4 {
            return Err(Error::Planning("dualpipe schedule did not converge".into()));
        }
        for d in 0..p as usize {
            if free[d] > t {
                continue;
            }
            let ready = |&(c, mb, kind): &(u8, u32, SlotKind)| {
                let cap = p - pos(c, d as u64, p);
                if kind == SlotKind::Forward && inflight[d][c as usize] >= cap {
                    return false;
                }
                slot_deps(c, mb, kind, d as u64, p).iter().all(|k| done.get(k).is_some_and(|&e| e <= t))
            };
            let best = todo[d]
                .iter()
                .enumerate()
                .filter(|(_, s)| ready(s))
                .min_by_key(|(_, &(c, mb, kind))| (kind == SlotKind::Forward, mb, c))
                .map(|(i, _)| i);
            if let Some(i) = best {
                let (c, mb, kind) = todo[d].remove(i);
                let end = t + kind.units();
                done.insert((c, mb, kind, d as u64), end);
                placed[d].push(Slot { chunk: c, microbatch: mb, kind, start: t, end });
                free[d] = end;
                match kind {
                    SlotKind::Forward => inflight[d][c as usize] += 1,
                    SlotKind::Backward => inflight[d][c as usize] -= 1,
                }
            }
        }
        t += 1;
    }
    Ok(placed)
}

/// Unit-time slot schedule of every pipeline device.
pub fn slot_schedule(pp: u64, microbatches: u64, schedule: PpSchedule, training: bool) -> Result<Vec<Vec<Slot>>> {
    if pp == 0 || microbatches == 0 {
        return Err(Error::config("pp and microbatches must be positive"));
    }
    if !training {
        let orders: Vec<Vec<_>> = (0..pp).map(|_| (0..microbatches as u32).map(|mb| (0u8, mb, SlotKind::Forward)).collect()).collect();
        return place(pp, &orders);
    }
    match schedule {
        PpSchedule::OneFOneB => {
            let orders: Vec<Vec<_>> = (0..pp)
                .map(|s| one_f_one_b_order(pp, microbatches, s).into_iter().map(|(mb, k)| (0u8, mb, k)).collect())
                .collect();
            place(pp, &orders)
        }
        PpSchedule::Dualpipe => {
            if pp % 2 != 0 || microbatches % 2 != 0 {
                return Err(Error::config("dualpipe needs even pp and microbatches"));
            }
            dualpipe(pp, microbatches)
        }
    }
}

/// Names linking consecutive layers: `fwd_out` of one layer feeds `fwd_in`
/// of the next, and `bwd_out` feeds the previous layer's `bwd_in`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChainNames {
    pub fwd_in: String,
    pub fwd_out: String,
    pub bwd_in: String,
    pub bwd_out: String,
}

impl Default for ChainNames {
    fn default() -> Self {
        ChainNames { fwd_in: "x".into(), fwd_out: "y".into(), bwd_in: "grad.y".into(), bwd_out: "grad.x".into() }
    }
}

/// Which ranks get a program.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ProgramMode {
    /// One rank per pipeline stage (tp and dp coordinate 0); collectives
    /// rendezvous only with themselves but are priced for the full group.
    #[default]
    Representative,
    /// Every rank of the world.
    Full,
}

pub struct PipelineSpec<'a> {
    /// Per-rank block graph, identical for every layer.
    pub graph: &'a OperatorGraph,
    pub cfg: &'a ParallelismConfig,
    /// Layers of each pipeline stage.
    pub layers: Vec<u64>,
    pub training: bool,
    pub mode: ProgramMode,
    pub chain: ChainNames,
}

type Key = (u64, u32, u64);

struct RankBuilder {
    segs: Vec<(Key, Segment)>,
}

impl RankBuilder {
    fn push(&mut self, key: Key, seg: Segment) -> u32 {
        self.segs.push((key, seg));
        (self.segs.len() - 1) as u32
    }

    /// Sorts by key and renumbers dependencies.
    fn finish(self, rank: u32) -> Result<RankProgram> {
        let mut order: Vec<usize> = (0..self.segs.len()).collect();
        order.sort_by_key(|&i| self.segs[i].0);
        let mut new_pos = vec![0u32; order.len()];
        for (p, &i) in order.iter().enumerate() {
            new_pos[i] = p as u32;
        }
        let mut segs: Vec<Option<Segment>> = self.segs.into_iter().map(|(_, s)| Some(s)).collect();
        let mut out = Vec::with_capacity(order.len());
        for (p, &i) in order.iter().enumerate() {
            let mut s = segs[i].take().unwrap();
            for d in &mut s.deps {
                *d = new_pos[*d as usize];
                if *d as usize >= p {
                    return Err(Error::Planning(format!("rank {rank}: segment order violates a dependency")));
                }
            }
            s.deps.sort_unstable();
            s.deps.dedup();
            out.push(s);
        }
        Ok(RankProgram { rank, segments: out })
    }
}

/// Follows no-op chains back to the tensor they forward.
fn through_noops(g: &OperatorGraph, index: &BTreeMap<&str, usize>, r: &TensorRef) -> TensorRef {
    let mut cur = r.clone();
    while let TensorRef::Output { node, index: k } = &cur {
        let n = &g.nodes[index[node.as_str()]];
        if n.kind != OpKind::Noop || n.inputs.len() != n.outputs.len() {
            break;
        }
        cur = n.inputs[*k].clone();
    }
    cur
}

/// Expands the slot schedule into a program: every slot becomes the graph's
/// nodes of that phase for each layer of the stage, with activations and
/// gradients passed between stages by send/receive pairs. Segments are
/// ordered by their slot's unit-time start, so every rank issues transfers
/// and collectives in one global order.
pub fn build_program(spec: &PipelineSpec) -> Result<(Program, Vec<Vec<Slot>>)> {
    let cfg = spec.cfg;
    let g = spec.graph;
    let p = cfg.pp;
    if spec.layers.len() as u64 != p || spec.layers.contains(&0) {
        return Err(Error::config(format!("need a positive layer count for each of {p} stages")));
    }
    g.validate()?;
    let slots = slot_schedule(p, cfg.microbatches, cfg.pp_schedule, spec.training)?;
    let m = cfg.microbatches;
    let index = g.index();
    let n = g.nodes.len();
    let chain = &spec.chain;
    let fwd_out = g.output(&chain.fwd_out).map(|o| through_noops(g, &index, &o.tensor));
    let bwd_out = g.output(&chain.bwd_out).map(|o| through_noops(g, &index, &o.tensor));
    let has_fwd_in = g.input(&chain.fwd_in).is_some();
    if p > 1 && (fwd_out.is_none() || !has_fwd_in || (spec.training && bwd_out.is_none())) {
        return Err(Error::config(format!(
            "pipeline parallelism needs block input `{}` and outputs `{}`/`{}`",
            chain.fwd_in, chain.fwd_out, chain.bwd_out
        )));
    }
    let out_bytes = |r: &Option<TensorRef>| r.as_ref().and_then(|r| g.resolve(r)).map_or(0, |m| m.bytes());
    let (act_bytes, grad_bytes) = (out_bytes(&fwd_out), out_bytes(&bwd_out));

    let slot_end: BTreeMap<SlotKey, u64> = slots
        .iter()
        .enumerate()
        .flat_map(|(d, v)| v.iter().map(move |s| ((s.chunk, s.microbatch, s.kind, d as u64), s.end)))
        .collect();
    // Last backward slot of each direction on each device, for step-once nodes.
    let mut last_bwd: BTreeMap<(u64, u8), u32> = BTreeMap::new();
    for (d, v) in slots.iter().enumerate() {
        for s in v.iter().filter(|s| s.kind == SlotKind::Backward) {
            last_bwd.insert((d as u64, s.chunk), s.microbatch);
        }
    }
    let mut first_fwd: BTreeMap<(u64, u8), u32> = BTreeMap::new();
    for (d, v) in slots.iter().enumerate() {
        for s in v.iter().filter(|s| s.kind == SlotKind::Forward) {
            first_fwd.entry((d as u64, s.chunk)).or_insert(s.microbatch);
        }
    }

    let phase_nodes = |ph: Phase| -> Vec<usize> { (0..n).filter(|&k| g.nodes[k].phase == ph && g.nodes[k].kind != OpKind::Noop).collect() };
    let fwd_nodes = phase_nodes(Phase::Forward);
    let bwd_nodes = if spec.training { phase_nodes(Phase::Backward) } else { Vec::new() };
    let opt_nodes = if spec.training { phase_nodes(Phase::Optimizer) } else { Vec::new() };
    let inputs: Vec<Vec<TensorRef>> = g.nodes.iter().map(|nd| nd.inputs.iter().map(|r| through_noops(g, &index, r)).collect()).collect();

    let p2p_tag = |c: u8, mb: u32, at: u64, kind: SlotKind| -> u64 {
        (((c as u64 * m + mb as u64) * p + at) << 1) | (kind == SlotKind::Backward) as u64
    };
    let max_layers = *spec.layers.iter().max().unwrap();
    let coll_tag = |at: u64, c: u8, mb: u32, l: u32, k: usize| -> u64 {
        ((((at * 2 + c as u64) * m + mb as u64) * max_layers + l as u64) * n as u64) + k as u64
    };

    let replicas: Vec<(u64, u64)> = match spec.mode {
        ProgramMode::Representative => vec![(0, 0)],
        ProgramMode::Full => (0..cfg.dp).flat_map(|dp| (0..cfg.tp).map(move |tp| (tp, dp))).collect(),
    };
    let mut ranks = Vec::new();
    for &(tp, dp) in &replicas {
        for d in 0..p {
            let rank_at = |dev: u64| cfg.rank_of(Coords { tp, dp, pp: dev }).map(|r| r as u32);
            let me = rank_at(d)?;
            let group_of = |k: usize| -> Result<Option<Rendezvous>> {
                let nd = &g.nodes[k];
                if !nd.kind.is_collective() {
                    return Ok(None);
                }
                let members: Vec<u64> = match nd.attr_str(attr::GROUP) {
                    Some("tp") => cfg.group(me as u64, Axis::Tp)?,
                    Some("dp") => cfg.group(me as u64, Axis::Dp)?,
                    Some("ep") => cfg.ep_group(me as u64)?,
                    other => return Err(Error::config(format!("collective `{}` names unknown group {other:?}", nd.id))),
                };
                if let Some(size) = nd.attr_u64(attr::GROUP_SIZE) {
                    if size != members.len() as u64 {
                        return Err(Error::config(format!(
                            "collective `{}` has group_size {size} but the {} group has {} ranks",
                            nd.id,
                            nd.attr_str(attr::GROUP).unwrap_or("?"),
                            members.len()
                        )));
                    }
                }
                let group: Vec<u32> = members.iter().map(|&r| r as u32).collect();
                let present = match spec.mode {
                    ProgramMode::Representative => vec![me],
                    ProgramMode::Full => group.clone(),
                };
                Ok(Some(Rendezvous { tag: 0, present, group }))
            };
            let groups: Vec<Option<Rendezvous>> = (0..n).map(group_of).collect::<Result<_>>()?;

            let mut b = RankBuilder { segs: Vec::new() };
            // (chunk, mb, layer, node) -> segment
            let mut seg_of: BTreeMap<(u8, u32, u32, usize), u32> = BTreeMap::new();
            let mut fwd_in_seg: BTreeMap<(u8, u32), u32> = BTreeMap::new();
            let mut bwd_in_seg: BTreeMap<(u8, u32), u32> = BTreeMap::new();
            let mut max_end = 0;

            for slot in &slots[d as usize] {
                let (c, mb) = (slot.chunk, slot.microbatch);
                let at = pos(c, d, p);
                let layers = spec.layers[at as usize] as u32;
                max_end = max_end.max(slot.end);
                let mut sub = 1u32;
                match slot.kind {
                    SlotKind::Forward => {
                        if at > 0 {
                            let src = pos(c, at - 1, p);
                            let tag = p2p_tag(c, mb, at, SlotKind::Forward);
                            let key = (slot_end[&(c, mb, SlotKind::Forward, src)], 0, tag);
                            let op = SegmentOp::Recv { peer: rank_at(src)?, tag, bytes: act_bytes };
                            let s = b.push(key, Segment { op, stream: P2P_STREAM, deps: Vec::new(), collective: None });
                            fwd_in_seg.insert((c, mb), s);
                        }
                        let once = first_fwd.get(&(d, c)) == Some(&mb);
                        for l in 0..layers {
                            for &k in &fwd_nodes {
                                if g.nodes[k].attr_bool(attr::STEP_ONCE) && !once {
                                    continue;
                                }
                                let mut deps = Vec::new();
                                for r in &inputs[k] {
                                    match r {
                                        TensorRef::Input(name) if *name == chain.fwd_in => {
                                            if l > 0 {
                                                if let Some(y) = &fwd_out {
                                                    let pk = index[y.node().unwrap()];
                                                    deps.extend(seg_of.get(&(c, mb, l - 1, pk)));
                                                }
                                            } else {
                                                deps.extend(fwd_in_seg.get(&(c, mb)));
                                            }
                                        }
                                        TensorRef::Input(_) => {}
                                        TensorRef::Output { node, .. } => deps.extend(seg_of.get(&(c, mb, l, index[node.as_str()]))),
                                    }
                                }
                                let s = node_segment(g, k, mb, l, deps, &groups, coll_tag(at, c, mb, l, k));
                                let id = b.push((slot.start, sub, 0), s);
                                sub += 1;
                                seg_of.insert((c, mb, l, k), id);
                            }
                        }
                        if at + 1 < p {
                            let dst = pos(c, at + 1, p);
                            let tag = p2p_tag(c, mb, at + 1, SlotKind::Forward);
                            let deps = fwd_out
                                .as_ref()
                                .and_then(|y| seg_of.get(&(c, mb, layers - 1, index[y.node()?])))
                                .copied()
                                .into_iter()
                                .collect();
                            let op = SegmentOp::Send { peer: rank_at(dst)?, tag, bytes: act_bytes };
                            b.push((slot.end, 0, tag), Segment { op, stream: P2P_STREAM, deps, collective: None });
                        }
                    }
                    SlotKind::Backward => {
                        if at + 1 < p {
                            let src = pos(c, at + 1, p);
                            let tag = p2p_tag(c, mb, at, SlotKind::Backward);
                            let key = (slot_end[&(c, mb, SlotKind::Backward, src)], 0, tag);
                            let op = SegmentOp::Recv { peer: rank_at(src)?, tag, bytes: grad_bytes };
                            let s = b.push(key, Segment { op, stream: P2P_STREAM, deps: Vec::new(), collective: None });
                            bwd_in_seg.insert((c, mb), s);
                        }
                        let once = last_bwd.get(&(d, c)) == Some(&mb);
                        for l in (0..layers).rev() {
                            for &k in &bwd_nodes {
                                if g.nodes[k].attr_bool(attr::STEP_ONCE) && !once {
                                    continue;
                                }
                                let mut deps = Vec::new();
                                for r in &inputs[k] {
                                    match r {
                                        TensorRef::Input(name) if *name == chain.bwd_in => {
                                            if l + 1 < layers {
                                                if let Some(gx) = &bwd_out {
                                                    deps.extend(seg_of.get(&(c, mb, l + 1, index[gx.node().unwrap()])));
                                                }
                                            } else if let Some(s) = bwd_in_seg.get(&(c, mb)) {
                                                deps.push(*s);
                                            } else if let Some(y) = &fwd_out {
                                                // Loss gradient: available once the forward output is.
                                                deps.extend(seg_of.get(&(c, mb, l, index[y.node().unwrap()])));
                                            }
                                        }
                                        TensorRef::Input(_) => {}
                                        TensorRef::Output { node, .. } => deps.extend(seg_of.get(&(c, mb, l, index[node.as_str()]))),
                                    }
                                }
                                let s = node_segment(g, k, mb, l, deps, &groups, coll_tag(at, c, mb, l, k));
                                let id = b.push((slot.start, sub, 0), s);
                                sub += 1;
                                seg_of.insert((c, mb, l, k), id);
                            }
                        }
                        if at > 0 {
                            let dst = pos(c, at - 1, p);
                            let tag = p2p_tag(c, mb, at - 1, SlotKind::Backward);
                            let deps = bwd_out
                                .as_ref()
                                .and_then(|gx| seg_of.get(&(c, mb, 0, index[gx.node()?])))
                                .copied()
                                .into_iter()
                                .collect();
                            let op = SegmentOp::Send { peer: rank_at(dst)?, tag, bytes: grad_bytes };
                            b.push((slot.end, 0, tag), Segment { op, stream: P2P_STREAM, deps, collective: None });
                        }
                    }
                }
            }

            // Optimizer-phase nodes run once after all slots.
            let mut sub = 1u32;
            let chunks: Vec<u8> = last_bwd.keys().filter(|(dev, _)| *dev == d).map(|(_, c)| *c).collect();
            for c in chunks {
                let mb = last_bwd[&(d, c)];
                let at = pos(c, d, p);
                for l in 0..spec.layers[at as usize] as u32 {
                    for &k in &opt_nodes {
                        let deps = inputs[k]
                            .iter()
                            .filter_map(|r| r.node().and_then(|id| seg_of.get(&(c, mb, l, index[id]))).copied())
                            .collect();
                        let s = node_segment(g, k, mb, l, deps, &groups, coll_tag(at, c, mb, l, k));
                        let id = b.push((max_end, sub, 0), s);
                        sub += 1;
                        seg_of.insert((c, mb, l, k), id);
                    }
                }
            }
            ranks.push(b.finish(me)?);
        }
    }
    ranks.sort_by_key(|r| r.rank);
    let program = Program { graphs: vec![g.clone()], ranks };
    program.validate()?;
    Ok((program, slots))
}

fn node_segment(g: &OperatorGraph, k: usize, mb: u32, l: u32, deps: Vec<u32>, groups: &[Option<Rendezvous>], tag: u64) -> Segment {
    let nd = &g.nodes[k];
    let stream = if nd.kind.is_comm() { COLLECTIVE_STREAM } else { Stream::Compute };
    let collective = groups[k].clone().map(|mut r| {
        r.tag = tag;
        r
    });
    Segment {
        op: SegmentOp::Node(NodeInstance { graph: 0, node: k as u32, microbatch: mb, layer: l }),
        stream,
        deps,
        collective,
    }
}
