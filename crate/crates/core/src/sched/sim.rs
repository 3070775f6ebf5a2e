use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::contention::{integrate_flows, Flow, LinkUse};
use super::program::{Program, Segment, SegmentOp, Stream};
use super::timeline::{Timeline, TimelineEntry};
use crate::graph::{op_bytes, op_flops, TensorMeta};
use crate::{Error, Result};

/// Link traffic of a communication segment.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Transfer {
    pub latency_ns: f64,
    pub links: Vec<LinkUse>,
}

/// Cost of one segment.
#[derive(Clone, Debug, PartialEq)]
pub struct Priced {
    pub ns: f64,
    pub engine: &'static str,
    pub transfer: Option<Transfer>,
}

impl Priced {
    pub fn fixed(ns: f64) -> Self {
        Priced { ns, engine: "fixed", transfer: None }
    }
}

pub trait SegmentPricer {
    fn price(&self, program: &Program, rank: u32, seg: &Segment) -> Result<Priced>;
}

/// Prices `Task` segments by their own duration and everything else as free.
pub struct TaskPricer;

impl SegmentPricer for TaskPricer {
    fn price(&self, _: &Program, _: u32, seg: &Segment) -> Result<Priced> {
        Ok(match &seg.op {
            SegmentOp::Task { duration_ns, .. } => Priced { ns: *duration_ns, engine: "task", transfer: None },
            _ => Priced::fixed(0.0),
        })
    }
}

impl<F: Fn(&Program, u32, &Segment) -> Result<Priced>> SegmentPricer for F {
    fn price(&self, program: &Program, rank: u32, seg: &Segment) -> Result<Priced> {
        self(program, rank, seg)
    }
}

/// Multipliers applied to the overlapped part of a segment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlowdownFactors {
    /// Compute running alongside communication.
    pub compute: f64,
    /// Communication running alongside compute.
    pub comm: f64,
    /// Communication running alongside other communication.
    pub comm_comm: f64,
}

impl Default for SlowdownFactors {
    fn default() -> Self {
        SlowdownFactors { compute: 1.0, comm: 1.0, comm_comm: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlapModel {
    /// Overlap slowdown factors only.
    #[default]
    Ratio,
    /// Compute/communication factors plus shared-link bandwidth for
    /// concurrent transfers (replacing the comm/comm factor).
    Bandwidth,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub overlap: OverlapModel,
    pub factors: SlowdownFactors,
    pub max_iterations: usize,
    /// Convergence threshold on the largest duration change.
    pub tolerance_ns: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions { overlap: OverlapModel::Ratio, factors: SlowdownFactors::default(), max_iterations: 10, tolerance_ns: 1e-3 }
    }
}

/// Start and end of every segment, indexed like the program.
#[derive(Clone, Debug, PartialEq)]
pub struct Placement {
    pub start: Vec<Vec<f64>>,
    pub end: Vec<Vec<f64>>,
}

impl Placement {
    pub fn makespan(&self) -> f64 {
        self.end.iter().flatten().copied().fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct Head {
    rank: usize,
    stream: Stream,
}

/// Where the partner(s) of each rendezvous segment live.
enum Partners {
    None,
    /// Point-to-point partner, if one exists.
    Pair(Option<(usize, usize)>),
    /// Collective members; `None` entries are missing.
    Group(Vec<Option<(usize, usize)>>),
}

struct Index {
    streams: Vec<BTreeMap<Stream, Vec<usize>>>,
    partners: Vec<Vec<Partners>>,
}

fn build_index(p: &Program) -> Result<Index> {
    let mut streams = Vec::with_capacity(p.ranks.len());
    for rp in &p.ranks {
        let mut m: BTreeMap<Stream, Vec<usize>> = BTreeMap::new();
        for (i, s) in rp.segments.iter().enumerate() {
            m.entry(s.stream).or_default().push(i);
        }
        streams.push(m);
    }
    let mut sends: BTreeMap<(u32, u32, u64), Vec<(usize, usize)>> = BTreeMap::new();
    let mut recvs: BTreeMap<(u32, u32, u64), Vec<(usize, usize)>> = BTreeMap::new();
    let mut colls: BTreeMap<(u32, u64), Vec<(usize, usize)>> = BTreeMap::new();
    for (r, rp) in p.ranks.iter().enumerate() {
        for (i, s) in rp.segments.iter().enumerate() {
            match &s.op {
                SegmentOp::Send { peer, tag, .. } => sends.entry((rp.rank, *peer, *tag)).or_default().push((r, i)),
                SegmentOp::Recv { peer, tag, .. } => recvs.entry((*peer, rp.rank, *tag)).or_default().push((r, i)),
                _ => {}
            }
            if let Some(c) = &s.collective {
                colls.entry((rp.rank, c.tag)).or_default().push((r, i));
            }
        }
    }
    for (what, map) in [("send", &sends), ("receive", &recvs)] {
        if let Some(((a, b, tag), _)) = map.iter().find(|(_, v)| v.len() > 1) {
            return Err(Error::config(format!("duplicate {what} {a}->{b} with tag {tag}")));
        }
    }
    if let Some(((r, tag), _)) = colls.iter().find(|(_, v)| v.len() > 1) {
        return Err(Error::config(format!("rank {r} has two collectives with tag {tag}")));
    }
    let mut partners = Vec::with_capacity(p.ranks.len());
    for rp in &p.ranks {
        let mut v = Vec::with_capacity(rp.segments.len());
        for s in &rp.segments {
            v.push(match (&s.op, &s.collective) {
                (_, Some(c)) => Partners::Group(c.present.iter().map(|m| colls.get(&(*m, c.tag)).map(|x| x[0])).collect()),
                (SegmentOp::Send { peer, tag, .. }, None) => Partners::Pair(recvs.get(&(rp.rank, *peer, *tag)).map(|x| x[0])),
                (SegmentOp::Recv { peer, tag, .. }, None) => Partners::Pair(sends.get(&(*peer, rp.rank, *tag)).map(|x| x[0])),
                _ => Partners::None,
            });
        }
        partners.push(v);
    }
    Ok(Index { streams, partners })
}

/// One pass of the event simulation with fixed durations.
///
/// Segments of a stream run in order; a segment starts when its stream is
/// free and its dependencies are done. Send/receive pairs and collective
/// members start together once all of them are ready and share the longest
/// duration among them. Fails with [`Error::Deadlock`] listing a wait cycle
/// when no segment can make progress.
pub fn place(p: &Program, durations: &[Vec<f64>]) -> Result<Placement> {
    let idx = build_index(p)?;
    place_indexed(p, &idx, durations)
}

fn place_indexed(p: &Program, idx: &Index, dur: &[Vec<f64>]) -> Result<Placement> {
    let nr = p.ranks.len();
    let mut start: Vec<Vec<f64>> = p.ranks.iter().map(|r| vec![f64::NAN; r.segments.len()]).collect();
    let mut end = start.clone();
    let mut done: Vec<Vec<bool>> = p.ranks.iter().map(|r| vec![false; r.segments.len()]).collect();
    let mut head: Vec<BTreeMap<Stream, usize>> = idx.streams.iter().map(|m| m.keys().map(|s| (*s, 0)).collect()).collect();
    let mut free: Vec<BTreeMap<Stream, f64>> = idx.streams.iter().map(|m| m.keys().map(|s| (*s, 0.0)).collect()).collect();
    let total: usize = p.segment_count();
    let mut placed = 0;

    let at_head = |head: &Vec<BTreeMap<Stream, usize>>, r: usize, i: usize| -> bool {
        let s = p.ranks[r].segments[i].stream;
        idx.streams[r][&s].get(head[r][&s]) == Some(&i)
    };
    let ready_time = |done: &Vec<Vec<bool>>, end: &Vec<Vec<f64>>, free: &Vec<BTreeMap<Stream, f64>>, r: usize, i: usize| -> Option<f64> {
        let seg = &p.ranks[r].segments[i];
        let mut t = free[r][&seg.stream];
        for &d in &seg.deps {
            if !done[r][d as usize] {
                return None;
            }
            t = t.max(end[r][d as usize]);
        }
        Some(t)
    };

    while placed < total {
        let mut progress = false;
        for r in 0..nr {
            let streams: Vec<Stream> = idx.streams[r].keys().copied().collect();
            for s in streams {
                while let Some(&i) = idx.streams[r][&s].get(head[r][&s]) {
                    let Some(t) = ready_time(&done, &end, &free, r, i) else { break };
                    let members: Vec<(usize, usize)> = match &idx.partners[r][i] {
                        Partners::None => vec![(r, i)],
                        Partners::Pair(Some(q)) => vec![(r, i), *q],
                        Partners::Pair(None) => break,
                        Partners::Group(g) => match g.iter().copied().collect::<Option<Vec<_>>>() {
                            Some(v) => v,
                            None => break,
                        },
                    };
                    let mut t0 = t;
                    let mut d = 0.0f64;
                    let mut ok = true;
                    for &(mr, mi) in &members {
                        if !at_head(&head, mr, mi) {
                            ok = false;
                            break;
                        }
                        match ready_time(&done, &end, &free, mr, mi) {
                            Some(tm) => t0 = t0.max(tm),
                            None => {
                                ok = false;
                                break;
                            }
                        }
                        d = d.max(dur[mr][mi]);
                    }
                    if !ok {
                        break;
                    }
                    for &(mr, mi) in &members {
                        start[mr][mi] = t0;
                        end[mr][mi] = t0 + d;
                        done[mr][mi] = true;
                        let ms = p.ranks[mr].segments[mi].stream;
                        *head[mr].get_mut(&ms).unwrap() += 1;
                        *free[mr].get_mut(&ms).unwrap() = t0 + d;
                        placed += 1;
                    }
                    progress = true;
                }
            }
        }
        if !progress && placed < total {
            return Err(deadlock(p, idx, &head, &done));
        }
    }
    Ok(Placement { start, end })
}

/// Builds the wait-for graph between stream heads and reports a cycle.
fn deadlock(p: &Program, idx: &Index, head: &[BTreeMap<Stream, usize>], done: &[Vec<bool>]) -> Error {
    let seg_at = |h: Head| -> Option<usize> { idx.streams[h.rank][&h.stream].get(head[h.rank][&h.stream]).copied() };
    let describe = |h: Head, i: usize| format!("rank {} {}: {}", p.ranks[h.rank].rank, h.stream, p.label(&p.ranks[h.rank].segments[i]));
    let mut waits: BTreeMap<Head, Vec<Head>> = BTreeMap::new();
    let mut unmatched = Vec::new();
    for r in 0..p.ranks.len() {
        for &s in idx.streams[r].keys() {
            let h = Head { rank: r, stream: s };
            let Some(i) = seg_at(h) else { continue };
            let seg = &p.ranks[r].segments[i];
            let mut w = Vec::new();
            for &d in &seg.deps {
                if !done[r][d as usize] {
                    w.push(Head { rank: r, stream: p.ranks[r].segments[d as usize].stream });
                }
            }
            let others: Vec<Option<(usize, usize)>> = match &idx.partners[r][i] {
                Partners::None => Vec::new(),
                Partners::Pair(q) => vec![*q],
                Partners::Group(g) => g.clone(),
            };
            for q in others {
                match q {
                    Some((qr, qi)) if (qr, qi) != (r, i) => {
                        let qs = p.ranks[qr].segments[qi].stream;
                        if idx.streams[qr][&qs].get(head[qr][&qs]) != Some(&qi) {
                            w.push(Head { rank: qr, stream: qs });
                        }
                    }
                    Some(_) => {}
                    None => unmatched.push(format!("{} (no matching partner)", describe(h, i))),
                }
            }
            waits.insert(h, w);
        }
    }
    // Depth-first search for a cycle.
    let mut state: BTreeMap<Head, u8> = BTreeMap::new();
    let mut stack: Vec<Head> = Vec::new();
    fn dfs(h: Head, waits: &BTreeMap<Head, Vec<Head>>, state: &mut BTreeMap<Head, u8>, stack: &mut Vec<Head>) -> Option<Vec<Head>> {
        state.insert(h, 1);
        stack.push(h);
        for &n in waits.get(&h).map(Vec::as_slice).unwrap_or(&[]) {
            match state.get(&n).copied().unwrap_or(0) {
                0 => {
                    if let Some(c) = dfs(n, waits, state, stack) {
                        return Some(c);
                    }
                }
                1 => {
                    let at = stack.iter().position(|x| *x == n).unwrap();
                    return Some(stack[at..].to_vec());
                }
                _ => {}
            }
        }
        stack.pop();
        state.insert(h, 2);
        None
    }
    let heads: Vec<Head> = waits.keys().copied().collect();
    for h in heads {
        if state.get(&h).copied().unwrap_or(0) == 0 {
            if let Some(cycle) = dfs(h, &waits, &mut state, &mut stack) {
                let mut out: Vec<String> = cycle.iter().map(|&c| describe(c, seg_at(c).unwrap())).collect();
                out.extend(unmatched);
                return Error::Deadlock(out);
            }
        }
    }
    if unmatched.is_empty() {
        unmatched = waits.keys().filter_map(|&h| seg_at(h).map(|i| describe(h, i))).collect();
    }
    Error::Deadlock(unmatched)
}

/// Merged busy intervals.
fn union(mut iv: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    iv.retain(|(a, b)| b > a);
    iv.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (a, b) in iv {
        match out.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

/// Length of `[a, b)` covered by sorted disjoint intervals `u`.
fn covered(u: &[(f64, f64)], a: f64, b: f64) -> f64 {
    let from = u.partition_point(|iv| iv.1 <= a);
    let mut total = 0.0;
    for &(x, y) in &u[from..] {
        if x >= b {
            break;
        }
        total += y.min(b) - x.max(a);
    }
    total.max(0.0)
}

/// Total length of sorted disjoint intervals.
pub fn measure(u: &[(f64, f64)]) -> f64 {
    u.iter().map(|(a, b)| b - a).sum()
}

/// Busy intervals of one rank, split into compute and per-comm-stream unions.
struct Busy {
    compute: Vec<(f64, f64)>,
    comm: BTreeMap<u8, Vec<(f64, f64)>>,
}

fn busy(p: &Program, pl: &Placement, r: usize) -> Busy {
    let mut compute = Vec::new();
    let mut comm: BTreeMap<u8, Vec<(f64, f64)>> = BTreeMap::new();
    for (i, s) in p.ranks[r].segments.iter().enumerate() {
        let iv = (pl.start[r][i], pl.end[r][i]);
        match s.stream {
            Stream::Compute => compute.push(iv),
            Stream::Comm(k) => comm.entry(k).or_default().push(iv),
        }
    }
    Busy { compute: union(compute), comm: comm.into_iter().map(|(k, v)| (k, union(v))).collect() }
}

/// Durations after applying overlap slowdowns to placement `pl`.
fn slowed(p: &Program, pl: &Placement, base: &[Vec<f64>], cur: &[Vec<f64>], f: &SlowdownFactors, comm_comm: bool) -> Vec<Vec<f64>> {
    let mut out = cur.to_vec();
    for r in 0..p.ranks.len() {
        let b = busy(p, pl, r);
        let all_comm = union(b.comm.values().flatten().copied().collect());
        for (i, s) in p.ranks[r].segments.iter().enumerate() {
            let (a, e) = (pl.start[r][i], pl.end[r][i]);
            let d0 = base[r][i];
            if e <= a || d0 <= 0.0 {
                continue;
            }
            let cand = match s.stream {
                Stream::Compute => d0 + (f.compute - 1.0) * covered(&all_comm, a, e).min(d0),
                Stream::Comm(k) => {
                    let mut c = d0 + (f.comm - 1.0) * covered(&b.compute, a, e).min(d0);
                    if comm_comm {
                        let others = union(b.comm.iter().filter(|(j, _)| **j != k).flat_map(|(_, v)| v.iter().copied()).collect());
                        c += (f.comm_comm - 1.0) * covered(&others, a, e).min(d0);
                    }
                    c
                }
            };
            // Never shrink: keeps the iteration monotone so it converges.
            out[r][i] = out[r][i].max(cand);
        }
    }
    out
}

/// Durations stretched by link sharing among the transfers of `pl`.
fn contended(p: &Program, pl: &Placement, base: &[Vec<f64>], cur: &[Vec<f64>], priced: &[Vec<Priced>]) -> Result<Vec<Vec<f64>>> {
    let mut flows = Vec::new();
    let mut owner = Vec::new();
    for (r, rp) in p.ranks.iter().enumerate() {
        for i in 0..rp.segments.len() {
            let Some(t) = &priced[r][i].transfer else { continue };
            if t.links.is_empty() {
                continue;
            }
            // Collectives and send/receive pairs appear once per member; keep one flow.
            let seg = &rp.segments[i];
            let lead = match (&seg.op, &seg.collective) {
                (_, Some(c)) => c.present.iter().min() == Some(&rp.rank),
                (SegmentOp::Recv { .. }, None) => false,
                _ => true,
            };
            if !lead {
                continue;
            }
            flows.push(Flow {
                start_ns: pl.start[r][i],
                latency_ns: t.latency_ns.min(base[r][i]),
                transfer_ns: (base[r][i] - t.latency_ns).max(0.0),
                links: t.links.clone(),
            });
            owner.push((r, i));
        }
    }
    let mut out = cur.to_vec();
    if flows.is_empty() {
        return Ok(out);
    }
    let res = integrate_flows(&flows)?;
    for (k, &(r, i)) in owner.iter().enumerate() {
        let d = res.end_ns[k] - flows[k].start_ns;
        out[r][i] = out[r][i].max(d);
        // Propagate to the other members of the rendezvous.
        let seg = &p.ranks[r].segments[i];
        if let Some(c) = &seg.collective {
            for m in c.present.iter().filter(|m| **m != p.ranks[r].rank) {
                if let Some(mr) = p.rank_index(*m) {
                    if let Some(mi) = p.ranks[mr].segments.iter().position(|s| s.collective.as_ref().is_some_and(|x| x.tag == c.tag)) {
                        out[mr][mi] = out[mr][mi].max(d);
                    }
                }
            }
        }
    }
    Ok(out)
}

fn max_change(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().zip(b).flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs())).fold(0.0, f64::max)
}

/// Prices every segment, then simulates, re-pricing overlapped segments
/// until durations stop changing (or `max_iterations` passes).
pub fn simulate(p: &Program, pricer: &dyn SegmentPricer, opts: &SimOptions) -> Result<Timeline> {
    p.validate()?;
    let priced: Vec<Vec<Priced>> = p
        .ranks
        .iter()
        .map(|rp| rp.segments.iter().map(|s| pricer.price(p, rp.rank, s)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    for (rp, v) in p.ranks.iter().zip(&priced) {
        if let Some(i) = v.iter().position(|x| !(x.ns >= 0.0) || !x.ns.is_finite()) {
            return Err(Error::config(format!("rank {} segment {i}: invalid duration {}", rp.rank, v[i].ns)));
        }
    }
    let base: Vec<Vec<f64>> = priced.iter().map(|v| v.iter().map(|x| x.ns).collect()).collect();
    let idx = build_index(p)?;
    let f = opts.factors;
    let unit = f.compute == 1.0 && f.comm == 1.0 && (f.comm_comm == 1.0 || opts.overlap == OverlapModel::Bandwidth);
    let mut cur = base.clone();
    let mut pl = place_indexed(p, &idx, &cur)?;
    let mut iterations = 1;
    let mut converged = unit && opts.overlap == OverlapModel::Ratio;
    while !converged && iterations < opts.max_iterations.max(1) {
        let mut next = slowed(p, &pl, &base, &cur, &f, opts.overlap == OverlapModel::Ratio);
        if opts.overlap == OverlapModel::Bandwidth {
            next = contended(p, &pl, &base, &next, &priced)?;
        }
        let change = max_change(&next, &cur);
        cur = next;
        pl = place_indexed(p, &idx, &cur)?;
        iterations += 1;
        converged = change <= opts.tolerance_ns;
    }
    Ok(timeline(p, &pl, &base, &priced, iterations, converged))
}

fn timeline(p: &Program, pl: &Placement, base: &[Vec<f64>], priced: &[Vec<Priced>], iterations: usize, converged: bool) -> Timeline {
    let graph_info: Vec<(Vec<u64>, Vec<u64>)> = p
        .graphs
        .iter()
        .map(|g| {
            let index = g.index();
            let mut fl = Vec::with_capacity(g.nodes.len());
            let mut by = Vec::with_capacity(g.nodes.len());
            for i in 0..g.nodes.len() {
                let ins: Vec<&TensorMeta> = g.input_metas(&index, i).unwrap_or_default();
                fl.push(op_flops(&g.nodes[i], &ins));
                by.push(op_bytes(&g.nodes[i], &ins));
            }
            (fl, by)
        })
        .collect();
    let mut entries = Vec::with_capacity(p.segment_count());
    for (r, rp) in p.ranks.iter().enumerate() {
        for (i, s) in rp.segments.iter().enumerate() {
            let (kind, part, phase, flops, bytes) = match &s.op {
                SegmentOp::Node(inst) => {
                    let n = p.node(inst).unwrap();
                    let (fl, by) = &graph_info[inst.graph as usize];
                    (
                        n.kind.to_string(),
                        n.attr_str(crate::graph::attr::BLOCK_PART).map(String::from),
                        Some(n.phase),
                        fl[inst.node as usize],
                        by[inst.node as usize],
                    )
                }
                SegmentOp::Send { bytes, .. } => ("send".to_string(), None, None, 0, *bytes),
                SegmentOp::Recv { bytes, .. } => ("recv".to_string(), None, None, 0, *bytes),
                SegmentOp::Task { .. } => ("task".to_string(), None, None, 0, 0),
            };
            entries.push(TimelineEntry {
                rank: rp.rank,
                seg: i as u32,
                stream: s.stream,
                start_ns: pl.start[r][i],
                end_ns: pl.end[r][i],
                base_ns: base[r][i],
                engine: priced[r][i].engine.to_string(),
                label: p.label(s),
                kind,
                part,
                phase,
                flops,
                bytes,
            });
        }
    }
    Timeline { entries, makespan_ns: pl.makespan(), iterations, converged }
}

/// Communication time of `rank` not hidden behind its compute.
pub fn exposed_comm(t: &Timeline, rank: u32) -> f64 {
    let mut comp = Vec::new();
    let mut comm = Vec::new();
    for e in t.entries.iter().filter(|e| e.rank == rank) {
        if e.stream.is_comm() {
            comm.push((e.start_ns, e.end_ns));
        } else {
            comp.push((e.start_ns, e.end_ns));
        }
    }
    let comp = union(comp);
    let comm = union(comm);
    comm.iter().map(|&(a, b)| (b - a) - covered(&comp, a, b)).sum()
}

/// Union length of every busy interval of `rank`.
pub fn busy_time(t: &Timeline, rank: u32) -> f64 {
    measure(&union(t.entries.iter().filter(|e| e.rank == rank).map(|e| (e.start_ns, e.end_ns)).collect()))
}

/// Ranks appearing in a timeline.
pub fn ranks(t: &Timeline) -> BTreeSet<u32> {
    t.entries.iter().map(|e| e.rank).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sched::program::{RankProgram, Rendezvous};

    fn task(label: &str, us: f64, stream: Stream, deps: &[u32]) -> Segment {
        Segment {
            op: SegmentOp::Task { label: label.into(), duration_ns: us * 1e3 },
            stream,
            deps: deps.to_vec(),
            collective: None,
        }
    }

    fn one_rank(segs: Vec<Segment>) -> Program {
        Program { graphs: Vec::new(), ranks: vec![RankProgram { rank: 0, segments: segs }] }
    }

    fn opts(c: f64, m: f64) -> SimOptions {
        SimOptions { factors: SlowdownFactors { compute: c, comm: m, comm_comm: 1.0 }, ..SimOptions::default() }
    }

    #[test]
    fn full_cover_slowdown() {
        let p = one_rank(vec![task("c", 10.0, Stream::Compute, &[]), task("m", 10.0, Stream::Comm(0), &[])]);
        let t = simulate(&p, &TaskPricer, &opts(1.2, 1.0)).unwrap();
        assert!((t.entries[0].duration_ns() - 12_000.0).abs() < 1e-6);
        assert!(t.converged);
    }

    #[test]
    fn partial_overlap_first_pass() {
        // Comm starts 6 us into a 10 us compute op.
        let p = one_rank(vec![
            task("c", 10.0, Stream::Compute, &[]),
            task("wait", 6.0, Stream::Comm(1), &[]),
            task("m", 20.0, Stream::Comm(0), &[1]),
        ]);
        let o = opts(1.5, 1.0);
        let pl = place(&p, &[vec![10e3, 6e3, 20e3]]).unwrap();
        let d = slowed(&p, &pl, &[vec![10e3, 6e3, 20e3]], &[vec![10e3, 6e3, 20e3]], &o.factors, false);
        // The wait op on comm1 covers the first 6 us; comm0 the last 4 us.
        assert!((d[0][0] - 15_000.0).abs() < 1e-6);
    }

    #[test]
    fn unmatched_send_deadlocks() {
        let mut s = task("x", 1.0, Stream::Comm(0), &[]);
        s.op = SegmentOp::Send { peer: 0, tag: 7, bytes: 8 };
        let p = one_rank(vec![s]);
        assert!(matches!(simulate(&p, &TaskPricer, &SimOptions::default()), Err(Error::Deadlock(_))));
    }

    #[test]
    fn crossed_receives_report_cycle() {
        let recv = |peer, tag| Segment {
            op: SegmentOp::Recv { peer, tag, bytes: 1 },
            stream: Stream::Comm(0),
            deps: Vec::new(),
            collective: None,
        };
        let send = |peer, tag| Segment {
            op: SegmentOp::Send { peer, tag, bytes: 1 },
            stream: Stream::Comm(0),
            deps: Vec::new(),
            collective: None,
        };
        let p = Program {
            graphs: Vec::new(),
            ranks: vec![
                RankProgram { rank: 0, segments: vec![recv(1, 1), send(1, 2)] },
                RankProgram { rank: 1, segments: vec![recv(0, 2), send(0, 1)] },
            ],
        };
        match simulate(&p, &TaskPricer, &SimOptions::default()) {
            Err(Error::Deadlock(c)) => assert_eq!(c.len(), 2, "{c:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn collective_waits_for_all_members() {
        let coll = |d: f64, pre: f64| {
            let mut s = task("ar", d, Stream::Comm(0), &[0]);
            s.collective = Some(Rendezvous { tag: 1, present: vec![0, 1], group: vec![0, 1] });
            vec![task("pre", pre, Stream::Compute, &[]), s]
        };
        let p = Program {
            graphs: Vec::new(),
            ranks: vec![RankProgram { rank: 0, segments: coll(2.0, 1.0) }, RankProgram { rank: 1, segments: coll(3.0, 5.0) }],
        };
        let t = simulate(&p, &TaskPricer, &SimOptions::default()).unwrap();
        assert_eq!(t.makespan_ns, 8e3);
    }

    #[test]
    fn exposed_part_of_comm() {
        let p = one_rank(vec![task("c", 6.0, Stream::Compute, &[]), task("m", 10.0, Stream::Comm(0), &[])]);
        let t = simulate(&p, &TaskPricer, &SimOptions::default()).unwrap();
        assert!((exposed_comm(&t, 0) - 4e3).abs() < 1e-9);
    }
}
