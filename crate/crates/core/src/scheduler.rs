//! Operator graphs over batched secure inference, coalescing of
//! latency-bound rounds across batches, and a list-scheduling simulator that
//! overlaps communication with computation.
//!
//! Each node runs its local arithmetic on both parties' compute resources,
//! then its rounds on the shared channel. Resources are separate; a node's
//! channel time is `rounds·latency + max_dir_bytes/bandwidth`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transport::{simulated_time, NetworkModel, RoundRecord};

/// Bytes per round below which an op counts as latency-bound.
pub const DEFAULT_LATENCY_THRESHOLD: u64 = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OpClass {
    LatencyBound,
    BandwidthBound,
    Compute,
}

/// One op of a per-batch plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpTemplate {
    pub tag: String,
    pub rounds: u64,
    pub bytes: u64,
    pub max_dir_bytes: u64,
    pub flops: u64,
}

impl OpTemplate {
    pub fn class(&self, threshold: u64) -> OpClass {
        if self.rounds == 0 {
            OpClass::Compute
        } else if self.bytes / self.rounds < threshold {
            OpClass::LatencyBound
        } else {
            OpClass::BandwidthBound
        }
    }
}

/// Folds a round trace into ops: consecutive rounds with the same tag and
/// the same class become one op.
pub fn ops_from_trace(trace: &[RoundRecord], threshold: u64) -> Vec<OpTemplate> {
    let mut out: Vec<OpTemplate> = Vec::new();
    for r in trace {
        let op = OpTemplate {
            tag: r.tag.clone(),
            rounds: 1,
            bytes: r.bytes,
            max_dir_bytes: r.max_dir_bytes,
            flops: r.flops,
        };
        match out.last_mut() {
            Some(last) if last.tag == op.tag && last.class(threshold) == op.class(threshold) => {
                last.rounds += 1;
                last.bytes += op.bytes;
                last.max_dir_bytes += op.max_dir_bytes;
                last.flops += op.flops;
            }
            _ => out.push(op),
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpNode {
    pub tag: String,
    pub rounds: u64,
    pub bytes: u64,
    pub max_dir_bytes: u64,
    pub flops: u64,
    pub deps: Vec<usize>,
    /// Memory-admission group; nodes outside any batch use `None`.
    pub batch: Option<usize>,
    /// Index of the op within its batch plan.
    pub position: usize,
    /// Workload stage; coalescing never crosses stages.
    pub stage: usize,
    pub class: OpClass,
    /// Live intermediate bytes while the node's batch is in flight.
    pub mem_bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dag {
    pub nodes: Vec<OpNode>,
}

impl Dag {
    fn push(
        &mut self,
        op: &OpTemplate,
        deps: Vec<usize>,
        batch: Option<usize>,
        position: usize,
        stage: usize,
        threshold: u64,
    ) -> usize {
        self.nodes.push(OpNode {
            tag: op.tag.clone(),
            rounds: op.rounds,
            bytes: op.bytes,
            max_dir_bytes: op.max_dir_bytes,
            flops: op.flops,
            deps,
            batch,
            position,
            stage,
            class: op.class(threshold),
            mem_bytes: op.max_dir_bytes,
        });
        self.nodes.len() - 1
    }

    pub fn total_rounds(&self) -> u64 {
        self.nodes.iter().map(|n| n.rounds).sum()
    }

    pub fn total_bytes(&self) -> u64 {
        self.nodes.iter().map(|n| n.bytes).sum()
    }

    /// Kahn order; fails on a cycle.
    pub fn topo_order(&self) -> Result<Vec<usize>> {
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        let mut succ = vec![Vec::new(); n];
        for (i, node) in self.nodes.iter().enumerate() {
            for &d in &node.deps {
                if d >= n {
                    return Err(Error::Config(format!("node {i} depends on missing node {d}")));
                }
                indeg[i] += 1;
                succ[d].push(i);
            }
        }
        let mut ready: std::collections::BTreeSet<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &s in &succ[i] {
                indeg[s] -= 1;
                if indeg[s] == 0 {
                    ready.insert(s);
                }
            }
        }
        if order.len() != n {
            return Err(Error::Cycle);
        }
        Ok(order)
    }
}

/// Builds independent chains, one per batch, each running `plan` in order.
/// The returned tails are the last node of each chain.
pub fn build_dag(plan: &[OpTemplate], batches: usize, threshold: u64) -> Result<Dag> {
    if plan.is_empty() {
        return Err(Error::Config("cannot build a graph from an empty plan".into()));
    }
    let mut dag = Dag::default();
    append_batches(&mut dag, plan, batches, 0, 0, &[], threshold);
    Ok(dag)
}

/// Appends `batches` chains of `plan` that all start after `after`. Returns
/// the chain tails.
fn append_batches(
    dag: &mut Dag,
    plan: &[OpTemplate],
    batches: usize,
    batch0: usize,
    stage: usize,
    after: &[usize],
    threshold: u64,
) -> Vec<usize> {
    let mut tails = Vec::with_capacity(batches);
    for b in 0..batches {
        let mut prev: Vec<usize> = after.to_vec();
        for (pos, op) in plan.iter().enumerate() {
            let id = dag.push(op, prev, Some(batch0 + b), pos, stage, threshold);
            prev = vec![id];
        }
        tails.extend(prev);
    }
    tails
}

/// Appends a chain outside any batch, after `after`. Returns its tail.
fn append_chain(dag: &mut Dag, plan: &[OpTemplate], stage: usize, after: &[usize], threshold: u64) -> Vec<usize> {
    let mut prev = after.to_vec();
    for (pos, op) in plan.iter().enumerate() {
        prev = vec![dag.push(op, prev, None, pos, stage, threshold)];
    }
    prev
}

/// Merges latency-bound nodes at the same position and tag across groups of
/// `window` consecutive batches. A merged node takes the largest round count
/// and the summed bytes and flops.
pub fn coalesce(dag: &Dag, window: usize) -> Result<Dag> {
    if window == 0 {
        return Err(Error::Config("coalescing window must be at least 1".into()));
    }
    dag.topo_order()?;
    if window == 1 {
        return Ok(dag.clone());
    }
    // batches group by their index within the stage, divided by the window
    let mut first_batch: BTreeMap<usize, usize> = BTreeMap::new();
    for n in &dag.nodes {
        if let Some(b) = n.batch {
            let e = first_batch.entry(n.stage).or_insert(b);
            *e = (*e).min(b);
        }
    }
    let mut key_of = vec![None; dag.nodes.len()];
    let mut groups: BTreeMap<(usize, usize, usize, String), Vec<usize>> = BTreeMap::new();
    for (i, n) in dag.nodes.iter().enumerate() {
        if let (OpClass::LatencyBound, Some(b)) = (n.class, n.batch) {
            let k = (n.stage, (b - first_batch[&n.stage]) / window, n.position, n.tag.clone());
            groups.entry(k.clone()).or_default().push(i);
            key_of[i] = Some(k);
        }
    }
    // batches of one group are in flight together and become one batch
    let group = |stage: usize, b: usize| {
        let f = first_batch[&stage];
        f + (b - f) / window * window
    };
    let mem = batch_memory(dag);
    let mut group_mem: BTreeMap<usize, u64> = BTreeMap::new();
    let mut seen = std::collections::BTreeSet::new();
    for n in &dag.nodes {
        if let Some(b) = n.batch {
            if seen.insert(b) {
                *group_mem.entry(group(n.stage, b)).or_insert(0) += mem[&b];
            }
        }
    }
    let order = dag.topo_order()?;
    let mut map = vec![usize::MAX; dag.nodes.len()];
    let mut out = Dag::default();
    // a merged node is emitted once every member's deps exist; sweep in
    // topological order until nothing is left
    while map.contains(&usize::MAX) {
        let before = out.nodes.len();
        for &i in &order {
            if map[i] != usize::MAX {
                continue;
            }
            let members: Vec<usize> = match &key_of[i] {
                Some(k) => groups[k].clone(),
                None => vec![i],
            };
            if members
                .iter()
                .any(|&m| dag.nodes[m].deps.iter().any(|&d| map[d] == usize::MAX))
            {
                continue;
            }
            let first = &dag.nodes[members[0]];
            let mut deps: Vec<usize> = members
                .iter()
                .flat_map(|&m| dag.nodes[m].deps.iter().map(|&d| map[d]))
                .collect();
            deps.sort_unstable();
            deps.dedup();
            let sum = |f: fn(&OpNode) -> u64| members.iter().map(|&m| f(&dag.nodes[m])).sum::<u64>();
            out.nodes.push(OpNode {
                tag: first.tag.clone(),
                rounds: members.iter().map(|&m| dag.nodes[m].rounds).max().unwrap_or(0),
                bytes: sum(|n| n.bytes),
                max_dir_bytes: sum(|n| n.max_dir_bytes),
                flops: sum(|n| n.flops),
                deps,
                batch: first.batch.map(|b| group(first.stage, b)),
                position: first.position,
                stage: first.stage,
                class: first.class,
                mem_bytes: first
                    .batch
                    .map_or(sum(|n| n.mem_bytes), |b| group_mem[&group(first.stage, b)]),
            });
            let id = out.nodes.len() - 1;
            for &m in &members {
                map[m] = id;
            }
        }
        if out.nodes.len() == before {
            return Err(Error::Cycle);
        }
    }
    Ok(out)
}

/// Local arithmetic throughput of each party.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComputeModel {
    pub flops_per_second: f64,
}

impl Default for ComputeModel {
    fn default() -> Self {
        ComputeModel { flops_per_second: 1e9 }
    }
}

impl ComputeModel {
    pub fn new(flops_per_second: f64) -> Result<Self> {
        if !(flops_per_second > 0.0 && flops_per_second.is_finite()) {
            return Err(Error::Config(format!(
                "compute rate must be > 0, got {flops_per_second}"
            )));
        }
        Ok(ComputeModel { flops_per_second })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Resource {
    Compute0,
    Compute1,
    Channel,
}

impl Resource {
    pub fn name(self) -> &'static str {
        match self {
            Resource::Compute0 => "compute0",
            Resource::Compute1 => "compute1",
            Resource::Channel => "channel",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub resource: Resource,
    pub start: f64,
    pub end: f64,
    pub node: usize,
    pub tag: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub intervals: Vec<Interval>,
    pub makespan: f64,
    /// Busy fraction of compute0, compute1 and the channel.
    pub utilization: [f64; 3],
    /// Peak bytes of batches in flight at once.
    pub peak_memory: u64,
    /// Batches admitted at once.
    pub depth: usize,
}

impl Timeline {
    fn finish(intervals: Vec<Interval>, peak_memory: u64) -> Self {
        let makespan = intervals.iter().map(|i| i.end).fold(0.0, f64::max);
        let mut busy = [0.0; 3];
        for i in &intervals {
            busy[i.resource as usize] += i.end - i.start;
        }
        let utilization = busy.map(|b| if makespan > 0.0 { b / makespan } else { 0.0 });
        Timeline {
            intervals,
            makespan,
            utilization,
            peak_memory,
            depth: 1,
        }
    }

    /// One `resource start end tag` line per interval.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for i in &self.intervals {
            let _ = writeln!(s, "{} {:.6} {:.6} {}", i.resource.name(), i.start, i.end, i.tag);
        }
        s
    }
}

fn durations(n: &OpNode, net: &NetworkModel, cm: &ComputeModel) -> (f64, f64) {
    let comp = n.flops as f64 / cm.flops_per_second;
    let comm = if n.rounds == 0 {
        0.0
    } else {
        simulated_time(n.rounds, n.max_dir_bytes, net)
    };
    (comp, comm)
}

/// Memory of each batch: the largest node it holds.
fn batch_memory(dag: &Dag) -> BTreeMap<usize, u64> {
    let mut m = BTreeMap::new();
    for n in &dag.nodes {
        if let Some(b) = n.batch {
            let e = m.entry(b).or_insert(0);
            *e = (*e).max(n.mem_bytes);
        }
    }
    m
}

/// Heap key for a ready task. Times are nonnegative, so their bit patterns
/// order like the values.
type Ready = std::cmp::Reverse<(u64, usize)>;

struct Schedule {
    placed: usize,
    start: Vec<f64>,
    done: Vec<f64>,
    intervals: Vec<Interval>,
}

/// Greedy list scheduling with at most `depth` batches in flight. A batch
/// is admitted, in id order, once every batch `depth` places before it has
/// finished.
fn list_schedule(dag: &Dag, dur: &[(f64, f64)], depth: usize) -> Schedule {
    use std::collections::BinaryHeap;
    let n = dag.nodes.len();
    let order: Vec<usize> = batch_memory(dag).keys().copied().collect();
    let pos: BTreeMap<usize, usize> = order.iter().enumerate().map(|(i, &b)| (b, i)).collect();
    let bpos = |i: usize| dag.nodes[i].batch.map(|b| pos[&b]);
    let mut left_in_batch = vec![0usize; order.len()];
    let mut succ = vec![Vec::new(); n];
    let mut missing = vec![0usize; n];
    let mut gated = vec![false; n];
    for (i, node) in dag.nodes.iter().enumerate() {
        missing[i] = node.deps.len();
        for &d in &node.deps {
            succ[d].push(i);
        }
        if let Some(j) = bpos(i) {
            left_in_batch[j] += 1;
            gated[i] = j >= depth && node.deps.iter().all(|&d| bpos(d) != Some(j));
        }
    }
    // prefix[q] = latest finish among the first q batches, once all done
    let mut prefix = vec![0.0f64];
    let mut batch_end = vec![0.0f64; order.len()];
    let mut parked: Vec<Vec<(usize, f64)>> = vec![Vec::new(); order.len()];
    let mut dep_ready = vec![0.0f64; n];
    let mut heaps: [BinaryHeap<Ready>; 3] = Default::default();
    let mut comp_left = vec![2u8; n];
    let mut done = vec![0.0f64; 3 * n];
    let mut started = vec![0.0f64; 3 * n];
    let mut free = [0.0f64; 3];
    let mut intervals = Vec::new();

    let release = |i: usize, t: f64, heaps: &mut [BinaryHeap<Ready>; 3]| {
        heaps[0].push(std::cmp::Reverse((t.to_bits(), 3 * i)));
        heaps[1].push(std::cmp::Reverse((t.to_bits(), 3 * i + 1)));
    };
    for i in 0..n {
        if missing[i] == 0 {
            if gated[i] {
                parked[bpos(i).unwrap_or(0)].push((i, 0.0));
            } else {
                release(i, 0.0, &mut heaps);
            }
        }
    }
    let resources = [Resource::Compute0, Resource::Compute1, Resource::Channel];
    let mut placed = 0;
    for _ in 0..3 * n {
        let mut best: Option<(f64, f64, usize)> = None;
        for (r, h) in heaps.iter().enumerate() {
            if let Some(std::cmp::Reverse((bits, t))) = h.peek() {
                let ready = f64::from_bits(*bits);
                let cand = (ready.max(free[r]), ready, *t);
                if best.is_none_or(|b| cand < b) {
                    best = Some(cand);
                }
            }
        }
        let Some((start, _, t)) = best else { break };
        placed += 1;
        let (i, r) = (t / 3, t % 3);
        heaps[r].pop();
        let d = if r < 2 { dur[i].0 } else { dur[i].1 };
        let end = start + d;
        done[t] = end;
        started[t] = start;
        if d > 0.0 {
            free[r] = end;
            intervals.push(Interval {
                resource: resources[r],
                start,
                end,
                node: i,
                tag: dag.nodes[i].tag.clone(),
            });
        }
        if r < 2 {
            comp_left[i] -= 1;
            if comp_left[i] == 0 {
                let ready = done[3 * i].max(done[3 * i + 1]);
                heaps[2].push(std::cmp::Reverse((ready.to_bits(), 3 * i + 2)));
            }
            continue;
        }
        for &s in &succ[i] {
            dep_ready[s] = dep_ready[s].max(end);
            missing[s] -= 1;
            if missing[s] == 0 {
                match bpos(s).filter(|_| gated[s]) {
                    // admitted once the first j + 1 - depth batches are done
                    Some(j) if prefix.len() - 1 < j + 1 - depth => parked[j].push((s, dep_ready[s])),
                    Some(j) => release(s, dep_ready[s].max(prefix[j + 1 - depth]), &mut heaps),
                    None => release(s, dep_ready[s], &mut heaps),
                }
            }
        }
        if let Some(j) = bpos(i) {
            batch_end[j] = batch_end[j].max(end);
            left_in_batch[j] -= 1;
            // extend the finished prefix and admit the batches it unblocks
            while prefix.len() <= order.len() && left_in_batch[prefix.len() - 1] == 0 {
                let q = prefix.len();
                let t = prefix[q - 1].max(batch_end[q - 1]);
                prefix.push(t);
                if let Some(list) = parked.get_mut(q - 1 + depth) {
                    for (s, ready) in std::mem::take(list) {
                        release(s, ready.max(t), &mut heaps);
                    }
                }
                if prefix.len() > order.len() {
                    break;
                }
            }
        }
    }
    debug_assert_eq!(placed, 3 * n, "every task is placed");
    Schedule {
        placed,
        start: started,
        done,
        intervals,
    }
}

/// List-schedules the graph. Each node computes on both parties, then runs
/// its rounds on the channel. Among ready tasks the one that can start
/// earliest goes first; ties go to the task that became ready first, then
/// to the lower task id.
///
/// Under a memory cap, at most `cap / max batch memory` batches are in
/// flight (at least one). Every admission depth the cap allows is tried and
/// the fastest schedule is kept, so a lower cap never yields a shorter one.
pub fn simulate(dag: &Dag, net: &NetworkModel, cm: &ComputeModel, memory_cap: Option<u64>) -> Result<Timeline> {
    dag.topo_order()?;
    let mem = batch_memory(dag);
    let batches = mem.len().max(1);
    let biggest = mem.values().copied().max().unwrap_or(0);
    let max_depth = match memory_cap {
        None => batches,
        Some(_) if biggest == 0 => batches,
        Some(cap) => ((cap / biggest) as usize).clamp(1, batches),
    };
    let dur: Vec<(f64, f64)> = dag.nodes.iter().map(|x| durations(x, net, cm)).collect();
    let mut best: Option<(f64, Schedule, usize)> = None;
    for depth in (1..=max_depth).rev() {
        let s = list_schedule(dag, &dur, depth);
        if s.placed != 3 * dag.nodes.len() {
            return Err(Error::Cycle);
        }
        let span = s.intervals.iter().map(|i| i.end).fold(0.0, f64::max);
        if best.as_ref().is_none_or(|b| span < b.0) {
            best = Some((span, s, depth));
        }
    }
    let (_, s, depth) = best.ok_or(Error::Cycle)?;
    let peak = peak_memory(dag, &s.start, &s.done);
    let mut t = Timeline::finish(s.intervals, peak);
    t.depth = depth;
    Ok(t)
}

/// Largest sum of batch memory over batches simultaneously in flight. A
/// batch is in flight from its first node's start to its last node's end.
fn peak_memory(dag: &Dag, started: &[f64], done: &[f64]) -> u64 {
    let mem = batch_memory(dag);
    let mut span: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    for (i, node) in dag.nodes.iter().enumerate() {
        if let Some(b) = node.batch {
            let start = started[3 * i].min(started[3 * i + 2]);
            let e = span.entry(b).or_insert((f64::INFINITY, 0.0));
            e.0 = e.0.min(start);
            e.1 = e.1.max(done[3 * i + 2]);
        }
    }
    let mut events: Vec<(f64, i64)> = Vec::new();
    for (b, (s, e)) in &span {
        events.push((*s, mem[b] as i64));
        events.push((*e, -(mem[b] as i64)));
    }
    // releases before acquisitions at equal times
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let (mut cur, mut peak) = (0i64, 0i64);
    for (_, d) in events {
        cur += d;
        peak = peak.max(cur);
    }
    peak as u64
}

/// Everything one after another in topological order.
pub fn sequential_baseline(dag: &Dag, net: &NetworkModel, cm: &ComputeModel) -> Result<Timeline> {
    let order = dag.topo_order()?;
    let mut t = 0.0;
    let mut intervals = Vec::new();
    for i in order {
        let (comp, comm) = durations(&dag.nodes[i], net, cm);
        for (r, d) in [(Resource::Compute0, comp), (Resource::Channel, comm)] {
            if d > 0.0 {
                intervals.push(Interval {
                    resource: r,
                    start: t,
                    end: t + d,
                    node: i,
                    tag: dag.nodes[i].tag.clone(),
                });
                t += d;
            }
        }
        if comp > 0.0 {
            // the peer computes alongside
            intervals.push(Interval {
                resource: Resource::Compute1,
                start: t - comm - comp,
                end: t - comm,
                node: i,
                tag: dag.nodes[i].tag.clone(),
            });
        }
    }
    let peak = batch_memory(dag).values().copied().max().unwrap_or(0);
    Ok(Timeline::finish(intervals, peak))
}

/// One step of a workload. Stages run one after another.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Stage {
    /// Ops that run in order outside any batch.
    Chain(Vec<OpTemplate>),
    /// Independent batches, each a chain of ops.
    Batches(Vec<Vec<OpTemplate>>),
}

/// Scheduler input: a run cut into stages, typically a setup chain, then
/// per phase the forward batches and the ranking chain.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub stages: Vec<Stage>,
}

impl Workload {
    /// Cuts a round trace at `marks`: each entry of `phases` holds the trace
    /// position where a phase's first batch starts followed by the end of
    /// each of its batches. Rounds between phases form chains.
    pub fn from_trace(trace: &[RoundRecord], phases: &[Vec<usize>], threshold: u64) -> Result<Self> {
        let mut stages = Vec::new();
        let mut pos = 0;
        for marks in phases {
            let (&start, ends) = marks
                .split_first()
                .ok_or_else(|| Error::Config("phase without batch marks".into()))?;
            if start < pos || marks.windows(2).any(|w| w[1] < w[0]) || ends.iter().any(|&e| e > trace.len()) {
                return Err(Error::Config("batch marks out of order".into()));
            }
            if start > pos {
                stages.push(Stage::Chain(ops_from_trace(&trace[pos..start], threshold)));
            }
            let mut b0 = start;
            let mut batches = Vec::with_capacity(ends.len());
            for &e in ends {
                batches.push(ops_from_trace(&trace[b0..e], threshold));
                b0 = e;
            }
            stages.push(Stage::Batches(batches));
            pos = b0;
        }
        if pos < trace.len() {
            stages.push(Stage::Chain(ops_from_trace(&trace[pos..], threshold)));
        }
        Ok(Workload { stages })
    }

    /// Replicates one per-batch plan `batches` times.
    pub fn uniform(plan: &[OpTemplate], batches: usize) -> Self {
        Workload {
            stages: vec![Stage::Batches(vec![plan.to_vec(); batches])],
        }
    }

    pub fn dag(&self, threshold: u64) -> Result<Dag> {
        let mut dag = Dag::default();
        let mut after: Vec<usize> = Vec::new();
        let mut batch0 = 0;
        for (si, st) in self.stages.iter().enumerate() {
            match st {
                Stage::Chain(ops) => {
                    if !ops.is_empty() {
                        after = append_chain(&mut dag, ops, si, &after, threshold);
                    }
                }
                Stage::Batches(batches) => {
                    let mut tails = Vec::new();
                    for (b, plan) in batches.iter().enumerate() {
                        if plan.is_empty() {
                            continue;
                        }
                        tails.extend(append_batches(&mut dag, plan, 1, batch0 + b, si, &after, threshold));
                    }
                    batch0 += batches.len();
                    if !tails.is_empty() {
                        after = tails;
                    }
                }
            }
        }
        if dag.nodes.is_empty() {
            return Err(Error::Config("workload has no ops".into()));
        }
        Ok(dag)
    }
}

/// Makespans of one workload under both executions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleReport {
    pub sequential: f64,
    pub scheduled: f64,
    pub speedup: f64,
    pub rounds_before: u64,
    pub rounds_after: u64,
    pub bytes: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub latency_threshold: u64,
    /// Batches merged per coalesced node.
    pub window: usize,
    pub memory_cap: Option<u64>,
    pub compute: ComputeModel,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            latency_threshold: DEFAULT_LATENCY_THRESHOLD,
            window: 8,
            memory_cap: None,
            compute: ComputeModel::default(),
        }
    }
}

/// Sequential execution against coalesced, overlapped execution. Returns
/// the report and the overlapped timeline.
pub fn evaluate(w: &Workload, net: &NetworkModel, cfg: &SchedulerConfig) -> Result<(ScheduleReport, Timeline)> {
    let dag = w.dag(cfg.latency_threshold)?;
    let seq = sequential_baseline(&dag, net, &cfg.compute)?;
    let merged = coalesce(&dag, cfg.window)?;
    let sched = simulate(&merged, net, &cfg.compute, cfg.memory_cap)?;
    let report = ScheduleReport {
        sequential: seq.makespan,
        scheduled: sched.makespan,
        speedup: seq.makespan / sched.makespan,
        rounds_before: dag.total_rounds(),
        rounds_after: merged.total_rounds(),
        bytes: merged.total_bytes(),
    };
    Ok((report, sched))
}

/// End-to-end time of a trace run one round after another: each round's
/// local arithmetic, then its exchange.
pub fn trace_time(trace: &[RoundRecord], net: &NetworkModel, cm: &ComputeModel) -> f64 {
    trace
        .iter()
        .map(|r| r.flops as f64 / cm.flops_per_second + simulated_time(1, r.max_dir_bytes, net))
        .sum()
}
