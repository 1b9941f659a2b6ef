use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// WAN cost model: every round pays one latency plus the serialization time
/// of the larger direction (links are full duplex).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkModel {
    /// Bytes per second.
    pub bandwidth: f64,
    /// Seconds per round.
    pub latency: f64,
}

impl Default for NetworkModel {
    /// 100 MB/s, 100 ms.
    fn default() -> Self {
        NetworkModel {
            bandwidth: 1e8,
            latency: 0.1,
        }
    }
}

impl NetworkModel {
    pub fn new(bandwidth: f64, latency: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::Config(format!("bandwidth must be > 0, got {bandwidth}")));
        }
        if !(latency >= 0.0 && latency.is_finite()) {
            return Err(Error::Config(format!("latency must be >= 0, got {latency}")));
        }
        Ok(NetworkModel { bandwidth, latency })
    }
}

/// `rounds·latency + bytes/bandwidth`, with `bytes` the per-direction maximum
/// summed over rounds.
pub fn simulated_time(rounds: u64, max_dir_bytes: u64, model: &NetworkModel) -> f64 {
    rounds as f64 * model.latency + max_dir_bytes as f64 / model.bandwidth
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TagCost {
    pub rounds: u64,
    /// Both directions.
    pub bytes: u64,
    /// Larger direction, summed over rounds.
    pub max_dir_bytes: u64,
    pub seconds: f64,
}

impl TagCost {
    fn add(&mut self, other: &TagCost) {
        self.rounds += other.rounds;
        self.bytes += other.bytes;
        self.max_dir_bytes += other.max_dir_bytes;
        self.seconds += other.seconds;
    }
}

/// What a party learned in the clear.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RevealKind {
    ComparisonBit,
    FinalIndices,
    AppraisalMean,
    AppraisalBit,
    /// Anything else: a protocol output that is not part of the selection
    /// contract. Fails the selection audit.
    Intermediate,
}

/// Items a selection run may open.
pub const SELECTION_REVEALS: &[RevealKind] = &[
    RevealKind::ComparisonBit,
    RevealKind::FinalIndices,
    RevealKind::AppraisalMean,
    RevealKind::AppraisalBit,
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevealEntry {
    pub tag: String,
    pub kind: RevealKind,
    pub count: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevealLog {
    entries: Vec<RevealEntry>,
}

impl RevealLog {
    pub fn push(&mut self, tag: &str, kind: RevealKind, count: u64) {
        self.entries.push(RevealEntry {
            tag: tag.to_string(),
            kind,
            count,
        });
    }

    pub fn entries(&self) -> &[RevealEntry] {
        &self.entries
    }

    pub fn count(&self, kind: RevealKind) -> u64 {
        self.entries.iter().filter(|e| e.kind == kind).map(|e| e.count).sum()
    }

    pub fn audit(&self, allowed: &[RevealKind]) -> Result<()> {
        match self.entries.iter().find(|e| !allowed.contains(&e.kind)) {
            None => Ok(()),
            Some(e) => Err(Error::Audit(format!(
                "{} item(s) of kind {:?} opened by '{}'",
                e.count, e.kind, e.tag
            ))),
        }
    }

    /// FNV-1a/64 over the entries, as hex.
    pub fn digest(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for e in &self.entries {
            eat(e.tag.as_bytes());
            eat(&[e.kind as u8]);
            eat(&e.count.to_le_bytes());
        }
        format!("{h:016x}")
    }
}

/// One synchronized round (or one round of a model-charged block) as seen by
/// the cost ledger; the scheduler builds operator graphs from these.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub tag: String,
    pub bytes: u64,
    pub max_dir_bytes: u64,
    /// Local share arithmetic performed since the previous round.
    pub flops: u64,
}

/// Rounds, bytes and simulated seconds per operation tag, plus the reveal log.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct CostLedger {
    network: NetworkModel,
    tags: BTreeMap<String, TagCost>,
    reveals: RevealLog,
    comparisons: u64,
    analytic_comparison: TagCost,
    trace: Option<Vec<RoundRecord>>,
}

impl PartialEq for CostLedger {
    fn eq(&self, other: &Self) -> bool {
        self.tags == other.tags
            && self.reveals == other.reveals
            && self.comparisons == other.comparisons
            && self.analytic_comparison == other.analytic_comparison
    }
}

impl CostLedger {
    pub fn new(network: NetworkModel) -> Self {
        CostLedger {
            network,
            ..Default::default()
        }
    }

    pub fn network(&self) -> &NetworkModel {
        &self.network
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    /// Appends records to an enabled trace.
    pub fn absorb_trace(&mut self, records: Vec<RoundRecord>) {
        if let Some(t) = self.trace.as_mut() {
            t.extend(records);
        }
    }

    /// Rounds recorded so far; zero when tracing is off.
    pub fn trace_len(&self) -> usize {
        self.trace.as_ref().map_or(0, Vec::len)
    }

    pub fn take_trace(&mut self) -> Vec<RoundRecord> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// One exchange: `sent` and `received` payload bytes.
    pub fn record_round(&mut self, tag: &str, sent: u64, received: u64, flops: u64) {
        self.charge(tag, 1, sent + received, sent.max(received), flops);
    }

    /// A block of `rounds` rounds moving `bytes` in total, `max_dir_bytes` of
    /// it on the busier direction.
    pub fn charge(&mut self, tag: &str, rounds: u64, bytes: u64, max_dir_bytes: u64, flops: u64) {
        let seconds = simulated_time(rounds, max_dir_bytes, &self.network);
        let entry = self.tags.entry(tag.to_string()).or_default();
        entry.add(&TagCost {
            rounds,
            bytes,
            max_dir_bytes,
            seconds,
        });
        if let Some(trace) = self.trace.as_mut() {
            if rounds == 0 {
                return;
            }
            // spread the block evenly; the first rounds absorb the remainder
            let r = rounds;
            for i in 0..r {
                let share = |total: u64| total / r + u64::from(i < total % r);
                trace.push(RoundRecord {
                    tag: tag.to_string(),
                    bytes: share(bytes),
                    max_dir_bytes: share(max_dir_bytes),
                    flops: if i == 0 { flops } else { 0 },
                });
            }
        }
    }

    pub fn note_comparisons(&mut self, n: u64, analytic: TagCost) {
        self.comparisons += n;
        self.analytic_comparison.add(&analytic);
    }

    /// Scalar comparisons (sign extractions) evaluated so far.
    pub fn comparisons(&self) -> u64 {
        self.comparisons
    }

    /// What the comparison protocol actually moved, regardless of the
    /// configured charging model.
    pub fn analytic_comparison_cost(&self) -> TagCost {
        self.analytic_comparison
    }

    pub fn reveals(&self) -> &RevealLog {
        &self.reveals
    }

    pub fn reveals_mut(&mut self) -> &mut RevealLog {
        &mut self.reveals
    }

    pub fn tags(&self) -> &BTreeMap<String, TagCost> {
        &self.tags
    }

    pub fn tag(&self, tag: &str) -> TagCost {
        self.tags.get(tag).copied().unwrap_or_default()
    }

    /// Sum of every tag whose name starts with `prefix`.
    pub fn tag_prefix(&self, prefix: &str) -> TagCost {
        let mut t = TagCost::default();
        for (_, c) in self.tags.iter().filter(|(k, _)| k.starts_with(prefix)) {
            t.add(c);
        }
        t
    }

    pub fn total(&self) -> TagCost {
        let mut t = TagCost::default();
        for c in self.tags.values() {
            t.add(c);
        }
        t
    }

    /// Folds `other` in, e.g. ledgers from consecutive phases.
    pub fn absorb(&mut self, other: &CostLedger) {
        for (k, v) in &other.tags {
            self.tags.entry(k.clone()).or_default().add(v);
        }
        for e in other.reveals.entries() {
            self.reveals.push(&e.tag, e.kind, e.count);
        }
        self.comparisons += other.comparisons;
        self.analytic_comparison.add(&other.analytic_comparison);
        if let (Some(mine), Some(theirs)) = (self.trace.as_mut(), other.trace.as_ref()) {
            mine.extend(theirs.iter().cloned());
        }
    }

    /// Both parties count the same rounds; merging checks they agree.
    pub fn merge_parties(a: CostLedger, b: &CostLedger) -> Result<CostLedger> {
        if a != *b {
            return Err(Error::Desync("party ledgers disagree after run".into()));
        }
        Ok(a)
    }

    pub fn report(&self) -> CostTable {
        report(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub tag: String,
    pub rounds: u64,
    pub bytes: u64,
    pub seconds: f64,
    pub pct_bytes: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    pub rows: Vec<CostRow>,
    pub total: CostRow,
    pub comparisons: u64,
    pub analytic_comparison: TagCost,
}

/// Per-tag cost rows with each tag's share of total bytes.
pub fn report(ledger: &CostLedger) -> CostTable {
    let total = ledger.total();
    let pct = |b: u64| {
        if total.bytes == 0 {
            0.0
        } else {
            100.0 * b as f64 / total.bytes as f64
        }
    };
    let rows = ledger
        .tags
        .iter()
        .map(|(tag, c)| CostRow {
            tag: tag.clone(),
            rounds: c.rounds,
            bytes: c.bytes,
            seconds: c.seconds,
            pct_bytes: pct(c.bytes),
        })
        .collect();
    CostTable {
        rows,
        total: CostRow {
            tag: "total".into(),
            rounds: total.rounds,
            bytes: total.bytes,
            seconds: total.seconds,
            pct_bytes: if total.bytes == 0 { 0.0 } else { 100.0 },
        },
        comparisons: ledger.comparisons,
        analytic_comparison: ledger.analytic_comparison,
    }
}

impl CostTable {
    pub fn row(&self, tag: &str) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.tag == tag)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("cost table serializes")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<20} {:>10} {:>16} {:>14} {:>8}",
            "tag", "rounds", "bytes", "sim_seconds", "%bytes"
        );
        for r in self.rows.iter().chain(std::iter::once(&self.total)) {
            let _ = writeln!(
                s,
                "{:<20} {:>10} {:>16} {:>14.6} {:>7.2}%",
                r.tag, r.rounds, r.bytes, r.seconds, r.pct_bytes
            );
        }
        let a = &self.analytic_comparison;
        let _ = writeln!(
            s,
            "comparisons: {} (protocol cost: {} rounds, {} bytes)",
            self.comparisons, a.rounds, a.bytes
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_net() -> NetworkModel {
        NetworkModel::default()
    }

    #[test]
    fn simulated_time_examples() {
        let m = reference_net();
        assert!((simulated_time(8, 432, &m) - 0.80000432).abs() < 1e-12);
        assert!((simulated_time(8, 432, &m) - 0.800004).abs() < 5e-7);
        assert_eq!(simulated_time(1, 0, &m), 0.1);
        assert!((simulated_time(2, 4 * 10u64.pow(8), &m) - 4.2).abs() < 1e-12);
    }

    #[test]
    fn empty_exchange_costs_latency_only() {
        let mut l = CostLedger::new(reference_net());
        l.record_round("x", 0, 0, 0);
        let t = l.tag("x");
        assert_eq!((t.rounds, t.bytes), (1, 0));
        assert_eq!(t.seconds, 0.1);
    }

    #[test]
    fn report_percentages() {
        let mut l = CostLedger::new(reference_net());
        l.record_round("only", 8, 8, 0);
        assert_eq!(l.report().row("only").unwrap().pct_bytes, 100.0);

        let mut l = CostLedger::new(reference_net());
        l.record_round("a", 150, 150, 0);
        l.record_round("b", 50, 50, 0);
        let r = l.report();
        assert_eq!(r.row("a").unwrap().pct_bytes, 75.0);
        assert_eq!(r.row("b").unwrap().pct_bytes, 25.0);
        assert!(r.to_text().contains("total"));
        let parsed: CostTable = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(parsed, r);
    }

    #[test]
    fn totals_invariant_to_tag_partition() {
        let mut tagged = CostLedger::new(reference_net());
        let mut flat = CostLedger::new(reference_net());
        for i in 0..50u64 {
            let tag = ["x", "y", "z"][(i % 3) as usize];
            tagged.record_round(tag, i * 8, i * 3, 0);
            flat.record_round("all", i * 8, i * 3, 0);
        }
        let (a, b) = (tagged.total(), flat.total());
        assert_eq!(
            (a.rounds, a.bytes, a.max_dir_bytes),
            (b.rounds, b.bytes, b.max_dir_bytes)
        );
        assert!((a.seconds - b.seconds).abs() < 1e-9);
    }

    #[test]
    fn trace_spreads_charged_blocks() {
        let mut l = CostLedger::new(reference_net());
        l.enable_trace();
        l.charge("cmp", 8, 432, 216, 10);
        let t = l.take_trace();
        assert_eq!(t.len(), 8);
        assert_eq!(t.iter().map(|r| r.bytes).sum::<u64>(), 432);
        assert_eq!(t.iter().map(|r| r.max_dir_bytes).sum::<u64>(), 216);
        assert_eq!(t.iter().map(|r| r.flops).sum::<u64>(), 10);
    }

    #[test]
    fn audit_rejects_unsanctioned_opens() {
        let mut log = RevealLog::default();
        log.push("quickselect", RevealKind::ComparisonBit, 10);
        log.push("final", RevealKind::FinalIndices, 3);
        assert!(log.audit(SELECTION_REVEALS).is_ok());
        log.push("debug", RevealKind::Intermediate, 1);
        assert!(matches!(log.audit(SELECTION_REVEALS), Err(Error::Audit(_))));
        assert_eq!(log.count(RevealKind::ComparisonBit), 10);
    }

    #[test]
    fn network_model_validation() {
        assert!(NetworkModel::new(0.0, 0.1).is_err());
        assert!(NetworkModel::new(1.0, -0.1).is_err());
        assert!(NetworkModel::new(1.0, 0.0).is_ok());
    }
}
