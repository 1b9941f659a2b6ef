//! Multi-phase private selection: bootstrap, per-phase entropy ranking with
//! secure QuickSelect, appraisal, and the reveal audit.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocols::Party;
use crate::proxy::{forward_entropy_mpc, ProxySpec, SharedData, SharedProxy};
use crate::ring::RingWord;
use crate::seeds::substream;
use crate::shares::{LocalShare, PartyId};
use crate::transport::{CostLedger, RevealKind, SELECTION_REVEALS};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub spec: ProxySpec,
    /// Fraction of this phase's candidates that survive it.
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePlan {
    pub phases: Vec<Phase>,
    pub bootstrap_fraction: f64,
    /// Purchase budget; when set, bootstrap plus the final set must fit.
    pub budget: Option<usize>,
}

impl PhasePlan {
    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::Config("phase plan is empty".into()));
        }
        if !(self.bootstrap_fraction > 0.0 && self.bootstrap_fraction < 1.0) {
            return Err(Error::Config(format!(
                "bootstrap fraction {} outside (0, 1)",
                self.bootstrap_fraction
            )));
        }
        for (i, ph) in self.phases.iter().enumerate() {
            if !(ph.alpha > 0.0 && ph.alpha < 1.0) {
                return Err(Error::Config(format!(
                    "phase {i}: selectivity {} outside (0, 1)",
                    ph.alpha
                )));
            }
            if ph.spec.hidden == 0 || ph.spec.layers == 0 || ph.spec.heads == 0 {
                return Err(Error::Config(format!("phase {i}: proxy spec has a zero field")));
            }
        }
        for (i, w) in self.phases.windows(2).enumerate() {
            let (a, b) = (w[0].spec, w[1].spec);
            if b.layers < a.layers || b.heads < a.heads || b.hidden < a.hidden {
                return Err(Error::Config(format!(
                    "phase {}: proxy spec shrinks from <{},{},{}> to <{},{},{}>",
                    i + 1,
                    a.layers,
                    a.heads,
                    a.hidden,
                    b.layers,
                    b.heads,
                    b.hidden
                )));
            }
        }
        Ok(())
    }

    /// Checks the plan against a dataset of `n` points.
    pub fn validate_for(&self, n: usize) -> Result<()> {
        self.validate()?;
        let boot = bootstrap_size(n, self.bootstrap_fraction);
        if boot >= n {
            return Err(Error::Config(format!(
                "bootstrap of {boot} leaves no candidates among {n}"
            )));
        }
        if let Some(b) = self.budget {
            let final_size = *self.sizes(n - boot).last().expect("nonempty plan");
            if boot + final_size > b {
                return Err(Error::Config(format!(
                    "plan purchases {} points (bootstrap {boot} + selected {final_size}), budget is {b}",
                    boot + final_size
                )));
            }
        }
        Ok(())
    }

    /// Candidate count after each phase.
    pub fn sizes(&self, candidates: usize) -> Vec<usize> {
        let mut n = candidates;
        self.phases
            .iter()
            .map(|ph| {
                n = keep_count(ph.alpha, n);
                n
            })
            .collect()
    }

    /// The largest proxy the plan uses; its depth is the base model's.
    pub fn base_layers(&self) -> usize {
        self.phases.iter().map(|p| p.spec.layers).max().unwrap_or(0)
    }

    /// The same overall selectivity in a single phase with the last spec.
    pub fn single_phase(&self) -> PhasePlan {
        let alpha = self.phases.iter().map(|p| p.alpha).product();
        PhasePlan {
            phases: vec![Phase {
                spec: self.phases.last().expect("nonempty plan").spec,
                alpha,
            }],
            ..self.clone()
        }
    }
}

/// `round(alpha·n)` with halves rounded up, clamped to `[1, n]`.
pub fn keep_count(alpha: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    ((alpha * n as f64 + 0.5).floor() as usize).clamp(1, n)
}

fn bootstrap_size(n: usize, fraction: f64) -> usize {
    keep_count(fraction, n)
}

/// A uniform sample of `round(fraction·n)` indices without replacement,
/// sorted.
pub fn bootstrap_sample<R: Rng + ?Sized>(n: usize, fraction: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) || n == 0 {
        return Err(Error::Config(format!("bootstrap fraction {fraction} of {n} points")));
    }
    let mut idx = sample(rng, n, bootstrap_size(n, fraction)).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Indices of the `k` largest values in ranking order (value descending,
/// index ascending), returned sorted by index.
pub fn plaintext_topk(values: &[f64], idx: &[usize], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(idx[a].cmp(&idx[b])));
    let mut out: Vec<usize> = order[..k.min(values.len())].iter().map(|&i| idx[i]).collect();
    out.sort_unstable();
    out
}

/// Positions of the `k` largest shared values, found with pivot comparisons
/// that each open one bit. Ranking order is value descending then position
/// ascending, so equal values resolve deterministically. Returns sorted
/// positions and the number of scalar comparisons made.
pub fn secure_quickselect_topk<W: RingWord>(
    p: &mut Party<W>,
    tag: &str,
    values: &LocalShare<W>,
    k: usize,
    pivot_seed: u64,
) -> Result<(Vec<usize>, u64)> {
    let n = values.len();
    if k == 0 || k > n {
        return Err(Error::Config(format!("cannot select {k} of {n}")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(pivot_seed);
    let mut chosen = Vec::with_capacity(k);
    let mut cand: Vec<usize> = (0..n).collect();
    let mut need = k;
    let mut comparisons = 0u64;
    while need > 0 {
        if need == cand.len() {
            chosen.extend_from_slice(&cand);
            break;
        }
        let pivot = cand[rng.random_range(0..cand.len())];
        let others: Vec<usize> = cand.iter().copied().filter(|&c| c != pivot).collect();
        // c ranks ahead of the pivot iff v_c > v_p, or v_c = v_p and c < p
        let mut a = Vec::with_capacity(others.len());
        let mut b = Vec::with_capacity(others.len());
        for &c in &others {
            let (x, y) = if c < pivot { (c, pivot) } else { (pivot, c) };
            a.push(values.data[x]);
            b.push(values.data[y]);
        }
        let a = LocalShare::new(vec![others.len()], a)?;
        let b = LocalShare::new(vec![others.len()], b)?;
        let bits = p.compare_open(tag, &a, &b)?;
        comparisons += others.len() as u64;
        let (mut ahead, mut behind) = (Vec::new(), Vec::new());
        for (&c, &bit) in others.iter().zip(&bits) {
            let first = if c < pivot { !bit } else { bit };
            if first {
                ahead.push(c);
            } else {
                behind.push(c);
            }
        }
        if ahead.len() >= need {
            cand = ahead;
        } else {
            need -= ahead.len() + 1;
            chosen.extend_from_slice(&ahead);
            chosen.push(pivot);
            cand = behind;
        }
    }
    chosen.sort_unstable();
    Ok((chosen, comparisons))
}

/// Shared entropies for the candidates of a phase.
pub trait EntropySource<W: RingWord = u64> {
    fn entropies(&mut self, p: &mut Party<W>, phase: usize, idx: &[usize]) -> Result<LocalShare<W>>;
}

/// Secure proxy inference, one proxy per phase.
pub struct ProxyEntropies<'a, W: RingWord = u64> {
    pub data: &'a SharedData<W>,
    pub proxies: &'a [SharedProxy<W>],
    /// Rows per forward pass; `None` runs a phase in one pass.
    pub batch_size: Option<usize>,
    /// Per phase, the trace length before the first batch and after each
    /// batch. Only meaningful while the ledger traces.
    pub boundaries: Vec<Vec<usize>>,
}

impl<'a, W: RingWord> ProxyEntropies<'a, W> {
    pub fn new(data: &'a SharedData<W>, proxies: &'a [SharedProxy<W>], batch_size: Option<usize>) -> Self {
        ProxyEntropies {
            data,
            proxies,
            batch_size,
            boundaries: Vec::new(),
        }
    }
}

impl<W: RingWord> EntropySource<W> for ProxyEntropies<'_, W> {
    fn entropies(&mut self, p: &mut Party<W>, phase: usize, idx: &[usize]) -> Result<LocalShare<W>> {
        let model = self
            .proxies
            .get(phase)
            .ok_or_else(|| Error::Config(format!("no proxy for phase {phase}")))?;
        let size = match self.batch_size {
            Some(0) => return Err(Error::Config("batch size must be at least 1".into())),
            Some(b) => b,
            None => idx.len().max(1),
        };
        let mut marks = vec![p.ledger().trace_len()];
        let mut data = Vec::with_capacity(idx.len());
        for chunk in idx.chunks(size) {
            data.extend(forward_entropy_mpc(p, model, self.data, chunk)?.data);
            marks.push(p.ledger().trace_len());
        }
        if self.boundaries.len() <= phase {
            self.boundaries.resize(phase + 1, Vec::new());
        }
        self.boundaries[phase] = marks;
        LocalShare::new(vec![idx.len()], data)
    }
}

/// Test hook: the data owner supplies exact entropies (one vector over the
/// whole dataset per phase), shared fresh each phase.
pub struct StubEntropies {
    /// `Some` on the data owner only.
    pub values: Option<Vec<Vec<f64>>>,
}

impl<W: RingWord> EntropySource<W> for StubEntropies {
    fn entropies(&mut self, p: &mut Party<W>, phase: usize, idx: &[usize]) -> Result<LocalShare<W>> {
        let vals: Option<Vec<f64>> = match &self.values {
            Some(v) => {
                let row = v
                    .get(phase)
                    .ok_or_else(|| Error::Config(format!("stub has no entropies for phase {phase}")))?;
                Some(idx.iter().map(|&i| row[i]).collect())
            }
            None => None,
        };
        p.input("entropy_stub", PartyId::DataOwner, vals.as_deref(), vec![idx.len()])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum AppraisalMode {
    /// Reveal the mean entropy of the final set.
    Open,
    /// Reveal only whether the mean exceeds the threshold.
    Threshold(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Appraisal {
    Mean(f64),
    AboveThreshold(bool),
}

/// Appraises the final set from its shared entropies.
pub fn appraise<W: RingWord>(p: &mut Party<W>, entropies: &LocalShare<W>, mode: AppraisalMode) -> Result<Appraisal> {
    const TAG: &str = "appraisal";
    let n = entropies.len();
    if n == 0 {
        return Err(Error::Config("cannot appraise an empty set".into()));
    }
    let s = p.sum_rows(entropies, n)?;
    let mean = p.mul_public(TAG, &s, 1.0 / n as f64)?;
    match mode {
        AppraisalMode::Open => Ok(Appraisal::Mean(p.reveal(TAG, &mean, RevealKind::AppraisalMean)?[0])),
        AppraisalMode::Threshold(t) => {
            // [t - mean < 0] = [mean > t]
            let neg = p.neg(&mean);
            let d = p.add_public(&neg, t)?;
            let bit = p.open_signs(TAG, &d.data, RevealKind::AppraisalBit)?;
            Ok(Appraisal::AboveThreshold(bit[0]))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseOutcome {
    pub spec: ProxySpec,
    pub alpha: f64,
    pub candidates: usize,
    pub kept: usize,
    pub comparisons: u64,
    pub survivors: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub bootstrap: Vec<usize>,
    pub phases: Vec<PhaseOutcome>,
    /// Survivors of the last phase.
    pub selected: Vec<usize>,
    pub appraisal: Option<Appraisal>,
}

impl SelectionOutcome {
    /// Bootstrap plus the selected points, sorted.
    pub fn purchase(&self) -> Vec<usize> {
        let s: BTreeSet<usize> = self.bootstrap.iter().chain(&self.selected).copied().collect();
        s.into_iter().collect()
    }
}

/// Runs every phase of `plan` over `candidates` (dataset indices, bootstrap
/// already removed). Only indices move between phases.
pub fn run_selection<W: RingWord>(
    p: &mut Party<W>,
    plan: &PhasePlan,
    bootstrap: &[usize],
    candidates: &[usize],
    source: &mut dyn EntropySource<W>,
    pivot_seed: u64,
    appraisal: Option<AppraisalMode>,
) -> Result<SelectionOutcome> {
    plan.validate()?;
    let mut cur: Vec<usize> = candidates.to_vec();
    cur.sort_unstable();
    cur.dedup();
    if cur.is_empty() {
        return Err(Error::Config("no candidates to select from".into()));
    }
    let mut phases = Vec::with_capacity(plan.phases.len());
    let mut last = None;
    for (i, ph) in plan.phases.iter().enumerate() {
        let e = source.entropies(p, i, &cur)?;
        let k = keep_count(ph.alpha, cur.len());
        let seed = substream(pivot_seed, &format!("phase-{i}"));
        let (pos, comparisons) = secure_quickselect_topk(p, &format!("quickselect_{i}"), &e, k, seed)?;
        let survivors: Vec<usize> = pos.iter().map(|&j| cur[j]).collect();
        phases.push(PhaseOutcome {
            spec: ph.spec,
            alpha: ph.alpha,
            candidates: cur.len(),
            kept: k,
            comparisons,
            survivors: survivors.clone(),
        });
        last = Some(e.select_rows(&pos)?);
        cur = survivors;
    }
    p.ledger_mut()
        .reveals_mut()
        .push("final", RevealKind::FinalIndices, cur.len() as u64);
    let appraisal = match appraisal {
        Some(mode) => Some(appraise(p, last.as_ref().expect("at least one phase"), mode)?),
        None => None,
    };
    let mut boot = bootstrap.to_vec();
    boot.sort_unstable();
    Ok(SelectionOutcome {
        bootstrap: boot,
        phases,
        selected: cur,
        appraisal,
    })
}

/// The multi-phase pipeline in plaintext: `entropies[i]` covers the whole
/// dataset for phase `i`. Returns each phase's survivors.
pub fn plaintext_selection(plan: &PhasePlan, candidates: &[usize], entropies: &[Vec<f64>]) -> Vec<Vec<usize>> {
    let mut cur: Vec<usize> = candidates.to_vec();
    cur.sort_unstable();
    cur.dedup();
    let mut out = Vec::new();
    for (i, ph) in plan.phases.iter().enumerate() {
        let vals: Vec<f64> = cur.iter().map(|&j| entropies[i][j]).collect();
        cur = plaintext_topk(&vals, &cur, keep_count(ph.alpha, cur.len()));
        out.push(cur.clone());
    }
    out
}

/// Fails unless every reveal in `ledger` is one a selection may make.
pub fn audit(ledger: &CostLedger) -> Result<()> {
    ledger.reveals().audit(SELECTION_REVEALS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocols::testutil::run_pair;
    use crate::protocols::ProtocolConfig;
    use crate::ring::FixedPointCodec;
    use proptest::prelude::{prop_assert_eq, proptest, ProptestConfig};

    fn plan(alphas: &[f64]) -> PhasePlan {
        PhasePlan {
            phases: alphas
                .iter()
                .map(|&alpha| Phase {
                    spec: ProxySpec::new(1, 1, 2),
                    alpha,
                })
                .collect(),
            bootstrap_fraction: 0.05,
            budget: None,
        }
    }

    fn qs(vals: &[f64], k: usize, seed: u64) -> (Vec<usize>, u64, CostLedger) {
        let (a, _) = run_pair(seed, ProtocolConfig::default(), FixedPointCodec::default(), |p| {
            let v = (!p.is_leader()).then_some(vals);
            let x: LocalShare = p.input("in", PartyId::DataOwner, v, vec![vals.len()])?;
            let (idx, c) = secure_quickselect_topk(p, "qs", &x, k, seed)?;
            Ok((idx, c, p.ledger().clone()))
        });
        a
    }

    #[test]
    fn keep_count_rounding() {
        assert_eq!(keep_count(0.5, 1000), 500);
        assert_eq!(keep_count(0.4, 500), 200);
        assert_eq!(keep_count(0.5, 3), 2);
        assert_eq!(keep_count(0.01, 10), 1);
        assert_eq!(plan(&[0.5, 0.4]).sizes(1000), vec![500, 200]);
    }

    #[test]
    fn companion_schedule_keeps_fifteen_percent() {
        let p = plan(&[0.5, 0.3 / 0.5, 0.15 / 0.3]);
        assert_eq!(*p.sizes(1000).last().unwrap(), 150);
    }

    #[test]
    fn plan_validation() {
        assert!(plan(&[0.5, 1.0]).validate().is_err());
        let mut p = plan(&[0.5, 0.5]);
        p.phases[0].spec = ProxySpec::new(2, 1, 2);
        assert!(p.validate().is_err());
        let mut p = plan(&[0.5]);
        p.budget = Some(10);
        assert!(p.validate_for(100).is_err());
        p.budget = Some(55);
        assert!(p.validate_for(100).is_ok());
    }

    #[test]
    fn bootstrap_sampling() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        assert_eq!(bootstrap_sample(4, 1.0, &mut rng).unwrap(), vec![0, 1, 2, 3]);
        let a = bootstrap_sample(100, 0.1, &mut ChaCha20Rng::seed_from_u64(2)).unwrap();
        let b = bootstrap_sample(100, 0.1, &mut ChaCha20Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        assert!(bootstrap_sample(10, 0.0, &mut rng).is_err());
    }

    #[test]
    fn bootstrap_inclusion_rate() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut hits = [0u32; 50];
        for _ in 0..4000 {
            for i in bootstrap_sample(50, 0.2, &mut rng).unwrap() {
                hits[i] += 1;
            }
        }
        for h in hits {
            let rate = h as f64 / 4000.0;
            assert!((rate - 0.2).abs() < 0.03, "{rate}");
        }
    }

    #[test]
    fn quickselect_small_cases() {
        assert_eq!(qs(&[0.1, 0.9, 0.5], 2, 1).0, vec![1, 2]);
        assert_eq!(qs(&[0.1, 0.9, 0.5], 3, 1).0, vec![0, 1, 2]);
        // ties go to the lower index
        assert_eq!(qs(&[0.5, 0.5, 0.5, 0.5], 2, 7).0, vec![0, 1]);
    }

    #[test]
    fn quickselect_reveals_only_comparison_bits() {
        let (_, c, ledger) = qs(&[3.0, 1.0, 4.0, 1.5, 5.0, 9.0, 2.0, 6.0], 3, 5);
        assert_eq!(ledger.reveals().count(RevealKind::ComparisonBit), c);
        // the input round is the only other traffic
        assert!(audit(&ledger).is_ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn quickselect_matches_sort(raw in proptest::collection::vec(-4000i32..4000, 2..40), kf in 0.0f64..1.0, seed in 0u64..1000) {
            // grid of 2^-8 keeps distinct values well apart in fixed point
            let vals: Vec<f64> = raw.iter().map(|&v| v as f64 / 256.0).collect();
            let k = ((kf * vals.len() as f64) as usize).clamp(1, vals.len());
            let idx: Vec<usize> = (0..vals.len()).collect();
            let (got, _, _) = qs(&vals, k, seed);
            prop_assert_eq!(got, plaintext_topk(&vals, &idx, k));
        }
    }

    #[test]
    fn stub_selection_matches_plaintext() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let n = 60;
        let ent: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..n).map(|_| rng.random_range(0..4096) as f64 / 1024.0).collect())
            .collect();
        let pl = plan(&[0.5, 0.4]);
        let cands: Vec<usize> = (3..n).collect();
        let (a, b) = run_pair(
            4,
            ProtocolConfig::default(),
            FixedPointCodec::default(),
            |p: &mut Party| {
                let mut src = StubEntropies {
                    values: (!p.is_leader()).then(|| ent.clone()),
                };
                let out = run_selection(p, &pl, &[0, 1, 2], &cands, &mut src, 77, Some(AppraisalMode::Open))?;
                Ok((out, p.ledger().clone()))
            },
        );
        assert_eq!(a.0, b.0);
        let want = plaintext_selection(&pl, &cands, &ent);
        assert_eq!(a.0.selected, *want.last().unwrap());
        assert_eq!(a.0.phases[0].survivors, want[0]);
        assert!(a.0.selected.iter().all(|i| a.0.phases[0].survivors.contains(i)));
        assert_eq!(a.0.purchase().len(), 3 + a.0.selected.len());
        let mean: f64 = a.0.selected.iter().map(|&i| ent[1][i]).sum::<f64>() / a.0.selected.len() as f64;
        match a.0.appraisal {
            Some(Appraisal::Mean(m)) => assert!((m - mean).abs() < 1e-3, "{m} vs {mean}"),
            other => panic!("{other:?}"),
        }
        assert!(audit(&a.1).is_ok());
    }

    #[test]
    fn appraisal_modes() {
        let vals = [0.75; 5];
        let run = |mode| {
            run_pair(5, ProtocolConfig::default(), FixedPointCodec::default(), move |p| {
                let v = (!p.is_leader()).then_some(&vals[..]);
                let x: LocalShare = p.input("in", PartyId::DataOwner, v, vec![5])?;
                appraise(p, &x, mode)
            })
            .0
        };
        match run(AppraisalMode::Open) {
            Appraisal::Mean(m) => assert!((m - 0.75).abs() < 1e-4),
            a => panic!("{a:?}"),
        }
        assert_eq!(run(AppraisalMode::Threshold(2.0)), Appraisal::AboveThreshold(false));
        assert_eq!(run(AppraisalMode::Threshold(0.5)), Appraisal::AboveThreshold(true));
    }

    #[test]
    fn intermediate_reveal_fails_audit() {
        let (l, _) = run_pair(6, ProtocolConfig::default(), FixedPointCodec::default(), |p| {
            let x: LocalShare = p.constant(1.0, vec![1])?;
            p.reveal("leak", &x, RevealKind::Intermediate)?;
            Ok(p.ledger().clone())
        });
        assert!(matches!(audit(&l), Err(Error::Audit(_))));
    }
}
