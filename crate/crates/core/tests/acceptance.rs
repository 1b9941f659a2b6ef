//! Acceptance checks. Runs every criterion, prints one PASS/FAIL line each
//! with the measured values, and exits nonzero if any criterion fails.
//! Every tolerance is a named constant below.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use mpcsieve::approx::{fit_site, mlp_forward_mpc, synthesize, SharedMlp, SiteShape};
use mpcsieve::config::{ExperimentConfig, Variant};
use mpcsieve::nn::{record_taps, softmax_entropy, Site};
use mpcsieve::pipeline::{bench, generate, run_variant, split_bootstrap, train_proxies};
use mpcsieve::protocols::{
    ComparisonCost, Party, ProtocolConfig, EXP_DOMAIN, LOG_DOMAIN, RECIPROCAL_DOMAIN, RSQRT_DOMAIN,
};
use mpcsieve::proxy::{skeleton, ProxySpec};
use mpcsieve::ring::{FixedPointCodec, RingElement, RingWord};
use mpcsieve::scheduler::{
    coalesce, evaluate, sequential_baseline, simulate, ComputeModel, Dag, OpClass, OpNode, OpTemplate, SchedulerConfig,
    Stage, Workload,
};
use mpcsieve::selection::{
    audit, plaintext_selection, plaintext_topk, run_selection, secure_quickselect_topk, Phase, PhasePlan, StubEntropies,
};
use mpcsieve::session::{self, SessionConfig};
use mpcsieve::shares::{share_ring, LocalShare, PartyId, TripleDealer};
use mpcsieve::transport::{loopback_pair, NetworkModel, RevealKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

// ---- pinned tolerances --------------------------------------------------

const N: usize = 1000;
const MPC_SUITE_BUDGET: Duration = Duration::from_secs(60);
/// Fixed-point ops, in units of 2^-16.
const MUL_TOL_ULP: f64 = 1.0;
const MATMUL_TOL_ULP: f64 = 1.0;
/// Truncation against floor division, in ring units.
const TRUNC_TOL: i64 = 1;
const CHI_SQUARE_P_MIN: f64 = 0.01;
const UNIFORMITY_DRAWS: usize = 100_000;
const CMP_ROUNDS: u64 = 8;
const CMP_BYTES: u64 = 432;
/// Kernel errors on a 1000-point grid over each domain with the default
/// iteration counts, measured once and frozen. Error is relative where the
/// reference is at least 1 in magnitude and absolute below.
const EXP_MAX_ERR: f64 = 0.12;
const RECIP_MAX_ERR: f64 = 1.0e-4;
const RSQRT_MAX_ERR: f64 = 6.5e-5;
const LOG_MAX_ERR: f64 = 1.0e-2;
const SOFTMAX_SHARE_MIN: f64 = 50.0;
const PCT_SUM_TOL: f64 = 0.01;
const PM_RATIO_MIN: f64 = 5.0;
const STUB_INSTANCES: usize = 20;
const STUB_MAX_N: usize = 512;
const MLP_OVERLAP_MIN: f64 = 0.40;
const QUICKSELECT_TRIALS: usize = 100;
/// Expected comparisons of randomized selection are at most 2(1 + ln 2)·n.
fn quickselect_c() -> f64 {
    2.0 * (1.0 + std::f64::consts::LN_2)
}
const RANDOM_DAGS: usize = 200;
const SPEEDUP_BAND: (f64, f64) = (1.2, 1.5);
const TIME_EPS: f64 = 1e-9;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("1 mpc correctness", c1_mpc_correctness),
        ("2 beaver identity and share uniformity", c2_beaver_and_uniformity),
        ("3 secure comparison", c3_comparison),
        ("4 kernel errors", c4_kernels),
        ("5 softmax dominates bytes", c5_softmax_share),
        ("6 mlp substitution savings", c6_pm_savings),
        ("7 selection equivalence", c7_selection),
        ("8 quickselect cost and audit", c8_quickselect),
        ("9 scheduler", c9_scheduler),
        ("10 determinism", c10_determinism),
        ("11 mlp quality ordering", c11_mlp_ordering),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let t = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("PASS criterion {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name} ({secs:.1}s): {detail}");
            }
        }
    }
    println!("acceptance: {} of 11 passed", 11 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---- helpers ------------------------------------------------------------

fn pair<W, R, F>(seed: u64, cfg: ProtocolConfig, codec: FixedPointCodec, f: F) -> (R, R)
where
    W: RingWord,
    R: Send,
    F: Fn(&mut Party<W>) -> mpcsieve::Result<R> + Sync,
{
    let (l0, l1) = loopback_pair();
    std::thread::scope(|s| {
        let f = &f;
        let h0 = s.spawn(move || {
            let mut p = Party::<W>::new(PartyId::ModelOwner, Box::new(l0), seed, seed ^ 1, codec, cfg);
            f(&mut p).expect("model owner failed")
        });
        let h1 = s.spawn(move || {
            let mut p = Party::<W>::new(PartyId::DataOwner, Box::new(l1), seed, seed ^ 2, codec, cfg);
            f(&mut p).expect("data owner failed")
        });
        (h0.join().unwrap(), h1.join().unwrap())
    })
}

fn open<W: RingWord>(a: &LocalShare<W>, b: &LocalShare<W>) -> Vec<RingElement<W>> {
    a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect()
}

fn quantize(codec: &FixedPointCodec, x: f64) -> f64 {
    codec.decode::<u64>(codec.encode::<u64>(x).unwrap())
}

fn ring_shared<W: RingWord>(vals: &[RingElement<W>], rng: &mut ChaCha20Rng) -> [LocalShare<W>; 2] {
    share_ring(vals, vec![vals.len()], rng).unwrap().split()
}

fn uniform(rng: &mut ChaCha20Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

// ---- 1 ------------------------------------------------------------------

fn c1_mpc_correctness() -> Outcome {
    let t0 = Instant::now();
    let codec = FixedPointCodec::default();
    let ulp = codec.ulp();
    let mut rng = ChaCha20Rng::seed_from_u64(101);
    let xs = uniform(&mut rng, N, -100.0, 100.0);
    let ys = uniform(&mut rng, N, -100.0, 100.0);
    let ex: Vec<RingElement> = codec.encode_slice(&xs).unwrap();
    let ey: Vec<RingElement> = codec.encode_slice(&ys).unwrap();
    let sx = ring_shared(&ex, &mut rng);
    let sy = ring_shared(&ey, &mut rng);

    // matmul: N independent [2x3]·[3x2] products in one batch
    let mats: Vec<(Vec<f64>, Vec<f64>)> = (0..N)
        .map(|_| (uniform(&mut rng, 6, -10.0, 10.0), uniform(&mut rng, 6, -10.0, 10.0)))
        .collect();
    let shared_mats: Vec<([LocalShare; 2], [LocalShare; 2])> = mats
        .iter()
        .map(|(a, b)| {
            let a = share_ring(&codec.encode_slice::<u64>(a).unwrap(), vec![2, 3], &mut rng)
                .unwrap()
                .split();
            let b = share_ring(&codec.encode_slice::<u64>(b).unwrap(), vec![3, 2], &mut rng)
                .unwrap()
                .split();
            (a, b)
        })
        .collect();

    // truncation and sign inputs straight on the ring
    let raw: Vec<i64> = (0..N).map(|_| rng.random_range(-(1i64 << 50)..(1i64 << 50))).collect();
    let mut signed: Vec<i64> = (0..N - 6)
        .map(|_| rng.random_range(-(1i64 << 62)..(1i64 << 62)))
        .collect();
    signed.extend([0, 1, -1, (1 << 62) - 1, -(1 << 62), 65536]);
    let er: Vec<RingElement> = raw.iter().map(|&v| RingElement::from_signed(v)).collect();
    let es: Vec<RingElement> = signed.iter().map(|&v| RingElement::from_signed(v)).collect();
    let sr = ring_shared(&er, &mut rng);
    let ss = ring_shared(&es, &mut rng);

    let (a, b) = pair::<u64, _, _>(1, ProtocolConfig::default(), codec, |p| {
        let i = p.id().index();
        let add = p.add(&sx[i], &sy[i])?;
        let mul = p.mul("mul", &sx[i], &sy[i])?;
        let pairs: Vec<(&LocalShare, &LocalShare)> = shared_mats.iter().map(|(x, y)| (&x[i], &y[i])).collect();
        let mm = p.matmul_batch("matmul", &pairs)?;
        let tr = p.truncate("trunc", &sr[i])?;
        let msb = p.msb("msb", &ss[i])?;
        let relu = p.relu("relu", &ss[i])?;
        Ok((add, mul, mm, tr, msb, relu))
    });

    let add = open(&a.0, &b.0);
    for k in 0..N {
        ensure!(add[k] == ex[k] + ey[k], "add mismatch at {k}");
    }
    let mul = codec.decode_slice(&open(&a.1, &b.1));
    let mut mul_err = 0.0f64;
    for k in 0..N {
        let want = quantize(&codec, xs[k]) * quantize(&codec, ys[k]);
        mul_err = mul_err.max((mul[k] - want).abs());
    }
    ensure!(mul_err <= MUL_TOL_ULP * ulp, "mul error {:.3} ulp", mul_err / ulp);
    let mut mm_err = 0.0f64;
    for (k, (x, y)) in mats.iter().enumerate() {
        let xq: Vec<f64> = x.iter().map(|&v| quantize(&codec, v)).collect();
        let yq: Vec<f64> = y.iter().map(|&v| quantize(&codec, v)).collect();
        let want = mpcsieve::nn::matmul(&xq, &yq, 2, 3, 2);
        let got = codec.decode_slice(&open(&a.2[k], &b.2[k]));
        for (g, w) in got.iter().zip(&want) {
            mm_err = mm_err.max((g - w).abs());
        }
    }
    ensure!(mm_err <= MATMUL_TOL_ULP * ulp, "matmul error {:.3} ulp", mm_err / ulp);
    let tr = open(&a.3, &b.3);
    for k in 0..N {
        let d = (tr[k].signed() - (raw[k] >> 16)).abs();
        ensure!(d <= TRUNC_TOL, "truncation off by {d} at {}", raw[k]);
    }
    let msb = open(&a.4, &b.4);
    let relu = open(&a.5, &b.5);
    for k in 0..N {
        ensure!(msb[k].0 == u64::from(signed[k] < 0), "msb wrong for {}", signed[k]);
        ensure!(relu[k].signed() == signed[k].max(0), "relu wrong for {}", signed[k]);
    }

    // exhaustive on the 8-bit ring
    let mini = FixedPointCodec::mini(2);
    let all: Vec<RingElement<u8>> = (0..=255u8).map(RingElement).collect();
    let xs8: Vec<RingElement<u8>> = all.iter().flat_map(|&x| std::iter::repeat_n(x, 256)).collect();
    let ys8: Vec<RingElement<u8>> = (0..256).flat_map(|_| all.iter().copied()).collect();
    let small: Vec<i64> = (-63..=63).collect();
    let es8: Vec<RingElement<u8>> = small.iter().map(|&v| RingElement::from_signed(v)).collect();
    let sx8 = ring_shared(&xs8, &mut rng);
    let sy8 = ring_shared(&ys8, &mut rng);
    let sa8 = ring_shared(&all, &mut rng);
    let ssm = ring_shared(&es8, &mut rng);
    let (a, b) = pair::<u8, _, _>(2, ProtocolConfig::default(), mini, |p| {
        let i = p.id().index();
        let add = p.add(&sx8[i], &sy8[i])?;
        let mul = p.mul_raw("mul", &sx8[i], &sy8[i])?;
        let tr = p.truncate_bits("trunc", &ssm[i], 2)?;
        let msb = p.msb("msb", &sa8[i])?;
        let relu = p.relu("relu", &sa8[i])?;
        Ok((add, mul, tr, msb, relu))
    });
    let (add, mul) = (open(&a.0, &b.0), open(&a.1, &b.1));
    for k in 0..xs8.len() {
        ensure!(add[k] == xs8[k] + ys8[k], "8-bit add {} + {}", xs8[k].0, ys8[k].0);
        ensure!(mul[k] == xs8[k] * ys8[k], "8-bit mul {} * {}", xs8[k].0, ys8[k].0);
    }
    let tr = open(&a.2, &b.2);
    for (k, &v) in small.iter().enumerate() {
        ensure!(
            (tr[k].signed() - (v >> 2)).abs() <= TRUNC_TOL,
            "8-bit truncation of {v}"
        );
    }
    let (msb, relu) = (open(&a.3, &b.3), open(&a.4, &b.4));
    for (k, x) in all.iter().enumerate() {
        ensure!(msb[k].0 == u8::from(x.msb()), "8-bit msb of {}", x.0);
        ensure!(relu[k].signed() == x.signed().max(0), "8-bit relu of {}", x.0);
    }
    let el = t0.elapsed();
    ensure!(el < MPC_SUITE_BUDGET, "suite took {el:?}");
    Ok(format!(
        "add exact, mul {:.3} ulp, matmul {:.3} ulp, truncation <= {TRUNC_TOL}, msb/relu exact; 8-bit: 65536 add/mul pairs, 127 truncations, 256 msb/relu exact; {el:.2?}",
        mul_err / ulp,
        mm_err / ulp
    ))
}

// ---- 2 ------------------------------------------------------------------

fn chi_square_p(counts: &[u64], draws: usize) -> f64 {
    let e = draws as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).unwrap();
    1.0 - dist.cdf(stat)
}

fn c2_beaver_and_uniformity() -> Outcome {
    let mut d = TripleDealer::<u64>::new(202);
    let t = d.deal_triples(N);
    let (a, b, c) = (t.a.reconstruct_ring(), t.b.reconstruct_ring(), t.c.reconstruct_ring());
    for k in 0..N {
        ensure!(a[k] * b[k] == c[k], "triple {k} violates a·b = c");
    }

    // fixed secret, fresh sharing each draw: either share alone is uniform
    let mut rng = ChaCha20Rng::seed_from_u64(203);
    let secret = vec![RingElement(0xA5u8); UNIFORMITY_DRAWS];
    let [s0, s1] = ring_shared(&secret, &mut rng);
    let mut p = Vec::new();
    for s in [&s0, &s1] {
        let mut counts = [0u64; 256];
        s.data.iter().for_each(|v| counts[v.0 as usize] += 1);
        p.push(chi_square_p(&counts, UNIFORMITY_DRAWS));
    }
    // shares of dealt randomness
    let mut d8 = TripleDealer::<u8>::new(204);
    let t8 = d8.deal_triples(UNIFORMITY_DRAWS);
    let mut counts = [0u64; 256];
    t8.c.local(PartyId::DataOwner)
        .data
        .iter()
        .for_each(|v| counts[v.0 as usize] += 1);
    p.push(chi_square_p(&counts, UNIFORMITY_DRAWS));
    for &pv in &p {
        ensure!(pv > CHI_SQUARE_P_MIN, "chi-square p = {pv:.4}");
    }
    Ok(format!(
        "{N} triples exact; chi-square p over {UNIFORMITY_DRAWS} draws: share0 {:.3}, share1 {:.3}, dealt c {:.3}",
        p[0], p[1], p[2]
    ))
}

// ---- 3 ------------------------------------------------------------------

fn c3_comparison() -> Outcome {
    let codec = FixedPointCodec::default();
    let ulp = codec.ulp();
    let mut rng = ChaCha20Rng::seed_from_u64(303);
    let mut xs = Vec::with_capacity(N);
    let mut ys = Vec::with_capacity(N);
    for k in 0..N {
        let x: f64 = rng.random_range(-50.0..50.0);
        // half the pairs sit just past the resolution limit
        let gap = if k % 2 == 0 {
            ulp * rng.random_range(1.01..64.0)
        } else {
            rng.random_range(ulp * 1.01..20.0)
        };
        let y = if rng.random_bool(0.5) { x + gap } else { x - gap };
        xs.push(x);
        ys.push(y);
    }
    let mut rng2 = ChaCha20Rng::seed_from_u64(304);
    let sx = ring_shared(&codec.encode_slice::<u64>(&xs).unwrap(), &mut rng2);
    let sy = ring_shared(&codec.encode_slice::<u64>(&ys).unwrap(), &mut rng2);
    let run = |cost: ComparisonCost, n: usize| {
        let cfg = ProtocolConfig {
            comparison_cost: cost,
            ..ProtocolConfig::default()
        };
        let sx = [
            sx[0].select_rows(&(0..n).collect::<Vec<_>>()).unwrap(),
            sx[1].select_rows(&(0..n).collect::<Vec<_>>()).unwrap(),
        ];
        let sy = [
            sy[0].select_rows(&(0..n).collect::<Vec<_>>()).unwrap(),
            sy[1].select_rows(&(0..n).collect::<Vec<_>>()).unwrap(),
        ];
        pair::<u64, _, _>(3, cfg, codec, move |p| {
            let i = p.id().index();
            let bits = p.compare_open("cmp", &sx[i], &sy[i])?;
            Ok((bits, p.ledger().clone()))
        })
        .0
    };
    let (bits, ledger) = run(ComparisonCost::default(), N);
    for k in 0..N {
        ensure!(bits[k] == (xs[k] < ys[k]), "pair {k}: {} vs {}", xs[k], ys[k]);
    }
    ensure!(
        ledger.reveals().count(RevealKind::ComparisonBit) == N as u64,
        "reveal count"
    );
    let (_, one) = run(ComparisonCost::default(), 1);
    let c = one.tag("cmp");
    ensure!(
        c.rounds == CMP_ROUNDS && c.bytes == CMP_BYTES,
        "one comparison charged {} rounds, {} bytes",
        c.rounds,
        c.bytes
    );
    let batch = ledger.tag("cmp");
    ensure!(batch.bytes == CMP_BYTES * N as u64, "batch bytes {}", batch.bytes);
    let analytic = one.analytic_comparison_cost();
    let (_, measured) = run(ComparisonCost::Analytic, 1);
    let m = measured.tag("cmp");
    ensure!(
        m.rounds == analytic.rounds && m.bytes == analytic.bytes,
        "analytic estimate disagrees with exchange"
    );
    Ok(format!(
        "{N}/{N} agree; charged {} rounds / {} bytes per comparison; analytic protocol cost {} rounds / {} bytes",
        c.rounds, c.bytes, analytic.rounds, analytic.bytes
    ))
}

// ---- 4 ------------------------------------------------------------------

fn grid(lo: f64, hi: f64) -> Vec<f64> {
    (0..N).map(|i| lo + (hi - lo) * i as f64 / (N - 1) as f64).collect()
}

fn c4_kernels() -> Outcome {
    let codec = FixedPointCodec::default();
    let ge = grid(EXP_DOMAIN.lo, EXP_DOMAIN.hi);
    let gr = grid(RECIPROCAL_DOMAIN.lo, RECIPROCAL_DOMAIN.hi);
    let gs = grid(RSQRT_DOMAIN.lo, RSQRT_DOMAIN.hi);
    let gl = grid(LOG_DOMAIN.lo, LOG_DOMAIN.hi);
    let mut rng = ChaCha20Rng::seed_from_u64(404);
    let mut sh = |v: &[f64]| ring_shared(&codec.encode_slice::<u64>(v).unwrap(), &mut rng);
    let (se, sr, ss, sl) = (sh(&ge), sh(&gr), sh(&gs), sh(&gl));
    let (a, b) = pair::<u64, _, _>(4, ProtocolConfig::default(), codec, |p| {
        let i = p.id().index();
        Ok((
            p.exp("exp", &se[i])?,
            p.reciprocal("rec", &sr[i])?,
            p.rsqrt("rsqrt", &ss[i])?,
            p.log("log", &sl[i])?,
        ))
    });
    let dec = |x: &LocalShare, y: &LocalShare| codec.decode_slice(&open(x, y));
    // relative where |f| >= 1, absolute below: tiny outputs sit under the
    // fixed-point resolution
    let err = |got: Vec<f64>, g: &[f64], f: fn(f64) -> f64| {
        got.iter()
            .zip(g)
            .map(|(v, &x)| (v - f(x)).abs() / f(x).abs().max(1.0))
            .fold(0.0, f64::max)
    };
    let e = err(dec(&a.0, &b.0), &ge, f64::exp);
    let r = err(dec(&a.1, &b.1), &gr, |x| 1.0 / x);
    let s = err(dec(&a.2, &b.2), &gs, |x| 1.0 / x.sqrt());
    let l = err(dec(&a.3, &b.3), &gl, f64::ln);
    let detail = format!("max error exp {e:.4e}, reciprocal {r:.4e}, rsqrt {s:.4e}, log {l:.4e}");
    ensure!(e <= EXP_MAX_ERR, "exp: {detail}");
    ensure!(r <= RECIP_MAX_ERR, "reciprocal: {detail}");
    ensure!(s <= RSQRT_MAX_ERR, "rsqrt: {detail}");
    ensure!(l <= LOG_MAX_ERR, "log: {detail}");
    Ok(detail)
}

// ---- 5 ------------------------------------------------------------------

fn c5_softmax_share() -> Outcome {
    let mut cfg = ExperimentConfig::default();
    cfg.model.seq_len = 128;
    cfg.bench_layers = 1;
    cfg.bench_heads = 1;
    cfg.validate().map_err(|e| e.to_string())?;
    let (model, _) = generate(&cfg).map_err(|e| e.to_string())?;
    let table = bench(&cfg, &model).map_err(|e| e.to_string())?;
    let soft = table.row("attn_softmax").map(|r| r.pct_bytes).unwrap_or(0.0);
    let sum: f64 = table.rows.iter().map(|r| r.pct_bytes).sum();
    ensure!((sum - 100.0).abs() < PCT_SUM_TOL, "percentages sum to {sum}");
    ensure!(soft > SOFTMAX_SHARE_MIN, "attn_softmax carries {soft:.2}% of bytes");
    Ok(format!(
        "attn_softmax {soft:.2}% of {} bytes over {:.1} simulated seconds",
        table.total.bytes, table.total.seconds
    ))
}

// ---- 6 ------------------------------------------------------------------

fn c6_pm_savings() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = ExperimentConfig::default();
    cfg.out = dir.path().to_path_buf();
    cfg.model.seq_len = 128;
    cfg.model.examples = 40;
    cfg.plan.phases = vec![Phase {
        spec: ProxySpec::new(2, 4, 16),
        alpha: 0.5,
    }];
    cfg.plan.bootstrap_fraction = 0.25;
    cfg.validate().map_err(|e| e.to_string())?;
    let (model, data) = generate(&cfg).map_err(|e| e.to_string())?;
    let (proxies, _) = train_proxies(&cfg, &model, &data).map_err(|e| e.to_string())?;
    let p = run_variant(&cfg, Variant::P, &model, &data, &proxies).map_err(|e| e.to_string())?;
    let pm = run_variant(&cfg, Variant::PM, &model, &data, &proxies).map_err(|e| e.to_string())?;
    let (p, pm) = (&p.report, &pm.report);
    let bytes = p.bytes as f64 / pm.bytes as f64;
    let time = p.simulated_seconds / pm.simulated_seconds;
    let detail = format!(
        "T=128, proxy <2,4,16>: P {} bytes / {:.1}s, PM {} bytes / {:.1}s; ratios bytes {bytes:.2}x, time {time:.2}x",
        p.bytes, p.simulated_seconds, pm.bytes, pm.simulated_seconds
    );
    ensure!(bytes >= PM_RATIO_MIN && time >= PM_RATIO_MIN, "{detail}");
    Ok(detail)
}

// ---- 7 ------------------------------------------------------------------

fn c7_selection() -> Outcome {
    let codec = FixedPointCodec::default();
    let mut rng = ChaCha20Rng::seed_from_u64(707);
    for inst in 0..STUB_INSTANCES {
        let n = rng.random_range(16..=STUB_MAX_N);
        let phases = rng.random_range(1..=3);
        let plan = PhasePlan {
            phases: (0..phases)
                .map(|_| Phase {
                    spec: ProxySpec::new(1, 1, 2),
                    alpha: rng.random_range(0.2..0.8),
                })
                .collect(),
            bootstrap_fraction: 0.1,
            budget: None,
        };
        // entropies on the fixed-point grid, with deliberate ties
        let ent: Vec<Vec<f64>> = (0..phases)
            .map(|_| {
                (0..n)
                    .map(|_| quantize(&codec, (rng.random_range(0..4000) as f64) / 1000.0))
                    .collect()
            })
            .collect();
        let boot: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.1)).collect();
        let cand: Vec<usize> = (0..n).filter(|i| !boot.contains(i)).collect();
        let want = plaintext_selection(&plan, &cand, &ent);
        let sc = SessionConfig::new(inst as u64);
        let res = session::run(&sc, |p| {
            let mut src = StubEntropies {
                values: (!p.is_leader()).then(|| ent.clone()),
            };
            run_selection(p, &plan, &boot, &cand, &mut src, inst as u64, None)
        })
        .map_err(|e| e.to_string())?;
        let got: Vec<Vec<usize>> = res.outputs.0.phases.iter().map(|ph| ph.survivors.clone()).collect();
        ensure!(got == want, "instance {inst} (n = {n}) differs from plaintext");
        ensure!(res.outputs.0 == res.outputs.1, "parties disagree on instance {inst}");
        audit(&res.ledger).map_err(|e| e.to_string())?;
    }

    // approximated entropies on synthetic logits
    let cfg = ExperimentConfig::default();
    let (model, data) = generate(&cfg).map_err(|e| e.to_string())?;
    let (boot, _) = split_bootstrap(&cfg, data.len()).map_err(|e| e.to_string())?;
    let spec = cfg.plan.phases.last().unwrap().spec;
    let proxy = skeleton(&model, spec).map_err(|e| e.to_string())?;
    let taps = record_taps(&proxy, &data.subset(&boot)).map_err(|e| e.to_string())?;
    let shape = SiteShape {
        width: cfg.model.classes,
        mask_value: cfg.model.mask_value,
        ln_eps: cfg.model.ln_eps,
    };
    let (mlp, _, est) =
        fit_site(&taps, Site::SoftmaxEntropy, None, spec.hidden, shape, &cfg.train).map_err(|e| e.to_string())?;
    let rows = 500;
    let k = rows / 5;
    let logits = synthesize(
        Site::SoftmaxEntropy,
        est,
        rows,
        shape,
        &mut ChaCha20Rng::seed_from_u64(708),
    );
    let truth: Vec<f64> = logits.chunks(shape.width).map(softmax_entropy).collect();
    let all: Vec<usize> = (0..rows).collect();
    let want = plaintext_topk(&truth, &all, k);
    let dims = (mlp.input, mlp.hidden, mlp.output);
    let res = session::run(&SessionConfig::new(709), |p| {
        let m = SharedMlp::input(p, "setup", dims, p.is_leader().then_some(&mlp))?;
        let x = p.input(
            "input",
            PartyId::DataOwner,
            (!p.is_leader()).then_some(&logits[..]),
            vec![rows, shape.width],
        )?;
        let e = mlp_forward_mpc(p, "entropy_mlp", &m, &x)?;
        let e = e.reshape(vec![rows])?;
        secure_quickselect_topk(p, "quickselect_0", &e, k, 710)
    })
    .map_err(|e| e.to_string())?;
    audit(&res.ledger).map_err(|e| e.to_string())?;
    let got = &res.outputs.0 .0;
    let overlap = got.iter().filter(|i| want.contains(i)).count() as f64 / k as f64;
    ensure!(overlap >= MLP_OVERLAP_MIN, "top-20% overlap {overlap:.3}");
    Ok(format!(
        "{STUB_INSTANCES} stub instances match plaintext exactly; MLP top-20% overlap {:.1}% on {rows} synthetic rows",
        overlap * 100.0
    ))
}

// ---- 8 ------------------------------------------------------------------

fn c8_quickselect() -> Outcome {
    let codec = FixedPointCodec::default();
    let mut rng = ChaCha20Rng::seed_from_u64(808);
    let n = 500;
    let c = quickselect_c();
    let mut ratios = Vec::with_capacity(QUICKSELECT_TRIALS);
    for trial in 0..QUICKSELECT_TRIALS {
        let k = rng.random_range(1..=n);
        let vals: Vec<f64> = (0..n).map(|_| quantize(&codec, rng.random_range(0.0..4.0))).collect();
        let want = plaintext_topk(&vals, &(0..n).collect::<Vec<_>>(), k);
        let res = session::run(&SessionConfig::new(trial as u64), |p| {
            let x = p.input(
                "input",
                PartyId::DataOwner,
                (!p.is_leader()).then_some(&vals[..]),
                vec![n],
            )?;
            secure_quickselect_topk(p, "quickselect", &x, k, trial as u64 + 10_000)
        })
        .map_err(|e| e.to_string())?;
        let (idx, comps) = &res.outputs.0;
        ensure!(*idx == want, "trial {trial}: wrong top-{k}");
        let log = res.ledger.reveals();
        ensure!(
            log.count(RevealKind::ComparisonBit) == *comps,
            "trial {trial}: reveal log does not match comparisons"
        );
        audit(&res.ledger).map_err(|e| e.to_string())?;
        ratios.push(*comps as f64 / n as f64);
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let max = ratios.iter().copied().fold(0.0, f64::max);
    ensure!(mean <= c, "mean comparisons {mean:.3}·n > {c:.3}·n");
    Ok(format!(
        "n = {n}, {QUICKSELECT_TRIALS} trials: mean {mean:.3}·n, max {max:.3}·n, pinned c = {c:.3}; audits pass"
    ))
}

// ---- 9 ------------------------------------------------------------------

fn random_op(rng: &mut ChaCha20Rng) -> OpTemplate {
    let tags = ["qkv", "attn_softmax_mlp", "quickselect", "ln_mlp"];
    let (rounds, bytes) = if rng.random_bool(0.5) {
        let r = rng.random_range(1..9);
        (r, r * rng.random_range(0..4000))
    } else {
        let r = rng.random_range(1..3);
        (r, r * rng.random_range(4096..5_000_000))
    };
    OpTemplate {
        tag: tags[rng.random_range(0..tags.len())].into(),
        rounds,
        bytes,
        max_dir_bytes: bytes / 2,
        flops: rng.random_range(0..20_000_000),
    }
}

fn random_workload(rng: &mut ChaCha20Rng) -> Workload {
    let stages = (0..rng.random_range(1..5))
        .map(|_| {
            if rng.random_bool(0.3) {
                Stage::Chain((0..rng.random_range(1..4)).map(|_| random_op(rng)).collect())
            } else {
                let plan: Vec<OpTemplate> = (0..rng.random_range(1..6)).map(|_| random_op(rng)).collect();
                Stage::Batches(vec![plan; rng.random_range(1..12)])
            }
        })
        .collect();
    Workload { stages }
}

fn random_dag(rng: &mut ChaCha20Rng) -> Dag {
    let n = rng.random_range(1..60);
    let mut dag = Dag::default();
    for i in 0..n {
        let op = random_op(rng);
        let class = op.class(4096);
        dag.nodes.push(OpNode {
            tag: op.tag,
            rounds: op.rounds,
            bytes: op.bytes,
            max_dir_bytes: op.max_dir_bytes,
            flops: op.flops,
            deps: (0..i).filter(|_| rng.random_bool(0.1)).collect(),
            batch: Some(i * 5 / n),
            position: i,
            stage: 0,
            class,
            mem_bytes: op.max_dir_bytes,
        });
    }
    dag
}

fn c9_scheduler() -> Outcome {
    let net = NetworkModel::default();
    let sc = SchedulerConfig::default();
    let cm = ComputeModel::default();
    let mut rng = ChaCha20Rng::seed_from_u64(909);
    let mut worst = 0.0f64;
    for i in 0..RANDOM_DAGS {
        // half raw graphs with arbitrary dependencies, half batched workloads
        if i % 2 == 0 {
            let dag = random_dag(&mut rng);
            let s = sequential_baseline(&dag, &net, &cm)
                .map_err(|e| e.to_string())?
                .makespan;
            let o = simulate(&dag, &net, &cm, None).map_err(|e| e.to_string())?.makespan;
            ensure!(o <= s + TIME_EPS, "dag {i}: overlapped {o} > sequential {s}");
            worst = worst.max(o / s);
            let merged = coalesce(&dag, sc.window).map_err(|e| e.to_string())?;
            ensure!(
                merged.total_bytes() == dag.total_bytes(),
                "dag {i}: coalescing changed bytes"
            );
        } else {
            let w = random_workload(&mut rng);
            let dag = w.dag(sc.latency_threshold).map_err(|e| e.to_string())?;
            let (r, _) = evaluate(&w, &net, &sc).map_err(|e| e.to_string())?;
            ensure!(
                r.scheduled <= r.sequential + TIME_EPS,
                "workload {i}: {} > {}",
                r.scheduled,
                r.sequential
            );
            ensure!(r.bytes == dag.total_bytes(), "workload {i}: coalescing changed bytes");
            ensure!(
                r.rounds_after <= r.rounds_before,
                "workload {i}: coalescing added rounds"
            );
            let merged = coalesce(&dag, sc.window).map_err(|e| e.to_string())?;
            ensure!(
                merged
                    .nodes
                    .iter()
                    .all(|n| n.class != OpClass::BandwidthBound || n.rounds > 0),
                "workload {i}: malformed merged node"
            );
            worst = worst.max(r.scheduled / r.sequential);
        }
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = ExperimentConfig::default();
    cfg.out = dir.path().to_path_buf();
    let (model, data) = generate(&cfg).map_err(|e| e.to_string())?;
    let (proxies, _) = train_proxies(&cfg, &model, &data).map_err(|e| e.to_string())?;
    let run = run_variant(&cfg, Variant::Full, &model, &data, &proxies).map_err(|e| e.to_string())?;
    let s = run.report.schedule.ok_or("full variant produced no schedule")?;
    ensure!(
        s.bytes == run.report.bytes,
        "coalesced bytes {} vs run bytes {}",
        s.bytes,
        run.report.bytes
    );
    ensure!(
        (SPEEDUP_BAND.0..=SPEEDUP_BAND.1).contains(&s.speedup),
        "2-phase speedup {:.3} outside [{}, {}]",
        s.speedup,
        SPEEDUP_BAND.0,
        SPEEDUP_BAND.1
    );
    Ok(format!(
        "{RANDOM_DAGS} random graphs never slower (worst ratio {worst:.3}); 2-phase workload {:.1}s -> {:.1}s, speedup {:.3}; rounds {} -> {}, bytes preserved",
        s.sequential, s.scheduled, s.speedup, s.rounds_before, s.rounds_after
    ))
}

// ---- 10 -----------------------------------------------------------------

fn cli(args: &[&str], out: &Path) -> Result<(), String> {
    let st = Command::new(env!("CARGO_BIN_EXE_mpcsieve"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        st.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&st.stderr)
    );
    Ok(())
}

fn c10_determinism() -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dirs = [root.path().join("a"), root.path().join("b")];
    for d in &dirs {
        cli(&["gen", "--seed", "11"], d)?;
        cli(&["train-approx", "--seed", "11"], d)?;
        cli(&["select", "--seed", "11", "--variant", "full"], d)?;
    }
    let files = [
        "indices.txt",
        "report.json",
        "ledger.json",
        "timeline.txt",
        "train_report.json",
    ];
    for f in files {
        let a = std::fs::read(dirs[0].join(f)).map_err(|e| format!("{f}: {e}"))?;
        let b = std::fs::read(dirs[1].join(f)).map_err(|e| format!("{f}: {e}"))?;
        ensure!(!a.is_empty() && a == b, "{f} differs between runs");
    }
    let report: mpcsieve::pipeline::RunReport =
        serde_json::from_slice(&std::fs::read(dirs[0].join("report.json")).unwrap()).map_err(|e| e.to_string())?;
    let n = ExperimentConfig::default().model.examples;
    ensure!(report.selected.iter().all(|&i| i < n), "index out of range");
    Ok(format!(
        "{} byte-identical across two runs; {} points selected",
        files.join(", "),
        report.selected.len()
    ))
}

// ---- 11 -----------------------------------------------------------------

fn c11_mlp_ordering() -> Outcome {
    let cfg = ExperimentConfig::default();
    let (model, data) = generate(&cfg).map_err(|e| e.to_string())?;
    let (boot, _) = split_bootstrap(&cfg, data.len()).map_err(|e| e.to_string())?;
    let proxy = skeleton(&model, ProxySpec::new(1, 1, 2)).map_err(|e| e.to_string())?;
    let taps = record_taps(&proxy, &data.subset(&boot)).map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    for (site, layer, width) in [
        (Site::AttnSoftmax, Some(0), cfg.model.seq_len),
        (Site::LnRecip, Some(0), 1),
        (Site::SoftmaxEntropy, None, cfg.model.classes),
    ] {
        let shape = SiteShape {
            width,
            mask_value: cfg.model.mask_value,
            ln_eps: cfg.model.ln_eps,
        };
        let mse: Vec<f64> = [2, 8, 16]
            .iter()
            .map(|&d| fit_site(&taps, site, layer, d, shape, &cfg.train).map(|(_, r, _)| r.heldout_mse))
            .collect::<mpcsieve::Result<_>>()
            .map_err(|e| e.to_string())?;
        let line = format!(
            "{} d=2 {:.3e} d=8 {:.3e} d=16 {:.3e}",
            site.name(),
            mse[0],
            mse[1],
            mse[2]
        );
        ensure!(mse[2] <= mse[1] && mse[1] <= mse[0], "{line}");
        lines.push(line);
    }
    Ok(lines.join("; "))
}
