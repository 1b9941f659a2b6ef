//! The experiment commands behind the command-line verbs. Every command
//! reads and writes files under the configured output directory and is a
//! pure function of the config and its inputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Variant};
use crate::error::{Error, Result};
use crate::nn::{Dataset, Site, TransformerWeights};
use crate::proxy::{
    build_proxy, forward_entropy_mpc, skeleton, strip_ffn, Nonlinearity, ProxyArch, ProxyModel, ProxySpec, SharedData,
    SharedProxy, SiteReport,
};
use crate::scheduler::{evaluate, trace_time, ScheduleReport, Timeline, Workload};
use crate::seeds::substream;
use crate::selection::{audit, bootstrap_sample, run_selection, Appraisal, PhasePlan, ProxyEntropies};
use crate::session;
use crate::transport::{CostLedger, CostTable};

pub const MODEL_FILE: &str = "model.bin";
pub const DATASET_FILE: &str = "dataset.bin";
pub const CONFIG_FILE: &str = "config.txt";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const INDICES_FILE: &str = "indices.txt";
pub const REPORT_FILE: &str = "report.json";
pub const LEDGER_FILE: &str = "ledger.json";
pub const TIMELINE_FILE: &str = "timeline.txt";
pub const VARIANTS_FILE: &str = "variants.json";
pub const BENCH_FILE: &str = "bench.txt";
pub const BENCH_JSON_FILE: &str = "bench.json";

pub fn proxy_file(phase: usize) -> String {
    format!("proxy_{phase}.bin")
}

/// `mlp/phase{i}_{site}_{layer}.bin`; the entropy site has no layer.
pub fn mlp_file(phase: usize, site: Site, layer: Option<usize>) -> PathBuf {
    let layer = layer.map_or("head".to_string(), |l| l.to_string());
    Path::new("mlp").join(format!("phase{phase}_{}_{layer}.bin", site.name()))
}

fn stream(seed: u64, label: &str) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(substream(seed, label))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents)?;
    Ok(())
}

/// The seeded target model and dataset.
pub fn generate(cfg: &ExperimentConfig) -> Result<(TransformerWeights, Dataset)> {
    cfg.validate()?;
    let tc = cfg.model.transformer()?;
    let model = TransformerWeights::random(tc, &mut stream(cfg.seed, "weights"));
    let data = Dataset::synthetic(
        cfg.model.examples,
        tc.seq_len,
        tc.model_dim,
        &mut stream(cfg.seed, "data"),
    );
    Ok((model, data))
}

/// Writes the target model, the dataset and the effective config.
pub fn cmd_gen(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let (model, data) = generate(cfg)?;
    ensure_dir(&cfg.out)?;
    let files = [
        cfg.out.join(MODEL_FILE),
        cfg.out.join(DATASET_FILE),
        cfg.out.join(CONFIG_FILE),
    ];
    model.save(&files[0])?;
    data.save(&files[1])?;
    write(&files[2], &cfg.to_text())?;
    Ok(files.to_vec())
}

/// Loads a file an earlier command should have written; a missing file
/// names its path.
fn need<T>(path: &Path, load: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    load(path).map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        e => e,
    })
}

/// Loads what `gen` wrote, checking it matches the config.
pub fn load_inputs(cfg: &ExperimentConfig) -> Result<(TransformerWeights, Dataset)> {
    let model = need(&cfg.out.join(MODEL_FILE), TransformerWeights::load)?;
    let data = need(&cfg.out.join(DATASET_FILE), Dataset::load)?;
    if model.config != cfg.model.transformer()? {
        return Err(Error::Config(
            "model file does not match the [model] section; rerun gen".into(),
        ));
    }
    if data.len() != cfg.model.examples || data.seq_len != cfg.model.seq_len {
        return Err(Error::Config(
            "dataset file does not match the [model] section; rerun gen".into(),
        ));
    }
    Ok((model, data))
}

/// Bootstrap indices and the remaining candidates.
pub fn split_bootstrap(cfg: &ExperimentConfig, n: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let boot = bootstrap_sample(n, cfg.plan.bootstrap_fraction, &mut stream(cfg.seed, "bootstrap"))?;
    let mut taken = vec![false; n];
    boot.iter().for_each(|&i| taken[i] = true);
    let rest = (0..n).filter(|&i| !taken[i]).collect();
    Ok((boot, rest))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseTraining {
    pub phase: usize,
    pub spec: ProxySpec,
    pub sites: Vec<SiteReport>,
}

/// One proxy per phase, trained on the bootstrap rows.
pub fn train_proxies(
    cfg: &ExperimentConfig,
    model: &TransformerWeights,
    data: &Dataset,
) -> Result<(Vec<ProxyModel>, Vec<PhaseTraining>)> {
    let (boot, _) = split_bootstrap(cfg, data.len())?;
    let bootstrap = data.subset(&boot);
    let train = crate::approx::TrainConfig {
        seed: substream(cfg.seed, "synth"),
        ..cfg.train
    };
    let mut proxies = Vec::new();
    let mut reports = Vec::new();
    for (i, ph) in cfg.plan.phases.iter().enumerate() {
        let (m, sites) = build_proxy(model, ph.spec, &bootstrap, &train)?;
        proxies.push(m);
        reports.push(PhaseTraining {
            phase: i,
            spec: ph.spec,
            sites,
        });
    }
    Ok((proxies, reports))
}

/// Trains and writes every phase's proxy, each approximator on its own,
/// and the per-site error report.
pub fn cmd_train_approx(cfg: &ExperimentConfig) -> Result<(Vec<PhaseTraining>, Vec<PathBuf>)> {
    let (model, data) = load_inputs(cfg)?;
    let (proxies, reports) = train_proxies(cfg, &model, &data)?;
    ensure_dir(&cfg.out.join("mlp"))?;
    let mut files = Vec::new();
    for (i, m) in proxies.iter().enumerate() {
        let path = cfg.out.join(proxy_file(i));
        m.save(&path)?;
        files.push(path);
        for mlp in m.mlps() {
            let path = cfg.out.join(mlp_file(i, mlp.site, mlp.layer));
            mlp.to_container().write(&path)?;
            files.push(path);
        }
    }
    let json = serde_json::to_string_pretty(&reports).expect("reports serialize");
    write(&cfg.out.join(TRAIN_REPORT_FILE), &json)?;
    Ok((reports, files))
}

pub fn load_proxies(cfg: &ExperimentConfig) -> Result<Vec<ProxyModel>> {
    let mut out = Vec::new();
    for (i, ph) in cfg.plan.phases.iter().enumerate() {
        let m = need(&cfg.out.join(proxy_file(i)), ProxyModel::load)?;
        if m.spec != ph.spec {
            return Err(Error::Config(format!(
                "proxy {i} does not match the phase plan; rerun train-approx"
            )));
        }
        out.push(m);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub spec: ProxySpec,
    pub alpha: f64,
    pub candidates: usize,
    pub kept: usize,
    pub comparisons: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: Variant,
    pub seed: u64,
    pub examples: usize,
    pub bootstrap: Vec<usize>,
    pub phases: Vec<PhaseSummary>,
    pub selected: Vec<usize>,
    pub appraisal: Option<Appraisal>,
    pub reveal_digest: String,
    pub rounds: u64,
    pub bytes: u64,
    /// Communication time alone.
    pub comm_seconds: f64,
    /// End to end: sequential rounds plus local arithmetic, or the
    /// scheduled makespan for the full variant.
    pub simulated_seconds: f64,
    pub schedule: Option<ScheduleReport>,
}

#[derive(Debug)]
pub struct SelectRun {
    pub report: RunReport,
    pub ledger: CostLedger,
    pub timeline: Option<Timeline>,
}

/// Runs one selection variant in a fresh two-party session.
pub fn run_variant(
    cfg: &ExperimentConfig,
    variant: Variant,
    model: &TransformerWeights,
    data: &Dataset,
    proxies: &[ProxyModel],
) -> Result<SelectRun> {
    cfg.validate()?;
    let (boot, candidates) = split_bootstrap(cfg, data.len())?;
    let plan: PhasePlan = match variant {
        Variant::P | Variant::PM => cfg.plan.single_phase(),
        Variant::PMT | Variant::Full => cfg.plan.clone(),
    };
    let last = cfg.plan.phases.last().expect("validated plan").spec;
    let kernel_weights;
    let models: Vec<(ProxyArch, &TransformerWeights, Option<&ProxyModel>)> = match variant {
        Variant::P => {
            kernel_weights = skeleton(model, last)?;
            vec![(ProxyArch::kernels(&kernel_weights), &kernel_weights, None)]
        }
        _ => {
            if proxies.len() != cfg.plan.phases.len() {
                return Err(Error::Config(format!(
                    "{} proxies for {} phases; run train-approx",
                    proxies.len(),
                    cfg.plan.phases.len()
                )));
            }
            let used: &[ProxyModel] = if variant == Variant::PM {
                &proxies[proxies.len() - 1..]
            } else {
                proxies
            };
            used.iter()
                .map(|m| (ProxyArch::of(m, Nonlinearity::Mlp), &m.weights, Some(m)))
                .collect()
        }
    };
    let mut sc = cfg.session(cfg.seed)?;
    sc.trace = true;
    let pivots = substream(cfg.seed, "quickselect-pivots");
    let shape = (data.len(), data.seq_len, data.dim);
    let mask_value = cfg.model.mask_value;
    let mut res = session::run(&sc, |p| {
        let lead = p.is_leader();
        let mut shared = Vec::with_capacity(models.len());
        for (arch, w, m) in &models {
            shared.push(SharedProxy::setup(p, "setup", *arch, lead.then_some((*w, *m)))?);
        }
        let sd = SharedData::input(p, "input", shape, mask_value, (!lead).then_some(data))?;
        let mut src = ProxyEntropies::new(&sd, &shared, cfg.batch_size);
        let out = run_selection(p, &plan, &boot, &candidates, &mut src, pivots, cfg.appraisal)?;
        Ok((out, src.boundaries))
    })?;
    let ((outcome, marks), (other, _)) = res.outputs;
    if outcome != other {
        return Err(Error::Desync("parties disagree on the selection".into()));
    }
    audit(&res.ledger)?;
    let trace = res.ledger.take_trace();
    let sc_cfg = cfg.scheduler;
    let (schedule, timeline, simulated) = if variant == Variant::Full {
        let w = Workload::from_trace(&trace, &marks, sc_cfg.latency_threshold)?;
        let (r, t) = evaluate(&w, &cfg.network, &sc_cfg)?;
        let s = r.scheduled;
        (Some(r), Some(t), s)
    } else {
        (None, None, trace_time(&trace, &cfg.network, &sc_cfg.compute))
    };
    let total = res.ledger.total();
    let report = RunReport {
        variant,
        seed: cfg.seed,
        examples: data.len(),
        bootstrap: outcome.bootstrap.clone(),
        phases: outcome
            .phases
            .iter()
            .map(|ph| PhaseSummary {
                spec: ph.spec,
                alpha: ph.alpha,
                candidates: ph.candidates,
                kept: ph.kept,
                comparisons: ph.comparisons,
            })
            .collect(),
        selected: outcome.selected.clone(),
        appraisal: outcome.appraisal,
        reveal_digest: res.ledger.reveals().digest(),
        rounds: total.rounds,
        bytes: total.bytes,
        comm_seconds: total.seconds,
        simulated_seconds: simulated,
        schedule,
    };
    Ok(SelectRun {
        report,
        ledger: res.ledger,
        timeline,
    })
}

/// Writes the indices, the run report and the ledger table of `run`.
pub fn write_run(dir: &Path, run: &SelectRun) -> Result<()> {
    ensure_dir(dir)?;
    let mut idx = String::new();
    for i in &run.report.selected {
        let _ = writeln!(idx, "{i}");
    }
    write(&dir.join(INDICES_FILE), &idx)?;
    write(
        &dir.join(REPORT_FILE),
        &serde_json::to_string_pretty(&run.report).expect("report serializes"),
    )?;
    write(&dir.join(LEDGER_FILE), &run.ledger.report().to_json())?;
    if let Some(t) = &run.timeline {
        write(&dir.join(TIMELINE_FILE), &t.to_text())?;
    }
    Ok(())
}

/// `select`: loads the generated inputs and trained proxies, runs the
/// configured variant and writes its outputs.
pub fn cmd_select(cfg: &ExperimentConfig) -> Result<SelectRun> {
    let (model, data) = load_inputs(cfg)?;
    let proxies = if cfg.variant == Variant::P {
        Vec::new()
    } else {
        load_proxies(cfg)?
    };
    let run = run_variant(cfg, cfg.variant, &model, &data, &proxies)?;
    write_run(&cfg.out, &run)?;
    Ok(run)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: Variant,
    pub rounds: u64,
    pub bytes: u64,
    pub comm_seconds: f64,
    pub simulated_seconds: f64,
    pub selected: usize,
}

pub fn variant_table(rows: &[VariantRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<8} {:>10} {:>16} {:>14} {:>14} {:>9}",
        "variant", "rounds", "bytes", "comm_seconds", "sim_seconds", "selected"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<8} {:>10} {:>16} {:>14.3} {:>14.3} {:>9}",
            r.variant.to_string(),
            r.rounds,
            r.bytes,
            r.comm_seconds,
            r.simulated_seconds,
            r.selected
        );
    }
    s
}

/// Runs every variant on the same inputs; each run's outputs go to a
/// subdirectory named after the variant.
pub fn cmd_compare(cfg: &ExperimentConfig) -> Result<Vec<VariantRow>> {
    let (model, data) = load_inputs(cfg)?;
    let proxies = load_proxies(cfg)?;
    let mut rows = Vec::new();
    for v in Variant::ALL {
        let run = run_variant(cfg, v, &model, &data, &proxies)?;
        write_run(&cfg.out.join(v.to_string()), &run)?;
        let r = &run.report;
        rows.push(VariantRow {
            variant: v,
            rounds: r.rounds,
            bytes: r.bytes,
            comm_seconds: r.comm_seconds,
            simulated_seconds: r.simulated_seconds,
            selected: r.selected.len(),
        });
    }
    write(
        &cfg.out.join(VARIANTS_FILE),
        &serde_json::to_string_pretty(&rows).expect("rows serialize"),
    )?;
    Ok(rows)
}

/// Cost of one secure forward pass of the kernel baseline over a single
/// example: `bench_layers` layers and `bench_heads` heads of the target.
/// Sharing the weights and the input is excluded.
pub fn bench(cfg: &ExperimentConfig, model: &TransformerWeights) -> Result<CostTable> {
    let w = if cfg.bench_layers == 0 {
        let mut w = strip_ffn(model);
        w.layers.clear();
        w.config.layers = 0;
        w.embedding = None;
        w
    } else {
        skeleton(model, ProxySpec::new(cfg.bench_layers, cfg.bench_heads, 1))?
    };
    let c = w.config;
    let ex = Dataset::synthetic(1, c.seq_len, c.model_dim, &mut stream(cfg.seed, "bench"));
    let arch = ProxyArch::kernels(&w);
    let sc = cfg.session(cfg.seed)?;
    let res = session::run(&sc, |p| {
        let lead = p.is_leader();
        let sp = SharedProxy::setup(p, "setup", arch, lead.then_some((&w, None)))?;
        let sd = SharedData::input(
            p,
            "input",
            (1, c.seq_len, c.model_dim),
            c.mask_value,
            (!lead).then_some(&ex),
        )?;
        *p.ledger_mut() = CostLedger::new(cfg.network);
        forward_entropy_mpc(p, &sp, &sd, &[0])?;
        Ok(())
    })?;
    Ok(res.ledger.report())
}

/// `bench`: the forward-pass cost table for a seeded model, as text and
/// JSON.
pub fn cmd_bench(cfg: &ExperimentConfig) -> Result<CostTable> {
    let (model, _) = generate(cfg)?;
    let table = bench(cfg, &model)?;
    ensure_dir(&cfg.out)?;
    write(&cfg.out.join(BENCH_FILE), &table.to_text())?;
    write(&cfg.out.join(BENCH_JSON_FILE), &table.to_json())?;
    Ok(table)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// `report`: renders whatever a previous run left in `dir`.
pub fn cmd_report(dir: &Path) -> Result<String> {
    let mut s = String::new();
    let mut found = false;
    if dir.join(REPORT_FILE).exists() {
        found = true;
        let r: RunReport = read_json(&dir.join(REPORT_FILE))?;
        let _ = writeln!(s, "variant {} seed {} over {} examples", r.variant, r.seed, r.examples);
        let _ = writeln!(s, "bootstrap {} points", r.bootstrap.len());
        for (i, ph) in r.phases.iter().enumerate() {
            let _ = writeln!(
                s,
                "phase {i}: proxy <{},{},{}> alpha {} kept {} of {} ({} comparisons)",
                ph.spec.layers, ph.spec.heads, ph.spec.hidden, ph.alpha, ph.kept, ph.candidates, ph.comparisons
            );
        }
        let _ = writeln!(s, "selected {} points", r.selected.len());
        if let Some(a) = r.appraisal {
            let _ = writeln!(s, "appraisal {a:?}");
        }
        let _ = writeln!(s, "reveal log digest {}", r.reveal_digest);
        let _ = writeln!(
            s,
            "cost: {} rounds, {} bytes, {:.3} s communication, {:.3} s end to end",
            r.rounds, r.bytes, r.comm_seconds, r.simulated_seconds
        );
        if let Some(sch) = r.schedule {
            let _ = writeln!(
                s,
                "scheduler: {:.3} s sequential, {:.3} s scheduled, speedup {:.3}, rounds {} -> {}",
                sch.sequential, sch.scheduled, sch.speedup, sch.rounds_before, sch.rounds_after
            );
        }
    }
    if dir.join(LEDGER_FILE).exists() {
        found = true;
        let t: CostTable = read_json(&dir.join(LEDGER_FILE))?;
        s.push('\n');
        s.push_str(&t.to_text());
    }
    if dir.join(VARIANTS_FILE).exists() {
        found = true;
        let rows: Vec<VariantRow> = read_json(&dir.join(VARIANTS_FILE))?;
        s.push('\n');
        s.push_str(&variant_table(&rows));
    }
    if dir.join(BENCH_JSON_FILE).exists() {
        found = true;
        let t: CostTable = read_json(&dir.join(BENCH_JSON_FILE))?;
        s.push_str("\nforward pass\n");
        s.push_str(&t.to_text());
    }
    if !found {
        return Err(Error::Config(format!("nothing to report in {}", dir.display())));
    }
    Ok(s)
}
