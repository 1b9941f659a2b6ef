use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mpcsieve::config::ExperimentConfig;

const SMALL: &str = "\
[model]
seq_len = 8
examples = 16
[selection]
phases = 1,1,2,0.4; 1,2,4,0.5
bootstrap_fraction = 0.25
[train]
samples = 512
epochs = 1
";

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpcsieve"))
        .arg("--config")
        .arg(dir.join("c.cfg"))
        .arg("--out")
        .arg(dir.join("o"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = run(dir, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn workdir(cfg: &str) -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("c.cfg"), cfg).unwrap();
    d
}

#[test]
fn gen_is_reproducible() {
    let a = workdir(SMALL);
    let b = workdir(SMALL);
    ok(a.path(), &["gen", "--seed", "5"]);
    ok(b.path(), &["gen", "--seed", "5"]);
    for f in ["model.bin", "dataset.bin"] {
        assert_eq!(
            fs::read(a.path().join("o").join(f)).unwrap(),
            fs::read(b.path().join("o").join(f)).unwrap()
        );
    }
    ok(b.path(), &["gen", "--seed", "6"]);
    assert_ne!(
        fs::read(a.path().join("o/dataset.bin")).unwrap(),
        fs::read(b.path().join("o/dataset.bin")).unwrap()
    );
}

#[test]
fn train_writes_one_mlp_per_site() {
    let d = workdir(SMALL);
    ok(d.path(), &["gen"]);
    ok(d.path(), &["train-approx"]);
    // 2l+1 per phase: layers 1 and 1.
    let n = fs::read_dir(d.path().join("o/mlp")).unwrap().count();
    assert_eq!(n, 3 + 3);
    assert!(d.path().join("o/proxy_0.bin").exists());
    assert!(d.path().join("o/proxy_1.bin").exists());
}

#[test]
fn select_is_deterministic_and_in_range() {
    let d = workdir(SMALL);
    ok(d.path(), &["gen"]);
    ok(d.path(), &["train-approx"]);
    let first = ok(d.path(), &["select", "--variant", "full"]);
    let idx1 = fs::read_to_string(d.path().join("o/indices.txt")).unwrap();
    let second = ok(d.path(), &["select", "--variant", "full"]);
    let idx2 = fs::read_to_string(d.path().join("o/indices.txt")).unwrap();
    assert_eq!(first, second);
    assert_eq!(idx1, idx2);
    let ids: Vec<usize> = idx1.lines().map(|l| l.parse().unwrap()).collect();
    assert!(!ids.is_empty());
    assert!(ids.iter().all(|&i| i < 16));
    let mut dedup = ids.clone();
    dedup.sort_unstable();
    dedup.dedup();
    assert_eq!(dedup.len(), ids.len());
    assert!(d.path().join("o/timeline.txt").exists());
    assert_eq!(ok(d.path(), &["report"]), first);
}

#[test]
fn compare_shows_mlps_cut_traffic() {
    let d = workdir(SMALL);
    ok(d.path(), &["gen"]);
    ok(d.path(), &["train-approx"]);
    let table = ok(d.path(), &["select", "--compare"]);
    let bytes = |v: &str| -> u64 {
        let row = table
            .lines()
            .find(|l| l.split_whitespace().next() == Some(v))
            .unwrap_or_else(|| panic!("no row {v} in\n{table}"));
        row.split_whitespace().nth(2).unwrap().parse().unwrap()
    };
    assert!(bytes("PM") < bytes("P"), "{table}");
    assert!(bytes("PMT") <= bytes("PM") * 2, "{table}");
}

#[test]
fn bench_percentages_sum_to_one_hundred() {
    let d = workdir(SMALL);
    let text = ok(d.path(), &["bench"]);
    let rows: Vec<(String, f64)> = text
        .lines()
        .skip(1)
        .filter_map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            let pct = f.last()?.strip_suffix('%')?.parse().ok()?;
            Some((f[0].to_string(), pct))
        })
        .collect();
    let (totals, tags): (Vec<_>, Vec<_>) = rows.into_iter().partition(|(t, _)| t == "total");
    let sum: f64 = tags.iter().map(|(_, p)| p).sum();
    assert!((sum - 100.0).abs() < 0.05, "{text}");
    assert_eq!(totals.len(), 1);
    let top = tags.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    assert_eq!(top.0, "attn_softmax", "{text}");
}

#[test]
fn bench_without_layers_has_no_attention_rows() {
    let d = workdir("[bench]\nlayers = 0\n");
    let text = ok(d.path(), &["bench"]);
    assert!(!text.contains("attn_"), "{text}");
    assert!(!text.contains("layernorm"), "{text}");
}

#[test]
fn exit_codes_follow_the_error_category() {
    let d = workdir("[model]\ndim = 10\nheads = 4\n");
    let o = run(d.path(), &["gen"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("divisible"));

    let d = workdir(SMALL);
    let o = run(d.path(), &["select"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.bin"));

    let o = run(d.path(), &["gen", "--variant", "nope"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(d.path(), &["--help"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn written_config_parses_back() {
    let d = workdir(SMALL);
    ok(d.path(), &["gen", "--seed", "77"]);
    let echoed = fs::read_to_string(d.path().join("o/config.txt")).unwrap();
    let cfg = ExperimentConfig::parse(&echoed).unwrap();
    assert_eq!(cfg.seed, 77);
    assert_eq!(cfg.model.seq_len, 8);
    assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
}
