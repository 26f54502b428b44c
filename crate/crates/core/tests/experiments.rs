use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use hatexfer::corpus::{read_tsv, write_tsv, Dataset};
use hatexfer::evaluation::EvalReport;
use hatexfer::experiments::{
    desk_config, run_bootstrap, run_crosslingual, run_imbalance_sweep, ArtifactMeta, ExperimentConfig, Run, Stage,
};
use hatexfer::sampling::{target_counts, SamplingSpec};
use hatexfer::synthetic::{write_world, World, WorldConfig};
use tempfile::TempDir;

/// Synthetic fixture tree plus a config file for `stage`, edited by `tweak`.
fn fixture(stage: Stage, tweak: impl FnOnce(&mut toml::Table)) -> (TempDir, PathBuf) {
    let tmp = TempDir::new().unwrap();
    write_world(&World::new(&WorldConfig::default()), &tmp.path().join("world"), 40).unwrap();
    let mut doc: toml::Table = toml::from_str(&desk_config(stage, 1)).unwrap();
    let tiny: toml::Table = toml::from_str(
        r#"
        architectures = ["cnn"]
        [cnn]
        filters_per_size = 2
        [bilstm]
        recurrent_units = 2
        conv_feature_maps = 2
        dense_units = 2
        [sampling.max_train_examples]
        cnn = 50
        bilstm = 50
        transformer = 50
        [train.cnn]
        epochs = 1
        [train.bilstm]
        epochs = 1
        [train.transformer]
        epochs = 1
        "#,
    )
    .unwrap();
    merge(&mut doc, tiny);
    tweak(&mut doc);
    let path = tmp.path().join("config.toml");
    fs::write(&path, toml::to_string(&doc).unwrap()).unwrap();
    (tmp, path)
}

fn merge(into: &mut toml::Table, from: toml::Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(a)), toml::Value::Table(b)) => merge(a, b),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

fn set(doc: &mut toml::Table, text: &str) {
    merge(doc, toml::from_str(text).unwrap());
}

fn run_of(path: &Path) -> Run {
    let mut cfg = ExperimentConfig::load(path).unwrap();
    cfg.apply_seed(cfg.seed);
    Run::new(cfg).unwrap()
}

fn cli(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_hatexfer"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn read_report(path: &Path) -> EvalReport {
    EvalReport::from_json(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Relative paths of every file below `dir`, sorted.
fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn relative_paths_resolve_against_the_config_file() {
    let (tmp, path) = fixture(Stage::Crosslingual, |_| {});
    let cfg = ExperimentConfig::load(&path).unwrap();
    assert_eq!(cfg.out_dir, tmp.path().join("runs/crosslingual"));
    assert_eq!(
        cfg.data.germeval_test.as_deref(),
        Some(tmp.path().join("world/germeval/germeval2018.test.txt").as_path())
    );
    cfg.validate().unwrap();
}

#[test]
fn validation_failures_exit_with_two() {
    let (tmp, path) = fixture(Stage::Crosslingual, |d| set(d, "[data]\ngermeval_test = \"missing.txt\"\n"));
    let (code, _, err) = cli(&["prepare", "--config", path.to_str().unwrap()]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("germeval_test"), "{err}");

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "stage = \"crosslingual\"\nunknown_key = 1\n[data]\n").unwrap();
    assert_eq!(cli(&["prepare", "--config", bad.to_str().unwrap()]).0, 2);

    let (code, _, _) = cli(&["prepare"]);
    assert_eq!(code, 2);

    let (_keep, spec) = fixture(Stage::ImbalanceSweep, |d| set(d, "[sampling]\nsweep = [\"ratio=0:1 mode=oversample\"]\n"));
    assert_eq!(cli(&["sample", "--config", spec.to_str().unwrap()]).0, 2);
}

#[test]
fn runtime_failures_exit_with_one() {
    let (tmp, path) = fixture(Stage::Crosslingual, |_| {});
    fs::write(tmp.path().join("world/germeval/germeval2018.test.txt"), "no tabs here\n").unwrap();
    let (code, _, err) = cli(&["prepare", "--config", path.to_str().unwrap()]);
    assert_eq!(code, 1, "{err}");
}

#[test]
fn prepare_and_sample_write_datasets_with_run_metadata() {
    let (tmp, path) = fixture(Stage::ImbalanceSweep, |_| {});
    let out = tmp.path().join("out");
    let (code, stdout, err) = cli(&["sample", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "9"]);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("DE-OS[7:1]\t5985/855"), "{stdout}");
    assert!(stdout.contains("EN-OS[1:1]\t9018/9018"), "{stdout}");

    let de_train = read_tsv(&out.join("prepared/de_train.tsv")).unwrap();
    let sampled = read_tsv(&out.join("sampled/DE-US[2:1].tsv")).unwrap();
    assert_eq!(sampled.class_counts().to_string(), "1710/855");
    let meta: ArtifactMeta =
        serde_json::from_str(&fs::read_to_string(out.join("sampled/DE-US[2:1].meta.json")).unwrap()).unwrap();
    assert_eq!(meta.seed, 9);
    assert_eq!(meta.counts, Some(sampled.class_counts()));
    assert_eq!(meta.detail.as_deref(), Some("ratio=2:1 mode=undersample seed=9"));
    let expected = target_counts(de_train.class_counts(), &"ratio=2:1 mode=undersample".parse::<SamplingSpec>().unwrap(), "de").unwrap();
    assert_eq!(sampled.class_counts(), expected);
}

#[test]
fn crosslingual_smoke_run_emits_one_report_per_architecture() {
    let (tmp, path) = fixture(Stage::Crosslingual, |d| {
        set(d, "architectures = [\"cnn\", \"bilstm\", \"transformer\"]\n")
    });
    let run = run_of(&path);
    let result = run_crosslingual(&run).unwrap();
    assert_eq!(result.reports.len(), 3);
    let out = tmp.path().join("runs/crosslingual");
    for arch in ["cnn", "bilstm", "transformer"] {
        let r = read_report(&out.join(format!("reports/crosslingual/{arch}.json")));
        assert_eq!(r.meta.model, arch);
        assert_eq!(r.meta.dataset, "DE-TEST");
        assert_eq!(r.meta.seed, Some(1));
        assert_eq!(r.meta.config_hash.as_deref(), Some(run.hash.as_str()));
        let m = r.matrix.counts;
        assert_eq!(m[0][0] + m[0][1], 2759);
        assert_eq!(m[1][0] + m[1][1], 773);
    }
    assert!(out.join("reports/crosslingual/comparison.csv").exists());
    let capped = read_tsv(&out.join("sampled/EN-OS[1:1]-sub50.tsv")).unwrap();
    assert_eq!(capped.class_counts().to_string(), "25/25");
    for (_, _, dir) in &result.models {
        let meta: ArtifactMeta = serde_json::from_str(&fs::read_to_string(dir.join("run.json")).unwrap()).unwrap();
        assert_eq!(meta.config_hash, run.hash);
    }
}

#[test]
fn reruns_are_byte_identical_and_reuse_checkpoints() {
    let (tmp, path) = fixture(Stage::Crosslingual, |_| {});
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        let (code, _, err) = cli(&["train", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(code, 0, "{err}");
    }
    let fa = files(&a);
    assert_eq!(fa, files(&b));
    for f in &fa {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{}", f.display());
    }

    let report = a.join("reports/crosslingual/cnn.json");
    let before = fs::read(&report).unwrap();
    let cache = fa.iter().find(|f| f.ends_with(".done")).unwrap();
    let stamp = fs::metadata(a.join(cache)).unwrap().modified().unwrap();
    let (code, _, err) = cli(&["train", "--config", path.to_str().unwrap(), "--out", a.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    assert!(err.is_empty() || !err.contains("training"), "{err}");
    assert_eq!(fs::metadata(a.join(cache)).unwrap().modified().unwrap(), stamp);
    assert_eq!(fs::read(&report).unwrap(), before);
}

#[test]
fn a_different_seed_changes_hash_and_sampling() {
    let (tmp, path) = fixture(Stage::Crosslingual, |_| {});
    let mut one = ExperimentConfig::load(&path).unwrap();
    let mut two = one.clone();
    one.apply_seed(1);
    two.apply_seed(2);
    assert_ne!(one.config_hash(), two.config_hash());
    assert_ne!(one.cnn.seed, two.cnn.seed);
    for (seed, out) in [(1, "s1"), (2, "s2")] {
        let (code, _, err) = cli(&["sample", "--config", path.to_str().unwrap(), "--seed", &seed.to_string(), "--out", tmp.path().join(out).to_str().unwrap()]);
        assert_eq!(code, 0, "{err}");
    }
    let s1 = fs::read(tmp.path().join("s1/sampled/DE-US[1:1].tsv")).unwrap();
    let s2 = fs::read(tmp.path().join("s2/sampled/DE-US[1:1].tsv")).unwrap();
    assert_ne!(s1, s2);
}

#[test]
fn sweep_trains_every_cell_on_counts_matching_its_spec() {
    let (tmp, path) = fixture(Stage::ImbalanceSweep, |_| {});
    let run = run_of(&path);
    let reports = run_imbalance_sweep(&run).unwrap();
    assert_eq!(reports.len(), 4);
    let stages: Vec<&str> = reports.iter().map(|r| r.meta.stage.as_str()).collect();
    assert_eq!(stages, ["DE-OS[7:1]", "DE-US[2:1]", "DE-US[1:1]", "DE-OS[1:1]"]);
    for r in &reports {
        assert_eq!(r.meta.dataset, "DE-TEST");
    }
    let out = tmp.path().join("runs/imbalance_sweep");
    let capped = read_tsv(&out.join("sampled/DE-OS[7:1]-sub50.tsv")).unwrap();
    // floor per class: 50 * 7/8 and 50 * 1/8
    assert_eq!(capped.class_counts().to_string(), "43/6");

    let (_keep, single) = fixture(Stage::ImbalanceSweep, |d| set(d, "[sampling]\nsweep = [\"ratio=1:1 mode=undersample\"]\n"));
    assert_eq!(run_imbalance_sweep(&run_of(&single)).unwrap().len(), 1);
}

#[test]
fn report_verb_compares_saved_reports() {
    let (tmp, path) = fixture(Stage::ImbalanceSweep, |_| {});
    run_imbalance_sweep(&run_of(&path)).unwrap();
    let dir = tmp.path().join("runs/imbalance_sweep/reports");
    let (code, stdout, err) = cli(&["report", "--reports", dir.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("DE-US[1:1]"), "{stdout}");
    let (code, _, _) = cli(&["report", "--reports", tmp.path().join("nothing").to_str().unwrap()]);
    assert_eq!(code, 2);
}

#[test]
fn bootstrap_on_an_empty_file_leaves_scores_unchanged() {
    let (tmp, path) = fixture(Stage::Bootstrap, |d| {
        set(d, "[bootstrap]\nunlabeled = \"empty.tsv\"\nlr_grid = []\n")
    });
    write_tsv(&Dataset::new("empty", Vec::new()), &tmp.path().join("empty.tsv")).unwrap();
    let fixture_run = run_of(&path);
    assert!(fixture_run.cfg.architectures.len() == 1);
    // an ensemble needs three members
    let err = run_bootstrap(&fixture_run).unwrap_err();
    assert_eq!(err.exit_code(), 1);

    let (tmp, path) = fixture(Stage::Bootstrap, |d| {
        set(
            d,
            "architectures = [\"cnn\", \"bilstm\", \"transformer\"]\n[bootstrap]\nunlabeled = \"empty.tsv\"\n",
        )
    });
    write_tsv(&Dataset::new("empty", Vec::new()), &tmp.path().join("empty.tsv")).unwrap();
    let result = run_bootstrap(&run_of(&path)).unwrap();
    assert_eq!(result.before.len(), 3);
    for (b, a) in result.before.iter().zip(&result.after) {
        assert_eq!(b.matrix, a.matrix);
        assert_eq!(b.macro_avg, a.macro_avg);
    }
    assert!(result.audit.is_none());
}

#[test]
fn encode_verb_prints_indices() {
    let (tmp, _) = fixture(Stage::Crosslingual, |_| {});
    let emb = tmp.path().join("world/vectors/wiki.multi.de.vec");
    let (code, stdout, err) = cli(&["encode", "--emb", emb.to_str().unwrap(), "--max-len", "4", "--text", "der und qqq"]);
    assert_eq!(code, 0, "{err}");
    let v: serde_json::Value = serde_json::from_str(stdout.trim()).unwrap();
    assert_eq!(v["true_length"], 3);
    assert_eq!(v["indices"].as_array().unwrap().len(), 4);
    assert_eq!(v["indices"][2], 1);
    assert_eq!(v["indices"][3], 0);
    assert_eq!(cli(&["encode", "--emb", emb.to_str().unwrap(), "--max-len", "0"]).0, 2);
}
