//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion is red. Runs on the synthetic fixture world at desk scale.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use hatexfer::bootstrap::{audit_against_gold, majority, BootstrappedDataset};
use hatexfer::corpus::{read_tsv, write_tsv, ClassCounts, Dataset, Example, Label};
use hatexfer::evaluation::{confusion, evaluate_labels, fmt2, metrics, ReportMeta};
use hatexfer::experiments::{desk_config, run_bootstrap, run_crosslingual, ExperimentConfig, Run, Stage};
use hatexfer::models::{
    build_bilstm_cnn, build_cnn, build_transformer_classifier, fine_tune, BiLstmConfig, CnnConfig, TrainedModel,
    TrainingHyperparams, TransformerConfig,
};
use hatexfer::nn::ParamId;
use hatexfer::synthetic::{write_world, Kind, Layout, World, WorldConfig, GERMEVAL_TEST_COUNTS, GERMEVAL_TRAIN_COUNTS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

struct Fixture {
    _tmp: TempDir,
    root: PathBuf,
    world: World,
    layout: Layout,
}

impl Fixture {
    fn new() -> Self {
        let tmp = TempDir::new().unwrap();
        let root = tmp.path().to_path_buf();
        let world = World::new(&WorldConfig::default());
        let layout = write_world(&world, &root.join("world"), 300).unwrap();
        Fixture {
            _tmp: tmp,
            root,
            world,
            layout,
        }
    }

    /// Desk config for `stage`, merged with `extra`, written next to the world.
    fn config(&self, file: &str, stage: Stage, seed: u64, extra: &str) -> PathBuf {
        let mut doc: toml::Table = toml::from_str(&desk_config(stage, seed)).unwrap();
        merge(&mut doc, toml::from_str(extra).unwrap());
        let path = self.root.join(file);
        fs::write(&path, toml::to_string(&doc).unwrap()).unwrap();
        path
    }
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

fn cli(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_hatexfer"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    let text = format!(
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    (out.status.code().unwrap_or(-1), text)
}

fn run_of(path: &Path, out: &Path) -> Run {
    let mut cfg = ExperimentConfig::load(path).unwrap();
    cfg.out_dir = out.to_path_buf();
    cfg.apply_seed(cfg.seed);
    Run::new(cfg).unwrap()
}

fn counts(path: &Path) -> ClassCounts {
    read_tsv(path).unwrap().class_counts()
}

/// Fine-grained label counts straight from a raw GermEval file.
fn raw_germeval_counts(path: &Path) -> [usize; 4] {
    let mut c = [0; 4];
    for line in fs::read_to_string(path).unwrap().lines() {
        match line.rsplit('\t').next().unwrap() {
            "OTHER" => c[0] += 1,
            "ABUSE" => c[1] += 1,
            "INSULT" => c[2] += 1,
            "PROFANITY" => c[3] += 1,
            other => panic!("unexpected label {other}"),
        }
    }
    c
}

fn criterion_1(fx: &Fixture) -> Outcome {
    let raw_train = raw_germeval_counts(&fx.layout.germeval_train);
    let raw_test = raw_germeval_counts(&fx.layout.germeval_test);
    let cfg = fx.config("c1.toml", Stage::Crosslingual, 1, "");
    let out = fx.root.join("c1");
    let t = Instant::now();
    let (code, text) = cli(&["prepare", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let secs = t.elapsed().as_secs_f64();
    if code != 0 {
        return outcome(false, format!("prepare exited {code}: {text}"));
    }
    let got = [
        counts(&out.join("prepared/de_train.tsv")),
        counts(&out.join("prepared/de_dev.tsv")),
        counts(&out.join("prepared/de_test.tsv")),
    ];
    let want = [ClassCounts::new(3345, 855), ClassCounts::new(642, 167), ClassCounts::new(2759, 773)];
    let pass = raw_train == GERMEVAL_TRAIN_COUNTS && raw_test == GERMEVAL_TEST_COUNTS && got == want && secs < 5.0;
    outcome(
        pass,
        format!(
            "DE-TRAIN {} DE-DEV {} DE-TEST {} in {secs:.2}s (inputs {raw_train:?} / {raw_test:?})",
            got[0], got[1], got[2]
        ),
    )
}

fn criterion_2(fx: &Fixture) -> Outcome {
    let de = fx.config("c2_de.toml", Stage::ImbalanceSweep, 1, "");
    let en = fx.config(
        "c2_en.toml",
        Stage::ImbalanceSweep,
        1,
        r#"
        [sampling]
        sweep_language = "en"
        sweep = ["ratio=2:1 mode=undersample", "ratio=1:1 mode=undersample", "ratio=1:1 mode=oversample"]
        "#,
    );
    let mut secs: f64 = 0.0;
    for (cfg, dir) in [(&de, "c2_de"), (&en, "c2_en")] {
        let out = fx.root.join(dir);
        let t = Instant::now();
        let (code, text) = cli(&["sample", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        secs = secs.max(t.elapsed().as_secs_f64());
        if code != 0 {
            return outcome(false, format!("sample exited {code}: {text}"));
        }
    }
    let rows = [
        ("c2_en", "EN-US[2:1]", 2562, 1281),
        ("c2_en", "EN-US[1:1]", 1281, 1281),
        ("c2_en", "EN-OS[1:1]", 9018, 9018),
        ("c2_de", "DE-OS[7:1]", 5985, 855),
        ("c2_de", "DE-US[2:1]", 1710, 855),
        ("c2_de", "DE-US[1:1]", 855, 855),
        ("c2_de", "DE-OS[1:1]", 3345, 3345),
    ];
    let en_train = counts(&fx.root.join("c2_en/prepared/en_train.tsv"));
    let mut pass = en_train == ClassCounts::new(9018, 1281) && secs < 5.0;
    let mut detail = format!("EN-TRAIN {en_train}");
    for (dir, name, nh, h) in rows {
        let got = counts(&fx.root.join(dir).join(format!("sampled/{name}.tsv")));
        pass &= got == ClassCounts::new(nh, h);
        detail += &format!(", {name} {got}");
    }
    outcome(pass, format!("{detail}; slowest run {secs:.2}s"))
}

fn criterion_3(fx: &Fixture) -> Outcome {
    let test = read_tsv(&fx.root.join("c1/prepared/de_test.tsv")).unwrap();
    let gold: Vec<Label> = test.iter().map(|e| e.label.unwrap()).collect();
    let pred = vec![Label::NoHate; gold.len()];
    let r = evaluate_labels(&gold, &pred, ReportMeta::new("all-noHate", "DE-TEST", "oracle")).unwrap();
    let got = [
        r.no_hate.precision,
        r.no_hate.recall,
        r.no_hate.f1,
        r.hate.precision,
        r.hate.recall,
        r.hate.f1,
        r.macro_avg.f1,
    ]
    .map(fmt2);
    let want = ["78.11", "100.00", "87.71", "0.00", "0.00", "0.00", "43.86"];
    outcome(
        got == want,
        format!(
            "noHate {}/{}/{} Hate {}/{}/{} macro-F1 {}",
            got[0], got[1], got[2], got[3], got[4], got[5], got[6]
        ),
    )
}

/// Route 1 writes the pairs as an ensemble output with votes and audits it
/// against gold; route 2 counts the label pairs directly.
fn criterion_4(fx: &Fixture) -> Outcome {
    let cells = [
        (Label::NoHate, Label::NoHate, 2688),
        (Label::NoHate, Label::Hate, 42),
        (Label::Hate, Label::NoHate, 573),
        (Label::Hate, Label::Hate, 34),
    ];
    let (mut gold, mut ens, mut votes) = (Vec::new(), Vec::new(), String::from("id\tvote1\tvote2\tvote3\tmajority\n"));
    let mut i = 0;
    for (g, p, n) in cells {
        for _ in 0..n {
            let id = format!("t7-{i}");
            gold.push(Example::new(id.clone(), format!("post {i}"), Some(g), "gold"));
            ens.push(Example::new(id.clone(), format!("post {i}"), Some(p), "ensemble"));
            // a 2:1 split keeps every majority honest
            let other = if p == Label::Hate { Label::NoHate } else { Label::Hate };
            let v = [p, other, p].map(Label::as_str);
            votes += &format!("{id}\t{}\t{}\t{}\t{}\n", v[0], v[1], v[2], p.as_str());
            i += 1;
        }
    }
    let dir = fx.root.join("c4");
    fs::create_dir_all(&dir).unwrap();
    write_tsv(&Dataset::new("rel", ens.clone()), &dir.join("rel.tsv")).unwrap();
    fs::write(dir.join("rel.votes.tsv"), votes).unwrap();
    let boot = BootstrappedDataset::load(&dir.join("rel.tsv"), &dir.join("rel.votes.tsv")).unwrap();
    let audit = audit_against_gold(&boot, &Dataset::new("gold", gold.clone())).unwrap();

    let g: Vec<Label> = gold.iter().map(|e| e.label.unwrap()).collect();
    let p: Vec<Label> = ens.iter().map(|e| e.label.unwrap()).collect();
    let direct = confusion(&g, &p).unwrap();
    let want = [[2688, 42], [573, 34]];
    let r = metrics(&audit.matrix, ReportMeta::new("ensemble", "DE-REL", "audit")).unwrap();
    let (prec, rec) = (fmt2(r.hate.precision), fmt2(r.hate.recall));
    let pass = audit.matrix.counts == want && direct.counts == want && prec == "44.74" && rec == "5.60";
    outcome(
        pass,
        format!(
            "audit {:?}, direct {:?}, Hate precision {prec} recall {rec}",
            audit.matrix.counts, direct.counts
        ),
    )
}

fn criterion_5() -> Outcome {
    let mut ok = 0;
    for bits in 0..8u8 {
        let votes = [0, 1, 2].map(|k| if bits >> k & 1 == 1 { Label::Hate } else { Label::NoHate });
        let hate = bits.count_ones();
        // three voters never tie
        assert_ne!(2 * hate, 3);
        let want = if hate >= 2 { Label::Hate } else { Label::NoHate };
        if majority(votes) == want {
            ok += 1;
        }
    }
    outcome(ok == 8, format!("{ok}/8 patterns resolve to the strict majority"))
}

fn small_world() -> World {
    World::new(&WorldConfig {
        dim: 8,
        neutral_concepts: 40,
        hate_concepts: 6,
        insult_concepts: 4,
        german_only_hate: 4,
        ..WorldConfig::default()
    })
}

fn gradient_batch(world: &World) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let ex = [Kind::EnHate, Kind::EnNoHate, Kind::EnNoHate, Kind::EnHate, Kind::EnNoHate]
        .into_iter()
        .enumerate()
        .map(|(i, k)| {
            let label = if k == Kind::EnHate { Label::Hate } else { Label::NoHate };
            Example::new(format!("g{i}"), world.sentence(k, &mut rng), Some(label), "grad")
        })
        .collect();
    Dataset::new("grad", ex)
}

/// Worst relative error over sampled scalars, and how many were checked.
fn gradient_error(model: &TrainedModel, data: &Dataset, weights: [f64; 2]) -> (f64, usize) {
    let (_, grads) = model.weighted_loss_and_gradient(data, weights).unwrap().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut picks: Vec<(ParamId, usize)> = Vec::new();
    for (id, _, t) in model.parameters().iter() {
        for _ in 0..4 {
            picks.push((id, rng.random_range(0..t.len())));
        }
    }
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for &(id, j) in &picks {
        let analytic = grads.get(id).map_or(0.0, |g| g.data[j]);
        let mut plus = model.clone();
        plus.parameters_mut().get_mut(id).data[j] += eps;
        let mut minus = model.clone();
        minus.parameters_mut().get_mut(id).data[j] -= eps;
        let lp = plus.weighted_loss_and_gradient(data, weights).unwrap().unwrap().0;
        let lm = minus.weighted_loss_and_gradient(data, weights).unwrap().unwrap().0;
        let numeric = (lp - lm) / (2.0 * eps);
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    (worst, picks.len())
}

fn criterion_6(fx: &Fixture) -> Outcome {
    let world = small_world();
    let table = world.english_table();
    let data = gradient_batch(&world);
    let cnn = build_cnn(
        &CnnConfig {
            filters_per_size: 4,
            dense_units: 5,
            max_len: 16,
            ..CnnConfig::default()
        },
        &table,
    )
    .unwrap();
    let bilstm = build_bilstm_cnn(
        &BiLstmConfig {
            recurrent_units: 3,
            conv_feature_maps: 4,
            dense_units: 5,
            max_len: 16,
            ..BiLstmConfig::default()
        },
        &table,
    )
    .unwrap();
    let (e_cnn, n_cnn) = gradient_error(&cnn, &data, [0.35, 0.65]);
    let (e_lstm, n_lstm) = gradient_error(&bilstm, &data, [0.8, 0.2]);

    let transformer = transformer(fx, 0.1);
    let mut worst_sum: f64 = 0.0;
    let texts = ["", "zzz", "the vola and kira", &world.sentence(Kind::DeAbuse, &mut ChaCha8Rng::seed_from_u64(3))];
    for m in [&cnn, &bilstm, &transformer] {
        for t in texts {
            let p = m.probabilities(t).unwrap();
            worst_sum = worst_sum.max((p[0] + p[1] - 1.0).abs());
        }
    }
    let pass = e_cnn < 1e-3 && e_lstm < 1e-3 && n_cnn >= 20 && n_lstm >= 20 && worst_sum < 1e-6;
    outcome(
        pass,
        format!(
            "CNN {n_cnn} params max rel err {e_cnn:.1e}, BiLSTM {n_lstm} params max rel err {e_lstm:.1e}, \
             softmax sum off by at most {worst_sum:.1e}"
        ),
    )
}

fn transformer(fx: &Fixture, dropout: f64) -> TrainedModel {
    build_transformer_classifier(&TransformerConfig {
        model_identifier: fx.layout.encoder.display().to_string(),
        max_subword_len: 32,
        dropout,
        ..TransformerConfig::default()
    })
    .unwrap()
}

fn accuracy(model: &TrainedModel, data: &Dataset) -> f64 {
    let pred = model.predict_labels(data).unwrap();
    let right = data.iter().zip(&pred).filter(|(e, p)| e.label == Some(**p)).count();
    100.0 * right as f64 / data.len() as f64
}

/// Epochs needed to reach 95% training accuracy, if within `budget`.
fn memorize(model: TrainedModel, data: &Dataset, lr: f64, budget: usize) -> (Option<usize>, f64) {
    let mut m = model;
    let mut acc = accuracy(&m, data);
    for epoch in 1..=budget {
        let hp = TrainingHyperparams {
            learning_rate: lr,
            batch_size: 8,
            epochs: 1,
            dropout: 0.0,
            seed: epoch as u64,
            ..TrainingHyperparams::default()
        };
        m = fine_tune(&m, data, &hp).unwrap();
        acc = accuracy(&m, data);
        if acc >= 95.0 {
            return (Some(epoch), acc);
        }
    }
    (None, acc)
}

fn criterion_7(fx: &Fixture) -> Outcome {
    let toy = fx.world.toy_set(32, 7);
    let table = fx.world.english_table();
    let cnn = build_cnn(
        &CnnConfig {
            max_len: 24,
            ..CnnConfig::default()
        },
        &table,
    )
    .unwrap();
    let bilstm = build_bilstm_cnn(
        &BiLstmConfig {
            max_len: 24,
            ..BiLstmConfig::default()
        },
        &table,
    )
    .unwrap();
    let runs = [
        ("CNN", memorize(cnn, &toy, 1e-3, 200), 200),
        ("BiLSTM", memorize(bilstm, &toy, 1e-3, 200), 200),
        ("transformer", memorize(transformer(fx, 0.0), &toy, 1e-3, 20), 20),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, (epochs, acc), budget) in runs {
        pass &= epochs.is_some();
        parts.push(match epochs {
            Some(e) => format!("{name} {acc:.1}% after {e} epochs"),
            None => format!("{name} only {acc:.1}% after {budget} epochs"),
        });
    }
    outcome(pass, parts.join(", "))
}

fn criterion_8(fx: &Fixture) -> Outcome {
    let cfg = fx.config("c8.toml", Stage::Crosslingual, 1, "");
    let run = run_of(&cfg, &fx.root.join("seed1"));
    let r = run_crosslingual(&run).unwrap();
    let best = r.reports.iter().map(|r| r.macro_avg.f1).fold(f64::MIN, f64::max);
    let hate_f1 = r
        .reports
        .iter()
        .find(|r| r.meta.model == "transformer")
        .map_or(0.0, |r| r.hate.f1);
    let scores: Vec<String> = r
        .reports
        .iter()
        .map(|r| format!("{} macro {} Hate F1 {}", r.meta.model, fmt2(r.macro_avg.f1), fmt2(r.hate.f1)))
        .collect();
    outcome(best > 43.86 && hate_f1 > 0.0, scores.join(", "))
}

fn criterion_9(fx: &Fixture) -> Outcome {
    let mut skews = Vec::new();
    let mut up = 0;
    let mut parts = Vec::new();
    for seed in [1u64, 2, 3] {
        let cfg = fx.config(&format!("c9_{seed}.toml"), Stage::Bootstrap, seed, "");
        let run = run_of(&cfg, &fx.root.join(format!("seed{seed}")));
        let r = run_bootstrap(&run).unwrap();
        let c = r.labelled[0].dataset.class_counts();
        let skew = c.no_hate as f64 / c.hate.max(1) as f64;
        let recall = |reports: &[hatexfer::evaluation::EvalReport]| {
            reports.iter().find(|x| x.meta.model == "bilstm").unwrap().hate.recall
        };
        let (before, after) = (recall(&r.before), recall(&r.after));
        if after > before {
            up += 1;
        }
        skews.push(skew);
        parts.push(format!(
            "seed {seed}: {c} = {skew:.1}:1, BiLSTM Hate recall {} -> {}",
            fmt2(before),
            fmt2(after)
        ));
    }
    let pass = skews.iter().all(|s| *s > 20.0) && up >= 2;
    outcome(pass, parts.join("; "))
}

/// Every file below `dir` keyed by relative path, with its bytes.
fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_10(fx: &Fixture) -> Outcome {
    let cfg = fx.config(
        "c10.toml",
        Stage::Crosslingual,
        4,
        r#"
        [sampling.max_train_examples]
        cnn = 400
        bilstm = 200
        transformer = 100
        [train.bilstm]
        epochs = 1
        "#,
    );
    let mut trees = Vec::new();
    for dir in ["c10_a", "c10_b"] {
        let out = fx.root.join(dir);
        for verb in ["sample", "train"] {
            let (code, text) = cli(&[verb, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
            if code != 0 {
                return outcome(false, format!("{verb} exited {code}: {text}"));
            }
        }
        trees.push(tree(&out));
    }
    let (a, b) = (&trees[0], &trees[1]);
    let sampled = a.keys().filter(|p| p.starts_with("sampled")).count();
    let reports = a.keys().filter(|p| p.starts_with("reports")).count();
    let differing: Vec<String> = a
        .keys()
        .chain(b.keys())
        .filter(|k| a.get(*k) != b.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let pass = differing.is_empty() && sampled > 0 && reports > 0;
    outcome(
        pass,
        if pass {
            format!("{} files identical ({sampled} sampled, {reports} reports)", a.len())
        } else {
            format!("differing: {}", differing.join(", "))
        },
    )
}

fn main() -> ExitCode {
    let fx = Fixture::new();
    let criteria: [(u8, &dyn Fn(&Fixture) -> Outcome); 10] = [
        (1, &criterion_1),
        (2, &criterion_2),
        (3, &criterion_3),
        (4, &criterion_4),
        (5, &|_| criterion_5()),
        (6, &criterion_6),
        (7, &criterion_7),
        (8, &criterion_8),
        (9, &criterion_9),
        (10, &criterion_10),
    ];
    let only: Option<Vec<u8>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut red = 0;
    for (n, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t = Instant::now();
        let o = check(&fx);
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} {verdict} [{:.1}s] {}", t.elapsed().as_secs_f64(), o.detail);
        if !o.pass {
            red += 1;
        }
    }
    if red == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{red} criterion(s) failed");
        ExitCode::FAILURE
    }
}
