use std::collections::BTreeMap;

use hatexfer::bootstrap::{
    audit_against_gold, bootstrap_round, bootstrap_rounds, ensemble_label, majority, BootstrapError,
    BootstrappedDataset, Ensemble,
};
use hatexfer::corpus::{Dataset, Example, Label};
use hatexfer::models::transformer::write_checkpoint;
use hatexfer::models::{
    build_bilstm_cnn, build_cnn, build_transformer_classifier, Architecture, BiLstmConfig, CnnConfig,
    TrainedModel, TrainingHyperparams, TransformerConfig,
};
use hatexfer::synthetic::{Kind, World, WorldConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

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

fn cnn(world: &World, seed: u64) -> TrainedModel {
    let cfg = CnnConfig {
        filters_per_size: 4,
        dense_units: 5,
        max_len: 16,
        seed,
        ..CnnConfig::default()
    };
    let mut m = build_cnn(&cfg, &world.english_table()).unwrap();
    m.set_inference_embeddings(world.german_table()).unwrap();
    m
}

fn bilstm(world: &World) -> TrainedModel {
    let cfg = BiLstmConfig {
        recurrent_units: 3,
        conv_feature_maps: 4,
        dense_units: 5,
        max_len: 16,
        ..BiLstmConfig::default()
    };
    let mut m = build_bilstm_cnn(&cfg, &world.english_table()).unwrap();
    m.set_inference_embeddings(world.german_table()).unwrap();
    m
}

fn transformer(world: &World, dir: &std::path::Path) -> TrainedModel {
    let (bert, vocab, tensors) = world.encoder(16, 1, 2, 3);
    let path = dir.join("tiny-multilingual");
    write_checkpoint(&path, &bert, &vocab, true, &tensors).unwrap();
    build_transformer_classifier(&TransformerConfig {
        model_identifier: path.display().to_string(),
        max_subword_len: 32,
        ..TransformerConfig::default()
    })
    .unwrap()
}

fn mixed_ensemble(world: &World, dir: &std::path::Path) -> Ensemble {
    Ensemble::new(vec![cnn(world, 0), bilstm(world), transformer(world, dir)]).unwrap()
}

/// German posts with gold labels, like DE-TRAIN.
fn german(world: &World, n: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let counts = [(Kind::DeOther, n - n / 4), (Kind::DeAbuse, n / 4)];
    let examples = world
        .corpus(&counts, &mut rng)
        .into_iter()
        .enumerate()
        .map(|(i, (k, text))| {
            let label = if k == Kind::DeAbuse { Label::Hate } else { Label::NoHate };
            Example::new(format!("de-{i}"), text, Some(label), "test")
        })
        .collect();
    Dataset::new("de_train", examples)
}

fn hyperparams() -> BTreeMap<Architecture, TrainingHyperparams> {
    let hp = TrainingHyperparams {
        learning_rate: 1e-2,
        batch_size: 4,
        epochs: 1,
        dropout: 0.0,
        ..TrainingHyperparams::default()
    };
    Architecture::ALL.iter().map(|&a| (a, hp.clone())).collect()
}

#[test]
fn identical_members_reproduce_single_model_predictions() {
    let world = small_world();
    let m = cnn(&world, 5);
    let data = german(&world, 24);
    let ens = Ensemble::new(vec![m.clone(), m.clone(), m.clone()]).unwrap();
    let boot = ensemble_label(&ens, &data);
    let expected = m.predict_labels(&data).unwrap();
    let got: Vec<Label> = boot.dataset.iter().map(|e| e.label.unwrap()).collect();
    assert_eq!(got, expected);
}

#[test]
fn ensemble_needs_exactly_three_members() {
    let world = small_world();
    let err = Ensemble::new(vec![cnn(&world, 0), cnn(&world, 1)]).unwrap_err();
    assert!(matches!(err, BootstrapError::MemberCount(2)), "{err}");
}

#[test]
fn output_keeps_text_and_votes_agree_with_labels() {
    let world = small_world();
    let tmp = TempDir::new().unwrap();
    let ens = mixed_ensemble(&world, tmp.path());
    let data = german(&world, 20);
    let boot = ensemble_label(&ens, &data);

    assert_eq!(boot.dataset.len() + boot.dropped.len(), data.len());
    assert_eq!(boot.votes.len(), boot.dataset.len());
    assert_eq!(boot.dataset.name, "de_train_ensemble");
    for (out, vote) in boot.dataset.iter().zip(&boot.votes) {
        let original = data.iter().find(|e| e.id == out.id).unwrap();
        assert_eq!(out.text, original.text);
        assert_eq!(vote.id, out.id);
        assert_eq!(vote.label, majority(vote.votes));
        assert_eq!(out.label, Some(vote.label));
        assert_eq!(boot.shadow_gold(&out.id), original.label);
    }
    for (m, member) in ens.members().iter().enumerate() {
        let own = member.predict_labels(&data).unwrap();
        for (v, l) in boot.votes.iter().zip(own) {
            assert_eq!(v.votes[m], l);
        }
    }
}

#[test]
fn audit_of_gold_output_is_diagonal() {
    let world = small_world();
    let tmp = TempDir::new().unwrap();
    let ens = mixed_ensemble(&world, tmp.path());
    let data = german(&world, 16);
    let boot = ensemble_label(&ens, &data);
    let gold = Dataset::new("gold", boot.dataset.examples.clone());
    let audit = audit_against_gold(&boot, &gold).unwrap();
    let c = audit.matrix.counts;
    assert_eq!(c[0][1] + c[1][0], 0);
    assert_eq!(c[0][0] + c[1][1], boot.dataset.len() as u64);
    assert_eq!(audit.unlabelled_gold, 0);

    let stranger = Dataset::new(
        "gold",
        vec![Example::new("elsewhere", "x", Some(Label::Hate), "test")],
    );
    match audit_against_gold(&boot, &stranger) {
        Err(BootstrapError::IdMismatch(ids)) => assert_eq!(ids.len(), boot.dataset.len()),
        other => panic!("expected an id mismatch, got {other:?}"),
    }
}

#[test]
fn empty_input_leaves_members_untouched() {
    let world = small_world();
    let tmp = TempDir::new().unwrap();
    let ens = mixed_ensemble(&world, tmp.path());
    let empty = Dataset::new("empty", Vec::new());
    let (after, boot) = bootstrap_round(&ens, &empty, &hyperparams()).unwrap();
    assert!(boot.dataset.is_empty());
    for (a, b) in after.members().iter().zip(ens.members()) {
        assert_eq!(a.parameters(), b.parameters());
    }
}

#[test]
fn missing_hyperparameters_are_reported() {
    let world = small_world();
    let tmp = TempDir::new().unwrap();
    let ens = mixed_ensemble(&world, tmp.path());
    let mut hp = hyperparams();
    hp.remove(&Architecture::Bilstm);
    let err = bootstrap_round(&ens, &german(&world, 8), &hp).unwrap_err();
    assert!(matches!(err, BootstrapError::MissingHyperparams(Architecture::Bilstm)));
}

#[test]
fn fine_tuned_vector_members_read_the_target_table() {
    let world = small_world();
    let tmp = TempDir::new().unwrap();
    let ens = mixed_ensemble(&world, tmp.path());
    let (after, _) = bootstrap_round(&ens, &german(&world, 12), &hyperparams()).unwrap();
    let de = world.german_table();
    for m in &after.members()[..2] {
        assert_eq!(m.embeddings(), Some(&de));
    }
    assert_ne!(after.members()[0].parameters(), ens.members()[0].parameters());
}

#[test]
fn rounds_are_deterministic_from_a_saved_ensemble() {
    let world = small_world();
    let tmp = TempDir::new().unwrap();
    let ens = mixed_ensemble(&world, tmp.path());
    let dir = tmp.path().join("ensemble");
    ens.save(&dir).unwrap();
    let data = german(&world, 12);
    let run = || {
        let loaded = Ensemble::load(&dir).unwrap();
        bootstrap_rounds(&loaded, &data, &hyperparams(), 2).unwrap()
    };
    let (a, sets_a) = run();
    let (b, sets_b) = run();
    assert_eq!(sets_a.len(), 2);
    assert_eq!(sets_a, sets_b);
    for (x, y) in a.members().iter().zip(b.members()) {
        assert_eq!(x.parameters(), y.parameters());
    }
}

#[test]
fn labelled_set_and_votes_round_trip() {
    let world = small_world();
    let tmp = TempDir::new().unwrap();
    let ens = mixed_ensemble(&world, tmp.path());
    let boot = ensemble_label(&ens, &german(&world, 10));
    let (tsv, votes) = (tmp.path().join("rel.tsv"), tmp.path().join("rel.votes.tsv"));
    boot.save(&tsv, &votes).unwrap();
    let back = BootstrappedDataset::load(&tsv, &votes).unwrap();
    let key = |d: &Dataset| d.iter().map(|e| (e.id.clone(), e.text.clone(), e.label)).collect::<Vec<_>>();
    assert_eq!(key(&back.dataset), key(&boot.dataset));
    assert_eq!(back.votes, boot.votes);

    // a sidecar row whose majority disagrees with its votes is rejected
    let text = std::fs::read_to_string(&votes).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut cols: Vec<String> = lines[1].split('\t').map(String::from).collect();
    cols[4] = if cols[4] == "Hate" { "noHate".into() } else { "Hate".into() };
    lines[1] = cols.join("\t");
    std::fs::write(&votes, lines.join("\n") + "\n").unwrap();
    assert!(matches!(
        BootstrappedDataset::load(&tsv, &votes),
        Err(BootstrapError::Votes { .. })
    ));
}
