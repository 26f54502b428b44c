//! A seeded stand-in world for the real corpora and pretrained resources.
//!
//! Words of both languages are generated from concept vectors; translation
//! pairs share a concept and so land close together in the aligned
//! embedding space. Hate is signalled by a set of shared "hate concepts"
//! and, in German only, by concepts with no English counterpart. The rate at
//! which German hate uses shared cues models the transfer gap between the
//! two corpora.
//!
//! The generated files follow the on-disk layouts of the real resources, so
//! every reader and CLI verb runs unchanged on them.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::RawPost;
use crate::corpus::{Dataset, Example, Label};
use crate::embeddings::EmbeddingTable;
use crate::models::transformer::{init_encoder, write_checkpoint, CLS_TOKEN, PAD_TOKEN, SEP_TOKEN, UNK_TOKEN};
use crate::models::{BertConfig, ModelError};
use crate::nn::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub dim: usize,
    pub neutral_concepts: usize,
    pub hate_concepts: usize,
    pub insult_concepts: usize,
    pub german_only_hate: usize,
    /// Per-dimension noise between a concept and its words.
    pub noise: f64,
    /// Weight of the direction all shared hate concepts lean towards.
    pub hate_cluster: f64,
    pub min_words: usize,
    pub max_words: usize,
    /// Chance that an English hate sentence carries a hate concept.
    pub en_hate_cue: f64,
    /// Chance that a German hate sentence carries a shared hate concept.
    pub de_shared_cue: f64,
    /// Chance that a German hate sentence carries a German-only hate word.
    pub de_only_cue: f64,
    /// Chance that a non-hate sentence mentions a hate concept anyway.
    pub false_cue: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            dim: 32,
            neutral_concepts: 300,
            hate_concepts: 30,
            insult_concepts: 20,
            german_only_hate: 30,
            noise: 0.05,
            hate_cluster: 0.7,
            min_words: 6,
            max_words: 14,
            en_hate_cue: 0.9,
            de_shared_cue: 0.08,
            de_only_cue: 0.85,
            false_cue: 0.01,
            seed: 7,
        }
    }
}

/// Sentence classes of the two source corpora before harmonisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    EnNoHate,
    EnHate,
    EnRelation,
    EnSkip,
    DeOther,
    DeAbuse,
    DeInsult,
    DeProfanity,
}

impl Kind {
    pub fn raw_label(self) -> &'static str {
        match self {
            Kind::EnNoHate => "noHate",
            Kind::EnHate => "hate",
            Kind::EnRelation => "relation",
            Kind::EnSkip => "skip",
            Kind::DeOther => "OTHER",
            Kind::DeAbuse => "ABUSE",
            Kind::DeInsult => "INSULT",
            Kind::DeProfanity => "PROFANITY",
        }
    }

    pub fn coarse(self) -> &'static str {
        match self {
            Kind::DeOther => "OTHER",
            _ => "OFFENSE",
        }
    }

    fn german(self) -> bool {
        matches!(self, Kind::DeOther | Kind::DeAbuse | Kind::DeInsult | Kind::DeProfanity)
    }
}

/// Function words with their translations; they double as frequent
/// neutral concepts and let German lines pass the language filter.
const FUNCTION_WORDS: &[(&str, &str)] = &[
    ("the", "der"),
    ("and", "und"),
    ("is", "ist"),
    ("not", "nicht"),
    ("we", "wir"),
    ("they", "sie"),
    ("it", "es"),
    ("with", "mit"),
    ("also", "auch"),
    ("here", "hier"),
    ("very", "sehr"),
    ("always", "immer"),
];

const EN_SYLLABLES: &[&str] = &[
    "ba", "de", "ki", "lo", "mu", "ra", "se", "ti", "vo", "na", "pe", "gar", "fen", "mor", "tal",
];
const EN_ENDINGS: &[&str] = &["", "s", "ed", "er", "ly", "ing", "th"];
const DE_SYLLABLES: &[&str] = &[
    "ach", "ei", "sch", "ber", "gen", "ver", "au", "kra", "lin", "mot", "sto", "wa", "zie", "hel",
];
const DE_ENDINGS: &[&str] = &["", "en", "ung", "lich", "keit", "er", "chen"];

/// Ground-truth vocabulary of one language.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    pub function: Vec<String>,
    pub neutral: Vec<String>,
    pub hate: Vec<String>,
    pub insult: Vec<String>,
    /// Only populated for German.
    pub own_hate: Vec<String>,
}

impl Lexicon {
    fn all(&self) -> impl Iterator<Item = &String> {
        self.function
            .iter()
            .chain(&self.neutral)
            .chain(&self.hate)
            .chain(&self.insult)
            .chain(&self.own_hate)
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub cfg: WorldConfig,
    pub en: Lexicon,
    pub de: Lexicon,
    en_vectors: Vec<Vec<f64>>,
    de_vectors: Vec<Vec<f64>>,
    /// Concept vector behind every word of both lexicons, keyed by word.
    concepts: std::collections::HashMap<String, Vec<f64>>,
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let n = Normal::new(0.0, 1.0).expect("valid normal");
    normalize((0..dim).map(|_| n.sample(rng)).collect())
}

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}

fn jitter(rng: &mut ChaCha8Rng, v: &[f64], sigma: f64) -> Vec<f64> {
    let n = Normal::new(0.0, sigma).expect("valid normal");
    v.iter().map(|x| x + n.sample(rng)).collect()
}

fn fresh_word(
    rng: &mut ChaCha8Rng,
    syllables: &[&str],
    endings: &[&str],
    taken: &mut HashSet<String>,
) -> String {
    loop {
        let k = rng.random_range(2..=3);
        let mut w: String = (0..k).map(|_| *syllables.choose(rng).expect("non-empty")).collect();
        w.push_str(endings.choose(rng).expect("non-empty"));
        if taken.insert(w.clone()) {
            return w;
        }
    }
}

impl World {
    pub fn new(cfg: &WorldConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut taken: HashSet<String> = FUNCTION_WORDS
            .iter()
            .flat_map(|(e, d)| [e.to_string(), d.to_string()])
            .collect();
        let mut en = Lexicon {
            function: Vec::new(),
            neutral: Vec::new(),
            hate: Vec::new(),
            insult: Vec::new(),
            own_hate: Vec::new(),
        };
        let mut de = en.clone();
        let mut concepts = std::collections::HashMap::new();
        let (mut en_vectors, mut de_vectors) = (Vec::new(), Vec::new());
        let sigma = cfg.noise;

        let hate_dir = unit(&mut rng, cfg.dim);
        let mut add_pair = |rng: &mut ChaCha8Rng, e: String, d: String, slot: fn(&mut Lexicon) -> &mut Vec<String>, pull: f64| {
            let r = unit(rng, cfg.dim);
            let c = normalize(
                hate_dir
                    .iter()
                    .zip(&r)
                    .map(|(h, r)| pull * h + (1.0 - pull * pull).sqrt() * r)
                    .collect(),
            );
            en_vectors.push(jitter(rng, &c, sigma));
            de_vectors.push(jitter(rng, &c, sigma));
            concepts.insert(e.clone(), c.clone());
            concepts.insert(d.clone(), c);
            slot(&mut en).push(e);
            slot(&mut de).push(d);
        };
        for (e, d) in FUNCTION_WORDS {
            add_pair(&mut rng, e.to_string(), d.to_string(), |l| &mut l.function, 0.0);
        }
        let groups: [(usize, fn(&mut Lexicon) -> &mut Vec<String>, f64); 3] = [
            (cfg.neutral_concepts, |l| &mut l.neutral, 0.0),
            (cfg.hate_concepts, |l| &mut l.hate, cfg.hate_cluster),
            (cfg.insult_concepts, |l| &mut l.insult, 0.0),
        ];
        for (n, slot, pull) in groups {
            for _ in 0..n {
                let e = fresh_word(&mut rng, EN_SYLLABLES, EN_ENDINGS, &mut taken);
                let d = fresh_word(&mut rng, DE_SYLLABLES, DE_ENDINGS, &mut taken);
                add_pair(&mut rng, e, d, slot, pull);
            }
        }
        for _ in 0..cfg.german_only_hate {
            let d = fresh_word(&mut rng, DE_SYLLABLES, DE_ENDINGS, &mut taken);
            let c = unit(&mut rng, cfg.dim);
            de_vectors.push(jitter(&mut rng, &c, sigma));
            concepts.insert(d.clone(), c);
            de.own_hate.push(d);
        }
        World {
            cfg: cfg.clone(),
            en,
            de,
            en_vectors,
            de_vectors,
            concepts,
        }
    }

    pub fn english_table(&self) -> EmbeddingTable {
        let rows = self.en.all().cloned().zip(self.en_vectors.iter().cloned());
        EmbeddingTable::from_vectors(self.cfg.dim, rows).expect("generated vectors are valid")
    }

    pub fn german_table(&self) -> EmbeddingTable {
        let rows = self.de.all().cloned().zip(self.de_vectors.iter().cloned());
        EmbeddingTable::from_vectors(self.cfg.dim, rows).expect("generated vectors are valid")
    }

    fn filler(&self, lex: &Lexicon, rng: &mut ChaCha8Rng) -> String {
        if rng.random::<f64>() < 0.35 {
            lex.function.choose(rng).expect("non-empty").clone()
        } else {
            lex.neutral.choose(rng).expect("non-empty").clone()
        }
    }

    pub fn sentence(&self, kind: Kind, rng: &mut ChaCha8Rng) -> String {
        let cfg = &self.cfg;
        let lex = if kind.german() { &self.de } else { &self.en };
        let n = rng.random_range(cfg.min_words..=cfg.max_words);
        let mut words: Vec<String> = (0..n).map(|_| self.filler(lex, rng)).collect();
        let mut cues: Vec<String> = Vec::new();
        let mut cue = |p: f64, pool: &[String], rng: &mut ChaCha8Rng| {
            if !pool.is_empty() && rng.random::<f64>() < p {
                cues.push(pool.choose(rng).expect("non-empty").clone());
            }
        };
        match kind {
            Kind::EnHate => {
                cue(cfg.en_hate_cue, &lex.hate, rng);
                cue(0.3, &lex.hate, rng);
            }
            Kind::EnRelation => cue(cfg.en_hate_cue * 0.5, &lex.hate, rng),
            Kind::EnNoHate | Kind::EnSkip | Kind::DeOther => {
                cue(cfg.false_cue, &lex.hate, rng);
                cue(0.05, &lex.insult, rng);
            }
            Kind::DeAbuse => {
                cue(cfg.de_shared_cue, &lex.hate, rng);
                cue(cfg.de_only_cue, &lex.own_hate, rng);
                cue(0.3, &lex.own_hate, rng);
            }
            Kind::DeInsult | Kind::DeProfanity => {
                cue(cfg.false_cue, &lex.hate, rng);
                cue(0.9, &lex.insult, rng);
            }
        }
        for c in cues {
            let at = rng.random_range(0..=words.len());
            words.insert(at, c);
        }
        let end = if rng.random::<f64>() < 0.7 { "." } else { "!" };
        format!("{}{end}", words.join(" "))
    }

    /// Sentences of the given kinds with their counts, interleaved at random.
    pub fn corpus(&self, counts: &[(Kind, usize)], rng: &mut ChaCha8Rng) -> Vec<(Kind, String)> {
        let mut kinds: Vec<Kind> = counts
            .iter()
            .flat_map(|&(k, n)| std::iter::repeat_n(k, n))
            .collect();
        kinds.shuffle(rng);
        kinds.into_iter().map(|k| (k, self.sentence(k, rng))).collect()
    }

    /// Balanced labelled English set, `n / 2` per class.
    pub fn toy_set(&self, n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let counts = [(Kind::EnNoHate, n / 2), (Kind::EnHate, n - n / 2)];
        let examples = self
            .corpus(&counts, &mut rng)
            .into_iter()
            .enumerate()
            .map(|(i, (k, text))| {
                let label = if k == Kind::EnHate { Label::Hate } else { Label::NoHate };
                Example::new(format!("toy-{i}"), text, Some(label), "toy")
            })
            .collect();
        Dataset::new("toy", examples)
    }

    /// Forum thread posts: German paragraphs mixed with the debris the
    /// cleaning step removes.
    pub fn forum_posts(&self, posts: usize, rng: &mut ChaCha8Rng) -> Vec<RawPost> {
        let mut out = Vec::with_capacity(posts);
        for p in 0..posts {
            let lines = rng.random_range(1..=4);
            let mut paragraphs = Vec::new();
            for _ in 0..lines {
                let kind = if rng.random::<f64>() < 0.03 { Kind::DeAbuse } else { Kind::DeOther };
                paragraphs.push(self.sentence(kind, rng));
            }
            match rng.random_range(0..8) {
                0 => paragraphs.insert(0, "Hallo zusammen,".into()),
                1 => paragraphs.push("Gruß".into()),
                2 => paragraphs.push(format!("- {}", self.sentence(Kind::DeOther, rng))),
                3 => paragraphs.push(self.sentence(Kind::EnNoHate, rng)),
                4 => paragraphs.push("12.03.2015, 14:22".into()),
                5 => {
                    let s = self.sentence(Kind::DeOther, rng);
                    paragraphs.push(format!("{} und", s.trim_end_matches(['.', '!'])));
                }
                _ => {}
            }
            out.push(RawPost::new(format!("post{p}"), paragraphs.join("\n")));
        }
        out
    }

    /// Small encoder checkpoint whose word embeddings follow the concept
    /// space, standing in for multilingual pretraining.
    pub fn encoder(&self, hidden: usize, layers: usize, heads: usize, seed: u64) -> (BertConfig, Vec<String>, Vec<(String, Tensor)>) {
        let mut vocab: Vec<String> = [PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN, ".", "!", ",", "?"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        vocab.extend(self.en.all().cloned());
        vocab.extend(self.de.all().cloned());
        let bert = BertConfig {
            vocab_size: vocab.len(),
            hidden_size: hidden,
            num_hidden_layers: layers,
            num_attention_heads: heads,
            intermediate_size: 2 * hidden,
            max_position_embeddings: 64,
            type_vocab_size: 2,
            layer_norm_eps: 1e-12,
            hidden_act: "gelu".into(),
            languages: vec!["en".into(), "de".into()],
            extra: serde_json::Map::new(),
        };
        let mut tensors = init_encoder(&bert, seed);
        // Stand-in for pretraining: uniform attention that copies values, so
        // [CLS] ends up summarising the words of the sentence.
        for (name, t) in tensors.iter_mut() {
            let copy = ["attention.self.value.weight", "attention.output.dense.weight", "pooler.dense.weight"];
            let (r, c) = (t.rows, t.cols);
            if name.ends_with("attention.self.query.weight") || name.ends_with("attention.self.key.weight") {
                *t = Tensor::zeros(r, c);
            } else if copy.iter().any(|n| name.ends_with(n)) {
                *t = Tensor::zeros(r, c);
                for k in 0..r.min(c) {
                    t.row_mut(k)[k] = 1.0;
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let proj = Tensor::glorot(self.cfg.dim, hidden, &mut rng);
        let word = tensors
            .iter_mut()
            .find(|(n, _)| n == "embeddings.word_embeddings.weight")
            .map(|(_, t)| t)
            .expect("encoder has word embeddings");
        for (row, token) in vocab.iter().enumerate() {
            let Some(c) = self.concepts.get(token) else { continue };
            let c = jitter(&mut rng, c, self.cfg.noise);
            for (j, out) in word.row_mut(row).iter_mut().enumerate() {
                *out = (0..self.cfg.dim).map(|i| c[i] * proj.get(i, j)).sum::<f64>();
            }
        }
        (bert, vocab, tensors)
    }
}

/// Paths of a generated fixture tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub root: PathBuf,
    pub stormfront_files: PathBuf,
    pub stormfront_metadata: PathBuf,
    pub germeval_train: PathBuf,
    pub germeval_test: PathBuf,
    pub forum_dump: PathBuf,
    pub en_vectors: PathBuf,
    pub de_vectors: PathBuf,
    pub encoder: PathBuf,
}

impl Layout {
    pub fn under(root: &Path) -> Self {
        Layout {
            root: root.to_path_buf(),
            stormfront_files: root.join("stormfront/all_files"),
            stormfront_metadata: root.join("stormfront/annotations_metadata.csv"),
            germeval_train: root.join("germeval/germeval2018.training.txt"),
            germeval_test: root.join("germeval/germeval2018.test.txt"),
            forum_dump: root.join("forum/thread.jsonl"),
            en_vectors: root.join("vectors/wiki.multi.en.vec"),
            de_vectors: root.join("vectors/wiki.multi.de.vec"),
            encoder: root.join("encoders/bert-base-multilingual-cased"),
        }
    }
}

/// Original class counts of the English corpus: noHate, hate, relation, skip.
pub const STORMFRONT_COUNTS: [usize; 4] = [9488, 1196, 168, 92];
/// Official German training file: other, abuse, insult, profanity.
pub const GERMEVAL_TRAIN_COUNTS: [usize; 4] = [3321, 1022, 595, 71];
pub const GERMEVAL_TEST_COUNTS: [usize; 4] = [2330, 773, 381, 48];
/// Abuse samples among the final 809 lines of the training file.
pub const GERMEVAL_DEV_ABUSE: usize = 167;

fn io_err(path: &Path, e: std::io::Error) -> ModelError {
    ModelError::Io {
        path: path.display().to_string(),
        source: e,
    }
}

fn create_parent(path: &Path) -> Result<(), ModelError> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).map_err(|e| io_err(p, e))?;
    }
    Ok(())
}

fn write_lines(path: &Path, lines: impl IntoIterator<Item = String>) -> Result<(), ModelError> {
    create_parent(path)?;
    let f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for l in lines {
        writeln!(w, "{l}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn germeval_kinds(c: [usize; 4]) -> [(Kind, usize); 4] {
    [
        (Kind::DeOther, c[0]),
        (Kind::DeAbuse, c[1]),
        (Kind::DeInsult, c[2]),
        (Kind::DeProfanity, c[3]),
    ]
}

fn germeval_line((kind, text): (Kind, String)) -> String {
    format!("{text}\t{}\t{}", kind.coarse(), kind.raw_label())
}

/// Write the whole fixture tree under `root`. `forum_posts` controls the
/// size of the crawl dump.
pub fn write_world(world: &World, root: &Path, forum_posts: usize) -> Result<Layout, ModelError> {
    let layout = Layout::under(root);
    let mut rng = ChaCha8Rng::seed_from_u64(world.cfg.seed ^ 0xf17e);

    let [nh, h, rel, skip] = STORMFRONT_COUNTS;
    let counts = [(Kind::EnNoHate, nh), (Kind::EnHate, h), (Kind::EnRelation, rel), (Kind::EnSkip, skip)];
    std::fs::create_dir_all(&layout.stormfront_files).map_err(|e| io_err(&layout.stormfront_files, e))?;
    let mut meta = vec!["file_id,user_id,subforum_id,num_contexts,label".to_string()];
    for (i, (kind, text)) in world.corpus(&counts, &mut rng).into_iter().enumerate() {
        let id = format!("{}_{}", 12834217 + i, i % 3 + 1);
        let p = layout.stormfront_files.join(format!("{id}.txt"));
        std::fs::write(&p, format!("{text}\n")).map_err(|e| io_err(&p, e))?;
        meta.push(format!("{id},{},{},0,{}", 570000 + i % 97, 1346 + i % 5, kind.raw_label()));
    }
    write_lines(&layout.stormfront_metadata, meta)?;

    // the last 809 lines of the official training file become the dev split
    let dev_size = crate::corpus::GERMAN_DEV_SIZE;
    let t = GERMEVAL_TRAIN_COUNTS;
    let dev_abuse = GERMEVAL_DEV_ABUSE;
    let dev_rest = dev_size - dev_abuse;
    // distribute the non-hate dev lines proportionally over the three kinds
    let non_hate = t[0] + t[2] + t[3];
    let dev_insult = dev_rest * t[2] / non_hate;
    let dev_prof = dev_rest * t[3] / non_hate;
    let dev_other = dev_rest - dev_insult - dev_prof;
    let head = germeval_kinds([t[0] - dev_other, t[1] - dev_abuse, t[2] - dev_insult, t[3] - dev_prof]);
    let tail = germeval_kinds([dev_other, dev_abuse, dev_insult, dev_prof]);
    let mut train_lines: Vec<String> = world.corpus(&head, &mut rng).into_iter().map(germeval_line).collect();
    train_lines.extend(world.corpus(&tail, &mut rng).into_iter().map(germeval_line));
    write_lines(&layout.germeval_train, train_lines)?;
    let test = germeval_kinds(GERMEVAL_TEST_COUNTS);
    write_lines(
        &layout.germeval_test,
        world.corpus(&test, &mut rng).into_iter().map(germeval_line),
    )?;

    let posts = world.forum_posts(forum_posts, &mut rng);
    write_lines(
        &layout.forum_dump,
        posts
            .iter()
            .map(|p| serde_json::to_string(p).expect("post serializes")),
    )?;

    create_parent(&layout.en_vectors)?;
    world.english_table().save(&layout.en_vectors)?;
    world.german_table().save(&layout.de_vectors)?;

    let (bert, vocab, tensors) = world.encoder(32, 2, 4, world.cfg.seed);
    write_checkpoint(&layout.encoder, &bert, &vocab, true, &tensors)?;
    Ok(layout)
}
