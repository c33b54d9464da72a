//! Deterministic synthetic corpus generator. Each phoneme owns a fixed unit
//! prototype vector; words render as prototype frames repeated for sampled
//! durations with additive Gaussian noise; utterances concatenate words with
//! noise-only silence gaps, padded to a fixed frame count, with exact event
//! alignments recorded.
//!
//! All randomness flows from one seed through per-purpose derived streams,
//! and utterances use per-index derived seeds so rendering order cannot
//! change the output. Feature values are quantized to f32 precision at
//! creation so the JSONL files round-trip bit-exactly.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::detect::EventIndex;
use crate::embedding::{EmbeddingTable, PhonemeInventory, Term};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::grid::{CellGrid, EventSpan};
use crate::loss::TrainingTarget;
use crate::metrics::Trial;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub inventory_size: usize,
    pub lexicon_size: usize,
    /// Word length range in phonemes, inclusive.
    pub word_len: (usize, usize),
    pub words_per_utterance: (usize, usize),
    pub frames: usize,
    pub feature_dim: usize,
    /// Grid cells the corpus is generated for; `frames` must be a multiple.
    pub cells: usize,
    /// Per-phoneme duration range in frames, inclusive.
    pub phoneme_duration: (usize, usize),
    pub noise_sigma: f64,
    /// Silence gap range in frames, inclusive.
    pub silence_gap: (usize, usize),
    pub train_utterances: usize,
    pub validation_utterances: usize,
    pub test_utterances: usize,
    pub oov_terms: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            inventory_size: 40,
            lexicon_size: 50,
            word_len: (3, 8),
            words_per_utterance: (1, 3),
            frames: 96,
            feature_dim: 16,
            cells: 3,
            phoneme_duration: (4, 10),
            noise_sigma: 0.1,
            silence_gap: (2, 6),
            train_utterances: 2000,
            validation_utterances: 300,
            test_utterances: 300,
            oov_terms: 10,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |(lo, hi): (usize, usize)| lo >= 1 && lo <= hi;
        if self.inventory_size == 0
            || self.lexicon_size == 0
            || self.frames == 0
            || self.feature_dim == 0
            || self.cells == 0
            || self.train_utterances == 0
            || self.validation_utterances == 0
            || self.test_utterances == 0
        {
            return Err(Error::InvalidConfig(
                "corpus sizes and dimensions must be positive".into(),
            ));
        }
        if !range_ok(self.word_len)
            || !range_ok(self.words_per_utterance)
            || !range_ok(self.phoneme_duration)
            || self.silence_gap.0 > self.silence_gap.1
        {
            return Err(Error::InvalidConfig("empty sampling range".into()));
        }
        if self.frames % self.cells != 0 {
            return Err(Error::InvalidConfig(format!(
                "frames {} not divisible by cells {}",
                self.frames, self.cells
            )));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::InvalidConfig("noise sigma must be >= 0".into()));
        }
        if self.train_utterances < self.lexicon_size {
            return Err(Error::InvalidConfig(format!(
                "{} training utterances cannot cover a lexicon of {}",
                self.train_utterances, self.lexicon_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordEvent {
    pub term_id: String,
    pub span: EventSpan,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: FeatureMatrix,
    pub events: Vec<WordEvent>,
}

impl Utterance {
    pub fn contains_term(&self, term_id: &str) -> bool {
        self.events.iter().any(|e| e.term_id == term_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub inventory: PhonemeInventory,
    /// Per-phoneme prototype vectors, aligned with the inventory order.
    pub prototypes: Vec<Vec<f64>>,
    /// All terms, in-vocabulary first.
    pub lexicon: Vec<Term>,
    pub iv_terms: Vec<String>,
    pub oov_terms: Vec<String>,
    pub train: Vec<Utterance>,
    pub validation: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

/// Stable seed derivation for independent random streams.
pub fn derive_seed(root: u64, tag: &str) -> u64 {
    let mut h: u64 = root ^ 0x9e3779b97f4a7c15;
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h = h.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

const RENDER_RETRIES: usize = 50;

struct Renderer<'a> {
    config: &'a CorpusConfig,
    prototypes: &'a [Vec<f64>],
    phoneme_index: BTreeMap<&'a str, usize>,
}

impl<'a> Renderer<'a> {
    fn render(
        &self,
        id: &str,
        rng: &mut ChaCha8Rng,
        pool: &[&Term],
        forced: Option<&Term>,
    ) -> Result<Utterance> {
        let cfg = self.config;
        for _ in 0..RENDER_RETRIES {
            let n = rng.random_range(cfg.words_per_utterance.0..=cfg.words_per_utterance.1);
            let mut words: Vec<&Term> = (0..n)
                .map(|_| pool[rng.random_range(0..pool.len())])
                .collect();
            if let Some(f) = forced {
                let pos = rng.random_range(0..n);
                words[pos] = f;
            }
            let durations: Vec<Vec<usize>> = words
                .iter()
                .map(|w| {
                    w.prons[0]
                        .iter()
                        .map(|_| {
                            rng.random_range(cfg.phoneme_duration.0..=cfg.phoneme_duration.1)
                        })
                        .collect()
                })
                .collect();
            let lead = rng.random_range(cfg.silence_gap.0..=cfg.silence_gap.1);
            let gaps: Vec<usize> = (1..n)
                .map(|_| rng.random_range(cfg.silence_gap.0..=cfg.silence_gap.1))
                .collect();
            let word_frames: Vec<usize> = durations.iter().map(|d| d.iter().sum()).collect();
            let total = lead + word_frames.iter().sum::<usize>() + gaps.iter().sum::<usize>();
            if total > cfg.frames {
                continue; // resample the whole utterance
            }

            let mut features = FeatureMatrix::zeros(cfg.frames, cfg.feature_dim);
            for t in 0..cfg.frames {
                let row = features.row_mut(t);
                for v in row.iter_mut() {
                    let n: f64 = StandardNormal.sample(rng);
                    *v = cfg.noise_sigma * n;
                }
            }
            let mut events = Vec::with_capacity(n);
            let mut cursor = lead;
            for (wi, word) in words.iter().enumerate() {
                let start = cursor;
                for (pi, phoneme) in word.prons[0].iter().enumerate() {
                    let proto = &self.prototypes[self.phoneme_index[phoneme.as_str()]];
                    for _ in 0..durations[wi][pi] {
                        let row = features.row_mut(cursor);
                        for (v, p) in row.iter_mut().zip(proto) {
                            *v += p;
                        }
                        cursor += 1;
                    }
                }
                events.push(WordEvent {
                    term_id: word.id.clone(),
                    span: EventSpan::new(start as f64, cursor as f64)?,
                });
                if wi + 1 < n {
                    cursor += gaps[wi];
                }
            }
            for t in 0..cfg.frames {
                for v in features.row_mut(t).iter_mut() {
                    *v = quantize(*v);
                }
            }
            return Ok(Utterance {
                id: id.to_string(),
                features,
                events,
            });
        }
        Err(Error::CorpusGeneration(format!(
            "utterance {id}: sampled words never fit {} frames after {RENDER_RETRIES} attempts",
            cfg.frames
        )))
    }
}

pub fn generate(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;

    let width = (config.inventory_size.saturating_sub(1)).to_string().len().max(2);
    let symbols: Vec<String> = (0..config.inventory_size)
        .map(|i| format!("p{i:0width$}"))
        .collect();
    let inventory = PhonemeInventory::new(symbols)?;

    let mut proto_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "prototypes"));
    let prototypes: Vec<Vec<f64>> = (0..config.inventory_size)
        .map(|_| {
            let mut v: Vec<f64> = (0..config.feature_dim)
                .map(|_| StandardNormal.sample(&mut proto_rng))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x = quantize(*x / norm));
            v
        })
        .collect();

    let total_terms = config.lexicon_size + config.oov_terms;
    let id_width = (total_terms.saturating_sub(1)).to_string().len().max(3);
    let mut lex_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "lexicon"));
    let mut seen = HashSet::new();
    let mut lexicon = Vec::with_capacity(total_terms);
    let mut attempts = 0usize;
    while lexicon.len() < total_terms {
        attempts += 1;
        if attempts > total_terms * 1000 {
            return Err(Error::CorpusGeneration(
                "could not sample enough distinct words; enlarge the inventory".into(),
            ));
        }
        let len = lex_rng.random_range(config.word_len.0..=config.word_len.1);
        let seq: Vec<String> = (0..len)
            .map(|_| inventory.symbols()[lex_rng.random_range(0..inventory.len())].clone())
            .collect();
        if seen.insert(seq.join(" ")) {
            let id = format!("t{:0id_width$}", lexicon.len());
            lexicon.push(Term::single(id, seq));
        }
    }
    let iv_terms: Vec<String> = lexicon[..config.lexicon_size]
        .iter()
        .map(|t| t.id.clone())
        .collect();
    let oov_terms: Vec<String> = lexicon[config.lexicon_size..]
        .iter()
        .map(|t| t.id.clone())
        .collect();

    let renderer = Renderer {
        config,
        prototypes: &prototypes,
        phoneme_index: inventory
            .symbols()
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect(),
    };
    let iv_refs: Vec<&Term> = lexicon[..config.lexicon_size].iter().collect();
    let all_refs: Vec<&Term> = lexicon.iter().collect();
    let oov_refs: Vec<&Term> = lexicon[config.lexicon_size..].iter().collect();

    let render_split =
        |split: &str, pool: &[&Term], forced: &[Option<&Term>]| -> Result<Vec<Utterance>> {
            forced
                .iter()
                .enumerate()
                .map(|(j, f)| {
                    let id = format!("{split}_{j:05}");
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                        config.seed,
                        &format!("utt/{split}/{j}"),
                    ));
                    renderer.render(&id, &mut rng, pool, *f)
                })
                .collect()
        };

    // force coverage: the first training utterances each contain one
    // in-vocabulary word; eval splits cover the out-of-vocabulary words
    // first, then the in-vocabulary ones
    let train_forced: Vec<Option<&Term>> = (0..config.train_utterances)
        .map(|j| iv_refs.get(j).copied())
        .collect();
    let eval_forced = |count: usize| -> Vec<Option<&Term>> {
        (0..count)
            .map(|j| {
                if j < oov_refs.len() {
                    Some(oov_refs[j])
                } else {
                    iv_refs.get(j - oov_refs.len()).copied()
                }
            })
            .collect()
    };
    let train = render_split("train", &iv_refs, &train_forced)?;
    let validation = render_split(
        "validation",
        &all_refs,
        &eval_forced(config.validation_utterances),
    )?;
    let test = render_split("test", &all_refs, &eval_forced(config.test_utterances))?;

    let covered: BTreeSet<&str> = train
        .iter()
        .flat_map(|u| u.events.iter().map(|e| e.term_id.as_str()))
        .collect();
    for iv in &iv_terms {
        if !covered.contains(iv.as_str()) {
            return Err(Error::CorpusGeneration(format!(
                "in-vocabulary term {iv} missing from the training split"
            )));
        }
    }
    for oov in &oov_terms {
        if covered.contains(oov.as_str()) {
            return Err(Error::CorpusGeneration(format!(
                "out-of-vocabulary term {oov} leaked into the training split"
            )));
        }
    }

    Ok(Corpus {
        config: config.clone(),
        inventory,
        prototypes,
        lexicon,
        iv_terms,
        oov_terms,
        train,
        validation,
        test,
    })
}

/// One supervised tuple: the utterance (by index), the query term, and the
/// per-cell target mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub utterance_index: usize,
    pub term_id: String,
    pub target: TrainingTarget,
}

/// Build training tuples: one per (utterance, event) pair, plus absent-term
/// negatives with an all-negative mask at the given ratio (count relative to
/// the positives), drawn from `negative_pool`.
pub fn make_training_examples(
    utterances: &[Utterance],
    grid: &CellGrid,
    embeddings: &EmbeddingTable,
    negative_pool: &[String],
    negative_ratio: f64,
    seed: u64,
) -> Result<Vec<TrainingExample>> {
    let mut examples = Vec::new();
    let mut positive_refs = Vec::new();
    for (ui, utt) in utterances.iter().enumerate() {
        if utt.features.frames() as u32 != grid.total_frames() {
            return Err(Error::ShapeMismatch(format!(
                "utterance {} has {} frames, grid expects {}",
                utt.id,
                utt.features.frames(),
                grid.total_frames()
            )));
        }
        for event in &utt.events {
            let emb = embeddings.get(&event.term_id).ok_or_else(|| {
                Error::InvalidConfig(format!("no embedding for term {:?}", event.term_id))
            })?;
            let local = grid.to_cell_local(&event.span)?;
            examples.push(TrainingExample {
                utterance_index: ui,
                term_id: event.term_id.clone(),
                target: TrainingTarget::for_event(emb.clone(), grid.num_cells(), &local)?,
            });
            positive_refs.push(ui);
        }
    }

    let n_neg = (positive_refs.len() as f64 * negative_ratio).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "negatives"));
    for j in 0..n_neg {
        let ui = positive_refs[j % positive_refs.len()];
        let utt = &utterances[ui];
        let candidates: Vec<&String> = negative_pool
            .iter()
            .filter(|t| !utt.contains_term(t))
            .collect();
        if candidates.is_empty() {
            continue;
        }
        let term_id = candidates[rng.random_range(0..candidates.len())].clone();
        let emb = embeddings
            .get(&term_id)
            .ok_or_else(|| Error::InvalidConfig(format!("no embedding for term {term_id:?}")))?;
        examples.push(TrainingExample {
            utterance_index: ui,
            term_id,
            target: TrainingTarget::absent(emb.clone(), grid.num_cells()),
        });
    }
    Ok(examples)
}

/// Build balanced evaluation trials: for each term, every utterance that
/// contains it as a positive and a sampled equal-ratio set of utterances
/// that do not. Terms with no occurrences in the split are skipped and
/// reported.
pub fn make_trials(
    utterances: &[Utterance],
    term_ids: &[String],
    negative_ratio: f64,
    seed: u64,
) -> (Vec<Trial>, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "trials"));
    let mut trials = Vec::new();
    let mut skipped = Vec::new();
    for term in term_ids {
        let mut positives = Vec::new();
        let mut negative_pool = Vec::new();
        for utt in utterances {
            match utt.events.iter().find(|e| &e.term_id == term) {
                Some(event) => positives.push((utt, event.span)),
                None => negative_pool.push(utt),
            }
        }
        if positives.is_empty() {
            skipped.push(term.clone());
            continue;
        }
        let n_neg = ((positives.len() as f64 * negative_ratio).round() as usize)
            .min(negative_pool.len());
        negative_pool.partial_shuffle(&mut rng, n_neg);
        for (utt, span) in &positives {
            trials.push(Trial::positive(utt.id.clone(), term.clone(), *span));
        }
        for utt in &negative_pool[..n_neg] {
            trials.push(Trial::negative(utt.id.clone(), term.clone()));
        }
    }
    (trials, skipped)
}

/// Features keyed by utterance id, for trial scoring.
pub fn features_by_id(utterances: &[Utterance]) -> BTreeMap<String, &FeatureMatrix> {
    utterances
        .iter()
        .map(|u| (u.id.clone(), &u.features))
        .collect()
}

/// All reference events keyed by (utterance id, term id).
pub fn events_index(utterances: &[Utterance]) -> EventIndex {
    let mut index = EventIndex::new();
    for u in utterances {
        for e in &u.events {
            index
                .entry((u.id.clone(), e.term_id.clone()))
                .or_default()
                .push(e.span);
        }
    }
    index
}

#[derive(Serialize, Deserialize)]
struct EventRecord {
    term: String,
    start: f64,
    end: f64,
}

#[derive(Serialize, Deserialize)]
struct UtteranceRecord {
    id: String,
    features: Vec<Vec<f32>>,
    events: Vec<EventRecord>,
}

/// Write one split as JSON Lines with f32 feature payloads.
pub fn write_utterances(path: &Path, utterances: &[Utterance]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for u in utterances {
        let features: Vec<Vec<f32>> = (0..u.features.frames())
            .map(|t| u.features.row(t).iter().map(|v| *v as f32).collect())
            .collect();
        let record = UtteranceRecord {
            id: u.id.clone(),
            features,
            events: u
                .events
                .iter()
                .map(|e| EventRecord {
                    term: e.term_id.clone(),
                    start: e.span.start(),
                    end: e.span.end(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut f, &record)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_utterances(path: &Path) -> Result<Vec<Utterance>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: UtteranceRecord = serde_json::from_str(&line)?;
        let frames = record.features.len();
        let dim = record.features.first().map(|r| r.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(frames * dim);
        for row in &record.features {
            if row.len() != dim {
                return Err(Error::ShapeMismatch(format!(
                    "ragged feature rows in utterance {}",
                    record.id
                )));
            }
            data.extend(row.iter().map(|v| *v as f64));
        }
        let mut events = Vec::with_capacity(record.events.len());
        for e in record.events {
            events.push(WordEvent {
                term_id: e.term,
                span: EventSpan::new(e.start, e.end)?,
            });
        }
        out.push(Utterance {
            id: record.id,
            features: FeatureMatrix::from_data(frames, dim, data)?,
            events,
        });
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
pub struct TermSplits {
    pub iv: Vec<String>,
    pub oov: Vec<String>,
}

#[derive(Serialize, Deserialize)]
pub struct CorpusMeta {
    pub config: CorpusConfig,
    pub inventory: Vec<String>,
}

/// Persist a full corpus into a directory: meta, lexicon, term splits, and
/// the three utterance files.
pub fn save_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let meta = CorpusMeta {
        config: corpus.config.clone(),
        inventory: corpus.inventory.symbols().to_vec(),
    };
    serde_json::to_writer_pretty(
        std::io::BufWriter::new(std::fs::File::create(dir.join("corpus_meta.json"))?),
        &meta,
    )?;
    crate::embedding::write_lexicon(&dir.join("lexicon.jsonl"), &corpus.lexicon)?;
    serde_json::to_writer_pretty(
        std::io::BufWriter::new(std::fs::File::create(dir.join("term_splits.json"))?),
        &TermSplits {
            iv: corpus.iv_terms.clone(),
            oov: corpus.oov_terms.clone(),
        },
    )?;
    write_utterances(&dir.join("train.jsonl"), &corpus.train)?;
    write_utterances(&dir.join("validation.jsonl"), &corpus.validation)?;
    write_utterances(&dir.join("test.jsonl"), &corpus.test)?;
    Ok(())
}

/// Load a corpus directory written by [`save_corpus`]. Prototypes are not
/// persisted; they are regenerated from the stored seed.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let meta: CorpusMeta = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(
        dir.join("corpus_meta.json"),
    )?))?;
    let inventory = PhonemeInventory::new(meta.inventory)?;
    let mut proto_rng = ChaCha8Rng::seed_from_u64(derive_seed(meta.config.seed, "prototypes"));
    let prototypes: Vec<Vec<f64>> = (0..inventory.len())
        .map(|_| {
            let mut v: Vec<f64> = (0..meta.config.feature_dim)
                .map(|_| StandardNormal.sample(&mut proto_rng))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x = quantize(*x / norm));
            v
        })
        .collect();
    let lexicon = crate::embedding::read_lexicon(&dir.join("lexicon.jsonl"))?;
    let splits: TermSplits = serde_json::from_reader(std::io::BufReader::new(
        std::fs::File::open(dir.join("term_splits.json"))?,
    ))?;
    Ok(Corpus {
        config: meta.config,
        inventory,
        prototypes,
        lexicon,
        iv_terms: splits.iv,
        oov_terms: splits.oov,
        train: read_utterances(&dir.join("train.jsonl"))?,
        validation: read_utterances(&dir.join("validation.jsonl"))?,
        test: read_utterances(&dir.join("test.jsonl"))?,
    })
}
