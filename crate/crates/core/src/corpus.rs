//! Vocabulary, text ingestion, batching and the synthetic template corpus.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Token/id bijection with the four reserved ids first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from an ordered list of non-reserved tokens.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens.into_iter().map(Into::into));
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens: all, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Maps words to ids, unknown words to [`UNK`].
    pub fn encode<S: AsRef<str>>(&self, sentence: &[S]) -> Vec<usize> {
        sentence
            .iter()
            .map(|w| self.id(w.as_ref()).unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]).to_string())
            .collect()
    }

    /// SHA-256 over the newline-joined token list, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    /// One token per line in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED.len() || lines[..RESERVED.len()] != RESERVED {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("vocabulary must start with {RESERVED:?}"),
            });
        }
        Vocabulary::from_tokens(lines[RESERVED.len()..].iter().copied())
    }
}

/// Keeps the `max_size - 4` most frequent tokens; ties go to the
/// lexicographically smaller token.
pub fn build_vocab<S: AsRef<str>>(sentences: &[Vec<S>], max_size: usize) -> Result<Vocabulary> {
    if max_size <= RESERVED.len() {
        return Err(Error::config("max_vocab", format!("must exceed 4, got {max_size}")));
    }
    if sentences.iter().all(|s| s.is_empty()) {
        return Err(Error::Input("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in sentences.iter().flatten() {
        let w = w.as_ref();
        if !RESERVED.contains(&w) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_size - RESERVED.len());
    Vocabulary::from_tokens(ranked.into_iter().map(|(w, _)| w))
}

/// Reads one whitespace-tokenised sentence per line, skipping blank lines.
pub fn load_text(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect::<Vec<_>>())
        .filter(|s| !s.is_empty())
        .collect())
}

pub fn write_text<S: AsRef<str>>(path: &Path, sentences: &[Vec<S>]) -> Result<()> {
    let mut out = String::new();
    for s in sentences {
        let words: Vec<&str> = s.iter().map(AsRef::as_ref).collect();
        out.push_str(&words.join(" "));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Train/dev/test sentences as id sequences.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CorpusSplit {
    pub train: Vec<Vec<usize>>,
    pub dev: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
    pub source: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "dev" | "valid" => Ok(SplitName::Dev),
            "test" => Ok(SplitName::Test),
            other => Err(Error::config("split", format!("unknown split `{other}`"))),
        }
    }
}

impl CorpusSplit {
    pub fn get(&self, name: SplitName) -> &[Vec<usize>] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Dev => &self.dev,
            SplitName::Test => &self.test,
        }
    }

    /// Checks that no sentence is empty and every id is below `vocab_size`.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        for (name, part) in [("train", &self.train), ("dev", &self.dev), ("test", &self.test)] {
            for (i, s) in part.iter().enumerate() {
                if s.is_empty() {
                    return Err(Error::Input(format!("{name} sentence {i} is empty")));
                }
                if let Some(&bad) = s.iter().find(|&&id| id >= vocab_size) {
                    return Err(Error::Index {
                        op: "corpus",
                        index: bad,
                        size: vocab_size,
                    });
                }
            }
        }
        let train: HashSet<&Vec<usize>> = self.train.iter().collect();
        let dev: HashSet<&Vec<usize>> = self.dev.iter().collect();
        let shared = self.dev.iter().filter(|s| train.contains(s)).count()
            + self.test.iter().filter(|s| train.contains(s) || dev.contains(s)).count();
        if shared > 0 {
            return Err(Error::Input(format!(
                "splits must be disjoint; {shared} dev/test sentences also appear in an earlier split"
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of one split's id sequences.
    pub fn hash(&self, name: SplitName) -> String {
        hash_sentences(self.get(name))
    }
}

pub fn hash_sentences(sentences: &[Vec<usize>]) -> String {
    let mut h = Sha256::new();
    for s in sentences {
        for id in s {
            h.update((*id as u64).to_le_bytes());
        }
        h.update(u64::MAX.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Parameters of the template-grammar generator.
///
/// Every sentence picks a template (its skeleton of function words and
/// part-of-speech slots) and a topic; each content slot is then filled from
/// the topic's word pool for that part of speech. Words are independent given
/// `(template, topic)`, so the pair is the latent factor a model can recover.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_templates: usize,
    pub n_topics: usize,
    pub words_per_slot: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_templates: 4,
            n_topics: 8,
            words_per_slot: 4,
            min_len: 8,
            max_len: 12,
            n_train: 2000,
            n_dev: 200,
            n_test: 200,
            seed: 7,
        }
    }
}

const MAX_REDRAWS: usize = 10_000;

const FUNCTION_WORDS: [&str; 24] = [
    "the", "a", "one", "some", "this", "that", "every", "no", "of", "and", "with", "in", "on",
    "to", "very", "is", "was", "near", "by", "for", "at", "from", "then", "but",
];
const OPENERS: usize = 8;
const POS_TAGS: [&str; 3] = ["noun", "verb", "adj"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Function(usize),
    Content(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSentence {
    pub words: Vec<String>,
    pub template: usize,
    pub topic: usize,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub vocab: Vocabulary,
    pub split: CorpusSplit,
    pub train: Vec<LabeledSentence>,
    pub dev: Vec<LabeledSentence>,
    pub test: Vec<LabeledSentence>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_templates < 2 {
            return Err(Error::config("synthetic.n_templates", "need at least 2 templates"));
        }
        if self.n_templates > OPENERS {
            return Err(Error::config(
                "synthetic.n_templates",
                format!("at most {OPENERS} templates are supported"),
            ));
        }
        if self.n_topics == 0 || self.words_per_slot == 0 {
            return Err(Error::config("synthetic", "topics and words per slot must be positive"));
        }
        if self.min_len < 2 || self.min_len > self.max_len {
            return Err(Error::config(
                "synthetic.min_len",
                format!("need 2 <= min_len <= max_len, got {}..{}", self.min_len, self.max_len),
            ));
        }
        if self.n_train == 0 {
            return Err(Error::config("synthetic.n_train", "must be positive"));
        }
        Ok(())
    }
}

fn content_word(topic: usize, pos: usize, i: usize) -> String {
    format!("{}{}{}", POS_TAGS[pos], topic, (b'a' + i as u8 % 26) as char)
}

fn build_templates(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<Slot>> {
    (0..spec.n_templates)
        .map(|t| {
            let len = rng.random_range(spec.min_len..=spec.max_len);
            let mut slots = vec![Slot::Function(t)];
            let mut content = 0;
            for j in 1..len {
                // keep at least one content slot and never two function words in a row
                let prev_function = matches!(slots.last(), Some(Slot::Function(_)));
                let force_content = prev_function || (j == len - 1 && content == 0);
                if force_content || rng.random::<f64>() < 0.7 {
                    slots.push(Slot::Content(rng.random_range(0..POS_TAGS.len())));
                    content += 1;
                } else {
                    slots.push(Slot::Function(rng.random_range(OPENERS..FUNCTION_WORDS.len())));
                }
            }
            slots
        })
        .collect()
}

/// Generates a labelled corpus and its vocabulary (reserved ids followed by
/// every word the grammar can emit, sorted).
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let templates = build_templates(spec, &mut rng);

    let mut words = BTreeSet::new();
    for slot in templates.iter().flatten() {
        match *slot {
            Slot::Function(f) => {
                words.insert(FUNCTION_WORDS[f].to_string());
            }
            Slot::Content(pos) => {
                for topic in 0..spec.n_topics {
                    for i in 0..spec.words_per_slot {
                        words.insert(content_word(topic, pos, i));
                    }
                }
            }
        }
    }
    let vocab = Vocabulary::from_tokens(words)?;

    let mut draw_one = || -> LabeledSentence {
        let template = rng.random_range(0..spec.n_templates);
        let topic = rng.random_range(0..spec.n_topics);
        let words = templates[template]
            .iter()
            .map(|slot| match *slot {
                Slot::Function(f) => FUNCTION_WORDS[f].to_string(),
                Slot::Content(pos) => content_word(topic, pos, rng.random_range(0..spec.words_per_slot)),
            })
            .collect();
        LabeledSentence {
            words,
            template,
            topic,
        }
    };
    let train: Vec<LabeledSentence> = (0..spec.n_train).map(|_| draw_one()).collect();
    let mut seen: HashSet<Vec<String>> = train.iter().map(|s| s.words.clone()).collect();
    // dev and test redraw any sentence already used by an earlier split
    let mut fresh = |n: usize, seen: &mut HashSet<Vec<String>>| -> Result<Vec<LabeledSentence>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let mut attempts = 0;
            let s = loop {
                let s = draw_one();
                if !seen.contains(&s.words) {
                    break s;
                }
                attempts += 1;
                if attempts == MAX_REDRAWS {
                    return Err(Error::config(
                        "synthetic",
                        "grammar too small to keep train, dev and test disjoint",
                    ));
                }
            };
            seen.insert(s.words.clone());
            out.push(s);
        }
        Ok(out)
    };
    let dev = fresh(spec.n_dev, &mut seen)?;
    let test = fresh(spec.n_test, &mut seen)?;
    let encode = |part: &[LabeledSentence]| -> Vec<Vec<usize>> {
        part.iter().map(|s| vocab.encode(&s.words)).collect()
    };
    let split = CorpusSplit {
        train: encode(&train),
        dev: encode(&dev),
        test: encode(&test),
        source: format!(
            "synthetic(templates={}, topics={}, words_per_slot={}, len={}..={}, seed={})",
            spec.n_templates, spec.n_topics, spec.words_per_slot, spec.min_len, spec.max_len, spec.seed
        ),
    };
    Ok(SyntheticCorpus {
        vocab,
        split,
        train,
        dev,
        test,
    })
}

/// A batch padded to its longest sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedBatch {
    /// `tokens[r]` has length `max_len`, padded with [`PAD`].
    pub tokens: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
    /// Position of each row in the source split.
    pub indices: Vec<usize>,
}

impl PaddedBatch {
    pub fn from_sentences(sentences: &[&[usize]], indices: Vec<usize>) -> Result<Self> {
        if sentences.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        if let Some(i) = sentences.iter().position(|s| s.is_empty()) {
            return Err(Error::Input(format!("sentence {i} of batch is empty")));
        }
        let max_len = sentences.iter().map(|s| s.len()).max().unwrap_or(0);
        let tokens = sentences
            .iter()
            .map(|s| {
                let mut row = s.to_vec();
                row.resize(max_len, PAD);
                row
            })
            .collect();
        Ok(PaddedBatch {
            tokens,
            lengths: sentences.iter().map(|s| s.len()).collect(),
            indices,
        })
    }

    pub fn single(sentence: &[usize]) -> Result<Self> {
        PaddedBatch::from_sentences(&[sentence], vec![0])
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.tokens.first().map_or(0, Vec::len)
    }

    /// Unpadded sentence `r`.
    pub fn sentence(&self, r: usize) -> &[usize] {
        &self.tokens[r][..self.lengths[r]]
    }

    /// 1 where position `t` is a real token of row `r`, else 0.
    pub fn position_mask(&self, t: usize) -> Vec<f64> {
        self.lengths
            .iter()
            .map(|&n| if t < n { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn total_tokens(&self) -> usize {
        self.lengths.iter().sum()
    }
}

/// Splits `sentences` into padded batches. With `shuffle`, the order is a
/// permutation seeded by `(seed, epoch)`; otherwise the source order is kept.
pub fn batches(
    sentences: &[Vec<usize>],
    batch_size: usize,
    seed: u64,
    epoch: usize,
    shuffle: bool,
) -> Result<Vec<PaddedBatch>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size", "must be at least 1"));
    }
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(seed, epoch));
        order.shuffle(&mut rng);
    }
    order
        .chunks(batch_size)
        .map(|chunk| {
            let rows: Vec<&[usize]> = chunk.iter().map(|&i| sentences[i].as_slice()).collect();
            PaddedBatch::from_sentences(&rows, chunk.to_vec())
        })
        .collect()
}

pub(crate) fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}
