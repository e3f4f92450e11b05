//! Synthetic transduction tasks, corpus files, and batching.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const NUM_SPECIALS: usize = 3;

const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["<pad>", "<bos>", "<eos>"];

/// Specials followed by content symbols named `0`, `1`, … `k-1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    content: usize,
}

impl Vocab {
    pub fn new(content: usize) -> Self {
        Vocab { content }
    }

    /// Vocabulary matching a model's `vocab_size`.
    pub fn for_model(vocab_size: usize) -> Result<Self> {
        if vocab_size <= NUM_SPECIALS {
            return Err(Error::config(format!(
                "vocab_size {vocab_size} leaves no room for content symbols"
            )));
        }
        Ok(Vocab::new(vocab_size - NUM_SPECIALS))
    }

    pub fn len(&self) -> usize {
        self.content + NUM_SPECIALS
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn content_size(&self) -> usize {
        self.content
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        if let Some(i) = SPECIAL_NAMES.iter().position(|&s| s == symbol) {
            return Some(i);
        }
        // reject forms like "+3" or "03" so the mapping stays bijective
        if symbol.is_empty() || !symbol.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        if symbol.len() > 1 && symbol.starts_with('0') {
            return None;
        }
        let k: usize = symbol.parse().ok()?;
        (k < self.content).then_some(k + NUM_SPECIALS)
    }

    pub fn symbol(&self, id: usize) -> Option<String> {
        match id {
            i if i < NUM_SPECIALS => Some(SPECIAL_NAMES[i].to_string()),
            i if i < self.len() => Some((i - NUM_SPECIALS).to_string()),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Copy,
    Reverse,
    Sort,
}

impl TaskKind {
    /// The target content for a given source content.
    pub fn apply(self, content: &[usize]) -> Vec<usize> {
        let mut out = content.to_vec();
        match self {
            TaskKind::Copy => {}
            TaskKind::Reverse => out.reverse(),
            TaskKind::Sort => out.sort_unstable(),
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub content_vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
    pub train_size: usize,
    pub valid_size: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            kind: TaskKind::Copy,
            content_vocab: 16,
            min_len: 4,
            max_len: 8,
            seed: 7,
            train_size: 2000,
            valid_size: 200,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.content_vocab == 0 {
            return Err(Error::config("task.content_vocab must be at least 1"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config(format!(
                "task length range [{}, {}] is invalid",
                self.min_len, self.max_len
            )));
        }
        if self.train_size == 0 || self.valid_size == 0 {
            return Err(Error::config("task.train_size and task.valid_size must be at least 1"));
        }
        let wanted = self.train_size + self.valid_size;
        if distinct_sequences(self.content_vocab, self.min_len, self.max_len) < wanted as u128 {
            return Err(Error::config(format!(
                "only {} distinct sources exist, {wanted} requested",
                distinct_sequences(self.content_vocab, self.min_len, self.max_len)
            )));
        }
        Ok(())
    }

    /// Longest framed sequence (content plus BOS and EOS).
    pub fn max_framed_len(&self) -> usize {
        self.max_len + 2
    }
}

fn distinct_sequences(k: usize, lo: usize, hi: usize) -> u128 {
    let mut total: u128 = 0;
    for len in lo..=hi {
        let count = (k as u128).checked_pow(len as u32).unwrap_or(u128::MAX);
        total = total.saturating_add(count);
    }
    total
}

/// One `(source, target)` pair, both framed as BOS … EOS.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Example {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

fn frame(content: &[usize]) -> Vec<usize> {
    let mut v = Vec::with_capacity(content.len() + 2);
    v.push(BOS);
    v.extend_from_slice(content);
    v.push(EOS);
    v
}

impl Example {
    pub fn from_content(source: &[usize], target: &[usize]) -> Self {
        Example {
            source: frame(source),
            target: frame(target),
        }
    }

    fn content(seq: &[usize]) -> &[usize] {
        &seq[1..seq.len() - 1]
    }

    pub fn source_content(&self) -> &[usize] {
        Self::content(&self.source)
    }

    pub fn target_content(&self) -> &[usize] {
        Self::content(&self.target)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
}

/// Draws distinct sources and applies the task relation. The first
/// `train_size` draws form the training split, the rest validation, so the
/// splits never share a source.
pub fn generate(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let wanted = spec.train_size + spec.valid_size;
    let mut seen = HashSet::with_capacity(wanted);
    let mut examples = Vec::with_capacity(wanted);
    let mut attempts = 0usize;
    while examples.len() < wanted {
        attempts += 1;
        if attempts > 1000 * wanted {
            return Err(Error::config(
                "could not draw enough distinct sources; enlarge the vocabulary or length range",
            ));
        }
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let content: Vec<usize> = (0..len)
            .map(|_| NUM_SPECIALS + rng.random_range(0..spec.content_vocab))
            .collect();
        if seen.insert(content.clone()) {
            let target = spec.kind.apply(&content);
            examples.push(Example::from_content(&content, &target));
        }
    }
    let valid = examples.split_off(spec.train_size);
    Ok(Dataset {
        train: examples,
        valid,
    })
}

/// Endless epoch-wise shuffled batches. Each epoch is a fresh permutation;
/// the last batch of an epoch may be short.
#[derive(Debug)]
pub struct Batches<'a> {
    corpus: &'a [Example],
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

pub fn batches(corpus: &[Example], batch_size: usize, seed: u64) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be at least 1"));
    }
    if corpus.is_empty() {
        return Err(Error::config("cannot batch an empty corpus"));
    }
    let mut b = Batches {
        corpus,
        order: (0..corpus.len()).collect(),
        pos: 0,
        batch_size,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    b.order.shuffle(&mut b.rng);
    Ok(b)
}

impl<'a> Iterator for Batches<'a> {
    type Item = Vec<&'a Example>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end]
            .iter()
            .map(|&i| &self.corpus[i])
            .collect();
        self.pos = end;
        Some(batch)
    }
}

fn parse_line(line: &str, vocab: &Vocab, what: &str, lineno: usize) -> Result<Vec<usize>> {
    line.split_whitespace()
        .map(|tok| match vocab.id(tok) {
            Some(id) if id >= NUM_SPECIALS => Ok(id),
            Some(_) => Err(Error::parse(format!(
                "{what} line {lineno}: special symbol {tok:?} must not appear in corpus text"
            ))),
            None => Err(Error::parse(format!(
                "{what} line {lineno}: unknown symbol {tok:?}"
            ))),
        })
        .collect()
}

/// Parses parallel corpus text: one whitespace-separated sequence per line,
/// source and target with equal line counts. Sequences are framed BOS … EOS.
pub fn parse_parallel(source: &str, target: &str, vocab: &Vocab) -> Result<Vec<Example>> {
    let src: Vec<&str> = source.lines().collect();
    let tgt: Vec<&str> = target.lines().collect();
    if src.len() != tgt.len() {
        return Err(Error::parse(format!(
            "source has {} lines, target has {}",
            src.len(),
            tgt.len()
        )));
    }
    src.iter()
        .zip(&tgt)
        .enumerate()
        .map(|(i, (s, t))| {
            let s = parse_line(s, vocab, "source", i + 1)?;
            let t = parse_line(t, vocab, "target", i + 1)?;
            Ok(Example::from_content(&s, &t))
        })
        .collect()
}

pub fn read_parallel(source: &Path, target: &Path, vocab: &Vocab) -> Result<Vec<Example>> {
    let s = std::fs::read_to_string(source).map_err(|e| Error::io(source, e))?;
    let t = std::fs::read_to_string(target).map_err(|e| Error::io(target, e))?;
    parse_parallel(&s, &t, vocab)
}

/// Renders one side of a corpus in the parallel text format.
pub fn format_side(examples: &[Example], vocab: &Vocab, target_side: bool) -> String {
    let mut out = String::new();
    for ex in examples {
        let content = if target_side {
            ex.target_content()
        } else {
            ex.source_content()
        };
        let syms: Vec<String> = content
            .iter()
            .map(|&id| vocab.symbol(id).unwrap_or_else(|| "?".into()))
            .collect();
        out.push_str(&syms.join(" "));
        out.push('\n');
    }
    out
}
