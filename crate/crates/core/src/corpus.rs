//! Corpus ingestion: tokenization, vocabulary construction, document
//! encoding, seeded shuffling and the `SAVC` binary corpus format.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

use crate::numerics::Rng;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("empty corpus: no tokens to build a vocabulary from")]
    EmptyCorpus,
    #[error("invalid vocabulary size {0}; must be at least 1")]
    InvalidVocabSize(usize),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("corrupt corpus file: {0}")]
    CorruptCorpus(String),
    #[error("unsupported corpus file version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
}

impl CorpusError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CorpusError>;

fn token_pattern() -> &'static Regex {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    PATTERN.get_or_init(|| Regex::new(r"\b\w\w+\b").expect("valid token regex"))
}

/// Lowercases `text` and returns its maximal runs of two or more word
/// characters, in order of appearance.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    token_pattern()
        .find_iter(&lower)
        .map(|m| m.as_str().to_owned())
        .collect()
}

/// Token/id bijection restricted to the most frequent tokens of a corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Keeps the `max_size` most frequent tokens; equal counts are ordered
    /// lexicographically. Ids follow that order.
    pub fn build<I, D, S>(docs: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = D>,
        D: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if max_size == 0 {
            return Err(CorpusError::InvalidVocabSize(max_size));
        }
        let mut freq: HashMap<String, u64> = HashMap::new();
        for doc in docs {
            for tok in doc {
                let tok = tok.as_ref();
                match freq.get_mut(tok) {
                    Some(c) => *c += 1,
                    None => {
                        freq.insert(tok.to_owned(), 1);
                    }
                }
            }
        }
        if freq.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        let mut entries: Vec<(String, u64)> = freq.into_iter().collect();
        entries.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        entries.truncate(max_size);
        Ok(Self::from_entries(entries))
    }

    /// Rebuilds a vocabulary from `(token, count)` pairs in id order.
    pub fn from_entries(entries: Vec<(String, u64)>) -> Self {
        let mut tokens = Vec::with_capacity(entries.len());
        let mut counts = Vec::with_capacity(entries.len());
        let mut index = HashMap::with_capacity(entries.len());
        for (i, (tok, count)) in entries.into_iter().enumerate() {
            index.insert(tok.clone(), i as u32);
            tokens.push(tok);
            counts.push(count);
        }
        Self {
            tokens,
            counts,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn count(&self, id: u32) -> Option<u64> {
        self.counts.get(id as usize).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }
}

/// An encoded document: in-vocabulary token ids in original order, plus
/// its label set.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Document {
    pub ids: Vec<u32>,
    pub labels: BTreeSet<String>,
}

impl Document {
    pub fn new(ids: Vec<u32>, labels: BTreeSet<String>) -> Self {
        Self { ids, labels }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Empty documents are kept for reporting but never trained on.
    pub fn is_trainable(&self) -> bool {
        !self.ids.is_empty()
    }

    /// Labels joined with `|`.
    pub fn label_key(&self) -> String {
        join_labels(&self.labels)
    }
}

pub fn join_labels(labels: &BTreeSet<String>) -> String {
    labels.iter().map(String::as_str).collect::<Vec<_>>().join("|")
}

/// Maps tokens to ids, silently dropping out-of-vocabulary tokens.
pub fn encode_document<S: AsRef<str>>(
    tokens: &[S],
    vocab: &Vocabulary,
    labels: BTreeSet<String>,
) -> Document {
    let ids = tokens
        .iter()
        .filter_map(|t| vocab.id(t.as_ref()))
        .collect();
    Document { ids, labels }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    /// `root/<label>/<file>`, one message per file.
    NewsgroupDirs,
    /// `label[,label...]<TAB>text` per line.
    LabeledLines,
    /// One document per line, no labels.
    UnlabeledLines,
}

impl std::str::FromStr for CorpusFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "newsgroup-dirs" => Ok(CorpusFormat::NewsgroupDirs),
            "labeled-lines" => Ok(CorpusFormat::LabeledLines),
            "unlabeled-lines" => Ok(CorpusFormat::UnlabeledLines),
            other => Err(format!(
                "unknown corpus format '{other}' (expected newsgroup-dirs, labeled-lines or unlabeled-lines)"
            )),
        }
    }
}

impl std::fmt::Display for CorpusFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CorpusFormat::NewsgroupDirs => "newsgroup-dirs",
            CorpusFormat::LabeledLines => "labeled-lines",
            CorpusFormat::UnlabeledLines => "unlabeled-lines",
        })
    }
}

/// Raw document text with its labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDocument {
    pub text: String,
    pub labels: BTreeSet<String>,
}

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<RawDocument>> {
    match format {
        CorpusFormat::NewsgroupDirs => load_newsgroup_dirs(path),
        CorpusFormat::LabeledLines => load_lines(path, true),
        CorpusFormat::UnlabeledLines => load_lines(path, false),
    }
}

/// Valid UTF-8 is kept as is; anything else is read as Latin-1.
fn decode_text(bytes: Vec<u8>) -> String {
    match String::from_utf8(bytes) {
        Ok(s) => s,
        Err(e) => e.into_bytes().into_iter().map(char::from).collect(),
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| CorpusError::io(dir, e))?
        .map(|entry| entry.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| CorpusError::io(dir, e))?;
    entries.sort();
    Ok(entries)
}

fn load_newsgroup_dirs(root: &Path) -> Result<Vec<RawDocument>> {
    let mut docs = Vec::new();
    for group in sorted_entries(root)? {
        if !group.is_dir() {
            continue;
        }
        let label = group
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        for file in sorted_entries(&group)? {
            if !file.is_file() {
                continue;
            }
            let mut bytes = Vec::new();
            fs::File::open(&file)
                .and_then(|mut f| f.read_to_end(&mut bytes))
                .map_err(|e| CorpusError::io(&file, e))?;
            docs.push(RawDocument {
                text: strip_newsgroup_metadata(&decode_text(bytes)),
                labels: BTreeSet::from([label.clone()]),
            });
        }
    }
    Ok(docs)
}

/// Removes the header (everything up to the first blank line), quoted
/// lines (leading `>`), and the trailing signature block that starts at the
/// last line made only of `-` characters.
pub fn strip_newsgroup_metadata(message: &str) -> String {
    let lines: Vec<&str> = message.lines().collect();
    let body_start = lines
        .iter()
        .position(|l| l.trim().is_empty())
        .map_or(lines.len(), |i| i + 1);
    let mut body = &lines[body_start..];
    if let Some(sig) = body.iter().rposition(|l| {
        let t = l.trim();
        !t.is_empty() && t.chars().all(|c| c == '-')
    }) {
        body = &body[..sig];
    }
    body.iter()
        .filter(|l| !l.trim_start().starts_with('>'))
        .copied()
        .collect::<Vec<_>>()
        .join("\n")
}

fn load_lines(path: &Path, labeled: bool) -> Result<Vec<RawDocument>> {
    let bytes = fs::read(path).map_err(|e| CorpusError::io(path, e))?;
    let text = decode_text(bytes);
    let mut docs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if !labeled {
            docs.push(RawDocument {
                text: line.to_owned(),
                labels: BTreeSet::new(),
            });
            continue;
        }
        let Some((label_field, body)) = line.split_once('\t') else {
            return Err(CorpusError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "expected 'label<TAB>text'".into(),
            });
        };
        let labels: BTreeSet<String> = label_field
            .split(',')
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_owned)
            .collect();
        if labels.is_empty() {
            return Err(CorpusError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "empty label field".into(),
            });
        }
        docs.push(RawDocument {
            text: body.to_owned(),
            labels,
        });
    }
    Ok(docs)
}

/// Deterministic Fisher-Yates permutation driven by `Rng::new(seed)`.
pub fn shuffle_split<T>(mut docs: Vec<T>, seed: u64) -> Vec<T> {
    Rng::new(seed).shuffle(&mut docs);
    docs
}

/// Encoded train/test corpus with the vocabulary built from `train`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub train: Vec<Document>,
    pub test: Vec<Document>,
    pub vocabulary: Vocabulary,
    pub shuffle_seed: u64,
}

impl CorpusSplit {
    /// Tokenizes both splits, builds the vocabulary on `train` only, encodes,
    /// and shuffles each split with `shuffle_seed`.
    pub fn prepare(
        train: &[RawDocument],
        test: &[RawDocument],
        max_vocab: usize,
        shuffle_seed: u64,
    ) -> Result<Self> {
        let train_tokens: Vec<Vec<String>> = train.iter().map(|d| tokenize(&d.text)).collect();
        let vocabulary = Vocabulary::build(&train_tokens, max_vocab)?;
        let encode_all = |raw: &[RawDocument], toks: Vec<Vec<String>>| -> Vec<Document> {
            raw.iter()
                .zip(toks)
                .map(|(d, t)| encode_document(&t, &vocabulary, d.labels.clone()))
                .collect()
        };
        let test_tokens: Vec<Vec<String>> = test.iter().map(|d| tokenize(&d.text)).collect();
        let train_docs = encode_all(train, train_tokens);
        let test_docs = encode_all(test, test_tokens);
        Ok(Self {
            train: shuffle_split(train_docs, shuffle_seed),
            test: shuffle_split(test_docs, shuffle_seed),
            vocabulary,
            shuffle_seed,
        })
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Document> {
        self.train.iter().filter(|d| d.is_trainable())
    }

    /// Number of empty (untrainable) documents in the train split.
    pub fn skipped_train(&self) -> usize {
        self.train.iter().filter(|d| !d.is_trainable()).count()
    }

    pub fn skipped_test(&self) -> usize {
        self.test.iter().filter(|d| !d.is_trainable()).count()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CORPUS_MAGIC)?;
        w.write_all(&CORPUS_VERSION.to_le_bytes())?;
        w.write_all(&self.shuffle_seed.to_le_bytes())?;
        w.write_all(&(self.vocabulary.len() as u32).to_le_bytes())?;
        for (tok, count) in self.vocabulary.tokens().iter().zip(self.vocabulary.counts()) {
            write_str(&mut w, tok)?;
            w.write_all(&count.to_le_bytes())?;
        }
        for split in [&self.train, &self.test] {
            w.write_all(&(split.len() as u64).to_le_bytes())?;
            for doc in split {
                w.write_all(&(doc.labels.len() as u32).to_le_bytes())?;
                for label in &doc.labels {
                    write_str(&mut w, label)?;
                }
                w.write_all(&(doc.ids.len() as u32).to_le_bytes())?;
                for id in &doc.ids {
                    w.write_all(&id.to_le_bytes())?;
                }
            }
        }
        w.flush()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| CorpusError::io(path, e))?;
        self.write_to(std::io::BufWriter::new(file))
            .map_err(|e| CorpusError::io(path, e))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != CORPUS_MAGIC {
            return Err(CorpusError::CorruptCorpus("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CORPUS_VERSION {
            return Err(CorpusError::UnsupportedVersion {
                found: version,
                expected: CORPUS_VERSION,
            });
        }
        let shuffle_seed = r.u64()?;
        let vocab_len = r.u32()? as usize;
        let mut entries = Vec::with_capacity(vocab_len.min(1 << 20));
        for _ in 0..vocab_len {
            let tok = r.string()?;
            let count = r.u64()?;
            if count == 0 {
                return Err(CorpusError::CorruptCorpus(format!("zero count for '{tok}'")));
            }
            entries.push((tok, count));
        }
        let vocabulary = Vocabulary::from_entries(entries);
        if vocabulary.len() != vocab_len {
            return Err(CorpusError::CorruptCorpus("duplicate vocabulary token".into()));
        }
        let mut splits = Vec::with_capacity(2);
        for _ in 0..2 {
            let n = r.u64()? as usize;
            let mut docs = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                let n_labels = r.u32()? as usize;
                let mut labels = BTreeSet::new();
                for _ in 0..n_labels {
                    labels.insert(r.string()?);
                }
                let n_ids = r.u32()? as usize;
                let mut ids = Vec::with_capacity(n_ids.min(1 << 20));
                for _ in 0..n_ids {
                    let id = r.u32()?;
                    if id as usize >= vocab_len {
                        return Err(CorpusError::CorruptCorpus(format!(
                            "token id {id} out of range for vocabulary of {vocab_len}"
                        )));
                    }
                    ids.push(id);
                }
                docs.push(Document { ids, labels });
            }
            splits.push(docs);
        }
        if !r.is_done() {
            return Err(CorpusError::CorruptCorpus("trailing bytes".into()));
        }
        let test = splits.pop().unwrap_or_default();
        let train = splits.pop().unwrap_or_default();
        Ok(Self {
            train,
            test,
            vocabulary,
            shuffle_seed,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CorpusError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub const CORPUS_MAGIC: &[u8; 4] = b"SAVC";
pub const CORPUS_VERSION: u32 = 1;

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CorpusError::CorruptCorpus(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| CorpusError::CorruptCorpus("invalid UTF-8 string".into()))
    }

    fn is_done(&self) -> bool {
        self.pos == self.buf.len()
    }
}
