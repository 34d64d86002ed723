//! Line-based `section.key=value` settings with flag overrides.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::CliError;

/// Every recognised key with its default (empty when the default depends on
/// other settings) and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("corpus.train", "", "raw training corpus (preprocess)"),
    ("corpus.test", "", "raw test corpus (preprocess)"),
    ("corpus.format", "newsgroup-dirs", "newsgroup-dirs | labeled-lines | unlabeled-lines"),
    ("corpus.vocab_size", "2000", "maximum vocabulary size"),
    ("model.mode", "savae", "savae | nvdm"),
    ("model.d", "50", "latent and embedding dimension"),
    ("model.k", "5", "local context window (savae)"),
    ("model.encoder_layers", "500,500", "hidden widths of the encoder MLP"),
    ("model.train_samples", "1", "posterior samples per training step"),
    ("model.eval_samples", "20", "posterior samples for evaluation bounds"),
    ("train.learning_rate", "", "Adam step size (default 1e-5 savae, 1e-4 nvdm)"),
    ("train.epochs", "1000", "training epochs"),
    ("train.batch_size", "64", "documents per Adam step"),
    ("train.checkpoint_every", "100", "epochs between checkpoints (0 = off)"),
    ("train.beta1", "0.9", "Adam first-moment decay"),
    ("train.beta2", "0.999", "Adam second-moment decay"),
    ("train.eps", "1e-8", "Adam denominator offset"),
    ("run.seed", "2", "seed for shuffling, initialization and noise"),
    ("run.deterministic", "false", "fixed-order gradient reduction"),
    ("retrieval.relevance", "exact", "exact | jaccard"),
    ("neighbors.n", "5", "neighbors per query word"),
    ("neighbors.space", "global", "global | local"),
    ("probe.learning_rate", "0.001", "probe Adam step size"),
    ("probe.epochs", "100", "probe training epochs"),
    ("probe.batch_size", "256", "probe batch size"),
];

#[derive(Debug, Clone, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
    errors: Vec<String>,
}

fn is_known(key: &str) -> bool {
    KEYS.iter().any(|(k, _, _)| *k == key)
}

impl Settings {
    /// Defaults, then the config file (if any).
    pub fn load(config: Option<&Path>) -> Result<Self, CliError> {
        let mut s = Settings::default();
        for (k, v, _) in KEYS {
            if !v.is_empty() {
                s.values.insert(k.to_string(), v.to_string());
            }
        }
        if let Some(path) = config {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            s.parse_into(&text);
        }
        Ok(s)
    }

    pub fn parse_into(&mut self, text: &str) {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) if is_known(k.trim()) => {
                    self.values.insert(k.trim().to_string(), v.trim().to_string());
                }
                Some((k, _)) => self.errors.push(format!("config line {}: unknown key '{}'", i + 1, k.trim())),
                None => self.errors.push(format!("config line {}: expected key=value", i + 1)),
            }
        }
    }

    /// Flag values take precedence over the file.
    pub fn set<T: ToString>(&mut self, key: &str, value: Option<T>) {
        debug_assert!(is_known(key), "{key}");
        if let Some(v) = value {
            self.values.insert(key.to_string(), v.to_string());
        }
    }

    /// Parses `key`, recording a violation instead of failing.
    pub fn get<T: FromStr>(&mut self, key: &str) -> Option<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.values.get(key)?.clone();
        match raw.parse() {
            Ok(v) => Some(v),
            Err(e) => {
                self.errors.push(format!("{key}: invalid value '{raw}': {e}"));
                None
            }
        }
    }

    pub fn get_list(&mut self, key: &str) -> Option<Vec<usize>> {
        let raw = self.values.get(key)?.clone();
        let parsed: Result<Vec<usize>, _> = raw.split(',').map(|p| p.trim().parse::<usize>()).collect();
        match parsed {
            Ok(v) => Some(v),
            Err(e) => {
                self.errors.push(format!("{key}: invalid list '{raw}': {e}"));
                None
            }
        }
    }

    pub fn require(&mut self, key: &str) -> Option<String> {
        let v = self.values.get(key).cloned();
        if v.is_none() {
            self.errors.push(format!("{key}: required"));
        }
        v
    }

    pub fn violation(&mut self, message: impl Into<String>) {
        self.errors.push(message.into());
    }

    pub fn extend_violations(&mut self, messages: impl IntoIterator<Item = String>) {
        self.errors.extend(messages);
    }

    /// Fails with every recorded violation at once.
    pub fn finish(&mut self) -> Result<(), CliError> {
        if self.errors.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(std::mem::take(&mut self.errors)))
        }
    }

    /// `key=value` lines for every key under the given prefixes.
    pub fn manifest(&self, command: &str, prefixes: &[&str], extra: &[(&str, String)]) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "command={command}");
        let _ = writeln!(out, "version={}", env!("CARGO_PKG_VERSION"));
        for (k, v) in extra {
            let _ = writeln!(out, "{k}={v}");
        }
        for (k, v) in &self.values {
            if prefixes.iter().any(|p| k.starts_with(p)) {
                let _ = writeln!(out, "{k}={v}");
            }
        }
        out
    }
}

pub fn key_table() -> String {
    let mut out = String::from("Config keys (file lines `key=value`, `#` comments):\n");
    for (k, v, d) in KEYS {
        let default = if v.is_empty() { String::new() } else { format!(" [default {v}]") };
        let _ = writeln!(out, "  {k:<24} {d}{default}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_flags() {
        let mut s = Settings::load(None).unwrap();
        s.parse_into("# comment\nmodel.d = 10\n\ntrain.epochs=3\n");
        s.set("model.d", Some(12));
        s.set::<usize>("train.epochs", None);
        assert_eq!(s.get::<usize>("model.d"), Some(12));
        assert_eq!(s.get::<usize>("train.epochs"), Some(3));
        assert_eq!(s.get::<usize>("model.k"), Some(5));
        assert!(s.finish().is_ok());
    }

    #[test]
    fn all_violations_reported_together() {
        let mut s = Settings::load(None).unwrap();
        s.parse_into("model.d=ten\nbogus.key=1\nnot a pair\n");
        let _ = s.get::<usize>("model.d");
        match s.finish() {
            Err(CliError::Config(v)) => assert_eq!(v.len(), 3, "{v:?}"),
            other => panic!("{other:?}"),
        }
    }
}
