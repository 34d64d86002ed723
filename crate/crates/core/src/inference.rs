//! Document representations (posterior means) and evaluation-time bounds
//! from a frozen model, plus the representation CSV exchanged with the
//! evaluation tools.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::{join_labels, Document};
use crate::model::{elbo, encode, ModelConfig, ModelError, ModelParams, PerplexityAccumulator};
use crate::numerics::{AnchoredSum, Rng};

const EVAL_STREAM: u64 = 11;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("representation file line {line}: {message}")]
    Format { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DocRepresentation {
    /// Position of the source document in its split.
    pub id: usize,
    pub labels: BTreeSet<String>,
    /// Posterior mean `mu`.
    pub vector: Vec<f64>,
}

/// Posterior mean of `doc`; one deterministic encoder pass, no sampling.
pub fn represent(id: usize, doc: &Document, params: &ModelParams, config: &ModelConfig) -> Result<DocRepresentation, ModelError> {
    let q = encode(doc, params, config)?;
    Ok(DocRepresentation {
        id,
        labels: doc.labels.clone(),
        vector: q.mu,
    })
}

/// Represents every document in order; empty documents yield `None`.
pub fn represent_batch(docs: &[Document], params: &ModelParams, config: &ModelConfig) -> Vec<Option<DocRepresentation>> {
    docs.par_iter()
        .enumerate()
        .map(|(i, d)| represent(i, d, params, config).ok())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundReport {
    /// Mean over non-empty documents of the multi-sample ELBO.
    pub mean_elbo: f64,
    pub perplexity: f64,
    pub documents: usize,
    pub skipped: usize,
}

/// `samples`-sample ELBO per document. Document `i` draws its noise from
/// its own substream of `seed`, so the result does not depend on threading.
pub fn evaluate_bound(
    docs: &[Document],
    params: &ModelParams,
    config: &ModelConfig,
    samples: usize,
    seed: u64,
) -> Result<BoundReport, ModelError> {
    let per_doc: Vec<Option<(f64, usize)>> = docs
        .par_iter()
        .enumerate()
        .map(|(i, doc)| {
            if doc.is_empty() {
                return Ok(None);
            }
            let mut rng = Rng::substream(seed, &[EVAL_STREAM, i as u64]);
            let est = elbo(doc, params, config, &mut rng, samples)?;
            Ok(Some((est.total, doc.len())))
        })
        .collect::<Result<_, ModelError>>()?;
    let mut total = AnchoredSum::default();
    let mut ppl = PerplexityAccumulator::new(config.vocab_size);
    for &(t, l) in per_doc.iter().flatten() {
        total.push(t);
        ppl.push(t, l);
    }
    let documents = total.count();
    let Some(perplexity) = ppl.perplexity() else {
        return Err(ModelError::AllDocumentsEmpty);
    };
    Ok(BoundReport {
        mean_elbo: total.mean(),
        perplexity,
        documents,
        skipped: docs.len() - documents,
    })
}

/// `id,labels,v0,...,v{d-1}` with `|`-separated labels. Floats use the
/// shortest representation that round-trips exactly.
pub fn representations_to_csv(reps: &[DocRepresentation]) -> String {
    let dim = reps.first().map_or(0, |r| r.vector.len());
    let mut out = String::from("id,labels");
    for i in 0..dim {
        let _ = write!(out, ",v{i}");
    }
    out.push('\n');
    for r in reps {
        let _ = write!(out, "{},{}", r.id, join_labels(&r.labels));
        for x in &r.vector {
            let _ = write!(out, ",{x}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_representations(text: &str) -> Result<Vec<DocRepresentation>, InferenceError> {
    let fmt_err = |line: usize, message: String| InferenceError::Format { line, message };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| fmt_err(1, "missing header".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 2 || cols[0] != "id" || cols[1] != "labels" {
        return Err(fmt_err(1, "header must start with 'id,labels'".into()));
    }
    for (i, c) in cols[2..].iter().enumerate() {
        if *c != format!("v{i}") {
            return Err(fmt_err(1, format!("expected column v{i}, found '{c}'")));
        }
    }
    let dim = cols.len() - 2;
    let mut reps = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 2 {
            return Err(fmt_err(lineno, format!("expected {} fields, found {}", dim + 2, fields.len())));
        }
        let id = fields[0]
            .parse()
            .map_err(|_| fmt_err(lineno, format!("bad id '{}'", fields[0])))?;
        let labels = fields[1]
            .split('|')
            .filter(|s| !s.is_empty())
            .map(str::to_owned)
            .collect();
        let vector = fields[2..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| fmt_err(lineno, format!("bad value '{f}'")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        reps.push(DocRepresentation { id, labels, vector });
    }
    Ok(reps)
}

pub fn write_representations(path: &Path, reps: &[DocRepresentation]) -> Result<(), InferenceError> {
    fs::write(path, representations_to_csv(reps)).map_err(|e| InferenceError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn read_representations(path: &Path) -> Result<Vec<DocRepresentation>, InferenceError> {
    let text = fs::read_to_string(path).map_err(|e| InferenceError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    parse_representations(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelMode;

    fn doc(ids: &[u32], label: &str) -> Document {
        Document::new(ids.to_vec(), BTreeSet::from([label.to_string()]))
    }

    fn setup(mode: ModelMode) -> (ModelConfig, ModelParams) {
        let config = match mode {
            ModelMode::Savae => ModelConfig::savae(8, 3, 2),
            ModelMode::Nvdm => ModelConfig::nvdm(8, 3),
        }
        .with_encoder_layers(vec![6]);
        let params = ModelParams::init(&config, &mut Rng::new(17));
        (config, params)
    }

    #[test]
    fn represent_cases() {
        let (config, params) = setup(ModelMode::Savae);
        let zero = ModelParams::zeros(&config);
        let d = doc(&[1, 2, 2, 7], "a");
        assert_eq!(represent(0, &d, &zero, &config).unwrap().vector, vec![0.0; 3]);
        let a = represent(0, &d, &params, &config).unwrap();
        assert_eq!(a, represent(0, &d, &params, &config).unwrap());
        let permuted = doc(&[7, 2, 1, 2], "a");
        assert_eq!(a.vector, represent(0, &permuted, &params, &config).unwrap().vector);
        assert_eq!(
            represent(0, &Document::default(), &params, &config),
            Err(ModelError::EmptyDocument)
        );
    }

    #[test]
    fn batch_matches_single_and_preserves_order() {
        let (config, params) = setup(ModelMode::Nvdm);
        let docs = vec![doc(&[0, 1], "x"), Document::default(), doc(&[5, 6, 7], "y")];
        let batch = represent_batch(&docs, &params, &config);
        assert_eq!(batch[0].as_ref().unwrap(), &represent(0, &docs[0], &params, &config).unwrap());
        assert!(batch[1].is_none());
        assert_eq!(batch[2].as_ref().unwrap().id, 2);
        let single = represent_batch(&docs[..1], &params, &config);
        assert_eq!(single[0], batch[0]);
    }

    #[test]
    fn uniform_model_bound() {
        let (config, _) = setup(ModelMode::Savae);
        let zero = ModelParams::zeros(&config);
        let docs = vec![doc(&[0, 1, 2], "a"), doc(&[3], "b"), Document::default()];
        let r = evaluate_bound(&docs, &zero, &config, 20, 5).unwrap();
        assert_eq!(r.perplexity, 8.0);
        assert_eq!(r.documents, 2);
        assert_eq!(r.skipped, 1);
        assert!((r.mean_elbo + 2.0 * 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bound_is_seeded() {
        let (config, params) = setup(ModelMode::Savae);
        let docs = vec![doc(&[0, 1, 2, 5], "a"), doc(&[3, 3], "b")];
        let a = evaluate_bound(&docs, &params, &config, 20, 5).unwrap();
        let b = evaluate_bound(&docs, &params, &config, 20, 5).unwrap();
        assert_eq!(a, b);
        assert!(evaluate_bound(&[Document::default()], &params, &config, 20, 5).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let reps = vec![
            DocRepresentation {
                id: 3,
                labels: BTreeSet::from(["ECAT".to_string(), "GCAT".to_string()]),
                vector: vec![0.1, -2.5e-17, 3.0],
            },
            DocRepresentation {
                id: 9,
                labels: BTreeSet::new(),
                vector: vec![1.0 / 3.0, 0.0, -1.0],
            },
        ];
        let text = representations_to_csv(&reps);
        assert!(text.starts_with("id,labels,v0,v1,v2\n3,ECAT|GCAT,"));
        assert_eq!(parse_representations(&text).unwrap(), reps);
    }

    #[test]
    fn csv_rejects_malformed() {
        assert!(parse_representations("").is_err());
        assert!(parse_representations("id,labels,v0\n1,a\n").is_err());
        assert!(parse_representations("id,labels,v0\n1,a,nan\n").is_err());
        assert!(parse_representations("id,labels,v1\n").is_err());
    }
}
