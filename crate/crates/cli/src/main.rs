mod error;
mod settings;

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use savae::checkpoint::{load_checkpoint, save_checkpoint};
use savae::corpus::{load_corpus, CorpusFormat};
use savae::evaluation::{
    cluster_metrics, linear_probe, nearest_words, recall_grid, retrieval_pr, word_embeddings, EmbeddingSpace,
    ProbeConfig, Relevance,
};
use savae::inference::{evaluate_bound, read_representations, represent_batch, write_representations};
use savae::model::{ModelConfig, ModelMode};
use savae::training::{train_documents, TrainConfig, TrainLog};
use savae::{CorpusSplit, Document};

use error::CliError;
use settings::{key_table, Settings};

const AFTER_HELP: &str = "\
Settings are resolved in this order, later winning: built-in defaults, the
--config file, then command-line flags. Every output is written under --out.
SAVAE_THREADS bounds the number of worker threads.
Errors are printed as a single line `error[<category>]: <message>`.";

#[derive(Parser, Debug)]
#[command(name = "savae", version, about = "Train and evaluate SAVAE / NVDM document models", after_help = AFTER_HELP)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Config file of `section.key=value` lines (see `savae keys`)
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for shuffling, initialization and sampling [run.seed]
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Fixed-order reductions; identical inputs give byte-identical outputs [run.deterministic]
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR", default_value = "savae-out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Tokenize raw train/test corpora into an encoded corpus file
    Preprocess {
        /// Raw training corpus [corpus.train]
        #[arg(long, value_name = "PATH")]
        train: Option<PathBuf>,
        /// Raw test corpus [corpus.test]
        #[arg(long, value_name = "PATH")]
        test: Option<PathBuf>,
        /// newsgroup-dirs | labeled-lines | unlabeled-lines [corpus.format]
        #[arg(long)]
        format: Option<String>,
        /// Maximum vocabulary size [corpus.vocab_size]
        #[arg(long)]
        vocab_size: Option<usize>,
    },
    /// Train a model on an encoded corpus
    Train {
        /// Encoded corpus from `preprocess`
        #[arg(long, value_name = "PATH")]
        corpus: PathBuf,
        /// savae | nvdm [model.mode]
        #[arg(long)]
        mode: Option<String>,
        /// Latent dimension [model.d]
        #[arg(long)]
        d: Option<usize>,
        /// Local context window [model.k]
        #[arg(long)]
        k: Option<usize>,
        /// Encoder hidden widths, comma separated [model.encoder_layers]
        #[arg(long, value_name = "W,W")]
        encoder_layers: Option<String>,
        /// [train.learning_rate]
        #[arg(long, allow_negative_numbers = true)]
        lr: Option<f64>,
        /// [train.epochs]
        #[arg(long)]
        epochs: Option<usize>,
        /// [train.batch_size]
        #[arg(long)]
        batch_size: Option<usize>,
        /// [train.checkpoint_every]
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Export posterior-mean representations as CSV
    Represent {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        corpus: PathBuf,
        /// train | test | both
        #[arg(long, default_value = "both")]
        split: String,
    },
    /// Multi-sample ELBO and perplexity of a split
    EvalBound {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        corpus: PathBuf,
        /// train | test
        #[arg(long, default_value = "test")]
        split: String,
        /// Samples per document (default: the model's eval samples)
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Precision-recall curve of cosine retrieval
    EvalRetrieval {
        /// Query representations CSV
        #[arg(long, value_name = "CSV")]
        queries: PathBuf,
        /// Index representations CSV
        #[arg(long, value_name = "CSV")]
        index: PathBuf,
        /// exact | jaccard [retrieval.relevance]
        #[arg(long)]
        relevance: Option<String>,
    },
    /// Davies-Bouldin, Dunn and silhouette indices of labeled representations
    EvalCluster {
        #[arg(long, value_name = "CSV")]
        reps: PathBuf,
    },
    /// Nearest words by cosine distance in a word-embedding space
    Neighbors {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Encoded corpus providing the vocabulary
        #[arg(long, value_name = "PATH")]
        corpus: PathBuf,
        /// Query words, comma separated
        #[arg(long, value_name = "W,W", required = true)]
        words: String,
        /// global | local [neighbors.space]
        #[arg(long)]
        space: Option<String>,
        /// [neighbors.n]
        #[arg(long)]
        n: Option<usize>,
    },
    /// Logistic-regression probe on binary-labeled representations
    Probe {
        #[arg(long, value_name = "CSV")]
        train: PathBuf,
        #[arg(long, value_name = "CSV")]
        test: PathBuf,
        /// [probe.learning_rate]
        #[arg(long, allow_negative_numbers = true)]
        lr: Option<f64>,
        /// [probe.epochs]
        #[arg(long)]
        epochs: Option<usize>,
        /// [probe.batch_size]
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// List config keys and their defaults
    Keys,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return;
            }
            let rendered = e.render().to_string();
            let message = rendered
                .lines()
                .map(str::trim)
                .take_while(|l| !l.starts_with("Usage:") && !l.starts_with("For more information"))
                .filter(|l| !l.is_empty())
                .collect::<Vec<_>>()
                .join(" ");
            fail(CliError::Usage(message.trim_start_matches("error: ").to_string()));
        }
    };
    if let Err(e) = configure_threads().and_then(|_| run(cli)) {
        fail(e);
    }
}

fn fail(e: CliError) -> ! {
    eprintln!("{}", e.line());
    std::process::exit(e.exit_code());
}

fn configure_threads() -> Result<(), CliError> {
    let Some(raw) = std::env::var_os("SAVAE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .to_string_lossy()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| CliError::Config(vec![format!("SAVAE_THREADS: expected a positive integer, got {raw:?}")]))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(vec![format!("SAVAE_THREADS: {e}")]))
}

/// Output directory plus the input files it must not overwrite.
struct Outputs {
    dir: PathBuf,
    inputs: Vec<PathBuf>,
}

impl Outputs {
    fn new(dir: &Path, inputs: &[&Path]) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            inputs: inputs.iter().filter_map(|p| fs::canonicalize(p).ok()).collect(),
        })
    }

    fn path(&self, name: &str) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        if let Ok(canon) = fs::canonicalize(&path) {
            if self.inputs.contains(&canon) {
                return Err(CliError::Usage(format!(
                    "output {} would overwrite an input file",
                    path.display()
                )));
            }
        }
        Ok(path)
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf, CliError> {
        let path = self.path(name)?;
        fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}

fn parse_or_violation<T: std::str::FromStr<Err = String>>(s: &mut Settings, key: &str) -> Option<T> {
    s.get::<T>(key)
}

fn load_split(path: &Path) -> Result<CorpusSplit, CliError> {
    Ok(CorpusSplit::load(path)?)
}

fn pick_split<'a>(split: &'a CorpusSplit, name: &str) -> Result<&'a [Document], CliError> {
    match name {
        "train" => Ok(&split.train),
        "test" => Ok(&split.test),
        other => Err(CliError::Usage(format!("unknown split '{other}' (expected train or test)"))),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let g = cli.global;
    let mut s = Settings::load(g.config.as_deref())?;
    s.set("run.seed", g.seed);
    if g.deterministic {
        s.set("run.deterministic", Some(true));
    }
    let seed: Option<u64> = s.get("run.seed");
    let deterministic: Option<bool> = s.get("run.deterministic");
    let config_input: Vec<&Path> = g.config.as_deref().into_iter().collect();

    match cli.command {
        Command::Keys => {
            s.finish()?;
            print!("{}", key_table());
            Ok(())
        }
        Command::Preprocess {
            train,
            test,
            format,
            vocab_size,
        } => {
            s.set("corpus.train", train.map(|p| p.display().to_string()));
            s.set("corpus.test", test.map(|p| p.display().to_string()));
            s.set("corpus.format", format);
            s.set("corpus.vocab_size", vocab_size);
            let train = s.require("corpus.train").map(PathBuf::from);
            let test = s.require("corpus.test").map(PathBuf::from);
            let format: Option<CorpusFormat> = parse_or_violation(&mut s, "corpus.format");
            let vocab_size: Option<usize> = s.get("corpus.vocab_size");
            if vocab_size == Some(0) {
                s.violation("corpus.vocab_size must be >= 1");
            }
            s.finish()?;
            let (train, test, format, vocab_size, seed) =
                (train.unwrap(), test.unwrap(), format.unwrap(), vocab_size.unwrap(), seed.unwrap());
            let mut inputs = config_input.clone();
            inputs.extend([train.as_path(), test.as_path()]);
            let out = Outputs::new(&g.out, &inputs)?;
            out.write(
                "manifest.preprocess.txt",
                &s.manifest(
                    "preprocess", &["corpus.", "run.seed"], &[]))?;

            let split = CorpusSplit::prepare(&load_corpus(&train, format)?, &load_corpus(&test, format)?, vocab_size, seed)?;
            let corpus_path = out.path("corpus.savc")?;
            split.save(&corpus_path)?;
            let mut vocab = String::new();
            for (t, c) in split.vocabulary.tokens().iter().zip(split.vocabulary.counts()) {
                let _ = writeln!(vocab, "{t}\t{c}");
            }
            out.write("vocabulary.tsv", &vocab)?;
            println!(
                "corpus={} vocabulary={} train={} test={} empty_train={} empty_test={}",
                corpus_path.display(),
                split.vocabulary.len(),
                split.train.len(),
                split.test.len(),
                split.skipped_train(),
                split.skipped_test()
            );
            Ok(())
        }
        Command::Train {
            corpus,
            mode,
            d,
            k,
            encoder_layers,
            lr,
            epochs,
            batch_size,
            checkpoint_every,
        } => {
            s.set("model.mode", mode);
            s.set("model.d", d);
            s.set("model.k", k);
            s.set("model.encoder_layers", encoder_layers);
            s.set("train.learning_rate", lr);
            s.set("train.epochs", epochs);
            s.set("train.batch_size", batch_size);
            s.set("train.checkpoint_every", checkpoint_every);
            let split = load_split(&corpus)?;
            let (model_config, train_config) = model_and_train_config(&mut s, split.vocabulary.len(), seed, deterministic)?;
            let mut inputs = config_input.clone();
            inputs.push(&corpus);
            let out = Outputs::new(&g.out, &inputs)?;
            out.write(
                "manifest.train.txt",
                &s.manifest(
                    "train",
                    &["model.", "train.", "run."],
                    &[
                        ("input.corpus", corpus.display().to_string()),
                        ("model.vocab_size", model_config.vocab_size.to_string()),
                        ("train.learning_rate", train_config.learning_rate.to_string()),
                    ],
                ),
            )?;
            train_command(&split, &model_config, &train_config, &out)
        }
        Command::Represent {
            checkpoint,
            corpus,
            split,
        } => {
            s.finish()?;
            let names: Vec<&str> = match split.as_str() {
                "both" => vec!["train", "test"],
                one => vec![one],
            };
            let (params, config) = load_checkpoint(&checkpoint)?;
            let data = load_split(&corpus)?;
            check_vocab(&config, &data)?;
            let mut inputs = config_input.clone();
            inputs.extend([checkpoint.as_path(), corpus.as_path()]);
            let out = Outputs::new(&g.out, &inputs)?;
            out.write(
                "manifest.represent.txt",
                &s.manifest(
                    "represent",
                    &[],
                    &[
                        ("input.checkpoint", checkpoint.display().to_string()),
                        ("input.corpus", corpus.display().to_string()),
                        ("split", split.clone()),
                    ],
                ),
            )?;
            for name in names {
                let docs = pick_split(&data, name)?;
                let reps = represent_batch(docs, &params, &config);
                let skipped = reps.iter().filter(|r| r.is_none()).count();
                let reps: Vec<_> = reps.into_iter().flatten().collect();
                let path = out.path(&format!("{name}_representations.csv"))?;
                write_representations(&path, &reps)?;
                println!("split={name} path={} documents={} skipped_empty={skipped}", path.display(), reps.len());
            }
            Ok(())
        }
        Command::EvalBound {
            checkpoint,
            corpus,
            split,
            samples,
        } => {
            s.finish()?;
            let (params, config) = load_checkpoint(&checkpoint)?;
            let data = load_split(&corpus)?;
            check_vocab(&config, &data)?;
            let docs = pick_split(&data, &split)?;
            let samples = samples.unwrap_or(config.eval_samples);
            if samples == 0 {
                return Err(CliError::Config(vec!["--samples must be >= 1".into()]));
            }
            let mut inputs = config_input.clone();
            inputs.extend([checkpoint.as_path(), corpus.as_path()]);
            let out = Outputs::new(&g.out, &inputs)?;
            let seed = seed.unwrap();
            out.write(
                "manifest.eval-bound.txt",
                &s.manifest(
                    "eval-bound",
                    &["run.seed"],
                    &[
                        ("input.checkpoint", checkpoint.display().to_string()),
                        ("input.corpus", corpus.display().to_string()),
                        ("split", split.clone()),
                        ("samples", samples.to_string()),
                    ],
                ),
            )?;
            let r = evaluate_bound(docs, &params, &config, samples, seed)?;
            let report = format!(
                "split={split}\nsamples={samples}\nmean_elbo={}\nperplexity={}\ndocuments={}\nskipped_empty={}\n",
                r.mean_elbo, r.perplexity, r.documents, r.skipped
            );
            out.write("bound.txt", &report)?;
            print!("{report}");
            Ok(())
        }
        Command::EvalRetrieval {
            queries,
            index,
            relevance,
        } => {
            s.set("retrieval.relevance", relevance);
            let relevance: Option<Relevance> = parse_or_violation(&mut s, "retrieval.relevance");
            s.finish()?;
            let mut inputs = config_input.clone();
            inputs.extend([queries.as_path(), index.as_path()]);
            let out = Outputs::new(&g.out, &inputs)?;
            out.write(
                "manifest.eval-retrieval.txt",
                &s.manifest(
                    "eval-retrieval",
                    &["retrieval."],
                    &[
                        ("input.queries", queries.display().to_string()),
                        ("input.index", index.display().to_string()),
                    ],
                ),
            )?;
            let curve = retrieval_pr(
                &read_representations(&queries)?,
                &read_representations(&index)?,
                relevance.unwrap(),
                &recall_grid(),
            )?;
            let path = out.write("pr_curve.csv", &curve.to_csv())?;
            println!(
                "path={} queries={} skipped={} mean_precision_0.01_0.5={}",
                path.display(),
                curve.queries,
                curve.skipped,
                curve.mean_precision_between(0.01, 0.5).unwrap_or(f64::NAN)
            );
            Ok(())
        }
        Command::EvalCluster { reps } => {
            s.finish()?;
            let mut inputs = config_input.clone();
            inputs.push(&reps);
            let out = Outputs::new(&g.out, &inputs)?;
            out.write(
                "manifest.eval-cluster.txt",
                &s.manifest(
                    "eval-cluster", &[], &[("input.reps", reps.display().to_string())]),
            )?;
            let report = cluster_metrics(&read_representations(&reps)?)?.report();
            out.write("cluster_metrics.txt", &report)?;
            print!("{report}");
            Ok(())
        }
        Command::Neighbors {
            checkpoint,
            corpus,
            words,
            space,
            n,
        } => {
            s.set("neighbors.space", space);
            s.set("neighbors.n", n);
            let space: Option<EmbeddingSpace> = parse_or_violation(&mut s, "neighbors.space");
            let n: Option<usize> = s.get("neighbors.n");
            s.finish()?;
            let (params, config) = load_checkpoint(&checkpoint)?;
            let data = load_split(&corpus)?;
            check_vocab(&config, &data)?;
            let mut inputs = config_input.clone();
            inputs.extend([checkpoint.as_path(), corpus.as_path()]);
            let out = Outputs::new(&g.out, &inputs)?;
            out.write(
                "manifest.neighbors.txt",
                &s.manifest(
                    "neighbors",
                    &["neighbors."],
                    &[
                        ("input.checkpoint", checkpoint.display().to_string()),
                        ("input.corpus", corpus.display().to_string()),
                        ("words", words.clone()),
                    ],
                ),
            )?;
            let space = space.unwrap();
            let emb = word_embeddings(&params, space)?;
            let mut table = String::new();
            for word in words.split(',').map(str::trim).filter(|w| !w.is_empty()) {
                let nn = nearest_words(&word.to_lowercase(), &data.vocabulary, emb, n.unwrap())?;
                let _ = writeln!(table, "{word} ({})", if space == EmbeddingSpace::Global { "global" } else { "local" });
                for (rank, (token, dist)) in nn.iter().enumerate() {
                    let _ = writeln!(table, "  {:>2}  {token:<20} {dist:.6}", rank + 1);
                }
            }
            out.write("neighbors.txt", &table)?;
            print!("{table}");
            Ok(())
        }
        Command::Probe {
            train,
            test,
            lr,
            epochs,
            batch_size,
        } => {
            s.set("probe.learning_rate", lr);
            s.set("probe.epochs", epochs);
            s.set("probe.batch_size", batch_size);
            let lr: Option<f64> = s.get("probe.learning_rate");
            let epochs: Option<usize> = s.get("probe.epochs");
            let batch: Option<usize> = s.get("probe.batch_size");
            if lr.is_some_and(|v| !(v > 0.0 && v.is_finite())) {
                s.violation("probe.learning_rate must be > 0");
            }
            if epochs == Some(0) {
                s.violation("probe.epochs must be >= 1");
            }
            if batch == Some(0) {
                s.violation("probe.batch_size must be >= 1");
            }
            s.finish()?;
            let mut inputs = config_input.clone();
            inputs.extend([train.as_path(), test.as_path()]);
            let out = Outputs::new(&g.out, &inputs)?;
            out.write(
                "manifest.probe.txt",
                &s.manifest(
                    "probe",
                    &["probe.", "run.seed"],
                    &[
                        ("input.train", train.display().to_string()),
                        ("input.test", test.display().to_string()),
                    ],
                ),
            )?;
            let config = ProbeConfig {
                learning_rate: lr.unwrap(),
                epochs: epochs.unwrap(),
                batch_size: batch.unwrap(),
                seed: seed.unwrap(),
                standardize: true,
            };
            let report = linear_probe(&read_representations(&train)?, &read_representations(&test)?, &config)?.report();
            out.write("probe.txt", &report)?;
            print!("{report}");
            Ok(())
        }
    }
}

fn check_vocab(config: &ModelConfig, data: &CorpusSplit) -> Result<(), CliError> {
    if config.vocab_size != data.vocabulary.len() {
        return Err(CliError::Input(format!(
            "checkpoint vocabulary size {} does not match corpus vocabulary size {}",
            config.vocab_size,
            data.vocabulary.len()
        )));
    }
    Ok(())
}

fn model_and_train_config(
    s: &mut Settings,
    vocab_size: usize,
    seed: Option<u64>,
    deterministic: Option<bool>,
) -> Result<(ModelConfig, TrainConfig), CliError> {
    let mode: Option<ModelMode> = s.get("model.mode");
    let d: Option<usize> = s.get("model.d");
    let k: Option<usize> = s.get("model.k");
    let layers = s.get_list("model.encoder_layers");
    let train_samples: Option<usize> = s.get("model.train_samples");
    let eval_samples: Option<usize> = s.get("model.eval_samples");
    let lr: Option<f64> = s.get("train.learning_rate");
    let epochs: Option<usize> = s.get("train.epochs");
    let batch: Option<usize> = s.get("train.batch_size");
    let every: Option<usize> = s.get("train.checkpoint_every");
    let beta1: Option<f64> = s.get("train.beta1");
    let beta2: Option<f64> = s.get("train.beta2");
    let eps: Option<f64> = s.get("train.eps");
    let (Some(mode), Some(d), Some(k), Some(layers), Some(ts), Some(es), Some(epochs), Some(batch), Some(every), Some(b1), Some(b2), Some(eps), Some(seed), Some(det)) =
        (mode, d, k, layers, train_samples, eval_samples, epochs, batch, every, beta1, beta2, eps, seed, deterministic)
    else {
        // every parse failure is already recorded
        s.finish()?;
        unreachable!("a setting failed to parse without recording a violation");
    };
    let model = ModelConfig {
        mode,
        vocab_size,
        latent_dim: d,
        window: if mode == ModelMode::Savae { k } else { 0 },
        encoder_layers: layers,
        train_samples: ts,
        eval_samples: es,
    };
    let train = TrainConfig {
        learning_rate: lr.unwrap_or(TrainConfig::for_mode(mode).learning_rate),
        epochs,
        batch_size: batch,
        seed,
        beta1: b1,
        beta2: b2,
        eps_adam: eps,
        deterministic: det,
        checkpoint_every: every,
    };
    s.extend_violations(model.violations());
    s.extend_violations(train.violations());
    s.finish()?;
    Ok((model, train))
}

fn train_command(split: &CorpusSplit, model_config: &ModelConfig, train_config: &TrainConfig, out: &Outputs) -> Result<(), CliError> {
    let ckpt_dir = out.dir.join("checkpoints");
    if train_config.checkpoint_every > 0 {
        fs::create_dir_all(&ckpt_dir).map_err(|e| CliError::io(&ckpt_dir, e))?;
    }
    let log_path = out.path("train_log.csv")?;
    let mut log_file = fs::File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    writeln!(log_file, "{}", TrainLog::CSV_HEADER).map_err(|e| CliError::io(&log_path, e))?;
    let total = train_config.epochs;
    let (params, log) = train_documents(&split.train, model_config, train_config, |rec, params| {
        writeln!(log_file, "{}", TrainLog::csv_line(rec)).map_err(|e| format!("{}: {e}", log_path.display()))?;
        eprintln!(
            "epoch {}/{total} elbo={:.4} kl={:.4} perplexity={:.2} ({:.1}s)",
            rec.epoch, rec.mean_elbo, rec.mean_kl, rec.perplexity, rec.seconds
        );
        if train_config.checkpoint_every > 0 && rec.epoch % train_config.checkpoint_every == 0 {
            let path = ckpt_dir.join(format!("epoch_{:06}.savm", rec.epoch));
            save_checkpoint(params, model_config, &path).map_err(|e| e.to_string())?;
        }
        Ok(())
    })?;
    let model_path = out.path("model.savm")?;
    save_checkpoint(&params, model_config, &model_path)?;
    println!(
        "model={} epochs={} skipped_empty={} final_elbo={}",
        model_path.display(),
        log.records.len(),
        log.skipped_documents,
        log.records.last().map_or(f64::NAN, |r| r.mean_elbo)
    );
    Ok(())
}
