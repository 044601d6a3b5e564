//! Command-line driver.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{de::DeserializeOwned, Serialize};

use crate::checkpoint::Checkpoint;
use crate::cloning::{self, CloneHistory, CloneOptions, Selection};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::metrics::{self, CloningReport, LlTable, SpeakerPair};
use crate::model::PredictorParams;
use crate::predictor::{self, PhoneSeq};
use crate::synthdata::{gen_corpus, Corpus, OracleSpec, Utterance};
use crate::training::{self, GradCheckConfig, GradCheckReport, TrainConfig, TrainState};
use crate::Embedding;

/// Exit status of a gradient check that ran but exceeded its tolerance.
pub const EXIT_GRADCHECK_FAILED: i32 = 7;

#[derive(Debug, Parser)]
#[command(name = "prosody-mdn", version, about = "Mixture-density prosody prediction and cloning")]
pub struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, env = "PROSODY_MDN_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub seed: u64,
    /// JSON configuration file; unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an oracle corpus.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Use the two-speaker desk corpus when no config is given.
        #[arg(long)]
        two_speaker: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a predictor.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured component count.
        #[arg(long)]
        components: Option<usize>,
        /// Overrides the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        /// Per-epoch history as CSV.
        #[arg(long)]
        history: Option<PathBuf>,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate checkpoints on a corpus.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Samples per utterance for the diversity statistic.
        #[arg(long, default_value_t = 3)]
        samples: usize,
    },
    /// Sample prosody for a phone sequence.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated phone ids.
        #[arg(long, value_delimiter = ',', required = true)]
        phones: Vec<usize>,
        #[arg(long)]
        speaker: Option<usize>,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Clone the prosody of a corpus utterance to another speaker.
    Clone {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// `train:<id>` or `test:<id>`.
        #[arg(long)]
        utterance: String,
        #[arg(long)]
        target: usize,
        /// Sample from the selected components instead of emitting means.
        #[arg(long)]
        sample: bool,
        /// Condition the target side on the source embeddings.
        #[arg(long)]
        reference_history: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Format {
        what: "json output",
        detail: e.to_string(),
    })?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, &json_bytes(value)?)
}

fn multi_speaker_of(ck: &Checkpoint) -> bool {
    match ck {
        Checkpoint::Training(s) => s.config.multi_speaker,
        Checkpoint::Model(p) => p.config.speakers > 1,
    }
}

pub fn cmd_gen_data(common: &Common, two_speaker: bool, out: &Path) -> Result<()> {
    let mut spec = match &common.config {
        Some(path) => read_config::<OracleSpec>(path)?,
        None if two_speaker => OracleSpec::desk_two_speaker(0),
        None => OracleSpec::desk_single_speaker(0),
    };
    spec.seed = common.seed;
    let corpus = gen_corpus(&spec)?;
    write_atomic(out, &corpus.to_jsonl_bytes())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_train(
    common: &Common,
    corpus: &Path,
    out: &Path,
    components: Option<usize>,
    epochs: Option<usize>,
    history: Option<&Path>,
    resume: Option<&Path>,
) -> Result<TrainState> {
    let corpus = Corpus::load(corpus)?;
    let mut state = match resume {
        Some(path) => match Checkpoint::load(path)? {
            Checkpoint::Training(s) => *s,
            Checkpoint::Model(_) => {
                return Err(Error::config(format!(
                    "{} holds no optimiser state and cannot be resumed",
                    path.display()
                )))
            }
        },
        None => {
            let mut cfg = match &common.config {
                Some(path) => read_config::<TrainConfig>(path)?,
                None => TrainConfig::desk(5, corpus.spec.speakers > 1, 0),
            };
            cfg.seed = common.seed;
            if let Some(m) = components {
                cfg.components = m;
            }
            TrainState::new(&corpus, &cfg)?
        }
    };
    if state.config.seed != common.seed {
        return Err(Error::config(format!(
            "checkpoint was trained with seed {}, not {}",
            state.config.seed, common.seed
        )));
    }
    if resume.is_some() && (common.config.is_some() || components.is_some()) {
        return Err(Error::config("a resumed run keeps its stored configuration"));
    }
    if let Some(e) = epochs {
        state.config.epochs = e;
    }
    state.run(&corpus)?;
    let checkpoint = Checkpoint::Training(Box::new(state));
    checkpoint.save(out)?;
    let Checkpoint::Training(state) = checkpoint else {
        unreachable!()
    };
    if let Some(path) = history {
        let mut buf = Vec::new();
        state.history.write_csv(&mut buf)?;
        write_atomic(path, &buf)?;
    }
    Ok(*state)
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelReport {
    /// File name of the checkpoint.
    pub checkpoint: String,
    pub components: usize,
    pub multi_speaker: bool,
    pub train_ll: f64,
    pub test_ll: f64,
    /// Mean count of weights above 0.1 and 0.01 on the test split.
    pub active_components: Vec<f64>,
    pub diversity: f64,
    pub cloning: Option<CloningReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub corpus_digest: String,
    pub oracle_train_ll: f64,
    pub oracle_test_ll: f64,
    pub models: Vec<ModelReport>,
    /// Final-epoch comparison across the training checkpoints.
    pub ll_table: Option<LlTable>,
}

fn evaluate_model(
    name: &str,
    params: &PredictorParams,
    multi_speaker: bool,
    corpus: &Corpus,
    samples: usize,
    seed: u64,
) -> Result<ModelReport> {
    let test: &[Utterance] = if corpus.test.is_empty() {
        &corpus.train
    } else {
        &corpus.test
    };
    let cloning = if multi_speaker && corpus.spec.speakers > 1 {
        let speakers = corpus.spec.speakers;
        let pairs: Vec<SpeakerPair> = (0..speakers)
            .flat_map(|s| {
                (0..speakers)
                    .filter(move |t| *t != s)
                    .map(move |t| SpeakerPair { source: s, target: t })
            })
            .collect();
        Some(metrics::cloning_report(
            test,
            params,
            &corpus.oracle()?,
            &pairs,
            seed,
        )?)
    } else {
        None
    };
    Ok(ModelReport {
        checkpoint: name.to_string(),
        components: params.config.components,
        multi_speaker,
        train_ll: -training::mean_nll(params, &corpus.train, multi_speaker)?,
        test_ll: -training::mean_nll(params, test, multi_speaker)?,
        active_components: metrics::active_components(params, test, multi_speaker, &[0.1, 0.01])?,
        diversity: metrics::corpus_diversity(params, test, multi_speaker, samples, seed)?,
        cloning,
    })
}

pub fn cmd_eval(common: &Common, checkpoints: &[PathBuf], corpus: &Path, samples: usize) -> Result<EvalReport> {
    let corpus = Corpus::load(corpus)?;
    let oracle = corpus.oracle()?;
    let mut models = Vec::new();
    let mut histories = Vec::new();
    for path in checkpoints {
        let ck = Checkpoint::load(path)?;
        let params = ck.params();
        if params.config.dim != corpus.spec.dim
            || params.config.phones != corpus.spec.phones
            || params.config.speakers != corpus.spec.speakers
        {
            return Err(Error::config(format!(
                "{} does not match the corpus dimensions",
                path.display()
            )));
        }
        let multi = multi_speaker_of(&ck);
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        models.push(evaluate_model(
            &name,
            params,
            multi,
            &corpus,
            samples,
            common.seed,
        )?);
        if let Checkpoint::Training(s) = ck {
            if !s.history.rows.is_empty() {
                histories.push(s.history);
            }
        }
    }
    let ll_table = if histories.is_empty() {
        None
    } else {
        Some(metrics::ll_curves(&histories)?)
    };
    Ok(EvalReport {
        corpus_digest: corpus.digest(),
        oracle_train_ll: crate::synthdata::oracle_mean_loglik(&oracle, &corpus.train)?,
        oracle_test_ll: if corpus.test.is_empty() {
            f64::NAN
        } else {
            crate::synthdata::oracle_mean_loglik(&oracle, &corpus.test)?
        },
        models,
        ll_table,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleDraw {
    pub embeddings: Vec<Embedding>,
    pub components: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleOutput {
    pub seed: u64,
    pub phones: Vec<usize>,
    pub speaker: Option<usize>,
    pub samples: Vec<SampleDraw>,
}

pub fn cmd_sample(
    common: &Common,
    checkpoint: &Path,
    phones: &[usize],
    speaker: Option<usize>,
    count: usize,
) -> Result<SampleOutput> {
    use rand::SeedableRng;
    let params = Checkpoint::load(checkpoint)?.into_params();
    let seq = PhoneSeq(phones.to_vec());
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(common.seed);
    let samples = (0..count)
        .map(|_| {
            predictor::sample_sequence(&seq, speaker, &params, &mut rng)
                .map(|(embeddings, components)| SampleDraw { embeddings, components })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleOutput {
        seed: common.seed,
        phones: phones.to_vec(),
        speaker,
        samples,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CloneOutput {
    pub split: String,
    pub id: usize,
    pub phones: Vec<usize>,
    pub source_speaker: usize,
    pub target_speaker: usize,
    pub options: CloneOptions,
    pub indices: Vec<usize>,
    pub embeddings: Vec<Embedding>,
}

fn parse_utterance_ref(r: &str) -> Result<(String, usize)> {
    let (split, id) = r
        .split_once(':')
        .ok_or_else(|| Error::config(format!("utterance reference {r:?} is not <split>:<id>")))?;
    if split != "train" && split != "test" {
        return Err(Error::config(format!("unknown split {split:?}")));
    }
    let id = id
        .parse()
        .map_err(|_| Error::config(format!("invalid utterance id {id:?}")))?;
    Ok((split.to_string(), id))
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_clone(
    common: &Common,
    checkpoint: &Path,
    corpus: &Path,
    utterance: &str,
    target: usize,
    sample: bool,
    reference_history: bool,
) -> Result<CloneOutput> {
    let params = Checkpoint::load(checkpoint)?.into_params();
    let corpus = Corpus::load(corpus)?;
    let (split, id) = parse_utterance_ref(utterance)?;
    let set = if split == "train" { &corpus.train } else { &corpus.test };
    let u = set.get(id).ok_or(Error::Index {
        what: "utterances",
        index: id,
        size: set.len(),
    })?;
    let options = CloneOptions {
        selection: if sample {
            Selection::Sample { seed: common.seed }
        } else {
            Selection::Mean
        },
        history: if reference_history {
            CloneHistory::Reference
        } else {
            CloneHistory::Emitted
        },
    };
    let (indices, embeddings) = cloning::clone_pipeline_with(
        &PhoneSeq(u.phones.clone()),
        u.speaker,
        &u.embeddings,
        target,
        &params,
        &options,
    )?;
    Ok(CloneOutput {
        split,
        id,
        phones: u.phones.clone(),
        source_speaker: u.speaker,
        target_speaker: target,
        options,
        indices: indices.0,
        embeddings,
    })
}

pub fn cmd_gradcheck(common: &Common) -> Result<GradCheckReport> {
    let cfg = match &common.config {
        Some(path) => read_config::<GradCheckConfig>(path)?,
        None => GradCheckConfig::default(),
    };
    cfg.run(common.seed)
}

/// Runs a parsed command; returns the process exit status.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenData { common, two_speaker, out } => cmd_gen_data(&common, two_speaker, &out)?,
        Command::Train {
            common,
            corpus,
            out,
            components,
            epochs,
            history,
            resume,
        } => {
            let state = cmd_train(
                &common,
                &corpus,
                &out,
                components,
                epochs,
                history.as_deref(),
                resume.as_deref(),
            )?;
            for w in &state.history.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::Eval {
            common,
            checkpoint,
            corpus,
            out,
            samples,
        } => write_json(&out, &cmd_eval(&common, &checkpoint, &corpus, samples)?)?,
        Command::Sample {
            common,
            checkpoint,
            phones,
            speaker,
            count,
            out,
        } => write_json(&out, &cmd_sample(&common, &checkpoint, &phones, speaker, count)?)?,
        Command::Clone {
            common,
            checkpoint,
            corpus,
            utterance,
            target,
            sample,
            reference_history,
            out,
        } => write_json(
            &out,
            &cmd_clone(
                &common,
                &checkpoint,
                &corpus,
                &utterance,
                target,
                sample,
                reference_history,
            )?,
        )?,
        Command::Gradcheck { common, out } => {
            let report = cmd_gradcheck(&common)?;
            let bytes = json_bytes(&report)?;
            match out {
                Some(path) => write_atomic(&path, &bytes)?,
                None => print!("{}", String::from_utf8_lossy(&bytes)),
            }
            if !report.passed {
                eprintln!(
                    "gradient check failed: max relative error {:.3e} > {:.1e} in {}",
                    report.max_rel_error(),
                    report.tolerance,
                    report.failing().join(", ")
                );
                return Ok(EXIT_GRADCHECK_FAILED);
            }
        }
    }
    Ok(0)
}

/// Parses arguments, sets up the thread pool and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return 2;
        }
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start thread pool: {e}");
            return 5;
        }
    };
    match pool.install(|| run(cli)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
