//! Adam training of the predictor and a finite-difference gradient checker.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm;
use crate::model::{ModelConfig, PredictorParams};
use crate::predictor::{self, PhoneSeq};
use crate::synthdata::{Corpus, Utterance};

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamHyper {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// One Adam update of a flat parameter slice. `t` is the 1-based step count.
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    hyper: &AdamHyper,
) -> Result<()> {
    if t == 0 {
        return Err(Error::InvalidParameter("adam step count starts at 1".into()));
    }
    if param.len() != grad.len() || m.len() != grad.len() || v.len() != grad.len() {
        return Err(Error::shape("adam buffers differ in length"));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerical {
            what: "gradient",
            index: i,
            detail: format!("non-finite gradient {}", grad[i]),
        });
    }
    let bias1 = 1.0 - hyper.beta1.powi(t as i32);
    let bias2 = 1.0 - hyper.beta2.powi(t as i32);
    for i in 0..param.len() {
        m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * grad[i];
        v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * grad[i] * grad[i];
        let m_hat = m[i] / bias1;
        let v_hat = v[i] / bias2;
        param[i] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
    Ok(())
}

/// First and second moments plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: PredictorParams,
    pub second: PredictorParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &PredictorParams) -> Self {
        Self {
            first: params.zeros_like(),
            second: params.zeros_like(),
            step: 0,
        }
    }
}

/// Applies one Adam step to every parameter array.
pub fn adam_step(
    params: &mut PredictorParams,
    grads: &PredictorParams,
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    if let Err(Error::Numerical { index, detail, .. }) = grads.check_finite() {
        let name = grads
            .arrays()
            .iter()
            .find(|(_, a)| a.get(index).is_some_and(|v| !v.is_finite()))
            .map(|(n, _)| *n)
            .unwrap_or("gradient");
        return Err(Error::Numerical {
            what: name,
            index,
            detail: format!("aborting update: {detail}"),
        });
    }
    let t = state.step + 1;
    let iter = params
        .arrays_mut()
        .into_iter()
        .zip(grads.arrays())
        .zip(state.first.arrays_mut().into_iter().zip(state.second.arrays_mut()));
    for (((_, p), (_, g)), ((_, m), (_, v))) in iter {
        adam_update(p, g, m, v, t, hyper)?;
    }
    state.step = t;
    Ok(())
}

/// Training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub components: usize,
    pub hidden: usize,
    pub recurrent: usize,
    /// Train the speaker-dependent path on the corpus speaker labels.
    pub multi_speaker: bool,
    pub epochs: usize,
    /// Utterances per update.
    pub batch_size: usize,
    /// Peak learning rate.
    pub lr: f64,
    /// Linear warm-up length in updates; constant afterwards.
    #[serde(default)]
    pub warmup_steps: u64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    /// Weight of the prosody loss in the joint objective. Only the prosody
    /// loss is trained here, so it does not affect optimisation; reported
    /// NLLs are unscaled.
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    /// Abort when the mean train NLL per phone exceeds this.
    #[serde(default = "default_divergence")]
    pub divergence_nll: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_clip() -> f64 {
    5.0
}
fn default_beta() -> f64 {
    0.02
}
fn default_divergence() -> f64 {
    1e6
}

impl TrainConfig {
    /// Desk-scale defaults. The speaker-dependent path learns more slowly
    /// and needs smaller, more frequent updates to keep components aligned
    /// across speakers.
    pub fn desk(components: usize, multi_speaker: bool, seed: u64) -> Self {
        let (epochs, batch_size, lr) = if multi_speaker {
            (60, 4, 3e-3)
        } else {
            (20, 16, 1e-2)
        };
        Self {
            components,
            hidden: 16,
            recurrent: 16,
            multi_speaker,
            epochs,
            batch_size,
            lr,
            warmup_steps: 100,
            clip_norm: default_clip(),
            beta: default_beta(),
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_eps(),
            divergence_nll: default_divergence(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.components == 0 || self.hidden == 0 || self.recurrent == 0 {
            return Err(Error::config("model sizes must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!("invalid learning rate {}", self.lr)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("clip_norm must be positive"));
        }
        Ok(())
    }

    pub fn model_config(&self, corpus: &Corpus) -> ModelConfig {
        ModelConfig::new(
            self.components,
            corpus.spec.dim,
            self.hidden,
            self.recurrent,
            corpus.spec.phones,
            corpus.spec.speakers,
        )
    }

    fn hyper(&self, lr: f64) -> AdamHyper {
        AdamHyper {
            lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    /// Learning rate for 1-based update `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * step as f64 / self.warmup_steps as f64
        }
    }
}

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    /// Mean NLL per phone on the train split after the epoch.
    pub train_nll: f64,
    /// Mean NLL per phone on the test split after the epoch, NaN when the
    /// split is empty.
    #[serde(with = "nan_as_null")]
    pub test_nll: f64,
    /// Learning rate of the last update in the epoch.
    pub lr: f64,
}

mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        (!x.is_nan()).then_some(*x).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// Per-epoch record of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub corpus_digest: String,
    pub components: usize,
    pub rows: Vec<HistoryRow>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl History {
    pub fn last(&self) -> Option<&HistoryRow> {
        self.rows.last()
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let wrap = |e: csv::Error| Error::Format {
            what: "history csv",
            detail: e.to_string(),
        };
        w.write_record(["epoch", "train_nll", "test_nll", "lr"]).map_err(wrap)?;
        for r in &self.rows {
            w.serialize(r).map_err(wrap)?;
        }
        w.flush().map_err(|e| Error::io("<history csv>", e))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory csv");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

/// Everything needed to continue a run bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub params: PredictorParams,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub history: History,
}

fn speaker_of(u: &Utterance, multi_speaker: bool) -> Option<usize> {
    multi_speaker.then_some(u.speaker)
}

/// Summed NLL and gradient over a batch. Per-utterance work runs in parallel;
/// the reduction is sequential in batch order so results do not depend on
/// the thread count.
pub fn batch_loss_and_grad(
    params: &PredictorParams,
    batch: &[&Utterance],
    multi_speaker: bool,
) -> Result<(f64, PredictorParams, usize)> {
    let parts: Vec<Result<(f64, PredictorParams)>> = batch
        .par_iter()
        .map(|u| {
            predictor::sequence_nll(
                &PhoneSeq(u.phones.clone()),
                speaker_of(u, multi_speaker),
                &u.embeddings,
                params,
            )
        })
        .collect();
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        total.add_assign(&g);
    }
    let phones = batch.iter().map(|u| u.len()).sum();
    Ok((loss, total, phones))
}

/// Mean NLL per phone over a set of utterances (teacher forcing).
pub fn mean_nll(params: &PredictorParams, utterances: &[Utterance], multi_speaker: bool) -> Result<f64> {
    let parts: Vec<Result<f64>> = utterances
        .par_iter()
        .map(|u| sequence_loss(params, u, multi_speaker))
        .collect();
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    let count: usize = utterances.iter().map(|u| u.len()).sum();
    Ok(total / count.max(1) as f64)
}

/// Teacher-forced NLL of one utterance via the forward path only.
pub fn sequence_loss(params: &PredictorParams, u: &Utterance, multi_speaker: bool) -> Result<f64> {
    let gmms = predictor::predict_gmm_sequence(
        &PhoneSeq(u.phones.clone()),
        speaker_of(u, multi_speaker),
        &u.embeddings,
        params,
    )?;
    let mut total = 0.0;
    for (g, e) in gmms.iter().zip(&u.embeddings) {
        total -= gmm::log_density(g, e)?;
    }
    Ok(total)
}

impl TrainState {
    pub fn new(corpus: &Corpus, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if corpus.train.is_empty() {
            return Err(Error::config("corpus has no training utterances"));
        }
        let params = PredictorParams::init(&config.model_config(corpus), config.seed)?;
        let adam = AdamState::new(&params);
        Ok(Self {
            config: config.clone(),
            params,
            adam,
            epoch: 0,
            history: History {
                corpus_digest: corpus.digest(),
                components: config.components,
                rows: Vec::new(),
                warnings: Vec::new(),
            },
        })
    }

    fn epoch_order(&self, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(1 + self.epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Runs one epoch of updates and appends a history row.
    pub fn run_epoch(&mut self, corpus: &Corpus) -> Result<HistoryRow> {
        let cfg = self.config.clone();
        let order = self.epoch_order(corpus.train.len());
        let mut lr = cfg.lr_at(self.adam.step.max(1));
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Utterance> = chunk.iter().map(|&i| &corpus.train[i]).collect();
            let (loss, mut grads, phones) =
                batch_loss_and_grad(&self.params, &batch, cfg.multi_speaker)?;
            let mean = loss / phones as f64;
            if !mean.is_finite() || mean > cfg.divergence_nll {
                return Err(Error::Diverged {
                    epoch: self.epoch + 1,
                    nll: mean,
                });
            }
            grads.scale(1.0 / phones as f64);
            let norm = grads.global_norm();
            if norm > cfg.clip_norm {
                grads.scale(cfg.clip_norm / norm);
            }
            lr = cfg.lr_at(self.adam.step + 1);
            adam_step(&mut self.params, &grads, &mut self.adam, &cfg.hyper(lr))?;
        }
        self.epoch += 1;
        let train_nll = mean_nll(&self.params, &corpus.train, cfg.multi_speaker)?;
        let test_nll = if corpus.test.is_empty() {
            f64::NAN
        } else {
            mean_nll(&self.params, &corpus.test, cfg.multi_speaker)?
        };
        if !train_nll.is_finite() || train_nll > cfg.divergence_nll {
            return Err(Error::Diverged {
                epoch: self.epoch,
                nll: train_nll,
            });
        }
        if let Some(prev) = self.history.rows.last() {
            if train_nll > prev.train_nll + 0.05 {
                self.history.warnings.push(format!(
                    "epoch {}: train nll rose from {:.4} to {:.4}",
                    self.epoch, prev.train_nll, train_nll
                ));
            }
        }
        let row = HistoryRow {
            epoch: self.epoch,
            train_nll,
            test_nll,
            lr,
        };
        self.history.rows.push(row);
        Ok(row)
    }

    /// Trains until `config.epochs` epochs are complete.
    pub fn run(&mut self, corpus: &Corpus) -> Result<()> {
        if self.history.corpus_digest != corpus.digest() {
            return Err(Error::config("training state belongs to a different corpus"));
        }
        while self.epoch < self.config.epochs {
            self.run_epoch(corpus)?;
        }
        Ok(())
    }
}

/// Trains a fresh model on `corpus`.
pub fn train(corpus: &Corpus, config: &TrainConfig) -> Result<TrainState> {
    let mut state = TrainState::new(corpus, config)?;
    state.run(corpus)?;
    Ok(state)
}

/// Worst disagreement between analytic and numeric gradients within one
/// parameter array.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArrayCheck {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub arrays: Vec<ArrayCheck>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.arrays
            .iter()
            .map(|a| a.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn failing(&self) -> Vec<&'static str> {
        self.arrays
            .iter()
            .filter(|a| a.max_rel_error > self.tolerance)
            .map(|a| a.name)
            .collect()
    }
}

/// Relative error with an absolute floor so that gradients which are zero up
/// to rounding compare as equal.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares two gradients array by array.
pub fn compare_gradients(
    analytic: &PredictorParams,
    numeric: &PredictorParams,
    tolerance: f64,
) -> GradCheckReport {
    let arrays: Vec<ArrayCheck> = analytic
        .arrays()
        .iter()
        .zip(numeric.arrays())
        .map(|((name, a), (_, n))| {
            let mut worst = ArrayCheck {
                name,
                max_rel_error: 0.0,
                worst_index: 0,
                analytic: a.first().copied().unwrap_or(0.0),
                numeric: n.first().copied().unwrap_or(0.0),
            };
            for (i, (x, y)) in a.iter().zip(n.iter()).enumerate() {
                let err = relative_error(*x, *y);
                if err > worst.max_rel_error {
                    worst = ArrayCheck {
                        name,
                        max_rel_error: err,
                        worst_index: i,
                        analytic: *x,
                        numeric: *y,
                    };
                }
            }
            worst
        })
        .collect();
    let passed = arrays.iter().all(|a| a.max_rel_error <= tolerance);
    GradCheckReport {
        tolerance,
        arrays,
        passed,
    }
}

/// Central-difference gradient of the summed batch NLL, evaluated through the
/// forward path only.
pub fn numeric_gradient(
    params: &PredictorParams,
    batch: &[Utterance],
    multi_speaker: bool,
    step: f64,
) -> Result<PredictorParams> {
    let loss = |p: &PredictorParams| -> Result<f64> {
        let mut total = 0.0;
        for u in batch {
            total += sequence_loss(p, u, multi_speaker)?;
        }
        Ok(total)
    };
    let mut numeric = params.zeros_like();
    let mut probe = params.clone();
    let names: Vec<&'static str> = params.arrays().iter().map(|(n, _)| *n).collect();
    for name in names {
        let len = params.array(name).map_or(0, Vec::len);
        for i in 0..len {
            let orig = params.array(name).expect("known array")[i];
            probe.array_mut(name).expect("known array")[i] = orig + step;
            let up = loss(&probe)?;
            probe.array_mut(name).expect("known array")[i] = orig - step;
            let down = loss(&probe)?;
            probe.array_mut(name).expect("known array")[i] = orig;
            numeric.array_mut(name).expect("known array")[i] = (up - down) / (2.0 * step);
        }
    }
    Ok(numeric)
}

/// Checks backpropagated gradients against central differences (h = 1e-5).
pub fn grad_check(
    params: &PredictorParams,
    batch: &[Utterance],
    multi_speaker: bool,
    tolerance: f64,
) -> Result<GradCheckReport> {
    grad_check_with(params, batch, multi_speaker, tolerance, |p, b| {
        let refs: Vec<&Utterance> = b.iter().collect();
        batch_loss_and_grad(p, &refs, multi_speaker).map(|(_, g, _)| g)
    })
}

/// Problem size for a standalone gradient check on random data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub components: usize,
    pub dim: usize,
    /// Phones per utterance.
    pub length: usize,
    pub hidden: usize,
    pub recurrent: usize,
    pub phones: usize,
    pub speakers: usize,
    pub multi_speaker: bool,
    pub utterances: usize,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            components: 2,
            dim: 2,
            length: 3,
            hidden: 8,
            recurrent: 8,
            phones: 4,
            speakers: 2,
            multi_speaker: true,
            utterances: 2,
            tolerance: 1e-3,
        }
    }
}

impl GradCheckConfig {
    /// Seeded parameters and a batch of random utterances.
    pub fn instance(&self, seed: u64) -> Result<(PredictorParams, Vec<Utterance>)> {
        if self.length == 0 || self.utterances == 0 {
            return Err(Error::config("gradient check needs at least one phone and utterance"));
        }
        let cfg = ModelConfig::new(
            self.components,
            self.dim,
            self.hidden,
            self.recurrent,
            self.phones,
            self.speakers,
        );
        let params = PredictorParams::init(&cfg, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let batch = (0..self.utterances)
            .map(|_| Utterance {
                phones: (0..self.length).map(|_| rng.random_range(0..self.phones)).collect(),
                speaker: rng.random_range(0..self.speakers),
                embeddings: (0..self.length)
                    .map(|_| (0..self.dim).map(|_| rng.random_range(-2.0..2.0)).collect())
                    .collect(),
                latent_components: None,
            })
            .collect();
        Ok((params, batch))
    }

    pub fn run(&self, seed: u64) -> Result<GradCheckReport> {
        let (params, batch) = self.instance(seed)?;
        grad_check(&params, &batch, self.multi_speaker, self.tolerance)
    }
}

/// [`grad_check`] with a caller-supplied analytic gradient.
pub fn grad_check_with<F>(
    params: &PredictorParams,
    batch: &[Utterance],
    multi_speaker: bool,
    tolerance: f64,
    analytic: F,
) -> Result<GradCheckReport>
where
    F: Fn(&PredictorParams, &[Utterance]) -> Result<PredictorParams>,
{
    let a = analytic(params, batch)?;
    let n = numeric_gradient(params, batch, multi_speaker, 1e-5)?;
    Ok(compare_gradients(&a, &n, tolerance))
}
