//! Synthetic oracle corpus with known generating mixtures.
//!
//! Every phone owns `M*` speaker-independent component means placed at the
//! vertices of a regular simplex with edge length `separation` (so every pair
//! of components is exactly `separation` unit standard deviations apart),
//! randomly rotated per phone, and Dirichlet(1, ..., 1) mixture weights. A
//! speaker applies a diagonal affine map `x -> scale ⊙ x + shift` to every
//! component of every phone, so component `j` names the same prosody cluster
//! for all speakers. Within-component noise is unit variance before the
//! speaker map.
//!
//! Generation is deterministic per seed: the oracle structure and each
//! utterance draw from their own ChaCha stream, so utterances can be produced
//! in parallel without changing the result.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gmm::{self, DiagGmm, Embedding};

pub const CORPUS_FORMAT_VERSION: u32 = 1;

const ORACLE_STREAM: u64 = 0;
const SPEAKER_STREAM: u64 = 1;
const TRAIN_STREAM_BASE: u64 = 1 << 32;
const TEST_STREAM_BASE: u64 = 2 << 32;

/// Ground-truth diagonal affine map of one speaker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeakerMap {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl SpeakerMap {
    pub fn identity(dim: usize) -> Self {
        Self {
            scale: vec![1.0; dim],
            shift: vec![0.0; dim],
        }
    }
}

/// Parameters of the oracle corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSpec {
    /// Phone inventory size.
    pub phones: usize,
    pub speakers: usize,
    /// True number of components per phone.
    pub components: usize,
    pub dim: usize,
    /// Distance between component means in units of component standard
    /// deviation.
    pub separation: f64,
    /// Per-speaker maps; when omitted, speaker 0 is the identity and the
    /// others get a random scale in `exp([-0.3, 0.3])` and a random shift of
    /// length `separation / 2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker_maps: Option<Vec<SpeakerMap>>,
    pub min_len: usize,
    pub max_len: usize,
    pub train_size: usize,
    pub test_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl OracleSpec {
    /// Single-speaker corpus used for the component-count comparison.
    pub fn desk_single_speaker(seed: u64) -> Self {
        Self {
            phones: 10,
            speakers: 1,
            components: 5,
            dim: 4,
            separation: 6.0,
            speaker_maps: None,
            min_len: 5,
            max_len: 15,
            train_size: 2000,
            test_size: 200,
            seed,
        }
    }

    /// Two-speaker corpus used for cloning experiments.
    pub fn desk_two_speaker(seed: u64) -> Self {
        Self {
            speakers: 2,
            ..Self::desk_single_speaker(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("phones", self.phones),
            ("speakers", self.speakers),
            ("components", self.components),
            ("dim", self.dim),
            ("min_len", self.min_len),
            ("train_size", self.train_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if self.min_len > self.max_len {
            return Err(Error::config(format!(
                "min_len {} exceeds max_len {}",
                self.min_len, self.max_len
            )));
        }
        if !(self.separation.is_finite() && self.separation >= 0.0) {
            return Err(Error::config(format!(
                "separation must be finite and non-negative, got {}",
                self.separation
            )));
        }
        if self.components > self.dim + 1 {
            return Err(Error::config(format!(
                "{} equidistant components need at least {} dimensions, have {}",
                self.components,
                self.components - 1,
                self.dim
            )));
        }
        if let Some(maps) = &self.speaker_maps {
            if maps.len() != self.speakers {
                return Err(Error::config(format!(
                    "{} speaker maps for {} speakers",
                    maps.len(),
                    self.speakers
                )));
            }
            for (s, map) in maps.iter().enumerate() {
                if map.scale.len() != self.dim || map.shift.len() != self.dim {
                    return Err(Error::config(format!(
                        "speaker {s} map does not have dimension {}",
                        self.dim
                    )));
                }
                if map.scale.iter().any(|v| !(v.is_finite() && *v > 0.0))
                    || map.shift.iter().any(|v| !v.is_finite())
                {
                    return Err(Error::config(format!(
                        "speaker {s} map needs positive finite scales and finite shifts"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// The realized ground truth behind a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Oracle {
    pub spec: OracleSpec,
    /// Per phone, `M*` weights.
    pub weights: Vec<Vec<f64>>,
    /// Per phone, `M* x D` speaker-independent means.
    pub means: Vec<Vec<f64>>,
    pub speaker_maps: Vec<SpeakerMap>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Vertices of a regular simplex with unit edge length, centred at the
/// origin, expressed in `m - 1` coordinates (Helmert basis).
fn unit_simplex(m: usize) -> Vec<Vec<f64>> {
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    (0..m)
        .map(|j| {
            (1..m)
                .map(|k| {
                    // Helmert row k: k entries of 1, then -k, then zeros.
                    let norm = ((k * (k + 1)) as f64).sqrt();
                    let entry = if j < k {
                        1.0
                    } else if j == k {
                        -(k as f64)
                    } else {
                        0.0
                    };
                    scale * entry / norm
                })
                .collect()
        })
        .collect()
}

/// Random orthogonal matrix via Gram-Schmidt on a Gaussian matrix.
fn random_rotation<R: Rng>(dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while basis.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

fn dirichlet_ones<R: Rng>(m: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(1.0, 1.0).expect("valid gamma parameters");
    let draws: Vec<f64> = (0..m).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|g| g / total).collect()
}

impl Oracle {
    pub fn from_spec(spec: &OracleSpec) -> Result<Self> {
        spec.validate()?;
        let (m, d) = (spec.components, spec.dim);
        let simplex = unit_simplex(m);
        let mut rng = stream_rng(spec.seed, ORACLE_STREAM);
        let mut weights = Vec::with_capacity(spec.phones);
        let mut means = Vec::with_capacity(spec.phones);
        for _ in 0..spec.phones {
            let rotation = random_rotation(d, &mut rng);
            let mut phone_means = vec![0.0; m * d];
            for (j, vertex) in simplex.iter().enumerate() {
                // vertex lives in the first m-1 coordinates; rotate into R^d
                for (a, row) in rotation.iter().enumerate() {
                    let v: f64 = vertex.iter().zip(row).map(|(x, y)| x * y).sum();
                    phone_means[j * d + a] = spec.separation * v;
                }
            }
            means.push(phone_means);
            weights.push(dirichlet_ones(m, &mut rng));
        }
        let speaker_maps = match &spec.speaker_maps {
            Some(maps) => maps.clone(),
            None => {
                let mut rng = stream_rng(spec.seed, SPEAKER_STREAM);
                (0..spec.speakers)
                    .map(|s| {
                        if s == 0 {
                            return SpeakerMap::identity(d);
                        }
                        let scale = (0..d).map(|_| rng.random_range(-0.3..0.3f64).exp()).collect();
                        let dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                        let shift = dir.iter().map(|x| 0.5 * spec.separation * x / norm).collect();
                        SpeakerMap { scale, shift }
                    })
                    .collect()
            }
        };
        Ok(Self {
            spec: spec.clone(),
            weights,
            means,
            speaker_maps,
        })
    }

    /// Speaker-mapped mean of one component.
    pub fn component_mean(&self, phone: usize, speaker: usize, component: usize) -> Vec<f64> {
        let d = self.spec.dim;
        let map = &self.speaker_maps[speaker];
        self.means[phone][component * d..(component + 1) * d]
            .iter()
            .zip(map.scale.iter().zip(&map.shift))
            .map(|(mu, (a, b))| a * mu + b)
            .collect()
    }

    /// The generating mixture of `phone` for `speaker`.
    pub fn mixture(&self, phone: usize, speaker: usize) -> DiagGmm {
        let (m, d) = (self.spec.components, self.spec.dim);
        let map = &self.speaker_maps[speaker];
        let means: Vec<f64> = (0..m)
            .flat_map(|j| self.component_mean(phone, speaker, j))
            .collect();
        let variances: Vec<f64> = (0..m)
            .flat_map(|_| map.scale.iter().map(|s| s * s))
            .collect();
        debug_assert_eq!(means.len(), m * d);
        DiagGmm::new(self.weights[phone].clone(), means, variances)
            .expect("oracle mixtures are valid by construction")
    }

    fn generate_utterance(&self, stream: u64) -> Utterance {
        let spec = &self.spec;
        let mut rng = stream_rng(spec.seed, stream);
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let speaker = rng.random_range(0..spec.speakers);
        let map = &self.speaker_maps[speaker];
        let mut phones = Vec::with_capacity(len);
        let mut embeddings = Vec::with_capacity(len);
        let mut latent = Vec::with_capacity(len);
        for _ in 0..len {
            let phone = rng.random_range(0..spec.phones);
            let j = gmm::sample_component(&self.weights[phone], &mut rng);
            let e = self
                .component_mean(phone, speaker, j)
                .into_iter()
                .zip(&map.scale)
                .map(|(mu, s)| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    mu + s * z
                })
                .collect();
            phones.push(phone);
            embeddings.push(e);
            latent.push(j);
        }
        Utterance {
            phones,
            speaker,
            embeddings,
            latent_components: Some(latent),
        }
    }
}

/// One utterance of the corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub phones: Vec<usize>,
    pub speaker: usize,
    pub embeddings: Vec<Embedding>,
    /// Generating component per phone. Evaluation only.
    pub latent_components: Option<Vec<usize>>,
}

impl Utterance {
    pub fn len(&self) -> usize {
        self.phones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phones.is_empty()
    }
}

/// Train and test utterances plus the spec that generated them.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: OracleSpec,
    pub train: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

/// Generates the corpus described by `spec`.
pub fn gen_corpus(spec: &OracleSpec) -> Result<Corpus> {
    let oracle = Oracle::from_spec(spec)?;
    let train = (0..spec.train_size as u64)
        .into_par_iter()
        .map(|u| oracle.generate_utterance(TRAIN_STREAM_BASE + u))
        .collect();
    let test = (0..spec.test_size as u64)
        .into_par_iter()
        .map(|u| oracle.generate_utterance(TEST_STREAM_BASE + u))
        .collect();
    Ok(Corpus {
        spec: spec.clone(),
        train,
        test,
    })
}

/// Exact log-likelihood of an utterance under the generating mixtures.
pub fn oracle_loglik(oracle: &Oracle, utterance: &Utterance) -> Result<f64> {
    let mut total = 0.0;
    for (p, e) in utterance.phones.iter().zip(&utterance.embeddings) {
        total += gmm::log_density(&oracle.mixture(*p, utterance.speaker), e)?;
    }
    Ok(total)
}

/// Mean oracle log-likelihood per phone over a set of utterances.
pub fn oracle_mean_loglik(oracle: &Oracle, utterances: &[Utterance]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for u in utterances {
        total += oracle_loglik(oracle, u)?;
        count += u.len();
    }
    Ok(total / count.max(1) as f64)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderRecord {
    format: String,
    format_version: u32,
    oracle_spec: OracleSpec,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalOnly {
    latent_components: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UtteranceRecord {
    split: String,
    id: usize,
    phones: Vec<usize>,
    speaker: usize,
    embeddings: Vec<Embedding>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eval_only: Option<EvalOnly>,
}

const CORPUS_FORMAT: &str = "prosody-corpus";

impl Corpus {
    /// Writes the line-delimited JSON representation: a header line holding
    /// the oracle spec, then one utterance per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        let header = HeaderRecord {
            format: CORPUS_FORMAT.to_string(),
            format_version: CORPUS_FORMAT_VERSION,
            oracle_spec: self.spec.clone(),
        };
        let to_err = |e: std::io::Error| Error::io("<corpus stream>", e);
        serde_json::to_writer(&mut out, &header).map_err(json_err)?;
        out.write_all(b"\n").map_err(to_err)?;
        for (split, set) in [("train", &self.train), ("test", &self.test)] {
            for (id, u) in set.iter().enumerate() {
                let record = UtteranceRecord {
                    split: split.to_string(),
                    id,
                    phones: u.phones.clone(),
                    speaker: u.speaker,
                    embeddings: u.embeddings.clone(),
                    eval_only: u.latent_components.clone().map(|latent_components| EvalOnly {
                        latent_components,
                    }),
                };
                serde_json::to_writer(&mut out, &record).map_err(json_err)?;
                out.write_all(b"\n").map_err(to_err)?;
            }
        }
        Ok(())
    }

    pub fn to_jsonl_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory cannot fail");
        buf
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| format_err("corpus file is empty"))?
            .map_err(|e| Error::io("<corpus stream>", e))?;
        let header: HeaderRecord = serde_json::from_str(&header_line).map_err(json_err)?;
        if header.format != CORPUS_FORMAT || header.format_version != CORPUS_FORMAT_VERSION {
            return Err(format_err(format!(
                "unsupported corpus format {} v{}",
                header.format, header.format_version
            )));
        }
        let mut splits: BTreeMap<String, Vec<Utterance>> = BTreeMap::new();
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io("<corpus stream>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: UtteranceRecord = serde_json::from_str(&line)
                .map_err(|e| format_err(format!("line {}: {e}", n + 2)))?;
            if r.phones.len() != r.embeddings.len() {
                return Err(format_err(format!(
                    "line {}: {} phones but {} embeddings",
                    n + 2,
                    r.phones.len(),
                    r.embeddings.len()
                )));
            }
            let set = splits.entry(r.split.clone()).or_default();
            if r.id != set.len() {
                return Err(format_err(format!(
                    "line {}: {} utterance id {} out of order",
                    n + 2,
                    r.split,
                    r.id
                )));
            }
            set.push(Utterance {
                phones: r.phones,
                speaker: r.speaker,
                embeddings: r.embeddings,
                latent_components: r.eval_only.map(|e| e.latent_components),
            });
        }
        let train = splits.remove("train").unwrap_or_default();
        let test = splits.remove("test").unwrap_or_default();
        if let Some(other) = splits.keys().next() {
            return Err(format_err(format!("unknown split {other:?}")));
        }
        Ok(Self {
            spec: header.oracle_spec,
            train,
            test,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_jsonl(std::io::BufReader::new(file))
    }

    /// SHA-256 over the serialized corpus, used to tie training histories to
    /// the data they came from.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_jsonl_bytes()))
    }

    pub fn oracle(&self) -> Result<Oracle> {
        Oracle::from_spec(&self.spec)
    }
}

fn json_err(e: serde_json::Error) -> Error {
    format_err(e.to_string())
}

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "corpus",
        detail: detail.into(),
    }
}
