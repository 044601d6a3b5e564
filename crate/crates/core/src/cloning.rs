//! Prosody cloning through Gaussian component indices.
//!
//! The source utterance is reduced to the sequence of its most probable
//! components under the source speaker's predicted mixtures. The target side
//! then regenerates prosody from the target speaker's mixtures using only
//! those indices, so nothing else about the source reaches the output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{self, Embedding};
use crate::model::PredictorParams;
use crate::predictor::{self, PhoneSeq};

/// Per-phone component indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentIndexSeq(pub Vec<usize>);

impl ComponentIndexSeq {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// How the target embedding is taken from the selected component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Emit the component mean.
    #[default]
    Mean,
    /// Draw from the selected component.
    Sample { seed: u64 },
}

/// Which embeddings condition the target-side predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CloneHistory {
    /// The target embeddings emitted so far.
    #[default]
    Emitted,
    /// The source reference embeddings; only available through
    /// [`clone_pipeline_with`].
    Reference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct CloneOptions {
    #[serde(default)]
    pub selection: Selection,
    #[serde(default)]
    pub history: CloneHistory,
}

/// Most probable component of each source embedding under the source
/// speaker's mixtures, teacher-forced on the source embeddings.
pub fn identify(
    phones: &PhoneSeq,
    src_speaker: usize,
    src_embeddings: &[Embedding],
    params: &PredictorParams,
) -> Result<ComponentIndexSeq> {
    let gmms = predictor::predict_gmm_sequence(phones, Some(src_speaker), src_embeddings, params)?;
    gmms.iter()
        .zip(src_embeddings)
        .map(|(g, e)| gmm::map_component(g, e))
        .collect::<Result<Vec<_>>>()
        .map(ComponentIndexSeq)
}

/// Regenerates prosody for `tgt_speaker` from component indices, emitting
/// the mean of the indexed component at each phone.
pub fn clone_prosody(
    phones: &PhoneSeq,
    tgt_speaker: usize,
    indices: &ComponentIndexSeq,
    params: &PredictorParams,
) -> Result<Vec<Embedding>> {
    clone_with(phones, tgt_speaker, indices, params, &CloneOptions::default(), None)
}

/// [`clone_prosody`] with explicit options. `reference` is required when
/// `options.history` is [`CloneHistory::Reference`].
pub fn clone_with(
    phones: &PhoneSeq,
    tgt_speaker: usize,
    indices: &ComponentIndexSeq,
    params: &PredictorParams,
    options: &CloneOptions,
    reference: Option<&[Embedding]>,
) -> Result<Vec<Embedding>> {
    if indices.len() != phones.len() {
        return Err(Error::shape(format!(
            "{} component indices for {} phones",
            indices.len(),
            phones.len()
        )));
    }
    let m = params.config.components;
    if let Some(&bad) = indices.0.iter().find(|&&i| i >= m) {
        return Err(Error::Index {
            what: "mixture components",
            index: bad,
            size: m,
        });
    }
    let reference = match (options.history, reference) {
        (CloneHistory::Emitted, _) => None,
        (CloneHistory::Reference, Some(r)) if r.len() == phones.len() => Some(r),
        (CloneHistory::Reference, Some(r)) => {
            return Err(Error::shape(format!(
                "{} reference embeddings for {} phones",
                r.len(),
                phones.len()
            )))
        }
        (CloneHistory::Reference, None) => {
            return Err(Error::config(
                "reference history needs the source embeddings",
            ))
        }
    };
    let mut rng = match options.selection {
        Selection::Sample { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Selection::Mean => None,
    };
    let mut out = Vec::with_capacity(phones.len());
    predictor::run_autoregressive(phones, Some(tgt_speaker), params, |k, g| {
        let j = indices.0[k];
        let e = match rng.as_mut() {
            Some(rng) => gmm::sample_from_component(g, j, rng),
            None => g.mean(j).to_vec(),
        };
        out.push(e.clone());
        Ok(match reference {
            Some(r) => r[k].clone(),
            None => e,
        })
    })?;
    Ok(out)
}

/// [`identify`] followed by [`clone_prosody`].
pub fn clone_pipeline(
    phones: &PhoneSeq,
    src_speaker: usize,
    src_embeddings: &[Embedding],
    tgt_speaker: usize,
    params: &PredictorParams,
) -> Result<(ComponentIndexSeq, Vec<Embedding>)> {
    clone_pipeline_with(
        phones,
        src_speaker,
        src_embeddings,
        tgt_speaker,
        params,
        &CloneOptions::default(),
    )
}

pub fn clone_pipeline_with(
    phones: &PhoneSeq,
    src_speaker: usize,
    src_embeddings: &[Embedding],
    tgt_speaker: usize,
    params: &PredictorParams,
    options: &CloneOptions,
) -> Result<(ComponentIndexSeq, Vec<Embedding>)> {
    let indices = identify(phones, src_speaker, src_embeddings, params)?;
    let cloned = clone_with(
        phones,
        tgt_speaker,
        &indices,
        params,
        options,
        Some(src_embeddings),
    )?;
    Ok((indices, cloned))
}
