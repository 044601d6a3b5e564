//! Embedding-space evaluation: log-likelihood curves, active component
//! counts, sample diversity and cloning quality against the oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloning::{self, ComponentIndexSeq};
use crate::error::{Error, Result};
use crate::gmm::{self, DiagGmm, Embedding};
use crate::model::PredictorParams;
use crate::predictor::{self, PhoneSeq};
use crate::synthdata::{Oracle, Utterance};
use crate::training::History;

/// Final log-likelihoods of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlRow {
    pub components: usize,
    pub train_ll: f64,
    pub test_ll: f64,
    /// `train_ll - test_ll`
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlTable {
    pub rows: Vec<LlRow>,
    /// Test log-likelihood is non-decreasing in the component count.
    pub ll_increases_with_components: bool,
    /// Every multi-component run has a smaller gap than the single-Gaussian
    /// run. `None` when no single-Gaussian run is present.
    pub gap_shrinks_vs_single: Option<bool>,
}

impl LlTable {
    pub fn row(&self, components: usize) -> Option<&LlRow> {
        self.rows.iter().find(|r| r.components == components)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let wrap = |e: csv::Error| Error::Format {
            what: "ll table csv",
            detail: e.to_string(),
        };
        for r in &self.rows {
            w.serialize(r).map_err(wrap)?;
        }
        w.flush().map_err(|e| Error::io("<ll table csv>", e))?;
        Ok(())
    }
}

/// Summarises the final epoch of several runs on the same corpus.
pub fn ll_curves(histories: &[History]) -> Result<LlTable> {
    let first = histories
        .first()
        .ok_or_else(|| Error::config("no training histories given"))?;
    if let Some(h) = histories
        .iter()
        .find(|h| h.corpus_digest != first.corpus_digest)
    {
        return Err(Error::config(format!(
            "histories come from different corpora ({} vs {})",
            first.corpus_digest, h.corpus_digest
        )));
    }
    let mut rows = Vec::with_capacity(histories.len());
    for h in histories {
        let last = h
            .last()
            .ok_or_else(|| Error::config(format!("empty history for M = {}", h.components)))?;
        rows.push(LlRow {
            components: h.components,
            train_ll: -last.train_nll,
            test_ll: -last.test_nll,
            gap: last.test_nll - last.train_nll,
        });
    }
    rows.sort_by_key(|r| r.components);
    let ll_increases_with_components = rows.windows(2).all(|w| w[1].test_ll >= w[0].test_ll);
    let gap_shrinks_vs_single = rows.iter().find(|r| r.components == 1).map(|single| {
        rows.iter()
            .filter(|r| r.components > 1)
            .all(|r| r.gap < single.gap)
    });
    Ok(LlTable {
        rows,
        ll_increases_with_components,
        gap_shrinks_vs_single,
    })
}

/// Number of weights strictly above each threshold.
pub fn count_active(weights: &[f64], thresholds: &[f64]) -> Vec<usize> {
    thresholds
        .iter()
        .map(|t| weights.iter().filter(|w| **w > *t).count())
        .collect()
}

/// Average over all phones of the number of mixture weights above each
/// threshold, with mixtures predicted under teacher forcing.
pub fn active_components(
    params: &PredictorParams,
    utterances: &[Utterance],
    multi_speaker: bool,
    thresholds: &[f64],
) -> Result<Vec<f64>> {
    let mut totals = vec![0.0; thresholds.len()];
    let mut phones = 0usize;
    for u in utterances {
        let gmms = predictor::predict_gmm_sequence(
            &PhoneSeq(u.phones.clone()),
            multi_speaker.then_some(u.speaker),
            &u.embeddings,
            params,
        )?;
        for g in &gmms {
            for (t, c) in totals.iter_mut().zip(count_active(g.weights(), thresholds)) {
                *t += c as f64;
            }
        }
        phones += gmms.len();
    }
    Ok(totals.into_iter().map(|t| t / phones.max(1) as f64).collect())
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean pairwise per-phone Euclidean distance between `n_samples`
/// independently sampled embedding sequences.
pub fn diversity(
    params: &PredictorParams,
    phones: &PhoneSeq,
    speaker: Option<usize>,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    let (sum, count) = diversity_sums(params, phones, speaker, n_samples, seed)?;
    Ok(sum / count as f64)
}

fn diversity_sums(
    params: &PredictorParams,
    phones: &PhoneSeq,
    speaker: Option<usize>,
    n_samples: usize,
    seed: u64,
) -> Result<(f64, usize)> {
    if n_samples < 2 {
        return Err(Error::config("diversity needs at least two samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n_samples)
        .map(|_| predictor::sample_sequence(phones, speaker, params, &mut rng).map(|(e, _)| e))
        .collect::<Result<Vec<_>>>()?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for a in 0..n_samples {
        for b in a + 1..n_samples {
            for (x, y) in samples[a].iter().zip(&samples[b]) {
                sum += euclidean(x, y);
                count += 1;
            }
        }
    }
    Ok((sum, count))
}

/// [`diversity`] pooled over the phone sequences of a set of utterances.
/// Utterance `i` is sampled with seed stream `i` so the result does not depend
/// on iteration order.
pub fn corpus_diversity(
    params: &PredictorParams,
    utterances: &[Utterance],
    multi_speaker: bool,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, u) in utterances.iter().enumerate() {
        let (s, c) = diversity_sums(
            params,
            &PhoneSeq(u.phones.clone()),
            multi_speaker.then_some(u.speaker),
            n_samples,
            seed.wrapping_add(i as u64),
        )?;
        sum += s;
        count += c;
    }
    if count == 0 {
        return Err(Error::config("no phones to sample"));
    }
    Ok(sum / count as f64)
}

/// Pearson correlation per dimension between two equally long embedding
/// sequences, averaged over dimensions.
pub fn mean_correlation(a: &[Embedding], b: &[Embedding]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(format!(
            "correlation needs two non-empty sequences of equal length, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dim = a[0].len();
    let n = a.len() as f64;
    let mut total = 0.0;
    for d in 0..dim {
        let ma = a.iter().map(|e| e[d]).sum::<f64>() / n;
        let mb = b.iter().map(|e| e[d]).sum::<f64>() / n;
        let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
        for (x, y) in a.iter().zip(b) {
            let (dx, dy) = (x[d] - ma, y[d] - mb);
            cov += dx * dy;
            va += dx * dx;
            vb += dy * dy;
        }
        let denom = (va * vb).sqrt();
        total += if denom > 0.0 { cov / denom } else { 0.0 };
    }
    Ok(total / dim as f64)
}

/// Oracle component whose (speaker-mapped) Gaussian best explains a point.
/// All components of a speaker share one variance, so this is the nearest
/// mean in the speaker's standardized coordinates.
pub fn nearest_oracle_component(oracle: &Oracle, phone: usize, speaker: usize, point: &[f64]) -> usize {
    let scale = &oracle.speaker_maps[speaker].scale;
    let scores: Vec<f64> = (0..oracle.spec.components)
        .map(|j| {
            let mu = oracle.component_mean(phone, speaker, j);
            -point
                .iter()
                .zip(&mu)
                .zip(scale)
                .map(|((x, m), s)| ((x - m) / s).powi(2))
                .sum::<f64>()
        })
        .collect();
    gmm::argmax(&scores)
}

/// Which utterances are cloned to which speaker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerPair {
    pub source: usize,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloningReport {
    pub utterances: usize,
    pub phones: usize,
    /// Fraction of phones whose identified model component corresponds to
    /// the latent generating component (correspondence through the nearest
    /// oracle component of the predicted source mean).
    pub component_accuracy: f64,
    /// Correlation between cloned embeddings and the oracle target-speaker
    /// means of the latent components, pooled over phones.
    pub mean_correlation: f64,
    /// Fraction of cloned embeddings whose nearest oracle target-speaker
    /// component is the latent one.
    pub target_component_accuracy: f64,
    /// Mean of `log p_target(ê) - log p_source(ê)` under the oracle.
    pub affinity_margin: f64,
    /// Accuracy of uniformly random indices.
    pub random_index_accuracy: f64,
    /// Correlation obtained when cloning from uniformly random indices.
    pub random_index_correlation: f64,
    /// Correlation of freely sampled target-speaker prosody.
    pub sampled_correlation: f64,
}

/// Clones every utterance whose speaker is the source of some pair to that
/// pair's target and scores the result against the oracle.
pub fn cloning_report(
    utterances: &[Utterance],
    params: &PredictorParams,
    oracle: &Oracle,
    pairs: &[SpeakerPair],
    seed: u64,
) -> Result<CloningReport> {
    let m = params.config.components;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloned_all = Vec::new();
    let mut random_all = Vec::new();
    let mut sampled_all = Vec::new();
    let mut target_means = Vec::new();
    let (mut hits, mut random_hits, mut target_hits, mut margin) = (0usize, 0usize, 0usize, 0.0);
    let mut used = 0usize;
    for u in utterances {
        let latent = u
            .latent_components
            .as_ref()
            .ok_or_else(|| Error::Eval("utterance without latent component labels".into()))?;
        for pair in pairs.iter().filter(|p| p.source == u.speaker) {
            used += 1;
            let phones = PhoneSeq(u.phones.clone());
            let src_gmms =
                predictor::predict_gmm_sequence(&phones, Some(pair.source), &u.embeddings, params)?;
            let indices = src_gmms
                .iter()
                .zip(&u.embeddings)
                .map(|(g, e)| gmm::map_component(g, e))
                .collect::<Result<Vec<_>>>()?;
            let random: Vec<usize> = (0..u.len()).map(|_| rng.random_range(0..m)).collect();
            let score = |gmms: &[DiagGmm], idx: &[usize]| -> usize {
                idx.iter()
                    .enumerate()
                    .filter(|(k, i)| {
                        nearest_oracle_component(oracle, u.phones[*k], pair.source, gmms[*k].mean(**i))
                            == latent[*k]
                    })
                    .count()
            };
            hits += score(&src_gmms, &indices);
            random_hits += score(&src_gmms, &random);

            let cloned =
                cloning::clone_prosody(&phones, pair.target, &ComponentIndexSeq(indices), params)?;
            let random_cloned =
                cloning::clone_prosody(&phones, pair.target, &ComponentIndexSeq(random), params)?;
            let (sampled, _) = predictor::sample_sequence(&phones, Some(pair.target), params, &mut rng)?;
            for (k, e) in cloned.iter().enumerate() {
                let p = u.phones[k];
                margin += gmm::log_density(&oracle.mixture(p, pair.target), e)?
                    - gmm::log_density(&oracle.mixture(p, pair.source), e)?;
                if nearest_oracle_component(oracle, p, pair.target, e) == latent[k] {
                    target_hits += 1;
                }
                target_means.push(oracle.component_mean(p, pair.target, latent[k]));
            }
            cloned_all.extend(cloned);
            random_all.extend(random_cloned);
            sampled_all.extend(sampled);
        }
    }
    let n = cloned_all.len();
    if n == 0 {
        return Err(Error::Eval("no utterance matches the requested speaker pairs".into()));
    }
    Ok(CloningReport {
        utterances: used,
        phones: n,
        component_accuracy: hits as f64 / n as f64,
        mean_correlation: mean_correlation(&cloned_all, &target_means)?,
        target_component_accuracy: target_hits as f64 / n as f64,
        affinity_margin: margin / n as f64,
        random_index_accuracy: random_hits as f64 / n as f64,
        random_index_correlation: mean_correlation(&random_all, &target_means)?,
        sampled_correlation: mean_correlation(&sampled_all, &target_means)?,
    })
}
