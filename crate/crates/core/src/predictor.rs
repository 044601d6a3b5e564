//! Autoregressive mixture-density predictor.
//!
//! For phone `k` the predictor sees the phone context `h_k`, the previous
//! embedding `e_{k-1}` (a learned start vector at `k = 0`) and its recurrent
//! state, and emits raw mixture parameters:
//!
//! ```text
//! r_k   = tanh(W [h_k; e_{k-1}; r_{k-1}] + b)
//! si_k  = si_head(r_k)           -> (alpha, m, v)
//! ```
//!
//! With a speaker `s`, a second stream runs the same cell over
//! `h_sd = h_si + speaker_table[s]` and its head emits the speaker-dependent
//! logits plus a diagonal transform applied to every component alike:
//!
//! ```text
//! m^(s)_{k,i} = L_m(tanh(A_k ⊙ m_{k,i} + b_k))
//! v^(s)_{k,i} = L_v(tanh(C_k ⊙ v_{k,i} + d_k))
//! ```
//!
//! where `L_m`, `L_v` are global affine `D -> D` maps. The speaker-independent
//! stream never sees the speaker embedding, so `si_k` is identical across
//! speakers for the same phones and history.

use rand::Rng;

use crate::error::{Error, Result};
use crate::gmm::{self, DiagGmm, Embedding, RawGmmParams};
use crate::model::PredictorParams;

/// Input phone sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhoneSeq(pub Vec<usize>);

impl PhoneSeq {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<usize>> for PhoneSeq {
    fn from(v: Vec<usize>) -> Self {
        PhoneSeq(v)
    }
}

/// Per-phone context vector.
pub type ContextVec = Vec<f64>;

/// Recurrent state of the two streams. `sd` is present only in
/// speaker-dependent mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    pub si: Vec<f64>,
    pub sd: Option<Vec<f64>>,
}

impl RecurrentState {
    pub fn zeros(recurrent: usize, speaker_dependent: bool) -> Self {
        Self {
            si: vec![0.0; recurrent],
            sd: speaker_dependent.then(|| vec![0.0; recurrent]),
        }
    }
}

/// Result of one predictor step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub si_raw: RawGmmParams,
    pub sd_raw: Option<RawGmmParams>,
    pub state: RecurrentState,
}

impl StepOutput {
    /// Raw parameters of the distribution the model actually uses: the
    /// speaker-dependent one when present.
    pub fn raw(&self) -> &RawGmmParams {
        self.sd_raw.as_ref().unwrap_or(&self.si_raw)
    }
}

fn check_phones(phones: &PhoneSeq, params: &PredictorParams) -> Result<()> {
    if phones.is_empty() {
        return Err(Error::EmptySequence);
    }
    let size = params.config.phones;
    if let Some(&p) = phones.0.iter().find(|&&p| p >= size) {
        return Err(Error::Index {
            what: "phone inventory",
            index: p,
            size,
        });
    }
    Ok(())
}

fn check_speaker(speaker: Option<usize>, params: &PredictorParams) -> Result<()> {
    match speaker {
        Some(s) if s >= params.config.speakers => Err(Error::Index {
            what: "speaker table",
            index: s,
            size: params.config.speakers,
        }),
        _ => Ok(()),
    }
}

fn check_embeddings(embeddings: &[Embedding], len: usize, dim: usize) -> Result<()> {
    if embeddings.len() != len {
        return Err(Error::shape(format!(
            "{} embeddings for {len} phones",
            embeddings.len()
        )));
    }
    if let Some((k, e)) = embeddings.iter().enumerate().find(|(_, e)| e.len() != dim) {
        return Err(Error::shape(format!(
            "embedding {k} has dimension {}, model expects {dim}",
            e.len()
        )));
    }
    Ok(())
}

/// Looks up phone contexts and, with a speaker, adds the speaker embedding.
pub fn encode(
    phones: &PhoneSeq,
    speaker: Option<usize>,
    params: &PredictorParams,
) -> Result<(Vec<ContextVec>, Option<Vec<ContextVec>>)> {
    check_phones(phones, params)?;
    check_speaker(speaker, params)?;
    let h = params.config.hidden;
    let h_si: Vec<ContextVec> = phones
        .0
        .iter()
        .map(|&p| params.phone_table[p * h..(p + 1) * h].to_vec())
        .collect();
    let h_sd = speaker.map(|s| {
        let row = &params.speaker_table[s * h..(s + 1) * h];
        h_si.iter()
            .map(|x| x.iter().zip(row).map(|(a, b)| a + b).collect())
            .collect()
    });
    Ok((h_si, h_sd))
}

/// `W x + b` for a row-major `W` of shape `(b.len(), x.len())`.
fn affine(weight: &[f64], bias: &[f64], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    bias.iter()
        .enumerate()
        .map(|(row, b)| {
            let w = &weight[row * n..(row + 1) * n];
            b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()
        })
        .collect()
}

/// `out += Wᵀ g` for a row-major `W` of shape `(g.len(), out.len())`.
fn affine_transpose_acc(weight: &[f64], g: &[f64], out: &mut [f64]) {
    let n = out.len();
    for (row, gv) in g.iter().enumerate() {
        if *gv == 0.0 {
            continue;
        }
        let w = &weight[row * n..(row + 1) * n];
        for (o, wv) in out.iter_mut().zip(w) {
            *o += wv * gv;
        }
    }
}

/// `dW += g xᵀ`, `db += g`.
fn outer_acc(dw: &mut [f64], db: &mut [f64], g: &[f64], x: &[f64]) {
    let n = x.len();
    for (row, gv) in g.iter().enumerate() {
        db[row] += gv;
        if *gv == 0.0 {
            continue;
        }
        for (d, xv) in dw[row * n..(row + 1) * n].iter_mut().zip(x) {
            *d += gv * xv;
        }
    }
}

struct CellCache {
    input: Vec<f64>,
    output: Vec<f64>,
}

fn cell_forward(params: &PredictorParams, h: &[f64], e_prev: &[f64], r_prev: &[f64]) -> CellCache {
    let mut input = Vec::with_capacity(params.config.cell_input());
    input.extend_from_slice(h);
    input.extend_from_slice(e_prev);
    input.extend_from_slice(r_prev);
    let output = affine(&params.cell_weight, &params.cell_bias, &input)
        .into_iter()
        .map(f64::tanh)
        .collect();
    CellCache { input, output }
}

struct SdCache {
    cell: CellCache,
    head: Vec<f64>,
    /// `tanh(A ⊙ m_i + b)`, `M x D`
    mean_act: Vec<f64>,
    /// `tanh(C ⊙ v_i + d)`, `M x D`
    log_var_act: Vec<f64>,
}

struct PositionCache {
    si_cell: CellCache,
    si_head: Vec<f64>,
    sd: Option<SdCache>,
}

/// Applies the shared diagonal transform and the global affine map to all
/// components of one SI block (means or log-variances).
fn transform_block(
    si: &[f64],
    scale: &[f64],
    offset: &[f64],
    map_weight: &[f64],
    map_bias: &[f64],
    dim: usize,
) -> (Vec<f64>, Vec<f64>) {
    let act: Vec<f64> = si
        .iter()
        .enumerate()
        .map(|(idx, x)| (scale[idx % dim] * x + offset[idx % dim]).tanh())
        .collect();
    let out = act
        .chunks(dim)
        .flat_map(|t| affine(map_weight, map_bias, t))
        .collect();
    (out, act)
}

fn split_si_head(head: &[f64], m: usize, d: usize) -> (&[f64], &[f64], &[f64]) {
    (&head[..m], &head[m..m + m * d], &head[m + m * d..])
}

fn forward_position(
    params: &PredictorParams,
    h_si: &[f64],
    h_sd: Option<&[f64]>,
    e_prev: &[f64],
    state: &RecurrentState,
) -> Result<(PositionCache, RawGmmParams, Option<RawGmmParams>)> {
    let cfg = &params.config;
    let (m, d) = (cfg.components, cfg.dim);
    let si_cell = cell_forward(params, h_si, e_prev, &state.si);
    let si_head = affine(&params.si_weight, &params.si_bias, &si_cell.output);
    let (alpha, means, log_vars) = split_si_head(&si_head, m, d);
    let si_raw = RawGmmParams::new(alpha.to_vec(), means.to_vec(), log_vars.to_vec())?;

    let (sd, sd_raw) = match (h_sd, state.sd.as_deref()) {
        (Some(h_sd), Some(r_prev)) => {
            let cell = cell_forward(params, h_sd, e_prev, r_prev);
            let head = affine(&params.sd_weight, &params.sd_bias, &cell.output);
            let a = &head[m..m + d];
            let b = &head[m + d..m + 2 * d];
            let c = &head[m + 2 * d..m + 3 * d];
            let dd = &head[m + 3 * d..m + 4 * d];
            let (sd_means, mean_act) = transform_block(
                means,
                a,
                b,
                &params.mean_map_weight,
                &params.mean_map_bias,
                d,
            );
            let (sd_log_vars, log_var_act) = transform_block(
                log_vars,
                c,
                dd,
                &params.log_var_map_weight,
                &params.log_var_map_bias,
                d,
            );
            let raw = RawGmmParams::new(head[..m].to_vec(), sd_means, sd_log_vars)?;
            (
                Some(SdCache {
                    cell,
                    head,
                    mean_act,
                    log_var_act,
                }),
                Some(raw),
            )
        }
        (None, None) => (None, None),
        _ => {
            return Err(Error::shape(
                "speaker context and recurrent state disagree on speaker-dependent mode",
            ))
        }
    };
    Ok((
        PositionCache {
            si_cell,
            si_head,
            sd,
        },
        si_raw,
        sd_raw,
    ))
}

/// One autoregressive step.
pub fn step(
    h_si: &[f64],
    h_sd: Option<&[f64]>,
    e_prev: &[f64],
    state: &RecurrentState,
    params: &PredictorParams,
) -> Result<StepOutput> {
    let cfg = &params.config;
    if h_si.len() != cfg.hidden || h_sd.is_some_and(|h| h.len() != cfg.hidden) {
        return Err(Error::shape(format!(
            "context width differs from hidden size {}",
            cfg.hidden
        )));
    }
    if e_prev.len() != cfg.dim {
        return Err(Error::shape(format!(
            "previous embedding has dimension {}, model expects {}",
            e_prev.len(),
            cfg.dim
        )));
    }
    if state.si.len() != cfg.recurrent || state.sd.as_ref().is_some_and(|r| r.len() != cfg.recurrent)
    {
        return Err(Error::shape(format!(
            "recurrent state width differs from {}",
            cfg.recurrent
        )));
    }
    let (cache, si_raw, sd_raw) = forward_position(params, h_si, h_sd, e_prev, state)?;
    let state = RecurrentState {
        si: cache.si_cell.output,
        sd: cache.sd.map(|c| c.cell.output),
    };
    Ok(StepOutput {
        si_raw,
        sd_raw,
        state,
    })
}

/// Runs the predictor left to right. `emit` receives the activated mixture for
/// position `k` and returns the embedding fed back as history for `k + 1`.
pub fn run_autoregressive<F>(
    phones: &PhoneSeq,
    speaker: Option<usize>,
    params: &PredictorParams,
    mut emit: F,
) -> Result<()>
where
    F: FnMut(usize, &DiagGmm) -> Result<Embedding>,
{
    let (h_si, h_sd) = encode(phones, speaker, params)?;
    let clamp = params.config.log_var_clamp;
    let mut state = RecurrentState::zeros(params.config.recurrent, speaker.is_some());
    let mut e_prev = params.start_embedding.clone();
    for k in 0..phones.len() {
        let h_sd_k = h_sd.as_ref().map(|h| h[k].as_slice());
        let out = step(&h_si[k], h_sd_k, &e_prev, &state, params)?;
        let gmm = gmm::activate_clamped(out.raw(), clamp)?;
        e_prev = emit(k, &gmm)?;
        state = out.state;
    }
    Ok(())
}

/// Per-phone mixtures under teacher forcing with `given` as history.
pub fn predict_gmm_sequence(
    phones: &PhoneSeq,
    speaker: Option<usize>,
    given: &[Embedding],
    params: &PredictorParams,
) -> Result<Vec<DiagGmm>> {
    check_phones(phones, params)?;
    check_embeddings(given, phones.len(), params.config.dim)?;
    let mut out = Vec::with_capacity(phones.len());
    run_autoregressive(phones, speaker, params, |k, gmm| {
        out.push(gmm.clone());
        Ok(given[k].clone())
    })?;
    Ok(out)
}

/// Free-running sampling; returns the embeddings and the component drawn at
/// each phone.
pub fn sample_sequence<R: Rng + ?Sized>(
    phones: &PhoneSeq,
    speaker: Option<usize>,
    params: &PredictorParams,
    rng: &mut R,
) -> Result<(Vec<Embedding>, Vec<usize>)> {
    let mut embeddings = Vec::with_capacity(phones.len());
    let mut components = Vec::with_capacity(phones.len());
    run_autoregressive(phones, speaker, params, |_, gmm| {
        let (e, j) = gmm::sample(gmm, rng);
        embeddings.push(e.clone());
        components.push(j);
        Ok(e)
    })?;
    Ok((embeddings, components))
}

/// Teacher-forced sequence negative log-likelihood and its gradient with
/// respect to every parameter array, by backpropagation through time.
///
/// Embeddings are constants: no gradient flows into them.
pub fn sequence_nll(
    phones: &PhoneSeq,
    speaker: Option<usize>,
    embeddings: &[Embedding],
    params: &PredictorParams,
) -> Result<(f64, PredictorParams)> {
    let mut grads = params.zeros_like();
    let loss = sequence_nll_acc(phones, speaker, embeddings, params, &mut grads)?;
    Ok((loss, grads))
}

/// Like [`sequence_nll`] but accumulates into an existing gradient buffer.
pub fn sequence_nll_acc(
    phones: &PhoneSeq,
    speaker: Option<usize>,
    embeddings: &[Embedding],
    params: &PredictorParams,
    grads: &mut PredictorParams,
) -> Result<f64> {
    let cfg = &params.config;
    let (m, d, r) = (cfg.components, cfg.dim, cfg.recurrent);
    check_phones(phones, params)?;
    check_embeddings(embeddings, phones.len(), d)?;
    let (h_si, h_sd) = encode(phones, speaker, params)?;
    let k_len = phones.len();

    // forward
    let mut caches = Vec::with_capacity(k_len);
    let mut raw_grads = Vec::with_capacity(k_len);
    let mut state = RecurrentState::zeros(r, speaker.is_some());
    let mut loss = 0.0;
    for k in 0..k_len {
        let e_prev = if k == 0 {
            &params.start_embedding
        } else {
            &embeddings[k - 1]
        };
        let h_sd_k = h_sd.as_ref().map(|x| x[k].as_slice());
        let (cache, si_raw, sd_raw) = forward_position(params, &h_si[k], h_sd_k, e_prev, &state)?;
        let raw = sd_raw.as_ref().unwrap_or(&si_raw);
        let (l, g) = gmm::nll_and_grad_clamped(raw, &embeddings[k], cfg.log_var_clamp)?;
        loss += l;
        raw_grads.push(g);
        state = RecurrentState {
            si: cache.si_cell.output.clone(),
            sd: cache.sd.as_ref().map(|c| c.cell.output.clone()),
        };
        caches.push(cache);
    }

    // backward
    let mut carry_si = vec![0.0; r];
    let mut carry_sd = vec![0.0; r];
    for k in (0..k_len).rev() {
        let cache = &caches[k];
        let g = &raw_grads[k];
        let mut d_si_head = vec![0.0; cfg.si_outputs()];

        if let Some(sd) = &cache.sd {
            let mut d_sd_head = vec![0.0; cfg.sd_outputs()];
            d_sd_head[..m].copy_from_slice(&g.alpha);
            let (_, si_means, si_log_vars) = split_si_head(&cache.si_head, m, d);
            // means: rows A at m, b at m+d; log-variances: C at m+2d, d at m+3d
            let blocks = [
                (
                    &g.means,
                    &sd.mean_act,
                    si_means,
                    m,
                    m,
                    &params.mean_map_weight,
                    &mut grads.mean_map_weight,
                    &mut grads.mean_map_bias,
                ),
                (
                    &g.log_vars,
                    &sd.log_var_act,
                    si_log_vars,
                    m + 2 * d,
                    m + m * d,
                    &params.log_var_map_weight,
                    &mut grads.log_var_map_weight,
                    &mut grads.log_var_map_bias,
                ),
            ];
            for (g_out, act, si_vals, head_off, si_off, map_w, d_map_w, d_map_b) in blocks {
                let scale = &sd.head[head_off..head_off + d];
                for i in 0..m {
                    let gi = &g_out[i * d..(i + 1) * d];
                    let ti = &act[i * d..(i + 1) * d];
                    outer_acc(d_map_w, d_map_b, gi, ti);
                    let mut dt = vec![0.0; d];
                    affine_transpose_acc(map_w, gi, &mut dt);
                    for c in 0..d {
                        let du = dt[c] * (1.0 - ti[c] * ti[c]);
                        d_sd_head[head_off + c] += du * si_vals[i * d + c];
                        d_sd_head[head_off + d + c] += du;
                        d_si_head[si_off + i * d + c] = du * scale[c];
                    }
                }
            }
            let spk = speaker.expect("sd cache implies a speaker");
            carry_sd = backprop_stream(
                params,
                grads,
                Head::SpeakerDependent,
                &d_sd_head,
                &sd.cell,
                &carry_sd,
                phones.0[k],
                Some(spk),
                k == 0,
            );
        } else {
            d_si_head[..m].copy_from_slice(&g.alpha);
            d_si_head[m..m + m * d].copy_from_slice(&g.means);
            d_si_head[m + m * d..].copy_from_slice(&g.log_vars);
        }

        carry_si = backprop_stream(
            params,
            grads,
            Head::SpeakerIndependent,
            &d_si_head,
            &cache.si_cell,
            &carry_si,
            phones.0[k],
            None,
            k == 0,
        );
    }
    Ok(loss)
}

#[derive(Clone, Copy)]
enum Head {
    SpeakerIndependent,
    SpeakerDependent,
}

/// Backpropagates a head-output gradient through the head affine and one cell
/// step of a stream. Accumulates parameter gradients (including the phone and
/// speaker rows of the context and, at the first position, the start vector)
/// and returns the gradient for the previous recurrent state.
#[allow(clippy::too_many_arguments)]
fn backprop_stream(
    params: &PredictorParams,
    grads: &mut PredictorParams,
    head: Head,
    d_head: &[f64],
    cell: &CellCache,
    carry: &[f64],
    phone: usize,
    speaker: Option<usize>,
    first: bool,
) -> Vec<f64> {
    let cfg = &params.config;
    let (h, d) = (cfg.hidden, cfg.dim);
    let (head_weight, d_weight, d_bias) = match head {
        Head::SpeakerIndependent => (&params.si_weight, &mut grads.si_weight, &mut grads.si_bias),
        Head::SpeakerDependent => (&params.sd_weight, &mut grads.sd_weight, &mut grads.sd_bias),
    };
    outer_acc(d_weight, d_bias, d_head, &cell.output);
    let mut d_r = carry.to_vec();
    affine_transpose_acc(head_weight, d_head, &mut d_r);
    let d_pre: Vec<f64> = d_r
        .iter()
        .zip(&cell.output)
        .map(|(g, y)| g * (1.0 - y * y))
        .collect();
    outer_acc(&mut grads.cell_weight, &mut grads.cell_bias, &d_pre, &cell.input);
    let mut d_input = vec![0.0; cfg.cell_input()];
    affine_transpose_acc(&params.cell_weight, &d_pre, &mut d_input);

    let d_context = &d_input[..h];
    for (g, dc) in grads.phone_table[phone * h..(phone + 1) * h].iter_mut().zip(d_context) {
        *g += dc;
    }
    if let Some(s) = speaker {
        for (g, dc) in grads.speaker_table[s * h..(s + 1) * h].iter_mut().zip(d_context) {
            *g += dc;
        }
    }
    if first {
        for (g, de) in grads.start_embedding.iter_mut().zip(&d_input[h..h + d]) {
            *g += de;
        }
    }
    d_input[h + d..].to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_params(cfg: &ModelConfig, seed: u64, scale: f64) -> PredictorParams {
        let mut p = PredictorParams::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, a) in p.arrays_mut() {
            for v in a.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = scale * z;
            }
        }
        p
    }

    fn random_embeddings(k: usize, d: usize, seed: u64) -> Vec<Embedding> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..k)
            .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect()
    }

    /// Loss evaluated through the forward-only path.
    fn forward_loss(
        phones: &PhoneSeq,
        speaker: Option<usize>,
        es: &[Embedding],
        p: &PredictorParams,
    ) -> f64 {
        predict_gmm_sequence(phones, speaker, es, p)
            .unwrap()
            .iter()
            .zip(es)
            .map(|(g, e)| -gmm::log_density(g, e).unwrap())
            .sum()
    }

    fn finite_difference_check(speaker: Option<usize>, seed: u64) {
        let cfg = ModelConfig::new(2, 2, 4, 5, 4, 3);
        let params = random_params(&cfg, seed, 0.5);
        let phones = PhoneSeq(vec![1, 3, 1]);
        let es = random_embeddings(3, 2, seed + 100);
        let (loss, grads) = sequence_nll(&phones, speaker, &es, &params).unwrap();
        assert!((loss - forward_loss(&phones, speaker, &es, &params)).abs() < 1e-10);
        let h = 1e-5;
        let mut probe = params.clone();
        for (name, analytic) in grads.arrays() {
            for i in 0..analytic.len() {
                let orig = params.array(name).unwrap()[i];
                probe.array_mut(name).unwrap()[i] = orig + h;
                let up = forward_loss(&phones, speaker, &es, &probe);
                probe.array_mut(name).unwrap()[i] = orig - h;
                let down = forward_loss(&phones, speaker, &es, &probe);
                probe.array_mut(name).unwrap()[i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic[i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(rel < 1e-3, "{name}[{i}]: analytic {a}, numeric {numeric}");
            }
        }
    }

    #[test]
    fn bptt_matches_finite_differences_single_speaker() {
        finite_difference_check(None, 11);
    }

    #[test]
    fn bptt_matches_finite_differences_multi_speaker() {
        finite_difference_check(Some(2), 12);
        finite_difference_check(Some(0), 13);
    }

    #[test]
    fn single_speaker_mode_leaves_speaker_arrays_untouched() {
        let cfg = ModelConfig::new(2, 2, 3, 3, 4, 2);
        let params = random_params(&cfg, 5, 0.3);
        let es = random_embeddings(4, 2, 6);
        let (_, g) = sequence_nll(&PhoneSeq(vec![0, 1, 2, 3]), None, &es, &params).unwrap();
        for name in ["speaker_table", "sd_weight", "sd_bias", "mean_map_weight", "log_var_map_bias"] {
            assert!(g.array(name).unwrap().iter().all(|v| *v == 0.0), "{name}");
        }
    }

    #[test]
    fn encode_modes() {
        let cfg = ModelConfig::new(1, 2, 3, 3, 4, 2);
        let mut params = random_params(&cfg, 1, 1.0);
        let phones = PhoneSeq(vec![0, 2, 3]);
        let (h_si, h_sd) = encode(&phones, None, &params).unwrap();
        assert!(h_sd.is_none());
        assert_eq!(h_si[1], params.phone_table[6..9].to_vec());

        let (_, h0) = encode(&phones, Some(0), &params).unwrap();
        let (_, h1) = encode(&phones, Some(1), &params).unwrap();
        assert_ne!(h0, h1);

        params.speaker_table[..3].fill(0.0);
        let (h_si, h_sd) = encode(&phones, Some(0), &params).unwrap();
        assert_eq!(h_si, h_sd.unwrap());
    }

    #[test]
    fn out_of_range_ids() {
        let cfg = ModelConfig::new(1, 2, 3, 3, 4, 2);
        let params = random_params(&cfg, 1, 1.0);
        assert!(matches!(
            encode(&PhoneSeq(vec![0, 4]), None, &params),
            Err(Error::Index { index: 4, .. })
        ));
        assert!(matches!(
            encode(&PhoneSeq(vec![0]), Some(2), &params),
            Err(Error::Index { index: 2, .. })
        ));
        let es = random_embeddings(0, 2, 0);
        assert!(matches!(
            sequence_nll(&PhoneSeq(vec![]), None, &es, &params),
            Err(Error::EmptySequence)
        ));
        let es = random_embeddings(2, 2, 0);
        assert!(matches!(
            predict_gmm_sequence(&PhoneSeq(vec![0]), None, &es, &params),
            Err(Error::Shape(_))
        ));
    }

    /// Params whose SD head emits constant `A = scale`, `b = 0`, and whose
    /// global maps are the identity.
    fn transform_params(cfg: &ModelConfig, scale: f64) -> PredictorParams {
        let mut p = random_params(cfg, 3, 0.4);
        let (m, d) = (cfg.components, cfg.dim);
        let r = cfg.recurrent;
        p.sd_weight[m * r..].fill(0.0);
        p.sd_bias[m..].fill(0.0);
        p.sd_bias[m..m + d].fill(scale);
        p.sd_bias[m + 2 * d..m + 3 * d].fill(scale);
        p.mean_map_weight.fill(0.0);
        p.log_var_map_weight.fill(0.0);
        for i in 0..d {
            p.mean_map_weight[i * d + i] = 1.0;
            p.log_var_map_weight[i * d + i] = 1.0;
        }
        p.mean_map_bias.fill(0.0);
        p.log_var_map_bias.fill(0.0);
        p
    }

    #[test]
    fn identity_transform_gives_tanh_of_si_mean() {
        let cfg = ModelConfig::new(3, 2, 3, 4, 2, 2);
        let p = transform_params(&cfg, 1.0);
        let (h_si, h_sd) = encode(&PhoneSeq(vec![1]), Some(1), &p).unwrap();
        let state = RecurrentState::zeros(4, true);
        let out = step(&h_si[0], Some(&h_sd.unwrap()[0]), &p.start_embedding, &state, &p).unwrap();
        let sd = out.sd_raw.unwrap();
        for (a, b) in sd.means.iter().zip(&out.si_raw.means) {
            assert!((a - b.tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn transform_analytic_value() {
        // D = 1, A = 2, b = 0, identity map, SI mean 0.5 -> tanh(1)
        let cfg = ModelConfig::new(1, 1, 2, 2, 1, 1);
        let mut p = transform_params(&cfg, 2.0);
        p.si_weight[2..4].fill(0.0); // mean row
        p.si_bias[1] = 0.5;
        let (h_si, h_sd) = encode(&PhoneSeq(vec![0]), Some(0), &p).unwrap();
        let state = RecurrentState::zeros(2, true);
        let out = step(&h_si[0], Some(&h_sd.unwrap()[0]), &p.start_embedding, &state, &p).unwrap();
        let sd = out.sd_raw.unwrap();
        assert!((sd.means[0] - 0.761_594_155_955_764_9).abs() < 1e-7);

        p.si_bias[1] = 0.0;
        let out = step(&h_si[0], None, &p.start_embedding, &RecurrentState::zeros(2, false), &p).unwrap();
        assert!(out.sd_raw.is_none());
    }

    #[test]
    fn transform_is_component_equivariant() {
        let cfg = ModelConfig::new(3, 2, 3, 4, 2, 2);
        let p = random_params(&cfg, 21, 0.6);
        let perm = [2usize, 0, 1];
        let (m, d, r) = (3, 2, 4);
        let mut q = p.clone();
        // permute the SI head rows for logits, means and log-variances
        for (new, &old) in perm.iter().enumerate() {
            let row = |base: usize, comp: usize, dd: usize| base + comp * d + dd;
            q.si_bias[new] = p.si_bias[old];
            q.si_weight[new * r..(new + 1) * r].copy_from_slice(&p.si_weight[old * r..(old + 1) * r]);
            for base in [m, m + m * d] {
                for dd in 0..d {
                    let (a, b) = (row(base, new, dd), row(base, old, dd));
                    q.si_bias[a] = p.si_bias[b];
                    q.si_weight[a * r..(a + 1) * r].copy_from_slice(&p.si_weight[b * r..(b + 1) * r]);
                }
            }
        }
        let phones = PhoneSeq(vec![0, 1]);
        let (h_si, h_sd) = encode(&phones, Some(1), &p).unwrap();
        let state = RecurrentState::zeros(r, true);
        let a = step(&h_si[0], Some(&h_sd.as_ref().unwrap()[0]), &p.start_embedding, &state, &p).unwrap();
        let b = step(&h_si[0], Some(&h_sd.as_ref().unwrap()[0]), &q.start_embedding, &state, &q).unwrap();
        let (sa, sb) = (a.sd_raw.unwrap(), b.sd_raw.unwrap());
        for (new, &old) in perm.iter().enumerate() {
            for dd in 0..d {
                assert_eq!(sb.means[new * d + dd], sa.means[old * d + dd]);
                assert_eq!(sb.log_vars[new * d + dd], sa.log_vars[old * d + dd]);
            }
        }
    }

    #[test]
    fn si_output_is_speaker_invariant() {
        let cfg = ModelConfig::new(2, 3, 4, 4, 5, 3);
        let p = random_params(&cfg, 8, 0.5);
        let phones = PhoneSeq(vec![4, 0, 2, 2]);
        let es = random_embeddings(4, 3, 9);
        let si_for = |speaker| {
            let (h_si, h_sd) = encode(&phones, speaker, &p).unwrap();
            let mut state = RecurrentState::zeros(4, speaker.is_some());
            let mut out = Vec::new();
            for k in 0..4 {
                let e_prev = if k == 0 { &p.start_embedding } else { &es[k - 1] };
                let s = step(&h_si[k], h_sd.as_ref().map(|h| h[k].as_slice()), e_prev, &state, &p).unwrap();
                out.push(s.si_raw.clone());
                state = s.state;
            }
            out
        };
        let base = si_for(None);
        assert_eq!(base, si_for(Some(0)));
        assert_eq!(base, si_for(Some(2)));
    }

    #[test]
    fn single_phone_single_component_reduces_to_gmm_loss() {
        let cfg = ModelConfig::new(1, 3, 3, 3, 2, 1);
        let p = random_params(&cfg, 4, 0.5);
        let es = random_embeddings(1, 3, 5);
        let phones = PhoneSeq(vec![1]);
        let (loss, _) = sequence_nll(&phones, None, &es, &p).unwrap();
        let (h_si, _) = encode(&phones, None, &p).unwrap();
        let out = step(&h_si[0], None, &p.start_embedding, &RecurrentState::zeros(3, false), &p).unwrap();
        let (direct, _) = gmm::nll_and_grad(&out.si_raw, &es[0]).unwrap();
        assert_eq!(loss, direct);
    }

    #[test]
    fn loss_depends_on_embedding_order() {
        let cfg = ModelConfig::new(2, 2, 3, 3, 2, 1);
        let p = random_params(&cfg, 14, 0.7);
        let phones = PhoneSeq(vec![0, 0, 0]);
        let es = random_embeddings(3, 2, 15);
        let mut shuffled = es.clone();
        shuffled.rotate_left(1);
        let (a, _) = sequence_nll(&phones, None, &es, &p).unwrap();
        let (b, _) = sequence_nll(&phones, None, &shuffled, &p).unwrap();
        assert!((a - b).abs() > 1e-6);
    }

    #[test]
    fn predicted_mixtures_are_valid_and_consistent() {
        let cfg = ModelConfig::new(4, 2, 3, 3, 3, 2);
        let p = random_params(&cfg, 16, 1.0);
        let phones = PhoneSeq(vec![0, 2, 1, 1, 0]);
        let es = random_embeddings(5, 2, 17);
        for speaker in [None, Some(1)] {
            let gmms = predict_gmm_sequence(&phones, speaker, &es, &p).unwrap();
            for g in &gmms {
                assert!((g.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            let (loss, _) = sequence_nll(&phones, speaker, &es, &p).unwrap();
            assert!((loss - forward_loss(&phones, speaker, &es, &p)).abs() < 1e-10);
        }
    }

    #[test]
    fn identity_transform_matches_single_speaker_mode() {
        let cfg = ModelConfig::new(3, 2, 4, 4, 3, 2);
        let mut p = random_params(&cfg, 30, 0.5);
        let (m, d, r) = (3, 2, 4);
        let eps = 1e-5;
        p.speaker_table[4..].fill(0.0);
        p.sd_weight[..m * r].copy_from_slice(&p.si_weight[..m * r]);
        p.sd_bias[..m].copy_from_slice(&p.si_bias[..m]);
        p.sd_weight[m * r..].fill(0.0);
        p.sd_bias[m..].fill(0.0);
        p.sd_bias[m..m + d].fill(eps);
        p.sd_bias[m + 2 * d..m + 3 * d].fill(eps);
        for map in [&mut p.mean_map_weight, &mut p.log_var_map_weight] {
            map.fill(0.0);
            for i in 0..d {
                map[i * d + i] = 1.0 / eps;
            }
        }
        p.mean_map_bias.fill(0.0);
        p.log_var_map_bias.fill(0.0);
        let phones = PhoneSeq(vec![2, 0, 1, 2]);
        let es = random_embeddings(4, 2, 31);
        let single = predict_gmm_sequence(&phones, None, &es, &p).unwrap();
        let multi = predict_gmm_sequence(&phones, Some(1), &es, &p).unwrap();
        for (a, b) in single.iter().zip(&multi) {
            for (x, y) in a.weights().iter().zip(b.weights()) {
                assert!((x - y).abs() < 1e-12);
            }
            for (x, y) in a.means().iter().zip(b.means()) {
                assert!((x - y).abs() < 1e-6, "{x} vs {y}");
            }
            for (x, y) in a.variances().iter().zip(b.variances()) {
                assert!((x / y - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let cfg = ModelConfig::new(3, 2, 3, 3, 3, 2);
        let p = random_params(&cfg, 40, 0.8);
        let phones = PhoneSeq(vec![0, 1, 2, 1]);
        for speaker in [None, Some(1)] {
            let a = sample_sequence(&phones, speaker, &p, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            let b = sample_sequence(&phones, speaker, &p, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn vanishing_variance_sampling_follows_mean_trajectory() {
        let mut cfg = ModelConfig::new(1, 2, 3, 3, 3, 1);
        cfg.log_var_clamp = (-80.0, 10.0);
        let mut p = random_params(&cfg, 41, 0.5);
        let (m, d, r) = (1, 2, 3);
        p.si_weight[(m + m * d) * r..].fill(0.0);
        p.si_bias[m + m * d..].fill(-70.0);
        let phones = PhoneSeq(vec![2, 0, 1, 1, 2]);
        let (sampled, comps) =
            sample_sequence(&phones, None, &p, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(comps.iter().all(|c| *c == 0));
        let mut means = Vec::new();
        run_autoregressive(&phones, None, &p, |_, g| {
            means.push(g.mean(0).to_vec());
            Ok(g.mean(0).to_vec())
        })
        .unwrap();
        for (s, mu) in sampled.iter().zip(&means) {
            for (a, b) in s.iter().zip(mu) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn sampled_component_frequencies_track_predicted_weights() {
        let cfg = ModelConfig::new(3, 2, 3, 3, 3, 1);
        let p = random_params(&cfg, 42, 0.8);
        let phones = PhoneSeq(vec![0, 1, 2, 0]);
        let n = 200;
        let mut counts = vec![vec![0.0; 3]; 4];
        let mut expected = vec![vec![0.0; 3]; 4];
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..n {
            let (es, comps) = sample_sequence(&phones, None, &p, &mut rng).unwrap();
            let gmms = predict_gmm_sequence(&phones, None, &es, &p).unwrap();
            for k in 0..4 {
                counts[k][comps[k]] += 1.0 / n as f64;
                for (e, w) in expected[k].iter_mut().zip(gmms[k].weights()) {
                    *e += w / n as f64;
                }
            }
        }
        for k in 0..4 {
            let tv: f64 = counts[k]
                .iter()
                .zip(&expected[k])
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / 2.0;
            assert!(tv < 0.05, "position {k}: tv {tv}");
        }
    }
}
