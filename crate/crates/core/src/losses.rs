//! Channel and token diversification losses and the combined objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

pub const DEFAULT_T_CDL: f64 = 1.0 / 14.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityConfig {
    pub lambda_cdl: f64,
    pub t_cdl: f64,
    pub lambda_s: f64,
    pub lambda_d: f64,
}

impl Default for DiversityConfig {
    fn default() -> Self {
        DiversityConfig {
            lambda_cdl: 0.01,
            t_cdl: DEFAULT_T_CDL,
            lambda_s: 0.05,
            lambda_d: 0.2,
        }
    }
}

impl DiversityConfig {
    /// All diversity terms switched off.
    pub fn none() -> Self {
        DiversityConfig {
            lambda_cdl: 0.0,
            lambda_s: 0.0,
            lambda_d: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_cdl > 0.0) {
            return Err(Error::Parameter(format!("t_cdl must be positive, got {}", self.t_cdl)));
        }
        for (name, v) in [
            ("lambda_cdl", self.lambda_cdl),
            ("lambda_s", self.lambda_s),
            ("lambda_d", self.lambda_d),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Parameter(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Proxy loss pulling each active channel token to its own anchor and away
/// from every anchor in the vocabulary.
///
/// `tokens` and `anchors` are the full `[m, D]` tables; only rows in
/// `active` contribute to the numerator.
pub fn cdl_loss(tape: &mut Tape, tokens: Var, anchors: Var, active: &[usize], t_cdl: f64) -> Result<Var> {
    if active.is_empty() {
        return Err(Error::Contract("cdl_loss needs at least one active channel".into()));
    }
    if !(t_cdl > 0.0) {
        return Err(Error::Parameter(format!("t_cdl must be positive, got {t_cdl}")));
    }
    let (m_tok, m_anc) = (tape.shape(tokens)[0], tape.shape(anchors)[0]);
    if m_tok != m_anc {
        return Err(Error::shape("cdl_loss", tape.shape(tokens), tape.shape(anchors)));
    }
    if let Some(&c) = active.iter().find(|&&c| c >= m_anc) {
        return Err(Error::Contract(format!("active channel {c} has no anchor (m = {m_anc})")));
    }
    let tok = tape.gather_rows(tokens, active)?;
    let tok = tape.l2_normalize(tok)?;
    let anc = tape.l2_normalize(anchors)?;
    let d = tape.pairwise_sq_dist(tok, anc)?;
    let logits = tape.scale(d, -1.0 / t_cdl);
    tape.cross_entropy(logits, active)
}

/// Upper-triangle pair masks over one image's tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct PairMasks {
    /// `[T, T]` weights `1/N_s` on same-channel pairs `i < j`, else 0.
    pub same: Vec<f64>,
    /// `[T, T]` weights `1/N_d` on cross-channel pairs `i < j`, else 0.
    pub cross: Vec<f64>,
    pub n_same: usize,
    pub n_cross: usize,
}

pub fn pair_masks(channel_map: &[usize]) -> PairMasks {
    let t = channel_map.len();
    let mut same = vec![0.0; t * t];
    let mut cross = vec![0.0; t * t];
    let (mut n_same, mut n_cross) = (0, 0);
    for i in 0..t {
        for j in i + 1..t {
            if channel_map[i] == channel_map[j] {
                same[i * t + j] = 1.0;
                n_same += 1;
            } else {
                cross[i * t + j] = 1.0;
                n_cross += 1;
            }
        }
    }
    if n_same > 0 {
        same.iter_mut().for_each(|w| *w /= n_same as f64);
    }
    if n_cross > 0 {
        cross.iter_mut().for_each(|w| *w /= n_cross as f64);
    }
    PairMasks {
        same,
        cross,
        n_same,
        n_cross,
    }
}

/// Handles from [`tdl_terms`]: per-image mean similarities and the loss.
pub struct TdlTerms {
    /// `[N]` same-channel means, if that term is active.
    pub l_same: Option<Var>,
    /// `[N]` cross-channel means, if that term is active.
    pub l_cross: Option<Var>,
    pub loss: Var,
    pub n_same: usize,
    pub n_cross: usize,
}

/// Token diversification loss over `n_images` images whose raw tokens are
/// stacked as `[n_images · |h|, D]`, with `channel_map` giving the channel
/// of each token within an image.
///
/// Per image, `λ_s·|L_s| + λ_d·|L_d|` where `L_s`, `L_d` are mean cosine
/// similarities over unordered same- and cross-channel pairs; the result
/// is the mean over images.
pub fn tdl_terms(
    tape: &mut Tape,
    raw_tokens: Var,
    n_images: usize,
    channel_map: &[usize],
    lambda_s: f64,
    lambda_d: f64,
) -> Result<TdlTerms> {
    let rows = tape.shape(raw_tokens)[0];
    if n_images == 0 || rows != n_images * channel_map.len() {
        return Err(Error::Contract(format!(
            "{rows} tokens do not split into {n_images} images of {}",
            channel_map.len()
        )));
    }
    if channel_map.len() < 2 {
        return Err(Error::Contract("tdl_loss needs at least two tokens per image".into()));
    }
    let masks = pair_masks(channel_map);
    if lambda_s > 0.0 && masks.n_same == 0 {
        return Err(Error::Contract("no same-channel token pair for an active λ_s".into()));
    }
    if lambda_d > 0.0 && masks.n_cross == 0 {
        return Err(Error::Contract("no cross-channel token pair for an active λ_d".into()));
    }

    let u = tape.l2_normalize(raw_tokens)?;
    let gram = tape.batched_gram(u, n_images)?;
    let mut parts = Vec::new();
    let mut term = |tape: &mut Tape, weights: &[f64], lambda: f64| -> Result<Option<Var>> {
        if lambda <= 0.0 {
            return Ok(None);
        }
        let l = tape.chunk_dot(gram, weights)?;
        let a = tape.abs(l);
        let a = tape.mean(a);
        parts.push(tape.scale(a, lambda));
        Ok(Some(l))
    };
    let l_same = term(tape, &masks.same, lambda_s)?;
    let l_cross = term(tape, &masks.cross, lambda_d)?;
    let loss = match parts.as_slice() {
        [] => {
            let z = tape.scale(gram, 0.0);
            tape.sum(z)
        }
        [a] => *a,
        [a, b] => tape.add(*a, *b)?,
        _ => unreachable!(),
    };
    Ok(TdlTerms {
        l_same,
        l_cross,
        loss,
        n_same: masks.n_same,
        n_cross: masks.n_cross,
    })
}

pub fn tdl_loss(
    tape: &mut Tape,
    raw_tokens: Var,
    n_images: usize,
    channel_map: &[usize],
    lambda_s: f64,
    lambda_d: f64,
) -> Result<Var> {
    Ok(tdl_terms(tape, raw_tokens, n_images, channel_map, lambda_s, lambda_d)?.loss)
}

/// `task + λ_cdl · cdl + tdl`; a non-finite component is a numeric error
/// naming it.
pub fn total_loss(tape: &mut Tape, task: Var, cdl: Option<Var>, tdl: Option<Var>, lambda_cdl: f64) -> Result<Var> {
    for (name, v) in [("task_loss", Some(task)), ("cdl", cdl), ("tdl", tdl)] {
        if let Some(v) = v {
            if !tape.value(v).item().is_finite() {
                return Err(Error::numeric(name, format!("loss component is {}", tape.value(v).item())));
            }
        }
    }
    let mut total = task;
    if let Some(c) = cdl {
        let c = tape.scale(c, lambda_cdl);
        total = tape.add(total, c)?;
    }
    if let Some(t) = tdl {
        total = tape.add(total, t)?;
    }
    Ok(total)
}
