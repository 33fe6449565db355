//! Per-batch channel-subset samplers.
//!
//! * `none` keeps every channel.
//! * HCS draws a size `k ~ U{1..m}` and then a uniform `k`-subset.
//! * DCS draws `k ~ U{1..m}` and a uniform anchor channel, then `k − 1`
//!   companions from the other `m − 1` channels with probabilities
//!   `softmax((1 − s) / t)`, where `s` holds cosine similarities of the
//!   anchor's feature to each other channel's feature. Companions are drawn
//!   sequentially without replacement (draw, remove, renormalize).

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::{dot, softmax_row};

pub const DEFAULT_T_DCS: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    None,
    Hcs,
    #[default]
    Dcs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    #[default]
    ChannelTokens,
    PatchTokenMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    pub t_dcs: f64,
    pub feature_source: FeatureSource,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        SamplerSpec {
            kind: SamplerKind::Dcs,
            t_dcs: DEFAULT_T_DCS,
            feature_source: FeatureSource::ChannelTokens,
        }
    }
}

impl SamplerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kind == SamplerKind::Dcs && !(self.t_dcs > 0.0) {
            return Err(Error::Parameter(format!("t_dcs must be positive, got {}", self.t_dcs)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubsetSample {
    /// Sorted, distinct channel indices.
    pub channels: Vec<usize>,
    pub anchor: Option<usize>,
    pub k: usize,
}

pub fn all_channels(m: usize) -> SubsetSample {
    SubsetSample {
        channels: (0..m).collect(),
        anchor: None,
        k: m,
    }
}

pub fn hcs_sample<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Result<SubsetSample> {
    if m == 0 {
        return Err(Error::Parameter("cannot sample from zero channels".into()));
    }
    let k = rng.random_range(1..=m);
    let mut channels = index::sample(rng, m, k).into_vec();
    channels.sort_unstable();
    Ok(SubsetSample {
        channels,
        anchor: None,
        k,
    })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

fn check_features(features: &[Vec<f64>]) -> Result<()> {
    if features.is_empty() {
        return Err(Error::Parameter("cannot sample from zero channels".into()));
    }
    for (i, f) in features.iter().enumerate() {
        if !(dot(f, f).sqrt() > 0.0) {
            return Err(Error::Degenerate(format!("feature of channel {i} has zero norm")));
        }
    }
    Ok(())
}

/// The `m − 1` non-anchor channels and their companion logits `(1 − s) / t`.
fn companion_logits(features: &[Vec<f64>], anchor: usize, t_dcs: f64) -> (Vec<usize>, Vec<f64>) {
    (0..features.len())
        .filter(|&i| i != anchor)
        .map(|i| (i, (1.0 - cosine(&features[anchor], &features[i])) / t_dcs))
        .unzip()
}

/// First-draw companion probabilities for a given anchor, in channel order
/// with the anchor omitted.
pub fn dcs_companion_probs(features: &[Vec<f64>], anchor: usize, t_dcs: f64) -> Result<(Vec<usize>, Vec<f64>)> {
    check_features(features)?;
    if !(t_dcs > 0.0) {
        return Err(Error::Parameter(format!("t_dcs must be positive, got {t_dcs}")));
    }
    if anchor >= features.len() {
        return Err(Error::Parameter(format!("anchor {anchor} out of range")));
    }
    let (others, mut p) = companion_logits(features, anchor, t_dcs);
    if !p.is_empty() {
        softmax_row(&mut p, 1.0);
    }
    Ok((others, p))
}

pub fn dcs_sample<R: Rng + ?Sized>(features: &[Vec<f64>], t_dcs: f64, rng: &mut R) -> Result<SubsetSample> {
    check_features(features)?;
    if !(t_dcs > 0.0) {
        return Err(Error::Parameter(format!("t_dcs must be positive, got {t_dcs}")));
    }
    let m = features.len();
    let k = rng.random_range(1..=m);
    let anchor = rng.random_range(0..m);
    let (mut pool, mut logits) = companion_logits(features, anchor, t_dcs);
    let mut channels = vec![anchor];
    for _ in 1..k {
        // Renormalizing over the remaining logits is the same as dividing
        // the remaining probabilities by their sum, but cannot underflow to
        // an all-zero pool at tiny temperatures.
        let mut p = logits.clone();
        softmax_row(&mut p, 1.0);
        let pick = draw_index(&p, rng);
        channels.push(pool.remove(pick));
        logits.remove(pick);
    }
    channels.sort_unstable();
    Ok(SubsetSample {
        channels,
        anchor: Some(anchor),
        k,
    })
}

fn draw_index<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let total: f64 = p.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, &w) in p.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap at the top; take the last positive weight
    p.iter().rposition(|&w| w > 0.0).unwrap_or(p.len() - 1)
}

/// Channel information a sampler may consult.
#[derive(Clone, Copy, Debug)]
pub enum ChannelSource<'a> {
    Count(usize),
    Features(&'a [Vec<f64>]),
}

impl ChannelSource<'_> {
    pub fn m(&self) -> usize {
        match self {
            ChannelSource::Count(m) => *m,
            ChannelSource::Features(f) => f.len(),
        }
    }
}

/// Draws one subset according to `spec`.
pub fn sample_subset<R: Rng + ?Sized>(spec: &SamplerSpec, source: ChannelSource<'_>, rng: &mut R) -> Result<SubsetSample> {
    match spec.kind {
        SamplerKind::None => Ok(all_channels(source.m())),
        SamplerKind::Hcs => hcs_sample(source.m(), rng),
        SamplerKind::Dcs => match source {
            ChannelSource::Features(f) => dcs_sample(f, spec.t_dcs, rng),
            ChannelSource::Count(_) => Err(Error::Parameter("dcs sampling needs channel features".into())),
        },
    }
}

/// Fraction of `trials` in which each channel is included.
pub fn inclusion_frequencies<R: Rng + ?Sized>(
    spec: &SamplerSpec,
    source: ChannelSource<'_>,
    trials: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if trials == 0 {
        return Err(Error::Parameter("trials must be at least 1".into()));
    }
    let mut counts = vec![0u64; source.m()];
    for _ in 0..trials {
        for c in sample_subset(spec, source, rng)?.channels {
            counts[c] += 1;
        }
    }
    Ok(counts.iter().map(|&c| c as f64 / trials as f64).collect())
}

/// Inclusion probability of every channel under HCS: `E[k] / m`.
pub fn hcs_inclusion_probability(m: usize) -> f64 {
    (m as f64 + 1.0) / (2.0 * m as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn single_channel_is_forced() {
        let mut r = rng::stream(0, "t", 0);
        for _ in 0..20 {
            let s = hcs_sample(1, &mut r).unwrap();
            assert_eq!((s.channels.as_slice(), s.k), (&[0][..], 1));
            for t in [1e-6, 0.1, 1e6] {
                let d = dcs_sample(&[vec![1.0, 2.0]], t, &mut r).unwrap();
                assert_eq!(d.channels, vec![0]);
                assert_eq!(d.anchor, Some(0));
            }
        }
    }

    #[test]
    fn errors() {
        let mut r = rng::stream(0, "t", 0);
        assert!(matches!(hcs_sample(0, &mut r), Err(Error::Parameter(_))));
        let f = vec![vec![1.0, 0.0], vec![0.0, 0.0]];
        assert!(matches!(dcs_sample(&f, 0.1, &mut r), Err(Error::Degenerate(_))));
        let f = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(matches!(dcs_sample(&f, 0.0, &mut r), Err(Error::Parameter(_))));
    }

    #[test]
    fn subsets_are_valid() {
        let mut r = rng::stream(1, "t", 0);
        let feats: Vec<Vec<f64>> = (0..7).map(|i| vec![1.0, i as f64, (i * i) as f64 * 0.1]).collect();
        for _ in 0..2000 {
            let s = dcs_sample(&feats, 0.1, &mut r).unwrap();
            assert_eq!(s.channels.len(), s.k);
            assert!(s.channels.windows(2).all(|w| w[0] < w[1]));
            assert!(s.channels.contains(&s.anchor.unwrap()));
            let h = hcs_sample(7, &mut r).unwrap();
            assert_eq!(h.channels.len(), h.k);
            assert!(h.channels.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn none_sampler_always_includes_everything() {
        let spec = SamplerSpec {
            kind: SamplerKind::None,
            ..SamplerSpec::default()
        };
        let mut r = rng::stream(0, "t", 0);
        let f = inclusion_frequencies(&spec, ChannelSource::Count(5), 10, &mut r).unwrap();
        assert_eq!(f, vec![1.0; 5]);
    }

    #[test]
    fn companion_probs_match_direct_softmax() {
        // anchor 0 with cosine similarities [0.9, 0.1, 0.5] to channels 1..3
        let feats = vec![
            vec![1.0, 0.0],
            vec![0.9, (1.0f64 - 0.81).sqrt()],
            vec![0.1, (1.0f64 - 0.01).sqrt()],
            vec![0.5, (1.0f64 - 0.25).sqrt()],
        ];
        let (others, p) = dcs_companion_probs(&feats, 0, 0.1).unwrap();
        assert_eq!(others, vec![1, 2, 3]);
        let want = [3.293_204_39e-4, 9.816_903_93e-1, 1.798_028_67e-2];
        for (a, b) in p.iter().zip(want) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}
