//! Monte-Carlo checks of the channel samplers against their analytic laws.

use chanvit_core::rng;
use chanvit_core::sampling::{
    dcs_sample, hcs_inclusion_probability, hcs_sample, inclusion_frequencies, ChannelSource, SamplerKind,
    SamplerSpec,
};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

fn chi_square_p(observed: &[u64], expected_probs: &[f64]) -> f64 {
    let n: u64 = observed.iter().sum();
    let stat: f64 = observed
        .iter()
        .zip(expected_probs)
        .map(|(&o, &p)| {
            let e = p * n as f64;
            (o as f64 - e).powi(2) / e
        })
        .sum();
    ChiSquared::new((observed.len() - 1) as f64).unwrap().sf(stat)
}

fn binomial(n: u64, k: u64) -> u64 {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

fn subset_code(channels: &[usize]) -> usize {
    channels.iter().map(|c| 1 << c).sum()
}

/// HCS probability of each non-empty subset of `m` channels, indexed by bitmask.
fn hcs_subset_law(m: usize) -> Vec<f64> {
    (1..1usize << m)
        .map(|mask| {
            let k = mask.count_ones() as u64;
            1.0 / m as f64 / binomial(m as u64, k) as f64
        })
        .collect()
}

fn spread_features(m: usize, seed: u64) -> Vec<Vec<f64>> {
    use rand_distr::{Distribution, StandardNormal};
    let mut r = rng::stream(seed, "features", 0);
    (0..m).map(|_| (0..8).map(|_| StandardNormal.sample(&mut r)).collect()).collect()
}

#[test]
fn hcs_inclusion_matches_expected_subset_size() {
    let mut r = rng::stream(1, "hcs", 0);
    let spec = SamplerSpec {
        kind: SamplerKind::Hcs,
        ..SamplerSpec::default()
    };
    let f = inclusion_frequencies(&spec, ChannelSource::Count(8), 200_000, &mut r).unwrap();
    assert_eq!(hcs_inclusion_probability(8), 0.5625);
    for v in &f {
        assert!((v - 0.5625).abs() < 0.005, "{f:?}");
    }
}

#[test]
fn subset_size_is_uniform_for_hcs_and_dcs() {
    let m = 4;
    let feats = spread_features(m, 3);
    let mut r = rng::stream(2, "k", 0);
    let (mut hk, mut dk) = (vec![0u64; m], vec![0u64; m]);
    for _ in 0..200_000 {
        hk[hcs_sample(m, &mut r).unwrap().k - 1] += 1;
        dk[dcs_sample(&feats, 0.1, &mut r).unwrap().k - 1] += 1;
    }
    let uniform = vec![1.0 / m as f64; m];
    let (ph, pd) = (chi_square_p(&hk, &uniform), chi_square_p(&dk, &uniform));
    assert!(ph > 0.01, "hcs p = {ph}");
    assert!(pd > 0.01, "dcs p = {pd}");
}

#[test]
fn hcs_subsets_follow_the_two_stage_law() {
    let m = 4;
    let mut r = rng::stream(4, "law", 0);
    let mut counts = vec![0u64; (1 << m) - 1];
    for _ in 0..200_000 {
        counts[subset_code(&hcs_sample(m, &mut r).unwrap().channels) - 1] += 1;
    }
    let p = chi_square_p(&counts, &hcs_subset_law(m));
    assert!(p > 0.01, "p = {p}");
}

#[test]
fn dcs_at_high_temperature_reduces_to_hcs() {
    let m = 4;
    let feats = spread_features(m, 5);
    let mut r = rng::stream(6, "hot", 0);
    let mut counts = vec![0u64; (1 << m) - 1];
    for _ in 0..200_000 {
        counts[subset_code(&dcs_sample(&feats, 1e6, &mut r).unwrap().channels) - 1] += 1;
    }
    let p = chi_square_p(&counts, &hcs_subset_law(m));
    assert!(p > 0.01, "p = {p}");
}

#[test]
fn dcs_companion_frequencies_match_softmax_of_dissimilarity() {
    // Anchor 0 has cosine similarities [0.9, 0.1, 0.5] to channels 1, 2, 3.
    let feats = vec![
        vec![1.0, 0.0],
        vec![0.9, (1.0f64 - 0.81).sqrt()],
        vec![0.1, (1.0f64 - 0.01).sqrt()],
        vec![0.5, (1.0f64 - 0.25).sqrt()],
    ];
    let want = [3.293_204_39e-4, 9.816_903_93e-1, 1.798_028_67e-2];
    let mut r = rng::stream(7, "cond", 0);
    let mut counts = [0u64; 3];
    let mut n = 0u64;
    while n < 100_000 {
        let s = dcs_sample(&feats, 0.1, &mut r).unwrap();
        if s.anchor == Some(0) && s.k == 2 {
            counts[s.channels[1] - 1] += 1;
            n += 1;
        }
    }
    for (c, w) in counts.iter().zip(want) {
        let f = *c as f64 / n as f64;
        assert!((f - w).abs() < 0.005, "{f} vs {w}");
    }
}

#[test]
fn dcs_at_low_temperature_picks_the_least_similar_companion() {
    let feats = spread_features(5, 8);
    let mut r = rng::stream(9, "cold", 0);
    let (mut hits, mut n) = (0u64, 0u64);
    while n < 10_000 {
        let s = dcs_sample(&feats, 1e-6, &mut r).unwrap();
        if s.k != 2 {
            continue;
        }
        let a = s.anchor.unwrap();
        let cos = |i: usize| {
            let d = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
            d(&feats[a], &feats[i]) / (d(&feats[a], &feats[a]) * d(&feats[i], &feats[i])).sqrt()
        };
        let argmin = (0..5)
            .filter(|&i| i != a)
            .min_by(|&i, &j| cos(i).partial_cmp(&cos(j)).unwrap())
            .unwrap();
        let companion = *s.channels.iter().find(|&&c| c != a).unwrap();
        hits += u64::from(companion == argmin);
        n += 1;
    }
    assert!(hits as f64 / n as f64 >= 0.999, "{hits}/{n}");
}

#[test]
fn dissimilar_channel_is_sampled_more_often() {
    // Five mutually similar channels and one orthogonal outlier.
    let mut feats: Vec<Vec<f64>> = (0..5).map(|i| vec![1.0, 0.05 * i as f64, 0.0]).collect();
    feats.push(vec![0.0, 0.0, 1.0]);
    let spec = SamplerSpec::default();
    let trials = 50_000;
    let mut r = rng::stream(10, "outlier", 0);
    let f = inclusion_frequencies(&spec, ChannelSource::Features(&feats), trials, &mut r).unwrap();
    let mean = f.iter().sum::<f64>() / f.len() as f64;
    let se = (mean * (1.0 - mean) / trials as f64).sqrt();
    let z = (f[5] - mean) / se;
    let p = Normal::standard().sf(z) * 2.0;
    assert!(f[5] > mean && p < 0.01, "freqs {f:?}, p {p}");
}
