//! Post-hoc diagnostics on trained checkpoints, emitted as CSV tables.

use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{forward, ModelState};
use crate::sampling::hcs_inclusion_probability;
use crate::train::csv_err;

pub const MI_FILE: &str = "mi.csv";
pub const TOKEN_HIST_FILE: &str = "token_hist.csv";
pub const ATTENTION_FILE: &str = "attention.csv";
pub const SAMPLING_FREQ_FILE: &str = "sampling_freq.csv";
pub const DEFAULT_MI_BINS: usize = 16;

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

fn finish(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn row<I, S>(w: &mut csv::Writer<std::fs::File>, path: &Path, fields: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    w.write_record(fields).map_err(|e| csv_err(path, e))
}

fn value_range<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> (f64, f64) {
    rows.into_iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

fn bin_of(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    (((v - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1)
}

/// Plug-in mutual information (nats) of paired samples `(x[d], y[d])`
/// binned into a `bins × bins` grid over `[lo, hi]` on both axes.
pub fn histogram_mi(x: &[f64], y: &[f64], bins: usize, lo: f64, hi: f64) -> Result<f64> {
    if bins < 2 {
        return Err(Error::Parameter(format!("need at least 2 bins, got {bins}")));
    }
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Contract(format!("paired samples of lengths {} and {}", x.len(), y.len())));
    }
    if !(hi > lo) {
        return Err(Error::Degenerate("sample range is empty".into()));
    }
    let mut joint = vec![0usize; bins * bins];
    for (&a, &b) in x.iter().zip(y) {
        joint[bin_of(a, lo, hi, bins) * bins + bin_of(b, lo, hi, bins)] += 1;
    }
    let n = x.len() as f64;
    let mut px = vec![0.0; bins];
    let mut py = vec![0.0; bins];
    for i in 0..bins {
        for j in 0..bins {
            let p = joint[i * bins + j] as f64 / n;
            px[i] += p;
            py[j] += p;
        }
    }
    let mut mi = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            let c = joint[i * bins + j];
            if c > 0 {
                let p = c as f64 / n;
                mi += p * (p / (px[i] * py[j])).ln();
            }
        }
    }
    Ok(mi.max(0.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiMatrix {
    /// `m × m`, row-major.
    pub values: Vec<f64>,
    pub m: usize,
    pub bins: usize,
    pub range: (f64, f64),
}

impl MiMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.m + j]
    }

    /// Mean over `i ≠ j`; the diagonal is excluded.
    pub fn off_diagonal_mean(&self) -> f64 {
        if self.m < 2 {
            return 0.0;
        }
        let mut s = 0.0;
        for i in 0..self.m {
            for j in 0..self.m {
                if i != j {
                    s += self.get(i, j);
                }
            }
        }
        s / (self.m * (self.m - 1)) as f64
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = writer(path)?;
        row(&mut w, path, ["channel_a", "channel_b", "mi"])?;
        for i in 0..self.m {
            for j in 0..self.m {
                row(&mut w, path, [i.to_string(), j.to_string(), self.get(i, j).to_string()])?;
            }
        }
        finish(w, path)
    }
}

/// Mutual information between every pair of token rows, treating the `D`
/// paired components as samples over one shared global value range.
pub fn mi_matrix(tokens: &[Vec<f64>], bins: usize) -> Result<MiMatrix> {
    let m = tokens.len();
    let (lo, hi) = value_range(tokens.iter().map(Vec::as_slice));
    if !(hi > lo) {
        return Err(Error::Degenerate("channel tokens are constant; MI range is empty".into()));
    }
    let mut values = vec![0.0; m * m];
    for i in 0..m {
        for j in i..m {
            let v = histogram_mi(&tokens[i], &tokens[j], bins, lo, hi)?;
            values[i * m + j] = v;
            values[j * m + i] = v;
        }
    }
    Ok(MiMatrix {
        values,
        m,
        bins,
        range: (lo, hi),
    })
}

pub fn channel_token_mi_matrix(state: &ModelState, bins: usize) -> Result<MiMatrix> {
    mi_matrix(&state.channel_token_rows(), bins)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenHistograms {
    /// `bins + 1` shared edges.
    pub edges: Vec<f64>,
    /// Per channel, per bin.
    pub counts: Vec<Vec<usize>>,
}

impl TokenHistograms {
    /// Bins with a nonzero count, summed over channels.
    pub fn occupied_bins(&self) -> usize {
        self.counts.iter().flatten().filter(|&&c| c > 0).count()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = writer(path)?;
        row(&mut w, path, ["channel", "bin_left", "bin_right", "count"])?;
        for (c, counts) in self.counts.iter().enumerate() {
            for (b, n) in counts.iter().enumerate() {
                row(
                    &mut w,
                    path,
                    [c.to_string(), self.edges[b].to_string(), self.edges[b + 1].to_string(), n.to_string()],
                )?;
            }
        }
        finish(w, path)
    }
}

/// Histograms of each channel token's components over the global range of
/// all tokens.
pub fn token_histograms(tokens: &[Vec<f64>], bins: usize) -> Result<TokenHistograms> {
    if bins < 2 {
        return Err(Error::Parameter(format!("need at least 2 bins, got {bins}")));
    }
    let (lo, hi) = value_range(tokens.iter().map(Vec::as_slice));
    // a constant table still gets a well-formed (unit-width) range
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let edges = (0..=bins).map(|b| lo + (hi - lo) * b as f64 / bins as f64).collect();
    let counts = tokens
        .iter()
        .map(|t| {
            let mut c = vec![0; bins];
            for &v in t {
                c[bin_of(v, lo, hi, bins)] += 1;
            }
            c
        })
        .collect();
    Ok(TokenHistograms { edges, counts })
}

pub fn channel_token_histograms(state: &ModelState, bins: usize) -> Result<TokenHistograms> {
    token_histograms(&state.channel_token_rows(), bins)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionReport {
    pub layers: Vec<usize>,
    pub channels: Vec<usize>,
    /// Per reported layer, mass per channel (aligned with `channels`).
    pub mass: Vec<Vec<f64>>,
}

impl AttentionReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = writer(path)?;
        row(&mut w, path, ["layer", "channel", "mass"])?;
        for (l, masses) in self.layers.iter().zip(&self.mass) {
            for (c, v) in self.channels.iter().zip(masses) {
                row(&mut w, path, [l.to_string(), c.to_string(), v.to_string()])?;
            }
        }
        finish(w, path)
    }
}

/// Shannon entropy (nats) of a mass vector.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum()
}

/// `[CLS]` attention mass per channel, averaged over every image of `ds`.
pub fn attention_report(
    state: &ModelState,
    ds: &Dataset,
    channels: &[usize],
    layers: &[usize],
    batch_size: usize,
) -> Result<AttentionReport> {
    if let Some(&l) = layers.iter().find(|&&l| l >= state.config.depth) {
        return Err(Error::Parameter(format!("layer {l} out of range ({} layers)", state.config.depth)));
    }
    if channels.is_empty() || batch_size == 0 || ds.is_empty() {
        return Err(Error::Parameter("need channels, a positive batch size and a non-empty dataset".into()));
    }
    let mut sums = vec![vec![0.0; channels.len()]; layers.len()];
    let ids: Vec<usize> = (0..ds.len()).collect();
    for chunk in ids.chunks(batch_size) {
        let batch = ds.batch(chunk, channels)?;
        let trace = forward(&batch, state, true)?;
        for (s, &l) in sums.iter_mut().zip(layers) {
            for img in trace.cls_attention_by_channel_per_image(l)? {
                s.iter_mut().zip(&img).for_each(|(a, v)| *a += v);
            }
        }
    }
    let n = ds.len() as f64;
    Ok(AttentionReport {
        layers: layers.to_vec(),
        channels: channels.to_vec(),
        mass: sums.into_iter().map(|s| s.into_iter().map(|v| v / n).collect()).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingFrequency {
    pub frequency: Vec<f64>,
    pub hcs_reference: f64,
}

impl SamplingFrequency {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = writer(path)?;
        row(&mut w, path, ["channel", "frequency", "hcs_reference"])?;
        for (c, f) in self.frequency.iter().enumerate() {
            row(&mut w, path, [c.to_string(), f.to_string(), self.hcs_reference.to_string()])?;
        }
        finish(w, path)
    }
}

/// Per-channel fraction of training batches that included the channel.
pub fn sampling_frequency_report(counts: &[u64], batches: u64) -> Result<SamplingFrequency> {
    if batches == 0 || counts.is_empty() {
        return Err(Error::Parameter("sampling counters are empty".into()));
    }
    Ok(SamplingFrequency {
        frequency: counts.iter().map(|&c| c as f64 / batches as f64).collect(),
        hcs_reference: hcs_inclusion_probability(counts.len()),
    })
}

/// `channel,frequency` table as produced by `sample-stats`.
pub fn write_frequency_csv(freq: &[f64], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    row(&mut w, path, ["channel", "frequency"])?;
    for (c, f) in freq.iter().enumerate() {
        row(&mut w, path, [c.to_string(), f.to_string()])?;
    }
    finish(w, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_rows_give_marginal_entropy() {
        let x: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin()).collect();
        let mi = mi_matrix(&[x.clone(), x.clone()], 8).unwrap();
        let (lo, hi) = mi.range;
        let mut counts = [0usize; 8];
        x.iter().for_each(|&v| counts[bin_of(v, lo, hi, 8)] += 1);
        let p: Vec<f64> = counts.iter().map(|&c| c as f64 / 64.0).collect();
        assert!((mi.get(0, 1) - entropy(&p)).abs() < 1e-12);
        assert!((mi.get(0, 0) - mi.get(0, 1)).abs() < 1e-12);
    }

    #[test]
    fn constant_tokens_are_degenerate() {
        assert!(matches!(mi_matrix(&[vec![1.0; 4], vec![1.0; 4]], 4), Err(Error::Degenerate(_))));
    }

    #[test]
    fn frequencies_normalize_by_batches() {
        let f = sampling_frequency_report(&[10, 5, 0], 10).unwrap();
        assert_eq!(f.frequency, vec![1.0, 0.5, 0.0]);
        assert!((f.hcs_reference - 4.0 / 6.0).abs() < 1e-15);
    }
}
