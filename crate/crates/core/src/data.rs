//! Variable-channel image data: vocabulary, the synthetic benchmark, the
//! on-disk format and per-batch channel restriction.
//!
//! The synthetic task has six 32×32 channels and eight classes given by three
//! bits. Channels 0 and 1 both carry bit 0 (a redundant pair), channel 2
//! carries bit 1, channel 3 carries bit 2, and channels 4 and 5 are noise.
//! A bit is a Gaussian blob centred at (8, 8) for 0 or (24, 24) for 1.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const SYNTH_CHANNELS: usize = 6;
pub const SYNTH_SIZE: usize = 32;
pub const SYNTH_CLASSES: usize = 8;
pub const BLOB_SIGMA: f64 = 3.0;
pub const BLOB_CENTERS: [(f64, f64); 2] = [(8.0, 8.0), (24.0, 24.0)];
/// Channels used by the "Partial" evaluation protocol: one of the redundant
/// pair plus both unique-information channels.
pub const PARTIAL_CHANNELS: [usize; 3] = [0, 2, 3];

const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const SAMPLES: &str = "samples.bin";
const LABELS: &str = "labels.bin";

/// Which label bit a synthetic channel encodes, if any.
pub fn synth_channel_bit(channel: usize) -> Option<usize> {
    match channel {
        0 | 1 => Some(0),
        2 => Some(1),
        3 => Some(2),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelVocabulary {
    names: Vec<String>,
}

impl ChannelVocabulary {
    pub fn new(names: Vec<String>) -> Result<Self> {
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::Contract(format!("duplicate channel name {n:?}")));
            }
        }
        Ok(ChannelVocabulary { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn all(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct McImage {
    pub channel_indices: Vec<usize>,
    /// One H×W plane per entry of `channel_indices`.
    pub planes: Vec<Vec<f32>>,
    pub label: usize,
}

impl McImage {
    pub fn plane(&self, channel: usize) -> Option<&[f32]> {
        self.channel_indices
            .binary_search(&channel)
            .ok()
            .map(|i| self.planes[i].as_slice())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocab: ChannelVocabulary,
    pub height: usize,
    pub width: usize,
    pub classes: Vec<String>,
    pub samples: Vec<McImage>,
    pub split: Split,
    pub seed: u64,
    pub noise_sigma: f64,
}

/// Images restricted to one common channel subset.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `N × |channels| × H × W`, row-major.
    pub planes: Vec<f64>,
    pub labels: Vec<usize>,
    pub channels: Vec<usize>,
    pub height: usize,
    pub width: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn plane(&self, image: usize, slot: usize) -> &[f64] {
        let hw = self.height * self.width;
        let off = (image * self.channels.len() + slot) * hw;
        &self.planes[off..off + hw]
    }

    /// Keeps only `subset` (which must be drawn from this batch's channels),
    /// in the order given.
    pub fn restrict(&self, subset: &[usize]) -> Result<Batch> {
        if subset.is_empty() {
            return Err(Error::Contract("channel subset is empty".into()));
        }
        let slots = subset
            .iter()
            .map(|c| {
                self.channels
                    .iter()
                    .position(|x| x == c)
                    .ok_or_else(|| Error::Contract(format!("channel {c} not in batch subset {:?}", self.channels)))
            })
            .collect::<Result<Vec<_>>>()?;
        let hw = self.height * self.width;
        let mut planes = Vec::with_capacity(self.len() * subset.len() * hw);
        for n in 0..self.len() {
            for &s in &slots {
                planes.extend_from_slice(self.plane(n, s));
            }
        }
        Ok(Batch {
            planes,
            labels: self.labels.clone(),
            channels: subset.to_vec(),
            height: self.height,
            width: self.width,
        })
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_channels(&self) -> usize {
        self.vocab.len()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Gathers samples `ids` restricted to `subset`.
    pub fn batch(&self, ids: &[usize], subset: &[usize]) -> Result<Batch> {
        if subset.is_empty() {
            return Err(Error::Contract("channel subset is empty".into()));
        }
        if let Some(&c) = subset.iter().find(|&&c| c >= self.n_channels()) {
            return Err(Error::Contract(format!(
                "channel {c} outside vocabulary of {}",
                self.n_channels()
            )));
        }
        let hw = self.height * self.width;
        let mut planes = Vec::with_capacity(ids.len() * subset.len() * hw);
        let mut labels = Vec::with_capacity(ids.len());
        for &i in ids {
            let s = &self.samples[i];
            for &c in subset {
                let p = s
                    .plane(c)
                    .ok_or_else(|| Error::Contract(format!("sample {i} lacks channel {c}")))?;
                planes.extend(p.iter().map(|&v| f64::from(v)));
            }
            labels.push(s.label);
        }
        Ok(Batch {
            planes,
            labels,
            channels: subset.to_vec(),
            height: self.height,
            width: self.width,
        })
    }
}

fn blob(height: usize, width: usize, center: (f64, f64)) -> Vec<f64> {
    let denom = 2.0 * BLOB_SIGMA * BLOB_SIGMA;
    (0..height)
        .flat_map(|r| {
            (0..width).map(move |c| {
                let dr = r as f64 - center.0;
                let dc = c as f64 - center.1;
                (-(dr * dr + dc * dc) / denom).exp()
            })
        })
        .collect()
}

pub fn gen_synth_dataset(n_samples: usize, seed: u64, noise_sigma: f64) -> Result<Dataset> {
    if n_samples == 0 {
        return Err(Error::Parameter("n_samples must be positive".into()));
    }
    if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
        return Err(Error::Parameter(format!("noise sigma must be non-negative, got {noise_sigma}")));
    }
    let (h, w) = (SYNTH_SIZE, SYNTH_SIZE);
    let templates = [blob(h, w, BLOB_CENTERS[0]), blob(h, w, BLOB_CENTERS[1])];
    let noise = Normal::new(0.0, noise_sigma).expect("sigma validated");
    let samples = (0..n_samples)
        .map(|i| {
            let mut r = rng::stream(seed, "synth-sample", i as u64);
            let label = r.random_range(0..SYNTH_CLASSES);
            let planes = (0..SYNTH_CHANNELS)
                .map(|c| {
                    let base = synth_channel_bit(c).map(|b| &templates[(label >> b) & 1]);
                    (0..h * w)
                        .map(|p| {
                            let signal = base.map_or(0.0, |t| t[p]);
                            let eps = if noise_sigma > 0.0 { noise.sample(&mut r) } else { 0.0 };
                            (signal + eps) as f32
                        })
                        .collect()
                })
                .collect();
            McImage {
                channel_indices: (0..SYNTH_CHANNELS).collect(),
                planes,
                label,
            }
        })
        .collect();
    let names = ["bit0-a", "bit0-b", "bit1", "bit2", "noise-a", "noise-b"];
    Ok(Dataset {
        vocab: ChannelVocabulary::new(names.iter().map(|s| s.to_string()).collect())?,
        height: h,
        width: w,
        classes: (0..SYNTH_CLASSES).map(|c| format!("class{c}")).collect(),
        samples,
        split: Split::Train,
        seed,
        noise_sigma,
    })
}

/// Hand-coded decoder: for each bit, correlates the channels in `channels`
/// that carry it with the difference of the two blob templates. Bits with
/// no available channel decode as 0.
pub fn matched_filter_predict(image: &McImage, channels: &[usize], height: usize, width: usize) -> usize {
    let t0 = blob(height, width, BLOB_CENTERS[0]);
    let t1 = blob(height, width, BLOB_CENTERS[1]);
    let diff: Vec<f64> = t1.iter().zip(&t0).map(|(a, b)| a - b).collect();
    let mut scores = [0.0_f64; 3];
    for &c in channels {
        if let (Some(bit), Some(plane)) = (synth_channel_bit(c), image.plane(c)) {
            scores[bit] += plane.iter().zip(&diff).map(|(&p, d)| f64::from(p) * d).sum::<f64>();
        }
    }
    scores
        .iter()
        .enumerate()
        .map(|(b, &s)| usize::from(s > 0.0) << b)
        .sum()
}

/// Accuracy of [`matched_filter_predict`] over the dataset; the reference
/// bound learned models are compared against.
pub fn matched_filter_accuracy(ds: &Dataset, channels: &[usize]) -> f64 {
    let correct = ds
        .samples
        .iter()
        .filter(|s| matched_filter_predict(s, channels, ds.height, ds.width) == s.label)
        .count();
    correct as f64 / ds.len() as f64
}

// ---------------------------------------------------------------- storage

#[derive(Serialize, Deserialize, Debug, PartialEq)]
struct Manifest {
    version: u32,
    channels: Vec<String>,
    classes: Vec<String>,
    height: usize,
    width: usize,
    count: usize,
    seed: u64,
    noise_sigma: f64,
    dtype: String,
    #[serde(default)]
    split: Split,
}

/// Writes `manifest.json`, `samples.bin` (f32 LE, N×m×H×W) and `labels.bin`
/// (u32 LE) into `dir`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let m = ds.n_channels();
    let hw = ds.height * ds.width;
    let mut samples = Vec::with_capacity(ds.len() * m * hw * 4);
    let mut labels = Vec::with_capacity(ds.len() * 4);
    for (i, s) in ds.samples.iter().enumerate() {
        if s.channel_indices.len() != m {
            return Err(Error::Contract(format!("sample {i} does not carry the full vocabulary")));
        }
        for p in &s.planes {
            for v in p {
                samples.extend_from_slice(&v.to_le_bytes());
            }
        }
        labels.extend_from_slice(&(s.label as u32).to_le_bytes());
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        channels: ds.vocab.names().to_vec(),
        classes: ds.classes.clone(),
        height: ds.height,
        width: ds.width,
        count: ds.len(),
        seed: ds.seed,
        noise_sigma: ds.noise_sigma,
        dtype: "f32le".into(),
        split: ds.split,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(p, e))
    };
    write(MANIFEST, json.as_bytes())?;
    write(SAMPLES, &samples)?;
    write(LABELS, &labels)
}

fn read_checked(path: &Path, expected: u64) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::format(path, e.to_string()))?;
    if bytes.len() as u64 != expected {
        return Err(Error::Integrity {
            path: path.to_path_buf(),
            expected,
            found: bytes.len() as u64,
        });
    }
    Ok(bytes)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::format(&mpath, e.to_string()))?;
    let man: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
    if man.dtype != "f32le" {
        return Err(Error::format(&mpath, format!("unsupported dtype {:?}", man.dtype)));
    }
    if man.version != FORMAT_VERSION {
        return Err(Error::format(&mpath, format!("unsupported version {}", man.version)));
    }
    let vocab = ChannelVocabulary::new(man.channels).map_err(|e| Error::format(&mpath, e.to_string()))?;
    let m = vocab.len();
    let hw = man.height * man.width;
    let spath = dir.join(SAMPLES);
    let lpath = dir.join(LABELS);
    let sbytes = read_checked(&spath, (man.count * m * hw * 4) as u64)?;
    let lbytes = read_checked(&lpath, (man.count * 4) as u64)?;

    let floats: Vec<f32> = sbytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let mut samples = Vec::with_capacity(man.count);
    for (i, lb) in lbytes.chunks_exact(4).enumerate() {
        let label = u32::from_le_bytes(lb.try_into().expect("4 bytes")) as usize;
        if label >= man.classes.len() {
            return Err(Error::format(&lpath, format!("label {label} of sample {i} out of range")));
        }
        let base = i * m * hw;
        samples.push(McImage {
            channel_indices: (0..m).collect(),
            planes: (0..m).map(|c| floats[base + c * hw..base + (c + 1) * hw].to_vec()).collect(),
            label,
        });
    }
    Ok(Dataset {
        vocab,
        height: man.height,
        width: man.width,
        classes: man.classes,
        samples,
        split: man.split,
        seed: man.seed,
        noise_sigma: man.noise_sigma,
    })
}

// --------------------------------------------------------------- batching

/// Deterministic shuffle of `0..n` for one epoch.
pub fn epoch_order(n: usize, epoch_seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(epoch_seed, "shuffle", 0));
    order
}

/// Lazily yields batches of a shuffled epoch; `subset_provider` is called
/// with the batch index and chooses that batch's channel subset.
pub struct Batches<'a, F> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    next: usize,
    provider: F,
}

impl<F: FnMut(usize) -> Vec<usize>> Iterator for Batches<'_, F> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        let start = self.next * self.batch_size;
        if start >= self.order.len() {
            return None;
        }
        let end = (start + self.batch_size).min(self.order.len());
        let subset = (self.provider)(self.next);
        self.next += 1;
        if subset.is_empty() {
            return Some(Err(Error::Contract("sampler returned an empty channel subset".into())));
        }
        Some(self.ds.batch(&self.order[start..end], &subset))
    }
}

pub fn make_batches<F>(ds: &Dataset, batch_size: usize, epoch_seed: u64, subset_provider: F) -> Result<Batches<'_, F>>
where
    F: FnMut(usize) -> Vec<usize>,
{
    if batch_size == 0 {
        return Err(Error::Parameter("batch size must be at least 1".into()));
    }
    Ok(Batches {
        ds,
        order: epoch_order(ds.len(), epoch_seed),
        batch_size,
        next: 0,
        provider: subset_provider,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = gen_synth_dataset(4, 0, 0.5).unwrap();
        let b = gen_synth_dataset(4, 0, 0.5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_synth_dataset(4, 1, 0.5).unwrap());
    }

    #[test]
    fn noiseless_argmax_decoder_is_perfect() {
        let ds = gen_synth_dataset(64, 3, 0.0).unwrap();
        let centre = |plane: &[f32]| {
            let (idx, _) = plane
                .iter()
                .enumerate()
                .fold((0, f32::MIN), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
            usize::from(idx / SYNTH_SIZE > SYNTH_SIZE / 2)
        };
        for s in &ds.samples {
            let bits = [0usize, 2, 3].map(|c| centre(s.plane(c).unwrap()));
            assert_eq!(bits[0] | bits[1] << 1 | bits[2] << 2, s.label);
        }
    }

    #[test]
    fn noise_channels_carry_no_signal_without_noise() {
        let ds = gen_synth_dataset(3, 0, 0.0).unwrap();
        for s in &ds.samples {
            assert!(s.plane(4).unwrap().iter().all(|&v| v == 0.0));
            assert!(s.plane(5).unwrap().iter().all(|&v| v == 0.0));
        }
        assert_eq!(matched_filter_accuracy(&ds, &[0, 2, 3]), 1.0);
        assert_eq!(matched_filter_accuracy(&ds, &[0, 1, 2, 3, 4, 5]), 1.0);
    }

    #[test]
    fn batch_partition_sizes() {
        let ds = gen_synth_dataset(10, 0, 0.1).unwrap();
        let sizes: Vec<usize> = make_batches(&ds, 4, 9, |_| vec![0, 1])
            .unwrap()
            .map(|b| b.unwrap().len())
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn empty_subset_is_a_contract_error() {
        let ds = gen_synth_dataset(4, 0, 0.1).unwrap();
        let mut it = make_batches(&ds, 2, 0, |_| vec![]).unwrap();
        assert!(matches!(it.next(), Some(Err(Error::Contract(_)))));
    }

    #[test]
    fn full_subset_batches_equal_stored_planes() {
        let ds = gen_synth_dataset(5, 2, 0.3).unwrap();
        let order = epoch_order(5, 4);
        let batches: Vec<Batch> = make_batches(&ds, 5, 4, |_| (0..6).collect())
            .unwrap()
            .map(|b| b.unwrap())
            .collect();
        let b = &batches[0];
        for (n, &id) in order.iter().enumerate() {
            for c in 0..6 {
                let stored: Vec<f64> = ds.samples[id].planes[c].iter().map(|&v| f64::from(v)).collect();
                assert_eq!(b.plane(n, c), stored.as_slice());
            }
        }
    }

    #[test]
    fn equal_epoch_seeds_repeat_order() {
        let ds = gen_synth_dataset(9, 0, 0.1).unwrap();
        let collect = || {
            make_batches(&ds, 4, 17, |i| vec![i % 6])
                .unwrap()
                .map(|b| b.unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(collect(), collect());
    }

    #[test]
    fn restriction_composes() {
        let ds = gen_synth_dataset(3, 5, 0.2).unwrap();
        let full = ds.batch(&[0, 1, 2], &[0, 1, 2, 3, 4, 5]).unwrap();
        let mid = full.restrict(&[1, 3, 4]).unwrap();
        assert_eq!(mid.restrict(&[3, 4]).unwrap(), full.restrict(&[3, 4]).unwrap());
        assert_eq!(full.restrict(&[3, 4]).unwrap(), ds.batch(&[0, 1, 2], &[3, 4]).unwrap());
        assert!(mid.restrict(&[0]).is_err());
    }

    #[test]
    fn vocabulary_rejects_duplicates() {
        assert!(ChannelVocabulary::new(vec!["a".into(), "a".into()]).is_err());
    }
}
