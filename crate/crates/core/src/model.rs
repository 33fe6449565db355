//! Tiny multi-channel ViT.
//!
//! Every channel of an image is cut into `P×P` patches that go through one
//! shared projection. A token's input embedding is its raw projection plus a
//! positional embedding (shared across channels) plus the learnable token of
//! its channel. A `[CLS]` token is prepended, followed by pre-norm
//! transformer blocks and a linear head on the final `[CLS]` state.
//!
//! Token order within an image: `[CLS]`, then the patches of the first
//! channel of the batch subset in raster order, then the next channel, etc.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub mlp_ratio: usize,
    pub n_classes: usize,
    pub n_channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            depth: 4,
            heads: 4,
            patch_size: 8,
            mlp_ratio: 2,
            n_classes: 8,
            n_channels: 6,
            height: 32,
            width: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self;
        let positive = [c.dim, c.depth, c.heads, c.patch_size, c.mlp_ratio, c.n_classes, c.n_channels, c.height, c.width];
        if positive.contains(&0) {
            return Err(Error::Config(format!("all model sizes must be positive: {c:?}")));
        }
        if c.dim % c.heads != 0 {
            return Err(Error::Config(format!("dim {} not divisible by heads {}", c.dim, c.heads)));
        }
        if c.height % c.patch_size != 0 || c.width % c.patch_size != 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by patch size {}",
                c.height, c.width, c.patch_size
            )));
        }
        if c.n_channels > c.dim {
            return Err(Error::Config(format!(
                "{} channels cannot have orthogonal tokens in dimension {}",
                c.n_channels, c.dim
            )));
        }
        Ok(())
    }

    /// Patches per channel.
    pub fn n_patches(&self) -> usize {
        (self.height / self.patch_size) * (self.width / self.patch_size)
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    /// Sequence length (including `[CLS]`) for a subset of `k` channels.
    pub fn seq_len(&self, k: usize) -> usize {
        k * self.n_patches() + 1
    }

    /// Parameter names and shapes in checkpoint order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, h, p2) = (self.dim, self.hidden(), self.patch_size * self.patch_size);
        let mut v: Vec<(String, Vec<usize>)> = vec![
            ("patch_proj.weight".into(), vec![d, p2]),
            ("patch_proj.bias".into(), vec![d]),
            ("channel_tokens".into(), vec![self.n_channels, d]),
            ("cdl_anchors".into(), vec![self.n_channels, d]),
            ("pos_embed".into(), vec![self.n_patches(), d]),
            ("cls_token".into(), vec![1, d]),
        ];
        for b in 0..self.depth {
            let p = |s: &str| format!("blocks.{b}.{s}");
            v.extend([
                (p("norm1.weight"), vec![d]),
                (p("norm1.bias"), vec![d]),
                (p("attn.qkv.weight"), vec![3 * d, d]),
                (p("attn.qkv.bias"), vec![3 * d]),
                (p("attn.proj.weight"), vec![d, d]),
                (p("attn.proj.bias"), vec![d]),
                (p("norm2.weight"), vec![d]),
                (p("norm2.bias"), vec![d]),
                (p("mlp.fc1.weight"), vec![h, d]),
                (p("mlp.fc1.bias"), vec![h]),
                (p("mlp.fc2.weight"), vec![d, h]),
                (p("mlp.fc2.bias"), vec![d]),
            ]);
        }
        v.extend([
            ("norm.weight".into(), vec![d]),
            ("norm.bias".into(), vec![d]),
            ("head.weight".into(), vec![self.n_classes, d]),
            ("head.bias".into(), vec![self.n_classes]),
        ]);
        v
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

const BLOCK_PARAMS: usize = 12;
const STEM_PARAMS: usize = 6;

/// Index of each parameter inside [`ModelState::params`].
pub mod idx {
    pub const PROJ_W: usize = 0;
    pub const PROJ_B: usize = 1;
    pub const CHANNEL_TOKENS: usize = 2;
    pub const CDL_ANCHORS: usize = 3;
    pub const POS_EMBED: usize = 4;
    pub const CLS_TOKEN: usize = 5;
}

#[derive(Clone, Copy)]
struct BlockIds {
    norm1_w: usize,
    norm1_b: usize,
    qkv_w: usize,
    qkv_b: usize,
    proj_w: usize,
    proj_b: usize,
    norm2_w: usize,
    norm2_b: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

fn block_ids(b: usize) -> BlockIds {
    let o = STEM_PARAMS + b * BLOCK_PARAMS;
    BlockIds {
        norm1_w: o,
        norm1_b: o + 1,
        qkv_w: o + 2,
        qkv_b: o + 3,
        proj_w: o + 4,
        proj_b: o + 5,
        norm2_w: o + 6,
        norm2_b: o + 7,
        fc1_w: o + 8,
        fc1_b: o + 9,
        fc2_w: o + 10,
        fc2_b: o + 11,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub params: Vec<Tensor>,
}

fn truncated_normal(n: usize, std: f64, r: &mut rng::Rng) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(r);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect()
}

/// Rows of the Q factor of a seeded Gaussian `rows × cols` matrix (`rows ≤
/// cols`), with signs chosen so that R has a positive diagonal. Modified
/// Gram-Schmidt with one re-orthogonalization pass.
pub fn orthonormal_rows(rows: usize, cols: usize, r: &mut rng::Rng) -> Vec<f64> {
    assert!(rows <= cols);
    let mut a: Vec<f64> = (0..rows * cols).map(|_| StandardNormal.sample(r)).collect();
    for i in 0..rows {
        for _pass in 0..2 {
            for j in 0..i {
                let (head, tail) = a.split_at_mut(i * cols);
                let qj = &head[j * cols..(j + 1) * cols];
                let ai = &mut tail[..cols];
                let proj: f64 = qj.iter().zip(ai.iter()).map(|(x, y)| x * y).sum();
                ai.iter_mut().zip(qj).for_each(|(y, x)| *y -= proj * x);
            }
        }
        let ai = &mut a[i * cols..(i + 1) * cols];
        let norm = ai.iter().map(|v| v * v).sum::<f64>().sqrt();
        ai.iter_mut().for_each(|v| *v /= norm);
    }
    a
}

pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelState> {
    config.validate()?;
    let mut names = Vec::new();
    let mut params = Vec::new();
    for (name, shape) in config.layout() {
        let n: usize = shape.iter().product();
        let mut r = rng::stream(seed, &format!("init:{name}"), 0);
        let data = if name == "channel_tokens" || name == "cdl_anchors" {
            orthonormal_rows(shape[0], shape[1], &mut r)
        } else if name.ends_with("norm1.weight") || name.ends_with("norm2.weight") || name == "norm.weight" {
            vec![1.0; n]
        } else if name.ends_with(".bias") {
            vec![0.0; n]
        } else {
            truncated_normal(n, INIT_STD, &mut r)
        };
        names.push(name);
        params.push(Tensor::new(shape, data)?);
    }
    Ok(ModelState {
        config: config.clone(),
        names,
        params,
    })
}

impl ModelState {
    pub fn channel_tokens(&self) -> &Tensor {
        &self.params[idx::CHANNEL_TOKENS]
    }

    pub fn cdl_anchors(&self) -> &Tensor {
        &self.params[idx::CDL_ANCHORS]
    }

    pub fn channel_token_rows(&self) -> Vec<Vec<f64>> {
        self.channel_tokens()
            .data()
            .chunks_exact(self.config.dim)
            .map(<[f64]>::to_vec)
            .collect()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter on `tape`.
    pub fn record(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone(), requires_grad)).collect()
    }

    /// Little-endian f64 bytes of all parameters in layout order.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.params
            .iter()
            .flat_map(|p| p.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    /// SHA-256 of [`ModelState::to_bytes`], hex encoded.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

/// Tape handles produced by one forward pass.
pub struct ForwardVars {
    pub logits: Var,
    pub cls: Var,
    /// Raw projections `W·p + b` of every patch, `[N·|S|·Np, D]`.
    pub raw_tokens: Var,
    /// Attention nodes, one per block.
    pub attention: Vec<Var>,
    /// Channel of each patch token within one image (`[CLS]` excluded).
    pub channel_map: Vec<usize>,
    pub batch_size: usize,
    pub seq_len: usize,
}

/// Flattened patches `[N·|S|·Np, P²]` in token order.
pub fn extract_patches(batch: &Batch, patch: usize) -> Vec<f64> {
    let (h, w) = (batch.height, batch.width);
    let (gh, gw) = (h / patch, w / patch);
    let k = batch.channels.len();
    let mut out = Vec::with_capacity(batch.len() * k * h * w);
    for n in 0..batch.len() {
        for s in 0..k {
            let plane = batch.plane(n, s);
            for pr in 0..gh {
                for pc in 0..gw {
                    for r in 0..patch {
                        let row = (pr * patch + r) * w + pc * patch;
                        out.extend_from_slice(&plane[row..row + patch]);
                    }
                }
            }
        }
    }
    out
}

fn check_batch(config: &ModelConfig, batch: &Batch) -> Result<()> {
    if batch.is_empty() || batch.channels.is_empty() {
        return Err(Error::Contract("empty batch or channel subset".into()));
    }
    if let Some(&c) = batch.channels.iter().find(|&&c| c >= config.n_channels) {
        return Err(Error::Contract(format!(
            "channel {c} outside vocabulary of {}",
            config.n_channels
        )));
    }
    if batch.height != config.height || batch.width != config.width {
        return Err(Error::Contract(format!(
            "batch images are {}x{}, model expects {}x{}",
            batch.height, batch.width, config.height, config.width
        )));
    }
    Ok(())
}

fn check_finite(tape: &Tape, v: Var, location: impl FnOnce() -> String) -> Result<()> {
    if tape.data(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(location(), "non-finite activation"))
    }
}

/// Raw patch tokens `W·p + b` for a batch.
pub fn patch_embed(tape: &mut Tape, params: &[Var], config: &ModelConfig, batch: &Batch) -> Result<(Var, Vec<usize>)> {
    check_batch(config, batch)?;
    let p2 = config.patch_size * config.patch_size;
    let patches = extract_patches(batch, config.patch_size);
    let rows = patches.len() / p2;
    let px = tape.constant(Tensor::matrix(rows, p2, patches)?);
    let raw = tape.linear(px, params[idx::PROJ_W], Some(params[idx::PROJ_B]))?;
    let np = config.n_patches();
    let channel_map = batch.channels.iter().flat_map(|&c| std::iter::repeat_n(c, np)).collect();
    Ok((raw, channel_map))
}

pub fn forward_on_tape(tape: &mut Tape, params: &[Var], config: &ModelConfig, batch: &Batch) -> Result<ForwardVars> {
    let (raw, channel_map) = patch_embed(tape, params, config, batch)?;
    let (n, k, np, d) = (batch.len(), batch.channels.len(), config.n_patches(), config.dim);
    let per_image = k * np;

    // positional + channel embeddings for one image's token block
    let pos_idx: Vec<usize> = (0..per_image).map(|i| i % np).collect();
    let pos = tape.gather_rows(params[idx::POS_EMBED], &pos_idx)?;
    let chan = tape.gather_rows(params[idx::CHANNEL_TOKENS], &channel_map)?;
    let extra = tape.add(pos, chan)?;
    let tokens = tape.add_tiled(raw, extra)?;

    let with_cls = tape.concat_rows(params[idx::CLS_TOKEN], tokens)?;
    let seq_len = per_image + 1;
    let order: Vec<usize> = (0..n)
        .flat_map(|i| std::iter::once(0).chain(1 + i * per_image..1 + (i + 1) * per_image))
        .collect();
    let mut x = tape.gather_rows(with_cls, &order)?;

    let mut attention = Vec::with_capacity(config.depth);
    for b in 0..config.depth {
        let ids = block_ids(b);
        let h = tape.layer_norm(x, params[ids.norm1_w], params[ids.norm1_b])?;
        let qkv = tape.linear(h, params[ids.qkv_w], Some(params[ids.qkv_b]))?;
        let a = tape.attention(qkv, n, seq_len, config.heads)?;
        attention.push(a);
        let a = tape.linear(a, params[ids.proj_w], Some(params[ids.proj_b]))?;
        x = tape.add(x, a)?;
        let h = tape.layer_norm(x, params[ids.norm2_w], params[ids.norm2_b])?;
        let h = tape.linear(h, params[ids.fc1_w], Some(params[ids.fc1_b]))?;
        let h = tape.gelu(h);
        let h = tape.linear(h, params[ids.fc2_w], Some(params[ids.fc2_b]))?;
        x = tape.add(x, h)?;
        check_finite(tape, x, || format!("block {b}"))?;
    }

    let cls_rows: Vec<usize> = (0..n).map(|i| i * seq_len).collect();
    let cls = tape.gather_rows(x, &cls_rows)?;
    let head = STEM_PARAMS + config.depth * BLOCK_PARAMS;
    let cls = tape.layer_norm(cls, params[head], params[head + 1])?;
    let logits = tape.linear(cls, params[head + 2], Some(params[head + 3]))?;
    check_finite(tape, logits, || "head".into())?;
    debug_assert_eq!(tape.shape(cls), &[n, d]);
    Ok(ForwardVars {
        logits,
        cls,
        raw_tokens: raw,
        attention,
        channel_map,
        batch_size: n,
        seq_len,
    })
}

/// Values from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `[N, n_classes]`
    pub logits: Tensor,
    /// `[N, D]`
    pub cls: Tensor,
    /// `[N·|S|·Np, D]`
    pub raw_tokens: Tensor,
    pub channel_map: Vec<usize>,
    pub channels: Vec<usize>,
    pub heads: usize,
    pub seq_len: usize,
    /// Per layer, `[N, heads, seq_len]` rows of `[CLS]` attention.
    pub cls_attention: Option<Vec<Vec<f64>>>,
}

pub fn forward(batch: &Batch, state: &ModelState, record_attention: bool) -> Result<ForwardTrace> {
    let mut tape = Tape::new();
    let params = state.record(&mut tape, false);
    let fv = forward_on_tape(&mut tape, &params, &state.config, batch)?;
    let cls_attention = record_attention.then(|| {
        let t = fv.seq_len;
        fv.attention
            .iter()
            .map(|&a| {
                let probs = tape.attention_probs(a).expect("attention node");
                // row 0 of every [t × t] block
                probs.chunks_exact(t * t).flat_map(|blk| blk[..t].iter().copied()).collect()
            })
            .collect()
    });
    Ok(ForwardTrace {
        logits: tape.value(fv.logits).clone(),
        cls: tape.value(fv.cls).clone(),
        raw_tokens: tape.value(fv.raw_tokens).clone(),
        channel_map: fv.channel_map,
        channels: batch.channels.clone(),
        heads: state.config.heads,
        seq_len: fv.seq_len,
        cls_attention,
    })
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn predictions(&self) -> Vec<usize> {
        let c = self.logits.shape()[1];
        self.logits
            .data()
            .chunks_exact(c)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect()
    }

    /// Per-image `[CLS]` attention mass on each channel of the subset,
    /// aligned with `self.channels`: averaged over heads, the `[CLS]→[CLS]`
    /// entry dropped and the remainder renormalized.
    pub fn cls_attention_by_channel_per_image(&self, layer: usize) -> Result<Vec<Vec<f64>>> {
        let layers = self
            .cls_attention
            .as_ref()
            .ok_or_else(|| Error::State("attention was not recorded for this trace".into()))?;
        let rows = layers
            .get(layer)
            .ok_or_else(|| Error::Parameter(format!("layer {layer} out of range ({} layers)", layers.len())))?;
        let t = self.seq_len;
        let slots = self.channels.len();
        let per_channel = (t - 1) / slots;
        Ok(rows
            .chunks_exact(self.heads * t)
            .map(|img| {
                let mut mean = vec![0.0; t];
                for head in img.chunks_exact(t) {
                    mean.iter_mut().zip(head).for_each(|(m, v)| *m += v / self.heads as f64);
                }
                let patch_total: f64 = mean[1..].iter().sum();
                (0..slots)
                    .map(|s| mean[1 + s * per_channel..1 + (s + 1) * per_channel].iter().sum::<f64>() / patch_total)
                    .collect()
            })
            .collect())
    }

    /// Batch mean of [`Self::cls_attention_by_channel_per_image`].
    pub fn cls_attention_by_channel(&self, layer: usize) -> Result<Vec<f64>> {
        let per = self.cls_attention_by_channel_per_image(layer)?;
        let mut out = vec![0.0; self.channels.len()];
        for img in &per {
            out.iter_mut().zip(img).for_each(|(o, v)| *o += v / per.len() as f64);
        }
        Ok(out)
    }
}

/// Per-channel mean of the raw patch tokens over a batch; the alternative
/// channel feature for diverse channel sampling.
pub fn patch_token_means(state: &ModelState, batch: &Batch) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let params = state.record(&mut tape, false);
    let (raw, channel_map) = patch_embed(&mut tape, &params, &state.config, batch)?;
    let d = state.config.dim;
    let m = state.config.n_channels;
    let mut sums = vec![vec![0.0; d]; m];
    let mut counts = vec![0usize; m];
    for (i, row) in tape.data(raw).chunks_exact(d).enumerate() {
        let c = channel_map[i % channel_map.len()];
        sums[c].iter_mut().zip(row).for_each(|(s, v)| *s += v);
        counts[c] += 1;
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            s.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    Ok(sums)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synth_dataset;

    fn gram_is_identity(t: &Tensor, tol: f64) -> bool {
        let (m, d) = (t.shape()[0], t.shape()[1]);
        let x = t.data();
        (0..m).all(|i| {
            (0..m).all(|j| {
                let g: f64 = (0..d).map(|c| x[i * d + c] * x[j * d + c]).sum();
                (g - if i == j { 1.0 } else { 0.0 }).abs() < tol
            })
        })
    }

    #[test]
    fn orthonormal_tokens_and_anchors() {
        let cfg = ModelConfig {
            dim: 16,
            ..ModelConfig::default()
        };
        let s = init_model(&cfg, 0).unwrap();
        assert!(gram_is_identity(s.channel_tokens(), 1e-6));
        assert!(gram_is_identity(s.cdl_anchors(), 1e-6));
        assert!(s
            .channel_tokens()
            .data()
            .iter()
            .zip(s.cdl_anchors().data())
            .any(|(a, b)| a != b));
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::default();
        assert_eq!(init_model(&cfg, 3).unwrap(), init_model(&cfg, 3).unwrap());
        assert_ne!(init_model(&cfg, 3).unwrap(), init_model(&cfg, 4).unwrap());
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig {
            n_channels: 20,
            dim: 16,
            ..ModelConfig::default()
        };
        assert!(matches!(init_model(&bad, 0), Err(Error::Config(_))));
        let bad = ModelConfig {
            heads: 5,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn param_count_follows_config() {
        let cfg = ModelConfig::default();
        let s = init_model(&cfg, 0).unwrap();
        assert_eq!(s.param_count(), cfg.param_count());
        let (d, h) = (64, 128);
        let block = 4 * d + 3 * d * d + 3 * d + d * d + d + h * d + h + d * h + d;
        let stem = d * 64 + d + 2 * 6 * d + 16 * d + d;
        assert_eq!(cfg.param_count(), stem + 4 * block + 2 * d + 8 * d + 8);
    }

    #[test]
    fn token_counts_and_attention_rows() {
        let cfg = ModelConfig::default();
        let s = init_model(&cfg, 1).unwrap();
        let ds = gen_synth_dataset(3, 0, 0.5).unwrap();
        let b = ds.batch(&[0, 1, 2], &[0, 2, 3]).unwrap();
        let tr = forward(&b, &s, true).unwrap();
        assert_eq!(tr.seq_len, 3 * 16 + 1);
        assert_eq!(tr.raw_tokens.shape(), &[3 * 48, 64]);
        assert_eq!(tr.logits.shape(), &[3, 8]);
        for layer in tr.cls_attention.as_ref().unwrap() {
            for row in layer.chunks(tr.seq_len) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        let mass = tr.cls_attention_by_channel(cfg.depth - 1).unwrap();
        assert!((mass.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(matches!(tr.cls_attention_by_channel(cfg.depth), Err(Error::Parameter(_))));
    }

    #[test]
    fn attention_by_channel_requires_recording() {
        let cfg = ModelConfig::default();
        let s = init_model(&cfg, 1).unwrap();
        let ds = gen_synth_dataset(1, 0, 0.5).unwrap();
        let tr = forward(&ds.batch(&[0], &[1]).unwrap(), &s, false).unwrap();
        assert!(matches!(tr.cls_attention_by_channel(0), Err(Error::State(_))));
    }

    #[test]
    fn out_of_vocabulary_channel_is_rejected() {
        let cfg = ModelConfig {
            n_channels: 4,
            ..ModelConfig::default()
        };
        let s = init_model(&cfg, 1).unwrap();
        let ds = gen_synth_dataset(1, 0, 0.5).unwrap();
        let b = ds.batch(&[0], &[0, 5]).unwrap();
        assert!(matches!(forward(&b, &s, false), Err(Error::Contract(_))));
    }
}
