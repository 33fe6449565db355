//! Training loop, evaluation and leave-k-out sweeps.

use std::fs;
use std::path::Path;

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{epoch_order, Batch, Dataset};
use crate::error::{Error, Result};
use crate::losses::{cdl_loss, tdl_terms, total_loss};
use crate::model::{forward, forward_on_tape, idx, init_model, patch_token_means, ModelState};
use crate::optim::{clip_grad_norm, lr_at, AdamW};
use crate::rng;
use crate::sampling::{sample_subset, ChannelSource, FeatureSource, SamplerKind};
use crate::tensor::Tape;

pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const SAMPLER_COUNTS_FILE: &str = "sampler_counts.csv";
pub const TRAIN_SUMMARY_FILE: &str = "train_summary.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub task_loss: f64,
    pub cdl: f64,
    pub tdl: f64,
    pub train_acc: f64,
    pub eval_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    /// Batches in which each channel was part of the sampled subset.
    pub sampler_counts: Vec<u64>,
    pub batches: u64,
}

impl TrainLog {
    pub fn mean_subset_size(&self) -> f64 {
        self.sampler_counts.iter().sum::<u64>() as f64 / self.batches.max(1) as f64
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let row = w.write_record(["epoch", "lr", "task_loss", "cdl", "tdl", "train_acc", "eval_acc"]);
        row.map_err(|e| csv_err(path, e))?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.lr.to_string(),
                r.task_loss.to_string(),
                r.cdl.to_string(),
                r.tdl.to_string(),
                r.train_acc.to_string(),
                r.eval_acc.map(|a| a.to_string()).unwrap_or_default(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_counts_csv(&self, path: &Path) -> Result<()> {
        write_counts_csv(&self.sampler_counts, path)
    }
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

pub fn write_counts_csv(counts: &[u64], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["channel", "times_sampled"]).map_err(|e| csv_err(path, e))?;
    for (c, n) in counts.iter().enumerate() {
        w.write_record([c.to_string(), n.to_string()]).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_counts_csv(path: &Path) -> Result<Vec<u64>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["channel", "times_sampled"] {
        return Err(Error::format(path, "expected header channel,times_sampled"));
    }
    let mut counts = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let parse = |j: usize| rec.get(j).and_then(|s| s.parse::<u64>().ok());
        match (parse(0), parse(1)) {
            (Some(c), Some(n)) if c == i as u64 => counts.push(n),
            _ => return Err(Error::format(path, format!("bad row {}", i + 1))),
        }
    }
    Ok(counts)
}

/// Everything written next to the checkpoint besides the CSVs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub batches: u64,
    pub epochs: usize,
    pub checksum: String,
    pub final_eval_acc: Option<f64>,
}

impl TrainSummary {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("summary serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Evaluate on the eval set every this many epochs (and after the last);
    /// 0 evaluates only after the last epoch.
    pub eval_every: usize,
}

pub struct TrainOutcome {
    pub state: ModelState,
    pub log: TrainLog,
}

fn at_batch(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Numeric { location, what } => Error::Numeric {
            location: format!("epoch {epoch}, batch {batch}: {location}"),
            what,
        },
        other => other,
    }
}

struct StepStats {
    task: f64,
    cdl: f64,
    tdl: f64,
    correct: usize,
}

fn train_step(cfg: &RunConfig, state: &mut ModelState, opt: &mut AdamW, batch: &Batch, lr: f64) -> Result<StepStats> {
    let div = &cfg.loss;
    let mut tape = Tape::new();
    let params = state.record(&mut tape, true);
    let fv = forward_on_tape(&mut tape, &params, &state.config, batch)?;
    let task = tape.cross_entropy(fv.logits, &batch.labels)?;

    let cdl = cdl_loss(
        &mut tape,
        params[idx::CHANNEL_TOKENS],
        params[idx::CDL_ANCHORS],
        &batch.channels,
        div.t_cdl,
    )?;
    // a single-channel subset has no cross-channel pairs; that term is dropped
    let lambda_d = if batch.channels.len() > 1 { div.lambda_d } else { 0.0 };
    let tdl = if div.lambda_s > 0.0 || lambda_d > 0.0 {
        Some(tdl_terms(&mut tape, fv.raw_tokens, fv.batch_size, &fv.channel_map, div.lambda_s, lambda_d)?.loss)
    } else {
        None
    };
    let cdl_term = (div.lambda_cdl > 0.0).then_some(cdl);
    let total = total_loss(&mut tape, task, cdl_term, tdl, div.lambda_cdl)?;
    if !tape.value(cdl).item().is_finite() {
        return Err(Error::numeric("cdl", "loss component is not finite"));
    }
    tape.backward(total)?;

    let mut grads: Vec<Vec<f64>> = params
        .iter()
        .zip(&state.params)
        .map(|(&v, p)| tape.take_grad(v).unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::numeric("backward", "non-finite gradient"));
    }
    if let Some(c) = cfg.optim.grad_clip {
        clip_grad_norm(&mut grads, c);
    }

    let logits = tape.value(fv.logits);
    let classes = logits.shape()[1];
    let correct = logits
        .data()
        .chunks_exact(classes)
        .zip(&batch.labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    let stats = StepStats {
        task: tape.value(task).item(),
        cdl: tape.value(cdl).item(),
        tdl: tdl.map_or(0.0, |t| tape.value(t).item()),
        correct,
    };
    drop(tape);
    opt.step(&mut state.params, &grads, lr)?;
    Ok(stats)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Trains from scratch. Deterministic in `(cfg, data)`.
pub fn train(
    cfg: &RunConfig,
    data: &Dataset,
    eval_data: Option<&Dataset>,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let model_cfg = cfg.model.resolve(data)?;
    if let Some(ev) = eval_data {
        if ev.n_channels() != data.n_channels() || ev.height != data.height || ev.width != data.width {
            return Err(Error::Contract("eval set does not match the training set's layout".into()));
        }
    }
    let mut state = init_model(&model_cfg, cfg.seed)?;
    let mut opt = AdamW::new(&state.names, &state.params, &cfg.optim);
    let m = model_cfg.n_channels;
    let bs = cfg.optim.batch_size;
    let steps_per_epoch = data.len().div_ceil(bs);
    let mut sampler_rng = rng::stream(cfg.seed, "sampler", 0);
    let mut log = TrainLog {
        sampler_counts: vec![0; m],
        ..TrainLog::default()
    };
    let all: Vec<usize> = (0..m).collect();

    let mut step = 0usize;
    for epoch in 1..=cfg.optim.epochs {
        let order = epoch_order(data.len(), rng::derive_seed(cfg.seed, "epoch-order", epoch as u64));
        let (mut task, mut cdl, mut tdl, mut correct, mut lr) = (0.0, 0.0, 0.0, 0usize, 0.0);
        for (b, ids) in order.chunks(bs).enumerate() {
            let wrap = |e| at_batch(e, epoch, b);
            let subset = match (cfg.sampler.kind, cfg.sampler.feature_source) {
                (SamplerKind::Dcs, FeatureSource::PatchTokenMean) => {
                    let full = data.batch(ids, &all).map_err(wrap)?;
                    let feats = patch_token_means(&state, &full).map_err(wrap)?;
                    sample_subset(&cfg.sampler, ChannelSource::Features(&feats), &mut sampler_rng).map_err(wrap)?
                }
                (SamplerKind::Dcs, FeatureSource::ChannelTokens) => {
                    let feats = state.channel_token_rows();
                    sample_subset(&cfg.sampler, ChannelSource::Features(&feats), &mut sampler_rng).map_err(wrap)?
                }
                _ => sample_subset(&cfg.sampler, ChannelSource::Count(m), &mut sampler_rng).map_err(wrap)?,
            };
            for &c in &subset.channels {
                log.sampler_counts[c] += 1;
            }
            log.batches += 1;
            let batch = data.batch(ids, &subset.channels).map_err(wrap)?;
            lr = lr_at(step, steps_per_epoch, &cfg.optim);
            let s = train_step(cfg, &mut state, &mut opt, &batch, lr).map_err(wrap)?;
            task += s.task;
            cdl += s.cdl;
            tdl += s.tdl;
            correct += s.correct;
            step += 1;
        }
        let nb = steps_per_epoch as f64;
        let last = epoch == cfg.optim.epochs;
        let due = opts.eval_every > 0 && epoch % opts.eval_every == 0;
        let eval_acc = match eval_data {
            Some(ev) if last || due => Some(evaluate(&state, ev, &all, bs)?.accuracy()),
            _ => None,
        };
        let rec = EpochRecord {
            epoch,
            lr,
            task_loss: task / nb,
            cdl: cdl / nb,
            tdl: tdl / nb,
            train_acc: correct as f64 / data.len() as f64,
            eval_acc,
        };
        on_epoch(&rec);
        log.records.push(rec);
    }
    Ok(TrainOutcome { state, log })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalResult {
    pub correct: usize,
    pub total: usize,
}

impl EvalResult {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

/// Top-1 accuracy on `channels` (in vocabulary order as given).
pub fn evaluate(state: &ModelState, ds: &Dataset, channels: &[usize], batch_size: usize) -> Result<EvalResult> {
    if channels.is_empty() {
        return Err(Error::Parameter("evaluation channel subset is empty".into()));
    }
    if let Some(&c) = channels.iter().find(|&&c| c >= state.config.n_channels) {
        return Err(Error::Parameter(format!(
            "channel {c} outside vocabulary of {}",
            state.config.n_channels
        )));
    }
    if !channels.iter().all_unique() {
        return Err(Error::Parameter(format!("duplicate channel in subset {channels:?}")));
    }
    if batch_size == 0 {
        return Err(Error::Parameter("batch size must be at least 1".into()));
    }
    if ds.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let ids: Vec<usize> = (0..ds.len()).collect();
    let mut correct = 0;
    for chunk in ids.chunks(batch_size) {
        let batch = ds.batch(chunk, channels)?;
        let trace = forward(&batch, state, false)?;
        correct += trace.predictions().iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
    }
    Ok(EvalResult {
        correct,
        total: ds.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub channels: Vec<usize>,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepReport {
    pub n_keep: usize,
    pub rows: Vec<SweepRow>,
    pub mean: f64,
    /// Population standard deviation across subsets.
    pub std: f64,
}

/// Accuracy on every `n_keep`-subset of the vocabulary, in lexicographic order.
pub fn leave_k_out_sweep(state: &ModelState, ds: &Dataset, n_keep: usize, batch_size: usize) -> Result<SweepReport> {
    let m = state.config.n_channels;
    if n_keep == 0 || n_keep > m {
        return Err(Error::Parameter(format!("n_keep must be in 1..={m}, got {n_keep}")));
    }
    let rows = (0..m)
        .combinations(n_keep)
        .map(|channels| {
            let accuracy = evaluate(state, ds, &channels, batch_size)?.accuracy();
            Ok(SweepRow { channels, accuracy })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    let mean = rows.iter().map(|r| r.accuracy).sum::<f64>() / n;
    let var = rows.iter().map(|r| (r.accuracy - mean).powi(2)).sum::<f64>() / n;
    Ok(SweepReport {
        n_keep,
        rows,
        mean,
        std: var.sqrt(),
    })
}

impl SweepReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["channels", "accuracy"]).map_err(|e| csv_err(path, e))?;
        for r in &self.rows {
            let ch = r.channels.iter().map(usize::to_string).join(" ");
            w.write_record([ch, r.accuracy.to_string()]).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
