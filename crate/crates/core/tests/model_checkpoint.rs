use chanvit_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, PARAMS_FILE};
use chanvit_core::data::{gen_synth_dataset, Batch};
use chanvit_core::model::{forward, forward_on_tape, init_model, patch_embed, ForwardTrace, ModelConfig};
use chanvit_core::{grad_check, Error, GradCheckOptions, Tape, Tensor};
use rand::Rng;

fn small() -> ModelConfig {
    ModelConfig {
        dim: 16,
        depth: 2,
        heads: 2,
        ..ModelConfig::default()
    }
}

fn raw_tokens(cfg: &ModelConfig, state_seed: u64, batch: &Batch) -> Vec<f64> {
    let state = init_model(cfg, state_seed).unwrap();
    let mut tape = Tape::new();
    let p = state.record(&mut tape, false);
    let (raw, _) = patch_embed(&mut tape, &p, cfg, batch).unwrap();
    tape.data(raw).to_vec()
}

#[test]
fn token_count_for_three_channels() {
    let cfg = ModelConfig::default();
    let state = init_model(&cfg, 0).unwrap();
    let ds = gen_synth_dataset(2, 1, 0.5).unwrap();
    let t = forward(&ds.batch(&[0, 1], &[0, 2, 3]).unwrap(), &state, true).unwrap();
    assert_eq!(t.seq_len, 48 + 1);
    assert_eq!(t.raw_tokens.shape(), &[2 * 48, 64]);
    assert_eq!(t.logits.shape(), &[2, 8]);
    for k in 1..=6 {
        let subset: Vec<usize> = (0..k).collect();
        let t = forward(&ds.batch(&[0], &subset).unwrap(), &state, false).unwrap();
        assert_eq!(t.seq_len, k * 16 + 1);
        assert_eq!(t.channel_map.len(), k * 16);
    }
}

#[test]
fn zero_image_gives_bias_tokens() {
    let cfg = small();
    let state = init_model(&cfg, 4).unwrap();
    let bias = state.param("patch_proj.bias").unwrap().data().to_vec();
    // make the bias non-trivial so the check is meaningful
    let mut state = state;
    let b: Vec<f64> = (0..cfg.dim).map(|i| 0.1 * i as f64 - 0.3).collect();
    state.params[1] = Tensor::vector(b.clone());
    assert_eq!(bias.len(), b.len());
    let batch = Batch {
        planes: vec![0.0; 2 * 32 * 32],
        labels: vec![0],
        channels: vec![1, 4],
        height: 32,
        width: 32,
    };
    let mut tape = Tape::new();
    let p = state.record(&mut tape, false);
    let (raw, _) = patch_embed(&mut tape, &p, &cfg, &batch).unwrap();
    for row in tape.data(raw).chunks_exact(cfg.dim) {
        assert_eq!(row, b.as_slice());
    }
}

#[test]
fn channel_permutation_permutes_token_blocks() {
    let cfg = small();
    let ds = gen_synth_dataset(2, 9, 0.5).unwrap();
    let a = ds.batch(&[0, 1], &[0, 2, 5]).unwrap();
    let b = a.restrict(&[5, 0, 2]).unwrap();
    let ra = raw_tokens(&cfg, 1, &a);
    let rb = raw_tokens(&cfg, 1, &b);
    let block = 16 * cfg.dim;
    for img in 0..2 {
        let base = img * 3 * block;
        let blk = |v: &[f64], s: usize| v[base + s * block..base + (s + 1) * block].to_vec();
        assert_eq!(blk(&rb, 0), blk(&ra, 2));
        assert_eq!(blk(&rb, 1), blk(&ra, 0));
        assert_eq!(blk(&rb, 2), blk(&ra, 1));
    }
}

#[test]
fn projection_is_shared_across_channels() {
    let cfg = small();
    let mut r = chanvit_core::rng::stream(0, "test", 0);
    let plane: Vec<f64> = (0..32 * 32).map(|_| r.random::<f64>() - 0.5).collect();
    let batch = Batch {
        planes: [plane.clone(), plane].concat(),
        labels: vec![0],
        channels: vec![0, 3],
        height: 32,
        width: 32,
    };
    let raw = raw_tokens(&cfg, 2, &batch);
    let half = raw.len() / 2;
    assert_eq!(raw[..half], raw[half..]);
}

#[test]
fn forward_is_deterministic_and_rows_normalized() {
    let cfg = small();
    let state = init_model(&cfg, 5).unwrap();
    let ds = gen_synth_dataset(3, 2, 0.5).unwrap();
    let batch = ds.batch(&[0, 1, 2], &[1, 2, 3, 4]).unwrap();
    let t1 = forward(&batch, &state, true).unwrap();
    let t2 = forward(&batch, &state, true).unwrap();
    assert_eq!(t1.logits, t2.logits);
    for layer in t1.cls_attention.as_ref().unwrap() {
        for row in layer.chunks_exact(t1.seq_len) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
    for l in 0..cfg.depth {
        let m = t1.cls_attention_by_channel(l).unwrap();
        assert_eq!(m.len(), 4);
        assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

fn synthetic_trace(rows: Vec<f64>) -> ForwardTrace {
    let t = rows.len();
    ForwardTrace {
        logits: Tensor::matrix(1, 1, vec![0.0]).unwrap(),
        cls: Tensor::matrix(1, 1, vec![0.0]).unwrap(),
        raw_tokens: Tensor::matrix(1, 1, vec![0.0]).unwrap(),
        channel_map: vec![],
        channels: vec![0, 1, 2],
        heads: 1,
        seq_len: t,
        cls_attention: Some(vec![rows]),
    }
}

#[test]
fn attention_by_channel_limits() {
    let t = 49;
    let uniform = synthetic_trace(vec![1.0 / t as f64; t]);
    for v in uniform.cls_attention_by_channel(0).unwrap() {
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }
    let mut peaked = vec![1e-9; t];
    peaked[0] = 0.3;
    for v in &mut peaked[17..33] {
        *v = 0.7 / 16.0;
    }
    let m = synthetic_trace(peaked).cls_attention_by_channel(0).unwrap();
    assert!((m[1] - 1.0).abs() < 1e-6, "{m:?}");
    assert!(matches!(uniform.cls_attention_by_channel(3), Err(Error::Parameter(_))));
}

#[test]
fn cross_entropy_gradient_on_small_model() {
    let cfg = small();
    let state = init_model(&cfg, 7).unwrap();
    let ds = gen_synth_dataset(2, 3, 0.5).unwrap();
    let batch = ds.batch(&[0, 1], &[0, 1, 4]).unwrap();
    let f = |tape: &mut Tape, p: &[chanvit_core::Var]| {
        let fv = forward_on_tape(tape, p, &cfg, &batch)?;
        tape.cross_entropy(fv.logits, &batch.labels)
    };
    let opts = GradCheckOptions {
        max_coords: Some(3),
        ..GradCheckOptions::default()
    };
    let err = grad_check(f, &state.params, &opts).unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let state = init_model(&ModelConfig::default(), 11).unwrap();
    let json = save_checkpoint(&state, dir.path()).unwrap();
    let back = load_checkpoint(&json).unwrap();
    assert_eq!(back, state);
    assert_eq!(back.checksum(), state.checksum());
    let bits = |s: &chanvit_core::model::ModelState| -> Vec<u64> { s.params.iter().flat_map(|p| p.data().iter().map(|v| v.to_bits())).collect() };
    assert_eq!(bits(&back), bits(&state));
    // directory form works too
    assert_eq!(load_checkpoint(dir.path()).unwrap(), state);

    let header: CheckpointHeader = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(header.sections[0].name, "patch_proj.weight");
    assert_eq!(header.sections[0].offset, 0);
    assert_eq!(header.sections[1].offset, 8 * 64 * 64);
    let bin = std::fs::read(dir.path().join(PARAMS_FILE)).unwrap();
    assert_eq!(bin.len(), 8 * state.param_count());
}

#[test]
fn truncated_params_fail_integrity() {
    let dir = tempfile::tempdir().unwrap();
    let state = init_model(&small(), 0).unwrap();
    save_checkpoint(&state, dir.path()).unwrap();
    let bin = dir.path().join(PARAMS_FILE);
    let mut bytes = std::fs::read(&bin).unwrap();
    bytes.truncate(bytes.len() - 8);
    std::fs::write(&bin, bytes).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Integrity { .. })));
    std::fs::write(dir.path().join("checkpoint.json"), "{").unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Format { .. })));
}

#[test]
fn init_rejects_more_channels_than_dim() {
    let cfg = ModelConfig {
        dim: 4,
        heads: 2,
        ..ModelConfig::default()
    };
    assert!(matches!(init_model(&cfg, 0), Err(Error::Config(_))));
}
