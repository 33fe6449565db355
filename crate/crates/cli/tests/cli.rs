use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn chanvit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chanvit")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn gen(dir: &Path, n: usize, seed: u64) {
    let o = chanvit(&[
        "gen-data",
        "--out",
        dir.to_str().unwrap(),
        "--samples",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
        "--noise",
        "0.5",
    ]);
    assert!(o.status.success(), "{o:?}");
}

const TINY: &str = r#"{
  "model.dim": 16, "model.depth": 1, "model.heads": 2, "model.patch_size": 16,
  "optim.epochs": 2, "optim.warmup_epochs": 1, "optim.batch_size": 8, "seed": 3
}"#;

fn train_tiny(root: &Path, name: &str, data: &Path, config: &Path) -> std::path::PathBuf {
    let out = root.join(name);
    let o = chanvit(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn checksum(dir: &Path) -> String {
    let s: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("train_summary.json")).unwrap()).unwrap();
    s["checksum"].as_str().unwrap().to_string()
}

#[test]
fn train_eval_and_analyze_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    let test = root.join("test");
    gen(&data, 24, 1);
    gen(&test, 16, 2);
    let cfg = root.join("cfg.json");
    fs::write(&cfg, TINY).unwrap();

    let a = train_tiny(root, "a", &data, &cfg);
    for f in ["checkpoint.json", "params.bin", "train_log.csv", "sampler_counts.csv", "resolved_config.json"] {
        assert!(a.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(a.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "epoch,lr,task_loss,cdl,tdl,train_acc,eval_acc");
    assert_eq!(log.lines().count(), 3);
    let counts = fs::read_to_string(a.join("sampler_counts.csv")).unwrap();
    assert_eq!(counts.lines().next().unwrap(), "channel,times_sampled");

    // same config twice, and a rerun from the resolved config, agree bit for bit
    let b = train_tiny(root, "b", &data, &cfg);
    let c = train_tiny(root, "c", &data, &a.join("resolved_config.json"));
    assert_eq!(checksum(&a), checksum(&b));
    assert_eq!(checksum(&a), checksum(&c));
    assert_eq!(fs::read(a.join("params.bin")).unwrap(), fs::read(c.join("params.bin")).unwrap());

    // eval without --channels is the Full protocol
    let ck = a.join("checkpoint.json");
    let ck = ck.to_str().unwrap();
    let t = test.to_str().unwrap();
    let full = chanvit(&["eval", "--checkpoint", ck, "--data", t]);
    let all = chanvit(&["eval", "--checkpoint", ck, "--data", t, "--channels", "0,1,2,3,4,5"]);
    assert!(full.status.success());
    let acc = |o: &Output| stdout(o).split("accuracy ").nth(1).unwrap().to_string();
    assert_eq!(acc(&full), acc(&all));

    let sweep_csv = root.join("sweep.csv");
    let o = chanvit(&["eval-sweep", "--checkpoint", ck, "--data", t, "--keep", "5", "--out", sweep_csv.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(&sweep_csv).unwrap().lines().count(), 1 + 6);

    let headers = [
        ("mi", "channel_a,channel_b,mi"),
        ("token-dist", "channel,bin_left,bin_right,count"),
        ("attention", "layer,channel,mass"),
        ("sampling-freq", "channel,frequency,hcs_reference"),
    ];
    for (kind, header) in headers {
        let out = root.join(format!("{kind}.csv"));
        let o = chanvit(&["analyze", kind, "--checkpoint", ck, "--data", t, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{kind}: {}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(fs::read_to_string(&out).unwrap().lines().next().unwrap(), header);
    }
}

#[test]
fn sample_stats_hcs_matches_reference() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("freq.csv");
    let o = chanvit(&["sample-stats", "--sampler", "hcs", "--m", "8", "--trials", "200000", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("channel,frequency"));
    let freqs: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(freqs.len(), 8);
    for f in freqs {
        assert!((f - 0.5625).abs() < 0.005, "{f}");
    }
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(chanvit(&[]).status.code(), Some(1));
    assert_eq!(chanvit(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(chanvit(&["gen-data", "--bogus"]).status.code(), Some(1));
    assert_eq!(chanvit(&["--help"]).status.code(), Some(0));
    let o = chanvit(&["eval", "--checkpoint", "/nonexistent/checkpoint.json", "--data", "/nonexistent"]);
    assert_eq!(o.status.code(), Some(2));

    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"model.colour": 1}"#).unwrap();
    let data = tmp.path().join("d");
    gen(&data, 4, 0);
    let o = chanvit(&["train", "--config", cfg.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.colour"));

    let o = chanvit(&["sample-stats", "--sampler", "dcs", "--m", "3", "--temp", "0", "--trials", "5", "--out", "x.csv"]);
    assert_eq!(o.status.code(), Some(1));
}
