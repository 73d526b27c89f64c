use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use codemae::data::ingest::format_manifest;
use codemae::data::{encode_png16, ManifestRow};
use codemae::diagnostics::Table;
use codemae::Tensor;

const TINY: [&str; 13] = [
    "image_size=16",
    "patch=4",
    "width=8",
    "heads=2",
    "encoder_depth=1",
    "decoder_width=8",
    "decoder_heads=2",
    "decoder_depth=1",
    "cdr_depth=1",
    "epochs=3",
    "warmup_epochs=1",
    "synth_scenes=8",
    "batch_size=4",
];

fn codemae(args: &[&str]) -> Output {
    codemae_env(args, &[])
}

fn codemae_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_codemae"));
    c.args(args).env_remove("CODEMAE_THREADS");
    for (k, v) in env {
        c.env(k, v);
    }
    c.output().expect("spawn codemae")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, extra: &[&str]) {
    let mut a = vec!["gen-data", "--out", s(dir), "--size", "16"];
    a.extend_from_slice(extra);
    ok(&codemae(&a));
}

fn pretrain(out: &Path, extra: &[&str]) -> Output {
    let mut a = vec!["pretrain".to_string(), "--out".into(), s(out).into()];
    for kv in TINY.iter().chain(extra) {
        a.push("--set".into());
        a.push(kv.to_string());
    }
    let refs: Vec<&str> = a.iter().map(String::as_str).collect();
    codemae(&refs)
}

fn manifest_rows(dir: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(dir.join("manifest.tsv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split('\t').map(String::from).collect())
        .collect()
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.clone(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn gen_data_writes_paired_rows() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    gen(&d, &["--scenes", "10", "--unpaired-fraction", "0"]);
    let rows = manifest_rows(&d);
    assert_eq!(rows.len(), 10);
    assert!(rows.iter().all(|r| r[4] == "1" && r[2] != "-" && r[3] != "-"));
    assert!(d.join("norm_stats.tsv").exists());
}

#[test]
fn gen_data_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    gen(&a, &["--scenes", "6", "--seed", "4"]);
    gen(&b, &["--scenes", "6", "--seed", "4"]);
    for f in ["manifest.tsv", "norm_stats.tsv", "optical/synth-00003.png", "sar/synth-00005.png"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn gen_data_half_unpaired() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    gen(&d, &["--scenes", "10", "--unpaired-fraction", "0.5"]);
    let rows = manifest_rows(&d);
    let paired = rows.iter().filter(|r| r[4] == "1").count();
    assert_eq!(paired, 5);
    let single = rows.iter().filter(|r| r[4] == "0" && (r[2] == "-") != (r[3] == "-")).count();
    assert_eq!(single, 5);
}

#[test]
fn replay_reproduces_a_run() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    gen(&d, &["--scenes", "5", "--seed", "9", "--unpaired-fraction", "0.4"]);
    let first = snapshot(&d);
    let manifest = t.path().join("saved_manifest.txt");
    std::fs::copy(d.join("run_manifest.txt"), &manifest).unwrap();
    std::fs::remove_dir_all(&d).unwrap();
    ok(&codemae(&["replay", "--manifest", s(&manifest)]));
    let second = snapshot(&d);
    for (p, bytes) in &first {
        if !p.ends_with("run_manifest.txt") {
            assert_eq!(second.get(p), Some(bytes), "{}", p.display());
        }
    }
}

#[test]
fn pretrain_logs_every_step_and_writes_config() {
    let t = tempfile::tempdir().unwrap();
    let r = t.path().join("r");
    ok(&pretrain(&r, &["enable_ccl=false"]));
    let m = Table::read(&r.join("metrics.csv")).unwrap();
    // 8 scenes with half unpaired, batch 4: two steps per epoch
    assert_eq!(m.rows.len(), 6);
    let steps = m.column_f64("step").unwrap();
    assert_eq!(steps, (0..6).map(f64::from).collect::<Vec<_>>());
    assert!(m.column_f64("l_ccl").unwrap().iter().all(|v| *v == 0.0));
    let config = std::fs::read_to_string(r.join("config.txt")).unwrap();
    assert!(config.contains("enable_ccl = false\n"));
    let manifest = std::fs::read_to_string(r.join("run_manifest.txt")).unwrap();
    assert!(manifest.contains("command = pretrain\n"));
    assert!(manifest.ends_with(&config), "manifest embeds the resolved config verbatim");
    assert!(r.join("final.ckpt").exists());
}

#[test]
fn resume_continues_bit_exactly() {
    let t = tempfile::tempdir().unwrap();
    let (full, part) = (t.path().join("full"), t.path().join("part"));
    ok(&pretrain(&full, &["checkpoint_every=1"]));
    let ck = full.join("checkpoints/epoch_0001.ckpt");
    ok(&codemae(&["pretrain", "--out", s(&part), "--resume", s(&ck)]));
    let a = std::fs::read_to_string(full.join("metrics.csv")).unwrap();
    let b = std::fs::read_to_string(part.join("metrics.csv")).unwrap();
    let tail = |s: &str| s.lines().skip(3).map(String::from).collect::<Vec<_>>();
    assert_eq!(tail(&a), tail(&b));
    assert_eq!(tail(&b).len(), 4);
    assert_eq!(
        std::fs::read(full.join("final.ckpt")).unwrap(),
        std::fs::read(part.join("final.ckpt")).unwrap()
    );
}

#[test]
fn exit_codes() {
    let t = tempfile::tempdir().unwrap();
    let r = t.path().join("r");
    assert_eq!(codemae(&["pretrain", "--out", s(&r), "--set", "no_such_key=1"]).status.code(), Some(1));
    assert_eq!(codemae(&["pretrain"]).status.code(), Some(1));
    assert_eq!(codemae(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(codemae(&["--help"]).status.code(), Some(0));
    let missing = t.path().join("missing");
    let out = codemae(&["probe", "--random", "--data", s(&missing), "--out", s(&r)]);
    assert_eq!(out.status.code(), Some(3));
    let out = pretrain(&r, &["lr=1e30", "init_std=10"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(r.join("metrics.csv").exists());
}

#[test]
fn thread_cap_is_validated_and_recorded() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    let a = ["gen-data", "--out", s(&d), "--scenes", "2", "--size", "16"];
    assert_eq!(codemae_env(&a, &[("CODEMAE_THREADS", "0")]).status.code(), Some(1));
    assert_eq!(codemae_env(&a, &[("CODEMAE_THREADS", "many")]).status.code(), Some(1));
    ok(&codemae_env(&a, &[("CODEMAE_THREADS", "3")]));
    let m = std::fs::read_to_string(d.join("run_manifest.txt")).unwrap();
    assert!(m.contains("threads = 3\n"));
}

#[test]
fn diagnose_reports_and_leaves_data_untouched() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    gen(&d, &["--scenes", "6", "--unpaired-fraction", "0.5"]);
    let before = snapshot(&d);
    let (ra, rb) = (t.path().join("ra"), t.path().join("rb"));
    ok(&pretrain(&ra, &["epochs=2"]));
    ok(&pretrain(&rb, &["epochs=2", "enable_ccl=false", "enable_cdr=false"]));
    let (ca, cb) = (ra.join("final.ckpt"), rb.join("final.ckpt"));
    let o = t.path().join("o");

    ok(&codemae(&[
        "diagnose", "--checkpoint", s(&ca), "--checkpoint", s(&cb), "--data", s(&d), "--out", s(&o), "--which",
        "spectrum",
    ]));
    let a = Table::read(&o.join("spectrum_ccl_cdr.csv")).unwrap();
    let b = Table::read(&o.join("spectrum_baseline.csv")).unwrap();
    assert_eq!(a.header, b.header);
    assert!(a.column("variant").unwrap().iter().all(|v| *v == "ccl+cdr"));
    assert!(b.column("variant").unwrap().iter().all(|v| *v == "baseline"));
    let svg = std::fs::read_to_string(o.join("spectrum.svg")).unwrap();
    assert!(svg.contains("singular_value") && svg.contains("index"));

    ok(&codemae(&["diagnose", "--checkpoint", s(&ca), "--data", s(&d), "--out", s(&o), "--which", "alignment"]));
    let al = Table::read(&o.join("alignment_ccl_cdr.csv")).unwrap();
    // 3 paired scenes of 4x4 patches
    assert_eq!(al.rows.len(), 3 * 16);
    let mut keys: Vec<(&str, &str)> = al.rows.iter().map(|r| (r[0].as_str(), r[1].as_str())).collect();
    keys.sort();
    keys.dedup();
    assert_eq!(keys.len(), al.rows.len());

    ok(&codemae(&["diagnose", "--checkpoint", s(&ca), "--data", s(&d), "--out", s(&o), "--which", "pca"]));
    let p = Table::read(&o.join("pca_ccl_cdr.csv")).unwrap();
    // 3 pairs contribute both images, 3 singles one each
    assert_eq!(p.rows.len(), 9);

    let bad = codemae(&["diagnose", "--checkpoint", s(&ca), "--data", s(&d), "--out", s(&o), "--which", "bogus"]);
    assert_eq!(bad.status.code(), Some(1));

    assert_eq!(snapshot(&d), before);
    for f in std::fs::read_dir(&o).unwrap() {
        let p = f.unwrap().path();
        if p.extension().is_some_and(|e| e == "csv") {
            let text = std::fs::read_to_string(&p).unwrap();
            assert_eq!(Table::from_csv(&text).unwrap().to_csv().unwrap(), text, "{}", p.display());
        }
    }
}

#[test]
fn curve_on_identical_pairs_is_one() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    std::fs::create_dir_all(&d).unwrap();
    let mut rows = Vec::new();
    for i in 0..3 {
        let gray: Vec<f32> = (0..32 * 32).map(|k| ((k * 7 + i * 13) % 31) as f32 / 31.0).collect();
        let rgb: Vec<f32> = gray.iter().chain(&gray).chain(&gray).copied().collect();
        let (o, r) = (format!("o{i}.png"), format!("s{i}.png"));
        encode_png16(&d.join(&o), &Tensor::new(&[3, 32, 32], rgb).unwrap()).unwrap();
        encode_png16(&d.join(&r), &Tensor::new(&[1, 32, 32], gray).unwrap()).unwrap();
        rows.push(ManifestRow {
            dataset: "same".into(),
            sample: format!("p{i}"),
            optical: Some(o),
            sar: Some(r),
            paired: true,
            label: None,
        });
    }
    std::fs::write(d.join("manifest.tsv"), format_manifest(&rows)).unwrap();
    let o = t.path().join("o");
    ok(&codemae(&["diagnose", "--data", s(&d), "--out", s(&o), "--which", "curve", "--levels", "3"]));
    let c = Table::read(&o.join("curve.csv")).unwrap();
    assert_eq!(c.rows.len(), 3);
    for v in c.column_f64("mean_ssim").unwrap() {
        assert!((v - 1.0).abs() < 1e-4, "{v}");
    }
    assert!(std::fs::read_to_string(o.join("curve.svg")).unwrap().contains("mean_ssim"));
}

#[test]
fn probe_rows_and_repeatability() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    gen(&d, &["--scenes", "60", "--seed", "2"]);
    let before = snapshot(&d);
    let mut random = vec!["probe", "--random", "--data", s(&d), "--seeds", "5"];
    for kv in TINY.iter() {
        random.extend(["--set", kv]);
    }
    let (o1, o2) = (t.path().join("o1"), t.path().join("o2"));
    ok(&codemae(&[&random[..], &["--out", s(&o1)]].concat()));
    ok(&codemae(&[&random[..], &["--out", s(&o2)]].concat()));
    let a = std::fs::read_to_string(o1.join("probe.csv")).unwrap();
    assert_eq!(a, std::fs::read_to_string(o2.join("probe.csv")).unwrap());
    let tab = Table::from_csv(&a).unwrap();
    assert_eq!(tab.header, ["modality", "seed", "accuracy", "train_accuracy"]);
    for m in ["optical", "sar"] {
        let rows: Vec<&Vec<String>> = tab.rows.iter().filter(|r| r[0] == m).collect();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[5][1], "mean");
        let accs: Vec<f64> = rows[..5].iter().map(|r| r[2].parse().unwrap()).collect();
        let mean: f64 = rows[5][2].parse().unwrap();
        assert!((accs.iter().sum::<f64>() / 5.0 - mean).abs() < 1e-12);
    }
    assert_eq!(snapshot(&d), before);
}

#[test]
fn gradcheck_passes_and_catches_a_flipped_rule() {
    let t = tempfile::tempdir().unwrap();
    let o = t.path().join("g");
    let out = codemae(&["gradcheck", "--component", "ops,losses", "--seeds", "2", "--out", s(&o)]);
    ok(&out);
    let report = Table::read(&o.join("gradcheck.csv")).unwrap();
    for op in ["matmul", "gelu", "softmax", "layer_norm"] {
        assert!(report.column("name").unwrap().contains(&op), "{op}");
    }
    assert!(report.column_f64("max_rel_err").unwrap().iter().all(|e| *e < 1e-4));
    let flipped = codemae(&["gradcheck", "--component", "ops", "--seeds", "1", "--inject-sign-flip", "gelu"]);
    assert_eq!(flipped.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&flipped.stdout).contains("FAIL"));
}
