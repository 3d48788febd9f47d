use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vlamd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vlamd"))
        .args(args)
        .env("VLAMD_WORKERS", "2")
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn write_config(dir: &Path, out: &str, extra: &str) -> String {
    let p = dir.join(format!("{out}.conf"));
    let body = format!(
        "data.dir={data}\ndata.charset=abcdef\ndata.height=16\ndata.width=32\ndata.glyph_scale=1\ndata.shift_jitter=1\n\
         data.spacing=1\ndata.min_word_len=2\ndata.max_word_len=3\ndata.n_iv_words=8\ndata.n_eval_iv=4\ndata.n_eval_oov=4\n\
         model.c_model=16\nmodel.enc_layers=1\nmodel.heads=2\nmodel.ff_dim=32\nmodel.max_len=4\n\
         vlad.hidden=16\nvlad.attn_dim=16\nvlad.fusion_dim=16\nvlad.mlp_hidden=16\n\
         transd.layers=1\ntransd.heads=2\ntransd.ff_dim=32\ntransd.mlp_hidden=16\n\
         train.batch_size=4\ntrain.max_steps=6\ntrain.lr=1e-3\ntrain.out_dir={run}\ntrain.ckpt_every=3\n\
         decode.beam_width=3\ndecode.n_best=2\ndecode.max_len=4\n{extra}",
        data = dir.join("data").display(),
        run = dir.join(out).display(),
    );
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(vlamd(&[]).status.code(), Some(1));
    assert_eq!(vlamd(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(vlamd(&["eval", "--ckpt", "x"]).status.code(), Some(1));
    assert_eq!(vlamd(&["--help"]).status.code(), Some(0));
}

#[test]
fn defaults_lists_documented_keys() {
    let o = vlamd(&["defaults"]);
    assert!(o.status.success());
    let s = text(&o);
    assert!(s.contains("train.lambda=0.4"));
    assert!(s.contains("# mutual KL weight"));
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run", "vlad.hiden=8\n");
    let o = vlamd(&["gen-data", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("vlad.hiden"), "{}", text(&o));
}

#[test]
fn missing_inputs_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run", "");
    assert_eq!(vlamd(&["train", "--config", &cfg]).status.code(), Some(2));
    let nowhere = dir.path().join("nope");
    let nowhere = nowhere.to_str().unwrap();
    assert_eq!(vlamd(&["eval", "--ckpt", nowhere, "--data", nowhere]).status.code(), Some(2));
    assert_eq!(vlamd(&["gen-data", "--config", nowhere]).status.code(), Some(2));
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, "run", "");
    let o = vlamd(&["gen-data", "--config", &cfg]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("8 training and 8 eval images"));

    let o = vlamd(&["train", "--config", &cfg]);
    assert!(o.status.success(), "{}", text(&o));
    let out = text(&o);
    assert!(out.contains("IV\t"), "{out}");
    let run = d.join("run");
    for f in ["config.txt", "train.log", "eval.tsv", "final/manifest.txt", "final/tensors.bin", "step-000003/manifest.txt"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let snapshot = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(snapshot.contains("train.lambda=0.4"));
    assert_eq!(fs::read_to_string(run.join("train.log")).unwrap().lines().count(), 7);

    let final_ckpt = run.join("final");
    let final_ckpt = final_ckpt.to_str().unwrap();
    let eval_manifest = d.join("data/eval.tsv");
    let report = d.join("report.tsv");
    let o = vlamd(&[
        "eval",
        "--ckpt",
        final_ckpt,
        "--data",
        eval_manifest.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", text(&o));
    let tsv = fs::read_to_string(&report).unwrap();
    assert_eq!(tsv.lines().count(), 9);
    assert_eq!(tsv, fs::read_to_string(run.join("eval.tsv")).unwrap());

    let image = d.join("data/eval/00000.png");
    let o = vlamd(&[
        "decode",
        "--ckpt",
        final_ckpt,
        "--image",
        image.to_str().unwrap(),
        "--nbest",
        "3",
        "--dump-candidates",
    ]);
    assert!(o.status.success(), "{}", text(&o));
    let stdout = String::from_utf8_lossy(&o.stdout).to_string();
    let lines: Vec<&str> = stdout.lines().collect();
    assert!(lines[1].starts_with("rank\tdirection"));
    let best: Vec<&str> = lines[2].split('\t').collect();
    assert_eq!(best[0], "1");
    assert_eq!(best[2], lines[0]);
    let (l2r, r2l, combined): (f64, f64, f64) = (best[3].parse().unwrap(), best[4].parse().unwrap(), best[5].parse().unwrap());
    assert!((l2r + r2l - combined).abs() < 1e-6);

    // resuming from the midpoint reproduces the straight run's weights exactly;
    // the manifests differ only in train.out_dir
    let cfg2 = write_config(d, "resumed", "");
    let mid = run.join("step-000003");
    let o = vlamd(&["train", "--config", &cfg2, "--resume", mid.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    assert_eq!(
        fs::read(run.join("final/tensors.bin")).unwrap(),
        fs::read(d.join("resumed/final/tensors.bin")).unwrap()
    );

    let other = write_config(d, "other", "vlad.hidden=8\n");
    let o = vlamd(&["train", "--config", &other, "--resume", mid.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
}

#[test]
fn selfcheck_passes() {
    let o = vlamd(&["selfcheck"]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).lines().all(|l| l.starts_with("PASS")));
}
