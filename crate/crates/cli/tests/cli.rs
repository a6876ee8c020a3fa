//! End-to-end tests of the `cda` binary: exit codes, artifact layout, and
//! rerun determinism.

use assert_cmd::Command;
use predicates::prelude::*;
use std::path::Path;

fn cda() -> Command {
    Command::cargo_bin("cda").unwrap()
}

/// Generates a small labeled pair under `dir` and returns the two paths.
fn synth_pair(dir: &Path, seed: u64, shift_noise: f64) -> (std::path::PathBuf, std::path::PathBuf) {
    cda()
        .args([
            "synth",
            "--out",
            dir.to_str().unwrap(),
            "--classes",
            "5",
            "--samples",
            "12",
            "--dim",
            "8",
            "--spread",
            "0.12",
            "--shift",
            "0.36",
            "--shift-noise",
            &shift_noise.to_string(),
            "--seed",
            &seed.to_string(),
        ])
        .assert()
        .success();
    (dir.join("source.emb"), dir.join("target.emb"))
}

fn stdout_of(cmd: &mut Command) -> String {
    let out = cmd.assert().success().get_output().stdout.clone();
    String::from_utf8(out).unwrap()
}

fn field(stdout: &str, key: &str, col: usize) -> String {
    stdout
        .lines()
        .find(|l| l.starts_with(key))
        .unwrap_or_else(|| panic!("no {key} line in {stdout}"))
        .split('\t')
        .nth(col)
        .unwrap()
        .to_string()
}

#[test]
fn synth_writes_loadable_files_with_label_sidecars() {
    let dir = tempfile::tempdir().unwrap();
    let (src, tgt) = synth_pair(dir.path(), 1, 0.0);
    for p in [&src, &tgt] {
        assert!(p.exists());
        let mut lab = p.as_os_str().to_owned();
        lab.push(".lab");
        assert!(Path::new(&lab).exists());
    }
    let bytes = std::fs::read(&src).unwrap();
    assert_eq!(&bytes[..4], b"EMB1");
    assert_eq!(bytes.len(), 12 + 60 * 8 * 4);
}

#[test]
fn mmd_identical_inputs_report_zero_biased() {
    let dir = tempfile::tempdir().unwrap();
    let (src, _) = synth_pair(dir.path(), 2, 0.0);
    let out = stdout_of(cda().args(["mmd", src.to_str().unwrap(), src.to_str().unwrap()]));
    let biased: f64 = field(&out, "biased", 1).parse().unwrap();
    assert!(
        biased.abs() < 1e-12,
        "biased mmd on identical sets: {biased}"
    );
}

#[test]
fn mmd_ladder_doubles_bandwidths() {
    let dir = tempfile::tempdir().unwrap();
    let (src, tgt) = synth_pair(dir.path(), 3, 0.5);
    let out = stdout_of(cda().args([
        "mmd",
        src.to_str().unwrap(),
        tgt.to_str().unwrap(),
        "--kernels",
        "5",
    ]));
    let bandwidths: Vec<f64> = field(&out, "bandwidths", 1)
        .split(',')
        .map(|s| s.parse().unwrap())
        .collect();
    assert_eq!(bandwidths.len(), 5);
    for w in bandwidths.windows(2) {
        assert!((w[1] / w[0] - 2.0).abs() < 1e-12, "ratio {}", w[1] / w[0]);
    }
    assert!(out.contains("linear_streaming"));
}

#[test]
fn missing_input_exits_2_and_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let (src, _) = synth_pair(dir.path(), 4, 0.0);
    cda()
        .args(["mmd", "/nonexistent/q.emb", src.to_str().unwrap()])
        .assert()
        .code(2)
        .stderr(predicate::str::contains("/nonexistent/q.emb"));
}

#[test]
fn cluster_out_of_range_alpha_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let (_, tgt) = synth_pair(dir.path(), 5, 0.0);
    cda()
        .args(["cluster", tgt.to_str().unwrap(), "--alpha", "1.5"])
        .assert()
        .code(2)
        .stderr(predicate::str::contains("alpha"));
}

#[test]
fn cluster_writes_label_file_and_quality_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (_, tgt) = synth_pair(dir.path(), 6, 0.0);
    let labels = dir.path().join("pl.lab");
    let out = stdout_of(cda().args([
        "cluster",
        tgt.to_str().unwrap(),
        "--out",
        labels.to_str().unwrap(),
    ]));
    assert!(out.contains("cluster_count"));
    assert!(
        out.contains("pairwise_f"),
        "sidecar labels enable quality: {out}"
    );
    let bytes = std::fs::read(&labels).unwrap();
    assert_eq!(&bytes[..4], b"LAB1");
    assert_eq!(bytes.len(), 8 + 60 * 8);
}

#[test]
fn adapt_writes_artifacts_and_eval_scores_them() {
    let dir = tempfile::tempdir().unwrap();
    let (src, tgt) = synth_pair(dir.path(), 7, 0.9);
    let run = dir.path().join("run");
    cda()
        .args([
            "adapt",
            "--source",
            src.to_str().unwrap(),
            "--target",
            tgt.to_str().unwrap(),
            "--out",
            run.to_str().unwrap(),
            "--iters",
            "400",
        ])
        .assert()
        .success()
        .stdout(predicate::str::contains("stage-3"));
    for f in [
        "adapter.cdap",
        "baseline.cdap",
        "pseudo_labels.lab",
        "stage2_loss.csv",
        "stage4_loss.csv",
        "report.txt",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let csv = std::fs::read_to_string(run.join("stage2_loss.csv")).unwrap();
    assert!(csv.starts_with("iter,source_cls,mmd,target_pseudo_cls,total\n"));

    let ckpt = run.join("adapter.cdap");
    let out = stdout_of(cda().args([
        "eval",
        tgt.to_str().unwrap(),
        "--params",
        ckpt.to_str().unwrap(),
        "--far",
        "0.01",
    ]));
    let tar: f64 = field(&out, "tar_at_far", 2).parse().unwrap();
    assert!((0.0..=1.0).contains(&tar));
    assert!(out.contains("checkpoint applied"));
}

#[test]
fn eval_identification_needs_gallery_for_fpir() {
    let dir = tempfile::tempdir().unwrap();
    let (_, tgt) = synth_pair(dir.path(), 8, 0.0);
    cda()
        .args(["eval", tgt.to_str().unwrap(), "--fpir", "0.01"])
        .assert()
        .code(2);
}

#[test]
fn eval_gallery_mode_reports_cmc() {
    let dir = tempfile::tempdir().unwrap();
    let (src, tgt) = synth_pair(dir.path(), 9, 0.0);
    let outdir = dir.path().join("metrics");
    let out = stdout_of(cda().args([
        "eval",
        tgt.to_str().unwrap(),
        "--gallery",
        src.to_str().unwrap(),
        "--ranks",
        "1,5",
        "--out",
        outdir.to_str().unwrap(),
    ]));
    assert!(out.contains("cmc\trank_1"));
    assert!(out.contains("cmc\trank_5"));
    let cmc = std::fs::read_to_string(outdir.join("cmc.csv")).unwrap();
    assert!(cmc.starts_with("rank,rate\n"));
    assert!(outdir.join("roc.csv").exists());
    assert!(outdir.join("eval_report.tsv").exists());
}

#[test]
fn eval_open_set_reports_tpir_and_mated_cmc() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    cda()
        .args([
            "synth",
            "--out",
            data.to_str().unwrap(),
            "--classes",
            "6",
            "--samples",
            "12",
            "--dim",
            "8",
            "--spread",
            "0.12",
            "--shift",
            "0.2",
            "--seed",
            "5",
            "--format",
            "csv",
        ])
        .assert()
        .success();
    let src = std::fs::read_to_string(data.join("source.csv")).unwrap();
    let partial: String = src
        .lines()
        .filter(|l| l.split(',').next().unwrap().parse::<i64>().unwrap() < 4)
        .map(|l| format!("{l}\n"))
        .collect();
    let gal = dir.path().join("gallery.csv");
    std::fs::write(&gal, partial).unwrap();

    let out = stdout_of(cda().args([
        "eval",
        data.join("target.csv").to_str().unwrap(),
        "--format",
        "csv",
        "--gallery",
        gal.to_str().unwrap(),
        "--fpir",
        "0.1",
        "--ranks",
        "1",
    ]));
    assert!(out.contains("tpir_at_fpir\t0.1\t"), "{out}");
    assert!(out.contains("cmc\trank_1\t"), "{out}");
    assert!(out.contains("cmc over 48 mated probes"), "{out}");

    cda()
        .args([
            "eval",
            data.join("target.csv").to_str().unwrap(),
            "--format",
            "csv",
            "--gallery",
            data.join("source.csv").to_str().unwrap(),
            "--fpir",
            "0.1",
        ])
        .assert()
        .code(2)
        .stderr(predicate::str::contains("unenrolled"));
}

#[test]
fn eval_unlabeled_input_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let (src, _) = synth_pair(dir.path(), 10, 0.0);
    let bare = dir.path().join("bare.emb");
    std::fs::copy(&src, &bare).unwrap();
    cda()
        .args(["eval", bare.to_str().unwrap()])
        .assert()
        .code(2)
        .stderr(predicate::str::contains("labeled"));
}

fn write_config(dir: &Path, src: &Path, tgt: &Path, out: &Path) -> std::path::PathBuf {
    let conf = dir.join("run.conf");
    std::fs::write(
        &conf,
        format!(
            "# smoke settings\nsource = {}\ntarget = {}\nout = {}\niters = 400\nseed = 3\nfar = 0.01\n",
            src.display(),
            tgt.display(),
            out.display()
        ),
    )
    .unwrap();
    conf
}

#[test]
fn pipeline_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (src, tgt) = synth_pair(dir.path(), 11, 0.9);
    let conf = write_config(dir.path(), &src, &tgt, &dir.path().join("a"));
    cda()
        .args(["pipeline", "--config", conf.to_str().unwrap()])
        .assert()
        .success();
    cda()
        .args([
            "pipeline",
            "--config",
            conf.to_str().unwrap(),
            "--out",
            dir.path().join("b").to_str().unwrap(),
        ])
        .assert()
        .success();
    for f in [
        "adapter.cdap",
        "pseudo_labels.lab",
        "stage2_loss.csv",
        "stage4_loss.csv",
    ] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between reruns");
    }
}

#[test]
fn pipeline_flag_overrides_config_value() {
    let dir = tempfile::tempdir().unwrap();
    let (src, tgt) = synth_pair(dir.path(), 12, 0.0);
    let conf = write_config(dir.path(), &src, &tgt, &dir.path().join("a"));
    // The file's alpha is valid; an invalid override must be what applies.
    cda()
        .args([
            "pipeline",
            "--config",
            conf.to_str().unwrap(),
            "--alpha",
            "1.5",
        ])
        .assert()
        .code(2)
        .stderr(predicate::str::contains("1.5"));
}

#[test]
fn pipeline_unknown_config_key_exits_2_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "iters = 100\nalhpa = 0.5\n").unwrap();
    cda()
        .args(["pipeline", "--config", conf.to_str().unwrap()])
        .assert()
        .code(2)
        .stderr(predicate::str::contains("line 2"));
}

#[test]
fn sweep_emits_one_row_per_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let (src, tgt) = synth_pair(dir.path(), 13, 0.9);
    let out = dir.path().join("sweep");
    let conf = write_config(dir.path(), &src, &tgt, &out);
    let stdout = stdout_of(cda().args([
        "pipeline",
        "--config",
        conf.to_str().unwrap(),
        "--sweep-alpha",
        "0.6:0.7:0.025",
    ]));
    let table = std::fs::read_to_string(out.join("sweep.tsv")).unwrap();
    assert!(stdout.contains(&table));
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 6, "header plus five alphas: {table}");
    assert!(lines[0].starts_with("alpha\tclusters\tassigned"));
    let alphas: Vec<f64> = lines[1..]
        .iter()
        .map(|l| l.split('\t').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(alphas, vec![0.6, 0.625, 0.65, 0.675, 0.7]);
}

#[test]
fn bad_thread_env_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let (src, _) = synth_pair(dir.path(), 14, 0.0);
    cda()
        .env("CDA_THREADS", "many")
        .args(["mmd", src.to_str().unwrap(), src.to_str().unwrap()])
        .assert()
        .code(2)
        .stderr(predicate::str::contains("CDA_THREADS"));
}
