//! End-to-end runs of the `reportree` binary.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

use reportree::agents::parse_training_samples;
use reportree::metrics::parse_metrics;
use reportree::report::{parse_reports, render_reports, Split, SplitAssignment, StructuredReport};
use reportree::template::{template_stats, Level, ReportTemplate};
use reportree::testkit::{real_shaped_template, reference_scores};
use reportree::Metrics;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reportree"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn bundle(dir: &Path) {
    fs::write(dir.join("synth.toml"), "seed = 13\npatient_count = 80\n").unwrap();
    ok(
        dir,
        &["gen-synth", "--config", "synth.toml", "--out-dir", "data"],
    );
    let data = [
        "--vocab",
        "data/vocabulary.txt",
        "--corpus",
        "data/corpus.txt",
    ];
    ok(
        dir,
        &[&["build-template"][..], &data, &["--out", "t.json"]].concat(),
    );
    ok(
        dir,
        &[
            &["make-reports", "--template", "t.json"][..],
            &data,
            &["--out", "gold.jsonl", "--samples", "samples.jsonl"],
        ]
        .concat(),
    );
    ok(
        dir,
        &[
            &["split"][..],
            &data,
            &["--seed", "2", "--out", "splits.csv"],
        ]
        .concat(),
    );
}

fn template(dir: &Path) -> ReportTemplate {
    ReportTemplate::deserialize(&fs::read(dir.join("t.json")).unwrap()).unwrap()
}

fn reports(path: &Path) -> Vec<StructuredReport> {
    parse_reports(&fs::read_to_string(path).unwrap()).unwrap()
}

fn metrics(path: &Path) -> Metrics {
    parse_metrics(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn test_split_metrics_match_reference_scorer() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    bundle(d);
    for agent in ["random:9", "majority", "all-negative"] {
        ok(
            d,
            &[
                "evaluate",
                "--template",
                "t.json",
                "--gold",
                "gold.jsonl",
                "--splits",
                "splits.csv",
                "--subset",
                "test",
                "--agent",
                agent,
                "--parallelism",
                "3",
                "--out",
                "m.txt",
                "--predictions",
                "pred.jsonl",
            ],
        );
        let t = template(d);
        let splits =
            SplitAssignment::parse(&fs::read_to_string(d.join("splits.csv")).unwrap()).unwrap();
        let golds: Vec<_> = reports(&d.join("gold.jsonl"))
            .into_iter()
            .filter(|g| splits.split_of(&g.patient_id) == Some(Split::Test))
            .collect();
        let preds = reports(&d.join("pred.jsonl"));
        assert_eq!(preds.len(), golds.len());
        let m = metrics(&d.join("m.json"));
        let r = reference_scores(&preds, &golds, &t);
        assert_eq!(m.report_count as usize, golds.len());
        assert!((m.macro_f1 - r.overall.f1).abs() < 1e-9, "{agent}");
        assert!(
            (m.macro_precision - r.overall.precision).abs() < 1e-9,
            "{agent}"
        );
        assert!((m.macro_recall - r.overall.recall).abs() < 1e-9, "{agent}");
        assert!(
            (m.report_accuracy - r.overall.report_accuracy).abs() < 1e-9,
            "{agent}"
        );
        assert!(m.report_accuracy < 1.0, "{agent} should not be perfect");
    }
}

#[test]
fn served_oracle_matches_builtin_over_exec_and_tcp() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    bundle(d);
    let eval = |agent: &str, out: &str| {
        ok(
            d,
            &[
                "evaluate",
                "--template",
                "t.json",
                "--gold",
                "gold.jsonl",
                "--agent",
                agent,
                "--parallelism",
                "2",
                "--out",
                out,
            ],
        )
    };
    eval("oracle", "builtin.txt");
    let exec = format!(
        "exec:{} serve-agent --template t.json --agent oracle --gold gold.jsonl",
        env!("CARGO_BIN_EXE_reportree")
    );
    eval(&exec, "exec.txt");
    assert_eq!(
        fs::read(d.join("builtin.json")).unwrap(),
        fs::read(d.join("exec.json")).unwrap()
    );
    assert_eq!(metrics(&d.join("exec.json")).report_accuracy, 1.0);

    let mut server = Command::new(env!("CARGO_BIN_EXE_reportree"))
        .args([
            "serve-agent",
            "--template",
            "t.json",
            "--agent",
            "oracle",
            "--gold",
            "gold.jsonl",
        ])
        .args(["--listen", "127.0.0.1:0"])
        .current_dir(d)
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stderr.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let addr = line
        .trim()
        .strip_prefix("listening on ")
        .unwrap()
        .to_string();
    ok(
        d,
        &[
            "evaluate",
            "--template",
            "t.json",
            "--gold",
            "gold.jsonl",
            "--agent",
            &format!("tcp:{addr}"),
            "--out",
            "tcp.txt",
        ],
    );
    assert!(server.wait().unwrap().success());
    assert_eq!(
        fs::read(d.join("builtin.json")).unwrap(),
        fs::read(d.join("tcp.json")).unwrap()
    );
}

#[test]
fn exit_codes_and_error_prefixes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    bundle(d);

    let out = run(d, &["evaluate", "--template", "t.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr(&out).starts_with("error[usage]: "),
        "{}",
        stderr(&out)
    );
    let out = run(
        d,
        &[
            "split", "--vocab", "v", "--corpus", "c", "--ratios", "0.5,0.6", "--out", "x",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(run(d, &["--help"]).status.code(), Some(0));

    let out = run(d, &["stats", "--template", "missing.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).starts_with("error[data]: "));
    fs::write(d.join("junk.json"), "{not a template").unwrap();
    assert_eq!(
        run(d, &["stats", "--template", "junk.json"]).status.code(),
        Some(2)
    );

    let out = run(
        d,
        &[
            "evaluate",
            "--template",
            "t.json",
            "--gold",
            "gold.jsonl",
            "--agent",
            "exec:echo not-json",
            "--out",
            "bad.txt",
        ],
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("error[agent]: "), "{}", stderr(&out));
    // failed sessions are scored, not dropped
    let m = metrics(&d.join("bad.json"));
    assert_eq!(
        m.report_count as usize,
        reports(&d.join("gold.jsonl")).len()
    );
    let stray: Vec<_> = fs::read_dir(d)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with(".tmp"))
        .collect();
    assert!(stray.is_empty(), "{stray:?}");
}

#[test]
fn stats_check_and_samples() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    bundle(d);
    let t = template(d);
    let s = template_stats(&t);
    let text = ok(d, &["stats", "--template", "t.json"]);
    let expected = format!(
        "questions L1={} L2={} L3={}",
        s.level(Level::L1).questions,
        s.level(Level::L2).questions,
        s.level(Level::L3).questions
    );
    assert_eq!(text.lines().next(), Some(expected.as_str()));
    assert!(text.contains(&format!("total paths {}", s.total_paths())));

    let out = ok(
        d,
        &["check", "--template", "t.json", "--reports", "gold.jsonl"],
    );
    assert!(out.trim_end().ends_with(" 0 inconsistent"), "{out}");

    let mut golds = reports(&d.join("gold.jsonl"));
    let victim = golds.iter_mut().find(|g| !g.instances.is_empty()).unwrap();
    for a in victim.l1_answers.values_mut() {
        *a = reportree::report::YesNo::No;
    }
    fs::write(d.join("broken.jsonl"), render_reports(&golds)).unwrap();
    let out = run(
        d,
        &["check", "--template", "t.json", "--reports", "broken.jsonl"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stdout).contains("1 inconsistent"));

    let samples =
        parse_training_samples(&fs::read_to_string(d.join("samples.jsonl")).unwrap()).unwrap();
    let golds = reports(&d.join("gold.jsonl"));
    let first = &golds[0];
    assert!(samples
        .iter()
        .any(|s| s.patient_id == first.patient_id && s.image_ref == first.image_ref));
    assert!(samples
        .iter()
        .all(|s| s.selections.iter().all(|a| s.valid_answers.contains(a))));
}

#[test]
fn reruns_are_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    bundle(d);
    let before: Vec<Vec<u8>> = [
        "t.json",
        "gold.jsonl",
        "splits.csv",
        "samples.jsonl",
        "data/manifest.json",
    ]
    .iter()
    .map(|f| fs::read(d.join(f)).unwrap())
    .collect();
    bundle(d);
    let after: Vec<Vec<u8>> = [
        "t.json",
        "gold.jsonl",
        "splits.csv",
        "samples.jsonl",
        "data/manifest.json",
    ]
    .iter()
    .map(|f| fs::read(d.join(f)).unwrap())
    .collect();
    assert_eq!(before, after);
}

#[test]
fn stats_on_real_shaped_template() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("real.json"),
        real_shaped_template().serialize(),
    )
    .unwrap();
    let text = ok(dir.path(), &["stats", "--template", "real.json"]);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "questions L1=25 L2=216 L3=477");
    assert!(
        lines
            .iter()
            .any(|l| l.split_whitespace().eq(["L3", "477", "94", "1988", "4.17"])),
        "{text}"
    );
    assert!(text.contains("L2 diseases 103"));
    assert!(text.contains("L2 foreign objects 16"));
}
