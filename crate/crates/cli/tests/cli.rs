use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn scope() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_scope"));
    c.env("RUST_LOG", "warn").env_remove("SCOPE_DATA_DIR");
    c
}

fn run<S: AsRef<std::ffi::OsStr> + std::fmt::Debug>(args: &[S]) -> Output {
    scope().args(args).output().unwrap()
}

fn run_ok<S: AsRef<std::ffi::OsStr> + std::fmt::Debug>(args: &[S]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn pinyin_decomposes() {
    assert_eq!(stdout(&run_ok(&["pinyin", "gao1"])), "g,ao,1\n");
    assert_eq!(stdout(&run_ok(&["pinyin", "完"])), "w,an,2\n");
    assert_eq!(stdout(&run_ok(&["pinyin", "an1"])), ",an,1\n");
}

#[test]
fn exit_codes() {
    let none = run::<&str>(&[]);
    assert_eq!(none.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&none.stderr).contains("Usage"));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["eval", "--pred", "x"]).status.code(), Some(1));
    assert_eq!(run(&["finetune", "--data", "d", "--out", "o", "--scheme", "half"]).status.code(), Some(1));
    assert_eq!(run(&["pinyin", "gao9"]).status.code(), Some(2));
    assert_eq!(run(&["eval", "--pred", "/nonexistent", "--gold", "/nonexistent"]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn data_dir_override() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("pinyin_table.tsv"), "高\tgao4\n").unwrap();
    std::fs::write(dir.path().join("initials.txt"), "g\n").unwrap();
    std::fs::write(dir.path().join("finals.txt"), "ao\n").unwrap();
    let out = scope().env("SCOPE_DATA_DIR", dir.path()).args(["pinyin", "高"]).output().unwrap();
    assert_eq!(String::from_utf8_lossy(&out.stdout), "g,ao,4\n");
    let out = scope().env("SCOPE_DATA_DIR", dir.path()).args(["pinyin", "shou1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        std::fs::create_dir(root.join("corpus")).unwrap();
        let text = "我真糊涂\n他以前想要告诉你\n你们都很高兴\n我们今天去学校\n他再也不会沉默\n她说的话很有道理\n";
        std::fs::write(root.join("corpus/a.txt"), text.repeat(3)).unwrap();
        std::fs::write(root.join("confusion.tsv"), "告\t高搞\n糊\t户胡\n涂\t秃\n他\t她\n兴\t星\n").unwrap();
        Workspace { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

const TINY: &[&str] = &[
    "--embed-dim", "16", "--num-layers", "1", "--num-heads", "2", "--ffn-dim", "32", "--max-len", "16",
];

fn synth(ws: &Workspace, out: &str, seed: &str) {
    run_ok(&[
        "synth",
        "--corpus",
        s(&ws.path("corpus")),
        "--confusion",
        s(&ws.path("confusion.tsv")),
        "--out",
        s(&ws.path(out)),
        "--seed",
        seed,
        "--select-rate",
        "0.3",
        "--top-fraction",
        "1.0",
    ]);
}

fn finetune(ws: &Workspace, data: &str, out: &str, extra: &[&str]) -> Output {
    let (data, out) = (ws.path(data), ws.path(out));
    let mut args = vec![
        "finetune",
        "--data",
        s(&data),
        "--out",
        s(&out),
        "--scheme",
        "full",
        "--granularity",
        "fine",
        "--seed",
        "7",
        "--epochs",
        "2",
        "--batch-size",
        "4",
        "--lr",
        "1e-3",
    ];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn synth_is_reproducible() {
    let ws = Workspace::new();
    synth(&ws, "a.jsonl", "3");
    synth(&ws, "b.jsonl", "3");
    synth(&ws, "c.jsonl", "4");
    let a = std::fs::read(ws.path("a.jsonl")).unwrap();
    assert_eq!(a, std::fs::read(ws.path("b.jsonl")).unwrap());
    assert_ne!(a, std::fs::read(ws.path("c.jsonl")).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 18);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["source", "target", "source_pinyin", "target_pinyin"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ws.path("a.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"]["seed"], 3);
    assert_eq!(manifest["outputs"].as_object().unwrap().len(), 1);
    assert!(manifest["finished_at"].is_string());
}

#[test]
fn pipeline_end_to_end() {
    let ws = Workspace::new();
    synth(&ws, "pairs.jsonl", "1");

    let (data, pre_ckpt) = (ws.path("pairs.jsonl"), ws.path("pre.ckpt"));
    let mut pre = vec![
        "pretrain",
        "--data",
        s(&data),
        "--out",
        s(&pre_ckpt),
        "--seed",
        "7",
        "--epochs",
        "1",
        "--batch-size",
        "8",
    ];
    pre.extend_from_slice(TINY);
    run_ok(&pre);

    // Same seed twice: identical checkpoints.
    let a = finetune(&ws, "pairs.jsonl", "ft_a.ckpt", &["--ckpt", s(&pre_ckpt)]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let b = finetune(&ws, "pairs.jsonl", "ft_b.ckpt", &["--ckpt", s(&pre_ckpt)]);
    assert!(b.status.success());
    let ca = std::fs::read(ws.path("ft_a.ckpt")).unwrap();
    assert!(ca.starts_with(b"SCOPE-CKPT-1\n"));
    assert_eq!(ca, std::fs::read(ws.path("ft_b.ckpt")).unwrap());

    // Resume: unchanged inputs skip the run, changed inputs are refused.
    let manifest = ws.path("ft_a.ckpt.manifest.json");
    let before = std::fs::read_to_string(&manifest).unwrap();
    let again = finetune(&ws, "pairs.jsonl", "ft_a.ckpt", &["--ckpt", s(&pre_ckpt), "--resume"]);
    assert!(again.status.success());
    assert_eq!(std::fs::read_to_string(&manifest).unwrap(), before);
    let mut f = std::fs::OpenOptions::new().append(true).open(ws.path("pairs.jsonl")).unwrap();
    writeln!(f, r#"{{"source":"高诉你","target":"告诉你"}}"#).unwrap();
    let changed = finetune(&ws, "pairs.jsonl", "ft_a.ckpt", &["--ckpt", s(&pre_ckpt), "--resume"]);
    assert_eq!(changed.status.code(), Some(2));

    // Coarse fine-tuning from a fine checkpoint swaps the heads.
    let coarse = run(&[
        "finetune",
        "--data",
        s(&ws.path("pairs.jsonl")),
        "--ckpt",
        s(&ws.path("pre.ckpt")),
        "--out",
        s(&ws.path("coarse.ckpt")),
        "--granularity",
        "coarse",
        "--scheme",
        "part",
        "--epochs",
        "1",
    ]);
    assert!(coarse.status.success(), "{}", String::from_utf8_lossy(&coarse.stderr));

    // Correct stdin, with traces.
    let mut child = scope()
        .args([
            "correct",
            "--ckpt",
            s(&ws.path("ft_a.ckpt")),
            "--trace",
            s(&ws.path("trace.jsonl")),
            "--sighan13-post",
        ])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all("我真户秃\n\n他以前想要高诉你\n".as_bytes()).unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines: Vec<String> = stdout(&out).lines().map(String::from).collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[1], "");
    assert_eq!(lines[0].chars().count(), 4);
    assert_eq!(lines[2].chars().count(), 8);
    let traces = std::fs::read_to_string(ws.path("trace.jsonl")).unwrap();
    assert_eq!(traces.lines().count(), 3);
    let t: serde_json::Value = serde_json::from_str(traces.lines().next().unwrap()).unwrap();
    assert_eq!(t["trace"]["iterations"].as_array().unwrap().len(), 2);

    // Evaluate.
    std::fs::write(
        ws.path("pred.jsonl"),
        "{\"source\":\"高诉你\",\"prediction\":\"告诉你\"}\n{\"source\":\"我真户秃\",\"prediction\":\"我真户涂\"}\n",
    )
    .unwrap();
    std::fs::write(
        ws.path("gold.jsonl"),
        "{\"source\":\"高诉你\",\"target\":\"告诉你\"}\n{\"source\":\"我真户秃\",\"target\":\"我真糊涂\"}\n",
    )
    .unwrap();
    let out = run_ok(&["eval", "--pred", s(&ws.path("pred.jsonl")), "--gold", s(&ws.path("gold.jsonl"))]);
    let text = stdout(&out);
    let json: serde_json::Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
    assert_eq!(json["d_precision"], 0.5);
    assert_eq!(json["c_recall"], 0.5);
    assert!(text.lines().next().unwrap().starts_with("level"));
    let out = run_ok(&[
        "eval",
        "--pred",
        s(&ws.path("pred.jsonl")),
        "--gold",
        s(&ws.path("gold.jsonl")),
        "--level",
        "char",
    ]);
    let json: serde_json::Value = serde_json::from_str(stdout(&out).lines().last().unwrap()).unwrap();
    assert_eq!(json["detection"]["tp"], 2);
    assert_eq!(json["d_recall"], 2.0 / 3.0);
}
