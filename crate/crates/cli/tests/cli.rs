use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use stflow_cli::commands::{payloads, write_window_file, CHECKPOINT_FILE, HISTORY_FILE, METRICS_FILE};
use stflow_core::checkpoint::Checkpoint;
use stflow_core::data::{generate_synthetic, Corpus, SynthConfig};
use stflow_core::model::forward;
use stflow_core::{Ablation, ObservationWindow, Tensor};

const TOY: &str = r#"
seed = 5

[synth]
rows = 3
cols = 3
extra_edges = 2
days = 3
holidays = [1]

[data]
stride = 4

[model]
window = 6
horizon = 2
d_model = 8
d_spatial = 8
d_external = 4
d_ff = 16
gcn_layers = 1
encoder_blocks = 1
heads = 2

[train]
epochs = 2
batch_size = 16
lr = 0.003
"#;

fn stflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stflow")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

struct Toy {
    dir: tempfile::TempDir,
}

impl Toy {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("toy.toml"), TOY).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self) -> PathBuf {
        self.path("toy.toml")
    }

    fn generate(&self) -> PathBuf {
        let data = self.path("data");
        let out = stflow(&["generate", "--config", s(&self.config()), "--out", s(&data)]);
        assert!(out.status.success(), "{}", stderr(&out));
        data
    }

    fn train(&self, data: &Path, name: &str, extra: &[&str]) -> PathBuf {
        let out_dir = self.path(name);
        let config = self.config();
        let mut args = vec!["train", "--config", s(&config), "--data", s(data), "--out", s(&out_dir)];
        args.extend_from_slice(extra);
        let out = stflow(&args);
        assert!(out.status.success(), "{}", stderr(&out));
        out_dir
    }
}

#[test]
fn generate_writes_a_reproducible_corpus() {
    let toy = Toy::new();
    let a = toy.generate();
    for f in ["traffic.csv", "external.csv", "graph.csv", "config.toml"] {
        assert!(a.join(f).exists(), "{f}");
    }
    let b = toy.path("again");
    let out = stflow(&["generate", "--config", s(&toy.config()), "--out", s(&b)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("seed 5"));
    for f in ["traffic.csv", "external.csv", "graph.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let c = toy.path("other-seed");
    stflow(&["generate", "--config", s(&toy.config()), "--seed", "6", "--out", s(&c)]);
    assert_ne!(std::fs::read(a.join("traffic.csv")).unwrap(), std::fs::read(c.join("traffic.csv")).unwrap());
    assert!(std::fs::read_to_string(c.join("config.toml")).unwrap().contains("seed = 6"));
}

#[test]
fn invalid_config_fails_before_writing() {
    let toy = Toy::new();
    let bad = toy.path("bad.toml");
    std::fs::write(&bad, "[synth]\nnoise_sigma = -2.0\n").unwrap();
    let out_dir = toy.path("never");
    let out = stflow(&["generate", "--config", s(&bad), "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("noise_sigma"), "{}", stderr(&out));
    assert!(!out_dir.exists());

    std::fs::write(&bad, "[trian]\nepochs = 1\n").unwrap();
    let out = stflow(&["generate", "--config", s(&bad), "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("trian"), "{}", stderr(&out));

    let out = stflow(&["generate", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_eval_forecast_round() {
    let toy = Toy::new();
    let data = toy.generate();
    let run = toy.train(&data, "run", &[]);
    let history = std::fs::read_to_string(run.join(HISTORY_FILE)).unwrap();
    let lines: Vec<&str> = history.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,val_loss,seconds");
    assert_eq!(lines.len(), 1 + 2);
    assert!(run.join("config.toml").exists());

    let ablated = toy.train(&data, "nofusion", &["--ablate", "fusion"]);
    let ckpt = Checkpoint::load(&ablated.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ckpt.ablation, Ablation::FUSION_OFF);

    // eval: six rows, whether or not every ablation has its own checkpoint
    let ev = toy.path("eval");
    let out = stflow(&[
        "eval",
        "--config",
        s(&toy.config()),
        "--data",
        s(&data),
        "--checkpoint",
        s(&run.join(CHECKPOINT_FILE)),
        "--checkpoint",
        s(&ablated.join(CHECKPOINT_FILE)),
        "--out",
        s(&ev),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let metrics = std::fs::read_to_string(ev.join(METRICS_FILE)).unwrap();
    let names: Vec<&str> = metrics.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["hybrid", "gnn_off", "temporal_off", "fusion_off", "persistence", "historical-average"]);

    // forecast on the last T steps of the corpus
    let corpus = Corpus::load(&data, 5).unwrap();
    let t = ckpt.model.window;
    let len = corpus.dataset.len();
    let window_file = toy.path("window.jsonl");
    write_window_file(&window_file, &payloads(&corpus.dataset, len - t..len)).unwrap();
    let ckpt_path = run.join(CHECKPOINT_FILE);
    let out = stflow(&["forecast", "--checkpoint", s(&ckpt_path), "--window", s(&window_file)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "step,node_id,value");
    assert_eq!(rows.len() - 1, ckpt.model.horizon * 9);

    // same numbers as the library forward pass
    let ckpt = Checkpoint::load(&ckpt_path).unwrap();
    let norm = ckpt.norm.apply(&corpus.dataset).unwrap();
    let x: Vec<f64> = norm.values.data()[(len - t) * 9 * 3..].to_vec();
    let z: Vec<f64> = norm.externals.data()[(len - t) * 5..].to_vec();
    let window = ObservationWindow { x: Tensor::new(vec![t, 9, 3], x).unwrap(), z: Tensor::new(vec![t, 5], z).unwrap(), anchor: len - 1 };
    let fc = forward(&window, &ckpt.graph().unwrap(), &ckpt.params().unwrap(), ckpt.ablation).unwrap();
    for (row, v) in rows[1..].iter().zip(fc.values.data()) {
        let parts: Vec<&str> = row.split(',').collect();
        let node: usize = parts[1].parse().unwrap();
        let got: f64 = parts[2].parse().unwrap();
        let want = ckpt.norm.denormalize_value(node, 0, *v);
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{row}: {want}");
    }

    // a window one step short names the expected length
    write_window_file(&window_file, &payloads(&corpus.dataset, len - t + 1..len)).unwrap();
    let out = stflow(&["forecast", "--checkpoint", s(&ckpt_path), "--window", s(&window_file)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains(&format!("T={t}")), "{}", stderr(&out));
}

#[test]
fn eval_rejects_a_checkpoint_for_another_network() {
    let toy = Toy::new();
    let data = toy.generate();
    let run = toy.train(&data, "run", &[]);
    let big = toy.path("big");
    let (graph, dataset) = generate_synthetic(&SynthConfig { days: 3, holidays: vec![1], ..SynthConfig::default() }).unwrap();
    stflow_core::data::write_corpus(&big, &graph, &dataset).unwrap();
    let out = stflow(&["eval", "--data", s(&big), "--checkpoint", s(&run.join(CHECKPOINT_FILE)), "--out", s(&toy.path("e"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("N=9") && err.contains("N=16"), "{err}");
}

#[test]
fn train_reports_a_missing_graph_file() {
    let toy = Toy::new();
    let data = toy.generate();
    std::fs::remove_file(data.join("graph.csv")).unwrap();
    let out = stflow(&["train", "--config", s(&toy.config()), "--data", s(&data), "--out", s(&toy.path("run"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("graph.csv"), "{}", stderr(&out));
}

#[test]
fn gradcheck_passes_by_default_and_fails_below_noise() {
    let out = stflow(&["gradcheck"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    // one line per parameter group plus the summary
    let groups = text.lines().filter(|l| l.contains("max rel err")).count();
    assert!(groups > 20, "{text}");
    assert!(text.lines().any(|l| l.starts_with("head.weight")));
    let out = stflow(&["gradcheck", "--tol", "1e-12"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn serve_answers_health_over_tcp() {
    let toy = Toy::new();
    let data = toy.generate();
    let run = toy.train(&data, "run", &[]);
    let mut child = Command::new(env!("CARGO_BIN_EXE_stflow"))
        .args(["serve", "--checkpoint", s(&run.join(CHECKPOINT_FILE)), "--address", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut first = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut first).unwrap();
    let addr = first.trim().strip_prefix("listening on ").expect("address line").to_string();
    let stream = TcpStream::connect(&addr).unwrap();
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut writer = stream;
    writer.write_all(b"/health\n").unwrap();
    let mut reply = String::new();
    reader.read_line(&mut reply).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    let v: serde_json::Value = serde_json::from_str(&reply).unwrap();
    assert_eq!(v["status"], "warming");
    assert_eq!(v["fill"], 0);
    assert_eq!(v["window"], 6);
    assert_eq!(v["nodes"], 9);
}

#[test]
fn serve_refuses_a_graph_of_the_wrong_size() {
    let toy = Toy::new();
    let data = toy.generate();
    let run = toy.train(&data, "run", &[]);
    let graph = toy.path("g.csv");
    std::fs::write(&graph, "src,dst\n0,1\n1,0\n").unwrap();
    let out = stflow(&["serve", "--checkpoint", s(&run.join(CHECKPOINT_FILE)), "--graph", s(&graph), "--address", "127.0.0.1:0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("2 nodes"), "{}", stderr(&out));
}
