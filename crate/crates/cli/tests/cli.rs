use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

const SMALL: &str = r#"
seed = 5

[task]
kind = "blobs2d"
eval_size = 90
probe_size = 90

[target]
arch = { kind = "mlp", hidden = [16] }
train_size = 600
epochs = 6
batch_size = 32
lr = 0.01

[generator]
noise_dim = 4
blocks = 2
channels = 8
start_size = 1
init_std = 0.3

[substitute]
arch = { kind = "mlp", hidden = [16] }

[oracle]
mode = "probability"

[training]
batch_size = 24
epochs = 2
steps_per_epoch = 4
lr_substitute = 0.005
lr_generator = 0.0005
decay_start = 1
ast = { method = "pgd", epsilon = 0.1, steps = 3, alpha = 0.05 }

[evaluation]
runs = 2
attacks = [{ method = "pgd", epsilon = 0.1, steps = 5, alpha = 0.025 }]
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_subsynth"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    (dir, cfg)
}

fn only_run_dir(out: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = std::fs::read_dir(out).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs[0].clone()
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["run"])), 1);
    assert_eq!(code(&run(&["run", "--config", "x.toml", "--bogus"])), 1);
    assert_eq!(code(&run(&["train-substitute", "--config", "x.toml", "--mode", "logits"])), 1);
}

#[test]
fn config_errors_exit_1_and_name_the_problem() {
    let (dir, _) = setup();
    let missing = run(&["run", "--config", dir.path().join("nope.toml").to_str().unwrap()]);
    assert_eq!(code(&missing), 1);
    assert!(text(&missing).contains("nope.toml"));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, SMALL.replace("decay_start = 1", "decay_start = 9")).unwrap();
    let o = run(&["run", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(text(&o).contains("training"), "{}", text(&o));
}

#[test]
fn stages_run_one_after_another() {
    let (dir, cfg) = setup();
    let out = dir.path().join("runs");
    let common = ["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    let with = |cmd: &'static str| [&[cmd][..], &common[..]].concat();

    // Substitute training needs a target first.
    let early = run(&with("train-substitute"));
    assert_eq!(code(&early), 1, "{}", text(&early));

    let o = run(&with("train-target"));
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(text(&o).contains("target accuracy"));
    let o = run(&with("train-substitute"));
    assert_eq!(code(&o), 0, "{}", text(&o));
    let o = run(&with("attack"));
    assert_eq!(code(&o), 0, "{}", text(&o));
    let o = run(&with("evaluate"));
    assert_eq!(code(&o), 0, "{}", text(&o));
    let reports: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(reports["attacks"][0]["runs"], 2);

    let dir = only_run_dir(&out);
    for f in ["target.ckpt", "substitute.ckpt", "metrics.csv", "adversarial.csv", "reports.json"] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    let mut adv = csv::Reader::from_path(dir.join("adversarial.csv")).unwrap();
    assert_eq!(adv.headers().unwrap().len(), 2 + 2 * 2);
    assert_eq!(adv.records().count(), 90);
}

#[test]
fn seed_flag_changes_the_run_directory() {
    let (dir, cfg) = setup();
    let out = dir.path().join("runs");
    for seed in ["1", "2"] {
        let o = run(&[
            "train-target",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            seed,
        ]);
        assert_eq!(code(&o), 0, "{}", text(&o));
    }
    let mut seeds: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap().rsplit('-').next().unwrap().to_string())
        .collect();
    seeds.sort();
    assert_eq!(seeds, ["s1", "s2"]);
}

#[test]
fn unreachable_oracle_exits_3() {
    let (dir, cfg) = setup();
    let addr = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let o = run(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--oracle-url",
        &format!("http://{addr}"),
    ]);
    assert_eq!(code(&o), 3, "{}", text(&o));
}

#[test]
fn served_target_backs_remote_training() {
    let (dir, cfg) = setup();
    let out = dir.path().join("runs");
    let common = ["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    assert_eq!(code(&run(&[&["train-target"][..], &common[..]].concat())), 0);

    let mut server = bin()
        .args([&["serve"][..], &common[..], &["--bind", "127.0.0.1:0"][..]].concat())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let url = line.split_whitespace().last().unwrap().to_string();
    assert!(url.starts_with("http://127.0.0.1:"), "{line}");

    let remote_out = dir.path().join("remote");
    let o = run(&[
        "train-substitute",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        remote_out.to_str().unwrap(),
        "--oracle-url",
        &url,
        "--mode",
        "label",
    ]);
    let _ = server.kill();
    let _ = server.wait();
    assert_eq!(code(&o), 0, "{}", text(&o));
    let run_dir = only_run_dir(&remote_out);
    assert!(run_dir.join("substitute.ckpt").is_file());
    assert!(!run_dir.join("target.ckpt").exists());
    let saved = std::fs::read_to_string(run_dir.join("config.toml")).unwrap();
    assert!(saved.contains("mode = \"label\"") && saved.contains(&url), "{saved}");
}
