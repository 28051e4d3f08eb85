use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
[dataset]
n = 120
[model]
encoder_hidden = 32
decoder_hidden = 32
[training]
iterations = 12
beta = 0.002
eval_every = 6
[eval]
n_targets = 16
n_z = 2
grid_y = 3
grid_z = 3
";

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("exp.ini"), format!("{TINY}{extra}")).unwrap();
        Workspace { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn out(&self) -> PathBuf {
        self.path("out")
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_ctrlgen"))
            .args(args)
            .arg("--config")
            .arg(self.path("exp.ini"))
            .env("CTRLGEN_OUT", self.out())
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }
}

fn stderr_line(out: &Output) -> String {
    let s = String::from_utf8_lossy(&out.stderr).to_string();
    assert_eq!(s.trim_end().lines().count(), 1, "error should be one line: {s}");
    s.trim_end().to_string()
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn gen_data_writes_both_splits_and_prints_checksums() {
    let ws = Workspace::new("");
    let stdout = ws.ok(&["gen-data"]);
    assert!(read(&ws.out().join("train.cgds")).starts_with(b"CGDS"));
    assert!(read(&ws.out().join("test.cgds")).starts_with(b"CGDS"));
    assert!(stdout.contains("n 120 (train 113, test 7)"), "{stdout}");
    assert!(stdout.contains("ranges id  0.08:0.2,0.25:0.75,0.25:0.75"));
    assert_eq!(stdout.matches("sha256 ").count(), 2);
}

#[test]
fn same_config_gives_identical_files() {
    let a = Workspace::new("");
    let b = Workspace::new("");
    for ws in [&a, &b] {
        ws.ok(&["gen-data"]);
        ws.ok(&["train"]);
        ws.ok(&["eval", "--checkpoint", ws.out().join("model.cgck").to_str().unwrap(), "--mode", "ood"]);
    }
    for name in
        ["train.cgds", "test.cgds", "model.cgck", "model-metrics.csv", "model-eval-ood.csv", "model-eval-ood.txt"]
    {
        assert_eq!(read(&a.out().join(name)), read(&b.out().join(name)), "{name} differs");
    }
}

#[test]
fn malformed_ranges_name_the_field() {
    let ws = Workspace::new("");
    let out = ws.run(&["gen-data", "--ranges-id", "1:0,0.2:0.8,0.2:0.8"]);
    assert_eq!(out.status.code(), Some(1));
    let line = stderr_line(&out);
    assert!(line.starts_with("error[CONFIG]:") && line.contains("--ranges-id"), "{line}");

    let ws = Workspace::new("");
    std::fs::write(ws.path("exp.ini"), "[dataset]\nranges_ood = 1:0,0:1,0:1\n").unwrap();
    let line = stderr_line(&ws.run(&["gen-data"]));
    assert!(line.starts_with("error[CONFIG]:") && line.contains("dataset.ranges_ood"), "{line}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let ws = Workspace::new("[training]\nalpah = 3\n");
    let out = ws.run(&["gen-data"]);
    assert!(!out.status.success());
    assert!(stderr_line(&out).contains("training.alpah"));
}

#[test]
fn train_without_dataset_is_an_io_error() {
    let ws = Workspace::new("");
    let out = ws.run(&["train"]);
    assert_eq!(out.status.code(), Some(1));
    let line = stderr_line(&out);
    assert!(line.starts_with("error[IO]:") && line.contains("train.cgds"), "{line}");
}

#[test]
fn ablation_flags_reach_the_trainer() {
    let ws = Workspace::new("");
    ws.ok(&["gen-data"]);
    let s = ws.ok(&["train", "--ablation", "ours-2", "--name", "o2"]);
    assert!(s.contains("N2 0") && s.contains("0 generated samples"), "{s}");
    let s = ws.ok(&["train", "--ablation", "base", "--name", "base"]);
    assert!(s.contains("alpha 0") && s.contains("xi 0"), "{s}");
    let s = ws.ok(&["train", "--ablation", "ours-1", "--plain-sgd", "--accumulate", "--name", "o1"]);
    assert!(s.contains("N2 1") && s.contains("xi 0") && s.contains("alpha 10"), "{s}");
    assert!(ws.out().join("o1.cgck").exists() && ws.out().join("o1-metrics.csv").exists());

    let bad = ws.run(&["train", "--ablation", "ours-4"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(stderr_line(&bad).starts_with("error[USAGE]:"));
}

#[test]
fn warm_start_continues_and_checks_architecture() {
    let ws = Workspace::new("");
    ws.ok(&["gen-data"]);
    ws.ok(&["train"]);
    let ckpt = ws.out().join("model.cgck");
    ws.ok(&["train", "--warm-start", ckpt.to_str().unwrap(), "--name", "cont"]);
    assert_ne!(read(&ckpt), read(&ws.out().join("cont.cgck")));

    let wider = TINY.replace("encoder_hidden = 32", "encoder_hidden = 48");
    std::fs::write(ws.path("exp.ini"), wider).unwrap();
    let out = ws.run(&["train", "--warm-start", ckpt.to_str().unwrap()]);
    assert!(stderr_line(&out).starts_with("error[ARCHITECTURE_MISMATCH]:"));
}

#[test]
fn corrupt_checkpoint_names_the_offset() {
    let ws = Workspace::new("");
    ws.ok(&["gen-data"]);
    ws.ok(&["train"]);
    let ckpt = ws.out().join("model.cgck");
    let mut bytes = read(&ckpt);
    bytes[..4].copy_from_slice(b"JUNK");
    std::fs::write(&ckpt, bytes).unwrap();
    let out = ws.run(&["eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let line = stderr_line(&out);
    assert!(line.starts_with("error[FORMAT]:") && line.contains("offset 0"), "{line}");
}

#[test]
fn eval_modes_and_repeatability() {
    let ws = Workspace::new("");
    ws.ok(&["gen-data"]);
    ws.ok(&["train"]);
    let ckpt = ws.out().join("model.cgck");
    let ckpt = ckpt.to_str().unwrap();
    let first = ws.ok(&["eval", "--checkpoint", ckpt, "--mode", "id"]);
    let again = ws.ok(&["eval", "--checkpoint", ckpt, "--mode", "id"]);
    assert_eq!(first, again);
    assert!(first.starts_with("mode         id\n"), "{first}");
    let ood = ws.ok(&["eval", "--checkpoint", ckpt, "--mode", "ood"]);
    assert!(ood.starts_with("mode         ood\n"));
    let csv = String::from_utf8(read(&ws.out().join("model-eval-ood.csv"))).unwrap();
    assert!(csv.starts_with("mode,seed,samples,mse_id_0"));
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn sweep_rejects_a_single_value() {
    let ws = Workspace::new("");
    let out = ws.run(&["sweep", "--param", "alpha", "--values", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_line(&out).starts_with("error[USAGE]:"));
    let out = ws.run(&["sweep", "--param", "beta", "--values", "1,2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_writes_one_row_per_value() {
    let ws = Workspace::new("");
    ws.ok(&["gen-data"]);
    ws.ok(&["sweep", "--param", "alpha", "--values", "0,1,10"]);
    let path = ws.out().join("sweep-alpha.csv");
    let csv = String::from_utf8(read(&path)).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "alpha,recon_error,prop_mse");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("0,") && lines[3].starts_with("10,"));
    let first = read(&path);
    ws.ok(&["sweep", "--param", "alpha", "--values", "0,1,10"]);
    assert_eq!(first, read(&path));
}

#[test]
fn interp_writes_image_and_table() {
    let ws = Workspace::new("");
    ws.ok(&["gen-data"]);
    ws.ok(&["train"]);
    let ckpt = ws.out().join("model.cgck");
    ws.ok(&["interp", "--checkpoint", ckpt.to_str().unwrap(), "--property", "size", "--values", "0.05,0.1,0.15"]);
    let pgm = read(&ws.out().join("interp-size.pgm"));
    assert!(pgm.starts_with(b"P5\n50 16\n255\n"));
    let csv = String::from_utf8(read(&ws.out().join("interp-size.csv"))).unwrap();
    assert_eq!(csv.lines().count(), 4);

    let out = ws.run(&["interp", "--checkpoint", ckpt.to_str().unwrap(), "--values", "0.9"]);
    assert!(stderr_line(&out).starts_with("error[INVALID_ARGUMENT]:"));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let desk = ctrlgen::config::ExperimentConfig::load(&dir.join("desk.ini")).unwrap();
    assert_eq!(desk.training.iterations, 2000);
    assert_eq!(desk.training.weights.beta, 0.002);
    assert_eq!((desk.eval.grid_y, desk.eval.grid_z), (20, 20));
    ctrlgen::config::ExperimentConfig::load(&dir.join("smoke.ini")).unwrap();
}
