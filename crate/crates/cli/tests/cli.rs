use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ssldetect"));
    c.arg("--quiet");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Workspace {
    dir: TempDir,
    config: PathBuf,
}

impl Workspace {
    /// Tiny data set and model so that every command finishes in seconds.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().display().to_string();
        let text = format!(
            r#"
[synth]
n_unlabeled = 8
n_train = 8
n_val = 4
image_size = 64
unlabeled_size = 32

[model.backbone]
stem_channels = 4
stage_channels = [8, 8, 16, 16]
blocks_per_stage = [1, 1, 1, 1]

[model.projection]
out_dim = 8

[model.head]
neck_channels = 8

[pretrain]
epochs = 2
batch_size = 4
dataset = "{d}/data/unlabeled"
checkpoint = "pre.ckpt"
log_wall_clock = false

[pretrain.augment]
output_size = 32

[finetune]
epochs = 2
batch_size = 4
image_size = 64
warmup_epochs = 1
train = "{d}/data/train"
val = "{d}/data/val"
checkpoint = "{d}/pre/pre.ckpt"
log_wall_clock = false
"#
        );
        let config = dir.path().join("run.toml");
        std::fs::write(&config, text).unwrap();
        Self { dir, config }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn cmd(&self, args: &[&str], out: &str) -> Output {
        let out = self.path(out);
        let mut c = bin();
        c.arg("--config").arg(&self.config).arg("--out").arg(&out).args(args);
        c.output().unwrap()
    }

    fn synth(&self) {
        let o = self.cmd(&["synth"], "data");
        assert!(o.status.success(), "{}", stderr(&o));
    }
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn full_pipeline_is_deterministic() {
    let ws = Workspace::new();
    ws.synth();
    for out in ["pre", "pre2"] {
        let o = ws.cmd(&["pretrain"], out);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("pretrain done"));
    }
    assert_eq!(read(&ws.path("pre/pre.ckpt")), read(&ws.path("pre2/pre.ckpt")));
    assert_eq!(read(&ws.path("pre/pretrain_metrics.csv")), read(&ws.path("pre2/pretrain_metrics.csv")));

    for (out, init) in [("ssl", "ssl"), ("ssl2", "ssl"), ("scratch", "scratch")] {
        let o = ws.cmd(&["--override", &format!("init={init}"), "finetune"], out);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(read(&ws.path("ssl/metrics.csv")), read(&ws.path("ssl2/metrics.csv")));
    assert_eq!(read(&ws.path("ssl/detector.ckpt")), read(&ws.path("ssl2/detector.ckpt")));
    assert_ne!(read(&ws.path("ssl/metrics.csv")), read(&ws.path("scratch/metrics.csv")));
    let echo = String::from_utf8(read(&ws.path("ssl/config.toml"))).unwrap();
    assert!(echo.contains("init = \"ssl\""));

    let a = ws.path("scratch/metrics.csv");
    let b = ws.path("ssl/metrics.csv");
    let o = run(&["compare", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    for col in ["Model", "Init", "Precision", "Recall", "mAP@0.5", "mAP@0.5:0.95", "Time(s)"] {
        assert!(table.contains(col), "{table}");
    }
    assert!(table.contains("scratch") && table.contains("ssl"));

    let ckpt = ws.path("ssl/detector.ckpt");
    let o = ws.cmd(&["eval", "--checkpoint", ckpt.to_str().unwrap()], "eval");
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("4 images"));
    let curve = String::from_utf8(read(&ws.path("eval/pr_curve.csv"))).unwrap();
    let recall: Vec<f64> = curve.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert!(recall.windows(2).all(|w| w[1] >= w[0]));
}

#[test]
fn comparing_a_run_with_itself_gives_zero_deltas() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("metrics.csv");
    std::fs::write(
        &csv,
        "epoch,lr,train_box,train_cls,train_dfl,val_box,val_cls,val_dfl,precision,recall,map50,map50_95,seconds\n\
         1,0.001,1.0,2.0,0.5,1.1,2.1,0.6,0.4,0.3,0.2,0.1,5.0\n\
         2,0.001,0.9,1.8,0.4,1.0,2.0,0.5,0.5,0.4,0.3,0.15,10.0\n",
    )
    .unwrap();
    let p = csv.to_str().unwrap();
    let o = run(&["compare", p, p]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    let deltas: Vec<&str> = table.split_whitespace().filter(|t| t.starts_with('+') || t.starts_with('-') && t.len() > 1).collect();
    assert!(!deltas.is_empty(), "{table}");
    assert!(deltas.iter().all(|d| d.trim_start_matches(['+', '-']).parse::<f64>().map_or(true, |v| v == 0.0)), "{table}");
}

#[test]
fn perfect_prediction_files_score_one() {
    let ws = Workspace::new();
    ws.synth();
    let preds = ws.path("preds");
    std::fs::create_dir_all(&preds).unwrap();
    for entry in std::fs::read_dir(ws.path("data/val/labels")).unwrap() {
        let p = entry.unwrap().path();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: String = text.lines().map(|l| format!("{l} 0.9\n")).collect();
        std::fs::write(preds.join(p.file_name().unwrap()), lines).unwrap();
    }
    let data = ws.path("data/val");
    let o = ws.cmd(&["eval", "--predictions", preds.to_str().unwrap(), "--data", data.to_str().unwrap()], "eval");
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("mAP@0.5 1.0000 mAP@0.5:0.95 1.0000"), "{}", stdout(&o));
}

#[test]
fn exit_codes() {
    let ws = Workspace::new();
    let o = ws.cmd(&["--override", "init=ssl", "--override", "checkpoint=/nonexistent/x.ckpt", "finetune"], "ft");
    assert_eq!(o.status.code(), Some(1));

    let o = ws.cmd(&["--override", "bogus=1", "pretrain"], "p");
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("pretrain.bogus"), "{}", stderr(&o));

    let o = ws.cmd(&["--override", "pretrain.temperature=0", "pretrain"], "p");
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("pretrain.temperature"));

    let o = run(&["--config", "/nonexistent/config.toml", "synth"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/nonexistent/config.toml"));

    let o = run(&["gradcheck", "--trials", "2", "--skip-detector", "--inject-sign-error", "silu"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("silu"));

    let o = run(&["gradcheck", "--trials", "2", "--skip-detector"]);
    assert!(o.status.success(), "{}", stdout(&o));

    ws.synth();
    let o = ws.cmd(&["--override", "pretrain.lr_max=1e30", "--override", "pretrain.epochs=3", "pretrain"], "boom");
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn seed_flag_changes_every_section() {
    let ws = Workspace::new();
    let o = ws.cmd(&["--seed", "9", "synth"], "data9");
    assert!(o.status.success());
    assert!(stdout(&o).contains("seed 9"));
    let a = read(&ws.path("data9/train/images/train_00000.ppm"));
    ws.synth();
    assert_ne!(a, read(&ws.path("data/train/images/train_00000.ppm")));
}
