use std::path::{Path, PathBuf};
use std::process::Command;

use aapt_core::checkpoint::Checkpoint;
use aapt_core::config::Stage;
use aapt_core::stream::decode_frame_stream;

const MICRO: &str = "\
preset = tiny
data.height = 8
data.width = 8
data.clip_frames = 9
data.train_clips = 4
data.val_clips = 2
codec.steps = 3
codec.channels = 4,4,4
codec.latent_channels = 4
model.dim = 16
model.layers = 1
model.time_embed_dim = 8
stage1.steps = 4
stage1.short_frames = 5
stage1.val_every = 2
stage2.steps = 2
stage2.grid = 4
stage3.rounds = 2
stage3.segment = 2
stage3.extensions = 1
eval.clips = 1
eval.horizon = 2
";

fn aapt(args: &[&str]) -> i32 {
    let argv = std::iter::once("aapt").chain(args.iter().copied());
    aapt_cli::main_with_args(argv)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Chain {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Chain {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("micro.conf");
        std::fs::write(&config, MICRO).unwrap();
        Chain { _dir: dir, root, config }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn stage(&self, cmd: &str, input: Option<&Path>, out: &str) -> i32 {
        let o = self.out(out);
        let mut args = vec![cmd, "--config", s(&self.config), "--out", s(&o)];
        if let Some(p) = input {
            args.extend(["--checkpoint", s(p)]);
        }
        aapt(&args)
    }
}

#[test]
fn full_chain_writes_the_fixed_outputs() {
    let c = Chain::new();
    assert_eq!(c.stage("gen-data", None, "data"), 0);
    assert!(c.out("data/train.manifest").exists());
    assert_eq!(c.stage("train-codec", None, "codec"), 0);
    let codec = c.out("codec/codec.ckpt");
    assert_eq!(Checkpoint::load(&codec).unwrap().stage, Stage::Codec);
    assert_eq!(c.stage("adapt", Some(&codec), "s1"), 0);
    let s1 = c.out("s1/stage1.ckpt");
    assert_eq!(c.stage("distill", Some(&s1), "s2"), 0);
    let s2 = c.out("s2/stage2.ckpt");
    assert_eq!(c.stage("advtrain", Some(&s2), "s3"), 0);
    let s3 = c.out("s3/stage3.ckpt");
    assert_eq!(Checkpoint::load(&s3).unwrap().stage, Stage::Stage3);
    for d in ["codec", "s1", "s2", "s3"] {
        for f in ["config.resolved", "losses.csv", "report.txt"] {
            assert!(c.out(d).join(f).exists(), "{d}/{f}");
        }
    }
    assert!(std::fs::read_to_string(c.out("s3/losses.csv")).unwrap().starts_with("step,g_loss,d_loss"));

    assert_eq!(c.stage("eval", Some(&s3), "eval"), 0);
    let report = std::fs::read_to_string(c.out("eval/report.txt")).unwrap();
    assert!(report.contains("drift_final_mse="), "{report}");
    assert_eq!(c.stage("bench", Some(&s3), "bench"), 0);
    let bench = std::fs::read_to_string(c.out("bench/report.txt")).unwrap();
    assert!(bench.contains("compute_ratio="), "{bench}");
    assert!(bench.contains("steps=40"), "{bench}");

    let gen = |out: &str| {
        let o = c.out(out);
        assert_eq!(aapt(&["generate", "--checkpoint", s(&s3), "--frames", "16", "--seed", "7", "--out", s(&o)]), 0);
        std::fs::read(o.join("frames.bin")).unwrap()
    };
    let (a, b) = (gen("g1"), gen("g2"));
    assert_eq!(a, b);
    let frames = decode_frame_stream(&a).unwrap();
    assert_eq!(frames.len(), 16);
    assert_eq!(frames.iter().map(|f| f.frame_index).collect::<Vec<_>>(), (0..16).collect::<Vec<_>>());
    assert!(std::fs::read_to_string(c.out("g1/config.resolved")).unwrap().contains("seed = 7"));
    for f in ["report.txt", "config.resolved"] {
        assert_eq!(std::fs::read(c.out("g1").join(f)).unwrap(), std::fs::read(c.out("g2").join(f)).unwrap(), "{f}");
    }

    // Wrong provenance is refused with exit 2.
    assert_eq!(c.stage("advtrain", Some(&s1), "bad1"), 2);
    assert_eq!(c.stage("distill", Some(&codec), "bad2"), 2);
    assert_eq!(c.stage("adapt", Some(&s2), "bad3"), 2);
    assert_eq!(c.stage("generate", Some(&s1), "bad4"), 2);
    let o = c.out("bad5");
    assert_eq!(aapt(&["advtrain", "--checkpoint", s(&s2), "--disc-init", s(&s2), "--out", s(&o)]), 2);

    // The environment variable names the input checkpoint.
    let o = c.out("env");
    let st = Command::new(env!("CARGO_BIN_EXE_aapt")).args(["generate", "--frames", "5", "--out", s(&o)]).env("AAPT_CHECKPOINT", &s2).status().unwrap();
    assert_eq!(st.code(), Some(0));
    assert_eq!(decode_frame_stream(&std::fs::read(o.join("frames.bin")).unwrap()).unwrap().len(), 5);
    let st = Command::new(env!("CARGO_BIN_EXE_aapt")).args(["advtrain", "--out", s(&c.out("env2"))]).env("AAPT_CHECKPOINT", &s1).status().unwrap();
    assert_eq!(st.code(), Some(2));
}

#[test]
fn missing_files_exit_1() {
    let c = Chain::new();
    let nope = c.out("nope.ckpt");
    assert_eq!(c.stage("distill", Some(&nope), "x"), 1);
    let o = c.out("y");
    assert_eq!(aapt(&["train-codec", "--config", s(&c.out("missing.conf")), "--out", s(&o)]), 1);
    let st = Command::new(env!("CARGO_BIN_EXE_aapt")).args(["eval", "--out", s(&o)]).env("AAPT_CHECKPOINT", s(&nope)).status().unwrap();
    assert_eq!(st.code(), Some(1));
}

#[test]
fn bad_configs_are_rejected() {
    let c = Chain::new();
    let bad = c.out("bad.conf");
    std::fs::write(&bad, "preset = tiny\nno.such_key = 3\n").unwrap();
    let o = c.out("z");
    assert_eq!(aapt(&["gen-data", "--config", s(&bad), "--out", s(&o)]), 1);
    assert_eq!(aapt(&["gen-data", "--config", s(&c.config), "--set", "data.height=oops", "--out", s(&o)]), 1);
    assert_ne!(aapt(&["no-such-command"]), 0);
}
