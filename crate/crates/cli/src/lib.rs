//! Command-line entry points. Every command writes `config.resolved` into
//! `--out`, plus `losses.csv`, `report.txt` or `frames.bin` as it applies.

use std::fmt::Write as _;
use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use aapt_core::backbone::{grid_to_tokens, Backbone};
use aapt_core::checkpoint::Checkpoint;
use aapt_core::config::{RunConfig, Stage};
use aapt_core::eval::REPORT_HEADER;
use aapt_core::pipeline::{self, checkpoint_for, load_checkpoint, Loaded};
use aapt_core::stream::{bench, measure_cost, FrameOut, GenSession};
use aapt_core::world::{write_manifest, ManifestEntry};
use aapt_core::{AaptError, Result};
use aapt_service::{ModelBundle, Server, ServerConfig};
use clap::{Args, Parser, Subcommand};

pub const CHECKPOINT_ENV: &str = "AAPT_CHECKPOINT";

#[derive(Parser, Debug)]
#[command(name = "aapt", about = "Real-time interactive video generation at desk scale", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Writes the train and validation clip manifests of the synthetic world.
    GenData(Common),
    /// Trains the causal video autoencoder.
    TrainCodec(Common),
    /// Stage 1: diffusion adaptation. Needs a codec checkpoint.
    Adapt(Common),
    /// Stage 2: consistency distillation. Needs a stage1 checkpoint.
    Distill(Common),
    /// Stage 3: adversarial training. Needs a stage2 checkpoint.
    Advtrain(AdvArgs),
    /// Streams one episode to frames.bin. Needs a stage2 or stage3 checkpoint.
    Generate(Common),
    /// Step latency, cache memory and compute ratio of streaming generation.
    Bench(Common),
    /// Drift, Frechet, control and motion metrics on held-out episodes.
    Eval(Common),
    /// Runs the interactive socket service.
    Serve(Common),
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Pixel frames to generate, or steps to bench.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Service port.
    #[arg(long)]
    pub port: Option<u16>,
    /// Input checkpoint.
    #[arg(long, env = CHECKPOINT_ENV)]
    pub checkpoint: Option<PathBuf>,
    /// Extra `key=value` config overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug, Clone)]
pub struct AdvArgs {
    #[command(flatten)]
    pub common: Common,
    /// Stage-1 checkpoint for the discriminator; defaults to the stage-1
    /// weights carried in the stage-2 checkpoint.
    #[arg(long)]
    pub disc_init: Option<PathBuf>,
}

/// Exit status of a failed command: 2 for provenance mismatches, 1 for
/// everything else, including missing files.
pub fn exit_code(e: &AaptError) -> i32 {
    match e {
        AaptError::Provenance { .. } => 2,
        _ => 1,
    }
}

/// Parses `argv` (program name first) and runs the command. Returns the
/// process exit status.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            exit_code(&e)
        }
    }
}

fn describe(e: &AaptError) -> String {
    match e {
        AaptError::Provenance { expected, found } => {
            format!("the input checkpoint comes from stage {found}, but this command needs a {expected} checkpoint; run the preceding stage first")
        }
        AaptError::Io(io) if io.kind() == ErrorKind::NotFound => format!("file not found: {io}"),
        other => other.to_string(),
    }
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(c) => gen_data(&c),
        Command::TrainCodec(c) => train_codec(&c),
        Command::Adapt(c) => adapt(&c),
        Command::Distill(c) => distill(&c),
        Command::Advtrain(a) => advtrain(&a),
        Command::Generate(c) => generate(&c),
        Command::Bench(c) => bench_cmd(&c),
        Command::Eval(c) => eval(&c),
        Command::Serve(c) => serve(&c),
    }
}

fn not_found(what: &str, p: &Path) -> AaptError {
    AaptError::Io(std::io::Error::new(ErrorKind::NotFound, format!("{what} {}", p.display())))
}

fn read_checkpoint(p: &Path) -> Result<Checkpoint> {
    if !p.exists() {
        return Err(not_found("checkpoint", p));
    }
    Checkpoint::load(p)
}

fn input_checkpoint(c: &Common) -> Result<Option<Checkpoint>> {
    c.checkpoint.as_deref().map(read_checkpoint).transpose()
}

fn required_checkpoint(c: &Common) -> Result<Checkpoint> {
    input_checkpoint(c)?.ok_or_else(|| AaptError::Config(format!("this command needs --checkpoint PATH or {CHECKPOINT_ENV}")))
}

/// Config file if given, else the checkpoint's snapshot, else the desk
/// defaults; then `--set` and `--seed`. Architecture keys always follow
/// the checkpoint.
pub fn resolve_config(c: &Common, ck: Option<&Checkpoint>) -> Result<RunConfig> {
    let mut cfg = match (&c.config, ck) {
        (Some(p), _) => {
            if !p.exists() {
                return Err(not_found("config", p));
            }
            RunConfig::load(p)?
        }
        (None, Some(ck)) => ck.run_config()?,
        (None, None) => RunConfig::default(),
    };
    if let (Some(_), Some(ck)) = (&c.config, ck) {
        cfg.adopt_architecture(&ck.run_config()?);
    }
    for kv in &c.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| AaptError::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out(c: &Common, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&c.out)?;
    cfg.write_resolved(&c.out)
}

fn checkpoint_path(out: &Path, stage: Stage) -> PathBuf {
    out.join(format!("{}.ckpt", stage.name()))
}

fn gen_data(c: &Common) -> Result<()> {
    let cfg = resolve_config(c, None)?;
    prepare_out(c, &cfg)?;
    let corpus = pipeline::build_corpus(&cfg)?;
    let entry = |s: u64| ManifestEntry { seed: s, frames: cfg.clip_frames, profile: cfg.profile.clone() };
    write_manifest(c.out.join("train.manifest"), &pipeline::train_seeds(&cfg).into_iter().map(entry).collect::<Vec<_>>())?;
    write_manifest(c.out.join("val.manifest"), &pipeline::val_seeds(&cfg).into_iter().map(entry).collect::<Vec<_>>())?;
    let mut r = String::new();
    writeln!(r, "train_clips={}", corpus.train.len()).unwrap();
    writeln!(r, "val_clips={}", corpus.val.len()).unwrap();
    writeln!(r, "clip_frames={}", cfg.clip_frames).unwrap();
    writeln!(r, "frame_size={}x{}", cfg.height, cfg.width).unwrap();
    writeln!(r, "control_std={:?}", corpus.stats.std).unwrap();
    fs::write(c.out.join("report.txt"), r)?;
    println!("wrote {} train and {} val clip manifests to {}", corpus.train.len(), corpus.val.len(), c.out.display());
    Ok(())
}

fn train_codec(c: &Common) -> Result<()> {
    let cfg = resolve_config(c, None)?;
    prepare_out(c, &cfg)?;
    let corpus = pipeline::build_corpus(&cfg)?;
    let (codec, log) = pipeline::codec_stage(&cfg, &corpus)?;
    fs::write(c.out.join("losses.csv"), pipeline::losses_csv(&log.losses))?;
    let r = format!("initial_recon={:.6}\nfinal_recon={:.6}\nvalidation_psnr_db={:.3}\n", log.initial_recon, log.final_recon, log.validation_psnr);
    fs::write(c.out.join("report.txt"), &r)?;
    let path = checkpoint_path(&c.out, Stage::Codec);
    checkpoint_for(Stage::Codec, &cfg, &codec, &corpus.stats, None, None, None).save(&path)?;
    print!("{r}");
    println!("wrote {}", path.display());
    Ok(())
}

/// Checkpoint and config of a stage whose input must come from `need`.
fn stage_input(c: &Common, need: Stage) -> Result<(Loaded, RunConfig)> {
    let ck = required_checkpoint(c)?;
    ck.require(need)?;
    let cfg = resolve_config(c, Some(&ck))?;
    Ok((load_checkpoint(&ck)?, cfg))
}

fn adapt(c: &Common) -> Result<()> {
    let (l, cfg) = stage_input(c, Stage::Codec)?;
    prepare_out(c, &cfg)?;
    let corpus = pipeline::build_corpus(&cfg)?;
    let data = pipeline::encode_corpus(&l.codec, &corpus, &cfg)?;
    let (model, log) = pipeline::adapt(&cfg, &data, cfg.s1_recycle)?;
    fs::write(c.out.join("losses.csv"), pipeline::losses_csv(&log.losses))?;
    let mut r = String::from("# step,validation_velocity_mse\n");
    for (s, v) in &log.validation {
        writeln!(r, "validation.{s}={v:.6}").unwrap();
    }
    writeln!(r, "dropped_clips={}", data.dropped).unwrap();
    fs::write(c.out.join("report.txt"), &r)?;
    let path = checkpoint_path(&c.out, Stage::Stage1);
    checkpoint_for(Stage::Stage1, &cfg, &l.codec, &l.stats, Some(&model), Some(&model), None).save(&path)?;
    println!("final validation velocity MSE {:.4}; wrote {}", log.final_validation().unwrap_or(f32::NAN), path.display());
    Ok(())
}

fn distill(c: &Common) -> Result<()> {
    let (l, cfg) = stage_input(c, Stage::Stage1)?;
    prepare_out(c, &cfg)?;
    let teacher = l.stage1.or(l.gen).ok_or_else(|| AaptError::Format("stage1 checkpoint has no model".into()))?;
    let corpus = pipeline::build_corpus(&cfg)?;
    let data = pipeline::encode_corpus(&l.codec, &corpus, &cfg)?;
    let (student, log) = pipeline::distill(&cfg, &teacher, &data, cfg.s1_recycle)?;
    fs::write(c.out.join("losses.csv"), pipeline::losses_csv(&log.losses))?;
    let mut r = String::new();
    if let Some(g) = &log.gap {
        writeln!(r, "student_one_step_gap={:.6}\nteacher_one_step_gap={:.6}", g.student_one_step, g.teacher_one_step).unwrap();
    }
    fs::write(c.out.join("report.txt"), &r)?;
    let path = checkpoint_path(&c.out, Stage::Stage2);
    checkpoint_for(Stage::Stage2, &cfg, &l.codec, &l.stats, Some(&student), Some(&teacher), None).save(&path)?;
    print!("{r}");
    println!("wrote {}", path.display());
    Ok(())
}

fn advtrain(a: &AdvArgs) -> Result<()> {
    let c = &a.common;
    let (l, cfg) = stage_input(c, Stage::Stage2)?;
    let disc_init = match &a.disc_init {
        Some(p) => {
            let ck = read_checkpoint(p)?;
            ck.require(Stage::Stage1)?;
            load_checkpoint(&ck)?.stage1.ok_or_else(|| AaptError::Format("stage1 checkpoint has no model".into()))?
        }
        None => l.stage1.clone().ok_or_else(|| AaptError::Format("stage2 checkpoint carries no stage1 weights; pass --disc-init".into()))?,
    };
    let gen_init = l.gen.ok_or_else(|| AaptError::Format("stage2 checkpoint has no generator".into()))?;
    prepare_out(c, &cfg)?;
    let corpus = pipeline::build_corpus(&cfg)?;
    let data = pipeline::encode_corpus(&l.codec, &corpus, &cfg)?;
    let (gen, disc, log) = pipeline::advtrain(&cfg, &gen_init, &disc_init, &data, &l.stats, cfg.s3_recycle)?;
    fs::write(c.out.join("losses.csv"), log.to_csv())?;
    let mut r = format!("rounds={}\nall_finite={}\nmode={}\n", log.records.len(), log.all_finite(), cfg.s3_mode.name());
    if let Some(last) = log.records.last() {
        writeln!(r, "final_g_loss={:.6}\nfinal_d_loss={:.6}", last.g_loss, last.d_loss).unwrap();
    }
    fs::write(c.out.join("report.txt"), &r)?;
    let path = checkpoint_path(&c.out, Stage::Stage3);
    checkpoint_for(Stage::Stage3, &cfg, &l.codec, &l.stats, Some(&gen), Some(&disc_init), Some(&disc)).save(&path)?;
    print!("{r}");
    println!("wrote {}", path.display());
    Ok(())
}

/// Generator weights of a stage2 or stage3 checkpoint.
fn generator_input(c: &Common) -> Result<(Loaded, Arc<Backbone>, RunConfig)> {
    let ck = required_checkpoint(c)?;
    if !matches!(ck.stage, Stage::Stage2 | Stage::Stage3) {
        return Err(AaptError::Provenance { expected: "stage2 or stage3".into(), found: ck.stage.name().into() });
    }
    let cfg = resolve_config(c, Some(&ck))?;
    let mut l = load_checkpoint(&ck)?;
    let gen = l.gen.take().ok_or_else(|| AaptError::Format("checkpoint has no generator".into()))?;
    Ok((l, Arc::new(gen), cfg))
}

fn generate(c: &Common) -> Result<()> {
    let (l, gen, cfg) = generator_input(c)?;
    prepare_out(c, &cfg)?;
    let frames = c.frames.unwrap_or(1 + cfg.eval_horizon * l.codec.cfg.temporal_factor);
    let ep = pipeline::control_episode(&cfg, &l.stats, cfg.seed, frames)?;
    let out = pipeline::generate_episode(&gen, &l.codec, &ep, cfg.seed, false)?;
    let mut bin = Vec::new();
    for t in 0..frames {
        bin.extend_from_slice(&FrameOut::from_video(&out.video, t, t as u32)?.encode());
    }
    fs::write(c.out.join("frames.bin"), bin)?;
    // Timings stay out of the report so reruns produce identical files.
    let r = format!("frames={frames}\nlatent_frames={}\nnfe={}\nseed={}\n", out.latents.len() - 1, out.nfe, cfg.seed);
    fs::write(c.out.join("report.txt"), &r)?;
    println!("wrote {frames} frames to {}", c.out.join("frames.bin").display());
    Ok(())
}

fn bench_cmd(c: &Common) -> Result<()> {
    let ck = input_checkpoint(c)?;
    let cfg = resolve_config(c, ck.as_ref())?;
    let (model, codec, source) = match &ck {
        Some(ck) => {
            let l = load_checkpoint(ck)?;
            let gen = l.gen.ok_or_else(|| AaptError::Format("checkpoint has no generator".into()))?;
            (gen, l.codec, ck.stage.name().to_string())
        }
        None => {
            let b = ModelBundle::untrained(&cfg, cfg.seed)?;
            ((*b.gen).clone(), (*b.codec).clone(), "untrained".to_string())
        }
    };
    prepare_out(c, &cfg)?;
    let n = model.cfg.window_n;
    let steps = c.frames.unwrap_or(0).max(10 * n);
    let model = Arc::new(model);
    let ep = pipeline::control_episode(&cfg, &aapt_core::world::ScaleStats::default(), cfg.seed, 1 + steps * codec.cfg.temporal_factor)?;
    let z0 = grid_to_tokens(&codec.encode(&ep.truth.slice(0, 1))?.index0(0));
    let mut session = GenSession::open(model.clone(), &z0, ep.trajectory.initial.prompt_id(), cfg.seed)?;
    let report = bench(&mut session, steps, 3)?;
    let cost = measure_cost(&model, &z0, &ep.controls[..(2 * n + 2).min(ep.controls.len())], cfg.seed)?;
    let mut r = format!("weights={source}\n");
    r.push_str(&report.to_kv());
    writeln!(r, "recycle_macs_per_step={:.0}", cost.recycle_macs).unwrap();
    writeln!(r, "diffusion_forcing_macs_per_step={:.0}", cost.diffusion_forcing_macs).unwrap();
    writeln!(r, "compute_ratio={:.4}", cost.ratio()).unwrap();
    fs::write(c.out.join("report.txt"), &r)?;
    print!("{r}");
    Ok(())
}

fn eval(c: &Common) -> Result<()> {
    let (l, gen, cfg) = generator_input(c)?;
    prepare_out(c, &cfg)?;
    let horizon = c.frames.map(|f| (f.max(2) - 1).div_ceil(l.codec.cfg.temporal_factor)).unwrap_or(cfg.eval_horizon);
    let episodes = pipeline::eval_episodes(&cfg, &l.stats, horizon)?;
    let report = pipeline::evaluate("", &gen, &l.codec, &episodes, cfg.seed, false)?;
    let r = format!("{REPORT_HEADER}{}", report.to_kv());
    fs::write(c.out.join("report.txt"), &r)?;
    fs::write(c.out.join("drift.csv"), report.drift.to_csv())?;
    print!("{r}");
    Ok(())
}

fn serve(c: &Common) -> Result<()> {
    let ck = required_checkpoint(c)?;
    let bundle = ModelBundle::from_checkpoint(&ck)?;
    let cfg = resolve_config(c, Some(&ck))?;
    prepare_out(c, &cfg)?;
    let sc = ServerConfig { host: "127.0.0.1".into(), port: c.port.unwrap_or(cfg.serve_port as u16), fps: cfg.serve_fps };
    let server = Server::bind(bundle, &sc)?;
    println!("listening on ws://{} at {} latent frames/s", server.local_addr()?, sc.fps);
    server.serve_forever()
}
