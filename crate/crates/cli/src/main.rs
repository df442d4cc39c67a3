use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use framesonic::bench::{measure, SessionRunner};
use framesonic::checkpoint::{encode_training, load_model, read_meta, Checkpoint};
use framesonic::codec::write_waveform;
use framesonic::config::RunConfig;
use framesonic::dataset::{DatasetManifest, Split};
use framesonic::eval::{clip_features, eval_clips, generate_raw, lag_of, oracle_nll, EvalClip};
use framesonic::metrics::{frechet_gaussian, mmd_permutation_test, MetricReport};
use framesonic::pipeline;
use framesonic::rope::RopeMode;
use framesonic::sampler::{generate, SamplerMode};
use framesonic::train::TrainState;
use framesonic::vision::render;
use framesonic::{Error, Mat, Model32, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "framesonic", version, about = "Frame-level online video-to-audio generation on a toy process")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a seed-regenerable dataset manifest.
    GenData {
        #[arg(long)]
        clips: usize,
        #[arg(long)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.1)]
        test_fraction: f64,
        /// Scene family and toy process; defaults to the built-in config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Diffusion pretraining of backbone and head.
    TrainStage1(TrainArgs),
    /// Consistency tuning from a Stage-1 checkpoint.
    TrainStage2 {
        #[command(flatten)]
        train: TrainArgs,
        /// Stage-1 checkpoint to start from (ignored when resuming).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Generate audio for one clip of a manifest.
    Sample {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        clip: usize,
        #[command(flatten)]
        sampling: SamplingArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metric battery on a manifest split.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Comma-separated subset of mmd,frechet,nll,lag.
        #[arg(long, default_value = "mmd,frechet,nll,lag")]
        metrics: String,
        #[command(flatten)]
        sampling: SamplingArgs,
        #[arg(long, default_value_t = 200)]
        permutations: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-frame latency with warm-up and first-frame exclusion.
    BenchLatency {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        clips: usize,
        #[command(flatten)]
        sampling: SamplingArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write per-frame latencies as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint of an interrupted run of the same stage.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Output directory for checkpoints and the loss log.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the configuration stored in the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SamplingArgs {
    /// diffusion or ect.
    #[arg(long)]
    mode: Option<String>,
    /// Head evaluations per token: 59 (Heun, 30 steps) or 1, 2, 4 (ECT).
    #[arg(long)]
    nfe: Option<usize>,
    #[arg(long)]
    omega: Option<f64>,
    /// none, pi or ntk.
    #[arg(long)]
    rope: Option<String>,
    /// Frames the positional extension targets.
    #[arg(long)]
    n_target: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl SamplingArgs {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(m) = &self.mode {
            cfg.sampler = m.clone();
        }
        if let Some(n) = self.nfe {
            match cfg.sampler.as_str() {
                "diffusion" => {
                    if n % 2 == 0 {
                        return Err(Error::Config(format!("Heun sampling has odd NFE, got {n}")));
                    }
                    cfg.heun_steps = n.div_ceil(2);
                }
                _ => {
                    let SamplerMode::Ect { schedule } = SamplerMode::ect_with_nfe(n)? else {
                        unreachable!("ect_with_nfe builds consistency modes")
                    };
                    cfg.cm_schedule = schedule;
                }
            }
        }
        if let Some(w) = self.omega {
            cfg.omega = w;
        }
        if let Some(r) = &self.rope {
            cfg.rope_mode = r.parse::<RopeMode>()?;
        }
        if let Some(n) = self.n_target {
            cfg.n_target = n;
        }
        if let Some(s) = self.seed {
            cfg.sample_seed = s;
        }
        cfg.validate()
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// Configuration for a checkpoint: the explicit file if given (which must
/// describe the same architecture), else the one stored inside.
fn model_config(args: &ModelArgs) -> Result<RunConfig> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let meta = read_meta(&ck)?;
    match &args.config {
        Some(p) => RunConfig::load(p),
        None => RunConfig::parse(&meta.config_text),
    }
}

fn load(args: &ModelArgs, cfg: &RunConfig) -> Result<Model32> {
    Ok(load_model::<f32>(&args.checkpoint, &cfg.model(), &cfg.model_hash())?.0)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::Data(format!("cannot create {}: {e}", p.display())))
}

fn train_cmd(args: &TrainArgs, stage: u8, init: Option<&Path>) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    create_dir(&args.out)?;
    let meta = pipeline::meta(&cfg);
    let (arch, mut state, pre) = if let Some(r) = &args.resume {
        let ck = Checkpoint::load(r)?;
        let (arch, state, pre) = framesonic::checkpoint::decode_training::<f32>(&ck, &cfg.model(), &meta.model_hash)?;
        if state.stage != stage {
            return Err(Error::Config(format!("resume checkpoint is from stage {}", state.stage)));
        }
        (arch, state, pre)
    } else if stage == 1 {
        let pre = pipeline::preprocess(&cfg)?;
        let (arch, state) = pipeline::init_state::<f32>(&cfg, &pre)?;
        (arch, state, pre)
    } else {
        let path = init.ok_or_else(|| Error::Config("stage 2 needs --init with a Stage-1 checkpoint".into()))?;
        let ck = Checkpoint::load(path)?;
        let (arch, s1, pre) = framesonic::checkpoint::decode_training::<f32>(&ck, &cfg.model(), &meta.model_hash)?;
        (arch, pipeline::begin_stage2(&cfg, &s1)?, pre)
    };
    let ckpt = args.out.join(format!("stage{stage}.ckpt"));
    let log_path = args.out.join(format!("stage{stage}_log.jsonl"));
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", log_path.display())))?;
    let save = |s: &TrainState<f32>| encode_training(s, &pre, &meta)?.save(&ckpt);
    let every = cfg.checkpoint_every.max(1);
    pipeline::run_stage(&cfg, &arch, &mut state, &pre, |rec, s| {
        use std::io::Write;
        writeln!(log, "{}", serde_json::to_string(rec)?)?;
        if s.iter % every == 0 {
            save(s)?;
        }
        Ok(())
    })?;
    save(&state)?;
    eprintln!("stage {stage}: {} iterations, checkpoint {}", state.iter, ckpt.display());
    Ok(())
}

#[derive(Serialize)]
struct SampleManifestRow {
    config_hash: String,
    clip: usize,
    frame: usize,
    nfe: usize,
}

fn sample_cmd(model_args: &ModelArgs, data: &Path, clip: usize, sampling: &SamplingArgs, out: &Path) -> Result<()> {
    let mut cfg = model_config(model_args)?;
    sampling.apply(&mut cfg)?;
    let model = load(model_args, &cfg)?;
    let manifest = DatasetManifest::load(data)?;
    let rec = manifest
        .clips
        .iter()
        .find(|c| c.id == clip)
        .ok_or_else(|| Error::Data(format!("clip {clip} is not in {}", data.display())))?;
    let rendered = render(&rec.spec, &cfg.toy())?;
    let scfg = cfg.sampler_config()?;
    let gen = generate(&model, &rendered.frames, &scfg)?;
    create_dir(out)?;
    let hash = cfg.hash();
    let rows: Vec<Vec<f32>> = (0..gen.latents.rows()).map(|i| gen.latents.row(i).to_vec()).collect();
    std::fs::write(
        out.join("latents.json"),
        serde_json::to_string(&serde_json::json!({ "config_hash": hash, "latents": rows }))?,
    )?;
    write_waveform(&out.join("audio.frwav"), &gen.waveform)?;
    let manifest_rows: Vec<SampleManifestRow> = gen
        .records
        .iter()
        .map(|r| SampleManifestRow {
            config_hash: hash.clone(),
            clip,
            frame: r.frame,
            nfe: r.nfe,
        })
        .collect();
    write_jsonl(&out.join("manifest.jsonl"), &manifest_rows)?;
    eprintln!("sampled {} frames at NFE {} into {}", gen.latents.rows(), scfg.nfe(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval_cmd(
    model_args: &ModelArgs,
    data: &Path,
    split: &str,
    metrics: &str,
    sampling: &SamplingArgs,
    permutations: usize,
    out: Option<&Path>,
) -> Result<()> {
    let mut cfg = model_config(model_args)?;
    sampling.apply(&mut cfg)?;
    let model = load(model_args, &cfg)?;
    let split_tag = match split {
        "train" => Split::Train,
        "test" => Split::Test,
        o => return Err(Error::Config(format!("unknown split {o:?}"))),
    };
    let wanted: Vec<&str> = metrics.split(',').map(str::trim).collect();
    for m in &wanted {
        if !["mmd", "frechet", "nll", "lag"].contains(m) {
            return Err(Error::Config(format!("unknown metric {m:?}")));
        }
    }
    let manifest = DatasetManifest::load(data)?;
    let specs: Vec<_> = manifest.split(split_tag).map(|c| c.spec.clone()).collect();
    if specs.len() < 2 {
        return Err(Error::Data(format!("split {split} has fewer than two clips")));
    }
    let toy = cfg.toy();
    let pre = framesonic::checkpoint::Preprocess {
        stats: model.stats.clone(),
        pca: model.pca.clone(),
    };
    let clips: Vec<EvalClip> = eval_clips(&specs, &toy, &pre, cfg.patch)?;
    let scfg = cfg.sampler_config()?;
    let generated = generate_raw(&model, &clips, &scfg, 64)?;
    let reference: Vec<Mat<f64>> = clips.iter().map(|c| c.rendered.latents.clone()).collect();
    let gf = clip_features(&generated, &model)?;
    let rf = clip_features(&reference, &model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sample_seed);
    let (mmd2, p) = if wanted.contains(&"mmd") {
        let t = mmd_permutation_test(&gf, &rf, permutations, &mut rng)?;
        (t.mmd2, t.p_value)
    } else {
        (f64::NAN, f64::NAN)
    };
    let report = MetricReport {
        config_hash: cfg.hash(),
        split: split.into(),
        mode: format!("{:?}", scfg.mode),
        clips: clips.len(),
        mmd2,
        mmd_p_value: p,
        frechet: if wanted.contains(&"frechet") { frechet_gaussian(&gf, &rf)? } else { f64::NAN },
        oracle_nll: if wanted.contains(&"nll") { oracle_nll(&generated, &clips, &toy) } else { f64::NAN },
        event_lag: if wanted.contains(&"lag") { lag_of(&generated, &clips, &toy, 4)? } else { 0 },
        period_error: None,
    };
    let line = serde_json::to_string(&report)?;
    println!("{line}");
    if let Some(o) = out {
        std::fs::write(o, line + "\n")?;
    }
    Ok(())
}

fn bench_cmd(model_args: &ModelArgs, clips: usize, sampling: &SamplingArgs, out: Option<&Path>, csv: Option<&Path>) -> Result<()> {
    if clips < framesonic::bench::WARMUP_CLIPS + 1 {
        return Err(Error::Config(format!("bench-latency needs at least 4 clips, got {clips}")));
    }
    let mut cfg = model_config(model_args)?;
    sampling.apply(&mut cfg)?;
    let model = load(model_args, &cfg)?;
    let family = cfg.family();
    let toy = cfg.toy();
    let frames = (0..clips)
        .map(|k| render(&family.sample(0xBE7C ^ k as u64, cfg.clip_frames), &toy).map(|r| r.frames))
        .collect::<Result<Vec<_>>>()?;
    let scfg = cfg.sampler_config()?;
    let nfe = scfg.nfe();
    let mut runner = SessionRunner {
        model: &model,
        cfg: scfg,
        clips: frames,
    };
    let report = measure(&mut runner, nfe, &cfg.hash())?;
    let line = serde_json::to_string(&report)?;
    println!("{line}");
    if let Some(o) = out {
        std::fs::write(o, line + "\n")?;
    }
    if let Some(c) = csv {
        std::fs::write(c, report.to_csv())?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData {
            clips,
            frames,
            seed,
            test_fraction,
            config,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let m = DatasetManifest::generate(&cfg.family(), &cfg.toy(), clips, frames, seed, test_fraction)?;
            m.save(&out)?;
            println!("{}", m.hash()?);
            Ok(())
        }
        Cmd::TrainStage1(a) => train_cmd(&a, 1, None),
        Cmd::TrainStage2 { train, init } => train_cmd(&train, 2, init.as_deref()),
        Cmd::Sample {
            model,
            data,
            clip,
            sampling,
            out,
        } => sample_cmd(&model, &data, clip, &sampling, &out),
        Cmd::Eval {
            model,
            data,
            split,
            metrics,
            sampling,
            permutations,
            out,
        } => eval_cmd(&model, &data, &split, &metrics, &sampling, permutations, out.as_deref()),
        Cmd::BenchLatency {
            model,
            clips,
            sampling,
            out,
            csv,
        } => bench_cmd(&model, clips, &sampling, out.as_deref(), csv.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
