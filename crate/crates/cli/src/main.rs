mod config;
mod export;

use std::fs;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use asg_core::denoiser::wire::{self, ServerRequest};
use asg_core::engine::{benchmark, initial_latent, run_pipeline, ExecutorMode, Pipeline};
use asg_core::guidance::MaskMode;
use asg_core::selftest::{run_selftest, SelftestOptions};
use asg_core::{Shape, Tensor};
use clap::{Args, Parser, Subcommand};
use log::info;

use config::{parse_mask, parse_predictor, CliConfig, OutputFormat};

#[derive(Parser)]
#[command(
    name = "asg",
    version,
    about = "Patch-parallel diffusion sampling with asynchronous structure guidance"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the two-stage pipeline and write the latent, a preview and a report.
    Generate {
        #[command(flatten)]
        run: RunArgs,
        /// Also write the stage-1 patches with a manifest to OUT/patches.
        #[arg(long)]
        dump_patches: bool,
    },
    /// Time the configured executor modes against each other.
    Benchmark {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Structure guidance x attention mask x sync/async grid.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run the built-in invariant checks.
    Selftest {
        #[arg(long, hide = true)]
        corrupt_schedule: bool,
    },
    /// Print the noise schedule as CSV.
    Schedule {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Answer predict requests on stdin/stdout by echoing the latent back.
    #[command(hide = true)]
    Serve {
        #[arg(long)]
        echo: bool,
    },
    /// Print the effective configuration in canonical form.
    Config {
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// JSON config file with dotted keys.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// sequential, sync or async.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
    /// Injected latency per predictor call.
    #[arg(long = "delay-ms", value_name = "X")]
    delay_ms: Option<f64>,
    /// gaussian, gmm, constant, remote:ADDR or remote:stdio:CMD.
    #[arg(long)]
    predictor: Option<String>,
    /// Structure guidance scale.
    #[arg(long, value_name = "X")]
    w: Option<f32>,
    /// Fraction of steps spent in stage 1.
    #[arg(long, value_name = "X")]
    ratio: Option<f64>,
    /// off, one, attention or file:PATH.
    #[arg(long)]
    mask: Option<String>,
}

impl RunArgs {
    fn resolve(&self) -> Result<CliConfig> {
        let mut cfg = match &self.config {
            Some(path) => CliConfig::load(path)?,
            None => CliConfig::default(),
        };
        let p = &mut cfg.pipeline;
        if let Some(seed) = self.seed {
            p.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(mode) = &self.mode {
            p.executor = mode.parse().context("--mode")?;
        }
        if let Some(n) = self.workers {
            p.workers = n;
        }
        if let Some(d) = self.delay_ms {
            p.injected_delay_ms = d;
        }
        if let Some(name) = &self.predictor {
            p.predictor.kind = parse_predictor(name).map_err(|m| anyhow::anyhow!("--predictor: {m}"))?;
        }
        if let Some(w) = self.w {
            p.guidance.w = w;
        }
        if let Some(r) = self.ratio {
            p.ratio = r;
        }
        if let Some(m) = &self.mask {
            p.guidance.mask = parse_mask(m).map_err(|m| anyhow::anyhow!("--mask: {m}"))?;
        }
        p.validate().context("invalid configuration")?;
        Ok(cfg)
    }
}

fn init_logging(default_level: &str) {
    let env = env_logger::Env::new().filter_or("ASG_LOG", default_level);
    let _ = env_logger::Builder::from_env(env).format_timestamp_millis().try_init();
}

fn prepare_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
    let probe = dir.join(".asg-write-probe");
    fs::write(&probe, b"").with_context(|| format!("output directory {} is not writable", dir.display()))?;
    let _ = fs::remove_file(probe);
    Ok(())
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display()))
}

fn cmd_generate(run: &RunArgs, dump_patches: bool) -> Result<()> {
    let cfg = run.resolve()?;
    init_logging(&cfg.log_level);
    prepare_out_dir(&cfg.out_dir)?;
    let pipeline = Pipeline::new(&cfg.pipeline).context("pipeline setup")?;
    let (latent, report) = pipeline.run().context("pipeline run")?;
    info!("run finished in {:.1} ms, checksum {}", report.wall_ms, report.checksum);

    let out = &cfg.out_dir;
    for fmt in &cfg.formats {
        match fmt {
            OutputFormat::Asgt => write_file(&out.join("latent.asgt"), latent.to_asgt_bytes())?,
            OutputFormat::Ppm => {
                let (bytes, ext) = export::netpbm(&latent);
                write_file(&out.join(format!("latent.{ext}")), bytes)?;
            }
        }
    }
    write_file(
        &out.join("report.json"),
        report.to_json().context("serializing report")?,
    )?;
    write_file(&out.join("timings.csv"), report.timings_csv())?;
    if dump_patches {
        let (patches, _) = pipeline
            .run_stage1(&initial_latent(&cfg.pipeline)?)
            .context("stage 1 for patch dump")?;
        let dir = out.join("patches");
        patches
            .dump(&dir)
            .with_context(|| format!("cannot dump patches to {}", dir.display()))?;
    }
    println!("{}", report.checksum);
    Ok(())
}

fn cmd_benchmark(run: &RunArgs) -> Result<()> {
    let cfg = run.resolve()?;
    init_logging(&cfg.log_level);
    prepare_out_dir(&cfg.out_dir)?;
    let report = benchmark(&cfg.pipeline, &cfg.benchmark_modes).context("benchmark")?;
    print!("{}", report.table());
    write_file(&cfg.out_dir.join("benchmark.csv"), report.csv())?;
    Ok(())
}

fn cmd_ablate(run: &RunArgs) -> Result<()> {
    let cfg = run.resolve()?;
    init_logging(&cfg.log_level);
    prepare_out_dir(&cfg.out_dir)?;
    let base = &cfg.pipeline;
    let sg_scale = if base.guidance.w > 0.0 { base.guidance.w } else { 2.0 };
    let cam_mask = match &base.guidance.mask {
        MaskMode::Off | MaskMode::Constant => MaskMode::Attention,
        other => other.clone(),
    };
    let mut csv = String::from("sg,cam,mode,w,structure_disagreement,final_disagreement,seam_discontinuity\n");
    for sg in [true, false] {
        for cam in [true, false] {
            for mode in [ExecutorMode::ParallelSync, ExecutorMode::ParallelAsync] {
                let mut p = base.clone();
                p.executor = mode;
                p.guidance.w = if sg { sg_scale } else { 0.0 };
                p.guidance.mask = if cam { cam_mask.clone() } else { MaskMode::Off };
                let (_, report) =
                    run_pipeline(&p).with_context(|| format!("ablation cell sg={sg} cam={cam} mode={mode}"))?;
                let metric = |name| report.metric(name).map_or(String::new(), |v| v.to_string());
                csv.push_str(&format!(
                    "{sg},{cam},{mode},{},{},{},{}\n",
                    p.guidance.w,
                    metric("stage1_disagreement"),
                    metric("final_disagreement"),
                    metric("seam_discontinuity"),
                ));
            }
        }
    }
    print!("{csv}");
    write_file(&cfg.out_dir.join("ablation.csv"), csv)?;
    Ok(())
}

fn cmd_selftest(corrupt_schedule: bool) -> ExitCode {
    init_logging("warn");
    let report = run_selftest(&SelftestOptions { corrupt_schedule });
    for c in &report.checks {
        let status = if c.passed { "ok  " } else { "FAIL" };
        if c.detail.is_empty() {
            println!("{status} {}", c.name);
        } else {
            println!("{status} {} ({})", c.name, c.detail);
        }
    }
    let failed = report.failures();
    println!("{} checks, {} failed", report.checks.len(), failed);
    if report.all_passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}

fn cmd_schedule(run: &RunArgs) -> Result<()> {
    let cfg = run.resolve()?;
    let csv = cfg.pipeline.schedule()?.to_csv();
    match &run.out {
        Some(dir) => {
            prepare_out_dir(dir)?;
            write_file(&dir.join("schedule.csv"), csv)?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_serve(echo: bool) -> Result<()> {
    if !echo {
        bail!("only --echo is available; model serving lives in the Python bridge");
    }
    let stdin = io::stdin();
    let mut r = BufReader::new(stdin.lock());
    let mut w = BufWriter::new(io::stdout().lock());
    loop {
        let req = match wire::read_request(&mut r) {
            Ok(req) => req,
            // Closed stdin ends the session.
            Err(_) => return Ok(()),
        };
        match req {
            Err(msg) => wire::write_error_response(&mut w, &msg)?,
            Ok(ServerRequest::Hello { .. }) => wire::write_hello_response(&mut w)?,
            Ok(ServerRequest::Predict {
                latent, want_attention, ..
            }) => {
                let s = latent.shape();
                let att = if want_attention {
                    Some(Tensor::ones(Shape::new(1, s.height, s.width)?))
                } else {
                    None
                };
                wire::write_predict_response(&mut w, &latent, att.as_ref())?;
            }
        }
        w.flush()?;
    }
}

fn cmd_config(run: &RunArgs) -> Result<()> {
    let cfg = run.resolve()?;
    print!("{}", cfg.to_canonical_string());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Selftest { corrupt_schedule } => return cmd_selftest(*corrupt_schedule),
        Command::Generate { run, dump_patches } => cmd_generate(run, *dump_patches),
        Command::Benchmark { run } => cmd_benchmark(run),
        Command::Ablate { run } => cmd_ablate(run),
        Command::Schedule { run } => cmd_schedule(run),
        Command::Serve { echo } => cmd_serve(*echo),
        Command::Config { run } => cmd_config(run),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
