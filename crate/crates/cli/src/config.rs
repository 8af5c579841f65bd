//! Flat key/value run configuration.
//!
//! Files are JSON objects whose keys are dotted paths (`sampler.steps`).
//! Nested objects are accepted and flattened. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use asg_core::denoiser::{Condition, DelayKind};
use asg_core::engine::{default_gaussian_prior, default_gmm_prior, ExecutorMode, PipelineConfig, PredictorKind};
use asg_core::guidance::MaskMode;
use asg_core::patching::FuseWindow;
use serde_json::{Map, Number, Value};

#[derive(Debug)]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config key `{}`: {}", self.key, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn err(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        key: key.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Asgt,
    Ppm,
}

impl OutputFormat {
    fn as_str(self) -> &'static str {
        match self {
            OutputFormat::Asgt => "asgt",
            OutputFormat::Ppm => "ppm",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub pipeline: PipelineConfig,
    pub out_dir: PathBuf,
    pub formats: Vec<OutputFormat>,
    pub log_level: String,
    pub benchmark_modes: Vec<ExecutorMode>,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            out_dir: PathBuf::from("out"),
            formats: vec![OutputFormat::Asgt, OutputFormat::Ppm],
            log_level: "warn".into(),
            benchmark_modes: ExecutorMode::ALL.to_vec(),
        }
    }
}

pub fn parse_predictor(s: &str) -> Result<PredictorKind, String> {
    Ok(match s {
        "gaussian" => PredictorKind::Gaussian(default_gaussian_prior()),
        "gmm" => PredictorKind::Gmm(default_gmm_prior()),
        "constant" => PredictorKind::Constant(0.0),
        _ => {
            if let Some(cmd) = s.strip_prefix("remote:stdio:") {
                let mut parts = cmd.split_whitespace().map(str::to_string);
                let program = parts.next().ok_or("remote:stdio: needs a command")?;
                PredictorKind::RemoteStdio {
                    program,
                    args: parts.collect(),
                }
            } else if let Some(addr) = s.strip_prefix("remote:") {
                if addr.is_empty() {
                    return Err("remote: needs host:port".into());
                }
                PredictorKind::Remote {
                    addr: addr.to_string(),
                    timeout: Duration::from_secs(30),
                }
            } else {
                return Err(format!(
                    "unknown predictor {s:?} (expected gaussian, gmm, constant, remote:ADDR or remote:stdio:CMD)"
                ));
            }
        }
    })
}

fn predictor_name(kind: &PredictorKind) -> String {
    match kind {
        PredictorKind::Gaussian(_) => "gaussian".into(),
        PredictorKind::Gmm(_) => "gmm".into(),
        PredictorKind::Constant(_) => "constant".into(),
        PredictorKind::Remote { addr, .. } => format!("remote:{addr}"),
        PredictorKind::RemoteStdio { program, args } => {
            let mut s = format!("remote:stdio:{program}");
            for a in args {
                s.push(' ');
                s.push_str(a);
            }
            s
        }
    }
}

pub fn parse_mask(s: &str) -> Result<MaskMode, String> {
    Ok(match s {
        "off" => MaskMode::Off,
        "one" => MaskMode::Constant,
        "attention" => MaskMode::Attention,
        _ => match s.strip_prefix("file:") {
            Some(p) if !p.is_empty() => MaskMode::File(PathBuf::from(p)),
            _ => {
                return Err(format!(
                    "unknown mask {s:?} (expected off, one, attention or file:PATH)"
                ))
            }
        },
    })
}

fn mask_name(m: &MaskMode) -> String {
    match m {
        MaskMode::Off => "off".into(),
        MaskMode::Constant => "one".into(),
        MaskMode::Attention => "attention".into(),
        MaskMode::File(p) => format!("file:{}", p.display()),
    }
}

fn window_name(w: &FuseWindow) -> String {
    match w {
        FuseWindow::Uniform => "uniform".into(),
        FuseWindow::Gaussian { sigma } => format!("gaussian:{sigma}"),
    }
}

fn parse_window(s: &str) -> Result<FuseWindow, String> {
    if s == "uniform" {
        return Ok(FuseWindow::Uniform);
    }
    match s.strip_prefix("gaussian:").map(str::parse::<f32>) {
        Some(Ok(sigma)) if sigma > 0.0 && sigma.is_finite() => Ok(FuseWindow::Gaussian { sigma }),
        _ => Err(format!("unknown window {s:?} (expected uniform or gaussian:SIGMA)")),
    }
}

/// f32 values go through their shortest decimal form so `0.1` stays `0.1`.
fn f32_value(v: f32) -> Value {
    f64_value(v.to_string().parse().unwrap_or(v as f64))
}

fn f64_value(v: f64) -> Value {
    Number::from_f64(v).map(Value::Number).unwrap_or(Value::Null)
}

fn flatten(prefix: &str, v: Value, out: &mut BTreeMap<String, Value>) -> Result<(), ConfigError> {
    match v {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k } else { format!("{prefix}.{k}") };
                flatten(&key, v, out)?;
            }
            Ok(())
        }
        other => {
            if prefix.is_empty() {
                return Err(err("<root>", "expected a JSON object"));
            }
            if out.insert(prefix.to_string(), other).is_some() {
                return Err(err(prefix, "given more than once"));
            }
            Ok(())
        }
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize, ConfigError> {
    v.as_u64()
        .map(|n| n as usize)
        .ok_or_else(|| err(key, format!("expected a non-negative integer, got {v}")))
}

fn as_f64(key: &str, v: &Value) -> Result<f64, ConfigError> {
    v.as_f64()
        .ok_or_else(|| err(key, format!("expected a number, got {v}")))
}

fn as_bool(key: &str, v: &Value) -> Result<bool, ConfigError> {
    v.as_bool()
        .ok_or_else(|| err(key, format!("expected true or false, got {v}")))
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str, ConfigError> {
    v.as_str()
        .ok_or_else(|| err(key, format!("expected a string, got {v}")))
}

impl CliConfig {
    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        let root: Value = serde_json::from_str(text).map_err(|e| err("<root>", e.to_string()))?;
        let mut flat = BTreeMap::new();
        flatten("", root, &mut flat)?;
        let mut cfg = CliConfig::default();
        // The predictor kind decides how `predictor.*` details are read.
        if let Some(v) = flat.remove("predictor.kind") {
            cfg.pipeline.predictor.kind =
                parse_predictor(as_str("predictor.kind", &v)?).map_err(|m| err("predictor.kind", m))?;
        }
        for (key, v) in &flat {
            cfg.set(key, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, anyhow::Error> {
        let text =
            std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        Self::from_json_str(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
    }

    fn set(&mut self, key: &str, v: &Value) -> Result<(), ConfigError> {
        let p = &mut self.pipeline;
        match key {
            "seed" => {
                p.seed = v
                    .as_u64()
                    .ok_or_else(|| err(key, format!("expected a non-negative integer, got {v}")))?
            }
            "image.base_height" => p.base_hw.0 = as_usize(key, v)?,
            "image.base_width" => p.base_hw.1 = as_usize(key, v)?,
            "image.target_height" => p.target_hw.0 = as_usize(key, v)?,
            "image.target_width" => p.target_hw.1 = as_usize(key, v)?,
            "image.channels" => p.channels = as_usize(key, v)?,
            "sampler.steps" => p.steps = as_usize(key, v)?,
            "sampler.train_steps" => p.train_steps = as_usize(key, v)?,
            "sampler.beta_start" => p.beta_start = as_f64(key, v)?,
            "sampler.beta_end" => p.beta_end = as_f64(key, v)?,
            "sampler.eta" => p.eta = as_f64(key, v)?,
            "sampler.ratio" => p.ratio = as_f64(key, v)?,
            "guidance.w" => p.guidance.w = as_f64(key, v)? as f32,
            "guidance.mask" => p.guidance.mask = parse_mask(as_str(key, v)?).map_err(|m| err(key, m))?,
            "guidance.stage2" => p.guidance.stage2 = as_bool(key, v)?,
            "executor.mode" => {
                p.executor = as_str(key, v)?
                    .parse()
                    .map_err(|e: asg_core::engine::EngineError| err(key, e.to_string()))?
            }
            "executor.workers" => p.workers = as_usize(key, v)?,
            "executor.delay_ms" => p.injected_delay_ms = as_f64(key, v)?,
            "executor.delay_kind" => {
                p.delay_kind = match as_str(key, v)? {
                    "sleep" => DelayKind::Sleep,
                    "spin" => DelayKind::Spin,
                    other => {
                        return Err(err(
                            key,
                            format!("unknown delay kind {other:?} (expected sleep or spin)"),
                        ))
                    }
                }
            }
            "executor.comm_delay_ms" => p.comm_delay_ms = as_f64(key, v)?,
            "stage1.pixel_interaction" => p.pixel_interaction = as_bool(key, v)?,
            "stage2.overlap" => p.stage2.overlap = if v.is_null() { None } else { Some(as_usize(key, v)?) },
            "stage2.window" => p.stage2.window = parse_window(as_str(key, v)?).map_err(|m| err(key, m))?,
            "predictor.cfg_scale" => {
                p.predictor.cfg_scale = if v.is_null() {
                    None
                } else {
                    Some(as_f64(key, v)? as f32)
                }
            }
            "predictor.cond" => {
                p.predictor.cond = if v.is_null() {
                    Condition::none()
                } else {
                    Condition::token(as_str(key, v)?)
                }
            }
            "predictor.sigma0" => {
                let s = as_f64(key, v)?;
                match &mut p.predictor.kind {
                    PredictorKind::Gaussian(g) if s > 0.0 => g.sigma0 = s,
                    PredictorKind::Gaussian(_) => return Err(err(key, format!("must be > 0, got {s}"))),
                    _ if v.is_null() => {}
                    _ => return Err(err(key, "only applies to the gaussian predictor")),
                }
            }
            "predictor.value" => match &mut p.predictor.kind {
                PredictorKind::Constant(c) => *c = as_f64(key, v)? as f32,
                _ if v.is_null() => {}
                _ => return Err(err(key, "only applies to the constant predictor")),
            },
            "predictor.timeout_ms" => match &mut p.predictor.kind {
                PredictorKind::Remote { timeout, .. } => *timeout = Duration::from_millis(as_usize(key, v)? as u64),
                _ if v.is_null() => {}
                _ => return Err(err(key, "only applies to remote:ADDR predictors")),
            },
            "output.dir" => self.out_dir = PathBuf::from(as_str(key, v)?),
            "output.formats" => {
                let list = v
                    .as_array()
                    .ok_or_else(|| err(key, format!("expected a list, got {v}")))?;
                self.formats = list
                    .iter()
                    .map(|f| match f.as_str() {
                        Some("asgt") => Ok(OutputFormat::Asgt),
                        Some("ppm") => Ok(OutputFormat::Ppm),
                        _ => Err(err(key, format!("unknown format {f} (expected asgt or ppm)"))),
                    })
                    .collect::<Result<_, _>>()?;
            }
            "log.level" => self.log_level = as_str(key, v)?.to_string(),
            "benchmark.modes" => {
                let list = v
                    .as_array()
                    .ok_or_else(|| err(key, format!("expected a list, got {v}")))?;
                self.benchmark_modes = list
                    .iter()
                    .map(|m| {
                        let s = m
                            .as_str()
                            .ok_or_else(|| err(key, format!("expected mode names, got {m}")))?;
                        s.parse()
                            .map_err(|e: asg_core::engine::EngineError| err(key, e.to_string()))
                    })
                    .collect::<Result<_, _>>()?;
                if self.benchmark_modes.is_empty() {
                    return Err(err(key, "needs at least one mode"));
                }
            }
            _ => return Err(err(key, "unknown key")),
        }
        Ok(())
    }

    /// Every key, sorted, with defaults spelled out.
    pub fn to_canonical_map(&self) -> Map<String, Value> {
        let p = &self.pipeline;
        let mut m = Map::new();
        let mut put = |k: &str, v: Value| {
            m.insert(k.to_string(), v);
        };
        put("seed", p.seed.into());
        put("image.base_height", p.base_hw.0.into());
        put("image.base_width", p.base_hw.1.into());
        put("image.target_height", p.target_hw.0.into());
        put("image.target_width", p.target_hw.1.into());
        put("image.channels", p.channels.into());
        put("sampler.steps", p.steps.into());
        put("sampler.train_steps", p.train_steps.into());
        put("sampler.beta_start", f64_value(p.beta_start));
        put("sampler.beta_end", f64_value(p.beta_end));
        put("sampler.eta", f64_value(p.eta));
        put("sampler.ratio", f64_value(p.ratio));
        put("guidance.w", f32_value(p.guidance.w));
        put("guidance.mask", mask_name(&p.guidance.mask).into());
        put("guidance.stage2", p.guidance.stage2.into());
        put("executor.mode", p.executor.as_str().into());
        put("executor.workers", p.workers.into());
        put("executor.delay_ms", f64_value(p.injected_delay_ms));
        put(
            "executor.delay_kind",
            match p.delay_kind {
                DelayKind::Sleep => "sleep",
                DelayKind::Spin => "spin",
            }
            .into(),
        );
        put("executor.comm_delay_ms", f64_value(p.comm_delay_ms));
        put("stage1.pixel_interaction", p.pixel_interaction.into());
        put("stage2.overlap", p.stage2.overlap.map_or(Value::Null, Value::from));
        put("stage2.window", window_name(&p.stage2.window).into());
        put("predictor.kind", predictor_name(&p.predictor.kind).into());
        put(
            "predictor.cfg_scale",
            p.predictor.cfg_scale.map_or(Value::Null, f32_value),
        );
        put(
            "predictor.cond",
            p.predictor.cond.as_str().map_or(Value::Null, Value::from),
        );
        match &p.predictor.kind {
            PredictorKind::Gaussian(g) => put("predictor.sigma0", f64_value(g.sigma0)),
            PredictorKind::Constant(c) => put("predictor.value", f32_value(*c)),
            PredictorKind::Remote { timeout, .. } => put("predictor.timeout_ms", (timeout.as_millis() as u64).into()),
            _ => {}
        }
        put("output.dir", self.out_dir.display().to_string().into());
        put(
            "output.formats",
            Value::Array(self.formats.iter().map(|f| f.as_str().into()).collect()),
        );
        put("log.level", self.log_level.clone().into());
        put(
            "benchmark.modes",
            Value::Array(self.benchmark_modes.iter().map(|m| m.as_str().into()).collect()),
        );
        m
    }

    pub fn to_canonical_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(&Value::Object(self.to_canonical_map())).expect("plain JSON values");
        s.push('\n');
        s
    }
}
