use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderMode;
use crate::diagnostics::DEFAULT_BUDGET;
use crate::error::{Result, RsdError};
use crate::ingestion::{TopicAffinity, DEFAULT_READOUT_CAP};
use crate::model::Hyperparams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    SynthCheck,
    HeldoutBench,
    Audit,
}

impl Command {
    pub fn label(self) -> &'static str {
        match self {
            Self::SynthCheck => "synth-check",
            Self::HeldoutBench => "heldout-bench",
            Self::Audit => "audit",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProxyKind {
    #[default]
    Cosine,
    Topic,
    File,
}

impl FromStr for ProxyKind {
    type Err = RsdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "topic" => Ok(Self::Topic),
            "file" => Ok(Self::File),
            other => Err(RsdError::Config(format!("unknown proxy kind {other:?}"))),
        }
    }
}

impl fmt::Display for ProxyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cosine => "cosine",
            Self::Topic => "topic",
            Self::File => "file",
        })
    }
}

/// Everything a command needs. Unset optional fields are filled with the
/// command's defaults by [`RunConfig::resolve`], and the resolved config is
/// echoed into every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: Command,
    pub embeddings: Option<PathBuf>,
    pub block: Option<PathBuf>,
    pub proxy: ProxyKind,
    pub proxy_path: Option<PathBuf>,
    pub same_topic: f64,
    pub cross_topic: f64,
    pub k: usize,
    pub lambda: f64,
    pub steps: Option<usize>,
    pub learning_rate: Option<f64>,
    pub seeds: Vec<u64>,
    pub budget_x: f64,
    pub budget_a: f64,
    pub decoder: DecoderMode,
    pub head_dim: usize,
    pub temperature: f64,
    pub ball_margin: f64,
    pub encoder_hidden: usize,
    pub router_hidden: usize,
    pub epsilon: f64,
    pub holdout: Option<f64>,
    pub out: Option<PathBuf>,
    pub plot_data: bool,
    pub baseline: bool,
    pub readout_k: usize,
    pub readout_cap: usize,
    pub exclude_items: bool,
    pub restarts: usize,
}

impl RunConfig {
    pub fn new(command: Command) -> Self {
        let h = Hyperparams::default();
        Self {
            command,
            embeddings: None,
            block: None,
            proxy: ProxyKind::default(),
            proxy_path: None,
            same_topic: TopicAffinity::default().same_topic,
            cross_topic: TopicAffinity::default().cross_topic,
            k: h.components,
            lambda: 1.0,
            steps: None,
            learning_rate: None,
            seeds: Vec::new(),
            budget_x: DEFAULT_BUDGET,
            budget_a: DEFAULT_BUDGET,
            decoder: h.decoder,
            head_dim: h.head_dim,
            temperature: h.temperature,
            ball_margin: h.ball_margin,
            encoder_hidden: h.encoder_hidden,
            router_hidden: h.router_hidden,
            epsilon: h.epsilon,
            holdout: None,
            out: None,
            plot_data: false,
            baseline: false,
            readout_k: 5,
            readout_cap: DEFAULT_READOUT_CAP,
            exclude_items: true,
            restarts: 8,
        }
    }

    /// Fills command defaults and validates the result.
    pub fn resolve(mut self) -> Result<Self> {
        let (steps, lr, seeds): (usize, f64, Vec<u64>) = match self.command {
            Command::SynthCheck => (2000, 0.01, vec![7]),
            Command::HeldoutBench => (320, 0.025, (0..8).collect()),
            Command::Audit => (500, 0.01, vec![0]),
        };
        self.steps.get_or_insert(steps);
        self.learning_rate.get_or_insert(lr);
        if self.seeds.is_empty() {
            self.seeds = seeds;
        } else if self.command == Command::HeldoutBench && self.seeds.len() == 1 {
            let base = self.seeds[0];
            self.seeds = (base..base + 8).collect();
        }
        if self.command == Command::HeldoutBench && self.holdout.is_none() {
            self.holdout = Some(0.2);
        }
        if self.out.is_none() {
            let name = match self.command {
                Command::SynthCheck => "synth_check.json",
                Command::HeldoutBench => "heldout_bench.json",
                Command::Audit => "audit.json",
            };
            self.out = Some(PathBuf::from(name));
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(RsdError::Config(msg));
        if self.steps == Some(0) {
            return bad("steps must be >= 1".into());
        }
        if let Some(lr) = self.learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("learning rate {lr} must be positive"));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be nonnegative", self.lambda));
        }
        if !(self.budget_x > 0.0 && self.budget_a > 0.0) {
            return bad("budgets must be positive".into());
        }
        if let Some(h) = self.holdout {
            if !(h > 0.0 && h < 1.0) {
                return bad(format!("holdout {h} must lie in (0,1)"));
            }
        }
        if self.restarts == 0 {
            return bad("restarts must be >= 1".into());
        }
        self.hyperparams().validate().map_err(|e| RsdError::Config(e.to_string()))?;
        if self.command == Command::Audit {
            if self.block.is_none() {
                return bad("audit needs --block".into());
            }
            if self.embeddings.is_none() {
                return bad("audit needs --embeddings".into());
            }
            if self.proxy == ProxyKind::File && self.proxy_path.is_none() {
                return bad("--proxy file needs --proxy-path".into());
            }
        }
        Ok(())
    }

    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            components: self.k,
            encoder_hidden: self.encoder_hidden,
            head_dim: self.head_dim,
            temperature: self.temperature,
            ball_margin: self.ball_margin,
            router_hidden: self.router_hidden,
            epsilon: self.epsilon,
            decoder: self.decoder,
        }
    }

    pub fn topic_affinity(&self) -> TopicAffinity {
        TopicAffinity {
            same_topic: self.same_topic,
            cross_topic: self.cross_topic,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps.unwrap_or(500)
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate.unwrap_or(0.01)
    }

    pub fn out_path(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out.json"))
    }

    /// Sets one field from its textual form. Keys are the field names.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| RsdError::Config(format!("{key}: cannot parse {v:?}")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "yes" | "1" => Ok(true),
                "false" | "no" | "0" => Ok(false),
                _ => Err(RsdError::Config(format!("{key}: expected a boolean, got {v:?}"))),
            }
        }
        let path = |v: &str| Some(PathBuf::from(v));
        match key {
            "embeddings" => self.embeddings = path(value),
            "block" => self.block = path(value),
            "proxy" => self.proxy = value.parse()?,
            "proxy_path" => self.proxy_path = path(value),
            "same_topic" => self.same_topic = num(key, value)?,
            "cross_topic" => self.cross_topic = num(key, value)?,
            "k" => self.k = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "steps" => self.steps = Some(num(key, value)?),
            "learning_rate" | "lr" => self.learning_rate = Some(num(key, value)?),
            "seed" | "seeds" => self.seeds = parse_seeds(value)?,
            "budget_x" => self.budget_x = num(key, value)?,
            "budget_a" => self.budget_a = num(key, value)?,
            "decoder" => {
                self.decoder = value
                    .parse()
                    .map_err(|_| RsdError::Config(format!("unknown decoder {value:?}")))?
            }
            "head_dim" => self.head_dim = num(key, value)?,
            "temperature" => self.temperature = num(key, value)?,
            "ball_margin" => self.ball_margin = num(key, value)?,
            "encoder_hidden" => self.encoder_hidden = num(key, value)?,
            "router_hidden" => self.router_hidden = num(key, value)?,
            "epsilon" => self.epsilon = num(key, value)?,
            "holdout" => self.holdout = Some(num(key, value)?),
            "out" => self.out = path(value),
            "plot_data" => self.plot_data = flag(key, value)?,
            "baseline" => self.baseline = flag(key, value)?,
            "readout_k" => self.readout_k = num(key, value)?,
            "readout_cap" => self.readout_cap = num(key, value)?,
            "exclude_items" => self.exclude_items = flag(key, value)?,
            "restarts" => self.restarts = num(key, value)?,
            other => return Err(RsdError::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a flat `key = value` file. `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RsdError::Config(format!("{}: {e}", path.display())))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                RsdError::Config(format!("{}:{}: expected key = value", path.display(), lineno + 1))
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|e| RsdError::Config(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        }
        Ok(())
    }
}

/// `"23,29,31"` → `[23, 29, 31]`.
pub fn parse_seeds(value: &str) -> Result<Vec<u64>> {
    let seeds = value
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| RsdError::Config(format!("bad seed {s:?}")))
        })
        .collect::<Result<Vec<u64>>>()?;
    if seeds.is_empty() {
        return Err(RsdError::Config("empty seed list".into()));
    }
    Ok(seeds)
}
