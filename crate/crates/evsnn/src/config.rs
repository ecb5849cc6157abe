//! Run configuration: a `key=value` file with section prefixes
//! (`synth.`, `data.`, `repr.`, `model.`, `lif.`, `train.`, `eval.`, `energy.`).
//! Unknown keys are rejected, absent keys keep their defaults, and
//! [`RunConfig::render`] echoes every key so a run can be repeated from
//! its output directory.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use evsnn_core::descriptor::ModelConfig;
use evsnn_core::energy::{OpMode, DEFAULT_STATIC_RATE};
use evsnn_core::eval::DEFAULT_PHIS;
use evsnn_core::event::{Resolution, SynthConfig};
use evsnn_core::training::{Optimizer, TrainConfig};

use crate::error::{Error, Result};

pub const CONFIG_ECHO: &str = "config.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnergyMode {
    Ann,
    SnnStatic,
    SnnMeasured,
}

impl FromStr for EnergyMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ann" => Ok(EnergyMode::Ann),
            "snn-static" => Ok(EnergyMode::SnnStatic),
            "snn-measured" => Ok(EnergyMode::SnnMeasured),
            _ => Err(Error::Config(format!("energy mode {s:?} is not ann, snn-static or snn-measured"))),
        }
    }
}

impl EnergyMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            EnergyMode::Ann => "ann",
            EnergyMode::SnnStatic => "snn-static",
            EnergyMode::SnnMeasured => "snn-measured",
        }
    }

    pub fn op_mode(&self, rate: f64) -> OpMode {
        match self {
            EnergyMode::Ann => OpMode::Ann,
            EnergyMode::SnnStatic => OpMode::SnnStatic { rate },
            EnergyMode::SnnMeasured => OpMode::SnnMeasured,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Root seed; synthesis, initialization, sampling and training derive
    /// their streams from it under fixed labels.
    pub seed: u64,
    pub threads: usize,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Save a checkpoint every this many steps (0: only the final one).
    pub checkpoint_every: usize,
    pub query_sequence: String,
    pub database_sequence: String,
    pub phi: f64,
    pub phi_sweep: Vec<f64>,
    pub energy_mode: EnergyMode,
    pub energy_rate: f64,
    /// Volumes fed through the network when measuring spike rates.
    pub energy_volumes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig { scale: 0.125, ..ModelConfig::default() };
        Self {
            seed: 0,
            threads: 1,
            synth: SynthConfig::default(),
            model,
            train: TrainConfig::default(),
            checkpoint_every: 0,
            query_sequence: "traverse1".into(),
            database_sequence: "traverse0".into(),
            phi: 75.0,
            phi_sweep: DEFAULT_PHIS.to_vec(),
            energy_mode: EnergyMode::SnnStatic,
            energy_rate: DEFAULT_STATIC_RATE,
            energy_volumes: 8,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn optimizer_name(o: &Optimizer) -> &'static str {
    match o {
        Optimizer::Sgd { .. } => "sgd",
        Optimizer::Adam { .. } => "adam",
    }
}

impl RunConfig {
    /// Set one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let s = &mut self.synth;
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "threads" => self.threads = parse(key, v)?,
            "synth.places" => s.n_places = parse(key, v)?,
            "synth.traverses" => s.traverses = parse(key, v)?,
            "synth.width" => s.resolution = Resolution::new(parse(key, v)?, s.resolution.height),
            "synth.height" => s.resolution = Resolution::new(s.resolution.width, parse(key, v)?),
            "synth.events_per_place" => s.events_per_place = parse(key, v)?,
            "synth.noise_rate" => s.noise_rate = parse(key, v)?,
            "synth.interval_s" => s.interval_s = parse(key, v)?,
            "synth.spacing_m" => s.spacing_m = parse(key, v)?,
            "repr.steps" => m.steps = parse(key, v)?,
            "repr.eta_ms" => m.eta_s = parse::<f64>(key, v)? / 1000.0,
            "repr.smlp_hidden" => m.smlp_hidden = parse(key, v)?,
            "model.scale" => m.scale = parse(key, v)?,
            "model.cda_hidden" => m.cda_hidden = parse(key, v)?,
            "lif.v_threshold" => m.lif.v_threshold = parse(key, v)?,
            "lif.decay" => m.lif.decay = parse(key, v)?,
            "lif.alpha" => m.lif.alpha = parse(key, v)?,
            "lif.detach_reset" => m.lif.detach_reset = parse(key, v)?,
            "train.margin" => t.margin = parse(key, v)?,
            "train.negatives" => t.negatives = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.optimizer" => {
                t.optimizer = match v {
                    "sgd" => Optimizer::Sgd { momentum: 0.0 },
                    "adam" => Optimizer::ADAM,
                    _ => return Err(Error::Config(format!("{key}: expected sgd or adam, got {v:?}"))),
                }
            }
            "train.momentum" => match &mut t.optimizer {
                Optimizer::Sgd { momentum } => *momentum = parse(key, v)?,
                Optimizer::Adam { .. } => return Err(Error::Config(format!("{key} applies only to train.optimizer=sgd"))),
            },
            "train.batch" => t.batch = parse(key, v)?,
            "train.cache_batch" => t.cache_batch = parse(key, v)?,
            "train.r_pos" => t.r_pos = parse(key, v)?,
            "train.r_neg" => t.r_neg = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.max_steps" => t.max_steps = if v == "none" { None } else { Some(parse(key, v)?) },
            "train.pool_size" => t.pool_size = parse(key, v)?,
            "train.bn_momentum" => t.bn_momentum = parse(key, v)?,
            "train.calibrate_bn" => t.calibrate_bn = parse(key, v)?,
            "train.checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "data.query_sequence" => self.query_sequence = v.to_string(),
            "data.database_sequence" => self.database_sequence = v.to_string(),
            "eval.phi" => self.phi = parse(key, v)?,
            "eval.phi_sweep" => self.phi_sweep = parse_list(key, v)?,
            "energy.mode" => self.energy_mode = v.parse()?,
            "energy.rate" => self.energy_rate = parse(key, v)?,
            "energy.volumes" => self.energy_volumes = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
            self.set(k.trim(), v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::default();
        c.apply_text(&text)?;
        Ok(c)
    }

    /// Every key with its effective value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (s, m, t) = (&self.synth, &self.model, &self.train);
        let momentum = match t.optimizer {
            Optimizer::Sgd { momentum } => Some(momentum),
            Optimizer::Adam { .. } => None,
        };
        let mut entries = vec![
            ("seed", self.seed.to_string()),
            ("threads", self.threads.to_string()),
            ("synth.places", s.n_places.to_string()),
            ("synth.traverses", s.traverses.to_string()),
            ("synth.width", s.resolution.width.to_string()),
            ("synth.height", s.resolution.height.to_string()),
            ("synth.events_per_place", s.events_per_place.to_string()),
            ("synth.noise_rate", format!("{:?}", s.noise_rate)),
            ("synth.interval_s", format!("{:?}", s.interval_s)),
            ("synth.spacing_m", format!("{:?}", s.spacing_m)),
            ("repr.steps", m.steps.to_string()),
            ("repr.eta_ms", format!("{:?}", m.eta_s * 1000.0)),
            ("repr.smlp_hidden", m.smlp_hidden.to_string()),
            ("model.scale", format!("{:?}", m.scale)),
            ("model.cda_hidden", m.cda_hidden.to_string()),
            ("lif.v_threshold", format!("{:?}", m.lif.v_threshold)),
            ("lif.decay", format!("{:?}", m.lif.decay)),
            ("lif.alpha", format!("{:?}", m.lif.alpha)),
            ("lif.detach_reset", m.lif.detach_reset.to_string()),
            ("train.margin", format!("{:?}", t.margin)),
            ("train.negatives", t.negatives.to_string()),
            ("train.lr", format!("{:?}", t.lr)),
            ("train.optimizer", optimizer_name(&t.optimizer).into()),
            ("train.momentum", momentum.map_or(String::new(), |m| format!("{m:?}"))),
            ("train.batch", t.batch.to_string()),
            ("train.cache_batch", t.cache_batch.to_string()),
            ("train.r_pos", format!("{:?}", t.r_pos)),
            ("train.r_neg", format!("{:?}", t.r_neg)),
            ("train.epochs", t.epochs.to_string()),
            ("train.max_steps", t.max_steps.map_or("none".into(), |n| n.to_string())),
            ("train.pool_size", t.pool_size.to_string()),
            ("train.bn_momentum", format!("{:?}", t.bn_momentum)),
            ("train.calibrate_bn", t.calibrate_bn.to_string()),
            ("train.checkpoint_every", self.checkpoint_every.to_string()),
            ("data.query_sequence", self.query_sequence.clone()),
            ("data.database_sequence", self.database_sequence.clone()),
            ("eval.phi", format!("{:?}", self.phi)),
            ("eval.phi_sweep", join(&self.phi_sweep)),
            ("energy.mode", self.energy_mode.as_str().into()),
            ("energy.rate", format!("{:?}", self.energy_rate)),
            ("energy.volumes", self.energy_volumes.to_string()),
        ];
        if momentum.is_none() {
            entries.retain(|(k, _)| *k != "train.momentum");
        }
        entries
    }

    pub fn render(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn echo(&self, dir: &Path) -> Result<()> {
        let path = dir.join(CONFIG_ECHO);
        fs::write(&path, self.render()).map_err(|e| Error::io(&path, e))
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig { seed: self.seed, ..self.synth }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train }
    }

    /// Range checks shared by all commands.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if !(self.phi > 0.0) {
            return Err(Error::Config("eval.phi must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.energy_rate) {
            return Err(Error::Config("energy.rate must lie in [0, 1]".into()));
        }
        Ok(())
    }
}
