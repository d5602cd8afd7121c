//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key may appear
//! at most once; unknown keys are rejected.
//!
//! | key | meaning | default |
//! |-----|---------|---------|
//! | `seed` | seed for data, initialization and training | 0 |
//! | `layers`, `model_dim`, `heads`, `ffn_dim` | encoder geometry | 2, 32, 2, 128 |
//! | `vocab`, `seq_len`, `classes` | task geometry | 16, 12, 2 |
//! | `num_examples` | synthetic examples (20% validation) | 2000 |
//! | `train_epochs`, `train_lr` | dense training | 30, 0.001 |
//! | `batch_size`, `weight_decay` | shared by dense and ADMM training | 32, 3 |
//! | `admm_epochs`, `admm_lr`, `rho` | ADMM schedule | 10, 0.001, 0.01 |
//! | `steps_per_projection` | steps between projections, `epoch` for one epoch | epoch |
//! | `solver` | `max`, `dist` or `ste` | ste |
//! | `group_size` | rows per quantization scale (0 = whole matrix) | 32 |
//! | `activation_bits` | fake-quantize linear inputs, `off` or 2..16 | off |
//! | `encoder` | one scheme or six comma-separated schemes | Sparse-Q4 |
//! | `constraint`, `k` | search constraint and top-K | 0.875, 10 |
//! | `mode` | cost model for the constraint, `metadata` or `payload` | metadata |
//! | `options` | `|`-separated search vocabulary for every component | Q4\|Q8\|Sparse-Q4\|Sparse-Q8 |

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::admm::{AdmmOptions, AdmmSchedule, QuantMethod};
use crate::error::{Error, Result};
use crate::microformer::{
    make_synthetic_task, Dataset, ForwardOptions, Geometry, MicroModel, TrainOptions,
};
use crate::quantize::QuantSpec;
use crate::rng::Rng;
use crate::search::{CostMode, EncoderConfig, LayerScheme, SearchParams};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub geometry: Geometry,
    pub num_examples: usize,
    pub train_epochs: usize,
    pub train_lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub admm_epochs: usize,
    pub admm_lr: f64,
    pub rho: f64,
    pub steps_per_projection: Option<usize>,
    pub method: QuantMethod,
    pub group_size: usize,
    pub activation_bits: Option<u32>,
    pub encoder: EncoderConfig,
    pub constraint: f64,
    pub k: usize,
    pub options: Vec<LayerScheme>,
    pub mode: CostMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainOptions::default();
        let schedule = AdmmSchedule::default();
        let search = SearchParams::default();
        Self {
            seed: 0,
            geometry: Geometry::default(),
            num_examples: 2000,
            train_epochs: train.epochs,
            train_lr: train.lr,
            batch_size: train.batch_size,
            weight_decay: train.weight_decay,
            admm_epochs: schedule.epochs,
            admm_lr: schedule.lr,
            rho: schedule.rho,
            steps_per_projection: schedule.steps_per_projection,
            method: QuantMethod::Ste,
            group_size: 32,
            activation_bits: None,
            encoder: EncoderConfig::uniform(LayerScheme::SPARSE_Q4).expect("valid scheme"),
            constraint: search.constraint,
            k: search.k,
            options: LayerScheme::DEFAULT_OPTIONS.to_vec(),
            mode: search.mode,
        }
    }
}

fn parse_value<V: FromStr>(key: &str, value: &str, line: usize) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: invalid value {value:?} for {key}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {line}: expected key = value")))?;
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {line}: duplicate key {key}")));
            }
            cfg.set(key, value, line)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let g = &mut self.geometry;
        match key {
            "seed" => self.seed = parse_value(key, value, line)?,
            "layers" => g.layers = parse_value(key, value, line)?,
            "model_dim" => g.model_dim = parse_value(key, value, line)?,
            "heads" => g.heads = parse_value(key, value, line)?,
            "ffn_dim" => g.ffn_dim = parse_value(key, value, line)?,
            "vocab" => g.vocab = parse_value(key, value, line)?,
            "seq_len" => g.seq_len = parse_value(key, value, line)?,
            "classes" => g.classes = parse_value(key, value, line)?,
            "num_examples" => self.num_examples = parse_value(key, value, line)?,
            "train_epochs" => self.train_epochs = parse_value(key, value, line)?,
            "train_lr" => self.train_lr = parse_value(key, value, line)?,
            "batch_size" => self.batch_size = parse_value(key, value, line)?,
            "weight_decay" => self.weight_decay = parse_value(key, value, line)?,
            "admm_epochs" => self.admm_epochs = parse_value(key, value, line)?,
            "admm_lr" => self.admm_lr = parse_value(key, value, line)?,
            "rho" => self.rho = parse_value(key, value, line)?,
            "steps_per_projection" => {
                self.steps_per_projection = match value {
                    "epoch" => None,
                    v => Some(parse_value(key, v, line)?),
                }
            }
            "solver" => {
                self.method = value
                    .parse()
                    .map_err(|e| Error::Config(format!("line {line}: {e}")))?
            }
            "group_size" => self.group_size = parse_value(key, value, line)?,
            "activation_bits" => {
                self.activation_bits = match value {
                    "off" | "none" => None,
                    v => Some(parse_value(key, v, line)?),
                }
            }
            "encoder" => {
                self.encoder = value
                    .parse()
                    .map_err(|e| Error::Config(format!("line {line}: {e}")))?
            }
            "constraint" => self.constraint = parse_value(key, value, line)?,
            "k" => self.k = parse_value(key, value, line)?,
            "mode" => {
                self.mode = value
                    .parse()
                    .map_err(|e| Error::Config(format!("line {line}: {e}")))?
            }
            "options" => {
                self.options = value
                    .split('|')
                    .map(str::parse)
                    .collect::<Result<_>>()
                    .map_err(|e| Error::Config(format!("line {line}: {e}")))?
            }
            _ => return Err(Error::Config(format!("line {line}: unknown key {key}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.num_examples < 10 {
            return Err(Error::Config("num_examples must be at least 10".into()));
        }
        if let Some(b) = self.activation_bits {
            QuantSpec::new(b, 0)?;
        }
        if self.group_size > u16::MAX as usize {
            return Err(Error::Config(format!(
                "group_size {} exceeds {}",
                self.group_size,
                u16::MAX
            )));
        }
        if !(self.train_lr >= 0.0 && self.train_lr.is_finite()) {
            return Err(Error::Config("train_lr must be non-negative".into()));
        }
        self.encoder.check_geometry(&self.geometry)?;
        self.schedule().validate()?;
        self.search_params().validate()?;
        Ok(())
    }

    /// The synthetic task drawn from `seed`.
    pub fn dataset(&self) -> Result<Dataset> {
        make_synthetic_task(
            self.seed,
            self.num_examples,
            self.geometry.seq_len,
            self.geometry.vocab,
        )
    }

    /// Initial weights, drawn from a stream of `seed` separate from the data.
    pub fn init_model(&self) -> Result<MicroModel<f32>> {
        MicroModel::init(self.geometry, &mut Rng::new(self.seed).fork(1))
    }

    pub fn forward(&self) -> ForwardOptions {
        ForwardOptions {
            activation_bits: self.activation_bits,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.train_epochs,
            lr: self.train_lr,
            batch_size: self.batch_size,
            weight_decay: self.weight_decay,
            seed: self.seed,
            forward: self.forward(),
        }
    }

    pub fn schedule(&self) -> AdmmSchedule {
        AdmmSchedule {
            steps_per_projection: self.steps_per_projection,
            epochs: self.admm_epochs,
            rho: self.rho,
            lr: self.admm_lr,
            batch_size: self.batch_size,
            weight_decay: self.weight_decay,
            seed: self.seed,
        }
    }

    pub fn admm_options(&self) -> AdmmOptions {
        AdmmOptions {
            method: self.method,
            group_size: self.group_size,
            forward: self.forward(),
        }
    }

    pub fn search_params(&self) -> SearchParams {
        SearchParams {
            constraint: self.constraint,
            k: self.k,
            options: std::array::from_fn(|_| self.options.clone()),
            group_size: self.group_size,
            mode: self.mode,
        }
    }

    /// Renders every key; parsing the result gives back `self`.
    pub fn to_text(&self) -> String {
        let g = &self.geometry;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("layers", g.layers.to_string());
        kv("model_dim", g.model_dim.to_string());
        kv("heads", g.heads.to_string());
        kv("ffn_dim", g.ffn_dim.to_string());
        kv("vocab", g.vocab.to_string());
        kv("seq_len", g.seq_len.to_string());
        kv("classes", g.classes.to_string());
        kv("num_examples", self.num_examples.to_string());
        kv("train_epochs", self.train_epochs.to_string());
        kv("train_lr", self.train_lr.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("admm_epochs", self.admm_epochs.to_string());
        kv("admm_lr", self.admm_lr.to_string());
        kv("rho", self.rho.to_string());
        kv(
            "steps_per_projection",
            self.steps_per_projection
                .map_or("epoch".into(), |v| v.to_string()),
        );
        kv("solver", self.method.to_string());
        kv("group_size", self.group_size.to_string());
        kv(
            "activation_bits",
            self.activation_bits.map_or("off".into(), |v| v.to_string()),
        );
        kv("encoder", self.encoder.to_string());
        kv("constraint", self.constraint.to_string());
        kv("k", self.k.to_string());
        kv("mode", self.mode.to_string());
        kv(
            "options",
            self.options
                .iter()
                .map(|o| o.to_string())
                .collect::<Vec<_>>()
                .join("|"),
        );
        s
    }
}
