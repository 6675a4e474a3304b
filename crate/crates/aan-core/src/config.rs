//! TOML run configuration: model widths, cell choice, optimizer and the
//! dataset blocks. `build` turns a parsed config into a ready model,
//! optimizer and data splits; each dataset block becomes one domain and
//! one task.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::cells::{CellConfig, CellKind, CellParams, InverseCell, Readout};
use crate::data::{generate, DatasetSpec, GenKind};
use crate::error::{Error, Result};
use crate::extract::{ExtractorKind, ExtractorRegistry, RawSpec};
use crate::train::{HeadMode, Mode, Model, Optimizer, Sample, TaskHead, TrainOptions};

fn default_epochs() -> usize {
    40
}
fn default_batch() -> usize {
    16
}
fn default_cell() -> String {
    "ran".into()
}
fn default_head() -> String {
    "shared".into()
}
fn default_mode() -> String {
    "supervised".into()
}
fn default_f() -> usize {
    8
}
fn default_heads() -> usize {
    2
}
fn default_max_depth() -> usize {
    16
}
fn default_readout() -> String {
    "max".into()
}
fn default_opt_kind() -> String {
    "adam".into()
}
fn default_lr() -> f64 {
    1e-3
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_f")]
    pub f: usize,
    #[serde(default = "default_f")]
    pub f_prime: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_max_depth")]
    pub max_depth: usize,
    #[serde(default = "default_readout")]
    pub readout: String,
    #[serde(default)]
    pub adjacency_decoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            f: default_f(),
            f_prime: default_f(),
            heads: default_heads(),
            max_depth: default_max_depth(),
            readout: default_readout(),
            adjacency_decoder: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_opt_kind")]
    pub kind: String,
    #[serde(default = "default_lr")]
    pub lr: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: default_opt_kind(),
            lr: default_lr(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    /// gaussian-pair, token-majority, sibling-parity or chain-recall.
    pub kind: String,
    pub n_train: usize,
    pub n_val: usize,
    #[serde(default)]
    pub seed: u64,
    /// identity, affine, mlp or token-mean; defaults to affine for
    /// numeric inputs and token-mean for token inputs.
    #[serde(default)]
    pub extractor: Option<String>,
    /// Hidden width when the extractor is an mlp.
    #[serde(default)]
    pub hidden: Option<usize>,
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default)]
    pub separation: Option<f64>,
    #[serde(default)]
    pub noise: Option<f64>,
    #[serde(default)]
    pub vocab: Option<usize>,
    #[serde(default)]
    pub classes: Option<usize>,
    #[serde(default)]
    pub len: Option<usize>,
    #[serde(default)]
    pub distractor_max: Option<f64>,
}

impl DatasetConfig {
    pub fn gen_kind(&self) -> Result<GenKind> {
        Ok(match self.kind.as_str() {
            "gaussian-pair" => GenKind::GaussianPair {
                dim: self.dim.unwrap_or(8),
                separation: self.separation.unwrap_or(1.0),
                noise: self.noise.unwrap_or(0.3),
            },
            "token-majority" => GenKind::TokenMajority {
                vocab: self.vocab.unwrap_or(8),
                classes: self.classes.unwrap_or(2),
                len: self.len.unwrap_or(9),
            },
            "sibling-parity" => GenKind::SiblingParity {
                dim: self.dim.unwrap_or(4),
            },
            "chain-recall" => GenKind::ChainRecall {
                len: self.len.unwrap_or(50),
                classes: self.classes.unwrap_or(10),
                distractor_max: self.distractor_max.unwrap_or(0.3),
            },
            other => {
                return Err(Error::Config(format!(
                    "dataset {}: unknown kind {other:?}",
                    self.name
                )))
            }
        })
    }

    /// Raw payload description the generator will emit.
    pub fn raw_spec(&self) -> Result<RawSpec> {
        Ok(match self.gen_kind()? {
            GenKind::GaussianPair { dim, .. } => RawSpec::Numeric { width: dim },
            GenKind::TokenMajority { vocab, .. } => RawSpec::Tokens { vocab },
            GenKind::SiblingParity { dim } => RawSpec::Numeric { width: dim },
            GenKind::ChainRecall { classes, .. } => RawSpec::Numeric { width: classes },
        })
    }

    pub fn extractor_kind(&self) -> Result<ExtractorKind> {
        let spec = self.raw_spec()?;
        let name = match &self.extractor {
            Some(n) => n.as_str(),
            None => match spec {
                RawSpec::Numeric { .. } => "affine",
                RawSpec::Tokens { .. } => "token-mean",
            },
        };
        Ok(match name {
            "identity" => ExtractorKind::Identity,
            "affine" => ExtractorKind::Affine,
            "mlp" => ExtractorKind::Mlp {
                hidden: self.hidden.unwrap_or(16),
            },
            "token-mean" => ExtractorKind::TokenMean,
            other => {
                return Err(Error::Config(format!(
                    "dataset {}: unknown extractor {other:?}",
                    self.name
                )))
            }
        })
    }

    pub fn to_spec(&self) -> Result<DatasetSpec> {
        Ok(DatasetSpec {
            name: self.name.clone(),
            kind: self.gen_kind()?,
            n_train: self.n_train,
            n_val: self.n_val,
            seed: self.seed,
        })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_cell")]
    pub cell: String,
    #[serde(default = "default_head")]
    pub head: String,
    #[serde(default = "default_mode")]
    pub mode: String,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub dataset: Vec<DatasetConfig>,
}

/// Everything a run needs, built from one config.
pub struct BuiltRun {
    pub model: Model,
    pub optimizer: Optimizer,
    pub train_set: Vec<Sample>,
    pub val_set: Vec<Sample>,
    pub options: TrainOptions,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Parse(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn cell_kind(&self) -> Result<CellKind> {
        CellKind::parse(&self.cell)
    }

    pub fn head_mode(&self) -> Result<HeadMode> {
        HeadMode::parse(&self.head)
    }

    pub fn run_mode(&self) -> Result<Mode> {
        Mode::parse(&self.mode)
    }

    pub fn readout(&self) -> Result<Readout> {
        match self.model.readout.as_str() {
            "max" => Ok(Readout::Max),
            "mean" => Ok(Readout::Mean),
            other => Err(Error::Config(format!("unknown readout {other:?}"))),
        }
    }

    fn validate(&self) -> Result<()> {
        let kind = self.cell_kind()?;
        self.head_mode()?;
        self.run_mode()?;
        self.readout()?;
        if self.dataset.is_empty() {
            return Err(Error::Config("at least one [[dataset]] block required".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if matches!(kind, CellKind::Raan | CellKind::Laan)
            && (self.model.heads == 0 || self.model.f_prime % self.model.heads != 0)
        {
            return Err(Error::Config(format!(
                "heads {} must divide f_prime {}",
                self.model.heads, self.model.f_prime
            )));
        }
        match self.optimizer.kind.as_str() {
            "adam" | "sgd" => {}
            other => return Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
        for d in &self.dataset {
            d.gen_kind()?;
            d.extractor_kind()?;
        }
        if self.head_mode()? == HeadMode::Shared {
            let counts: Vec<usize> = self
                .dataset
                .iter()
                .map(|d| d.gen_kind().map(|k| k.classes()))
                .collect::<Result<_>>()?;
            if counts.windows(2).any(|w| w[0] != w[1]) {
                return Err(Error::Config(format!(
                    "shared head needs equal class counts, got {counts:?}"
                )));
            }
        }
        Ok(())
    }

    /// Instantiate model, optimizer, datasets and options.
    pub fn build(&self) -> Result<BuiltRun> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let domains: Vec<(String, RawSpec, ExtractorKind)> = self
            .dataset
            .iter()
            .map(|d| Ok((d.name.clone(), d.raw_spec()?, d.extractor_kind()?)))
            .collect::<Result<_>>()?;
        let registry = ExtractorRegistry::new(self.model.f, domains, &mut rng)?;
        let cell = CellParams::init(
            CellConfig {
                kind: self.cell_kind()?,
                f: self.model.f,
                b: self.dataset.len(),
                f_prime: self.model.f_prime,
                heads: self.model.heads,
                max_depth: self.model.max_depth,
                readout: self.readout()?,
            },
            &mut rng,
        )?;
        let inverse = InverseCell::init(self.model.f, self.model.f_prime, &mut rng);
        let head_mode = self.head_mode()?;
        let heads = match head_mode {
            HeadMode::Shared => vec![TaskHead::init(
                self.dataset[0].gen_kind()?.classes(),
                self.model.f_prime,
                &mut rng,
            )],
            HeadMode::PerTask => self
                .dataset
                .iter()
                .map(|d| Ok(TaskHead::init(d.gen_kind()?.classes(), self.model.f_prime, &mut rng)))
                .collect::<Result<_>>()?,
        };
        let model = Model {
            registry,
            cell,
            inverse,
            heads,
            head_mode,
        };
        let optimizer = match self.optimizer.kind.as_str() {
            "adam" => Optimizer::adam(self.optimizer.lr),
            _ => Optimizer::sgd(self.optimizer.lr),
        };
        let mut train_set = Vec::new();
        let mut val_set = Vec::new();
        for (i, d) in self.dataset.iter().enumerate() {
            let (tr, va) = generate(&d.to_spec()?, i, i)?;
            train_set.extend(tr);
            val_set.extend(va);
        }
        Ok(BuiltRun {
            model,
            optimizer,
            train_set,
            val_set,
            options: TrainOptions {
                epochs: self.epochs,
                batch_size: self.batch_size,
                seed: self.seed,
                mode: self.run_mode()?,
                decode_adjacency: self.model.adjacency_decoder,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
epochs = 2
batch_size = 4
cell = "ran"

[[dataset]]
name = "blobs"
kind = "gaussian-pair"
n_train = 8
n_val = 4
dim = 3
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.model.f, 8);
        assert_eq!(cfg.optimizer.kind, "adam");
        assert_eq!(cfg.mode, "supervised");
        let built = cfg.build().unwrap();
        assert_eq!(built.train_set.len(), 8);
        assert_eq!(built.val_set.len(), 4);
        assert_eq!(built.model.heads.len(), 1);
    }

    #[test]
    fn unknown_cell_is_rejected() {
        let text = MINIMAL.replace("\"ran\"", "\"gru\"");
        assert!(matches!(
            RunConfig::from_toml(&text),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn heads_must_divide_hidden_width_for_attention_cells() {
        let text = r#"
cell = "raan"

[model]
f_prime = 9
heads = 2

[[dataset]]
name = "blobs"
kind = "gaussian-pair"
n_train = 8
n_val = 4
"#;
        assert!(matches!(
            RunConfig::from_toml(text),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn shared_head_requires_equal_class_counts() {
        let text = r#"
cell = "ran"

[[dataset]]
name = "a"
kind = "gaussian-pair"
n_train = 4
n_val = 2

[[dataset]]
name = "b"
kind = "chain-recall"
n_train = 4
n_val = 2
classes = 10
len = 5
"#;
        assert!(matches!(
            RunConfig::from_toml(text),
            Err(Error::Config(_))
        ));
        let per_task = text.replace("cell = \"ran\"", "cell = \"ran\"\nhead = \"per-task\"");
        let cfg = RunConfig::from_toml(&per_task).unwrap();
        let built = cfg.build().unwrap();
        assert_eq!(built.model.heads.len(), 2);
        assert_eq!(built.model.heads[0].classes(), 2);
        assert_eq!(built.model.heads[1].classes(), 10);
    }

    #[test]
    fn malformed_toml_is_a_parse_error() {
        assert!(matches!(
            RunConfig::from_toml("epochs = \"many\""),
            Err(Error::Parse(_))
        ));
        assert!(matches!(
            RunConfig::from_toml("nonsense_key = 1"),
            Err(Error::Parse(_))
        ));
    }

    #[test]
    fn missing_datasets_are_rejected() {
        assert!(matches!(
            RunConfig::from_toml("cell = \"ran\""),
            Err(Error::Config(_))
        ));
    }
}
