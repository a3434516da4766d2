//! Flat `key = value` training configuration.
//!
//! One file holds model keys, optimizer keys and a few run keys side by
//! side. Precedence, lowest first: built-in defaults, `PCONV_SEED` (seed
//! only), the config file, `--set key=value` overrides, dedicated flags.

use std::path::{Path, PathBuf};

use pconv_core::model::ModelConfig;
use pconv_core::trainer::TrainConfig;
use toml::{Table, Value};

const MODEL_KEYS: &[&str] = &[
    "variant",
    "depth",
    "base_channels",
    "kernel_sizes",
    "same_resolution",
    "leaky_slope",
    "bn_enabled",
    "init_seed",
];

const TRAIN_KEYS: &[&str] = &[
    "lr_initial",
    "lr_finetune",
    "finetune_start_iter",
    "batch_size",
    "max_iters",
    "seed",
    "dataset",
    "checkpoint_interval",
    "freeze_encoder_bn_on_finetune",
    "loss_weights",
];

const RUN_KEYS: &[&str] = &["masks", "foreground_label"];

/// Everything `train` needs, with relative paths resolved against the
/// config file's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Mask pool manifest for inpainting from a single-column image set.
    pub masks: Option<PathBuf>,
    pub foreground_label: u8,
}

/// Parses `key=value`; the value is read as a TOML value, falling back to
/// a bare string.
pub fn parse_override(s: &str) -> Result<(String, Value), String> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| format!("override {s:?} is not key=value"))?;
    let key = key.trim().to_string();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    };
    Ok((key, value))
}

fn split(table: &Table, keys: &[&str]) -> Table {
    table
        .iter()
        .filter(|(k, _)| keys.contains(&k.as_str()))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

fn resolve(base: &Path, p: PathBuf) -> PathBuf {
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

impl RunConfig {
    /// Builds the configuration from file text plus overrides.
    ///
    /// `env_seed` is used only when neither the file nor the overrides set
    /// `seed`; `init_seed` follows `seed` unless given.
    pub fn from_text(
        text: &str,
        base: &Path,
        overrides: &[(String, Value)],
        env_seed: Option<u64>,
    ) -> Result<Self, String> {
        let mut table: Table = text.parse().map_err(|e| format!("config: {e}"))?;
        for (k, v) in overrides {
            table.insert(k.clone(), v.clone());
        }
        if let Some(bad) = table
            .keys()
            .find(|k| ![MODEL_KEYS, TRAIN_KEYS, RUN_KEYS].iter().any(|set| set.contains(&k.as_str())))
        {
            return Err(format!("unknown config key `{bad}`"));
        }
        if !table.contains_key("seed") {
            if let Some(s) = env_seed {
                table.insert("seed".into(), Value::Integer(s as i64));
            }
        }
        let mut model_t = split(&table, MODEL_KEYS);
        if !model_t.contains_key("init_seed") {
            if let Some(s) = table.get("seed") {
                model_t.insert("init_seed".into(), s.clone());
            }
        }
        let model: ModelConfig = model_t
            .try_into()
            .map_err(|e: toml::de::Error| format!("model keys: {}", e.message()))?;
        let mut train: TrainConfig = split(&table, TRAIN_KEYS)
            .try_into()
            .map_err(|e: toml::de::Error| format!("training keys: {}", e.message()))?;
        train.dataset = train.dataset.map(|p| resolve(base, p));

        let run = split(&table, RUN_KEYS);
        let masks = match run.get("masks") {
            None => None,
            Some(Value::String(s)) => Some(resolve(base, PathBuf::from(s))),
            Some(other) => return Err(format!("key `masks` must be a path, got {other}")),
        };
        let foreground_label = match run.get("foreground_label") {
            None => 1,
            Some(Value::Integer(v)) if (1..=255).contains(v) => *v as u8,
            Some(other) => {
                return Err(format!("key `foreground_label` must be in 1..=255, got {other}"))
            }
        };
        Ok(RunConfig {
            model,
            train,
            masks,
            foreground_label,
        })
    }

    /// First violated constraint across model and training settings.
    pub fn first_violation(&self) -> Option<String> {
        self.model
            .violations()
            .into_iter()
            .chain(self.train.violations())
            .next()
    }
}
