//! Plain-text experiment configuration.
//!
//! One `key = value` per line, `#` starts a comment, keys carry a dotted
//! section prefix. Unknown keys are rejected. Lists are comma separated.
//! [`ExperimentConfig::to_text`] writes every key, and parsing that output
//! yields the same config.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use fdg_core::datagen::{ShiftLayout, WorldSpec};
use fdg_core::encoder::EncoderConfig;
use fdg_core::fedruntime::{Aggregation, Dtype, RoundConfig};
use fdg_core::mst::MstConfig;
use fdg_core::numerics::AdamConfig;
use fdg_core::prompts::{DpgMode, PromptConfig};

use crate::error::{CliError, CliResult};
use crate::variant::Variant;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub classes: usize,
    pub domains: usize,
    pub samples_per_cell: usize,
    pub noise: f64,
    pub dim: usize,
    pub shift_magnitude: f64,
    pub shift_layout: ShiftLayout,
    pub shift_overlap: f64,
    pub token_scale: f64,
    pub shots: Option<usize>,

    pub encoder_seed: u64,
    pub max_tokens: usize,

    pub mst_lambda: f64,
    pub mst_lr: f64,
    pub mst_weight_decay: f64,
    pub mst_epochs: usize,
    pub mst_batch_size: usize,
    pub mst_hidden: usize,
    pub mst_temperature: f64,
    pub mst_output_init: f64,

    pub prompt_length: usize,
    pub temperature: f64,
    pub dpg_mode: DpgMode,
    pub prompt_init_std: f64,

    pub rounds: usize,
    pub global_epochs: usize,
    pub domain_epochs: usize,
    pub batch_size: usize,
    pub prompt_lr: f64,
    pub classifier_lr: f64,
    pub aggregation: Aggregation,
    pub wire: Dtype,
    pub parallel: bool,

    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    /// Held-out domains for `ablate`; empty means all.
    pub holdouts: Vec<usize>,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            domains: 4,
            samples_per_cell: 200,
            noise: 0.1,
            dim: 64,
            shift_magnitude: 2.0,
            shift_layout: ShiftLayout::Plane,
            shift_overlap: 0.3,
            token_scale: 1.0,
            shots: None,

            encoder_seed: 42,
            max_tokens: 12,

            mst_lambda: 0.5,
            mst_lr: 1e-3,
            mst_weight_decay: 0.05,
            mst_epochs: 3,
            mst_batch_size: 16,
            mst_hidden: 32,
            mst_temperature: 0.01,
            mst_output_init: 0.05,

            prompt_length: 4,
            temperature: 0.01,
            dpg_mode: DpgMode::Soft,
            prompt_init_std: 0.02,

            rounds: 5,
            global_epochs: 1,
            domain_epochs: 1,
            batch_size: 16,
            prompt_lr: 0.005,
            classifier_lr: 0.01,
            aggregation: Aggregation::SampleCount,
            wire: Dtype::F32,
            parallel: false,

            seeds: vec![0, 1, 2],
            variants: Variant::ALL.to_vec(),
            holdouts: Vec::new(),
            out_dir: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> CliResult<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| CliError::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> CliResult<Vec<T>>
where
    T::Err: Display,
{
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

macro_rules! keys {
    ($($key:literal => $field:ident : $kind:ident),* $(,)?) => {
        impl ExperimentConfig {
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
                match key {
                    $($key => keys!(@set self, $field, $kind, key, value),)*
                    other => return Err(CliError::Config(format!("unknown key {other:?}"))),
                }
                Ok(())
            }

            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, keys!(@get self, $field, $kind))),*]
            }
        }
    };
    (@set $s:ident, $f:ident, scalar, $k:ident, $v:ident) => { $s.$f = parse($k, $v)? };
    (@set $s:ident, $f:ident, list, $k:ident, $v:ident) => { $s.$f = parse_list($k, $v)? };
    (@set $s:ident, $f:ident, optional, $k:ident, $v:ident) => {
        $s.$f = if $v == "none" { None } else { Some(parse($k, $v)?) }
    };
    (@set $s:ident, $f:ident, path, $k:ident, $v:ident) => {
        $s.$f = if $v.is_empty() { None } else { Some(PathBuf::from($v)) }
    };
    (@get $s:ident, $f:ident, scalar) => { $s.$f.to_string() };
    (@get $s:ident, $f:ident, list) => { join(&$s.$f) };
    (@get $s:ident, $f:ident, optional) => { $s.$f.map_or_else(|| "none".to_string(), |v| v.to_string()) };
    (@get $s:ident, $f:ident, path) => { $s.$f.as_ref().map_or_else(String::new, |p| p.display().to_string()) };
}

keys! {
    "world.classes" => classes: scalar,
    "world.domains" => domains: scalar,
    "world.samples_per_cell" => samples_per_cell: scalar,
    "world.noise" => noise: scalar,
    "world.dim" => dim: scalar,
    "world.shift_magnitude" => shift_magnitude: scalar,
    "world.shift_layout" => shift_layout: scalar,
    "world.shift_overlap" => shift_overlap: scalar,
    "world.token_scale" => token_scale: scalar,
    "world.shots" => shots: optional,
    "encoder.seed" => encoder_seed: scalar,
    "encoder.max_tokens" => max_tokens: scalar,
    "mst.lambda" => mst_lambda: scalar,
    "mst.lr" => mst_lr: scalar,
    "mst.weight_decay" => mst_weight_decay: scalar,
    "mst.epochs" => mst_epochs: scalar,
    "mst.batch_size" => mst_batch_size: scalar,
    "mst.hidden" => mst_hidden: scalar,
    "mst.temperature" => mst_temperature: scalar,
    "mst.output_init" => mst_output_init: scalar,
    "prompt.length" => prompt_length: scalar,
    "prompt.temperature" => temperature: scalar,
    "prompt.dpg_mode" => dpg_mode: scalar,
    "prompt.init_std" => prompt_init_std: scalar,
    "rounds.R" => rounds: scalar,
    "rounds.global_epochs" => global_epochs: scalar,
    "rounds.domain_epochs" => domain_epochs: scalar,
    "rounds.batch_size" => batch_size: scalar,
    "rounds.prompt_lr" => prompt_lr: scalar,
    "rounds.classifier_lr" => classifier_lr: scalar,
    "rounds.aggregation" => aggregation: scalar,
    "rounds.wire" => wire: scalar,
    "rounds.parallel" => parallel: scalar,
    "run.seeds" => seeds: list,
    "run.variants" => variants: list,
    "run.holdouts" => holdouts: list,
    "run.out_dir" => out_dir: path,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| CliError::Config(format!("line {}: {}", n + 1, e.to_string().trim_start_matches("config error: "))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, value) in self.entries() {
            let s = key.split('.').next().unwrap_or("");
            if s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = s;
            }
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("run.seeds must list at least one seed".into()));
        }
        if let Some(&u) = self.holdouts.iter().find(|&&u| u >= self.domains) {
            return Err(CliError::Config(format!("held-out domain {u} out of range for {} domains", self.domains)));
        }
        for v in &self.variants {
            v.toggles().validate()?;
        }
        self.world_spec(0).validate()?;
        self.encoder_config().validate(self.prompt_length)?;
        self.mst_config().validate()?;
        self.prompt_config().validate()?;
        self.round_config(self.domains - 1, 0).validate()?;
        Ok(())
    }

    pub fn world_spec(&self, seed: u64) -> WorldSpec {
        WorldSpec {
            classes: self.classes,
            domains: self.domains,
            samples_per_cell: self.samples_per_cell,
            noise: self.noise,
            dim: self.dim,
            seed,
            shift_magnitude: self.shift_magnitude,
            shift_layout: self.shift_layout,
            shift_overlap: self.shift_overlap,
            token_scale: self.token_scale,
            shots: self.shots,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig::new(self.dim, self.max_tokens, self.encoder_seed)
    }

    pub fn mst_config(&self) -> MstConfig {
        MstConfig {
            lambda: self.mst_lambda,
            adam: AdamConfig {
                lr: self.mst_lr,
                weight_decay: self.mst_weight_decay,
                ..AdamConfig::default()
            },
            epochs: self.mst_epochs,
            batch_size: self.mst_batch_size,
            hidden: self.mst_hidden,
            temperature: self.mst_temperature,
            output_init: self.mst_output_init,
        }
    }

    pub fn prompt_config(&self) -> PromptConfig {
        PromptConfig {
            length: self.prompt_length,
            dim: self.dim,
            temperature: self.temperature,
            dpg_mode: self.dpg_mode,
            init_std: self.prompt_init_std,
        }
    }

    pub fn round_config(&self, clients: usize, seed: u64) -> RoundConfig {
        RoundConfig {
            clients,
            rounds: self.rounds,
            global_epochs: self.global_epochs,
            domain_epochs: self.domain_epochs,
            batch_size: self.batch_size,
            prompt_lr: self.prompt_lr,
            classifier_lr: self.classifier_lr,
            aggregation: self.aggregation,
            seed,
            wire: self.wire,
            parallel: self.parallel,
        }
    }

    /// Held-out domains to run: the configured list or every domain.
    pub fn holdout_list(&self) -> Vec<usize> {
        if self.holdouts.is_empty() {
            (0..self.domains).collect()
        } else {
            self.holdouts.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_text();
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), cfg);
        assert_eq!(ExperimentConfig::KEYS.len(), cfg.entries().len());
    }

    #[test]
    fn comments_sections_and_lists() {
        let cfg = ExperimentConfig::parse(
            "# desk run\nrounds.R = 7  # short\n\nrun.seeds = 4, 5\nworld.shots = 8\nrun.variants = v1,full\n",
        )
        .unwrap();
        assert_eq!(cfg.rounds, 7);
        assert_eq!(cfg.seeds, vec![4, 5]);
        assert_eq!(cfg.shots, Some(8));
        assert_eq!(cfg.variants, vec![Variant::V1, Variant::Full]);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let e = ExperimentConfig::parse("rounds.r = 3").unwrap_err();
        assert!(e.to_string().contains("unknown key"), "{e}");
        assert!(ExperimentConfig::parse("rounds.R = three").is_err());
        assert!(ExperimentConfig::parse("no equals sign").is_err());
        assert!(ExperimentConfig::parse("run.seeds =").is_err());
        assert!(ExperimentConfig::parse("run.holdouts = 9").is_err());
        assert!(ExperimentConfig::parse("world.dim = 8").is_err());
    }
}
