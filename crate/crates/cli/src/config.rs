use std::path::Path;

use actjepa::evalkit::ProbeConfig;
use actjepa::model::ModelConfig;
use actjepa::simenv::TaskSpec;
use actjepa::trainer::TrainConfig;
use actjepa::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset directory; filled from `--data` when given.
    pub dir: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlternateSection {
    /// Fine-tune epochs per round.
    pub finetune_epochs: usize,
    pub freeze_encoder: bool,
}

impl Default for AlternateSection {
    fn default() -> Self {
        Self {
            finetune_epochs: 5,
            freeze_encoder: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub tasks: Vec<String>,
    pub seeds: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            tasks: TaskSpec::suite().iter().map(|t| t.name().to_string()).collect(),
            seeds: 10,
        }
    }
}

impl EvalSection {
    pub fn task_specs(&self) -> Result<Vec<TaskSpec>> {
        self.tasks
            .iter()
            .map(|n| TaskSpec::by_name(n).ok_or_else(|| Error::Config(format!("unknown task `{n}`"))))
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub alternate: AlternateSection,
    pub eval: EvalSection,
}

impl RunConfig {
    /// Reads an optional TOML file, then applies `section.key=value`
    /// overrides. Values parse as TOML, falling back to a bare string.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.eval.task_specs()?;
        if self.eval.seeds == 0 {
            return Err(Error::Config("eval.seeds must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let bad = || Error::Config(format!("override `{spec}` is not section.key=value"));
    let (key, raw) = spec.split_once('=').ok_or_else(bad)?;
    let (section, field) = key.trim().split_once('.').ok_or_else(bad)?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let sec = entry
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("`{section}` is not a section")))?;
    sec.insert(field.to_string(), value);
    Ok(())
}
