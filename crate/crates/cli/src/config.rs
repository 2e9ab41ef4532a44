//! Flat TOML training configs and data-generation specs.

use std::collections::BTreeSet;
use std::path::Path;

use anyhow::{bail, Context, Result};
use opdd_data::{desk_suite, split_dataset, Split, SyntheticSpec};
use opdd_model::TrainConfig;
use serde::Deserialize;

/// Reads a training config. An optional `profile` key (`full` or `desk`)
/// picks the defaults; every other key overrides one field.
pub fn load_train_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_train_config(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn parse_train_config(text: &str) -> Result<TrainConfig> {
    let mut overrides: toml::Table = text.parse()?;
    let base = match overrides.remove("profile") {
        None => TrainConfig::full_scale(),
        Some(toml::Value::String(p)) if p == "full" => TrainConfig::full_scale(),
        Some(toml::Value::String(p)) if p == "desk" => TrainConfig::desk(),
        Some(other) => bail!("profile must be \"full\" or \"desk\", got {other}"),
    };
    let mut table = toml::Table::try_from(&base)?;
    let known: BTreeSet<String> = table.keys().cloned().chain(["max_updates".to_string()]).collect();
    for (key, value) in overrides {
        if !known.contains(&key) {
            bail!("unknown config key '{key}'");
        }
        table.insert(key, value);
    }
    let cfg: TrainConfig = table.try_into()?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenFile {
    /// Built-in scenario set to include (`desk`).
    suite: Option<String>,
    #[serde(default)]
    seed: u64,
    /// Fraction of sequences assigned to the validation split.
    val_ratio: Option<f64>,
    #[serde(default)]
    sequence: Vec<NamedSpec>,
}

#[derive(Debug, Deserialize)]
struct NamedSpec {
    name: String,
    #[serde(flatten)]
    spec: SyntheticSpec,
}

/// Named sequence specs with their split already assigned.
pub fn load_gen_spec(path: &Path) -> Result<Vec<(String, SyntheticSpec)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_gen_spec(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn parse_gen_spec(text: &str) -> Result<Vec<(String, SyntheticSpec)>> {
    let file: GenFile = toml::from_str(text)?;
    let mut specs = match file.suite.as_deref() {
        None => Vec::new(),
        Some("desk") => desk_suite(file.seed),
        Some(other) => bail!("unknown suite '{other}' (expected desk)"),
    };
    specs.extend(file.sequence.into_iter().map(|n| (n.name, n.spec)));
    if specs.is_empty() {
        bail!("the spec lists no sequences");
    }
    let mut names = BTreeSet::new();
    for (name, spec) in &specs {
        if !names.insert(name.as_str()) {
            bail!("duplicate sequence name '{name}'");
        }
        spec.validate().with_context(|| format!("sequence '{name}'"))?;
    }
    if let Some(ratio) = file.val_ratio {
        let all: Vec<String> = specs.iter().map(|(n, _)| n.clone()).collect();
        let (_, val) = split_dataset(&all, 1.0 - ratio, file.seed)?;
        for (name, spec) in &mut specs {
            spec.split = if val.contains(name) { Split::Val } else { Split::Train };
        }
    }
    Ok(specs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use opdd_core::AnchorMode;
    use opdd_data::PathKind;
    use opdd_model::BackboneVariant;

    #[test]
    fn profiles_and_overrides() {
        assert_eq!(parse_train_config("").unwrap(), TrainConfig::full_scale());
        let cfg =
            parse_train_config("profile = \"desk\"\nlearning_rate = 0.01\nmax_updates = 5\nalpha = 0.5\n").unwrap();
        assert_eq!(cfg.model.backbone, BackboneVariant::Tiny);
        assert_eq!(cfg.learning_rate, 0.01);
        assert_eq!(cfg.max_updates, Some(5));
        assert_eq!(cfg.loss.alpha, 0.5);
        let cfg = parse_train_config("grad_clip_norm = inf\nanchor_mode = \"nuscenes\"\n").unwrap();
        assert!(cfg.grad_clip_norm.is_infinite());
        assert_eq!(cfg.model.anchor_mode, AnchorMode::Nuscenes);
    }

    #[test]
    fn bad_configs_are_rejected() {
        assert!(parse_train_config("learnin_rate = 1.0").is_err());
        assert!(parse_train_config("profile = \"huge\"").is_err());
        assert!(parse_train_config("accumulation_steps = 0").is_err());
        assert!(parse_train_config("gru_width = 256").is_err());
    }

    #[test]
    fn gen_spec_with_suite_and_split() {
        let text = r#"
            suite = "desk"
            seed = 3
            val_ratio = 0.25

            [[sequence]]
            name = "extra"
            duration = 12.0
            rate_hz = 10.0
            seed = 9
            path = { kind = "arc", radius = -60.0 }
            speed = { initial = 9.0, acceleration = 0.0 }
        "#;
        let specs = parse_gen_spec(text).unwrap();
        assert_eq!(specs.len(), 21);
        assert_eq!(specs[20].1.path, PathKind::Arc { radius: -60.0 });
        let val = specs.iter().filter(|(_, s)| s.split == Split::Val).count();
        assert_eq!(val, 5);
        let again = parse_gen_spec(text).unwrap();
        assert_eq!(specs, again);
    }

    #[test]
    fn gen_spec_errors() {
        assert!(parse_gen_spec("").is_err());
        assert!(parse_gen_spec("suite = \"tiny\"").is_err());
        let dup = r#"
            [[sequence]]
            name = "a"
            duration = 12.0
            rate_hz = 10.0
            seed = 1
            path = { kind = "straight" }
            speed = { initial = 9.0, acceleration = 0.0 }
        "#;
        assert!(parse_gen_spec(&format!("{dup}\n{dup}")).is_err());
    }
}
