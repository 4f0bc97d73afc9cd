//! Config assembly: file (or built-in defaults), then the output-directory
//! environment variable, then command-line flags, each addressed by its
//! dotted config key.

use std::path::{Path, PathBuf};

use clap::Args;
use serde_json::{json, Map, Value};
use vpglab_core::config::ModelSpec;
use vpglab_core::{RunConfig, ScaleSchedule};

use crate::error::{CliError, CliResult};

pub const OUTPUT_DIR_ENV: &str = "VPGLAB_OUTPUT_DIR";

/// Flags that override config keys. Each names the key it sets.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// Config file (JSON); built-in defaults when absent
    #[arg(long, short, global = true, env = "VPGLAB_CONFIG")]
    pub config: Option<PathBuf>,

    /// output_dir
    #[arg(long, global = true, env = OUTPUT_DIR_ENV)]
    pub output_dir: Option<PathBuf>,

    /// schedule, e.g. 1x1,1x2,2x2
    #[arg(long, global = true)]
    pub schedule: Option<String>,

    /// vocab
    #[arg(long, global = true)]
    pub vocab: Option<usize>,

    /// latent_dim
    #[arg(long, global = true)]
    pub latent_dim: Option<usize>,

    /// codebook.seed
    #[arg(long, global = true)]
    pub codebook_seed: Option<u64>,

    /// model.kind: tabular, count or file
    #[arg(long, global = true)]
    pub model_kind: Option<String>,

    /// model.seed (tabular)
    #[arg(long, global = true)]
    pub model_seed: Option<u64>,

    /// model.classes
    #[arg(long, global = true)]
    pub classes: Option<usize>,

    /// model.corpus (count) or model.path (file)
    #[arg(long, global = true)]
    pub model_path: Option<PathBuf>,

    /// condition
    #[arg(long, global = true)]
    pub condition: Option<u32>,

    /// guidance.cfg_scale
    #[arg(long, global = true)]
    pub cfg_scale: Option<f64>,

    /// guidance.vpg_scale
    #[arg(long, global = true)]
    pub vpg_scale: Option<f64>,

    /// guidance.corruption_fraction
    #[arg(long, global = true)]
    pub corruption_fraction: Option<f64>,

    /// guidance.variant
    #[arg(long, global = true)]
    pub variant: Option<String>,

    /// guidance.scale_mask: comma-separated zero-based scales, or "all"
    #[arg(long, global = true)]
    pub scale_mask: Option<String>,

    /// guidance.reference: corrupted or exact_marginal
    #[arg(long, global = true)]
    pub reference: Option<String>,

    /// sampler.temperature
    #[arg(long, global = true)]
    pub temperature: Option<f64>,

    /// sampler.top_k: integer or "none"
    #[arg(long, global = true)]
    pub top_k: Option<String>,

    /// sampler.top_p
    #[arg(long, global = true)]
    pub top_p: Option<f64>,

    /// sampler.seed
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// sweep.lambdas, comma-separated
    #[arg(long, global = true)]
    pub lambdas: Option<String>,

    /// sweep.fractions, comma-separated
    #[arg(long, global = true)]
    pub fractions: Option<String>,

    /// sweep.variants, comma-separated
    #[arg(long, global = true)]
    pub variants: Option<String>,

    /// sweep.replicates
    #[arg(long, global = true)]
    pub replicates: Option<usize>,

    /// sweep.base_seed
    #[arg(long, global = true)]
    pub base_seed: Option<u64>,

    /// experiment.metrics, comma-separated
    #[arg(long, global = true)]
    pub metrics: Option<String>,

    /// verify.tolerance
    #[arg(long, global = true)]
    pub tolerance: Option<f64>,

    /// verify.random_models
    #[arg(long, global = true)]
    pub random_models: Option<usize>,

    /// Any other key: dotted.key=JSON (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

fn numbers(text: &str) -> CliResult<Value> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map(|x| json!(x))
                .map_err(|_| CliError::Config(format!("'{t}' is not a number")))
        })
        .collect::<CliResult<Vec<_>>>()
        .map(Value::Array)
}

fn words(text: &str) -> Value {
    Value::Array(text.split(',').map(|t| json!(t.trim())).collect())
}

fn mask(text: &str) -> CliResult<Value> {
    if text.trim() == "all" {
        return Ok(Value::Null);
    }
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map(|k| json!(k))
                .map_err(|_| CliError::Config(format!("'{t}' is not a scale index")))
        })
        .collect::<CliResult<Vec<_>>>()
        .map(Value::Array)
}

/// Sets `dotted.key` in `doc`, creating objects on the way.
pub fn set_key(doc: &mut Value, key: &str, value: Value) -> CliResult<()> {
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            return Err(CliError::Config(format!("cannot set '{key}': '{}' is not an object", parts[..i].join("."))));
        };
        if i + 1 == parts.len() {
            map.insert((*part).to_string(), value);
            return Ok(());
        }
        node = map.entry(*part).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

fn parse_json_or_string(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|_| json!(text))
}

impl Overrides {
    fn pairs(&self) -> CliResult<Vec<(String, Value)>> {
        let mut out: Vec<(String, Value)> = Vec::new();
        let mut push = |k: &str, v: Value| out.push((k.to_string(), v));
        if let Some(v) = &self.output_dir {
            push("output_dir", json!(v));
        }
        if let Some(v) = &self.schedule {
            let schedule = ScaleSchedule::parse(v)?;
            push("schedule", serde_json::to_value(schedule).expect("schedule serialises"));
        }
        if let Some(v) = self.vocab {
            push("vocab", json!(v));
        }
        if let Some(v) = self.latent_dim {
            push("latent_dim", json!(v));
        }
        if let Some(v) = self.codebook_seed {
            push("codebook.seed", json!(v));
        }
        if let Some(v) = &self.model_kind {
            push("model.kind", json!(v));
        }
        if let Some(v) = self.model_seed {
            push("model.seed", json!(v));
        }
        if let Some(v) = self.classes {
            push("model.classes", json!(v));
        }
        if let Some(v) = self.condition {
            push("condition", json!(v));
        }
        if let Some(v) = self.cfg_scale {
            push("guidance.cfg_scale", json!(v));
        }
        if let Some(v) = self.vpg_scale {
            push("guidance.vpg_scale", json!(v));
        }
        if let Some(v) = self.corruption_fraction {
            push("guidance.corruption_fraction", json!(v));
        }
        if let Some(v) = &self.variant {
            push("guidance.variant", json!(v));
        }
        if let Some(v) = &self.scale_mask {
            push("guidance.scale_mask", mask(v)?);
        }
        if let Some(v) = &self.reference {
            push("guidance.reference", json!(v));
        }
        if let Some(v) = self.temperature {
            push("sampler.temperature", json!(v));
        }
        if let Some(v) = &self.top_k {
            let value = if v == "none" {
                Value::Null
            } else {
                json!(v
                    .parse::<usize>()
                    .map_err(|_| CliError::Config(format!("top_k '{v}' is neither an integer nor 'none'")))?)
            };
            push("sampler.top_k", value);
        }
        if let Some(v) = self.top_p {
            push("sampler.top_p", json!(v));
        }
        if let Some(v) = self.seed {
            push("sampler.seed", json!(v));
        }
        if let Some(v) = &self.lambdas {
            push("sweep.lambdas", numbers(v)?);
        }
        if let Some(v) = &self.fractions {
            push("sweep.fractions", numbers(v)?);
        }
        if let Some(v) = &self.variants {
            push("sweep.variants", words(v));
        }
        if let Some(v) = self.replicates {
            push("sweep.replicates", json!(v));
        }
        if let Some(v) = self.base_seed {
            push("sweep.base_seed", json!(v));
        }
        if let Some(v) = &self.metrics {
            push("experiment.metrics", words(v));
        }
        if let Some(v) = self.tolerance {
            push("verify.tolerance", json!(v));
        }
        if let Some(v) = self.random_models {
            push("verify.random_models", json!(v));
        }
        for item in &self.set {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got '{item}'")))?;
            push(k.trim(), parse_json_or_string(v.trim()));
        }
        Ok(out)
    }

    /// Builds the effective config.
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let mut doc = match &self.config {
            Some(path) => read_document(path)?,
            None => serde_json::to_value(RunConfig::default()).expect("config serialises"),
        };
        for (key, value) in self.pairs()? {
            if key == "model.kind" && doc.pointer("/model/kind") != Some(&value) {
                set_key(&mut doc, "model", json!({ "kind": value }))?;
                continue;
            }
            set_key(&mut doc, &key, value)?;
        }
        if let Some(path) = &self.model_path {
            let key = match doc.pointer("/model/kind").and_then(Value::as_str) {
                Some("count") => "model.corpus",
                Some("file") => "model.path",
                other => {
                    return Err(CliError::Config(format!(
                        "--model-path needs model.kind count or file, not {}",
                        other.unwrap_or("unset")
                    )))
                }
            };
            set_key(&mut doc, key, json!(path))?;
        }
        Ok(RunConfig::from_value(doc)?)
    }
}

fn read_document(path: &Path) -> CliResult<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn flatten(prefix: &str, value: &Value, out: &mut Vec<(String, String)>) {
    match value {
        Value::Object(map) if !map.is_empty() => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        _ => out.push((prefix.to_string(), value.to_string())),
    }
}

/// Every config key with its default, one per line.
pub fn config_keys_help() -> String {
    let mut keys = Vec::new();
    flatten("", &serde_json::to_value(RunConfig::default()).expect("config serialises"), &mut keys);
    let count = ModelSpec::Count {
        corpus: None,
        classes: 2,
        corpus_size: 256,
        corpus_seed: 0,
        alpha: 1.0,
        signature: Default::default(),
        embedder: Default::default(),
        include_null: true,
    };
    let mut count_keys = Vec::new();
    flatten("model", &serde_json::to_value(count).expect("model serialises"), &mut count_keys);
    let width = keys.iter().chain(&count_keys).map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut text = String::from("Config keys and defaults (JSON file, `--set key=value`, or the flags above):\n");
    for (k, v) in &keys {
        text.push_str(&format!("  {k:width$}  {v}\n"));
    }
    text.push_str("With model.kind = \"count\":\n");
    for (k, v) in count_keys.iter().filter(|(k, _)| k != "model.kind") {
        text.push_str(&format!("  {k:width$}  {v}\n"));
    }
    text.push_str("With model.kind = \"file\":\n");
    text.push_str(&format!("  {:width$}  (required)\n", "model.path"));
    text.push_str(&format!(
        "Environment: {OUTPUT_DIR_ENV} overrides output_dir; VPGLAB_CONFIG names the config file.\n\
         Exit codes: 0 ok, 1 identity failure, 2 configuration error, 3 IO error, 4 every sweep cell failed."
    ));
    text
}
