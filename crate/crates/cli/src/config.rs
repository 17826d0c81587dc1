//! Experiment flags and their merge into the config file table.

use std::path::{Path, PathBuf};

use clap::Args;
use qdistill::experiment::{validate_config_table, ExperimentConfig};
use toml::{Table, Value};

/// Environment variable consulted when neither a flag nor the config file
/// sets the data root.
pub const DATA_ROOT_ENV: &str = "QDISTILL_DATA_ROOT";

#[derive(Debug, Clone, Default, Args)]
pub struct ExperimentArgs {
    /// TOML experiment config; flags override its values.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// mnist, fashionmnist or cifar10.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Dataset directory [env: QDISTILL_DATA_ROOT, used when unset elsewhere].
    #[arg(long, value_name = "DIR")]
    pub data_root: Option<PathBuf>,
    /// Qubit count.
    #[arg(long)]
    pub qubits: Option<usize>,
    /// Circuit layers.
    #[arg(long)]
    pub layers: Option<usize>,
    /// amplitude, angle[-x|-y|-z] or qubit.
    #[arg(long)]
    pub encoding: Option<String>,
    /// fc, pca, avgpool, maxpool or crop.
    #[arg(long)]
    pub reducer: Option<String>,
    /// Hidden width of the fc reducer.
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    /// linear or basis-probs.
    #[arg(long)]
    pub readout: Option<String>,
    /// lenet, alexnet, alexnet/N, logits:PATH or none.
    #[arg(long)]
    pub teacher: Option<String>,
    /// Softmax temperature.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Distillation weight in [0, 1].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Student epoch limit.
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Teacher epoch limit.
    #[arg(long)]
    pub teacher_max_epochs: Option<usize>,
    /// Early-stopping patience in epochs.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Minibatch size.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',', num_args = 1.., action = clap::ArgAction::Set, overrides_with = "seeds")]
    pub seeds: Option<Vec<u64>>,
    /// Training samples per class.
    #[arg(long)]
    pub per_class: Option<usize>,
    /// Test samples per class.
    #[arg(long)]
    pub test_per_class: Option<usize>,
    /// Teacher training samples per class.
    #[arg(long)]
    pub teacher_per_class: Option<usize>,
    /// Seed for subsets, splits and teacher training.
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// per-channel or per-feature.
    #[arg(long)]
    pub normalization: Option<String>,
    /// Shots per test evaluation; 0 evaluates analytically.
    #[arg(long)]
    pub shots: Option<usize>,
    /// Skip the alpha = 0 baseline arm.
    #[arg(long)]
    pub no_baseline: bool,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

fn int(v: impl TryInto<i64>) -> Value {
    Value::Integer(v.try_into().unwrap_or(i64::MAX))
}

fn path(p: &Path) -> Value {
    Value::String(p.to_string_lossy().into_owned())
}

impl ExperimentArgs {
    /// Config file table with flag values written over it.
    pub fn merged_table(&self) -> Result<Table, Vec<String>> {
        let mut table = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| vec![format!("config {}: {e}", p.display())])?;
                toml::from_str(&text).map_err(|e| vec![format!("config {}: {e}", p.display())])?
            }
            None => Table::new(),
        };
        let mut set = |key: &str, v: Option<Value>| {
            if let Some(v) = v {
                table.insert(key.to_string(), v);
            }
        };
        let s = |v: &Option<String>| v.clone().map(Value::String);
        set("dataset", s(&self.dataset));
        set("data_root", self.data_root.as_deref().map(path));
        set("qubits", self.qubits.map(int));
        set("layers", self.layers.map(int));
        set("encoding", s(&self.encoding));
        set("reducer", s(&self.reducer));
        set("hidden_dim", self.hidden_dim.map(int));
        set("readout", s(&self.readout));
        set("teacher", s(&self.teacher));
        set("tau", self.tau.map(Value::Float));
        set("alpha", self.alpha.map(Value::Float));
        set("lr", self.lr.map(Value::Float));
        set("max_epochs", self.max_epochs.map(int));
        set("teacher_max_epochs", self.teacher_max_epochs.map(int));
        set("patience", self.patience.map(int));
        set("batch_size", self.batch_size.map(int));
        set(
            "seeds",
            self.seeds
                .as_ref()
                .map(|v| Value::Array(v.iter().map(|&s| int(s)).collect())),
        );
        set("per_class", self.per_class.map(int));
        set("test_per_class", self.test_per_class.map(int));
        set("teacher_per_class", self.teacher_per_class.map(int));
        set("data_seed", self.data_seed.map(int));
        set("normalization", s(&self.normalization));
        set("shots", self.shots.map(int));
        set(
            "baseline",
            self.no_baseline.then_some(Value::Boolean(false)),
        );
        set("output", self.out.as_deref().map(path));
        if !table.contains_key("data_root") {
            if let Some(root) = std::env::var_os(DATA_ROOT_ENV) {
                table.insert("data_root".into(), path(Path::new(&root)));
            }
        }
        Ok(table)
    }

    /// Validated config, with `adjust` applied to the merged table first.
    pub fn resolve_with(
        &self,
        adjust: impl FnOnce(&mut Table),
    ) -> Result<ExperimentConfig, Vec<String>> {
        let mut table = self.merged_table()?;
        adjust(&mut table);
        validate_config_table(table)
    }

    pub fn resolve(&self) -> Result<ExperimentConfig, Vec<String>> {
        self.resolve_with(|_| {})
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("exp.toml");
        std::fs::write(&file, "data_root = \"/data\"\ntau = 5.0\nqubits = 8\n").unwrap();
        let args = ExperimentArgs {
            config: Some(file),
            tau: Some(1.0),
            seeds: Some(vec![3, 4]),
            no_baseline: true,
            ..Default::default()
        };
        let cfg = args.resolve().unwrap();
        assert_eq!((cfg.tau, cfg.qubits, cfg.baseline), (1.0, 8, false));
        assert_eq!(cfg.seeds, [3, 4]);
        assert_eq!(cfg.data_root, PathBuf::from("/data"));
    }

    #[test]
    fn missing_config_file_is_a_validation_error() {
        let args = ExperimentArgs {
            config: Some(PathBuf::from("/nonexistent/exp.toml")),
            ..Default::default()
        };
        let errs = args.resolve().unwrap_err();
        assert!(errs[0].contains("/nonexistent/exp.toml"));
    }
}
