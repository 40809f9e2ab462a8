use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::optimizers::{Algorithm, OptimizerConfig, DEFAULT_BETA, DEFAULT_NU, DEFAULT_RANK};
use crate::problems::{ProblemKind, ProblemSpec};
use crate::rng::{SamplerKind, Seed};

/// How `lr` maps onto the step size `α` of the update `X ← X − α · estimate`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum LrConvention {
    /// `lr` is `α`.
    #[default]
    Alpha,
    /// `lr` is `α / r`, the subspace inner step size.
    Subspace,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_epsilon() -> f64 {
    crate::estimators::DEFAULT_EPSILON
}
fn default_nu() -> u64 {
    DEFAULT_NU
}
fn default_ranks() -> Vec<usize> {
    vec![DEFAULT_RANK]
}
fn default_beta() -> f64 {
    DEFAULT_BETA
}
fn default_steps() -> u64 {
    1000
}
fn default_eval_every() -> u64 {
    1
}
fn default_output() -> String {
    "run.csv".to_string()
}

/// Optimizer section of the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSettings {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub lr_convention: LrConvention,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_nu")]
    pub nu: u64,
    #[serde(default = "default_ranks")]
    pub ranks: Vec<usize>,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_steps")]
    pub steps: u64,
    #[serde(default)]
    pub seed: Seed,
    #[serde(default)]
    pub sampler: SamplerKind,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        serde_json::from_value(Value::Object(Map::new())).expect("all fields have defaults")
    }
}

impl OptimizerSettings {
    pub fn to_config(&self) -> Result<OptimizerConfig> {
        let alpha = match self.lr_convention {
            LrConvention::Alpha => self.lr,
            LrConvention::Subspace => match self.ranks.as_slice() {
                [r] => self.lr * *r as f64,
                _ => {
                    return Err(Error::Config(
                        "lr_convention \"subspace\" needs a single rank for all layers".into(),
                    ))
                }
            },
        };
        let config = OptimizerConfig {
            alpha,
            epsilon: self.epsilon,
            nu: self.nu,
            ranks: self.ranks.clone(),
            beta: self.beta,
            total_steps: self.steps,
            base_seed: self.seed,
            v_kind: self.sampler,
        };
        config.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(config)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub problem: ProblemSpec,
    pub algo: Algorithm,
    #[serde(default)]
    pub optimizer: OptimizerSettings,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default = "default_output")]
    pub output_path: String,
    /// Fill the `wall_ms` column. Off by default so outputs are reproducible.
    #[serde(default)]
    pub record_timing: bool,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.problem.validate()?;
        self.optimizer_config()?;
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if self.output_path.is_empty() {
            return Err(Error::Config("output_path must not be empty".into()));
        }
        Ok(())
    }

    pub fn optimizer_config(&self) -> Result<OptimizerConfig> {
        self.optimizer.to_config()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Command-line overrides for a config file. Every flag is optional.
#[derive(Args, Clone, Debug, Default, PartialEq)]
pub struct ConfigOverrides {
    /// Algorithm: zo-sgd, lozo or lozo-m.
    #[arg(long)]
    pub algo: Option<String>,
    /// Rank r for every layer.
    #[arg(long)]
    pub rank: Option<usize>,
    /// Resampling interval for V.
    #[arg(long)]
    pub nu: Option<u64>,
    /// Perturbation scale.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Learning rate; see --lr-convention.
    #[arg(long)]
    pub lr: Option<f64>,
    /// `alpha`: lr is the step size α. `subspace`: lr is α/r.
    #[arg(long, value_enum)]
    pub lr_convention: Option<LrConvention>,
    /// Momentum coefficient (lozo-m).
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Distribution of V: normal, haar or coordinate.
    #[arg(long)]
    pub sampler: Option<String>,
    /// Problem kind: quadratic, planted-low-rank, logistic or tiny-mlp.
    #[arg(long)]
    pub problem: Option<String>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<u64>,
    /// Output CSV path; the summary goes next to it as <stem>.summary.json.
    #[arg(long)]
    pub out: Option<String>,
    /// Record wall-clock time per row.
    #[arg(long)]
    pub timing: bool,
}

fn section<'a>(root: &'a mut Map<String, Value>, key: &str) -> Result<&'a mut Map<String, Value>> {
    root.entry(key)
        .or_insert_with(|| Value::Object(Map::new()))
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("`{key}` must be an object")))
}

fn finite_flag(flag: &str, v: f64) -> Result<Value> {
    serde_json::Number::from_f64(v)
        .map(Value::Number)
        .ok_or_else(|| Error::Config(format!("--{flag}: {v} is not a finite number")))
}

/// Parses a config from optional JSON text, then applies flag overrides.
pub fn parse_config(text: Option<&str>, flags: &ConfigOverrides) -> Result<ExperimentConfig> {
    let mut root = match text {
        Some(t) => match serde_json::from_str::<Value>(t) {
            Ok(Value::Object(m)) => m,
            Ok(_) => return Err(Error::Config("config must be a JSON object".into())),
            Err(e) => return Err(Error::Config(format!("malformed config: {e}"))),
        },
        None => Map::new(),
    };

    if let Some(a) = &flags.algo {
        let algo = Algorithm::parse(a)
            .ok_or_else(|| Error::Config(format!("--algo: unknown algorithm `{a}`")))?;
        root.insert("algo".into(), Value::String(algo.name().into()));
    }
    if let Some(v) = flags.eval_every {
        root.insert("eval_every".into(), v.into());
    }
    if let Some(v) = &flags.out {
        root.insert("output_path".into(), Value::String(v.clone()));
    }
    if flags.timing {
        root.insert("record_timing".into(), Value::Bool(true));
    }

    let opt = section(&mut root, "optimizer")?;
    if let Some(v) = flags.rank {
        opt.insert("ranks".into(), Value::Array(vec![v.into()]));
    }
    if let Some(v) = flags.nu {
        if v == 0 {
            return Err(Error::Config("--nu: must be at least 1".into()));
        }
        opt.insert("nu".into(), v.into());
    }
    if let Some(v) = flags.eps {
        opt.insert("epsilon".into(), finite_flag("eps", v)?);
    }
    if let Some(v) = flags.lr {
        opt.insert("lr".into(), finite_flag("lr", v)?);
    }
    if let Some(v) = flags.lr_convention {
        opt.insert("lr_convention".into(), serde_json::to_value(v).expect("enum serializes"));
    }
    if let Some(v) = flags.beta {
        opt.insert("beta".into(), finite_flag("beta", v)?);
    }
    if let Some(v) = flags.steps {
        opt.insert("steps".into(), v.into());
    }
    if let Some(v) = flags.seed {
        opt.insert("seed".into(), v.into());
    }
    if let Some(s) = &flags.sampler {
        let kind = SamplerKind::parse(s)
            .ok_or_else(|| Error::Config(format!("--sampler: unknown sampler `{s}`")))?;
        opt.insert("sampler".into(), Value::String(kind.name().into()));
    }

    let prob = section(&mut root, "problem")?;
    if let Some(p) = &flags.problem {
        let kind: ProblemKind = serde_json::from_value(Value::String(p.clone()))
            .map_err(|_| Error::Config(format!("--problem: unknown problem `{p}`")))?;
        prob.insert("kind".into(), serde_json::to_value(kind).expect("enum serializes"));
    }
    if let Some(v) = flags.data_seed {
        prob.insert("data_seed".into(), v.into());
    }

    if !root.contains_key("algo") {
        return Err(Error::Config("missing required key `algo`".into()));
    }
    let config: ExperimentConfig = match serde_json::from_value(Value::Object(root)) {
        Ok(c) => c,
        Err(e) => {
            // Re-parse the file text alone to report a line and column.
            if let Some(Err(located)) = text.map(serde_json::from_str::<ExperimentConfig>) {
                if !located.to_string().starts_with("missing field") {
                    return Err(Error::Config(located.to_string()));
                }
            }
            return Err(Error::Config(e.to_string()));
        }
    };
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::Parser;

    #[derive(Parser)]
    struct Cli {
        #[command(flatten)]
        flags: ConfigOverrides,
    }

    fn flags(args: &[&str]) -> ConfigOverrides {
        Cli::try_parse_from(std::iter::once("lozo").chain(args.iter().copied()))
            .unwrap()
            .flags
    }

    #[test]
    fn flags_only() {
        let f = flags(&[
            "--algo", "lozo", "--rank", "2", "--nu", "50", "--eps", "1e-3", "--lr", "1e-3", "--steps",
            "1000", "--seed", "42",
        ]);
        let c = parse_config(None, &f).unwrap();
        assert_eq!(c.algo, Algorithm::Lozo);
        let o = c.optimizer_config().unwrap();
        assert_eq!(o.ranks, vec![2]);
        assert_eq!(o.nu, 50);
        assert_eq!(o.epsilon, 1e-3);
        assert_eq!(o.alpha, 1e-3);
        assert_eq!(o.total_steps, 1000);
        assert_eq!(o.base_seed, Seed(42));
    }

    #[test]
    fn nu_zero_rejected() {
        let err = parse_config(None, &flags(&["--algo", "lozo", "--nu", "0"])).unwrap_err();
        assert!(err.to_string().contains("nu"), "{err}");
        let err = parse_config(Some(r#"{"algo":"lozo","optimizer":{"nu":0}}"#), &ConfigOverrides::default())
            .unwrap_err();
        assert!(err.to_string().contains("nu"), "{err}");
    }

    #[test]
    fn flags_override_file() {
        let text = r#"{"algo":"zo-sgd","optimizer":{"lr":0.5,"steps":3}}"#;
        let c = parse_config(Some(text), &flags(&["--algo", "lozo-m", "--steps", "7"])).unwrap();
        assert_eq!(c.algo, Algorithm::LozoM);
        assert_eq!(c.optimizer.steps, 7);
        assert_eq!(c.optimizer.lr, 0.5);
    }

    #[test]
    fn round_trip() {
        let c = parse_config(
            None,
            &flags(&["--algo", "lozo", "--sampler", "haar", "--problem", "quadratic", "--beta", "0.5"]),
        )
        .unwrap();
        let again = parse_config(Some(&c.to_json()), &ConfigOverrides::default()).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn errors_name_the_key() {
        let none = ConfigOverrides::default();
        let err = parse_config(Some(r#"{"algo":"lozo","optimzer":{}}"#), &none).unwrap_err();
        assert!(err.to_string().contains("optimzer"), "{err}");
        let err = parse_config(Some(r#"{"algo":"lozo","optimizer":{"rnak":2}}"#), &none).unwrap_err();
        assert!(err.to_string().contains("rnak"), "{err}");
        let err = parse_config(Some(r#"{"optimizer":{}}"#), &none).unwrap_err();
        assert!(err.to_string().contains("algo"), "{err}");
        let err = parse_config(Some("{\n  \"algo\": \"lozo\",\n  \"eval_every\": \"x\"\n}"), &none).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        let err = parse_config(None, &flags(&["--algo", "adam"])).unwrap_err();
        assert!(err.to_string().contains("--algo"), "{err}");
    }

    #[test]
    fn subspace_convention_scales_by_rank() {
        let c = parse_config(
            None,
            &flags(&["--algo", "lozo", "--lr", "0.01", "--rank", "4", "--lr-convention", "subspace"]),
        )
        .unwrap();
        assert_eq!(c.optimizer_config().unwrap().alpha, 0.04);
    }
}
