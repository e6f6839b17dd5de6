use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::DEFAULT_MAPPING_THRESHOLD;
use crate::encoder::Variant;
use crate::error::{Error, Result};
use crate::eval::DEFAULT_EVAL_DEPTH;

/// Per-dataset downsampling cap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "CapRepr", into = "CapRepr")]
pub enum Cap {
    Limit(usize),
    /// The size of the largest uncapped dataset in the run.
    Auto,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum CapRepr {
    Limit(usize),
    Named(String),
}

impl TryFrom<CapRepr> for Cap {
    type Error = String;

    fn try_from(r: CapRepr) -> std::result::Result<Self, String> {
        match r {
            CapRepr::Limit(n) => Ok(Cap::Limit(n)),
            CapRepr::Named(s) if s == "auto" => Ok(Cap::Auto),
            CapRepr::Named(s) => Err(format!("cap must be a count or \"auto\", got `{s}`")),
        }
    }
}

impl From<Cap> for CapRepr {
    fn from(c: Cap) -> Self {
        match c {
            Cap::Limit(n) => CapRepr::Limit(n),
            Cap::Auto => CapRepr::Named("auto".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub id: String,
    #[serde(default)]
    pub cap: Option<Cap>,
}

impl DatasetSpec {
    pub fn new(id: &str) -> Self {
        DatasetSpec {
            id: id.to_string(),
            cap: None,
        }
    }

    pub fn capped(id: &str, cap: Cap) -> Self {
        DatasetSpec {
            id: id.to_string(),
            cap: Some(cap),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Toy-encoder scale: small batches, a high learning rate, per-epoch eval.
    Desk,
    Paper,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(Error::invalid(format!(
                "unknown profile `{s}` (expected desk or paper)"
            ))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub datasets: Vec<DatasetSpec>,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// `None`: 10% of the total step count.
    pub warmup_steps: Option<usize>,
    pub dropout: f64,
    /// Steps between validation passes; `None`: once per epoch.
    pub eval_interval: Option<usize>,
    pub seed: u64,
    pub variant: Variant,
    pub few_shot_size: Option<usize>,
    pub dim: usize,
    pub vocab_size: usize,
    pub mapping_threshold: f64,
    /// Passages retrieved per validation query.
    pub eval_depth: usize,
}

impl TrainConfig {
    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => TrainConfig {
                datasets: Vec::new(),
                batch_size: 16,
                epochs: 30,
                lr: 1e-2,
                warmup_steps: None,
                dropout: 0.1,
                eval_interval: None,
                seed: 0,
                variant: Variant::Shared,
                few_shot_size: None,
                dim: 128,
                vocab_size: 16_384,
                mapping_threshold: DEFAULT_MAPPING_THRESHOLD,
                eval_depth: DEFAULT_EVAL_DEPTH,
            },
            Profile::Paper => TrainConfig {
                datasets: Vec::new(),
                batch_size: 128,
                epochs: 80,
                lr: 2e-5,
                warmup_steps: None,
                dropout: 0.1,
                eval_interval: Some(500),
                seed: 0,
                variant: Variant::Shared,
                few_shot_size: None,
                dim: 768,
                vocab_size: 30_522,
                mapping_threshold: DEFAULT_MAPPING_THRESHOLD,
                eval_depth: DEFAULT_EVAL_DEPTH,
            },
        }
    }

    /// Overlay a JSON object onto a profile; unknown keys are rejected.
    pub fn from_json(text: &str, profile: Profile) -> Result<Self> {
        let overlay: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        let Value::Object(overlay) = overlay else {
            return Err(Error::invalid("train config must be a JSON object"));
        };
        let mut base = serde_json::to_value(Self::profile(profile)).expect("config serializes");
        let fields = base.as_object_mut().expect("config is an object");
        for (k, v) in overlay {
            fields.insert(k, v);
        }
        let config: TrainConfig = serde_json::from_value(base).map_err(|e| Error::Parse {
            line: 0,
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, profile: Profile) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, profile)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            return Err(Error::invalid("config lists no datasets"));
        }
        let mut seen = BTreeSet::new();
        for d in &self.datasets {
            if !seen.insert(d.id.as_str()) {
                return Err(Error::DuplicateId(d.id.clone()));
            }
            if d.cap == Some(Cap::Limit(0)) {
                return Err(Error::invalid(format!("cap for `{}` must be positive", d.id)));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be at least 2"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid("lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        if self.eval_interval == Some(0) {
            return Err(Error::invalid("eval_interval must be positive"));
        }
        if self.few_shot_size == Some(0) {
            return Err(Error::invalid("few_shot_size must be positive"));
        }
        if self.dim < 2 || self.vocab_size == 0 {
            return Err(Error::invalid("dim must be >= 2 and vocab_size >= 1"));
        }
        if !(0.0..=1.0).contains(&self.mapping_threshold) {
            return Err(Error::invalid("mapping_threshold must lie in [0, 1]"));
        }
        if self.eval_depth == 0 {
            return Err(Error::invalid("eval_depth must be positive"));
        }
        Ok(())
    }

    pub fn dataset_ids(&self) -> Vec<&str> {
        self.datasets.iter().map(|d| d.id.as_str()).collect()
    }
}

/// The same hyperparameters over every dataset except `held_out`.
pub fn make_leave_one_out_plan(config: &TrainConfig, held_out: &str) -> Result<TrainConfig> {
    if !config.datasets.iter().any(|d| d.id == held_out) {
        return Err(Error::invalid(format!(
            "held-out dataset `{held_out}` is not in the config"
        )));
    }
    let mut plan = config.clone();
    plan.datasets.retain(|d| d.id != held_out);
    if plan.datasets.is_empty() {
        return Err(Error::invalid(
            "holding out the only dataset leaves nothing to train on",
        ));
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_and_unknown_keys() {
        let c = TrainConfig::from_json(
            r#"{"datasets":[{"id":"a","cap":10},{"id":"b","cap":"auto"}],"seed":7}"#,
            Profile::Desk,
        )
        .unwrap();
        assert_eq!(c.batch_size, 16);
        assert_eq!(c.seed, 7);
        assert_eq!(c.datasets[0].cap, Some(Cap::Limit(10)));
        assert_eq!(c.datasets[1].cap, Some(Cap::Auto));
        let back = TrainConfig::from_json(&c.to_json(), Profile::Paper).unwrap();
        assert_eq!(back, c);

        let paper = TrainConfig::from_json(r#"{"datasets":[{"id":"a"}]}"#, Profile::Paper).unwrap();
        assert_eq!((paper.batch_size, paper.lr, paper.epochs), (128, 2e-5, 80));

        for bad in [
            r#"{"datasets":[{"id":"a"}],"bogus":1}"#,
            r#"{"datasets":[{"id":"a","cap":0}]}"#,
            r#"{"datasets":[{"id":"a","cap":"most"}]}"#,
            r#"{"datasets":[{"id":"a"}],"batch_size":1}"#,
            r#"{"datasets":[]}"#,
            r#"[1]"#,
        ] {
            assert!(TrainConfig::from_json(bad, Profile::Desk).is_err(), "{bad}");
        }
    }

    #[test]
    fn leave_one_out_plans() {
        let ids = ["fev", "tre", "zsre", "nq", "hoppo", "tqa", "eli5", "wow"];
        let mut c = TrainConfig::profile(Profile::Desk);
        c.datasets = ids.iter().map(|i| DatasetSpec::new(i)).collect();
        let plan = make_leave_one_out_plan(&c, "nq").unwrap();
        assert_eq!(plan.datasets.len(), 7);
        assert!(!plan.dataset_ids().contains(&"nq"));
        assert_eq!((plan.lr, plan.batch_size), (c.lr, c.batch_size));
        let plans: BTreeSet<Vec<&str>> = ids
            .iter()
            .map(|h| make_leave_one_out_plan(&c, h).unwrap())
            .map(|p| {
                p.dataset_ids()
                    .into_iter()
                    .map(|s| ids.iter().find(|x| **x == s).copied().unwrap())
                    .collect()
            })
            .collect();
        assert_eq!(plans.len(), ids.len());
        assert!(make_leave_one_out_plan(&c, "nope").is_err());
    }
}
