//! Scenario files.
//!
//! A scenario is a TOML document with four tables, all optional except
//! `[protocol]`:
//!
//! ```toml
//! [protocol]            # ProtocolParams; tau sets all three vote thresholds
//! n_users = 4
//! committee_size = 4
//! tau = 3
//! lambda_propose = "2"  # durations are exact rationals: "2", "1/2", "0.25"
//! lambda_step = "4"
//! delivery_bound = "1"
//! seed = 1
//! n_values = 2
//!
//! [adversary]
//! plan = [3]                        # users the adversary may corrupt
//! policy = "random_byzantine"       # benign | partition_and_replay | random_byzantine
//! aggressiveness = 0.5
//! latency_menu = ["0", "1/2", "1"]  # default {0, δ/2, δ}
//! partition_windows = [["3", "15"]]
//! victims = [0, 1]                  # partition_and_replay only
//!
//! [run]
//! seed = 7              # policy seed
//! max_rounds = 3
//! max_labels = 20000
//! max_period = 3        # also the honesty-check horizon
//! snapshot_every = 0
//! out = "trace.jsonl"
//! report = "report.txt"
//!
//! [explore]             # see ExploreConfig
//! round_goal = 1
//! max_period = 1
//! max_step = 4
//! latency_menu = ["0", "1"]
//! counterexample_out = "cex.jsonl"
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{
    default_latency_menu, policy_benign, policy_partition_and_replay, policy_random_byzantine,
    BadWindow, Policy, RunLimits,
};
use crate::explorer::ExploreConfig;
use crate::sortition::{check_committee_honesty, HonestyViolation, Horizon};
use crate::time::Time;
use crate::transition::Model;
use crate::types::{
    validate_params, ParamError, Period, ProtocolParams, Round, UserId, STEP_FIRST_NEXT,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid scenario")]
    Syntax(#[from] toml::de::Error),
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error("corruption plan rejected")]
    Honesty(#[from] HonestyViolation),
    #[error("corruption plan names user {0}, but there are only {1} users")]
    UnknownUser(UserId, u32),
    #[error("unknown policy {0:?} (expected benign, partition_and_replay or random_byzantine)")]
    UnknownPolicy(String),
    #[error(transparent)]
    Window(#[from] BadWindow),
    #[error("partition_and_replay needs exactly one partition window")]
    NeedsOneWindow,
    #[error("aggressiveness must lie in [0, 1], got {0}")]
    Aggressiveness(f64),
    #[error("latency menu must be nonempty and nonnegative")]
    BadMenu,
}

/// `[protocol]`: the parameter record, with an optional `tau` shorthand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSection {
    pub n_users: u32,
    pub committee_size: u32,
    #[serde(default)]
    pub tau: Option<u32>,
    #[serde(default)]
    pub tau_propose: Option<u32>,
    #[serde(default)]
    pub tau_soft: Option<u32>,
    #[serde(default)]
    pub tau_cert: Option<u32>,
    #[serde(default)]
    pub tau_next: Option<u32>,
    #[serde(default)]
    pub lambda_propose: Option<Time>,
    #[serde(default)]
    pub lambda_step: Option<Time>,
    #[serde(default)]
    pub delivery_bound: Option<Time>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub n_values: Option<u32>,
}

impl ProtocolSection {
    /// Fills unset fields from [`ProtocolParams::with_committee`]; no validation.
    pub fn params(&self) -> ProtocolParams {
        let mut p =
            ProtocolParams::with_committee(self.n_users, self.committee_size).with_seed(self.seed);
        if let Some(t) = self.tau {
            p = p.with_tau(t);
        }
        let set = |slot: &mut u32, v: Option<u32>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut p.tau_propose, self.tau_propose);
        set(&mut p.tau_soft, self.tau_soft);
        set(&mut p.tau_cert, self.tau_cert);
        set(&mut p.tau_next, self.tau_next);
        set(&mut p.n_values, self.n_values);
        p.lambda_propose = self.lambda_propose.unwrap_or(p.lambda_propose);
        p.lambda_step = self.lambda_step.unwrap_or(p.lambda_step);
        p.delivery_bound = self.delivery_bound.unwrap_or(p.delivery_bound);
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Benign,
    PartitionAndReplay,
    RandomByzantine,
}

impl std::str::FromStr for PolicyKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "benign" => Ok(PolicyKind::Benign),
            "partition_and_replay" => Ok(PolicyKind::PartitionAndReplay),
            "random_byzantine" => Ok(PolicyKind::RandomByzantine),
            other => Err(ConfigError::UnknownPolicy(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversarySection {
    pub plan: Vec<u32>,
    pub policy: PolicyKind,
    pub aggressiveness: f64,
    /// Defaults to `{0, δ/2, δ}`.
    pub latency_menu: Option<Vec<Time>>,
    pub partition_windows: Vec<(Time, Time)>,
    pub victims: Option<Vec<u32>>,
}

impl Default for AdversarySection {
    fn default() -> Self {
        AdversarySection {
            plan: Vec::new(),
            policy: PolicyKind::Benign,
            aggressiveness: 0.5,
            latency_menu: None,
            partition_windows: Vec::new(),
            victims: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub max_rounds: Round,
    pub max_labels: usize,
    /// Runs stop once an honest user passes this period. It is also the
    /// period horizon of the committee honesty check.
    pub max_period: Period,
    /// Full state snapshot every this many steps in trace files (0: none).
    pub snapshot_every: usize,
    pub out: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            max_rounds: 3,
            max_labels: 20_000,
            max_period: 3,
            snapshot_every: 0,
            out: None,
            report: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExploreSection {
    #[serde(flatten)]
    pub cfg: ExploreConfig,
    pub counterexample_out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub protocol: ProtocolSection,
    #[serde(default)]
    pub adversary: AdversarySection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub explore: ExploreSection,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario configs are representable in TOML")
    }

    pub fn plan(&self) -> BTreeSet<UserId> {
        self.adversary.plan.iter().map(|&u| UserId(u)).collect()
    }

    /// Horizon of the committee honesty check for runs.
    pub fn run_horizon(&self) -> Horizon {
        Horizon {
            max_round: self.run.max_rounds,
            max_period: self.run.max_period,
            max_step: STEP_FIRST_NEXT,
        }
    }

    pub fn run_limits(&self) -> RunLimits {
        RunLimits {
            max_rounds: self.run.max_rounds,
            max_labels: self.run.max_labels,
            max_period: self.run.max_period,
        }
    }

    /// Validated parameters and plan; the honesty check uses `horizon`.
    pub fn model_within(&self, horizon: Horizon) -> Result<Model, ConfigError> {
        let params = validate_params(self.protocol.params())?;
        let plan = self.plan();
        if let Some(&u) = plan.iter().find(|u| u.0 >= params.n_users) {
            return Err(ConfigError::UnknownUser(u, params.n_users));
        }
        check_committee_honesty(&params, &plan, horizon)?;
        Ok(Model::new(params, plan))
    }

    /// Model for exploration. The explorer checks committee honesty over its
    /// own horizon; `[explore] unchecked = true` also skips parameter
    /// validation, for deliberately weakened configurations.
    pub fn explore_model(&self) -> Result<Model, ConfigError> {
        let mut params = self.protocol.params();
        if !self.explore.cfg.unchecked {
            params = validate_params(params)?;
        }
        let plan = self.plan();
        if let Some(&u) = plan.iter().find(|u| u.0 >= params.n_users) {
            return Err(ConfigError::UnknownUser(u, params.n_users));
        }
        Ok(Model::new(params, plan))
    }

    pub fn model(&self) -> Result<Model, ConfigError> {
        self.model_within(self.run_horizon())
    }

    pub fn latency_menu(&self, params: &ProtocolParams) -> Result<Vec<Time>, ConfigError> {
        let menu = self
            .adversary
            .latency_menu
            .clone()
            .unwrap_or_else(|| default_latency_menu(params.delivery_bound));
        if menu.is_empty() || menu.iter().any(|t| t.is_negative()) {
            return Err(ConfigError::BadMenu);
        }
        Ok(menu)
    }

    /// The configured policy, seeded with `seed`.
    pub fn policy(
        &self,
        params: &ProtocolParams,
        seed: u64,
    ) -> Result<Box<dyn Policy + Send>, ConfigError> {
        let menu = self.latency_menu(params)?;
        let a = &self.adversary;
        Ok(match a.policy {
            PolicyKind::Benign => Box::new(policy_benign(seed, menu)),
            PolicyKind::PartitionAndReplay => {
                let [window] = a.partition_windows[..] else {
                    return Err(ConfigError::NeedsOneWindow);
                };
                let mut p = policy_partition_and_replay(seed, window, menu)?;
                if let Some(v) = &a.victims {
                    p = p.with_victims(v.iter().map(|&u| UserId(u)));
                }
                Box::new(p)
            }
            PolicyKind::RandomByzantine => {
                if !(0.0..=1.0).contains(&a.aggressiveness) {
                    return Err(ConfigError::Aggressiveness(a.aggressiveness));
                }
                for &(s, e) in &a.partition_windows {
                    if s >= e {
                        return Err(BadWindow(s, e).into());
                    }
                }
                Box::new(
                    policy_random_byzantine(seed, a.aggressiveness, menu)
                        .with_windows(a.partition_windows.clone())
                        .with_max_period(self.run.max_period),
                )
            }
        })
    }

    pub fn explore_config(&self) -> ExploreConfig {
        self.explore.cfg.clone()
    }

    /// Validates everything a run or exploration would check up front.
    pub fn validate(&self) -> Result<Model, ConfigError> {
        let model = self.model()?;
        self.policy(&model.params, self.run.seed)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = r#"
[protocol]
n_users = 4
committee_size = 4
tau = 3
seed = 2

[adversary]
plan = [3]
policy = "random_byzantine"
aggressiveness = 0.4
partition_windows = [["3", "15"]]

[run]
seed = 9
max_rounds = 2
"#;

    #[test]
    fn parses_and_validates() {
        let c = ScenarioConfig::from_toml(BASIC).unwrap();
        let m = c.validate().unwrap();
        assert_eq!(m.params.tau_cert, 3);
        assert_eq!(
            c.adversary.partition_windows,
            vec![(Time::from_int(3), Time::from_int(15))]
        );
        assert_eq!(c.run.max_labels, 20_000);
    }

    #[test]
    fn round_trips_through_toml() {
        let c = ScenarioConfig::from_toml(BASIC).unwrap();
        assert_eq!(ScenarioConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_threshold() {
        let text = BASIC.replace("tau = 3", "tau = 2");
        assert!(matches!(
            ScenarioConfig::from_toml(&text).unwrap().validate(),
            Err(ConfigError::Params(ParamError::QuorumOverlap { .. }))
        ));
    }

    #[test]
    fn rejects_unknown_keys_and_policies() {
        assert!(ScenarioConfig::from_toml(&BASIC.replace("seed = 9", "sed = 9")).is_err());
        assert!(
            ScenarioConfig::from_toml(&BASIC.replace("\"random_byzantine\"", "\"chaos\"")).is_err()
        );
    }

    #[test]
    fn rejects_dishonest_plan() {
        let text = BASIC.replace("plan = [3]", "plan = [2, 3]");
        assert!(matches!(
            ScenarioConfig::from_toml(&text).unwrap().validate(),
            Err(ConfigError::Honesty(_))
        ));
    }

    #[test]
    fn explore_table_overrides_defaults() {
        let text = format!("{BASIC}\n[explore]\nmax_period = 2\npartitions = true\ncounterexample_out = \"c.jsonl\"\n");
        let c = ScenarioConfig::from_toml(&text).unwrap();
        let e = c.explore_config();
        assert_eq!(e.max_period, 2);
        assert!(e.partitions);
        assert_eq!(
            c.explore.counterexample_out.as_deref(),
            Some(Path::new("c.jsonl"))
        );
    }
}
