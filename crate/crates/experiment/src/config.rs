//! Experiment configuration files (TOML).
//!
//! Every table is optional and falls back to defaults; unknown keys are
//! errors. Semantic validation names the offending key.

use std::path::{Path, PathBuf};

use blendnav_core::channel::{ChannelConfig, Direction};
use blendnav_core::gp::KernelParams;
use blendnav_core::interaction::{AttractionParams, CooperationParams};
use blendnav_core::planner::{InteractionParams, PlannerConfig, SessionConfig, OPERATOR_DIM};
use blendnav_core::sim::{ControlMode, Scenario, SimConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{path}: invalid value for `{key}`: {message}")]
    Invalid { path: String, key: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub mode: ControlMode,
    /// Tick budget per run (the timeout).
    pub max_ticks: u64,
    /// Seeds `0..repetitions` are run in every sweep cell.
    pub repetitions: u64,
    /// Default output directory.
    pub output: Option<PathBuf>,
    pub scenario: Scenario,
    pub planner: PlannerConfig,
    pub kernels: Kernels,
    pub interaction: Interaction,
    pub session: SessionParams,
    pub uplink: LinkParams,
    pub downlink: LinkParams,
    pub sweep: Sweep,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: ControlMode::Blended,
            max_ticks: 2000,
            repetitions: 1,
            output: None,
            scenario: Scenario::default(),
            planner: PlannerConfig::default(),
            kernels: Kernels::default(),
            interaction: Interaction::default(),
            session: SessionParams::default(),
            uplink: LinkParams::default(),
            downlink: LinkParams::default(),
            sweep: Sweep::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Kernels {
    pub operator: KernelParams,
    pub robot: KernelParams,
    pub agents: KernelParams,
}

impl Default for Kernels {
    fn default() -> Self {
        let s = SessionConfig::default();
        Self {
            operator: s.operator_kernel,
            robot: s.robot_kernel,
            agents: s.agent_kernel,
        }
    }
}

/// Interaction potential; each term can be switched off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Interaction {
    pub attraction: bool,
    /// Isotropic attraction covariance Σ = variance·I (command units²).
    pub attraction_variance: f64,
    pub cooperation: bool,
    /// α in [0, 1).
    pub cooperation_strength: f64,
    /// γ (m).
    pub cooperation_radius: f64,
}

impl Default for Interaction {
    fn default() -> Self {
        Self {
            attraction: true,
            attraction_variance: 1.0,
            cooperation: true,
            cooperation_strength: 0.99,
            cooperation_radius: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SessionParams {
    pub history_s: f64,
    pub goal_variance: f64,
    pub cruise_speed: f64,
}

impl Default for SessionParams {
    fn default() -> Self {
        let s = SessionConfig::default();
        Self {
            history_s: s.history_s,
            goal_variance: s.goal_variance,
            cruise_speed: s.cruise_speed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkParams {
    pub base_delay_s: f64,
    pub jitter_s: f64,
    #[serde(alias = "drop")]
    pub drop_probability: f64,
}

impl LinkParams {
    fn channel(&self, direction: Direction) -> ChannelConfig {
        ChannelConfig {
            base_delay: self.base_delay_s,
            delay_jitter: self.jitter_s,
            drop_probability: self.drop_probability,
            direction,
            seed: 0,
        }
    }
}

/// Which link the sweep axes impair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepLink {
    #[default]
    Uplink,
    Downlink,
    Both,
}

/// Sweep axes; an empty axis keeps the configured link value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Sweep {
    pub link: SweepLink,
    pub drop_probability: Vec<f64>,
    pub base_delay_s: Vec<f64>,
}

/// One point of the sweep grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub index: usize,
    pub drop_probability: f64,
    pub base_delay_s: f64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), (String, String)> {
        let err = |key: &str, message: String| Err((key.to_owned(), message));
        if self.repetitions < 1 {
            return err("repetitions", "must be >= 1".into());
        }
        if self.max_ticks < 1 {
            return err("max_ticks", "must be >= 1".into());
        }
        for (table, link) in [("uplink", &self.uplink), ("downlink", &self.downlink)] {
            check_link(table, link)?;
        }
        for (i, &p) in self.sweep.drop_probability.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return err(&format!("sweep.drop_probability[{i}]"), format!("must be in [0, 1], got {p}"));
            }
        }
        for (i, &d) in self.sweep.base_delay_s.iter().enumerate() {
            if !(d >= 0.0 && d.is_finite()) {
                return err(&format!("sweep.base_delay_s[{i}]"), format!("must be >= 0, got {d}"));
            }
        }
        self.scenario.validate().or_else(|e| err("scenario", e.to_string()))?;
        self.planner.validate().or_else(|e| err("planner", e.to_string()))?;
        for (name, k) in [
            ("kernels.operator", &self.kernels.operator),
            ("kernels.robot", &self.kernels.robot),
            ("kernels.agents", &self.kernels.agents),
        ] {
            k.validate().or_else(|e| err(name, e.to_string()))?;
        }
        let i = &self.interaction;
        if let Err(e) = AttractionParams::isotropic(OPERATOR_DIM, i.attraction_variance) {
            return err("interaction.attraction_variance", e.to_string());
        }
        let r = i.cooperation_radius;
        if !(r > 0.0 && r.is_finite()) {
            return err("interaction.cooperation_radius", format!("must be > 0, got {r}"));
        }
        if let Err(e) = CooperationParams::new(i.cooperation_strength, r) {
            return err("interaction.cooperation_strength", e.to_string());
        }
        for (name, v) in [
            ("session.history_s", self.session.history_s),
            ("session.goal_variance", self.session.goal_variance),
            ("session.cruise_speed", self.session.cruise_speed),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return err(name, format!("must be > 0, got {v}"));
            }
        }
        Ok(())
    }

    /// The closed-loop configuration for the configured links.
    pub fn sim_config(&self) -> SimConfig {
        let i = &self.interaction;
        let interaction = InteractionParams {
            attraction: i
                .attraction
                .then(|| AttractionParams::isotropic(OPERATOR_DIM, i.attraction_variance).expect("validated")),
            cooperation: i
                .cooperation
                .then(|| CooperationParams::new(i.cooperation_strength, i.cooperation_radius).expect("validated")),
        };
        SimConfig {
            scenario: self.scenario.clone(),
            session: SessionConfig {
                planner: self.planner.clone(),
                operator_kernel: self.kernels.operator,
                robot_kernel: self.kernels.robot,
                agent_kernel: self.kernels.agents,
                interaction,
                history_s: self.session.history_s,
                goal: self.scenario.goal,
                goal_variance: self.session.goal_variance,
                cruise_speed: self.session.cruise_speed,
                autonomy_only: self.mode == ControlMode::AutonomyOnly,
            },
            uplink: self.uplink.channel(Direction::Uplink),
            downlink: self.downlink.channel(Direction::Downlink),
            mode: self.mode,
            max_ticks: self.max_ticks,
        }
    }

    /// Drop × delay grid, drop-major. Empty axes contribute the configured
    /// value of the swept link.
    pub fn cells(&self) -> Vec<Cell> {
        let base = match self.sweep.link {
            SweepLink::Downlink => self.downlink,
            _ => self.uplink,
        };
        let or_base = |axis: &[f64], v: f64| if axis.is_empty() { vec![v] } else { axis.to_vec() };
        let drops = or_base(&self.sweep.drop_probability, base.drop_probability);
        let delays = or_base(&self.sweep.base_delay_s, base.base_delay_s);
        drops
            .iter()
            .flat_map(|&d| delays.iter().map(move |&l| (d, l)))
            .enumerate()
            .map(|(index, (drop_probability, base_delay_s))| Cell {
                index,
                drop_probability,
                base_delay_s,
            })
            .collect()
    }

    /// This configuration with the swept link(s) set to `cell`.
    pub fn for_cell(&self, cell: &Cell) -> Self {
        let mut c = self.clone();
        let apply = |l: &mut LinkParams| {
            l.drop_probability = cell.drop_probability;
            l.base_delay_s = cell.base_delay_s;
        };
        match self.sweep.link {
            SweepLink::Uplink => apply(&mut c.uplink),
            SweepLink::Downlink => apply(&mut c.downlink),
            SweepLink::Both => {
                apply(&mut c.uplink);
                apply(&mut c.downlink);
            }
        }
        c
    }

    /// The cell describing the configured links as they are.
    pub fn own_cell(&self) -> Cell {
        let l = match self.sweep.link {
            SweepLink::Downlink => self.downlink,
            _ => self.uplink,
        };
        Cell {
            index: 0,
            drop_probability: l.drop_probability,
            base_delay_s: l.base_delay_s,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn check_link(table: &str, link: &LinkParams) -> Result<(), (String, String)> {
    let key = |k: &str| format!("{table}.{k}");
    if !(link.base_delay_s >= 0.0 && link.base_delay_s.is_finite()) {
        return Err((key("base_delay_s"), format!("must be >= 0, got {}", link.base_delay_s)));
    }
    if !(link.jitter_s >= 0.0 && link.jitter_s.is_finite()) {
        return Err((key("jitter_s"), format!("must be >= 0, got {}", link.jitter_s)));
    }
    if !(0.0..=1.0).contains(&link.drop_probability) {
        return Err((key("drop_probability"), format!("must be in [0, 1], got {}", link.drop_probability)));
    }
    Ok(())
}

/// Parses and validates config text; `origin` names it in errors.
pub fn parse_config(text: &str, origin: &str) -> Result<ExperimentConfig, ConfigError> {
    let config: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
        path: origin.to_owned(),
        message: e.to_string(),
    })?;
    config.validate().map_err(|(key, message)| ConfigError::Invalid {
        path: origin.to_owned(),
        key,
        message,
    })?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let origin = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: origin.clone(),
        source,
    })?;
    parse_config(&text, &origin)
}
