//! Experiment description loaded from TOML.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use spine_mpc::cftoc::{ReferenceControllerConfig, SmoothingControllerConfig};
use spine_mpc::closed_loop::{Controller, LoopSettings};
use spine_mpc::trajectory::{DisturbanceSchedule, DisturbanceSpec};
use spine_mpc::SpineConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    Smoothing,
    #[default]
    Reference,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerSection {
    pub kind: ControllerKind,
    pub smoothing: SmoothingControllerConfig,
    pub reference: ReferenceControllerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectorySection {
    /// Final bend angle, rad.
    pub sweep: f64,
    /// Ramp duration, s. Defaults to 10 s for the reference controller and
    /// 2 s for the smoothing controller.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub duration: Option<f64>,
}

impl Default for TrajectorySection {
    fn default() -> Self {
        TrajectorySection { sweep: 0.3, duration: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DisturbanceSection {
    pub enabled: bool,
    pub seed: u64,
    /// Uniform noise half-widths: m, rad, and m/s or rad/s.
    pub position: f64,
    pub angle: f64,
    pub velocity: f64,
    pub schedule: DisturbanceSchedule,
}

impl Default for DisturbanceSection {
    fn default() -> Self {
        DisturbanceSection {
            enabled: false,
            seed: 0,
            position: 0.0,
            angle: 0.0,
            velocity: 1e-3,
            schedule: DisturbanceSchedule::EveryStep,
        }
    }
}

impl DisturbanceSection {
    pub fn spec(&self) -> DisturbanceSpec {
        if !self.enabled {
            return DisturbanceSpec { seed: self.seed, ..DisturbanceSpec::none() };
        }
        DisturbanceSpec {
            seed: self.seed,
            position: self.position,
            angle: self.angle,
            velocity: self.velocity,
            schedule: self.schedule.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialInput {
    /// All rest lengths zero before the first step.
    #[default]
    Zero,
    /// Rest lengths holding the first reference pose in equilibrium.
    Equilibrium,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Plant steps; the whole trajectory when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    pub out: PathBuf,
    /// QP tolerance; the controller's default when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solver_tol: Option<f64>,
    pub max_iter: usize,
    pub max_consecutive_failures: usize,
    pub initial_input: InitialInput,
    /// Position error (m) below which a vertebra counts as settled.
    pub settle_threshold: f64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            steps: None,
            out: PathBuf::from("out"),
            solver_tol: None,
            max_iter: 200,
            max_consecutive_failures: 20,
            initial_input: InitialInput::Zero,
            settle_threshold: 1e-3,
        }
    }
}

/// Force-density settings for reference inputs and equilibrium starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IkSection {
    pub min_density: f64,
}

impl Default for IkSection {
    fn default() -> Self {
        IkSection { min_density: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Plant model; the planar default for the reference controller and the
    /// spatial default for the smoothing controller when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spine: Option<SpineConfig>,
    pub controller: ControllerSection,
    pub trajectory: TrajectorySection,
    pub disturbance: DisturbanceSection,
    pub ik: IkSection,
    pub run: RunSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    /// Same experiment with every optional setting spelled out.
    pub fn resolved(&self) -> Self {
        let mut cfg = self.clone();
        cfg.spine = Some(self.spine());
        cfg.trajectory.duration = Some(self.duration());
        cfg.run.steps = Some(self.steps());
        cfg.run.solver_tol = Some(self.solver_tol());
        cfg
    }

    pub fn solver_tol(&self) -> f64 {
        self.run.solver_tol.unwrap_or_else(|| LoopSettings::for_controller(&self.controller()).tol)
    }

    pub fn spine(&self) -> SpineConfig {
        self.spine.clone().unwrap_or_else(|| match self.controller.kind {
            ControllerKind::Smoothing => SpineConfig::spatial_default(),
            ControllerKind::Reference => SpineConfig::planar_default(),
        })
    }

    pub fn controller(&self) -> Controller {
        match self.controller.kind {
            ControllerKind::Smoothing => Controller::Smoothing(self.controller.smoothing.clone()),
            ControllerKind::Reference => Controller::Reference(self.controller.reference.clone()),
        }
    }

    pub fn duration(&self) -> f64 {
        self.trajectory.duration.unwrap_or(match self.controller.kind {
            ControllerKind::Smoothing => 2.0,
            ControllerKind::Reference => 10.0,
        })
    }

    pub fn steps(&self) -> usize {
        self.run.steps.unwrap_or_else(|| (self.duration() / self.spine().dt).round() as usize)
    }

    /// Checks every section; messages name the offending key.
    pub fn validate(&self) -> Result<()> {
        self.spine().validate().context("[spine]")?;
        match self.controller.kind {
            ControllerKind::Smoothing => self.controller.smoothing.validate().context("[controller.smoothing]")?,
            ControllerKind::Reference => self.controller.reference.validate().context("[controller.reference]")?,
        }
        let t = &self.trajectory;
        if !t.sweep.is_finite() {
            bail!("[trajectory] sweep must be finite");
        }
        if !self.duration().is_finite() || self.duration() <= 0.0 {
            bail!("[trajectory] duration must be positive");
        }
        let magnitudes = DisturbanceSection { enabled: true, ..self.disturbance.clone() };
        magnitudes.spec().validate().map_err(anyhow::Error::msg).context("[disturbance]")?;
        if !(self.ik.min_density > 0.0 && self.ik.min_density.is_finite()) {
            bail!("[ik] min_density must be positive");
        }
        let r = &self.run;
        if let Some(tol) = r.solver_tol {
            if !(tol > 0.0 && tol.is_finite()) {
                bail!("[run] solver_tol must be positive");
            }
        }
        if r.max_iter == 0 {
            bail!("[run] max_iter must be at least 1");
        }
        if !(r.settle_threshold > 0.0) {
            bail!("[run] settle_threshold must be positive");
        }
        Ok(())
    }
}
