//! Flat key-value run configuration (TOML syntax). Every key is optional and
//! overrides the matching field of the defaults.

use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::harness::{ExperimentSpec, Family, Method};
use crate::optimizer::{AUpdate, PhaseObjective, PowerScaling};

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlatConfig {
    #[serde(rename = "M")]
    pub antennas: Option<usize>,
    #[serde(rename = "N")]
    pub ris_elements: Option<usize>,
    #[serde(rename = "K")]
    pub users: Option<usize>,
    #[serde(rename = "D")]
    pub distance: Option<f64>,
    pub user_radius: Option<f64>,
    pub ris_position: Option<[f64; 2]>,
    pub beta: Option<f64>,
    pub n_path: Option<usize>,
    pub n_ray: Option<usize>,
    pub gain_offset_db: Option<f64>,
    pub seed: Option<u64>,

    pub family: Option<String>,
    pub power_db: Option<Vec<f64>>,
    pub n_grid: Option<Vec<usize>>,
    pub scenarios: Option<usize>,
    pub samples: Option<usize>,
    pub methods: Option<Vec<String>>,
    pub per_sample_power: Option<bool>,

    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub a_update: Option<AUpdate>,
    pub power_scaling: Option<PowerScaling>,
    pub phase_objective: Option<PhaseObjective>,
    pub inner_steps: Option<usize>,
    pub extrapolate: Option<bool>,
    pub max_initial_angle: Option<f64>,
    pub bcd_tol: Option<f64>,
    pub bcd_max_iter: Option<usize>,
}

impl FlatConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// A missing or unreadable file is a configuration error.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn apply(&self, spec: &mut ExperimentSpec) -> Result<()> {
        let sc = &mut spec.scenario;
        set(&mut sc.antennas, self.antennas);
        set(&mut sc.ris_elements, self.ris_elements);
        set(&mut sc.users, self.users);
        set(&mut sc.distance, self.distance);
        set(&mut sc.user_radius, self.user_radius);
        set(&mut sc.ris_position, self.ris_position);
        set(&mut sc.beta, self.beta);
        set(&mut sc.n_path, self.n_path);
        set(&mut sc.n_ray, self.n_ray);
        set(&mut sc.gain_offset_db, self.gain_offset_db);
        if let Some(seed) = self.seed {
            sc.seed = seed;
            spec.seed = seed;
        }
        if let Some(f) = &self.family {
            spec.family = f.parse::<Family>()?;
        }
        set(&mut spec.power_grid_db, self.power_db.clone());
        set(&mut spec.n_grid, self.n_grid.clone());
        set(&mut spec.scenarios, self.scenarios);
        set(&mut spec.samples, self.samples);
        if let Some(list) = &self.methods {
            spec.methods = parse_methods(list)?;
        }
        set(&mut spec.per_sample_power, self.per_sample_power);

        let opt = &mut spec.optimizer;
        set(&mut opt.tol, self.tol);
        set(&mut opt.max_iter, self.max_iter);
        set(&mut opt.a_update, self.a_update);
        set(&mut opt.scaling, self.power_scaling);
        set(&mut opt.phase_objective, self.phase_objective);
        set(&mut opt.inner_steps, self.inner_steps);
        set(&mut opt.extrapolate, self.extrapolate);
        if let Some(angle) = self.max_initial_angle {
            opt.armijo.max_initial_angle = (angle > 0.0).then_some(angle);
        }
        set(&mut spec.bcd.tol, self.bcd_tol);
        set(&mut spec.bcd.max_iter, self.bcd_max_iter);
        Ok(())
    }
}

fn set<T>(field: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *field = v;
    }
}

pub fn parse_methods<S: AsRef<str>>(list: &[S]) -> Result<Vec<Method>> {
    let mut out = Vec::new();
    for name in list {
        let name = name.as_ref().trim();
        if name.is_empty() {
            continue;
        }
        let m = name.parse::<Method>()?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    Ok(out)
}
