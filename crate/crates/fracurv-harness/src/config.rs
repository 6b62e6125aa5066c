//! Run configuration: TOML text, canonical hash and validation.

use fracurv::codetree::{ModelSpec, TreeModel};
use fracurv::simgeom::{check_uosc, cutoff_r, OpenSetSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Dimension,
    StopMass,
    MeanCurve,
    Rk,
    Limits,
    VerifyA2,
    Render,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpsGrid {
    pub min: f64,
    pub max: f64,
    pub per_octave: u32,
}

/// Radii R·2^(-k/per_octave) for k = 0..=octaves·per_octave.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RGrid {
    pub octaves: u32,
    pub per_octave: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskOptions {
    pub stop_mass_n_mc: usize,
    pub stop_mass_radii: usize,
    pub a2_samples: usize,
    pub a2_depth: usize,
    /// lower limit of the Cesàro average; the smallest eps when absent
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    pub lattice_m_max: usize,
    pub lattice_s_points: usize,
    pub render_level: u32,
}

impl Default for TaskOptions {
    fn default() -> Self {
        TaskOptions {
            stop_mass_n_mc: 10_000,
            stop_mass_radii: 10,
            a2_samples: 100_000,
            a2_depth: 2,
            delta: None,
            lattice_m_max: 24,
            lattice_s_points: 4,
            render_level: 3,
        }
    }
}

fn default_slack() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub model: ModelSpec,
    pub open_set: OpenSetSpec,
    #[serde(default = "default_slack")]
    pub r_slack: f64,
    pub eps_grid: EpsGrid,
    pub r_grid: RGrid,
    pub n_mc: usize,
    pub q: f64,
    pub h_ratio: f64,
    pub seed: u64,
    /// Output directory; not part of the hash.
    #[serde(default)]
    pub outputs: String,
    pub tasks: Vec<Task>,
    #[serde(default)]
    pub options: TaskOptions,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Sorted-key TOML text without the output directory.
    pub fn canonical_text(&self) -> String {
        let mut c = self.clone();
        c.outputs = String::new();
        let v = toml::Value::try_from(&c).expect("config serializes");
        toml::to_string(&v).expect("value serializes").replace("\r\n", "\n")
    }

    pub fn hash(&self) -> String {
        let d = Sha256::digest(self.canonical_text().as_bytes());
        d.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn big_r(&self) -> f64 {
        cutoff_r(&self.open_set, self.r_slack)
    }

    pub fn eps_values(&self) -> Vec<f64> {
        fracurv::meanlimits::geometric_grid(self.eps_grid.min, self.eps_grid.max, self.eps_grid.per_octave)
    }

    /// Radii of the r grid plus the breakpoints R·r_i.
    pub fn r_values(&self, model: &TreeModel) -> Vec<f64> {
        fracurv::meanlimits::r_grid_with_breaks(model, self.big_r(), self.r_grid.octaves, self.r_grid.per_octave)
    }

    pub fn has(&self, t: Task) -> bool {
        self.tasks.contains(&t)
    }
}

/// Every invariant violation of a config; empty iff runnable.
pub fn validate(c: &RunConfig) -> Vec<String> {
    let mut out = Vec::new();
    if !(c.q > 0.0 && c.q <= 0.25) {
        out.push("q out of range (0,0.25]".to_string());
    }
    if !(c.h_ratio >= 1.0 / 128.0 && c.h_ratio <= 1.0 / 8.0) {
        out.push("h_ratio out of range [1/128,1/8]".to_string());
    }
    if !(c.r_slack >= 0.0) {
        out.push("R_slack must be non-negative".to_string());
    }
    let mut ratios_ok = true;
    for (i, l) in c.model.labels.iter().enumerate() {
        for m in &l.maps {
            if !(m.ratio < 1.0) {
                out.push(format!("contraction ratio ≥ 1 in label {}", i + 1));
                ratios_ok = false;
            } else if !(m.ratio > 0.0) {
                out.push(format!("contraction ratio ≤ 0 in label {}", i + 1));
                ratios_ok = false;
            }
        }
    }
    if ratios_ok {
        if let Err(e) = TreeModel::new(c.model.clone()) {
            out.push(format!("model: {e}"));
        }
        for (i, l) in c.model.labels.iter().enumerate() {
            match check_uosc(&l.maps, &c.open_set, 1e-9) {
                Ok(r) if r.contained && r.pairwise_disjoint => {}
                Ok(_) => out.push(format!("open set condition fails for label {}", i + 1)),
                Err(e) => out.push(format!("open set: {e}")),
            }
        }
    }
    let g = c.eps_grid;
    if !(g.min > 0.0 && g.max >= g.min && g.per_octave >= 1) {
        out.push("eps grid empty".to_string());
    } else if g.max > c.big_r() {
        out.push(format!("eps grid exceeds R = {}", c.big_r()));
    }
    if c.r_grid.octaves < 1 || c.r_grid.per_octave < 1 {
        out.push("r grid empty".to_string());
    }
    let curves = c.tasks.iter().any(|t| matches!(t, Task::MeanCurve | Task::Rk | Task::Limits));
    if curves && c.n_mc < 30 {
        out.push("n_mc below 30".to_string());
    }
    if c.has(Task::Limits) && c.r_grid.octaves < 8 {
        out.push("limits need an r grid reaching R/256 (octaves ≥ 8)".to_string());
    }
    if c.has(Task::StopMass) && c.options.stop_mass_n_mc < 100 {
        out.push("stop_mass_n_mc below 100".to_string());
    }
    if let Some(d) = c.options.delta {
        if !(d >= g.min * (1.0 - 1e-9) && d <= 1.0) {
            out.push("delta outside [eps min, 1]".to_string());
        }
    }
    let mut seen = c.tasks.clone();
    seen.sort();
    seen.dedup();
    if seen.len() != c.tasks.len() {
        out.push("duplicate task".to_string());
    }
    out
}
