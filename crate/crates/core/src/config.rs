//! Experiment configuration: one TOML document per experiment.
//!
//! ```toml
//! name = "pendulum"
//! seed = 7
//!
//! [plant]
//! kind = "pendulum"          # or "cstr"; physical constants may be overridden here
//!
//! [sets]
//! state_lower = [-3.0, -1.0]
//! state_upper = [3.0, 1.0]
//! input_lower = [-1.0]
//! input_upper = [1.0]
//!
//! [equilibrium]
//! state = [0.0, 0.0]
//! input = [0.0]
//!
//! [data]
//! horizon = 4
//! sizes = [100, 100, 100, 100]
//! noise_bound = [0.01, 0.01]
//!
//! [model]
//! state_lengthscales = [1.5, 1.0]
//! input_lengthscales = [1.0]
//! lambda = 1e-6
//! gamma = { augment = 4.0 }
//!
//! [control]
//! mode = "robust"
//! steps = 60
//! initial_conditions = [[0.6, 0.0]]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{KpcError, Result};
use crate::kernels::{KernelFamily, KernelSpec, DEFAULT_JITTER_REL};
use crate::model_bank::ModelConfig;
use crate::ocp::{CostWeights, RobustMode, SafeSet, SolverOptions, TerminalMode};
use crate::plants::{equilibrium_solve, Plant};
use crate::regression::{FitOptions, GammaPolicy};
use crate::robust::Polytope;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
    pub plant: Plant,
    pub sets: SetsConfig,
    #[serde(default)]
    pub safe_set: SafeSetConfig,
    pub equilibrium: EquilibriumConfig,
    pub data: DataConfig,
    pub model: ModelSection,
    #[serde(default)]
    pub cost: CostConfig,
    #[serde(default)]
    pub solver: SolverOptions,
    pub control: ControlConfig,
}

fn default_output_dir() -> String {
    "out".into()
}

/// Box bounds, optionally replaced by general half-spaces for the state set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetsConfig {
    #[serde(default)]
    pub state_lower: Vec<f64>,
    #[serde(default)]
    pub state_upper: Vec<f64>,
    #[serde(default)]
    pub state_normals: Vec<Vec<f64>>,
    #[serde(default)]
    pub state_offsets: Vec<f64>,
    pub input_lower: Vec<f64>,
    pub input_upper: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SafeSetConfig {
    /// The (refined) equilibrium state.
    #[default]
    Equilibrium,
    Point { point: Vec<f64> },
    Box { lower: Vec<f64>, upper: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquilibriumConfig {
    pub state: Vec<f64>,
    pub input: Vec<f64>,
    /// Refine `state` by Newton's method with `input` held fixed.
    #[serde(default = "yes")]
    pub refine: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub horizon: usize,
    /// Dataset size per step, `horizon` entries.
    pub sizes: Vec<usize>,
    pub noise_bound: Vec<f64>,
    /// Sampling ranges default to the state and input sets, widened by this fraction of their width.
    #[serde(default)]
    pub range_enlargement: f64,
    #[serde(default)]
    pub state_range_lower: Option<Vec<f64>>,
    #[serde(default)]
    pub state_range_upper: Option<Vec<f64>>,
    #[serde(default)]
    pub input_range_lower: Option<Vec<f64>>,
    #[serde(default)]
    pub input_range_upper: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_family")]
    pub family: KernelFamily,
    #[serde(default = "one")]
    pub signal_variance: f64,
    pub state_lengthscales: Vec<f64>,
    pub input_lengthscales: Vec<f64>,
    #[serde(default = "one")]
    pub imq_offset: f64,
    #[serde(default = "default_jitter")]
    pub jitter_rel: f64,
    pub lambda: f64,
    pub gamma: GammaPolicy,
    #[serde(default)]
    pub skip_delta_qp: bool,
    /// Per-step or per-(step, dim) replacements of the defaults above.
    #[serde(default)]
    pub overrides: Vec<ModelOverride>,
}

fn default_family() -> KernelFamily {
    KernelFamily::SquaredExponential
}

fn one() -> f64 {
    1.0
}

fn default_jitter() -> f64 {
    DEFAULT_JITTER_REL
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverride {
    pub step: usize,
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default)]
    pub signal_variance: Option<f64>,
    #[serde(default)]
    pub state_lengthscales: Option<Vec<f64>>,
    #[serde(default)]
    pub input_lengthscales: Option<Vec<f64>>,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub gamma: Option<GammaPolicy>,
}

/// Diagonal weights; full matrices may be given row-major instead.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub q: Option<Vec<f64>>,
    pub r: Option<Vec<f64>>,
    pub p_f: Option<Vec<f64>>,
    pub q_matrix: Option<Vec<Vec<f64>>>,
    pub r_matrix: Option<Vec<Vec<f64>>>,
    pub p_f_matrix: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    #[serde(default)]
    pub mode: RobustMode,
    #[serde(default)]
    pub srs: bool,
    #[serde(default)]
    pub terminal: TerminalMode,
    pub steps: usize,
    pub initial_conditions: Vec<Vec<f64>>,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| KpcError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| KpcError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            KpcError::Config(m) => KpcError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| KpcError::Config(e.to_string()))
    }

    pub fn n_x(&self) -> usize {
        self.plant.n_x()
    }

    pub fn n_u(&self) -> usize {
        self.plant.n_u()
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(KpcError::Config(m));
        let (n_x, n_u) = (self.n_x(), self.n_u());
        self.plant.validate()?;
        self.state_set()?;
        self.input_bounds()?;
        if self.equilibrium.state.len() != n_x || self.equilibrium.input.len() != n_u {
            return cfg_err("equilibrium dimensions do not match the plant".into());
        }
        let d = &self.data;
        if d.horizon == 0 {
            return cfg_err("data.horizon must be at least 1".into());
        }
        if d.sizes.len() != d.horizon || d.sizes.contains(&0) {
            return cfg_err(format!("data.sizes needs {} positive entries", d.horizon));
        }
        if d.noise_bound.len() != n_x || d.noise_bound.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return cfg_err(format!("data.noise_bound needs {n_x} nonnegative entries"));
        }
        if !(d.range_enlargement.is_finite() && d.range_enlargement >= 0.0) {
            return cfg_err("data.range_enlargement must be nonnegative".into());
        }
        let (lo, hi) = self.state_sampling_range()?;
        if lo.iter().chain(&hi).any(|v| !v.is_finite()) || lo.iter().zip(&hi).any(|(a, b)| a > b) {
            return cfg_err("state sampling range must be finite and nonempty".into());
        }
        let m = &self.model;
        if m.state_lengthscales.len() != n_x || m.input_lengthscales.len() != n_u {
            return cfg_err("model lengthscale counts do not match the plant".into());
        }
        for o in &m.overrides {
            if o.step == 0 || o.step > d.horizon || o.dim.is_some_and(|j| j >= n_x) {
                return cfg_err(format!("model override for step {} dim {:?} is out of range", o.step, o.dim));
            }
        }
        for t in 1..=d.horizon {
            for j in 0..n_x {
                let c = self.model_config(t, j);
                c.spec.validate().map_err(|e| KpcError::Config(format!("model step {t} dim {j}: {e}")))?;
                if !(c.lambda.is_finite() && c.lambda > 0.0) {
                    return cfg_err(format!("model step {t} dim {j}: lambda must be positive"));
                }
                match c.gamma {
                    GammaPolicy::Augment(f) if !(f.is_finite() && f >= 1.0) => {
                        return cfg_err("gamma augment factor must be at least 1".into())
                    }
                    GammaPolicy::Fixed(g) if !(g.is_finite() && g > 0.0) => {
                        return cfg_err("fixed gamma must be positive".into())
                    }
                    _ => {}
                }
            }
        }
        self.cost_weights(&self.equilibrium.state, &self.equilibrium.input)?.validate(n_x, n_u)?;
        self.safe_set(&self.equilibrium.state)?;
        if matches!(self.safe_set, SafeSetConfig::Equilibrium | SafeSetConfig::Point { .. })
            && self.control.terminal == TerminalMode::SetConstraint
        {
            return cfg_err("a singleton safe set requires the terminal penalty".into());
        }
        if self.solver.feas_tol <= 0.0 || self.solver.abs_smoothing_eps <= 0.0 {
            return cfg_err("solver tolerances must be positive".into());
        }
        let x_set = self.state_set()?;
        for x0 in &self.control.initial_conditions {
            if x0.len() != n_x || !x_set.contains_with_tol(x0, 1e-12) {
                return cfg_err(format!("initial condition {x0:?} is not a point of the state set"));
            }
        }
        Ok(())
    }

    pub fn state_set(&self) -> Result<Polytope> {
        let s = &self.sets;
        let n_x = self.n_x();
        if !s.state_normals.is_empty() {
            if s.state_normals.iter().any(|r| r.len() != n_x) {
                return Err(KpcError::Config("state normals must have one entry per state".into()));
            }
            return Polytope::new(s.state_normals.clone(), s.state_offsets.clone())
                .map_err(|e| KpcError::Config(format!("state set: {e}")));
        }
        if s.state_lower.len() != n_x || s.state_upper.len() != n_x {
            return Err(KpcError::Config(format!("state bounds need {n_x} entries")));
        }
        Polytope::from_bounds(&s.state_lower, &s.state_upper).map_err(|e| KpcError::Config(format!("state set: {e}")))
    }

    pub fn input_bounds(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let s = &self.sets;
        let n_u = self.n_u();
        if s.input_lower.len() != n_u || s.input_upper.len() != n_u {
            return Err(KpcError::Config(format!("input bounds need {n_u} entries")));
        }
        if s.input_lower.iter().chain(&s.input_upper).any(|v| !v.is_finite())
            || s.input_lower.iter().zip(&s.input_upper).any(|(a, b)| a > b)
        {
            return Err(KpcError::Config("input bounds must be finite with lower ≤ upper".into()));
        }
        Ok((s.input_lower.clone(), s.input_upper.clone()))
    }

    pub fn input_set(&self) -> Result<Polytope> {
        let (lo, hi) = self.input_bounds()?;
        Polytope::from_bounds(&lo, &hi).map_err(|e| KpcError::Config(format!("input set: {e}")))
    }

    /// State box the training features are drawn from.
    pub fn state_sampling_range(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = &self.data;
        let (lo, hi) = match (&d.state_range_lower, &d.state_range_upper) {
            (Some(l), Some(h)) => (l.clone(), h.clone()),
            (None, None) => {
                let set = self.state_set()?;
                set.as_bounds()
                    .ok_or_else(|| KpcError::Config("state set is not a box; give data.state_range_*".into()))?
            }
            _ => return Err(KpcError::Config("give both data.state_range_lower and _upper".into())),
        };
        if lo.len() != self.n_x() || hi.len() != self.n_x() {
            return Err(KpcError::Config("state sampling range has the wrong dimension".into()));
        }
        Ok(widen(&lo, &hi, d.range_enlargement))
    }

    pub fn input_sampling_range(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = &self.data;
        let (lo, hi) = match (&d.input_range_lower, &d.input_range_upper) {
            (Some(l), Some(h)) => (l.clone(), h.clone()),
            (None, None) => self.input_bounds()?,
            _ => return Err(KpcError::Config("give both data.input_range_lower and _upper".into())),
        };
        if lo.len() != self.n_u() || hi.len() != self.n_u() {
            return Err(KpcError::Config("input sampling range has the wrong dimension".into()));
        }
        Ok(widen(&lo, &hi, d.range_enlargement))
    }

    /// Kernel, λ and Γ policy for output `dim` of step `t`.
    pub fn model_config(&self, t: usize, dim: usize) -> ModelConfig {
        let m = &self.model;
        let mut sv = m.signal_variance;
        let mut sl = m.state_lengthscales.clone();
        let mut il = m.input_lengthscales.clone();
        let mut lambda = m.lambda;
        let mut gamma = m.gamma;
        // Step-wide overrides first, then dimension-specific ones.
        let applicable = m
            .overrides
            .iter()
            .filter(|o| o.step == t && o.dim.is_none())
            .chain(m.overrides.iter().filter(|o| o.step == t && o.dim == Some(dim)));
        for o in applicable {
            if let Some(v) = o.signal_variance {
                sv = v;
            }
            if let Some(v) = &o.state_lengthscales {
                sl = v.clone();
            }
            if let Some(v) = &o.input_lengthscales {
                il = v.clone();
            }
            if let Some(v) = o.lambda {
                lambda = v;
            }
            if let Some(v) = o.gamma {
                gamma = v;
            }
        }
        let mut ls = sl;
        for _ in 0..t {
            ls.extend_from_slice(&il);
        }
        let spec = KernelSpec {
            family: m.family,
            signal_variance: sv,
            lengthscales: ls,
            imq_offset: m.imq_offset,
            jitter_rel: m.jitter_rel,
        };
        ModelConfig {
            spec,
            lambda,
            gamma,
            fit: FitOptions {
                skip_delta_qp: m.skip_delta_qp,
                ..FitOptions::default()
            },
        }
    }

    pub fn model_configs(&self) -> Vec<Vec<ModelConfig>> {
        (1..=self.data.horizon)
            .map(|t| (0..self.n_x()).map(|j| self.model_config(t, j)).collect())
            .collect()
    }

    /// Equilibrium pair, refined when requested, with the residual at the configured point.
    pub fn equilibrium(&self) -> crate::plants::Equilibrium {
        let e = &self.equilibrium;
        let rhs = |x: &[f64], u: &[f64]| self.plant.rhs(x, u);
        if e.refine {
            equilibrium_solve(rhs, &e.state, &e.input)
        } else {
            let r = rhs(&e.state, &e.input).iter().fold(0.0f64, |a, v| a.max(v.abs()));
            crate::plants::Equilibrium {
                state: e.state.clone(),
                input: e.input.clone(),
                residual: r,
                guess_residual: r,
                converged: r <= 1e-9,
            }
        }
    }

    pub fn safe_set(&self, x_eq: &[f64]) -> Result<SafeSet> {
        let n_x = self.n_x();
        Ok(match &self.safe_set {
            SafeSetConfig::Equilibrium => SafeSet::Point(x_eq.to_vec()),
            SafeSetConfig::Point { point } => {
                if point.len() != n_x {
                    return Err(KpcError::Config("safe point has the wrong dimension".into()));
                }
                SafeSet::Point(point.clone())
            }
            SafeSetConfig::Box { lower, upper } => {
                if lower.len() != n_x || upper.len() != n_x {
                    return Err(KpcError::Config("safe box has the wrong dimension".into()));
                }
                SafeSet::Polytope(Polytope::from_bounds(lower, upper).map_err(|e| KpcError::Config(e.to_string()))?)
            }
        })
    }

    pub fn cost_weights(&self, x_ref: &[f64], u_ref: &[f64]) -> Result<CostWeights> {
        let (n_x, n_u) = (self.n_x(), self.n_u());
        let c = &self.cost;
        let pick = |diag: &Option<Vec<f64>>, full: &Option<Vec<Vec<f64>>>, n: usize, default: f64, name: &str| {
            match (diag, full) {
                (Some(_), Some(_)) => Err(KpcError::Config(format!("give either cost.{name} or cost.{name}_matrix"))),
                (_, Some(rows)) => {
                    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                        return Err(KpcError::Config(format!("cost.{name}_matrix must be {n}×{n}")));
                    }
                    Ok(nalgebra::DMatrix::from_fn(n, n, |i, j| rows[i][j]))
                }
                (Some(d), None) => {
                    if d.len() != n {
                        return Err(KpcError::Config(format!("cost.{name} needs {n} entries")));
                    }
                    Ok(nalgebra::DMatrix::from_diagonal(&d.clone().into()))
                }
                (None, None) => Ok(nalgebra::DMatrix::identity(n, n) * default),
            }
        };
        Ok(CostWeights {
            q: pick(&c.q, &c.q_matrix, n_x, 1.0, "q")?,
            r: pick(&c.r, &c.r_matrix, n_u, 0.1, "r")?,
            p_f: pick(&c.p_f, &c.p_f_matrix, n_x, 10.0, "p_f")?,
            x_ref: x_ref.to_vec(),
            u_ref: u_ref.to_vec(),
        })
    }
}

fn widen(lo: &[f64], hi: &[f64], frac: f64) -> (Vec<f64>, Vec<f64>) {
    lo.iter()
        .zip(hi)
        .map(|(l, h)| {
            let pad = frac * (h - l);
            (l - pad, h + pad)
        })
        .unzip()
}
