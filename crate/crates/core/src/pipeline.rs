//! Data generation, training, the receding-horizon loop and on-disk formats.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{KpcError, Result};
use crate::model_bank::{ModelBank, StateBox};
use crate::ocp::{assemble, shift_warm_start, OcpSpec, RobustMode, SolveStatus};
use crate::plants::{sample_bounded_noise, Equilibrium, Plant};
use crate::regression::{Dataset, GramFactors, KrrModel, ModelDocument};
use crate::robust::{HistoryEntry, Polytope, SrsHistory};

pub const DATA_SCHEMA_VERSION: u32 = 1;
pub const BANK_SCHEMA_VERSION: u32 = 1;
pub const LOG_SCHEMA_VERSION: u32 = 1;

/// Tolerance for counting a visited state as outside the state set.
pub const VIOLATION_TOL: f64 = 1e-9;

const MAX_REDRAWS: usize = 100;

/// Training data of one prediction step: shared features, one target vector per state dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepData {
    pub schema_version: u32,
    pub step: usize,
    /// Rows `(x₀, u₀, …, u_{t−1})`.
    pub features: Vec<Vec<f64>>,
    /// `targets[dim][d]`
    pub targets: Vec<Vec<f64>>,
    pub noise_bound: Vec<f64>,
}

impl StepData {
    pub fn datasets(&self) -> Result<Vec<Dataset>> {
        self.targets
            .iter()
            .zip(&self.noise_bound)
            .map(|(y, b)| Dataset::with_uniform_noise(self.features.clone(), y.clone(), *b))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingRanges {
    pub state_lower: Vec<f64>,
    pub state_upper: Vec<f64>,
    pub input_lower: Vec<f64>,
    pub input_upper: Vec<f64>,
}

impl SamplingRanges {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let (state_lower, state_upper) = cfg.state_sampling_range()?;
        let (input_lower, input_upper) = cfg.input_sampling_range()?;
        Ok(SamplingRanges {
            state_lower,
            state_upper,
            input_lower,
            input_upper,
        })
    }

    fn draw<R: Rng>(lo: &[f64], hi: &[f64], rng: &mut R) -> Vec<f64> {
        lo.iter()
            .zip(hi)
            .map(|(l, h)| if h > l { rng.gen_range(*l..=*h) } else { *l })
            .collect()
    }
}

/// `d` independent rollouts of `t` steps from uniform draws over `ranges`, with bounded noise
/// added to the final states.
pub fn generate_dataset<R: Rng>(
    plant: &Plant,
    t: usize,
    d: usize,
    ranges: &SamplingRanges,
    noise_bound: &[f64],
    rng: &mut R,
) -> Result<StepData> {
    let n_x = plant.n_x();
    if t == 0 || d == 0 {
        return Err(KpcError::InvalidArgument("dataset needs t ≥ 1 and d ≥ 1".into()));
    }
    if noise_bound.len() != n_x || ranges.state_lower.len() != n_x || ranges.input_lower.len() != plant.n_u() {
        return Err(KpcError::dim("sampling ranges", n_x, ranges.state_lower.len()));
    }
    let mut features: Vec<Vec<f64>> = Vec::with_capacity(d);
    let mut targets = vec![Vec::with_capacity(d); n_x];
    while features.len() < d {
        let mut redraws = 0;
        let (z, x_t) = loop {
            let x0 = SamplingRanges::draw(&ranges.state_lower, &ranges.state_upper, rng);
            let mut z = x0.clone();
            for _ in 0..t {
                z.extend(SamplingRanges::draw(&ranges.input_lower, &ranges.input_upper, rng));
            }
            let duplicate = features
                .iter()
                .any(|f| f.iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() <= crate::kernels::DUPLICATE_THRESHOLD);
            let outcome = if duplicate {
                Err(KpcError::DuplicateData {
                    first: features.len(),
                    second: features.len(),
                    dist: 0.0,
                })
            } else {
                plant.rollout(&x0, &z[n_x..])
            };
            match outcome {
                Ok(x) => break (z, x),
                Err(e) => {
                    redraws += 1;
                    if redraws > MAX_REDRAWS {
                        return Err(KpcError::Divergence(format!("{redraws} consecutive redraws at sample {}: {e}", features.len())));
                    }
                }
            }
        };
        let noise = sample_bounded_noise(noise_bound, rng);
        for j in 0..n_x {
            targets[j].push(x_t[j] + noise[j]);
        }
        features.push(z);
    }
    Ok(StepData {
        schema_version: DATA_SCHEMA_VERSION,
        step: t,
        features,
        targets,
        noise_bound: noise_bound.to_vec(),
    })
}

/// Datasets for every step of the configured horizon. Step `t` draws from its own stream of a
/// generator seeded with `seed`, so the result does not depend on scheduling.
pub fn generate_all(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<StepData>> {
    let ranges = SamplingRanges::from_config(cfg)?;
    let d = &cfg.data;
    std::thread::scope(|scope| {
        let handles: Vec<_> = (1..=d.horizon)
            .map(|t| {
                let ranges = &ranges;
                scope.spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(t as u64);
                    generate_dataset(&cfg.plant, t, d.sizes[t - 1], ranges, &d.noise_bound, &mut rng)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(KpcError::Divergence("data generation thread panicked".into()))))
            .collect()
    })
}

/// Per-model numbers reported after training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitEntry {
    pub step: usize,
    pub dim: usize,
    pub samples: usize,
    pub rkhs_norm: f64,
    pub delta: f64,
    pub gamma: f64,
    pub condition: f64,
}

pub fn fit_report(bank: &ModelBank) -> Vec<FitEntry> {
    let mut out = Vec::new();
    for t in 1..=bank.horizon() {
        for (dim, m) in bank.step_models(t).iter().enumerate() {
            out.push(FitEntry {
                step: t,
                dim,
                samples: m.len(),
                rkhs_norm: m.rkhs_norm(),
                delta: m.delta_const(),
                gamma: m.gamma(),
                condition: m.factors().condition_estimate(),
            });
        }
    }
    out
}

pub fn train(cfg: &ExperimentConfig, data: &[StepData]) -> Result<ModelBank> {
    if data.len() != cfg.data.horizon {
        return Err(KpcError::dim("training steps", cfg.data.horizon, data.len()));
    }
    for (k, s) in data.iter().enumerate() {
        if s.step != k + 1 || s.targets.len() != cfg.n_x() {
            return Err(KpcError::Corrupt(format!("dataset {k} does not belong to step {}", k + 1)));
        }
    }
    let datasets = data.iter().map(StepData::datasets).collect::<Result<Vec<_>>>()?;
    ModelBank::build(cfg.n_x(), cfg.n_u(), &datasets, &cfg.model_configs())
}

// ---------------------------------------------------------------------------------------------
// Files

/// Writes through a temporary file in the same directory, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn check_version(what: &str, found: u32, expected: u32) -> Result<()> {
    if found != expected {
        return Err(KpcError::SchemaVersion {
            what: what.into(),
            found,
            expected,
        });
    }
    Ok(())
}

pub fn save_datasets(data: &[StepData], dir: &Path) -> Result<Vec<PathBuf>> {
    data.iter()
        .map(|s| {
            let p = dir.join(format!("step_{}.json", s.step));
            write_json(&p, s)?;
            Ok(p)
        })
        .collect()
}

pub fn load_datasets(dir: &Path, horizon: usize) -> Result<Vec<StepData>> {
    (1..=horizon)
        .map(|t| {
            let s: StepData = read_json(&dir.join(format!("step_{t}.json")))?;
            check_version("dataset", s.schema_version, DATA_SCHEMA_VERSION)?;
            if s.step != t {
                return Err(KpcError::Corrupt(format!("step_{t}.json holds step {}", s.step)));
            }
            Ok(s)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankManifest {
    pub schema_version: u32,
    pub horizon: usize,
    pub n_x: usize,
    pub n_u: usize,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub step: usize,
    pub dim: usize,
    /// Relative to the manifest's directory.
    pub file: String,
}

/// Writes `bank.json` and one model document per (step, dim) into `dir`.
pub fn save_bank(bank: &ModelBank, dir: &Path) -> Result<PathBuf> {
    let mut entries = Vec::new();
    for t in 1..=bank.horizon() {
        for (dim, m) in bank.step_models(t).iter().enumerate() {
            let file = format!("model_t{t}_x{dim}.json");
            write_json(&dir.join(&file), &m.to_document())?;
            entries.push(ManifestEntry { step: t, dim, file });
        }
    }
    let manifest = BankManifest {
        schema_version: BANK_SCHEMA_VERSION,
        horizon: bank.horizon(),
        n_x: bank.n_x(),
        n_u: bank.n_u(),
        entries,
    };
    let path = dir.join("bank.json");
    write_json(&path, &manifest)?;
    Ok(path)
}

/// Loads a bank from its manifest (or from a directory containing `bank.json`).
pub fn load_bank(path: &Path) -> Result<ModelBank> {
    let manifest_path = if path.is_dir() { path.join("bank.json") } else { path.to_path_buf() };
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let m: BankManifest = read_json(&manifest_path)?;
    check_version("bank manifest", m.schema_version, BANK_SCHEMA_VERSION)?;
    let mut steps: Vec<Vec<Option<KrrModel>>> = (0..m.horizon).map(|_| (0..m.n_x).map(|_| None).collect()).collect();
    for e in &m.entries {
        if e.step == 0 || e.step > m.horizon || e.dim >= m.n_x {
            return Err(KpcError::Corrupt(format!("manifest entry step {} dim {} out of range", e.step, e.dim)));
        }
        let doc: ModelDocument = read_json(&dir.join(&e.file))?;
        // Reuse the factorization of an earlier output of the same step when it matches.
        let shared = steps[e.step - 1].iter().flatten().find(|k: &&KrrModel| {
            k.spec() == &doc.spec && k.lambda() == doc.lambda && k.features() == doc.features.as_slice()
        });
        let factors = match shared {
            Some(k) => Arc::clone(k.factors()),
            None => Arc::new(GramFactors::new(&doc.spec, doc.lambda, &doc.features)?),
        };
        steps[e.step - 1][e.dim] = Some(KrrModel::from_document_on_factors(&doc, factors)?);
    }
    let steps = steps
        .into_iter()
        .enumerate()
        .map(|(t, row)| {
            row.into_iter()
                .enumerate()
                .map(|(j, m)| m.ok_or_else(|| KpcError::Corrupt(format!("manifest lacks step {} dim {j}", t + 1))))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    ModelBank::from_models(m.n_x, m.n_u, steps)
}

// ---------------------------------------------------------------------------------------------
// Closed loop

/// How the applied input of a step was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSource {
    Optimal,
    /// Next element of the last feasible plan.
    PlanTail,
    /// Equilibrium input inside the safe set.
    SafePolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub time: usize,
    pub state: Vec<f64>,
    pub input: Vec<f64>,
    pub source: InputSource,
    /// Optimized sequence (least infeasible one when no feasible point was found).
    pub plan: Vec<f64>,
    pub x_nominal: Vec<Vec<f64>>,
    pub boxes: Vec<StateBox>,
    pub srs_boxes: Option<Vec<StateBox>>,
    pub margins: Vec<f64>,
    pub unrelaxed_margins: Vec<f64>,
    pub terminal_margins: Vec<f64>,
    pub status: SolveStatus,
    pub cost: f64,
    pub iterations: usize,
    pub history_len: usize,
    pub next_state: Vec<f64>,
    /// `next_state` lies outside the state set.
    pub violation: bool,
    /// `next_state` lies in the step-1 box of this step's plan (checked when the plan was applied).
    pub next_in_first_box: Option<bool>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub schema_version: u32,
    pub experiment: String,
    pub plant: String,
    pub mode: RobustMode,
    pub srs: bool,
    pub horizon: usize,
    pub n_x: usize,
    pub n_u: usize,
    pub x_eq: Vec<f64>,
    pub u_eq: Vec<f64>,
    pub initial_state: Vec<f64>,
    pub state_set: Polytope,
    pub steps: Vec<StepRecord>,
    /// Reason the run stopped early.
    pub aborted: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    pub violations: usize,
    pub infeasible_steps: usize,
    pub fallback_steps: usize,
    /// Largest logged margin over steps that applied an optimized plan.
    pub max_feasible_margin: f64,
    pub final_distance: f64,
    pub solver_iterations: usize,
    pub wall_time_s: f64,
    pub aborted: bool,
}

impl TrajectoryLog {
    pub fn final_state(&self) -> &[f64] {
        self.steps.last().map(|s| s.next_state.as_slice()).unwrap_or(&self.initial_state)
    }

    pub fn distance_to_eq(x: &[f64], x_eq: &[f64]) -> f64 {
        x.iter().zip(x_eq).fold(0.0f64, |a, (p, q)| a.max((p - q).abs()))
    }

    /// Number of applied steps after which ‖x − x_eq‖∞ ≤ tol, if reached.
    pub fn steps_to_reach(&self, tol: f64) -> Option<usize> {
        self.steps
            .iter()
            .position(|s| Self::distance_to_eq(&s.next_state, &self.x_eq) <= tol)
            .map(|k| k + 1)
    }

    pub fn summary(&self) -> RunSummary {
        let mut max_margin = f64::NEG_INFINITY;
        for s in self.steps.iter().filter(|s| s.source == InputSource::Optimal) {
            for m in s.margins.iter().chain(&s.terminal_margins) {
                max_margin = max_margin.max(*m);
            }
        }
        RunSummary {
            steps: self.steps.len(),
            violations: self.steps.iter().filter(|s| s.violation).count(),
            infeasible_steps: self.steps.iter().filter(|s| !s.status.is_feasible()).count(),
            fallback_steps: self.steps.iter().filter(|s| s.source != InputSource::Optimal).count(),
            max_feasible_margin: max_margin,
            final_distance: Self::distance_to_eq(self.final_state(), &self.x_eq),
            solver_iterations: self.steps.iter().map(|s| s.iterations).sum(),
            wall_time_s: self.steps.iter().map(|s| s.wall_time_s).sum(),
            aborted: self.aborted.is_some(),
        }
    }

    /// The same log with wall-clock fields zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> TrajectoryLog {
        let mut out = self.clone();
        for s in &mut out.steps {
            s.wall_time_s = 0.0;
        }
        out
    }

    pub fn csv_header(&self) -> Vec<String> {
        let mut h = vec!["time".to_string()];
        h.extend((0..self.n_x).map(|j| format!("x{j}")));
        h.extend((0..self.n_u).map(|j| format!("u{j}")));
        for t in 1..=self.horizon {
            for j in 0..self.n_x {
                h.push(format!("box{t}_x{j}_lower"));
                h.push(format!("box{t}_x{j}_upper"));
            }
        }
        let per_step = self.state_set.num_constraints();
        for t in 1..=self.horizon {
            for k in 0..per_step {
                h.push(format!("margin{t}_{k}"));
            }
        }
        h.push("status".into());
        h
    }

    /// One row per MPC step: time, state, input, box bounds (step-major), margins, status.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| KpcError::Corrupt(format!("csv: {e}"));
        w.write_record(self.csv_header()).map_err(io)?;
        let n_margins = self.horizon * self.state_set.num_constraints();
        for s in &self.steps {
            let mut row = vec![s.time.to_string()];
            row.extend(s.state.iter().map(f64::to_string));
            row.extend(s.input.iter().map(f64::to_string));
            for b in &s.boxes {
                for j in 0..self.n_x {
                    row.push(b.lower[j].to_string());
                    row.push(b.upper[j].to_string());
                }
            }
            row.extend(s.margins.iter().take(n_margins).map(f64::to_string));
            row.push(s.status.as_str().into());
            w.write_record(&row).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| KpcError::Corrupt(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| KpcError::Corrupt(e.to_string()))
    }
}

pub fn save_log(log: &TrajectoryLog, json_path: &Path) -> Result<()> {
    write_json(json_path, log)
}

pub fn save_log_csv(log: &TrajectoryLog, csv_path: &Path) -> Result<()> {
    write_atomic(csv_path, log.to_csv()?.as_bytes())
}

pub fn load_log(path: &Path) -> Result<TrajectoryLog> {
    let text = std::fs::read_to_string(path)?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    let found = v.get("schema_version").and_then(|x| x.as_u64()).unwrap_or(0) as u32;
    check_version("trajectory log", found, LOG_SCHEMA_VERSION)?;
    Ok(serde_json::from_value(v)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions {
    pub steps: usize,
    pub mode: RobustMode,
    pub srs: bool,
    pub seed: u64,
    pub record_timing: bool,
}

impl RunOptions {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        RunOptions {
            steps: cfg.control.steps,
            mode: cfg.control.mode,
            srs: cfg.control.srs,
            seed: cfg.seed,
            record_timing: true,
        }
    }
}

/// Everything the controller needs besides the state: problem template, plant and equilibrium.
#[derive(Clone, Debug)]
pub struct Controller {
    pub spec: OcpSpec,
    pub plant: Plant,
    pub equilibrium: Equilibrium,
    pub experiment: String,
}

impl Controller {
    pub fn new(cfg: &ExperimentConfig, bank: Arc<ModelBank>, mode: RobustMode, srs: bool) -> Result<Self> {
        if bank.n_x() != cfg.n_x() || bank.n_u() != cfg.n_u() || bank.horizon() != cfg.data.horizon {
            return Err(KpcError::Config("model bank does not match the configuration".into()));
        }
        let equilibrium = cfg.equilibrium();
        if !equilibrium.converged {
            log::warn!("equilibrium refinement stopped at residual {:.3e}", equilibrium.residual);
        }
        let spec = OcpSpec {
            bank,
            state_set: cfg.state_set()?,
            input_set: cfg.input_set()?,
            safe_set: cfg.safe_set(&equilibrium.state)?,
            cost: cfg.cost_weights(&equilibrium.state, &equilibrium.input)?,
            terminal_mode: cfg.control.terminal,
            robust_mode: mode,
            srs_enabled: srs,
            solver: cfg.solver.clone(),
        };
        spec.validate()?;
        Ok(Controller {
            spec,
            plant: cfg.plant.clone(),
            equilibrium,
            experiment: cfg.name.clone(),
        })
    }

    /// Runs `opts.steps` receding-horizon steps from `x0` on the true plant.
    pub fn run(&self, x0: &[f64], opts: &RunOptions) -> Result<TrajectoryLog> {
        let spec = &self.spec;
        let (n_x, n_u, n) = (spec.bank.n_x(), spec.bank.n_u(), spec.horizon());
        if x0.len() != n_x {
            return Err(KpcError::dim("initial state", n_x, x0.len()));
        }
        let (lower, upper) = spec.input_bounds()?;
        let u_eq = self.equilibrium.input.clone();
        let mut log = TrajectoryLog {
            schema_version: LOG_SCHEMA_VERSION,
            experiment: self.experiment.clone(),
            plant: self.plant.name().into(),
            mode: opts.mode,
            srs: opts.srs,
            horizon: n,
            n_x,
            n_u,
            x_eq: self.equilibrium.state.clone(),
            u_eq: u_eq.clone(),
            initial_state: x0.to_vec(),
            state_set: spec.state_set.clone(),
            steps: Vec::with_capacity(opts.steps),
            aborted: None,
        };
        let mut run_spec = spec.clone();
        run_spec.robust_mode = opts.mode;
        run_spec.srs_enabled = opts.srs;

        let mut x = x0.to_vec();
        let mut history = SrsHistory::for_horizon(n);
        let clipped_eq: Vec<f64> = u_eq.iter().enumerate().map(|(i, v)| v.clamp(lower[i], upper[i])).collect();
        let mut warm: Vec<f64> = clipped_eq.iter().cycle().take(n * n_u).cloned().collect();
        // Remaining tail of the last feasible plan.
        let mut tail: Vec<f64> = Vec::new();

        for k in 0..opts.steps {
            let started = Instant::now();
            let problem = match assemble(&run_spec, &x, Some((&history, k))) {
                Ok(p) => p,
                Err(e) => {
                    log.aborted = Some(format!("step {k}: {e}"));
                    break;
                }
            };
            let seed = opts.seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let sol = match problem.solve(&warm, seed) {
                Ok(s) => s,
                Err(e) => {
                    log.aborted = Some(format!("step {k}: {e}"));
                    break;
                }
            };
            let history_len = if problem.srs_active() { history.len() } else { 0 };
            let feasible = sol.status.is_feasible();
            let (input, source) = if feasible {
                tail = sol.u_star[n_u..].to_vec();
                history.push(HistoryEntry {
                    time: k,
                    state: x.clone(),
                    input: sol.u_star[..n_u].to_vec(),
                });
                warm = shift_warm_start(&sol.u_star, n_u, &lower, &upper);
                (sol.u_star[..n_u].to_vec(), InputSource::Optimal)
            } else {
                history.clear();
                if spec.safe_set.contains_with_tol(&x, VIOLATION_TOL) {
                    (clipped_eq.clone(), InputSource::SafePolicy)
                } else if tail.len() >= n_u {
                    let u: Vec<f64> = tail[..n_u].to_vec();
                    if tail.len() > n_u {
                        tail.drain(..n_u);
                    }
                    let mut next = tail.clone();
                    while next.len() < n * n_u {
                        next.extend_from_slice(&tail[tail.len() - n_u..]);
                    }
                    warm = next;
                    (u, InputSource::PlanTail)
                } else {
                    (clipped_eq.clone(), InputSource::SafePolicy)
                }
            };
            if !feasible {
                log::warn!("step {k}: no feasible plan, applying {source:?} input {input:?}");
            }
            let next = match self.plant.step(&x, &input) {
                Ok(v) => v,
                Err(e) => {
                    log.aborted = Some(format!("step {k}: {e}"));
                    break;
                }
            };
            let violation = !spec.state_set.contains_with_tol(&next, VIOLATION_TOL);
            if violation {
                log::info!("step {k}: state {next:?} outside the state set");
            }
            let in_box = (source == InputSource::Optimal && opts.mode == RobustMode::Robust)
                .then(|| sol.eval.boxes[0].contains_with_tol(&next, 1e-12));
            let wall = if opts.record_timing { started.elapsed().as_secs_f64() } else { 0.0 };
            log.steps.push(StepRecord {
                time: k,
                state: x.clone(),
                input,
                source,
                plan: sol.u_star.clone(),
                x_nominal: sol.eval.x_nominal.clone(),
                boxes: sol.eval.boxes.clone(),
                srs_boxes: sol.eval.srs_boxes.clone(),
                margins: sol.eval.margins.clone(),
                unrelaxed_margins: sol.eval.unrelaxed_margins.clone(),
                terminal_margins: sol.eval.terminal_margins.clone(),
                status: sol.status,
                cost: sol.eval.cost,
                iterations: sol.iterations,
                history_len,
                next_state: next.clone(),
                violation,
                next_in_first_box: in_box,
                wall_time_s: wall,
            });
            x = next;
        }
        Ok(log)
    }
}

/// Data generation, training and one closed-loop run per configured initial condition.
pub struct ExperimentOutcome {
    pub data: Vec<StepData>,
    pub bank: Arc<ModelBank>,
    pub logs: Vec<TrajectoryLog>,
}

pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentOutcome> {
    let data = generate_all(cfg, opts.seed)?;
    let bank = Arc::new(train(cfg, &data)?);
    let ctl = Controller::new(cfg, Arc::clone(&bank), opts.mode, opts.srs)?;
    let logs = cfg
        .control
        .initial_conditions
        .iter()
        .map(|x0| ctl.run(x0, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentOutcome { data, bank, logs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plants::PendulumParams;

    fn ranges() -> SamplingRanges {
        SamplingRanges {
            state_lower: vec![-1.0, -1.0],
            state_upper: vec![1.0, 1.0],
            input_lower: vec![-1.0],
            input_upper: vec![1.0],
        }
    }

    #[test]
    fn noiseless_one_step_targets_are_plant_outputs() {
        let plant = Plant::Pendulum(PendulumParams::default());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = generate_dataset(&plant, 1, 25, &ranges(), &[0.0, 0.0], &mut rng).unwrap();
        assert_eq!(d.len(), 25);
        for (z, k) in d.features.iter().zip(0..) {
            let x = plant.step(&z[..2], &z[2..]).unwrap();
            assert_eq!(x[0], d.targets[0][k]);
            assert_eq!(x[1], d.targets[1][k]);
        }
    }

    #[test]
    fn noisy_targets_stay_within_bound_and_reproduce() {
        let plant = Plant::Pendulum(PendulumParams::default());
        let gen = |seed| generate_dataset(&plant, 3, 40, &ranges(), &[0.01, 0.02], &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let a = gen(9);
        assert_eq!(a, gen(9));
        assert_ne!(a, gen(10));
        for (z, k) in a.features.iter().zip(0..) {
            assert_eq!(z.len(), 5);
            let x = plant.rollout(&z[..2], &z[2..]).unwrap();
            assert!((x[0] - a.targets[0][k]).abs() <= 0.01);
            assert!((x[1] - a.targets[1][k]).abs() <= 0.02);
        }
    }

    #[test]
    fn diverging_plant_exhausts_redraws() {
        let plant = Plant::Pendulum(PendulumParams {
            mass: 1e-300,
            ..PendulumParams::default()
        });
        let wide = SamplingRanges {
            input_lower: vec![1e300],
            input_upper: vec![1e300],
            ..ranges()
        };
        let r = generate_dataset(&plant, 1, 2, &wide, &[0.0, 0.0], &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(KpcError::Divergence(_))));
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        let leftovers: Vec<_> = std::fs::read_dir(p.parent().unwrap()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
    }
}
