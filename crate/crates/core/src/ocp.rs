//! The predictive-control problem over the condensed input sequence.
//!
//! States are replaced by the multi-step predictors, so the only decision variables are the N
//! inputs. State constraints enter through the support-function margins of the confidence boxes
//! (or of the nominal points in [`RobustMode::Nominal`]). The NLP works on inputs rescaled to
//! `[0, 1]` and on smoothed bounds; every returned solution is re-checked with exact boxes.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KpcError, Result};
use crate::model_bank::{ModelBank, StateBox};
use crate::nlp::{minimize_al, AlOptions, ConstrainedProblem, Evaluation};
use crate::robust::{intersect_boxes, robustify_step, srs_collect, Polytope, SrsHistory};

pub use crate::smoothing::smooth_abs;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalMode {
    #[default]
    Penalty,
    SetConstraint,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobustMode {
    #[default]
    Robust,
    Nominal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SafeSet {
    Point(Vec<f64>),
    Polytope(Polytope),
}

impl SafeSet {
    pub fn contains_with_tol(&self, x: &[f64], tol: f64) -> bool {
        match self {
            SafeSet::Point(p) => p.len() == x.len() && p.iter().zip(x).all(|(a, b)| (a - b).abs() <= tol),
            SafeSet::Polytope(p) => p.contains_with_tol(x, tol),
        }
    }
}

/// Quadratic stage and terminal weights around a reference pair.
#[derive(Clone, Debug, PartialEq)]
pub struct CostWeights {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p_f: DMatrix<f64>,
    pub x_ref: Vec<f64>,
    pub u_ref: Vec<f64>,
}

impl CostWeights {
    pub fn diagonal(q: &[f64], r: &[f64], p_f: &[f64], x_ref: Vec<f64>, u_ref: Vec<f64>) -> Self {
        CostWeights {
            q: DMatrix::from_diagonal(&q.to_vec().into()),
            r: DMatrix::from_diagonal(&r.to_vec().into()),
            p_f: DMatrix::from_diagonal(&p_f.to_vec().into()),
            x_ref,
            u_ref,
        }
    }

    /// Q = I, R = 0.1·I, P_f = 10·I.
    pub fn standard(x_ref: Vec<f64>, u_ref: Vec<f64>) -> Self {
        let (n, m) = (x_ref.len(), u_ref.len());
        CostWeights::diagonal(&vec![1.0; n], &vec![0.1; m], &vec![10.0; n], x_ref, u_ref)
    }

    pub fn validate(&self, n_x: usize, n_u: usize) -> Result<()> {
        let shape = |name: &str, m: &DMatrix<f64>, n: usize| {
            if m.nrows() != n || m.ncols() != n {
                return Err(KpcError::Config(format!("{name} must be {n}×{n}, got {}×{}", m.nrows(), m.ncols())));
            }
            if (m - m.transpose()).amax() > 1e-12 * (1.0 + m.amax()) {
                return Err(KpcError::Config(format!("{name} is not symmetric")));
            }
            Ok(m.clone().symmetric_eigenvalues().min())
        };
        if shape("Q", &self.q, n_x)? < -1e-12 {
            return Err(KpcError::Config("Q must be positive semidefinite".into()));
        }
        if shape("P_f", &self.p_f, n_x)? < -1e-12 {
            return Err(KpcError::Config("P_f must be positive semidefinite".into()));
        }
        if shape("R", &self.r, n_u)? <= 0.0 {
            return Err(KpcError::Config("R must be positive definite".into()));
        }
        if self.x_ref.len() != n_x || self.u_ref.len() != n_u {
            return Err(KpcError::Config("reference dimensions do not match the model bank".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Random starts in addition to the warm start.
    pub restarts: usize,
    pub max_outer: usize,
    pub max_inner: usize,
    pub feas_tol: f64,
    pub abs_smoothing_eps: f64,
    /// Solve the starts on separate threads.
    pub parallel: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            restarts: 4,
            max_outer: 30,
            max_inner: 500,
            feas_tol: 1e-6,
            abs_smoothing_eps: 1e-12,
            parallel: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OcpSpec {
    pub bank: Arc<ModelBank>,
    pub state_set: Polytope,
    pub input_set: Polytope,
    pub safe_set: SafeSet,
    pub cost: CostWeights,
    pub terminal_mode: TerminalMode,
    pub robust_mode: RobustMode,
    pub srs_enabled: bool,
    pub solver: SolverOptions,
}

impl OcpSpec {
    pub fn validate(&self) -> Result<()> {
        let (n_x, n_u) = (self.bank.n_x(), self.bank.n_u());
        self.cost.validate(n_x, n_u)?;
        self.state_set.validate()?;
        if let Some(d) = self.state_set.dim() {
            if d != n_x {
                return Err(KpcError::Config(format!("state set has dimension {d}, bank has {n_x}")));
            }
        }
        self.input_bounds()?;
        match (&self.safe_set, self.terminal_mode) {
            (SafeSet::Point(_), TerminalMode::SetConstraint) => {
                return Err(KpcError::Config("a singleton safe set requires the terminal penalty".into()))
            }
            (SafeSet::Point(p), _) if p.len() != n_x => {
                return Err(KpcError::Config("safe point dimension does not match the state".into()))
            }
            (SafeSet::Polytope(p), _) => p.validate()?,
            _ => {}
        }
        let s = &self.solver;
        if !(s.feas_tol > 0.0 && s.abs_smoothing_eps > 0.0) {
            return Err(KpcError::Config("feas_tol and abs_smoothing_eps must be positive".into()));
        }
        Ok(())
    }

    /// Finite per-component input bounds; the input set must be a box.
    pub fn input_bounds(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let n_u = self.bank.n_u();
        let (lo, hi) = self
            .input_set
            .as_bounds()
            .ok_or_else(|| KpcError::Config("input set must be an axis-aligned box".into()))?;
        if lo.len() != n_u || lo.iter().chain(&hi).any(|v| !v.is_finite()) || lo.iter().zip(&hi).any(|(l, h)| l > h) {
            return Err(KpcError::Config("input set must be a bounded nonempty box".into()));
        }
        Ok((lo, hi))
    }

    pub fn horizon(&self) -> usize {
        self.bank.horizon()
    }
}

/// One instance of the control problem at a measured state.
#[derive(Clone, Debug)]
pub struct OcpProblem {
    spec: OcpSpec,
    x0: Vec<f64>,
    history: Option<(SrsHistory, usize)>,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

/// Builds the problem at `x0`; `history` is the closed-loop history together with the
/// current time and is only used when SRS is enabled in robust mode.
pub fn assemble(spec: &OcpSpec, x0: &[f64], history: Option<(&SrsHistory, usize)>) -> Result<OcpProblem> {
    spec.validate()?;
    if x0.len() != spec.bank.n_x() {
        return Err(KpcError::dim("initial state", spec.bank.n_x(), x0.len()));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(KpcError::InvalidArgument("initial state is not finite".into()));
    }
    let history = match (spec.srs_enabled, spec.robust_mode, history) {
        (true, RobustMode::Robust, Some((h, now))) if !h.is_empty() => {
            h.validate(now)?;
            Some((h.clone(), now))
        }
        (true, RobustMode::Robust, _) => {
            log::debug!("no usable history, solving without relaxation");
            None
        }
        _ => None,
    };
    let (lower, upper) = spec.input_bounds()?;
    Ok(OcpProblem {
        spec: spec.clone(),
        x0: x0.to_vec(),
        history,
        lower,
        upper,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Feasible,
    MaxIterFeasible,
    InfeasibleNoSolution,
}

impl SolveStatus {
    pub fn is_feasible(self) -> bool {
        self != SolveStatus::InfeasibleNoSolution
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SolveStatus::Feasible => "feasible",
            SolveStatus::MaxIterFeasible => "max_iter_feasible",
            SolveStatus::InfeasibleNoSolution => "infeasible",
        }
    }
}

/// Exact quantities of a given input sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactEvaluation {
    /// Nominal predictions x̂_1, …, x̂_N.
    pub x_nominal: Vec<Vec<f64>>,
    /// Confidence boxes 𝒳_1, …, 𝒳_N (points in nominal mode).
    pub boxes: Vec<StateBox>,
    /// Intersections with the past confidence sets, when relaxation is active.
    pub srs_boxes: Option<Vec<StateBox>>,
    /// Margins the feasibility decision uses, step-major: N × (number of half-spaces of 𝕏).
    pub margins: Vec<f64>,
    /// Margins of the plain boxes, same layout.
    pub unrelaxed_margins: Vec<f64>,
    /// Margins of 𝒳_N against the safe set in [`TerminalMode::SetConstraint`].
    pub terminal_margins: Vec<f64>,
    pub cost: f64,
}

impl ExactEvaluation {
    pub fn max_margin(&self) -> f64 {
        self.margins
            .iter()
            .chain(&self.terminal_margins)
            .fold(f64::NEG_INFINITY, |a, m| a.max(*m))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcpSolution {
    /// Flattened inputs u₀, …, u_{N−1}.
    pub u_star: Vec<f64>,
    pub eval: ExactEvaluation,
    pub status: SolveStatus,
    pub iterations: usize,
    pub restarts_used: usize,
}

impl OcpSolution {
    pub fn first_input(&self, n_u: usize) -> &[f64] {
        &self.u_star[..n_u]
    }
}

impl OcpProblem {
    pub fn spec(&self) -> &OcpSpec {
        &self.spec
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    pub fn num_vars(&self) -> usize {
        self.spec.horizon() * self.spec.bank.n_u()
    }

    /// Robust state-constraint margins, excluding terminal ones.
    pub fn num_state_margins(&self) -> usize {
        self.spec.horizon() * self.spec.state_set.num_constraints()
    }

    fn num_terminal_margins(&self) -> usize {
        match (&self.spec.safe_set, self.spec.terminal_mode) {
            (SafeSet::Polytope(p), TerminalMode::SetConstraint) => p.num_constraints(),
            _ => 0,
        }
    }

    pub fn num_margins(&self) -> usize {
        self.num_state_margins() + self.num_terminal_margins()
    }

    pub fn srs_active(&self) -> bool {
        self.history.is_some()
    }

    pub fn input_bounds(&self) -> (&[f64], &[f64]) {
        (&self.lower, &self.upper)
    }

    pub fn clip(&self, u: &[f64]) -> Vec<f64> {
        let n_u = self.spec.bank.n_u();
        u.iter()
            .enumerate()
            .map(|(i, v)| v.clamp(self.lower[i % n_u], self.upper[i % n_u]))
            .collect()
    }

    fn stage_cost(&self, x: &[f64], w: &DMatrix<f64>, r: &[f64]) -> f64 {
        let d: Vec<f64> = x.iter().zip(r).map(|(a, b)| a - b).collect();
        let mut s = 0.0;
        for i in 0..d.len() {
            for j in 0..d.len() {
                s += d[i] * w[(i, j)] * d[j];
            }
        }
        s
    }

    /// Cost of `u` given nominal predictions x̂_1..x̂_N.
    fn cost_of(&self, u: &[f64], x_nominal: &[Vec<f64>]) -> f64 {
        let c = &self.spec.cost;
        let n_u = self.spec.bank.n_u();
        let n = self.spec.horizon();
        let mut total = self.stage_cost(&self.x0, &c.q, &c.x_ref);
        for t in 0..n {
            if t > 0 {
                total += self.stage_cost(&x_nominal[t - 1], &c.q, &c.x_ref);
            }
            total += self.stage_cost(&u[t * n_u..(t + 1) * n_u], &c.r, &c.u_ref);
        }
        total + self.stage_cost(&x_nominal[n - 1], &c.p_f, &c.x_ref)
    }

    /// Exact boxes, margins and cost at `u` (no smoothing).
    pub fn evaluate_exact(&self, u: &[f64]) -> Result<ExactEvaluation> {
        let bank = &self.spec.bank;
        let n = self.spec.horizon();
        let n_u = bank.n_u();
        if u.len() != n * n_u {
            return Err(KpcError::dim("input sequence", n * n_u, u.len()));
        }
        let nominal = self.spec.robust_mode == RobustMode::Nominal;
        let mut x_nominal = Vec::with_capacity(n);
        let mut boxes = Vec::with_capacity(n);
        let mut srs_boxes = self.history.as_ref().map(|_| Vec::with_capacity(n));
        let mut margins = Vec::with_capacity(self.num_state_margins());
        let mut unrelaxed = Vec::with_capacity(self.num_state_margins());
        for t in 1..=n {
            let useq = &u[..t * n_u];
            let b = bank.confidence_box(t, &self.x0, useq)?;
            let center = b.center();
            let b = if nominal { StateBox::point(&center) } else { b };
            let plain = robustify_step(&self.spec.state_set, &b)?;
            if let (Some((hist, now)), Some(out)) = (&self.history, srs_boxes.as_mut()) {
                let candidates = srs_collect(bank, hist, *now, t, &self.x0, useq)?;
                let relaxed = match intersect_boxes(&candidates) {
                    Ok(ib) => ib,
                    Err(e) => {
                        log::warn!("step {t}: {e}; using the unrelaxed box");
                        b.clone()
                    }
                };
                margins.extend(robustify_step(&self.spec.state_set, &relaxed)?);
                out.push(relaxed);
            } else {
                margins.extend_from_slice(&plain);
            }
            unrelaxed.extend(plain);
            x_nominal.push(center);
            boxes.push(b);
        }
        let terminal_margins = match (&self.spec.safe_set, self.spec.terminal_mode) {
            (SafeSet::Polytope(p), TerminalMode::SetConstraint) => robustify_step(p, &boxes[n - 1])?,
            _ => Vec::new(),
        };
        let cost = self.cost_of(u, &x_nominal);
        Ok(ExactEvaluation {
            x_nominal,
            boxes,
            srs_boxes,
            margins,
            unrelaxed_margins: unrelaxed,
            terminal_margins,
            cost,
        })
    }

    /// Inputs inside 𝕌 and every exact margin at most `feas_tol`.
    pub fn is_feasible(&self, u: &[f64], eval: &ExactEvaluation) -> bool {
        let n_u = self.spec.bank.n_u();
        let tol = self.spec.solver.feas_tol;
        u.iter()
            .enumerate()
            .all(|(i, v)| *v >= self.lower[i % n_u] && *v <= self.upper[i % n_u])
            && eval.max_margin() <= tol
    }

    /// Past feature prefixes usable at step `t`, nearest first.
    fn srs_prefixes(&self, t: usize) -> Vec<(usize, Vec<f64>)> {
        let Some((hist, _)) = &self.history else { return Vec::new() };
        let last = self.spec.horizon().min(t + hist.len());
        ((t + 1)..=last)
            .filter_map(|i| hist.feature_prefix(i - t).map(|z| (i, z)))
            .collect()
    }

    /// For each step and state dimension, the candidate giving the tightest lower and upper bound
    /// at `u`. Candidate 0 is the step's own box.
    fn select_srs(&self, u: &[f64]) -> Result<Vec<Vec<(usize, usize)>>> {
        let bank = &self.spec.bank;
        let n_u = bank.n_u();
        let mut out = Vec::with_capacity(self.spec.horizon());
        for t in 1..=self.spec.horizon() {
            let useq = &u[..t * n_u];
            let mut cands = vec![bank.confidence_box(t, &self.x0, useq)?];
            for (i, mut z) in self.srs_prefixes(t) {
                z.extend_from_slice(useq);
                cands.push(bank.box_at_feature(i, &z)?);
            }
            let pick = (0..bank.n_x())
                .map(|j| {
                    let mut lo = 0;
                    let mut hi = 0;
                    for (k, c) in cands.iter().enumerate() {
                        if c.lower[j] > cands[lo].lower[j] {
                            lo = k;
                        }
                        if c.upper[j] < cands[hi].upper[j] {
                            hi = k;
                        }
                    }
                    (lo, hi)
                })
                .collect();
            out.push(pick);
        }
        Ok(out)
    }

    /// Solves from the clipped `warm_start` and `restarts` uniform draws seeded by `seed`.
    pub fn solve(&self, warm_start: &[f64], seed: u64) -> Result<OcpSolution> {
        let nv = self.num_vars();
        if warm_start.len() != nv {
            return Err(KpcError::dim("warm start", nv, warm_start.len()));
        }
        let opts = &self.spec.solver;
        let mut starts = vec![self.clip(warm_start)];
        for k in 0..opts.restarts {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64 + 1);
            let n_u = self.spec.bank.n_u();
            starts.push(
                (0..nv)
                    .map(|i| {
                        let (l, h) = (self.lower[i % n_u], self.upper[i % n_u]);
                        if h > l {
                            rng.gen_range(l..=h)
                        } else {
                            l
                        }
                    })
                    .collect(),
            );
        }

        let run = |s: &Vec<f64>| self.solve_from(s);
        let results: Vec<Result<Candidate>> = if opts.parallel && starts.len() > 1 {
            std::thread::scope(|scope| {
                let handles: Vec<_> = starts.iter().map(|s| scope.spawn(move || run(s))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| Err(KpcError::Divergence("solver thread panicked".into()))))
                    .collect()
            })
        } else {
            starts.iter().map(run).collect()
        };

        let mut best: Option<Candidate> = None;
        let mut iterations = 0;
        let mut first_err = None;
        for r in results {
            match r {
                Ok(c) => {
                    iterations += c.iterations;
                    let better = match &best {
                        None => true,
                        Some(b) => c.rank() < b.rank(),
                    };
                    if better {
                        best = Some(c);
                    }
                }
                Err(e) => {
                    log::debug!("start failed: {e}");
                    first_err.get_or_insert(e);
                }
            }
        }
        let best = match (best, first_err) {
            (Some(b), _) => b,
            (None, Some(e)) => return Err(e),
            (None, None) => unreachable!("at least the warm start is tried"),
        };
        let status = match (best.feasible, best.converged) {
            (true, true) => SolveStatus::Feasible,
            (true, false) => SolveStatus::MaxIterFeasible,
            (false, _) => SolveStatus::InfeasibleNoSolution,
        };
        Ok(OcpSolution {
            u_star: best.u,
            eval: best.eval,
            status,
            iterations,
            restarts_used: starts.len() - 1,
        })
    }

    /// Smoothed cost and margins at `u` with derivatives in input units, as seen by the solver
    /// (SRS candidates frozen at `u`).
    pub fn smoothed_evaluation(&self, u: &[f64]) -> Result<Evaluation> {
        let nv = self.num_vars();
        if u.len() != nv {
            return Err(KpcError::dim("input sequence", nv, u.len()));
        }
        let selection = if self.history.is_some() {
            Some(self.select_srs(u)?)
        } else {
            None
        };
        let view = Scaled {
            problem: self,
            selection,
        };
        let s: Vec<f64> = (0..nv).map(|i| view.to_unit(i, u[i])).collect();
        let mut out = Evaluation::zeros(nv, self.num_margins());
        view.evaluate(&s, &mut out);
        for i in 0..nv {
            let w = view.width(i);
            let scale = if w > 0.0 { 1.0 / w } else { 0.0 };
            out.gradient[i] *= scale;
            for r in 0..out.jacobian.nrows() {
                out.jacobian[(r, i)] *= scale;
            }
        }
        Ok(out)
    }

    fn solve_from(&self, start: &[f64]) -> Result<Candidate> {
        let nv = self.num_vars();
        let selection = if self.history.is_some() {
            Some(self.select_srs(start)?)
        } else {
            None
        };
        let view = Scaled {
            problem: self,
            selection,
        };
        let s0: Vec<f64> = (0..nv).map(|i| view.to_unit(i, start[i])).collect();
        let opts = &self.spec.solver;
        let al = AlOptions {
            max_outer: opts.max_outer,
            max_inner: opts.max_inner,
            feas_tol: 0.1 * opts.feas_tol,
            ..AlOptions::default()
        };
        let res = minimize_al(&view, &s0, &vec![0.0; nv], &vec![1.0; nv], &al);
        let mut u: Vec<f64> = (0..nv).map(|i| view.to_input(i, res.x[i])).collect();
        u = self.clip(&u);
        let iterations = res.outer_iterations + res.inner_iterations;
        if res.non_finite {
            log::debug!("non-finite values at a start point");
        }
        let eval = self.evaluate_exact(&u)?;
        let feasible = self.is_feasible(&u, &eval);
        let cand = Candidate {
            feasible,
            converged: res.converged,
            violation: eval.max_margin().max(0.0),
            u,
            eval,
            iterations,
        };
        // The start itself may already beat a poor local run.
        let start_eval = self.evaluate_exact(start)?;
        if self.is_feasible(start, &start_eval) && (!cand.feasible || start_eval.cost < cand.eval.cost) {
            return Ok(Candidate {
                feasible: true,
                converged: false,
                violation: start_eval.max_margin().max(0.0),
                u: start.to_vec(),
                eval: start_eval,
                iterations,
            });
        }
        Ok(cand)
    }
}

struct Candidate {
    feasible: bool,
    converged: bool,
    violation: f64,
    u: Vec<f64>,
    eval: ExactEvaluation,
    iterations: usize,
}

impl Candidate {
    /// Feasible points by cost, then the rest by violation.
    fn rank(&self) -> (u8, f64) {
        if self.feasible {
            (0, self.eval.cost)
        } else {
            (1, self.violation)
        }
    }
}

/// The smoothed NLP in unit-box coordinates.
struct Scaled<'a> {
    problem: &'a OcpProblem,
    selection: Option<Vec<Vec<(usize, usize)>>>,
}

impl Scaled<'_> {
    fn width(&self, i: usize) -> f64 {
        let n_u = self.problem.spec.bank.n_u();
        self.problem.upper[i % n_u] - self.problem.lower[i % n_u]
    }

    fn to_unit(&self, i: usize, u: f64) -> f64 {
        let w = self.width(i);
        if w > 0.0 {
            (u - self.problem.lower[i % self.problem.spec.bank.n_u()]) / w
        } else {
            0.0
        }
    }

    fn to_input(&self, i: usize, s: f64) -> f64 {
        self.problem.lower[i % self.problem.spec.bank.n_u()] + self.width(i) * s
    }
}

/// Lower and upper bound of a smoothed box with their Jacobians w.r.t. the inputs it depends on.
struct BoundRows {
    lower: Vec<f64>,
    upper: Vec<f64>,
    lower_jac: DMatrix<f64>,
    upper_jac: DMatrix<f64>,
}

impl ConstrainedProblem for Scaled<'_> {
    fn dim(&self) -> usize {
        self.problem.num_vars()
    }

    fn num_constraints(&self) -> usize {
        self.problem.num_margins()
    }

    fn evaluate(&self, s: &[f64], out: &mut Evaluation) {
        let p = self.problem;
        let spec = &p.spec;
        let bank = &spec.bank;
        let (n_x, n_u, n) = (bank.n_x(), bank.n_u(), spec.horizon());
        let nv = n * n_u;
        let eps = spec.solver.abs_smoothing_eps;
        let nominal = spec.robust_mode == RobustMode::Nominal;
        let u: Vec<f64> = (0..nv).map(|i| self.to_input(i, s[i])).collect();

        out.objective = 0.0;
        out.gradient.iter_mut().for_each(|g| *g = 0.0);
        out.jacobian.fill(0.0);
        let c = &spec.cost;
        out.objective += p.stage_cost(&p.x0, &c.q, &c.x_ref);
        for t in 0..n {
            let du: Vec<f64> = (0..n_u).map(|k| u[t * n_u + k] - c.u_ref[k]).collect();
            for a in 0..n_u {
                for b in 0..n_u {
                    out.objective += du[a] * c.r[(a, b)] * du[b];
                    out.gradient[t * n_u + a] += (c.r[(a, b)] + c.r[(b, a)]) * du[b];
                }
            }
        }

        let h = &spec.state_set;
        let m_x = h.num_constraints();
        for t in 1..=n {
            let cols = t * n_u;
            let useq = &u[..cols];
            let own = match bank.confidence_box_gradients(t, &p.x0, useq, eps) {
                Ok(g) => g,
                Err(_) => {
                    out.objective = f64::NAN;
                    return;
                }
            };

            // Stage or terminal cost of the nominal prediction.
            let w = if t == n { &c.p_f } else { &c.q };
            let dx: Vec<f64> = own.center.iter().zip(&c.x_ref).map(|(a, b)| a - b).collect();
            for a in 0..n_x {
                for b in 0..n_x {
                    out.objective += dx[a] * w[(a, b)] * dx[b];
                }
            }
            for a in 0..n_x {
                let coef: f64 = (0..n_x).map(|b| (w[(a, b)] + w[(b, a)]) * dx[b]).sum();
                for col in 0..cols {
                    out.gradient[col] += coef * own.center_jac[(a, col)];
                }
            }

            let rows = if nominal {
                BoundRows {
                    lower: own.center.clone(),
                    upper: own.center.clone(),
                    lower_jac: own.center_jac.clone(),
                    upper_jac: own.center_jac.clone(),
                }
            } else {
                let mut rows = BoundRows {
                    lower: own.center.iter().zip(&own.half_widths).map(|(a, b)| a - b).collect(),
                    upper: own.center.iter().zip(&own.half_widths).map(|(a, b)| a + b).collect(),
                    lower_jac: &own.center_jac - &own.half_jac,
                    upper_jac: &own.center_jac + &own.half_jac,
                };
                if let Some(sel) = &self.selection {
                    let needed: Vec<usize> = sel[t - 1].iter().flat_map(|(a, b)| [*a, *b]).filter(|k| *k > 0).collect();
                    for (k, (i, mut z)) in p.srs_prefixes(t).into_iter().enumerate() {
                        let k = k + 1;
                        if !needed.contains(&k) {
                            continue;
                        }
                        z.extend_from_slice(useq);
                        let e = match bank.eval_step_smoothed(i, &z, eps) {
                            Ok(e) => e,
                            Err(_) => {
                                out.objective = f64::NAN;
                                return;
                            }
                        };
                        let off = z.len() - cols;
                        for (j, (lo_k, hi_k)) in sel[t - 1].iter().enumerate() {
                            if *lo_k == k {
                                rows.lower[j] = e.center[j] - e.half_widths[j];
                                for col in 0..cols {
                                    rows.lower_jac[(j, col)] = e.center_jac[(j, off + col)] - e.half_jac[(j, off + col)];
                                }
                            }
                            if *hi_k == k {
                                rows.upper[j] = e.center[j] + e.half_widths[j];
                                for col in 0..cols {
                                    rows.upper_jac[(j, col)] = e.center_jac[(j, off + col)] + e.half_jac[(j, off + col)];
                                }
                            }
                        }
                    }
                }
                rows
            };

            for (k, (normal, offset)) in h.normals.iter().zip(&h.offsets).enumerate() {
                let row = (t - 1) * m_x + k;
                out.constraints[row] = support_value(normal, *offset, &rows);
                add_support_jac(normal, &rows, cols, &mut out.jacobian, row);
            }
            if t == n {
                if let (SafeSet::Polytope(safe), TerminalMode::SetConstraint) = (&spec.safe_set, spec.terminal_mode) {
                    // The terminal constraint always uses the step's own box.
                    let own_rows = BoundRows {
                        lower: own.center.iter().zip(&own.half_widths).map(|(a, b)| a - b).collect(),
                        upper: own.center.iter().zip(&own.half_widths).map(|(a, b)| a + b).collect(),
                        lower_jac: &own.center_jac - &own.half_jac,
                        upper_jac: &own.center_jac + &own.half_jac,
                    };
                    for (k, (normal, offset)) in safe.normals.iter().zip(&safe.offsets).enumerate() {
                        let row = n * m_x + k;
                        out.constraints[row] = support_value(normal, *offset, &own_rows);
                        add_support_jac(normal, &own_rows, cols, &mut out.jacobian, row);
                    }
                }
            }
        }

        // Chain rule into unit coordinates.
        for i in 0..nv {
            let w = self.width(i);
            out.gradient[i] *= w;
            for r in 0..out.jacobian.nrows() {
                out.jacobian[(r, i)] *= w;
            }
        }
    }
}

fn support_value(normal: &[f64], offset: f64, rows: &BoundRows) -> f64 {
    normal
        .iter()
        .enumerate()
        .map(|(j, h)| {
            if *h > 0.0 {
                h * rows.upper[j]
            } else if *h < 0.0 {
                h * rows.lower[j]
            } else {
                0.0
            }
        })
        .sum::<f64>()
        - offset
}

fn add_support_jac(normal: &[f64], rows: &BoundRows, cols: usize, jac: &mut DMatrix<f64>, row: usize) {
    for (j, h) in normal.iter().enumerate() {
        let src = if *h > 0.0 {
            &rows.upper_jac
        } else if *h < 0.0 {
            &rows.lower_jac
        } else {
            continue;
        };
        for col in 0..cols {
            jac[(row, col)] += h * src[(j, col)];
        }
    }
}

/// Drops u₀, repeats the last input and clips to the input bounds.
pub fn shift_warm_start(previous: &[f64], n_u: usize, lower: &[f64], upper: &[f64]) -> Vec<f64> {
    let n = previous.len() / n_u.max(1);
    let mut out = Vec::with_capacity(previous.len());
    for t in 0..n {
        let src = (t + 1).min(n - 1);
        out.extend_from_slice(&previous[src * n_u..(src + 1) * n_u]);
    }
    out.iter()
        .enumerate()
        .map(|(i, v)| v.clamp(lower[i % n_u], upper[i % n_u]))
        .collect()
}
