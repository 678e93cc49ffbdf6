//! Long-run equilibrium solver.
//!
//! A long-run equilibrium is a worker distribution `h*` in the feasible set
//! `Ω = {h ≥ 0, Σ h = H}` where no occupied cell offers less utility than the
//! common level and no vacant cell offers more. Equivalently, `h*` is a fixed
//! point of the projection dynamics `F(h) = Proj_Ω(h + v(h))`, and a zero of
//! the merit function
//!
//! ```text
//! G(h) = −v(h)·(h − F(h)) − ½ ‖F(h) − h‖²
//! ```
//!
//! which is nonnegative on `Ω` and vanishes exactly at equilibria. The solver
//! runs a backtracking (Armijo) descent on `G` along the direction
//! `d = F(h) − h`, with a small forced "escape" step whenever the line search
//! stalls — plateaus of `G` are common and the escape step pushes through
//! them along the dynamics instead of giving up. Every step is a convex
//! combination of `h` and `F(h)`, so iterates stay feasible without repair.
//!
//! Non-convergence within the iteration budget is a reported outcome, not an
//! error: the caller gets the final state and diagnostics either way.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::economy::{ShortRunContext, ShortRunState, WorkerDistribution};
use crate::error::Error;
use crate::Result;

/// Relative mass error beyond which a projected target is considered
/// numerically meaningless (see [`evaluate`]). Legitimate rounding keeps the
/// error many orders of magnitude below this.
const PROJECTION_MASS_SLACK: f64 = 1e-6;

/// Half-width of the relative-change window inside which the line-search
/// engine updates logarithms and reciprocals of the access field by short
/// series instead of full scalar evaluations (see [`HotEngine::eval_trial`]).
const SERIES_WINDOW: f64 = 1.0 / 128.0;

/// A trial access value that cancels below this fraction of the magnitudes
/// entering its update has lost too many digits; the trial is then
/// recomputed from scratch.
const CANCEL_GUARD: f64 = 6e-8;

/// How many adoptions the incrementally maintained access state may survive
/// before it is recomputed exactly, bounding rounding drift.
const REFRESH_EVERY: u32 = 64;

/// Trust window of the quadratic line-search screen: the largest relative
/// access or expenditure change along the direction for which the screen's
/// second-order profile is considered at all.
const QUAD_WINDOW: f64 = 1.0 / 256.0;

/// Fraction of the Armijo decrease threshold that the screen's predicted
/// truncation error may reach; the trust region shrinks until that bound
/// holds, and steps beyond it are evaluated exactly.
const QUAD_MARGIN: f64 = 0.05;

/// An [`Evaluation`] marking `h` as numerically unusable: zero direction,
/// `NaN` merit. The line search never accepts such a point.
fn unusable_point(h: WorkerDistribution, state: ShortRunState) -> Evaluation {
    let zeros = Array2::zeros(h.h.raw_dim());
    Evaluation {
        target: WorkerDistribution { h: h.h.clone() },
        h,
        state,
        direction: zeros,
        direction_norm_sq: f64::NAN,
        merit: f64::NAN,
    }
}

/// Euclidean projection of an arbitrary array onto
/// `{z ≥ 0, Σ z = total}`.
///
/// Classic sort-and-threshold algorithm: entries become `max(x − λ, 0)` with
/// the unique `λ` making the mass come out right.
pub fn project_feasible(x: &Array2<f64>, total: f64) -> Result<Array2<f64>> {
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::param("total", format!("projection mass must be positive, got {total}")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("projection input contains non-finite entries".into()));
    }
    let flat = x.as_slice().expect("worker arrays are standard layout");
    let lambda = simplex_threshold(flat, total);
    Ok(x.mapv(|v| (v - lambda).max(0.0)))
}

/// The threshold `λ` of the simplex projection of `xs`.
fn simplex_threshold(xs: &[f64], total: f64) -> f64 {
    let mut sorted = xs.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut prefix = 0.0;
    let mut lambda = (sorted[0] - total).min(0.0); // fallback; overwritten below
    for (j, &v) in sorted.iter().enumerate() {
        prefix += v;
        let candidate = (prefix - total) / (j + 1) as f64;
        if v - candidate > 0.0 {
            lambda = candidate;
        } else {
            break;
        }
    }
    lambda
}

/// Tuning constants of the merit descent.
///
/// The defaults are the tested configuration; they balance patience (the
/// minimum-step schedule loosens as iterations accumulate) against the cost
/// of each merit evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Armijo sufficient-decrease coefficient `δ`.
    pub armijo_delta: f64,
    /// Backtracking ratio `γ`; trial steps are `γ^k`.
    pub backtrack: f64,
    /// Give up on the line search after this many backtracks.
    pub max_backtracks: u32,
    /// Declare convergence when `G` falls below this.
    pub merit_tol: f64,
    /// Iteration budget.
    pub max_iter: u64,
    /// Base of the minimum-step schedule: `γ_min(n) = base · 10^(−min(cap, rate·n))`.
    pub min_step_base: f64,
    pub min_step_decade_cap: f64,
    pub min_step_decade_rate: f64,
    /// Escape step length while `G` is still above `escape_threshold` …
    pub escape_far: f64,
    /// … and once it has dropped below (longer: near a solution the dynamics
    /// are a contraction and larger pushes finish the job).
    pub escape_near: f64,
    pub escape_threshold: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            armijo_delta: 1e-5,
            backtrack: 0.8,
            max_backtracks: 60,
            merit_tol: 1e-8,
            max_iter: 2_000_000,
            min_step_base: 5e-3,
            min_step_decade_cap: 5.0,
            min_step_decade_rate: 1e-6,
            escape_far: 5e-3,
            escape_near: 2e-2,
            escape_threshold: 1e-6,
        }
    }
}

impl SolverConfig {
    /// Steps shorter than this are not worth taking as regular line-search
    /// steps at iteration `n`; the schedule relaxes with `n` so that late,
    /// delicate descent may still use short steps.
    pub fn min_step(&self, n: u64) -> f64 {
        let decades = (self.min_step_decade_rate * n as f64).min(self.min_step_decade_cap);
        self.min_step_base * 10f64.powf(-decades)
    }

    /// Forced step length used when the line search fails or bottoms out.
    pub fn escape_step(&self, merit: f64) -> f64 {
        if merit > self.escape_threshold {
            self.escape_far
        } else {
            self.escape_near
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.armijo_delta > 0.0) {
            return Err(Error::param("armijo_delta", "must be positive"));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(Error::param("backtrack", "must lie in (0, 1)"));
        }
        if !(self.merit_tol > 0.0) {
            return Err(Error::param("merit_tol", "must be positive"));
        }
        for (name, v) in [
            ("min_step_base", self.min_step_base),
            ("escape_far", self.escape_far),
            ("escape_near", self.escape_near),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::param(name, "step lengths must lie in (0, 1]"));
            }
        }
        Ok(())
    }
}

/// One fully evaluated point: the state, the projection-dynamics image, the
/// search direction and the merit value. Everything the line search needs to
/// compare points without recomputation.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub h: WorkerDistribution,
    pub state: ShortRunState,
    pub target: WorkerDistribution,
    pub direction: Array2<f64>,
    pub direction_norm_sq: f64,
    pub merit: f64,
}

/// Evaluate merit and direction at `h`.
///
/// States with a fully absent industry have astronomically large utilities
/// (the access floor at work), and two numeric failure modes follow: the
/// merit dot product can overflow, or the projection threshold grows so
/// large that subtracting it cannot conserve mass (its rounding unit exceeds
/// the worker total). Neither is an error here: the merit comes back
/// non-finite and the line search treats such a point as unacceptable.
/// Callers that accept a point (or publish a merit value) must insist on a
/// finite result.
pub fn evaluate(ctx: &ShortRunContext, h: WorkerDistribution) -> Result<Evaluation> {
    let state = ctx.state(&h);
    let total = ctx.params().mobile;
    let moved = &h.h + &state.utility;
    if moved.iter().any(|x| !x.is_finite()) {
        // utilities beyond float range; report an unusable point rather than
        // feeding garbage to the projection
        return Ok(unusable_point(h, state));
    }
    let target = project_feasible(&moved, total)?;
    let target_mass: f64 = target.iter().sum();
    if (target_mass - total).abs() > PROJECTION_MASS_SLACK * total {
        // the threshold was too large for its subtraction to resolve the
        // worker total; the "projection" is rounding artifact, not descent
        // information
        return Ok(unusable_point(h, state));
    }
    let direction = &target - &h.h;
    let direction_norm_sq: f64 = direction.iter().map(|d| d * d).sum();
    let utility_dot: f64 = state
        .utility
        .iter()
        .zip(direction.iter())
        .map(|(v, d)| v * d)
        .sum();
    let merit = utility_dot - 0.5 * direction_norm_sq;
    Ok(Evaluation {
        h,
        state,
        target: WorkerDistribution { h: target },
        direction,
        direction_norm_sq,
        merit,
    })
}

/// Projection-dynamics map: `F(h) = Proj_Ω(h + v(h))` and the state at `h`.
pub fn pd_map(
    ctx: &ShortRunContext,
    h: &WorkerDistribution,
) -> Result<(WorkerDistribution, ShortRunState)> {
    let eval = evaluate(ctx, h.clone())?;
    if !eval.merit.is_finite() {
        return Err(Error::Numeric(
            "projection dynamics overflowed at this point".into(),
        ));
    }
    Ok((eval.target, eval.state))
}

/// Merit value at `h` (zero exactly at long-run equilibria).
pub fn merit(ctx: &ShortRunContext, h: &WorkerDistribution) -> Result<f64> {
    let g = evaluate(ctx, h.clone())?.merit;
    if !g.is_finite() {
        return Err(Error::Numeric(format!("merit is non-finite ({g}) at this point")));
    }
    Ok(g)
}

/// What one iteration did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepKind {
    /// Direction was zero; the point is already stationary.
    Stationary,
    /// Regular Armijo step `γ^k d`.
    Armijo { backtracks: u32, step: f64 },
    /// Forced escape step; `line_search_failed` says whether the backtrack
    /// budget ran out (as opposed to the step merely falling under the
    /// minimum-step schedule).
    Escape { step: f64, line_search_failed: bool },
}

/// One line-search step from `cur` at iteration `n`.
///
/// Scans `k = 0, 1, …` for the first trial satisfying the sufficient
/// decrease `G(h + γ^k d) − G(h) ≤ −δ γ^k ‖d‖²`. If that step is still
/// longer than the minimum-step schedule allows it is accepted; otherwise —
/// or when the backtrack budget is exhausted — a fixed escape step along `d`
/// is taken instead (which may increase `G`).
pub fn armijo_step(
    ctx: &ShortRunContext,
    cur: &Evaluation,
    cfg: &SolverConfig,
    n: u64,
    evals: &mut u64,
) -> Result<(StepKind, Evaluation)> {
    if cur.direction_norm_sq == 0.0 {
        return Ok((StepKind::Stationary, cur.clone()));
    }
    let min_step = cfg.min_step(n);
    let mut gamma_k = 1.0;
    let mut failed = true;
    for k in 0..=cfg.max_backtracks {
        if gamma_k <= min_step {
            // any later satisfying k would be at least this short; escape
            failed = false;
            break;
        }
        let trial = step_point(cur, gamma_k);
        let eval = evaluate(ctx, trial)?;
        *evals += 1;
        // a non-finite trial merit (overflowed at an extreme state) never
        // qualifies; backtracking shortens the step until it does
        if eval.merit.is_finite()
            && eval.merit - cur.merit <= -cfg.armijo_delta * gamma_k * cur.direction_norm_sq
        {
            return Ok((StepKind::Armijo { backtracks: k, step: gamma_k }, eval));
        }
        gamma_k *= cfg.backtrack;
    }
    let step = cfg.escape_step(cur.merit);
    let eval = evaluate(ctx, step_point(cur, step))?;
    *evals += 1;
    Ok((StepKind::Escape { step, line_search_failed: failed }, eval))
}

/// `h + t·d` as a convex combination `(1−t) h + t F(h)`, which keeps the
/// point exactly in the feasible set up to rounding.
fn step_point(cur: &Evaluation, t: f64) -> WorkerDistribution {
    let mut next = cur.h.h.clone();
    next.zip_mut_with(&cur.direction, |h, d| *h += t * d);
    next.mapv_inplace(|x| x.max(0.0));
    WorkerDistribution { h: next }
}

/// Allocation-free merit evaluator used inside [`solve_equilibrium`].
///
/// The public [`evaluate`] builds a full [`Evaluation`] per point, which is
/// the right interface for inspection but allocates half a dozen arrays per
/// call — far too slow for runs that take a million iterations with ~25
/// line-search trials each. This engine keeps one set of buffers in
/// location-major layout (all industries of a location adjacent, so the
/// per-industry recurrences vectorize), evaluates the circulant products by
/// the `O(R)` geometric sweep, and finds the projection threshold by a
/// warm-started bracketed support iteration instead of a sort.
///
/// On top of that, every line-search trial along a fixed direction shares
/// one linearization: the circulant product is linear in the point, so the
/// trial's access field is an axpy of precomputed responses rather than a
/// fresh sweep, and its logarithms and reciprocals follow by short series
/// when the relative change is small (see [`Self::eval_trial`]). The state
/// the linearization is anchored to is rebuilt exactly on a fixed cadence
/// ([`REFRESH_EVERY`]) so rounding drift stays below the merit resolution.
///
/// Results agree with the public path to floating-point reassociation noise;
/// the agreement is asserted in tests across scales, including states with
/// locally absent industries.
struct HotEngine {
    rows: usize,
    inds: usize,
    total: f64,
    immobile_per_site: f64,
    industries_f: f64,
    /// Per-industry freeness over one grid step (`q_i`), its `half+1` power
    /// (the sliding-window tail), and the antipodal coefficient (zero for an
    /// odd ring).
    q: Vec<f64>,
    tail: Vec<f64>,
    anti: Vec<f64>,
    half: usize,
    inv_sigma: Vec<f64>,
    s_coef: Vec<f64>,
    // current point (location-major, len rows*inds)
    h: Vec<f64>,
    dir: Vec<f64>,
    merit: f64,
    dnorm2: f64,
    // access state at the current point: the circulant product over `h`
    // (floored), its logarithm and reciprocal, per-location expenditure
    delta_h: Vec<f64>,
    lnd_h: Vec<f64>,
    inv_dh: Vec<f64>,
    e_h: Vec<f64>,
    // linear response to the current direction: signed circulant product,
    // its magnitude bound, and per-location direction sums
    delta_d: Vec<f64>,
    delta_dabs: Vec<f64>,
    dsum: Vec<f64>,
    /// Whether the response buffers match the current `(h, dir)` pair.
    prepared: bool,
    /// Adoptions since the access state was last rebuilt exactly.
    since_refresh: u32,
    // trial point, its direction, and its access state
    ht: Vec<f64>,
    dt: Vec<f64>,
    delta_t: Vec<f64>,
    lnd_t: Vec<f64>,
    // scratch
    et: Vec<f64>,
    z: Vec<f64>,
    w: Vec<f64>,
    moved: Vec<f64>,
    acc: Vec<f64>,
    lambda: f64,
    // quadratic profile of the moved vector along `dir`: per-cell constant,
    // linear, and quadratic coefficients, row-level amenity expansion terms,
    // and the step bound inside which the profile is trusted as a screen
    qa: Vec<f64>,
    qb: Vec<f64>,
    qc: Vec<f64>,
    s1q: Vec<f64>,
    s2q: Vec<f64>,
    quad_cap: f64,
    /// Coefficients of the merit as a quartic in the step, valid while no
    /// cell's projection status can change, and the step bound certifying
    /// that; inside it a screened trial is a Horner evaluation.
    pc: [f64; 5],
    poly_cap: f64,
    /// Armijo slope in use, mirrored from the solver configuration so the
    /// screen can size its trust region against the decrease threshold.
    armijo_delta: f64,
    /// Scale of the cubic truncation term of the profile (amenity
    /// coefficients plus a generous allowance for the wage term).
    trunc_scale: f64,
}

impl HotEngine {
    fn new(ctx: &ShortRunContext, h0: &WorkerDistribution) -> Self {
        let p = ctx.params();
        let (rows, inds) = (p.locations, p.industries);
        let n = rows * inds;
        let half = if rows % 2 == 0 { rows / 2 - 1 } else { (rows - 1) / 2 };
        let mut q = Vec::with_capacity(inds);
        let mut tail = Vec::with_capacity(inds);
        let mut anti = Vec::with_capacity(inds);
        for i in 0..inds {
            let d = ctx.freeness(i);
            q.push(d.step_ratio());
            tail.push(d.step_ratio().powi(half as i32 + 1));
            anti.push(if rows % 2 == 0 && rows > 1 { d.entry(0, rows / 2) } else { 0.0 });
        }
        let mut h = vec![0.0; n];
        let hh = h0.h.as_slice().expect("worker arrays are standard layout");
        for r in 0..rows {
            for i in 0..inds {
                h[r * inds + i] = hh[i * rows + r];
            }
        }
        let s_coef: Vec<f64> = p.sigmas.iter().map(|s| 1.0 / (s - 1.0)).collect();
        let trunc_scale = s_coef.iter().sum::<f64>() / 3.0 + 10.0;
        HotEngine {
            rows,
            inds,
            total: p.mobile,
            immobile_per_site: p.immobile_per_site(),
            industries_f: inds as f64,
            q,
            tail,
            anti,
            half,
            inv_sigma: p.sigmas.iter().map(|s| 1.0 / s).collect(),
            s_coef,
            h,
            dir: vec![0.0; n],
            merit: f64::NAN,
            dnorm2: f64::NAN,
            delta_h: vec![0.0; n],
            lnd_h: vec![0.0; n],
            inv_dh: vec![0.0; n],
            e_h: vec![0.0; rows],
            delta_d: vec![0.0; n],
            delta_dabs: vec![0.0; n],
            dsum: vec![0.0; rows],
            prepared: false,
            since_refresh: 0,
            ht: vec![0.0; n],
            dt: vec![0.0; n],
            delta_t: vec![0.0; n],
            lnd_t: vec![0.0; n],
            et: vec![0.0; rows],
            z: vec![0.0; n],
            w: vec![0.0; n],
            moved: vec![0.0; n],
            acc: vec![0.0; inds],
            lambda: f64::NAN,
            qa: vec![0.0; n],
            qb: vec![0.0; n],
            qc: vec![0.0; n],
            s1q: vec![0.0; rows],
            s2q: vec![0.0; rows],
            quad_cap: 0.0,
            pc: [0.0; 5],
            poly_cap: 0.0,
            armijo_delta: SolverConfig::default().armijo_delta,
            trunc_scale,
        }
    }

    /// Evaluate at the current point itself. Used once per solve, before the
    /// first iteration; later evaluations go through [`Self::eval_trial`].
    fn eval_initial(&mut self) -> (f64, f64) {
        let inds = self.inds;
        self.ht.copy_from_slice(&self.h);
        for r in 0..self.rows {
            let row = &self.ht[r * inds..][..inds];
            self.et[r] = row.iter().sum::<f64>() + self.immobile_per_site;
        }
        self.eval_exact_at_ht()
    }

    /// Rebuild the products the fast trial path relies on for the current
    /// `(h, dir)` pair: the reciprocal of the access field, the signed
    /// circulant response to the direction with a magnitude bound, and
    /// per-location direction sums. Periodically rebuilds the incrementally
    /// maintained access state (`delta_h`, `lnd_h`, `e_h`) from scratch so
    /// rounding drift cannot accumulate across adoptions.
    fn prepare(&mut self) {
        let inds = self.inds;
        let rows = self.rows;
        let refreshed = self.since_refresh >= REFRESH_EVERY;
        if refreshed {
            sweep_multi(
                self.rows,
                inds,
                self.half,
                &self.q,
                &self.tail,
                &self.anti,
                &mut self.acc,
                &self.h,
                &mut self.delta_h,
            );
            for c in 0..self.delta_h.len() {
                let d = self.delta_h[c].max(crate::economy::ACCESS_FLOOR);
                self.delta_h[c] = d;
                self.lnd_h[c] = crate::numeric::ln_normal(d);
            }
            for r in 0..self.rows {
                let row = &self.h[r * inds..][..inds];
                self.e_h[r] = row.iter().sum::<f64>() + self.immobile_per_site;
            }
            self.since_refresh = 0;
        }
        for c in 0..self.inv_dh.len() {
            self.inv_dh[c] = 1.0 / self.delta_h[c];
        }
        // The circulant product is linear, so its response to a signed
        // direction is the difference of its responses to the nonnegative
        // halves, each of which the sweep handles stably; the sum of the
        // halves bounds the magnitude for the cancellation guard.
        for c in 0..self.dir.len() {
            let d = self.dir[c];
            self.z[c] = d.max(0.0);
            self.w[c] = (-d).max(0.0);
        }
        sweep_multi(
            self.rows,
            inds,
            self.half,
            &self.q,
            &self.tail,
            &self.anti,
            &mut self.acc,
            &self.z,
            &mut self.delta_d,
        );
        sweep_multi(
            self.rows,
            inds,
            self.half,
            &self.q,
            &self.tail,
            &self.anti,
            &mut self.acc,
            &self.w,
            &mut self.delta_dabs,
        );
        for c in 0..self.delta_d.len() {
            let plus = self.delta_d[c];
            let minus = self.delta_dabs[c];
            self.delta_d[c] = plus - minus;
            self.delta_dabs[c] = plus.max(0.0) + minus.max(0.0);
        }
        for r in 0..self.rows {
            let row = &self.dir[r * inds..][..inds];
            self.dsum[r] = row.iter().sum::<f64>();
        }
        if refreshed {
            // Re-anchor the screen's constant term on the freshly rebuilt
            // access state; between refreshes it carries over from the
            // adopted trial's own moved vector.
            for r in 0..rows {
                let base = r * inds;
                let e = self.e_h[r];
                for c in base..base + inds {
                    self.z[c] = e * self.inv_dh[c];
                }
            }
            sweep_multi(
                rows,
                inds,
                self.half,
                &self.q,
                &self.tail,
                &self.anti,
                &mut self.acc,
                &self.z,
                &mut self.w,
            );
            let ind_f = self.industries_f;
            let Self {
                ref lnd_h,
                ref h,
                ref w,
                ref s_coef,
                ref inv_sigma,
                ref mut qa,
                ..
            } = *self;
            let s_coef = &s_coef[..inds];
            let isg = &inv_sigma[..inds];
            for r in 0..rows {
                let base = r * inds;
                let lrow = &lnd_h[base..][..inds];
                let mut s = 0.0;
                for i in 0..inds {
                    s += lrow[i] * s_coef[i];
                }
                let hr = &h[base..][..inds];
                let wr = &w[base..][..inds];
                let qr = &mut qa[base..][..inds];
                for i in 0..inds {
                    qr[i] = hr[i] + s + wr[i].max(0.0) * isg[i] - ind_f;
                }
            }
        }
        // Quadratic profile of the moved vector along the direction. With
        // the access field exactly `delta_h + gamma*delta_d` and the
        // expenditure exactly `e_h + gamma*dsum`, every moved value is a
        // smooth function of the step whose second-order expansion the
        // circulant product can deliver once per direction: the demand
        // ratio expands as `z0*(1 + gamma*(u - chi) + gamma^2*chi*(chi -
        // u))` with `chi` the relative access change and `u` the relative
        // expenditure change, and the amenity sum expands through
        // `ln(1 + gamma*chi)`. The signed expansion inputs go through the
        // sweep as nonnegative halves.
        let mut relmax = 0.0f64;
        let mut bad = 0usize;
        {
            let Self {
                ref delta_d,
                ref inv_dh,
                ref e_h,
                ref dsum,
                ref s_coef,
                ref mut z,
                ref mut w,
                ref mut ht,
                ref mut dt,
                ref mut s1q,
                ref mut s2q,
                ..
            } = *self;
            let s_coef = &s_coef[..inds];
            for r in 0..rows {
                let base = r * inds;
                let e = e_h[r];
                let u = dsum[r] / e;
                bad += ((u - u) != 0.0) as usize;
                relmax = relmax.max(u.abs());
                let ddr = &delta_d[base..][..inds];
                let ir = &inv_dh[base..][..inds];
                let z1p = &mut z[base..][..inds];
                let z1m = &mut w[base..][..inds];
                let z2p = &mut ht[base..][..inds];
                let z2m = &mut dt[base..][..inds];
                let mut s1 = 0.0;
                let mut s2 = 0.0;
                for i in 0..inds {
                    let chi = ddr[i] * ir[i];
                    bad += ((chi - chi) != 0.0) as usize;
                    relmax = relmax.max(chi.abs());
                    let z0 = e * ir[i];
                    let z1 = z0 * (u - chi);
                    let z2 = z0 * chi * (chi - u);
                    bad += ((z1 - z1) != 0.0) as usize;
                    bad += ((z2 - z2) != 0.0) as usize;
                    z1p[i] = z1.max(0.0);
                    z1m[i] = (-z1).max(0.0);
                    z2p[i] = z2.max(0.0);
                    z2m[i] = (-z2).max(0.0);
                    s1 += chi * s_coef[i];
                    s2 += (chi * chi) * s_coef[i];
                }
                s1q[r] = s1;
                s2q[r] = -0.5 * s2;
            }
        }
        sweep_multi(
            rows,
            inds,
            self.half,
            &self.q,
            &self.tail,
            &self.anti,
            &mut self.acc,
            &self.z,
            &mut self.delta_t,
        );
        sweep_multi(
            rows,
            inds,
            self.half,
            &self.q,
            &self.tail,
            &self.anti,
            &mut self.acc,
            &self.w,
            &mut self.lnd_t,
        );
        {
            let Self {
                ref delta_t,
                ref lnd_t,
                ref dir,
                ref s1q,
                ref inv_sigma,
                ref mut qb,
                ..
            } = *self;
            let isg = &inv_sigma[..inds];
            for r in 0..rows {
                let base = r * inds;
                let s1 = s1q[r];
                let pr = &delta_t[base..][..inds];
                let mr = &lnd_t[base..][..inds];
                let dr = &dir[base..][..inds];
                let qr = &mut qb[base..][..inds];
                for i in 0..inds {
                    qr[i] = dr[i] + s1 + (pr[i] - mr[i]) * isg[i];
                }
            }
        }
        sweep_multi(
            rows,
            inds,
            self.half,
            &self.q,
            &self.tail,
            &self.anti,
            &mut self.acc,
            &self.ht,
            &mut self.delta_t,
        );
        sweep_multi(
            rows,
            inds,
            self.half,
            &self.q,
            &self.tail,
            &self.anti,
            &mut self.acc,
            &self.dt,
            &mut self.lnd_t,
        );
        {
            let Self {
                ref delta_t,
                ref lnd_t,
                ref s2q,
                ref inv_sigma,
                ref mut qc,
                ..
            } = *self;
            let isg = &inv_sigma[..inds];
            for r in 0..rows {
                let base = r * inds;
                let s2 = s2q[r];
                let pr = &delta_t[base..][..inds];
                let mr = &lnd_t[base..][..inds];
                let qr = &mut qc[base..][..inds];
                for i in 0..inds {
                    qr[i] = s2 + (pr[i] - mr[i]) * isg[i];
                }
            }
        }
        // Trust region for the screen: the hard window keeps the expansions
        // in their series regime, and the two error caps keep the cubic
        // truncation of the profile (against the merit's slope, and its
        // square against the curvature terms) below a fraction of the
        // Armijo decrease threshold. Outside the region trials are
        // evaluated exactly; inside it a screened accept is still confirmed
        // exactly before adoption, so a stray screen error can cost a
        // wasted evaluation but never corrupt an adopted state.
        let dn2 = self.dnorm2;
        self.quad_cap = if bad == 0
            && relmax > 0.0
            && relmax.is_finite()
            && dn2 > 0.0
            && dn2.is_finite()
        {
            let n_f = (rows * inds) as f64;
            let rm3 = relmax * relmax * relmax;
            let budget = QUAD_MARGIN * self.armijo_delta;
            let hard = QUAD_WINDOW / relmax;
            let c1 = (budget * dn2.sqrt() / (n_f.sqrt() * self.trunc_scale * rm3)).sqrt();
            let c2 = (budget * dn2
                / (n_f * self.trunc_scale * self.trunc_scale * rm3 * rm3))
                .powf(0.2);
            hard.min(c1).min(c2).min(1.0)
        } else {
            0.0
        };
        // Quartic profile of the merit itself. While no cell's projection
        // status changes along the scan, the threshold of the fixed-support
        // projection is an explicit quadratic in the step and every cell's
        // contribution to the merit a quartic, so the whole scan's merits
        // follow from one pass of coefficient sums; a per-cell crossing
        // bound certifies the step range on which the frozen statuses are
        // valid. (The trial point itself needs no clamping: it is a convex
        // combination of two nonnegative points for any step in (0, 1].)
        self.poly_cap = 0.0;
        if self.quad_cap > 0.0 {
            if refreshed {
                // the refresh displaced the anchor's moved vector, so its
                // threshold must be re-solved before freezing the support
                let mut maxqa = f64::NEG_INFINITY;
                for &v in &self.qa {
                    maxqa = maxqa.max(v);
                }
                self.lambda = lambda_threshold(&self.qa, self.total, maxqa, self.lambda);
            }
            let lam = self.lambda;
            let n = self.qa.len();
            let (mut sa, mut sb, mut sc, mut cnt) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
            {
                let qa = &self.qa[..n];
                let qb = &self.qb[..n];
                let qc = &self.qc[..n];
                for c in 0..n {
                    let on = (qa[c] - lam > 0.0) as u64 as f64;
                    sa += on * qa[c];
                    sb += on * qb[c];
                    sc += on * qc[c];
                    cnt += on;
                }
            }
            let inv = 1.0 / cnt;
            let l0 = (sa - self.total) * inv;
            let l1 = sb * inv;
            let l2 = sc * inv;
            let mut coef = [0.0f64; 5];
            let mut safe = f64::INFINITY;
            {
                let qa = &self.qa[..n];
                let qb = &self.qb[..n];
                let qc = &self.qc[..n];
                let h = &self.h[..n];
                let dir = &self.dir[..n];
                for c in 0..n {
                    let (a, b, q2) = (qa[c], qb[c], qc[c]);
                    let (h0, d0) = (h[c], dir[c]);
                    // in-support cells must keep a positive gap to the
                    // moving threshold, the rest a negative one; a cell
                    // whose gap can close within the scan bounds the range
                    let (p0, p1, p2, margin, slope) = if a - lam > 0.0 {
                        let p0 = a - l0;
                        let p1 = b - l1;
                        let p2 = q2 - l2;
                        (p0, p1, p2, p0, p1.abs() + p2.abs())
                    } else {
                        (0.0, 0.0, 0.0, l0 - a, (b - l1).abs() + (q2 - l2).abs())
                    };
                    let e0 = p0 - h0;
                    let e1 = p1 - d0;
                    let e2 = p2;
                    let v0 = a - h0;
                    let v1 = b - d0;
                    let v2 = q2;
                    coef[0] += v0 * e0 - 0.5 * (e0 * e0);
                    coef[1] += v0 * e1 + v1 * e0 - e0 * e1;
                    coef[2] += v0 * e2 + v1 * e1 + v2 * e0 - (e0 * e2 + 0.5 * (e1 * e1));
                    coef[3] += v1 * e2 + v2 * e1 - e1 * e2;
                    coef[4] += v2 * e2 - 0.5 * (e2 * e2);
                    // 0/0 marks a cell pinned to the threshold for every
                    // step; both statuses then contribute identically, so
                    // `min` ignoring the NaN is exactly right
                    safe = safe.min(margin / slope);
                }
            }
            if safe > 0.0 {
                self.pc = coef;
                self.poly_cap = if safe.is_finite() {
                    safe.min(self.quad_cap)
                } else {
                    self.quad_cap
                };
            }
        }
        self.prepared = true;
    }

    /// Merit and squared direction norm at `h + gamma·dir`, `gamma ∈ (0, 1]`,
    /// written into the trial buffers. `(NaN, NaN)` marks a point whose
    /// utilities overflow or whose projection cannot resolve the worker
    /// total.
    ///
    /// Because the circulant product is linear in the point, the access field
    /// of a trial is the exact combination `delta_h + gamma·delta_d`, and its
    /// per-location expenditure is `e_h + gamma·dsum` — no sweep over the
    /// trial point is needed. For the small relative changes `x` that
    /// dominate long runs, the logarithm and reciprocal of the access field
    /// follow by short alternating series in `x`, whose truncation error
    /// (below 3e-11 relative at the window edge) sits far under the merit
    /// resolution; cells outside the window fall back to exact scalar
    /// evaluation. A cell whose access update cancels below [`CANCEL_GUARD`]
    /// of the participating magnitudes has lost too many digits, and the
    /// whole trial is recomputed from scratch instead.
    fn eval_trial(&mut self, gamma: f64) -> (f64, f64) {
        // dispatch on common industry counts so the per-location loops
        // unroll to fixed vector widths; `0` keeps the count dynamic
        match self.inds {
            4 => self.eval_trial_g::<4>(gamma),
            64 => self.eval_trial_g::<64>(gamma),
            _ => self.eval_trial_g::<0>(gamma),
        }
    }

    #[inline(always)]
    fn eval_trial_g<const INDS: usize>(&mut self, gamma: f64) -> (f64, f64) {
        if !self.prepared {
            self.prepare();
        }
        let (cancelled, outliers) = self.trial_pass_g::<INDS>(gamma);
        let inds = self.inds;
        if cancelled > 0 {
            // the linear update lost too many digits somewhere; rebuild the
            // whole trial from scratch
            for r in 0..self.rows {
                let row = &self.ht[r * inds..][..inds];
                self.et[r] = row.iter().sum::<f64>() + self.immobile_per_site;
            }
            return self.eval_exact_at_ht();
        }
        if outliers > 0 {
            for r in 0..self.rows {
                let e = self.et[r];
                let base = r * inds;
                for c in base..base + inds {
                    let x = gamma * self.delta_d[c] * self.inv_dh[c];
                    // NaN (an overflowed ratio) also fails this test and is
                    // patched with the exact value
                    if !(x.abs() <= SERIES_WINDOW) {
                        let d = self.delta_t[c];
                        self.lnd_t[c] = crate::numeric::ln_normal(d);
                        self.z[c] = e / d;
                    }
                }
            }
        }
        self.finish_g::<INDS>()
    }

    /// Screened trial evaluation: a step inside the quadratic profile's
    /// trust region gets the screen's merit (with `NaN` in place of the
    /// squared direction norm — screened merits never drive an adoption),
    /// any other step the exact engine value. The flag reports which path
    /// ran.
    fn eval_screened(&mut self, gamma: f64) -> (f64, f64, bool) {
        if !self.prepared {
            self.prepare();
        }
        if gamma <= self.poly_cap {
            (self.poly_eval(gamma), f64::NAN, true)
        } else if gamma <= self.quad_cap {
            (self.quad_eval(gamma), f64::NAN, true)
        } else {
            let (g, dn2) = self.eval_trial(gamma);
            (g, dn2, false)
        }
    }

    /// Merit at `h + gamma*dir` from the per-scan quartic profile; only
    /// meaningful for `gamma` inside `poly_cap`.
    #[inline]
    fn poly_eval(&self, gamma: f64) -> f64 {
        let c = &self.pc;
        (((c[4] * gamma + c[3]) * gamma + c[2]) * gamma + c[1]) * gamma + c[0]
    }

    /// Merit at `h + gamma*dir` predicted by the quadratic profile of the
    /// moved vector: two flat passes and a threshold solve, no circulant
    /// product and no logarithms. Only meaningful for `gamma` inside
    /// `quad_cap`.
    fn quad_eval(&mut self, gamma: f64) -> f64 {
        let n = self.moved.len();
        let mut nonfinite = 0usize;
        let mut mx = [f64::NEG_INFINITY; 4];
        {
            let qa = &self.qa[..n];
            let qb = &self.qb[..n];
            let qc = &self.qc[..n];
            let moved = &mut self.moved[..n];
            let mut c = 0;
            while c + 4 <= n {
                for k in 0..4 {
                    let m = qa[c + k] + gamma * (qb[c + k] + gamma * qc[c + k]);
                    moved[c + k] = m;
                    nonfinite += ((m - m) != 0.0) as usize;
                    mx[k] = mx[k].max(m);
                }
                c += 4;
            }
            while c < n {
                let m = qa[c] + gamma * (qb[c] + gamma * qc[c]);
                moved[c] = m;
                nonfinite += ((m - m) != 0.0) as usize;
                mx[0] = mx[0].max(m);
                c += 1;
            }
        }
        if nonfinite > 0 {
            return f64::NAN;
        }
        let maxy = mx[0].max(mx[1]).max(mx[2].max(mx[3]));
        self.lambda = lambda_threshold(&self.moved, self.total, maxy, self.lambda);
        let lambda = self.lambda;
        let mut mass_l = [0.0f64; 4];
        let mut dn2_l = [0.0f64; 4];
        let mut vdot_l = [0.0f64; 4];
        {
            let moved = &self.moved[..n];
            let h = &self.h[..n];
            let dir = &self.dir[..n];
            let mut c = 0;
            while c + 4 <= n {
                for k in 0..4 {
                    let m = moved[c + k];
                    let hv = (h[c + k] + gamma * dir[c + k]).max(0.0);
                    let p = (m - lambda).max(0.0);
                    let d = p - hv;
                    mass_l[k] += p;
                    dn2_l[k] += d * d;
                    vdot_l[k] += (m - hv) * d;
                }
                c += 4;
            }
            while c < n {
                let m = moved[c];
                let hv = (h[c] + gamma * dir[c]).max(0.0);
                let p = (m - lambda).max(0.0);
                let d = p - hv;
                mass_l[0] += p;
                dn2_l[0] += d * d;
                vdot_l[0] += (m - hv) * d;
                c += 1;
            }
        }
        let mass = (mass_l[0] + mass_l[1]) + (mass_l[2] + mass_l[3]);
        let dn2 = (dn2_l[0] + dn2_l[1]) + (dn2_l[2] + dn2_l[3]);
        let vdot = (vdot_l[0] + vdot_l[1]) + (vdot_l[2] + vdot_l[3]);
        if (mass - self.total).abs() > PROJECTION_MASS_SLACK * self.total {
            return f64::NAN;
        }
        vdot - 0.5 * dn2
    }

    /// The linear-update passes of [`Self::eval_trial`]: trial point, access
    /// field, logarithms, and demand ratios. Returns how many cells tripped
    /// the cancellation guard and how many fell outside the series window.
    ///
    /// One fused pass per location row: every buffer the trial needs is
    /// written while its inputs are already in registers, which keeps the
    /// engine's resident working set small enough for the first-level cache.
    #[inline(always)]
    fn trial_pass_g<const INDS: usize>(&mut self, gamma: f64) -> (usize, usize) {
        let inds = if INDS == 0 { self.inds } else { INDS };
        let rows = self.rows;
        let floor = crate::economy::ACCESS_FLOOR;
        let mut cancelled = 0usize;
        let mut outliers = 0usize;
        let Self {
            ref h,
            ref dir,
            ref delta_h,
            ref delta_d,
            ref delta_dabs,
            ref inv_dh,
            ref lnd_h,
            ref e_h,
            ref dsum,
            ref mut ht,
            ref mut delta_t,
            ref mut lnd_t,
            ref mut z,
            ref mut et,
            ..
        } = *self;
        for r in 0..rows {
            let base = r * inds;
            let e = e_h[r] + gamma * dsum[r];
            et[r] = e;
            let hr = &h[base..][..inds];
            let dr = &dir[base..][..inds];
            let dhr = &delta_h[base..][..inds];
            let ddr = &delta_d[base..][..inds];
            let dar = &delta_dabs[base..][..inds];
            let ir = &inv_dh[base..][..inds];
            let lhr = &lnd_h[base..][..inds];
            let htr = &mut ht[base..][..inds];
            let dtr = &mut delta_t[base..][..inds];
            let ltr = &mut lnd_t[base..][..inds];
            let zr = &mut z[base..][..inds];
            for i in 0..inds {
                htr[i] = (hr[i] + gamma * dr[i]).max(0.0);
                let dh = dhr[i];
                let dd = ddr[i];
                let raw = dh + gamma * dd;
                cancelled += (raw < CANCEL_GUARD * (dh + gamma * dar[i])) as usize;
                dtr[i] = raw.max(floor);
                let x = gamma * dd * ir[i];
                outliers += (!(x.abs() <= SERIES_WINDOW)) as usize;
                // short alternating series for ln(1+x) and 1/(1+x); cells
                // outside the window are patched afterwards
                let ln1p =
                    x * (1.0 - x * (0.5 - x * ((1.0 / 3.0) - x * (0.25 - x * 0.2))));
                ltr[i] = lhr[i] + ln1p;
                let recip = 1.0 - x * (1.0 - x * (1.0 - x * (1.0 - x)));
                zr[i] = e * ir[i] * recip;
            }
        }
        (cancelled, outliers)
    }

    /// Evaluate at whatever the trial buffers (`ht`, `et`) currently hold,
    /// rebuilding the trial access field and its logarithm from scratch.
    fn eval_exact_at_ht(&mut self) -> (f64, f64) {
        let inds = self.inds;
        sweep_multi(
            self.rows,
            inds,
            self.half,
            &self.q,
            &self.tail,
            &self.anti,
            &mut self.acc,
            &self.ht,
            &mut self.delta_t,
        );
        for r in 0..self.rows {
            let e = self.et[r];
            let base = r * inds;
            for c in base..base + inds {
                let d = self.delta_t[c].max(crate::economy::ACCESS_FLOOR);
                self.delta_t[c] = d;
                self.lnd_t[c] = crate::numeric::ln_normal(d);
                self.z[c] = e / d;
            }
        }
        self.finish_from_z()
    }

    /// Shared tail of every evaluation: from the trial access state
    /// (`delta_t`, `lnd_t`) and the demand ratios in `z`, compute wages,
    /// utilities, the projection, and the merit.
    fn finish_from_z(&mut self) -> (f64, f64) {
        match self.inds {
            4 => self.finish_g::<4>(),
            64 => self.finish_g::<64>(),
            _ => self.finish_g::<0>(),
        }
    }

    #[inline(always)]
    fn finish_g<const INDS: usize>(&mut self) -> (f64, f64) {
        let inds = if INDS == 0 { self.inds } else { INDS };
        sweep_multi_g::<INDS>(
            self.rows,
            inds,
            self.half,
            &self.q,
            &self.tail,
            &self.anti,
            &mut self.acc,
            &self.z,
            &mut self.w,
        );
        // per location: amenity sum Σ_j S_jr, then utilities and the
        // projection argument
        let rows = self.rows;
        let ind_f = self.industries_f;
        let mut maxy = f64::NEG_INFINITY;
        let mut nonfinite = 0usize;
        {
            let Self {
                ref lnd_t,
                ref w,
                ref ht,
                ref s_coef,
                ref inv_sigma,
                ref mut moved,
                ..
            } = *self;
            let s_coef = &s_coef[..inds];
            let isg = &inv_sigma[..inds];
            for r in 0..rows {
                let base = r * inds;
                let lrow = &lnd_t[base..][..inds];
                let mut s = 0.0;
                for i in 0..inds {
                    s += lrow[i] * s_coef[i];
                }
                let wr = &w[base..][..inds];
                let hr = &ht[base..][..inds];
                let mr = &mut moved[base..][..inds];
                let mut rmax = f64::NEG_INFINITY;
                for i in 0..inds {
                    let v = s + wr[i].max(0.0) * isg[i] - ind_f;
                    let m = hr[i] + v;
                    mr[i] = m;
                    // `m − m` is zero only for finite m; counting instead of
                    // branching keeps the loop vectorizable
                    nonfinite += ((m - m) != 0.0) as usize;
                    rmax = rmax.max(m);
                }
                maxy = maxy.max(rmax);
            }
        }
        if nonfinite > 0 {
            return (f64::NAN, f64::NAN);
        }
        self.lambda = lambda_threshold(&self.moved, self.total, maxy, self.lambda);
        let lambda = self.lambda;
        // four independent accumulator lanes per reduction, so the sums
        // pipeline instead of serializing on one addition chain; the
        // utility value is recovered as `moved − ht`, saving a buffer
        let n = self.moved.len();
        let mut mass_l = [0.0f64; 4];
        let mut dn2_l = [0.0f64; 4];
        let mut vdot_l = [0.0f64; 4];
        {
            let moved = &self.moved[..n];
            let ht = &self.ht[..n];
            let dt = &mut self.dt[..n];
            let mut c = 0;
            while c + 4 <= n {
                for k in 0..4 {
                    let m = moved[c + k];
                    let hv = ht[c + k];
                    let p = (m - lambda).max(0.0);
                    let d = p - hv;
                    dt[c + k] = d;
                    mass_l[k] += p;
                    dn2_l[k] += d * d;
                    vdot_l[k] += (m - hv) * d;
                }
                c += 4;
            }
            while c < n {
                let m = moved[c];
                let hv = ht[c];
                let p = (m - lambda).max(0.0);
                let d = p - hv;
                dt[c] = d;
                mass_l[0] += p;
                dn2_l[0] += d * d;
                vdot_l[0] += (m - hv) * d;
                c += 1;
            }
        }
        let mass = (mass_l[0] + mass_l[1]) + (mass_l[2] + mass_l[3]);
        let dn2 = (dn2_l[0] + dn2_l[1]) + (dn2_l[2] + dn2_l[3]);
        let vdot = (vdot_l[0] + vdot_l[1]) + (vdot_l[2] + vdot_l[3]);
        if (mass - self.total).abs() > PROJECTION_MASS_SLACK * self.total {
            // threshold too large for its subtraction to resolve the worker
            // total — same unusable-point policy as the reference path
            return (f64::NAN, f64::NAN);
        }
        (vdot - 0.5 * dn2, dn2)
    }

    /// Make the trial point the current point, carrying its access state
    /// along so the next iteration can linearize around it without a sweep.
    fn adopt(&mut self, merit_val: f64, dnorm2: f64) {
        std::mem::swap(&mut self.h, &mut self.ht);
        std::mem::swap(&mut self.dir, &mut self.dt);
        std::mem::swap(&mut self.delta_h, &mut self.delta_t);
        std::mem::swap(&mut self.lnd_h, &mut self.lnd_t);
        std::mem::swap(&mut self.e_h, &mut self.et);
        // the adopted moved vector is the screen's zeroth-order term, so a
        // screened merit at a vanishing step reproduces the adopted merit
        self.qa.copy_from_slice(&self.moved);
        self.merit = merit_val;
        self.dnorm2 = dnorm2;
        self.prepared = false;
        self.since_refresh += 1;
    }

    /// Current point as a standard worker distribution.
    fn distribution(&self) -> WorkerDistribution {
        let (rows, inds) = (self.rows, self.inds);
        let mut h = Array2::zeros((inds, rows));
        for r in 0..rows {
            for i in 0..inds {
                h[[i, r]] = self.h[r * inds + i];
            }
        }
        WorkerDistribution { h }
    }
}

/// Circulant product for every industry at once, `x` and `out` both
/// location-major (`r·inds + i`).
///
/// Same sliding geometric windows as
/// [`FreenessMatrix::sweep_matvec`](crate::geometry::FreenessMatrix::sweep_matvec),
/// advanced for all industries together so the inner loop vectorizes over
/// the short industry axis. Inputs must be nonnegative; output entries may
/// carry tiny negative rounding noise, which callers clamp in their
/// post-pass.
#[allow(clippy::too_many_arguments)]
fn sweep_multi(
    rows: usize,
    inds: usize,
    half: usize,
    q: &[f64],
    tail: &[f64],
    anti: &[f64],
    acc: &mut [f64],
    x: &[f64],
    out: &mut [f64],
) {
    // dispatch on common industry counts so the inner loops unroll to fixed
    // vector widths; `0` keeps the count dynamic
    match inds {
        4 => sweep_multi_g::<4>(rows, inds, half, q, tail, anti, acc, x, out),
        64 => sweep_multi_g::<64>(rows, inds, half, q, tail, anti, acc, x, out),
        _ => sweep_multi_g::<0>(rows, inds, half, q, tail, anti, acc, x, out),
    }
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn sweep_multi_g<const INDS: usize>(
    rows: usize,
    inds_dyn: usize,
    half: usize,
    q: &[f64],
    tail: &[f64],
    anti: &[f64],
    acc: &mut [f64],
    x: &[f64],
    out: &mut [f64],
) {
    let inds = if INDS == 0 { inds_dyn } else { INDS };
    if rows == 1 {
        out.copy_from_slice(x);
        return;
    }
    // equal-length views so the inner loops bounds-check once and vectorize
    let q = &q[..inds];
    let tail = &tail[..inds];
    let anti = &anti[..inds];
    let acc = &mut acc[..inds];
    let flush = |v: f64| if v < f64::MIN_POSITIVE { 0.0 } else { v };
    // ring indices advance by one row per step; track them incrementally so
    // the inner loops carry no divisions
    let step = |r: &mut usize| {
        *r += 1;
        if *r == rows {
            *r = 0;
        }
    };

    // left windows, written into out
    acc.fill(0.0);
    let mut src = rows - half; // walks x[-half..0 (mod rows)]
    for _ in 0..half {
        let row = &x[src * inds..][..inds];
        for i in 0..inds {
            acc[i] = flush(q[i] * (acc[i] + row[i]));
        }
        step(&mut src);
    }
    out[..inds].copy_from_slice(acc);
    // r − 1 − half (mod rows), at r = 1
    let mut exit = if half == 0 { 0 } else { rows - half };
    for r in 1..rows {
        let prev = &x[(r - 1) * inds..][..inds];
        let exit_row = &x[exit * inds..][..inds];
        let dst_row = &mut out[r * inds..][..inds];
        for i in 0..inds {
            acc[i] = flush(q[i] * (prev[i] + acc[i]) - tail[i] * exit_row[i]);
            dst_row[i] = acc[i];
        }
        step(&mut exit);
    }
    // right windows plus own and antipodal terms, accumulated into out
    acc.fill(0.0);
    let mut src = rows - 1 + half; // walks x[rows−1+half .. rows (mod rows)]
    if src >= rows {
        src -= rows;
    }
    for _ in 0..half {
        let row = &x[src * inds..][..inds];
        for i in 0..inds {
            acc[i] = flush(q[i] * (acc[i] + row[i]));
        }
        src = if src == 0 { rows - 1 } else { src - 1 };
    }
    let anti_step = rows / 2; // the matching coefficient is zero for odd rings
    let mut far = rows - 1 + anti_step - rows; // (rows−1 + anti_step) mod rows; anti_step ≥ 1 here
    // r + 1 + half (mod rows), at r = rows − 2
    let mut exit = if half == 0 { rows - 1 } else { half - 1 };
    for r in (0..rows).rev() {
        if r < rows - 1 {
            let next = &x[(r + 1) * inds..][..inds];
            let exit_row = &x[exit * inds..][..inds];
            for i in 0..inds {
                acc[i] = flush(q[i] * (next[i] + acc[i]) - tail[i] * exit_row[i]);
            }
            exit = if exit == 0 { rows - 1 } else { exit - 1 };
        }
        let own = &x[r * inds..][..inds];
        let far_row = &x[far * inds..][..inds];
        let dst_row = &mut out[r * inds..][..inds];
        for i in 0..inds {
            dst_row[i] += own[i] + acc[i] + anti[i] * far_row[i];
        }
        far = if far == 0 { rows - 1 } else { far - 1 };
    }
}

/// Threshold `λ` with `Σ max(y<sub>c</sub> − λ, 0) = total`, by support
/// iteration inside a certified bracket.
///
/// `Σ max(y−λ, 0)` is continuous, decreasing and piecewise linear in `λ`, so
/// on the correct support the root is one division away; the loop guesses a
/// support, solves, and re-checks, falling back to bisection whenever a
/// guess leaves the bracket. `maxy − total` and `maxy − total/n` always
/// bracket the root. Works in shifted terms `y − λ` throughout, so nothing
/// overflows even when the entries are astronomical. Same mathematics as the
/// sort in [`project_feasible`], minus the sort and the allocation.
fn lambda_threshold(y: &[f64], total: f64, maxy: f64, warm: f64) -> f64 {
    let n = y.len() as f64;
    let mut lo = maxy - total;
    let mut hi = maxy - total / n;
    if lo >= hi {
        return lo; // single entry (or degenerate spread): λ is pinned
    }
    let mut lambda = if warm.is_finite() { warm.clamp(lo, hi) } else { 0.5 * (lo + hi) };
    let mut prev = f64::NAN;
    for _ in 0..128 {
        // branch-free support scan with four accumulator lanes, so it
        // vectorizes; an entry is active exactly when its clamped excess is
        // strictly positive
        let mut m_l = [0u64; 4];
        let mut ex_l = [0.0f64; 4];
        let mut chunks = y.chunks_exact(4);
        for ch in &mut chunks {
            for k in 0..4 {
                let over = (ch[k] - lambda).max(0.0);
                ex_l[k] += over;
                m_l[k] += (over > 0.0) as u64;
            }
        }
        for (k, &v) in chunks.remainder().iter().enumerate() {
            let over = (v - lambda).max(0.0);
            ex_l[k] += over;
            m_l[k] += (over > 0.0) as u64;
        }
        let m = m_l[0] + m_l[1] + m_l[2] + m_l[3];
        let excess = (ex_l[0] + ex_l[1]) + (ex_l[2] + ex_l[3]);
        debug_assert!(m > 0, "the bracket keeps at least the maximum active");
        let cand = lambda + (excess - total) / m as f64;
        if excess > total {
            lo = lambda;
        } else {
            hi = lambda;
        }
        let next = if cand > lo && cand < hi { cand } else { 0.5 * (lo + hi) };
        // near the root the candidate can land in a short rounding cycle;
        // revisiting either of the last two iterates means it has converged
        // to within an ulp, and either member of the cycle serves
        if next == lambda || next == prev {
            break;
        }
        prev = lambda;
        lambda = next;
    }
    lambda
}

/// Result of a solve: final point and state plus run diagnostics. Present
/// whether or not the run converged; check `diagnostics.converged`.
#[derive(Debug, Clone)]
pub struct Solution {
    pub h: WorkerDistribution,
    pub state: ShortRunState,
    pub diagnostics: SolveDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub converged: bool,
    pub iterations: u64,
    pub merit: f64,
    /// Mass-weighted mean utility over occupied cells at the final point.
    pub utility_level: f64,
    pub escape_steps: u64,
    pub line_search_failures: u64,
    pub merit_evaluations: u64,
}

/// Minimize the merit function from `h0` until `G < merit_tol` or the
/// iteration budget runs out.
pub fn solve_equilibrium(
    ctx: &ShortRunContext,
    h0: WorkerDistribution,
    cfg: &SolverConfig,
) -> Result<Solution> {
    cfg.validate()?;
    let p = ctx.params();
    if h0.h.shape() != [p.industries, p.locations] {
        return Err(Error::dim(format!(
            "initial state is {:?}, expected [{}, {}]",
            h0.h.shape(),
            p.industries,
            p.locations
        )));
    }
    let mut engine = HotEngine::new(ctx, &h0);
    engine.armijo_delta = cfg.armijo_delta;
    drop(h0);
    let mut evals: u64 = 1;
    {
        let (g, dn2) = engine.eval_initial();
        engine.adopt(g, dn2);
    }
    if !engine.merit.is_finite() {
        return Err(Error::Numeric(format!(
            "merit is non-finite ({}) at the initial point",
            engine.merit
        )));
    }
    let mut iterations: u64 = 0;
    let mut escape_steps: u64 = 0;
    let mut line_search_failures: u64 = 0;
    let stationary = engine.dnorm2 == 0.0;

    while !stationary && engine.merit >= cfg.merit_tol && iterations < cfg.max_iter {
        // same scan as `armijo_step`, on the engine's buffers
        let min_step = cfg.min_step(iterations);
        let mut gamma_k = 1.0;
        let mut failed = true;
        let mut accepted = false;
        for _ in 0..=cfg.max_backtracks {
            if gamma_k <= min_step {
                // any later satisfying k would be at least this short; escape
                failed = false;
                break;
            }
            // candidates inside the screen's trust region are filtered by
            // the quadratic profile; an accept from the screen is confirmed
            // exactly before it may become the next point
            let (g, dn2, screened) = engine.eval_screened(gamma_k);
            evals += 1;
            let threshold = -cfg.armijo_delta * gamma_k * engine.dnorm2;
            // a non-finite trial merit (overflowed at an extreme state) never
            // qualifies; backtracking shortens the step until it does
            if g.is_finite() && g - engine.merit <= threshold {
                if screened {
                    let (ge, de) = engine.eval_trial(gamma_k);
                    evals += 1;
                    if ge.is_finite() && ge - engine.merit <= threshold {
                        engine.adopt(ge, de);
                        accepted = true;
                        break;
                    }
                    // the screen was optimistic at this step; keep scanning
                } else {
                    engine.adopt(g, dn2);
                    accepted = true;
                    break;
                }
            }
            gamma_k *= cfg.backtrack;
        }
        if accepted {
            iterations += 1;
            continue;
        }
        let step = cfg.escape_step(engine.merit);
        let (g, dn2) = engine.eval_trial(step);
        evals += 1;
        engine.adopt(g, dn2);
        iterations += 1;
        escape_steps += 1;
        if failed {
            line_search_failures += 1;
        }
        if !engine.merit.is_finite() {
            // only an escape step can land here (the line search filters
            // non-finite merits); continuing would mean descending blind
            let kind = StepKind::Escape { step, line_search_failed: failed };
            return Err(Error::Numeric(format!(
                "merit became non-finite ({}) after iteration {iterations} ({kind:?})",
                engine.merit
            )));
        }
    }

    let h = engine.distribution();
    let state = ctx.state(&h);
    let utility_level = mass_weighted_utility(&h, &state);
    let converged = stationary || engine.merit < cfg.merit_tol;
    Ok(Solution {
        diagnostics: SolveDiagnostics {
            converged,
            iterations,
            merit: engine.merit,
            utility_level,
            escape_steps,
            line_search_failures,
            merit_evaluations: evals,
        },
        h,
        state,
    })
}

fn mass_weighted_utility(h: &WorkerDistribution, state: &ShortRunState) -> f64 {
    let mass = h.total();
    if mass == 0.0 {
        return f64::NAN;
    }
    h.h.iter().zip(state.utility.iter()).map(|(m, v)| m * v).sum::<f64>() / mass
}

/// Complementarity audit of a candidate equilibrium.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumReport {
    /// Mass-weighted mean utility over occupied cells.
    pub utility_level: f64,
    /// Largest `|v − v*|` over occupied cells.
    pub occupied_deviation: f64,
    /// Largest `v − v*` over vacant cells (how strongly any empty cell beats
    /// the common level; negative when all are strictly worse).
    pub vacant_excess: f64,
    /// `|Σ h − H|`.
    pub mass_error: f64,
    pub satisfied: bool,
}

/// Check the long-run conditions at `h` with absolute utility tolerance
/// `tol`: occupied cells within `tol` of the common level, vacant cells at
/// most `tol` above it, mass conserved to 1e-9 relative.
///
/// A cell counts as occupied when it holds more than `1e-10 · H / (R·I)` —
/// one ten-billionth of the average cell — so that projection dust does not
/// drag the estimated common level or trip the occupied-side check.
pub fn check_equilibrium(
    ctx: &ShortRunContext,
    h: &WorkerDistribution,
    tol: f64,
) -> Result<EquilibriumReport> {
    if !(tol > 0.0) {
        return Err(Error::param("tol", "tolerance must be positive"));
    }
    let p = ctx.params();
    let eps_occupied = 1e-10 * p.mobile / (p.locations * p.industries) as f64;
    let state = ctx.state(h);
    let mut level_mass = 0.0f64;
    let mut level_sum = 0.0f64;
    for (m, v) in h.h.iter().zip(state.utility.iter()) {
        if *m > eps_occupied {
            level_mass += *m;
            level_sum += *m * *v;
        }
    }
    let utility_level = if level_mass > 0.0 { level_sum / level_mass } else { f64::NAN };
    let mut occupied_deviation = 0.0f64;
    let mut vacant_excess = f64::NEG_INFINITY;
    for (m, v) in h.h.iter().zip(state.utility.iter()) {
        if *m > eps_occupied {
            occupied_deviation = occupied_deviation.max((v - utility_level).abs());
        } else {
            vacant_excess = vacant_excess.max(v - utility_level);
        }
    }
    if vacant_excess == f64::NEG_INFINITY {
        vacant_excess = 0.0; // every cell occupied
    }
    let mass_error = (h.total() - p.mobile).abs();
    let satisfied = occupied_deviation <= tol
        && vacant_excess <= tol
        && mass_error <= 1e-9 * p.mobile;
    Ok(EquilibriumReport { utility_level, occupied_deviation, vacant_excess, mass_error, satisfied })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::economy::ModelParams;
    use approx::assert_relative_eq;
    use ndarray::array;

    #[test]
    fn projection_simple_points() {
        let p = project_feasible(&array![[1.0, 1.0]], 1.0).unwrap();
        assert_relative_eq!(p[[0, 0]], 0.5, max_relative = 1e-15);
        assert_relative_eq!(p[[0, 1]], 0.5, max_relative = 1e-15);

        let p = project_feasible(&array![[2.0, 0.0]], 1.0).unwrap();
        assert_eq!(p[[0, 0]], 1.0);
        assert_eq!(p[[0, 1]], 0.0);
    }

    #[test]
    fn projection_clamps_negatives_and_conserves_mass() {
        let x = array![[-3.0, 2.0, -1.0, 0.25]];
        let p = project_feasible(&x, 5.0).unwrap();
        assert!(p.iter().all(|&v| v >= 0.0));
        assert_relative_eq!(p.sum(), 5.0, max_relative = 1e-12);
    }

    #[test]
    fn projection_is_idempotent() {
        let x = array![[3.0, -2.0, 0.5, 0.1, 7.0]];
        let p1 = project_feasible(&x, 4.0).unwrap();
        let p2 = project_feasible(&p1, 4.0).unwrap();
        for (a, b) in p1.iter().zip(p2.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn single_site_is_immediately_stationary() {
        let p = ModelParams::new(1, 1, 1000.0, 10_000.0, 0.6, 1.0, vec![2.0]).unwrap();
        let ctx = ShortRunContext::new(p.clone()).unwrap();
        let h0 = WorkerDistribution::uniform(&p);
        assert_eq!(merit(&ctx, &h0).unwrap(), 0.0);
        let sol = solve_equilibrium(&ctx, h0, &SolverConfig::default()).unwrap();
        assert!(sol.diagnostics.converged);
        assert_eq!(sol.diagnostics.iterations, 0);
    }

    #[test]
    fn zero_direction_returns_point_unchanged() {
        let p = ModelParams::new(1, 1, 100.0, 0.0, 0.5, 1.0, vec![3.0]).unwrap();
        let ctx = ShortRunContext::new(p.clone()).unwrap();
        let cur = evaluate(&ctx, WorkerDistribution::uniform(&p)).unwrap();
        let mut evals = 0;
        let (kind, next) =
            armijo_step(&ctx, &cur, &SolverConfig::default(), 0, &mut evals).unwrap();
        assert_eq!(kind, StepKind::Stationary);
        assert_eq!(next.h, cur.h);
        assert_eq!(evals, 0);
    }

    #[test]
    fn min_step_schedule_relaxes_with_iterations() {
        let cfg = SolverConfig::default();
        assert_relative_eq!(cfg.min_step(0), 5e-3, max_relative = 1e-15);
        assert_relative_eq!(cfg.min_step(1_000_000), 5e-4, max_relative = 1e-12);
        assert_relative_eq!(cfg.min_step(5_000_000), 5e-8, max_relative = 1e-12);
        assert_relative_eq!(cfg.min_step(10_000_000), 5e-8, max_relative = 1e-12);
    }

    #[test]
    fn escape_step_lengthens_near_solution() {
        let cfg = SolverConfig::default();
        assert_eq!(cfg.escape_step(1e-3), 5e-3);
        assert_eq!(cfg.escape_step(1e-7), 2e-2);
    }

    #[test]
    fn impossible_line_search_falls_back_to_escape() {
        let p = ModelParams::new(2, 1, 1000.0, 0.0, 0.6, 1.0, vec![2.0]).unwrap();
        let ctx = ShortRunContext::new(p.clone()).unwrap();
        let h0 = WorkerDistribution::from_array(
            &p,
            array![[600.0, 400.0]],
        )
        .unwrap();
        let cur = evaluate(&ctx, h0).unwrap();
        assert!(cur.merit > 1e-6);
        // a sufficient-decrease requirement no real step can meet
        let cfg = SolverConfig { armijo_delta: 1e12, ..SolverConfig::default() };
        let mut evals = 0;
        let (kind, next) = armijo_step(&ctx, &cur, &cfg, 0, &mut evals).unwrap();
        match kind {
            StepKind::Escape { step, line_search_failed } => {
                assert_eq!(step, 5e-3);
                assert!(!line_search_failed); // bottomed out at the min-step schedule
                let expect = &cur.h.h + &(step * &cur.direction);
                for (a, b) in next.h.h.iter().zip(expect.iter()) {
                    assert_relative_eq!(a, b, max_relative = 1e-12, epsilon = 1e-12);
                }
            }
            other => panic!("expected escape step, got {other:?}"),
        }
    }

    #[test]
    fn two_site_economy_agglomerates_without_anchored_demand() {
        // No immobile consumers: market access is the only force and the
        // bigger site wins everything.
        let p = ModelParams::new(2, 1, 1000.0, 0.0, 0.6, 1.0, vec![2.0]).unwrap();
        let ctx = ShortRunContext::new(p.clone()).unwrap();
        let h0 = WorkerDistribution::from_array(&p, array![[600.0, 400.0]]).unwrap();
        let sol = solve_equilibrium(&ctx, h0, &SolverConfig::default()).unwrap();
        assert!(sol.diagnostics.converged, "diagnostics: {:?}", sol.diagnostics);
        assert_relative_eq!(sol.h.h[[0, 0]], 1000.0, max_relative = 1e-9);
        assert_eq!(sol.h.h[[0, 1]], 0.0);
        let report = check_equilibrium(
            &ctx,
            &sol.h,
            1e-6 * sol.diagnostics.utility_level.abs(),
        )
        .unwrap();
        assert!(report.satisfied, "report: {report:?}");
        // vacant site strictly worse
        assert!(report.vacant_excess < 0.0);
    }

    #[test]
    fn anchored_demand_disperses_workers() {
        // Immobile consumers dominate (L = 10 H): the equal split is the
        // equilibrium reached from an uneven start.
        let p = ModelParams::new(2, 1, 1000.0, 10_000.0, 0.6, 1.0, vec![2.0]).unwrap();
        let ctx = ShortRunContext::new(p.clone()).unwrap();
        let h0 = WorkerDistribution::from_array(&p, array![[900.0, 100.0]]).unwrap();
        // drive the merit further than the default so the per-cell
        // complementarity check below can be held to a sharp tolerance
        let cfg = SolverConfig { merit_tol: 1e-12, ..SolverConfig::default() };
        let sol = solve_equilibrium(&ctx, h0, &cfg).unwrap();
        assert!(sol.diagnostics.converged, "diagnostics: {:?}", sol.diagnostics);
        // the merit tolerance leaves a small residual asymmetry; the
        // equilibrium check below is the sharp criterion
        assert_relative_eq!(sol.h.h[[0, 0]], 500.0, max_relative = 1e-3);
        assert_relative_eq!(sol.h.h[[0, 1]], 500.0, max_relative = 1e-3);
        let report =
            check_equilibrium(&ctx, &sol.h, 1e-6 * sol.diagnostics.utility_level.abs()).unwrap();
        assert!(report.satisfied, "report: {report:?}");
    }

    #[test]
    fn solver_reports_nonconvergence_when_budget_exhausted() {
        let p = ModelParams::new(2, 1, 1000.0, 0.0, 0.6, 1.0, vec![2.0]).unwrap();
        let ctx = ShortRunContext::new(p.clone()).unwrap();
        let h0 = WorkerDistribution::from_array(&p, array![[600.0, 400.0]]).unwrap();
        let cfg = SolverConfig { max_iter: 3, ..SolverConfig::default() };
        let sol = solve_equilibrium(&ctx, h0, &cfg).unwrap();
        assert!(!sol.diagnostics.converged);
        assert_eq!(sol.diagnostics.iterations, 3);
    }

    /// Deterministic, vaguely uneven worker distribution for test states.
    fn test_distribution(p: &ModelParams, salt: usize) -> WorkerDistribution {
        let (inds, rows) = (p.industries, p.locations);
        let mut raw = Array2::zeros((inds, rows));
        let mut sum = 0.0;
        for i in 0..inds {
            for r in 0..rows {
                let u = ((i * rows + r) * 7919 + salt * 104729 + 13) % 1009;
                let v = 0.05 + (u as f64) / 211.0;
                raw[[i, r]] = v;
                sum += v;
            }
        }
        raw.mapv_inplace(|v| v * p.mobile / sum);
        WorkerDistribution::from_array(p, raw).unwrap()
    }

    #[test]
    fn engine_matches_reference_evaluation_across_shapes() {
        for &(rows, inds) in
            &[(1usize, 1usize), (2, 1), (3, 2), (4, 3), (5, 2), (8, 3), (64, 4)]
        {
            let sigmas: Vec<f64> = (0..inds).map(|i| 1.5 + 2.5 * i as f64).collect();
            let p =
                ModelParams::new(rows, inds, 1000.0, 800.0, 0.55, 1.0, sigmas).unwrap();
            let ctx = ShortRunContext::new(p.clone()).unwrap();
            for salt in 0..4 {
                let h = test_distribution(&p, salt);
                let reference = evaluate(&ctx, h.clone()).unwrap();
                let mut eng = HotEngine::new(&ctx, &h);
                let (g, dn2) = eng.eval_initial();
                assert_relative_eq!(
                    g,
                    reference.merit,
                    max_relative = 1e-10,
                    epsilon = 1e-10
                );
                assert_relative_eq!(
                    dn2,
                    reference.direction_norm_sq,
                    max_relative = 1e-10,
                    epsilon = 1e-12
                );
                for r in 0..rows {
                    for i in 0..inds {
                        let a = eng.dt[r * inds + i];
                        let b = reference.direction[[i, r]];
                        assert!(
                            (a - b).abs() <= 1e-7 * (1.0 + b.abs()),
                            "direction mismatch at ({i},{r}): {a} vs {b}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn engine_matches_reference_along_line_search_trials() {
        // walk one real line search: evaluate the same trial points both ways
        let p = ModelParams::new(16, 3, 1000.0, 400.0, 0.6, 1.0, vec![1.5, 4.0, 12.0])
            .unwrap();
        let ctx = ShortRunContext::new(p.clone()).unwrap();
        let h = test_distribution(&p, 9);
        let reference = evaluate(&ctx, h.clone()).unwrap();
        let mut eng = HotEngine::new(&ctx, &h);
        let (g0, dn0) = eng.eval_initial();
        eng.adopt(g0, dn0);
        // the two smallest steps push every cell's relative access change
        // inside the series window, exercising the incremental path
        for &gamma in &[1.0, 0.8, 0.64, 0.512, 0.02, 5e-3, 1e-4, 1e-6] {
            let trial = step_point(&reference, gamma);
            let ref_eval = evaluate(&ctx, trial).unwrap();
            let (g, dn2) = eng.eval_trial(gamma);
            assert_relative_eq!(g, ref_eval.merit, max_relative = 1e-9, epsilon = 1e-9);
            assert_relative_eq!(
                dn2,
                ref_eval.direction_norm_sq,
                max_relative = 1e-9,
                epsilon = 1e-11
            );
        }
    }

    #[test]
    fn screened_trials_match_exact_merits_far_from_equilibrium() {
        // fresh start far from equilibrium: the screen's trust region is
        // small, but inside it the quadratic profile must already track the
        // exact merit closely
        let p =
            ModelParams::new(48, 3, 900.0, 500.0, 0.55, 1.0, vec![2.0, 4.0, 9.0]).unwrap();
        let ctx = ShortRunContext::new(p.clone()).unwrap();
        let h0 = test_distribution(&p, 3);
        let mut eng = HotEngine::new(&ctx, &h0);
        let (g, dn2) = eng.eval_initial();
        eng.adopt(g, dn2);
        eng.prepare();
        let cap = eng.quad_cap;
        assert!(
            cap > 0.0 && cap <= 1.0,
            "screen trust region should be usable here, got {cap}"
        );
        assert!(eng.poly_cap >= 0.0 && eng.poly_cap <= cap);
        for &f in &[1.0, 0.37, 0.11] {
            let gamma = cap * f;
            let gq = eng.quad_eval(gamma);
            let (ge, _) = eng.eval_trial(gamma);
            assert!(
                (gq - ge).abs() <= 1e-8 * ge.abs().max(1.0),
                "screen off at gamma={gamma}: {gq} vs {ge}"
            );
            if gamma <= eng.poly_cap {
                let gp = eng.poly_eval(gamma);
                assert!(
                    (gp - ge).abs() <= 1e-8 * ge.abs().max(1.0),
                    "quartic profile off at gamma={gamma}: {gp} vs {ge}"
                );
            }
        }
        // just past the trust region the screen must hand over to the engine
        let (_, dn2b, screened) = eng.eval_screened((cap * 1.001).min(1.0));
        if cap < 0.999 {
            assert!(!screened);
            assert!(dn2b.is_finite());
        }
    }

    #[test]
    fn screened_trials_match_exact_merits_near_equilibrium() {
        // long runs spend almost every evaluation near the solution, where
        // the screen must cover the whole scan and agree with the exact
        // merit to far better than the Armijo decrease threshold
        let p = ModelParams::new(32, 2, 600.0, 400.0, 0.5, 1.0, vec![2.5, 6.0]).unwrap();
        let ctx = ShortRunContext::new(p.clone()).unwrap();
        let h0 = test_distribution(&p, 1);
        let cfg = SolverConfig { merit_tol: 1e-8, ..SolverConfig::default() };
        let sol = solve_equilibrium(&ctx, h0, &cfg).unwrap();
        assert!(sol.diagnostics.converged);
        let mut eng = HotEngine::new(&ctx, &sol.h);
        let (g, dn2) = eng.eval_initial();
        eng.adopt(g, dn2);
        eng.prepare();
        assert!(
            eng.quad_cap >= 0.04,
            "near a solution the trust region should cover real steps, got {}",
            eng.quad_cap
        );
        for &f in &[1.0, 0.32, 0.04] {
            let gamma = eng.quad_cap * f;
            let gq = eng.quad_eval(gamma);
            let (ge, _) = eng.eval_trial(gamma);
            assert!(
                (gq - ge).abs() <= 1e-12 + 1e-6 * ge.abs(),
                "screen off at gamma={gamma}: {gq} vs {ge}"
            );
            if gamma <= eng.poly_cap {
                let gp = eng.poly_eval(gamma);
                assert!(
                    (gp - ge).abs() <= 1e-12 + 1e-6 * ge.abs(),
                    "quartic profile off at gamma={gamma}: {gp} vs {ge}"
                );
            }
        }
    }

    #[test]
    fn engine_and_reference_both_reject_states_with_an_absent_industry() {
        // industry 0 carries no workers anywhere: its access floors out, its
        // wages go astronomical, and the projection threshold is too large to
        // resolve the worker total — both paths must flag the point unusable
        let p = ModelParams::new(8, 2, 1000.0, 800.0, 0.6, 1.0, vec![1.5, 3.0]).unwrap();
        let ctx = ShortRunContext::new(p.clone()).unwrap();
        let mut raw = Array2::zeros((2, 8));
        for r in 0..8 {
            raw[[1, r]] = 125.0;
        }
        let h = WorkerDistribution::from_array(&p, raw).unwrap();
        let reference = evaluate(&ctx, h.clone()).unwrap();
        assert!(!reference.merit.is_finite());
        let mut eng = HotEngine::new(&ctx, &h);
        let (g, _) = eng.eval_initial();
        assert!(!g.is_finite());
        // and the solver refuses to start from such a point
        let err = solve_equilibrium(&ctx, h, &SolverConfig::default()).unwrap_err();
        assert!(err.to_string().contains("initial point"));
    }

    #[test]
    fn support_threshold_matches_sort_projection() {
        for trial in 0..200 {
            let n = 1 + trial % 17;
            let total = 0.5 + (trial % 7) as f64 * 37.5;
            let mut y = vec![0.0; n];
            for c in 0..n {
                y[c] = if c % 5 == 0 && c > 0 {
                    y[c - 1] // exercise ties
                } else {
                    ((c * 7919 + trial * 131 + 29) % 2001) as f64 / 20.0 - 50.0
                };
            }
            let arr = Array2::from_shape_vec((1, n), y.clone()).unwrap();
            let sorted_target = project_feasible(&arr, total).unwrap();
            let maxy = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lam = lambda_threshold(&y, total, maxy, f64::NAN);
            let mut mass = 0.0;
            for c in 0..n {
                let p = (y[c] - lam).max(0.0);
                mass += p;
                assert!(
                    (p - sorted_target[[0, c]]).abs() <= 1e-9,
                    "trial {trial} entry {c}: {p} vs {}",
                    sorted_target[[0, c]]
                );
            }
            assert_relative_eq!(mass, total, max_relative = 1e-12);
            // a warm start lands on the same threshold
            let warm = lambda_threshold(&y, total, maxy, lam + 0.37);
            assert!((warm - lam).abs() <= 1e-9 * (1.0 + lam.abs()));
        }
    }

    #[test]
    #[ignore = "timing probe, run by hand with --release"]
    fn bench_engine_components() {
        use std::time::Instant;
        let p = ModelParams::new(
            64,
            4,
            1000.0,
            10_000.0,
            0.6,
            1.0,
            vec![1.5, 3.0, 8.0, 50.0],
        )
        .unwrap();
        let ctx = ShortRunContext::new(p.clone()).unwrap();
        let h = test_distribution(&p, 1);
        let mut eng = HotEngine::new(&ctx, &h);
        let (g, dn) = eng.eval_initial();
        eng.adopt(g, dn);
        let reps = 200_000u32;

        let t = Instant::now();
        let mut sink = 0.0;
        for k in 0..reps {
            let (g, _) = eng.eval_trial(0.9 + 1e-9 * (k % 7) as f64);
            sink += g;
        }
        let dt = t.elapsed().as_secs_f64();
        println!(
            "eval_trial big step: {:.3} us each (sink {sink:.3})",
            dt / reps as f64 * 1e6
        );

        let t = Instant::now();
        let mut sink = 0.0;
        for k in 0..reps {
            let (g, _) = eng.eval_trial(1e-5 * (1.0 + 1e-9 * (k % 7) as f64));
            sink += g;
        }
        let dt = t.elapsed().as_secs_f64();
        println!(
            "eval_trial series path: {:.3} us each (sink {sink:.3})",
            dt / reps as f64 * 1e6
        );

        let t = Instant::now();
        let mut sink = 0.0;
        for _ in 0..reps {
            let (g, _) = eng.finish_from_z();
            sink += g;
        }
        let dt = t.elapsed().as_secs_f64();
        println!(
            "finish_from_z alone: {:.3} us each (sink {sink:.3})",
            dt / reps as f64 * 1e6
        );

        let t = Instant::now();
        let mut sink = 0usize;
        for k in 0..reps {
            let (c, o) = eng.trial_pass_g::<4>(1e-5 * (1.0 + 1e-9 * (k % 7) as f64));
            sink += c + o;
        }
        let dt = t.elapsed().as_secs_f64();
        println!(
            "trial_pass alone: {:.3} us each (sink {sink})",
            dt / reps as f64 * 1e6
        );

        let t = Instant::now();
        let mut acc = 0.0;
        for _ in 0..reps {
            for c in 0..eng.delta_t.len() {
                acc += crate::numeric::ln_normal(eng.delta_t[c]);
            }
        }
        let dt = t.elapsed().as_secs_f64();
        println!(
            "ln pass over {} cells: {:.3} us (sink {acc:.3})",
            eng.delta_t.len(),
            dt / reps as f64 * 1e6
        );

        let t = Instant::now();
        for _ in 0..reps {
            sweep_multi(
                eng.rows, eng.inds, eng.half, &eng.q, &eng.tail, &eng.anti, &mut eng.acc,
                &eng.ht, &mut eng.delta_t,
            );
        }
        let dt = t.elapsed().as_secs_f64();
        println!("one sweep: {:.3} us", dt / reps as f64 * 1e6);

        let t = Instant::now();
        let mut prep = 0.0;
        for _ in 0..reps / 10 {
            eng.prepared = false;
            eng.prepare();
            prep += eng.delta_d[0];
        }
        let dt = t.elapsed().as_secs_f64();
        println!(
            "prepare (per iteration): {:.3} us (sink {prep:.3})",
            dt / (reps / 10) as f64 * 1e6
        );

        let t = Instant::now();
        let mut lam = 0.0;
        for k in 0..reps {
            let maxy = eng.moved.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            lam += lambda_threshold(&eng.moved, eng.total, maxy, f64::NAN + k as f64);
        }
        let dt = t.elapsed().as_secs_f64();
        println!("cold lambda+max: {:.3} us (sink {lam:.3})", dt / reps as f64 * 1e6);

        let t = Instant::now();
        let mut sink = 0.0;
        for k in 0..reps {
            sink += eng.quad_eval(1e-2 * (1.0 + 1e-9 * (k % 7) as f64));
        }
        let dt = t.elapsed().as_secs_f64();
        println!(
            "quad_eval: {:.3} us each (sink {sink:.3}, cap {:.3e})",
            dt / reps as f64 * 1e6,
            eng.quad_cap
        );
    }

    #[test]
    fn solver_runs_are_bit_reproducible() {
        let p = ModelParams::new(12, 2, 1000.0, 2000.0, 0.5, 1.0, vec![2.0, 6.0]).unwrap();
        let ctx = ShortRunContext::new(p.clone()).unwrap();
        let cfg = SolverConfig { max_iter: 50_000, ..SolverConfig::default() };
        let run = || {
            let h0 = test_distribution(&p, 3);
            solve_equilibrium(&ctx, h0, &cfg).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.diagnostics.iterations, b.diagnostics.iterations);
        assert_eq!(a.diagnostics.merit.to_bits(), b.diagnostics.merit.to_bits());
        assert_eq!(a.diagnostics.merit_evaluations, b.diagnostics.merit_evaluations);
        let ha = a.h.h.as_slice().unwrap();
        let hb = b.h.h.as_slice().unwrap();
        assert!(ha.iter().zip(hb).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
