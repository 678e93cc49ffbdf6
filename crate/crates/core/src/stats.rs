//! Statistical tests for city systems.
//!
//! Three regularities of a city system are tested here, each against random
//! counterfactuals through a shared permutation machinery:
//!
//! * **Common power law** ([`cpl_fit`], [`cpl_test`]): do all cells of the
//!   hierarchical partition share one rank-size exponent? A categorical
//!   regression pools every cell under a common slope with per-cell
//!   intercepts; its root-mean-squared error is compared against partitions
//!   whose cells keep their centers and sizes but receive the remaining
//!   cities at random.
//! * **Spacing of large cities** ([`cpp_statistic`], [`cpp_test`]): are the
//!   largest `r` cities spread out over the map? The average distance from
//!   each city to the closest top-`r` city is compared against random
//!   equally-sized city subsets.
//! * **Hierarchy of industries** ([`hierarchy_share`], [`hp_test`]): are the
//!   choice cities of an industry contained in the choice cities of more
//!   ubiquitous industries? The containment share is compared against random
//!   subsets of the same cardinalities.
//!
//! [`rank_size_fit`] estimates a single power law (the building block of the
//! categorical regression), and [`spearman`] measures the rank association
//! between city size and industrial diversity.
//!
//! Every randomized procedure takes an explicit seed and derives one private
//! generator stream per replicate, so results are bit-identical across runs
//! and independent of how replicates are scheduled across threads. P-values
//! follow the permutation convention `p = M₀/(M+1)` where `M₀` counts
//! counterfactuals at least as extreme as the observation (ties count as
//! extreme, which is the conservative choice), and the observation itself is
//! included in the effective sample, hence the `+1`.

use crate::citysystem::{CitySystem, PartitionCell, PartitionTree};
use crate::error::Error;
use crate::Result;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Which tail of the counterfactual distribution counts as extreme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Observations below the counterfactuals support the hypothesis
    /// (spacing, regression error).
    SmallIsExtreme,
    /// Observations above the counterfactuals support the hypothesis
    /// (hierarchy shares).
    LargeIsExtreme,
}

/// Outcome of a permutation test: the observed statistic, the counterfactual
/// draws, and the resulting one-sided p-value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    /// Observed statistic on the actual system.
    pub observed: f64,
    /// Counterfactual statistics, one per replicate, in replicate order.
    pub draws: Vec<f64>,
    /// Number of draws at least as extreme as `observed` (ties included).
    pub m0: usize,
    /// `m0 / (M + 1)`.
    pub p_value: f64,
    pub direction: Direction,
}

impl PermutationResult {
    /// Assemble a result from an observed value and its counterfactual
    /// draws, counting ties toward the extreme side.
    pub fn from_draws(observed: f64, draws: Vec<f64>, direction: Direction) -> Result<Self> {
        let m0 = draws
            .iter()
            .filter(|&&x| match direction {
                Direction::SmallIsExtreme => x <= observed,
                Direction::LargeIsExtreme => x >= observed,
            })
            .count();
        let p = p_value(m0, draws.len())?;
        Ok(PermutationResult { observed, draws, m0, p_value: p, direction })
    }

    /// Number of counterfactual replicates `M`.
    pub fn replicates(&self) -> usize {
        self.draws.len()
    }

    /// Arithmetic mean of the counterfactual draws.
    pub fn counterfactual_mean(&self) -> f64 {
        self.draws.iter().sum::<f64>() / self.draws.len() as f64
    }

    /// 99th percentile of the counterfactual draws by the nearest-rank
    /// method: the smallest draw with at least 99 % of draws at or below it.
    pub fn counterfactual_p99(&self) -> f64 {
        let mut sorted = self.draws.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("draws are finite"));
        let rank = (0.99 * sorted.len() as f64).ceil() as usize;
        sorted[rank.max(1) - 1]
    }

    /// Human-readable p-value. A zero count is reported as a bound, since
    /// the test only resolves probabilities down to `1/(M+1)`.
    pub fn p_display(&self) -> String {
        if self.m0 == 0 {
            format!("< {:.6}", 1.0 / (self.draws.len() as f64 + 1.0))
        } else {
            format!("{:.6}", self.p_value)
        }
    }
}

/// One-sided permutation p-value `M₀/(M+1)` from the count `M₀` of
/// counterfactuals at least as extreme as the observation among `M` draws.
/// The observation itself joins the sample under the null, hence the `+1`.
pub fn p_value(m0: usize, m: usize) -> Result<f64> {
    if m == 0 {
        return Err(Error::param("M", "permutation test needs at least one counterfactual draw"));
    }
    if m0 > m {
        return Err(Error::param(
            "M0",
            format!("extreme count {m0} exceeds the number of draws {m}"),
        ));
    }
    Ok(m0 as f64 / (m as f64 + 1.0))
}

// ---------------------------------------------------------------------------
// Rank-size regression
// ---------------------------------------------------------------------------

/// Ordinary least squares fit of `ln s = b − θ·ln(rank − 0.5)`.
///
/// The half-rank shift is the standard small-sample bias correction for
/// rank-size regressions; `θ` is the reciprocal of the implied power-law
/// exponent `α` of the size distribution's upper tail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSizeFit {
    /// Slope of `ln s` on `−ln(rank − 0.5)`.
    pub theta: f64,
    /// Intercept.
    pub b: f64,
    /// Implied exponent `1/θ`; `NaN` when `θ ≤ 0` (no power-law reading).
    pub alpha: f64,
    /// Per-city residuals in rank order.
    pub residuals: Vec<f64>,
    /// Root mean squared residual.
    pub rmse: f64,
}

/// Fit `ln s = b − θ·ln(rank − 0.5)` to sizes given in rank order.
///
/// `sizes` must be positive, finite and non-increasing (rank 1 first); the
/// rank of a size is its position + 1. Needs at least two cities.
pub fn rank_size_fit(sizes: &[f64]) -> Result<RankSizeFit> {
    validate_sizes(sizes, "sizes")?;
    if sizes.len() < 2 {
        return Err(Error::param("sizes", format!("need at least 2 cities, got {}", sizes.len())));
    }
    let n = sizes.len();
    let xs: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5).ln()).collect();
    let ys: Vec<f64> = sizes.iter().map(|s| s.ln()).collect();
    let xm = xs.iter().sum::<f64>() / n as f64;
    let ym = ys.iter().sum::<f64>() / n as f64;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for i in 0..n {
        sxx += (xs[i] - xm) * (xs[i] - xm);
        sxy += (xs[i] - xm) * (ys[i] - ym);
    }
    // x values are logs of distinct half-ranks, so sxx > 0 for n ≥ 2
    let theta = -sxy / sxx;
    let b = ym + theta * xm;
    let residuals: Vec<f64> = (0..n).map(|i| ys[i] - (b - theta * xs[i])).collect();
    let rmse = (residuals.iter().map(|e| e * e).sum::<f64>() / n as f64).sqrt();
    let alpha = if theta > 0.0 { 1.0 / theta } else { f64::NAN };
    Ok(RankSizeFit { theta, b, alpha, residuals, rmse })
}

fn validate_sizes(sizes: &[f64], name: &'static str) -> Result<()> {
    for (i, &s) in sizes.iter().enumerate() {
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::param(name, format!("size at rank {} is {s}; sizes must be positive and finite", i + 1)));
        }
        if i > 0 && s > sizes[i - 1] {
            return Err(Error::param(
                name,
                format!("size at rank {} exceeds the size at rank {}; sizes must be in rank order", i + 1, i),
            ));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Common-power-law regression
// ---------------------------------------------------------------------------

/// Pooled rank-size regression over several city subsets with one common
/// slope and per-cell intercepts:
/// `ln s_cell,rank = b₁ + β_cell − θ·ln(rank − 0.5)`, `β` of the first
/// (reference) cell fixed at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CplFit {
    /// Common slope.
    pub theta: f64,
    /// Intercept of the reference (first) cell.
    pub b1: f64,
    /// Per-cell intercept offsets against the reference; `betas[0] == 0`.
    pub betas: Vec<f64>,
    /// Per-cell residuals, each in within-cell rank order.
    pub residuals: Vec<Vec<f64>>,
    /// Root mean squared residual over all cities of all cells.
    pub rmse: f64,
}

impl CplFit {
    /// Intercept of cell `j` (`b1 + betas[j]`).
    pub fn intercept(&self, j: usize) -> f64 {
        self.b1 + self.betas[j]
    }
}

/// Fit the common-slope regression to a list of cells, each a size list in
/// within-cell rank order. The first cell is the reference.
///
/// Every cell needs at least two cities: a single observation is absorbed
/// entirely by its own intercept, leaving nothing to identify, so such cells
/// make the design singular and are reported as an error naming the cell.
pub fn cpl_fit(cells: &[Vec<f64>]) -> Result<CplFit> {
    if cells.is_empty() {
        return Err(Error::param("cells", "need at least one cell"));
    }
    for (j, cell) in cells.iter().enumerate() {
        if cell.len() < 2 {
            return Err(Error::Singular(format!(
                "cell {j} has {} cities; every cell needs at least 2 for a common-slope fit",
                cell.len()
            )));
        }
        validate_sizes(cell, "cells")?;
    }
    // One common slope plus one intercept per cell: partial out the cell
    // means (intercepts) and regress the demeaned log sizes on the demeaned
    // log half-ranks pooled over all cells.
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut cell_means = Vec::with_capacity(cells.len());
    for cell in cells {
        let n = cell.len();
        let xs: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5).ln()).collect();
        let ys: Vec<f64> = cell.iter().map(|s| s.ln()).collect();
        let xm = xs.iter().sum::<f64>() / n as f64;
        let ym = ys.iter().sum::<f64>() / n as f64;
        for i in 0..n {
            sxx += (xs[i] - xm) * (xs[i] - xm);
            sxy += (xs[i] - xm) * (ys[i] - ym);
        }
        cell_means.push((xm, ym));
    }
    // every cell has ≥ 2 distinct half-ranks, so sxx > 0
    let theta = -sxy / sxx;
    let intercepts: Vec<f64> = cell_means.iter().map(|&(xm, ym)| ym + theta * xm).collect();
    let b1 = intercepts[0];
    let betas: Vec<f64> = intercepts.iter().map(|c| c - b1).collect();
    let mut residuals = Vec::with_capacity(cells.len());
    let mut sq = 0.0;
    let mut count = 0usize;
    for (j, cell) in cells.iter().enumerate() {
        let mut res = Vec::with_capacity(cell.len());
        for (i, &s) in cell.iter().enumerate() {
            let x = (i as f64 + 0.5).ln();
            let e = s.ln() - (intercepts[j] - theta * x);
            sq += e * e;
            res.push(e);
        }
        count += cell.len();
        residuals.push(res);
    }
    let rmse = (sq / count as f64).sqrt();
    Ok(CplFit { theta, b1, betas, residuals, rmse })
}

/// The size lists of every partition cell holding at least two cities, in
/// breadth-first cell order (the root — the full system — comes first and
/// serves as the regression's reference cell). Singleton cells carry no
/// rank-size information and are skipped.
pub fn partition_size_lists(sys: &CitySystem, tree: &PartitionTree) -> Vec<Vec<f64>> {
    tree.cells()
        .into_iter()
        .filter(|cell| cell.members().len() >= 2)
        .map(|cell| sizes_of(sys, cell.members()))
        .collect()
}

fn sizes_of(sys: &CitySystem, members: &[usize]) -> Vec<f64> {
    // member indices ascending == sizes non-increasing, which is exactly the
    // within-cell rank order the regression wants
    members.iter().map(|&u| sys.size(u)).collect()
}

/// How counterfactual partitions pick each cell's centers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CfCenters {
    /// Keep the actual center of every cell of the actual partition; only
    /// cities that are centers nowhere are reassigned. This holds the entire
    /// center hierarchy fixed, so counterfactuals differ from the actual
    /// system only in where the non-central cities sit. The default.
    PinActual,
    /// Re-derive centers inside each counterfactual cell as its largest
    /// members, mirroring how the actual partition picks centers.
    RerankWithinCell,
}

/// Test whether the partition's cells share a power law more tightly than
/// chance: the common-slope regression error of the actual partition against
/// partitions with the same tree — same cell cardinalities everywhere, and
/// centers per `centers` — but randomly assigned non-central cities.
/// Small error is extreme.
pub fn cpl_test(
    sys: &CitySystem,
    tree: &PartitionTree,
    m: usize,
    seed: u64,
    centers: CfCenters,
) -> Result<PermutationResult> {
    let observed = cpl_fit(&partition_size_lists(sys, tree))?.rmse;
    let plan = CfPlan::build(tree.root());
    let draws = (0..m as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = replicate_rng(seed, CPL_STREAM_TAG, k);
            let cells = counterfactual_cells(&plan, tree.root().members(), centers, &mut rng);
            let lists: Vec<Vec<f64>> = cells.iter().map(|c| sizes_of(sys, c)).collect();
            Ok(cpl_fit(&lists)?.rmse)
        })
        .collect::<Result<Vec<f64>>>()?;
    PermutationResult::from_draws(observed, draws, Direction::SmallIsExtreme)
}

/// Shape of the actual partition tree, reduced to what counterfactual draws
/// need: per node, its cardinality, the cities pinned to it (the centers of
/// every cell in its subtree — each cell head is the center its cell formed
/// around), and its children in center order.
struct CfPlan {
    n: usize,
    /// Ascending city indices that must stay in this node's counterfactual
    /// cell: the heads of all cells of the subtree.
    skeleton: Vec<usize>,
    children: Vec<CfPlan>,
}

impl CfPlan {
    fn build(cell: &PartitionCell) -> CfPlan {
        if cell.members().is_empty() {
            return CfPlan { n: 0, skeleton: Vec::new(), children: Vec::new() };
        }
        let children: Vec<CfPlan> = cell.children().iter().map(CfPlan::build).collect();
        let skeleton = if children.is_empty() {
            vec![cell.members()[0]]
        } else {
            let mut s: Vec<usize> =
                children.iter().flat_map(|c| c.skeleton.iter().copied()).collect();
            s.sort_unstable();
            s
        };
        CfPlan { n: cell.members().len(), skeleton, children }
    }
}

/// Member lists (ascending indices) of every counterfactual cell with at
/// least two members, in depth-first preorder, for one random draw. Cell
/// cardinalities equal the actual partition's at every node by construction.
fn counterfactual_cells(
    plan: &CfPlan,
    all: &[usize],
    centers: CfCenters,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    match centers {
        CfCenters::PinActual => draw_pinned(plan, all, rng, &mut out),
        CfCenters::RerankWithinCell => draw_reranked(plan, all, rng, &mut out),
    }
    out
}

/// Recursive draw keeping every cell head in place: the node's free members
/// (those pinned nowhere below) are shuffled and dealt to the children to
/// fill each child's quota beyond its own pinned cities.
fn draw_pinned(plan: &CfPlan, members: &[usize], rng: &mut ChaCha8Rng, out: &mut Vec<Vec<usize>>) {
    debug_assert_eq!(plan.n, members.len());
    if plan.n >= 2 {
        out.push(members.to_vec());
    }
    if plan.children.is_empty() {
        return;
    }
    // free = members \ skeleton; both sorted ascending
    let mut free = Vec::with_capacity(members.len() - plan.skeleton.len());
    let mut pin = plan.skeleton.iter().peekable();
    for &u in members {
        if pin.peek() == Some(&&u) {
            pin.next();
        } else {
            free.push(u);
        }
    }
    free.shuffle(rng);
    let mut cursor = 0;
    for child in &plan.children {
        let quota = child.n - child.skeleton.len();
        let mut cell: Vec<usize> = child.skeleton.clone();
        cell.extend_from_slice(&free[cursor..cursor + quota]);
        cursor += quota;
        cell.sort_unstable();
        draw_pinned(child, &cell, rng, out);
    }
    debug_assert_eq!(cursor, free.len());
}

/// Recursive draw re-deriving centers: the node's largest members become the
/// children's centers (paired to children in center order), and everyone
/// else is shuffled into the children's remaining slots.
fn draw_reranked(plan: &CfPlan, members: &[usize], rng: &mut ChaCha8Rng, out: &mut Vec<Vec<usize>>) {
    debug_assert_eq!(plan.n, members.len());
    if plan.n >= 2 {
        out.push(members.to_vec());
    }
    if plan.children.is_empty() {
        return;
    }
    let heads = plan.children.iter().filter(|c| c.n > 0).count();
    // members ascending by index == descending by size, so the first
    // `heads` members are the cell's largest
    let mut free: Vec<usize> = members[heads..].to_vec();
    free.shuffle(rng);
    let mut cursor = 0;
    let mut head = 0;
    for child in &plan.children {
        if child.n == 0 {
            continue;
        }
        let mut cell = vec![members[head]];
        head += 1;
        cell.extend_from_slice(&free[cursor..cursor + child.n - 1]);
        cursor += child.n - 1;
        cell.sort_unstable();
        draw_reranked(child, &cell, rng, out);
    }
    debug_assert_eq!(cursor, free.len());
}

// ---------------------------------------------------------------------------
// Spacing of large cities
// ---------------------------------------------------------------------------

/// Average distance from each city to the closest of the `r` largest
/// cities. Cities among the top `r` contribute zero. Non-increasing in `r`.
pub fn cpp_statistic(sys: &CitySystem, r: usize) -> Result<f64> {
    check_rank_cutoff(sys, r)?;
    let top: Vec<usize> = (0..r).collect();
    Ok(mean_spacing(sys, &top))
}

fn check_rank_cutoff(sys: &CitySystem, r: usize) -> Result<()> {
    if sys.is_empty() {
        return Err(Error::param("sys", "city system has no cities"));
    }
    if r == 0 || r > sys.len() {
        return Err(Error::param(
            "r",
            format!("rank cutoff must be between 1 and the number of cities {}, got {r}", sys.len()),
        ));
    }
    Ok(())
}

/// `(1/U) Σ_u min_{v ∈ subset} distance(u, v)`.
fn mean_spacing(sys: &CitySystem, subset: &[usize]) -> f64 {
    let mut total = 0.0;
    for u in 0..sys.len() {
        let mut best = f64::INFINITY;
        for &v in subset {
            let d = sys.distance(u, v);
            if d < best {
                best = d;
            }
        }
        total += best;
    }
    total / sys.len() as f64
}

/// Test whether the largest `r` cities are spread out: the observed average
/// distance to the nearest top-`r` city against random size-`r` city
/// subsets. Small spacing is extreme (an evenly spread top tier brings every
/// city close to some large city).
pub fn cpp_test(sys: &CitySystem, r: usize, m: usize, seed: u64) -> Result<PermutationResult> {
    let observed = cpp_statistic(sys, r)?;
    let u = sys.len();
    let draws: Vec<f64> = (0..m as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = replicate_rng(seed, CPP_STREAM_TAG, k);
            let subset: Vec<usize> = rand::seq::index::sample(&mut rng, u, r).into_vec();
            mean_spacing(sys, &subset)
        })
        .collect();
    PermutationResult::from_draws(observed, draws, Direction::SmallIsExtreme)
}

// ---------------------------------------------------------------------------
// Industrial hierarchy
// ---------------------------------------------------------------------------

/// Share of industry `i`'s choice cities that also host each weakly more
/// ubiquitous industry, averaged over those industries:
/// `H_i = (1/(J_i·U_i)) Σ_{j∈J_i} |U_i ∩ U_j|` with
/// `J_i = {j ≠ i : U_i ≤ U_j}` (cardinality comparison).
///
/// `H_i = 1` exactly when `U_i ⊆ U_j` for every such `j` (perfect nesting).
/// When no other industry is at least as ubiquitous, the share is undefined
/// and `None` is returned (not zero).
pub fn hierarchy_share(sys: &CitySystem, i: usize) -> Result<Option<f64>> {
    let counts = choice_counts(sys)?;
    hierarchy_share_inner(sys, i, &counts)
}

fn choice_counts(sys: &CitySystem) -> Result<Vec<usize>> {
    if sys.industries() == 0 {
        return Err(Error::param("sys", "city system carries no industry presence data"));
    }
    Ok((0..sys.industries()).map(|i| sys.choice_count(i)).collect())
}

fn hierarchy_share_inner(sys: &CitySystem, i: usize, counts: &[usize]) -> Result<Option<f64>> {
    if i >= counts.len() {
        return Err(Error::param(
            "industry",
            format!("index {i} out of range for {} industries", counts.len()),
        ));
    }
    if counts[i] == 0 {
        return Err(Error::DegenerateIndustry { industry: i });
    }
    let peers = weakly_more_ubiquitous(i, counts);
    if peers.is_empty() {
        return Ok(None);
    }
    let wi = sys.presence_words(i);
    let mut overlap = 0usize;
    for &j in &peers {
        let wj = sys.presence_words(j);
        overlap += wi.iter().zip(wj).map(|(a, b)| (a & b).count_ones() as usize).sum::<usize>();
    }
    Ok(Some(overlap as f64 / (peers.len() * counts[i]) as f64))
}

/// `J_i`: industries other than `i` with at least as many choice cities.
fn weakly_more_ubiquitous(i: usize, counts: &[usize]) -> Vec<usize> {
    (0..counts.len()).filter(|&j| j != i && counts[j] >= counts[i]).collect()
}

/// Test every industry's hierarchy share against chance: for each replicate,
/// the industry's choice set and each comparison set are replaced by
/// independent uniform random city subsets of the same cardinalities and the
/// share is recomputed. Large shares are extreme. Industries whose share is
/// undefined come back as `None`; the result vector is indexed by industry.
pub fn hp_test(sys: &CitySystem, m: usize, seed: u64) -> Result<Vec<Option<PermutationResult>>> {
    if sys.is_empty() {
        return Err(Error::param("sys", "city system has no cities"));
    }
    let counts = choice_counts(sys)?;
    let observed: Vec<Option<f64>> = (0..counts.len())
        .map(|i| hierarchy_share_inner(sys, i, &counts))
        .collect::<Result<_>>()?;
    // industries with someone to compare against, with their comparison sets
    let testable: Vec<(usize, Vec<usize>)> = (0..counts.len())
        .filter(|&i| observed[i].is_some())
        .map(|i| (i, weakly_more_ubiquitous(i, &counts)))
        .collect();
    let u = sys.len();
    let words = u.div_ceil(64);
    // replicate-major so each replicate consumes exactly one private stream
    // regardless of scheduling; industries are visited in a fixed order
    // inside a replicate
    let per_replicate: Vec<Vec<f64>> = (0..m as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = replicate_rng(seed, HP_STREAM_TAG, k);
            let mut shares = Vec::with_capacity(testable.len());
            for (i, peers) in &testable {
                let own = random_subset_words(&mut rng, u, counts[*i], words);
                let mut overlap = 0usize;
                for &j in peers {
                    let other = random_subset_words(&mut rng, u, counts[j], words);
                    overlap += own
                        .iter()
                        .zip(&other)
                        .map(|(a, b)| (a & b).count_ones() as usize)
                        .sum::<usize>();
                }
                shares.push(overlap as f64 / (peers.len() * counts[*i]) as f64);
            }
            shares
        })
        .collect();
    let mut results: Vec<Option<PermutationResult>> = vec![None; counts.len()];
    for (t, &(i, _)) in testable.iter().enumerate() {
        let draws: Vec<f64> = per_replicate.iter().map(|rep| rep[t]).collect();
        let obs = observed[i].expect("testable industries have a defined share");
        results[i] = Some(PermutationResult::from_draws(obs, draws, Direction::LargeIsExtreme)?);
    }
    Ok(results)
}

/// Uniform random subset of `{0..u}` of size `k`, as presence bitset words.
fn random_subset_words(rng: &mut ChaCha8Rng, u: usize, k: usize, words: usize) -> Vec<u64> {
    let mut w = vec![0u64; words];
    for idx in rand::seq::index::sample(rng, u, k) {
        w[idx / 64] |= 1 << (idx % 64);
    }
    w
}

// ---------------------------------------------------------------------------
// Rank correlation
// ---------------------------------------------------------------------------

/// Spearman rank correlation: the Pearson correlation of the two samples'
/// ranks, with tied values sharing their average rank.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::dim(format!(
            "rank correlation needs equal lengths, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::param("xs", format!("need at least 2 observations, got {}", xs.len())));
    }
    let rx = midranks(xs, "xs")?;
    let ry = midranks(ys, "ys")?;
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for i in 0..rx.len() {
        let dx = rx[i] - mx;
        let dy = ry[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        let side = if sxx == 0.0 { "first" } else { "second" };
        return Err(Error::DegenerateRanks(format!(
            "the {side} sample is constant, so its ranks have no variance"
        )));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Ranks `1..=n` with ties sharing their average rank.
fn midranks(values: &[f64], name: &'static str) -> Result<Vec<f64>> {
    for &v in values {
        if !v.is_finite() {
            return Err(Error::param(name, format!("non-finite value {v}")));
        }
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("values are finite"));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold one tie group; average of ranks
        // (start+1)..=end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = rank;
        }
        start = end;
    }
    Ok(ranks)
}

// ---------------------------------------------------------------------------
// Reporting
// ---------------------------------------------------------------------------

/// Mean and 99th percentile of the counterfactual draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualSummary {
    pub mean: f64,
    pub p99: f64,
}

/// Serializable record of one permutation test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    /// Test name (`"cpl"`, `"cpp"`, `"hp"`).
    pub test: String,
    /// Test-specific parameters (rank cutoff, branching, center policy, …).
    pub params: serde_json::Value,
    pub observed: f64,
    pub p_value: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub seed: u64,
    pub counterfactual_summary: CounterfactualSummary,
}

impl TestReport {
    /// Build a report from a permutation result.
    pub fn new(
        test: impl Into<String>,
        params: serde_json::Value,
        seed: u64,
        result: &PermutationResult,
    ) -> TestReport {
        TestReport {
            test: test.into(),
            params,
            observed: result.observed,
            p_value: result.p_value,
            m: result.replicates(),
            seed,
            counterfactual_summary: CounterfactualSummary {
                mean: result.counterfactual_mean(),
                p99: result.counterfactual_p99(),
            },
        }
    }
}

// ---------------------------------------------------------------------------
// Replicate streams
// ---------------------------------------------------------------------------

const CPP_STREAM_TAG: u64 = 1;
const HP_STREAM_TAG: u64 = 2;
const CPL_STREAM_TAG: u64 = 3;

/// Private generator for one replicate: the seed picks the family, and the
/// stream id — a test tag in the high bits plus the replicate index — keeps
/// every replicate of every test on its own sequence. Tags sit above bit 48,
/// clear of the ensemble's sample streams, so a shared master seed never
/// aliases a sample draw with a test draw.
fn replicate_rng(seed: u64, tag: u64, replicate: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((tag << 48) | replicate);
    rng
}
