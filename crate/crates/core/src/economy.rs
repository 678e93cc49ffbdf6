//! Short-run market equilibrium of the many-industry ring economy.
//!
//! Given a distribution of mobile workers over (industry, location) cells,
//! every market outcome has a closed form: market access (demand-weighted
//! reachability of customers), nominal wages, goods access (the log price
//! index up to sign and scale), and the indirect utility that drives worker
//! relocation. The formulas here are evaluated per industry with two
//! matrix–vector products each, so one full state costs `O(I R²)`.
//!
//! Market access values are floored at [`ACCESS_FLOOR`] before logarithms and
//! reciprocals. The floor keeps states with locally absent industries finite:
//! a location with (numerically) zero access to some good is astronomically
//! attractive to a lone entrant of that industry, and the dynamics resolve
//! that by moving workers in, not by crashing.

use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::error::Error;
use crate::geometry::{FreenessMatrix, RingGeography};
use crate::Result;

/// Lower bound applied to market access before `ln` and division.
pub const ACCESS_FLOOR: f64 = 1e-300;

/// Primitives of the model economy.
///
/// `mobile` (total mass of relocatable workers) spreads across industries and
/// locations; `immobile` is split evenly over locations, `immobile / R` per
/// site, and consumes but never moves. Each industry `i` has its own demand
/// elasticity `sigmas[i] > 1`; `phi` in (0, 1) sets how fast trade decays
/// with ring distance and `beta` is the unit labor requirement.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub locations: usize,
    pub industries: usize,
    pub mobile: f64,
    pub immobile: f64,
    pub phi: f64,
    pub beta: f64,
    pub sigmas: Vec<f64>,
}

impl ModelParams {
    pub fn new(
        locations: usize,
        industries: usize,
        mobile: f64,
        immobile: f64,
        phi: f64,
        beta: f64,
        sigmas: Vec<f64>,
    ) -> Result<Self> {
        if locations == 0 {
            return Err(Error::param("locations", "need at least one location"));
        }
        if industries == 0 {
            return Err(Error::param("industries", "need at least one industry"));
        }
        if !(mobile > 0.0) || !mobile.is_finite() {
            return Err(Error::param("mobile", format!("mobile mass must be positive, got {mobile}")));
        }
        if !(immobile >= 0.0) || !immobile.is_finite() {
            return Err(Error::param(
                "immobile",
                format!("immobile mass must be nonnegative, got {immobile}"),
            ));
        }
        if !(phi > 0.0 && phi < 1.0) {
            return Err(Error::param("phi", format!("freeness base must lie in (0, 1), got {phi}")));
        }
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::param("beta", format!("labor requirement must be positive, got {beta}")));
        }
        if sigmas.len() != industries {
            return Err(Error::dim(format!(
                "expected {industries} elasticities, got {}",
                sigmas.len()
            )));
        }
        for (i, &s) in sigmas.iter().enumerate() {
            if !(s > 1.0) || !s.is_finite() {
                return Err(Error::param(
                    "sigmas",
                    format!("elasticity of industry {i} must exceed 1, got {s}"),
                ));
            }
        }
        Ok(ModelParams { locations, industries, mobile, immobile, phi, beta, sigmas })
    }

    /// Immobile workers per location.
    pub fn immobile_per_site(&self) -> f64 {
        self.immobile / self.locations as f64
    }

    pub fn geography(&self) -> RingGeography {
        RingGeography::new(self.locations).expect("validated at construction")
    }
}

/// Mass of mobile workers per (industry, location) cell.
///
/// Stored as an `industries × locations` array so each industry's spatial
/// profile is one contiguous row. Entries are nonnegative and sum to the
/// mobile total.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerDistribution {
    pub h: Array2<f64>,
}

impl WorkerDistribution {
    /// Everyone spread evenly: `mobile / (I · R)` in every cell.
    pub fn uniform(params: &ModelParams) -> Self {
        let cell = params.mobile / (params.industries * params.locations) as f64;
        WorkerDistribution { h: Array2::from_elem((params.industries, params.locations), cell) }
    }

    /// Wraps an explicit array, checking shape, sign and total mass
    /// (must match `params.mobile` to 1e-9 relative).
    pub fn from_array(params: &ModelParams, h: Array2<f64>) -> Result<Self> {
        if h.shape() != [params.industries, params.locations] {
            return Err(Error::dim(format!(
                "worker array is {:?}, expected [{}, {}]",
                h.shape(),
                params.industries,
                params.locations
            )));
        }
        if h.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::param("h", "worker masses must be finite and nonnegative"));
        }
        let total: f64 = h.sum();
        if (total - params.mobile).abs() > 1e-9 * params.mobile {
            return Err(Error::param(
                "h",
                format!("total mass {total} does not match mobile total {}", params.mobile),
            ));
        }
        Ok(WorkerDistribution { h })
    }

    /// Spatial profile of one industry.
    pub fn industry(&self, i: usize) -> ArrayView1<'_, f64> {
        self.h.row(i)
    }

    /// Total mobile workers at each location (summed over industries).
    pub fn site_totals(&self) -> Array1<f64> {
        self.h.sum_axis(Axis(0))
    }

    pub fn total(&self) -> f64 {
        self.h.sum()
    }
}

/// Market access of one industry: `Δ_i = D_i h_i`, floored at
/// [`ACCESS_FLOOR`].
///
/// Errors if the industry has no workers anywhere (its market structure is
/// then undefined, not merely small).
pub fn market_access(d: &FreenessMatrix, h_i: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    if h_i.len() != d.len() {
        return Err(Error::dim(format!(
            "industry profile has {} entries for {} locations",
            h_i.len(),
            d.len()
        )));
    }
    if h_i.sum() == 0.0 {
        return Err(Error::DegenerateIndustry { industry: usize::MAX });
    }
    Ok(floored_access(d, h_i))
}

fn floored_access(d: &FreenessMatrix, h_i: ArrayView1<'_, f64>) -> Array1<f64> {
    let mut delta = d.matvec(h_i);
    delta.mapv_inplace(|x| x.max(ACCESS_FLOOR));
    delta
}

/// Nominal wage per industry worker at every location:
/// `w_ir = (1/σ_i) Σ_s φ_i(r,s) (tot_s + l) / Δ_is`
/// where `tot_s` is total mobile mass at `s` and `l` the immobile mass per
/// site.
pub fn wages(
    d: &FreenessMatrix,
    delta_i: &Array1<f64>,
    site_totals: &Array1<f64>,
    immobile_per_site: f64,
    sigma: f64,
) -> Result<Array1<f64>> {
    let n = d.len();
    if delta_i.len() != n || site_totals.len() != n {
        return Err(Error::dim("wages: access or population vector has wrong length"));
    }
    let demand_per_access =
        Array1::from_shape_fn(n, |s| (site_totals[s] + immobile_per_site) / delta_i[s].max(ACCESS_FLOOR));
    let mut w = d.matvec(demand_per_access.view());
    w.mapv_inplace(|x| x / sigma);
    Ok(w)
}

/// Goods access of one industry: `S_ir = ln(Δ_ir) / (σ_i - 1)`.
///
/// This is the part of utility contributed by the availability of industry
/// `i` varieties; it is a monotone transform of the price index.
pub fn goods_access(sigma: f64, delta_i: &Array1<f64>) -> Array1<f64> {
    delta_i.mapv(|x| x.max(ACCESS_FLOOR).ln() / (sigma - 1.0))
}

/// Mill price of every variety of industry `i`: `p_i = σ_i β / (σ_i - 1)`.
///
/// Marginal cost is `β`, so the relative markup is `1 / (σ_i - 1)`.
pub fn price(sigma: f64, beta: f64) -> Result<f64> {
    if !(sigma > 1.0) || !sigma.is_finite() {
        return Err(Error::param("sigma", format!("elasticity must exceed 1, got {sigma}")));
    }
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::param("beta", format!("labor requirement must be positive, got {beta}")));
    }
    Ok(sigma * beta / (sigma - 1.0))
}

/// Relative markup of industry `i` over marginal cost.
pub fn markup(sigma: f64) -> Result<f64> {
    if !(sigma > 1.0) || !sigma.is_finite() {
        return Err(Error::param("sigma", format!("elasticity must exceed 1, got {sigma}")));
    }
    Ok(1.0 / (sigma - 1.0))
}

/// Everything the short run determines at a given worker distribution.
///
/// All arrays are `industries × locations`, matching [`WorkerDistribution`].
#[derive(Debug, Clone)]
pub struct ShortRunState {
    /// `Δ_ir`, floored.
    pub market_access: Array2<f64>,
    /// `w_ir`.
    pub wages: Array2<f64>,
    /// `S_ir`.
    pub goods_access: Array2<f64>,
    /// Indirect utility `v_ir = Σ_j S_jr + w_ir − I`.
    pub utility: Array2<f64>,
    /// Mill price per industry (location-independent).
    pub prices: Vec<f64>,
}

impl ShortRunState {
    /// CES price index of industry `i` at location `r` (diagnostic):
    /// `P_ir = σ_i/(σ_i−1) · β · Δ_ir^(1/(1−σ_i))`.
    pub fn price_index(&self, params: &ModelParams, i: usize, r: usize) -> f64 {
        let sigma = params.sigmas[i];
        let delta = self.market_access[[i, r]];
        sigma / (sigma - 1.0) * params.beta * delta.powf(1.0 / (1.0 - sigma))
    }
}

/// Precomputed geography shared by every short-run evaluation of one model:
/// the freeness matrix of each industry.
#[derive(Debug, Clone)]
pub struct ShortRunContext {
    params: ModelParams,
    freeness: Vec<FreenessMatrix>,
}

impl ShortRunContext {
    pub fn new(params: ModelParams) -> Result<Self> {
        let geo = RingGeography::new(params.locations)?;
        let freeness = params
            .sigmas
            .iter()
            .map(|&sigma| FreenessMatrix::build(&geo, sigma, params.phi))
            .collect::<Result<Vec<_>>>()?;
        Ok(ShortRunContext { params, freeness })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn freeness(&self, i: usize) -> &FreenessMatrix {
        &self.freeness[i]
    }

    /// Full short-run state at `h`.
    ///
    /// Does not insist that every industry has positive mass: intermediate
    /// states of the long-run dynamics may momentarily empty an industry, and
    /// the access floor keeps the result finite (and extremely favorable to
    /// re-entry, which is what pulls the industry back). Use
    /// [`indirect_utility`] for the checked public entry point.
    pub fn state(&self, h: &WorkerDistribution) -> ShortRunState {
        let p = &self.params;
        let (ni, nr) = (p.industries, p.locations);
        debug_assert_eq!(h.h.shape(), [ni, nr]);
        let site_totals = h.site_totals();
        let l = p.immobile_per_site();

        let mut market_access = Array2::zeros((ni, nr));
        let mut wages_arr = Array2::zeros((ni, nr));
        let mut goods = Array2::zeros((ni, nr));
        let mut access_sum = Array1::<f64>::zeros(nr);

        for i in 0..ni {
            let sigma = p.sigmas[i];
            let d = &self.freeness[i];
            let delta = floored_access(d, h.industry(i));
            let demand_per_access =
                Array1::from_shape_fn(nr, |s| (site_totals[s] + l) / delta[s]);
            let mut w = d.matvec(demand_per_access.view());
            w.mapv_inplace(|x| x / sigma);
            for r in 0..nr {
                let s_ir = delta[r].ln() / (sigma - 1.0);
                goods[[i, r]] = s_ir;
                access_sum[r] += s_ir;
                market_access[[i, r]] = delta[r];
            }
            wages_arr.row_mut(i).assign(&w);
        }

        let mut utility = Array2::zeros((ni, nr));
        for i in 0..ni {
            for r in 0..nr {
                utility[[i, r]] = access_sum[r] + wages_arr[[i, r]] - ni as f64;
            }
        }

        let prices = p.sigmas.iter().map(|&s| s * p.beta / (s - 1.0)).collect();
        ShortRunState { market_access, wages: wages_arr, goods_access: goods, utility, prices }
    }
}

/// Checked short-run evaluation: errors if any industry is entirely empty,
/// otherwise returns the full state.
pub fn indirect_utility(params: &ModelParams, h: &WorkerDistribution) -> Result<ShortRunState> {
    if h.h.shape() != [params.industries, params.locations] {
        return Err(Error::dim(format!(
            "worker array is {:?}, expected [{}, {}]",
            h.h.shape(),
            params.industries,
            params.locations
        )));
    }
    for i in 0..params.industries {
        if h.industry(i).sum() == 0.0 {
            return Err(Error::DegenerateIndustry { industry: i });
        }
    }
    let ctx = ShortRunContext::new(params.clone())?;
    Ok(ctx.state(h))
}

/// Bilateral sales and market shares of industry `i`.
///
/// `sales[[r, s]]` is the value supplier location `r` sells into consumer
/// location `s`; `shares[[r, s]]` normalizes each consumer column to sum to
/// one over suppliers.
#[derive(Debug, Clone)]
pub struct MarketShares {
    pub sales: Array2<f64>,
    pub shares: Array2<f64>,
}

pub fn market_shares(params: &ModelParams, h: &WorkerDistribution, i: usize) -> Result<MarketShares> {
    if i >= params.industries {
        return Err(Error::dim(format!("industry {i} out of range for {}", params.industries)));
    }
    if h.industry(i).sum() == 0.0 {
        return Err(Error::DegenerateIndustry { industry: i });
    }
    let geo = params.geography();
    let d = FreenessMatrix::build(&geo, params.sigmas[i], params.phi)?;
    let delta = floored_access(&d, h.industry(i));
    let site_totals = h.site_totals();
    let l = params.immobile_per_site();
    let nr = params.locations;

    let mut sales = Array2::zeros((nr, nr));
    let mut shares = Array2::zeros((nr, nr));
    for r in 0..nr {
        let h_ir = h.h[[i, r]];
        for s in 0..nr {
            let weight = d.entry(r, s) * h_ir / delta[s];
            sales[[r, s]] = weight * (site_totals[s] + l);
            shares[[r, s]] = weight;
        }
    }
    Ok(MarketShares { sales, shares })
}
