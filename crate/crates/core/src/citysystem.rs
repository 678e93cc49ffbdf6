//! Cities and their spatial hierarchy.
//!
//! A [`CitySystem`] is the bridge between the model side and the statistics
//! side: it reduces an equilibrium (or an externally supplied city table) to
//! a ranked list of cities with sizes, pairwise distances, and per-industry
//! presence sets. On top of it, [`l_partition`] builds the recursive
//! largest-city Voronoi partition ([`PartitionTree`]) that the hierarchy
//! statistics interrogate: every cell takes its largest cities as centers,
//! every city joins its nearest center, and cells keep splitting while they
//! hold more cities than centers.
//!
//! Everything here is deterministic: size ties rank by ascending identifier,
//! and distance ties assign to the larger center, so two runs over the same
//! data produce identical partitions (which permutation tests rely on).

use crate::economy::WorkerDistribution;
use crate::error::Error;
use crate::geometry::RingGeography;
use crate::Result;

/// How city-to-city distances are measured.
///
/// Simulated systems live on the unit-radius ring ([`Metric::Ring`]);
/// external tables give planar coordinates ([`Metric::Planar`]) or an
/// explicit distance matrix ([`Metric::Explicit`]).
#[derive(Debug, Clone)]
pub enum Metric {
    /// Angles (radians) on a unit-radius circle; distance is arc length.
    Ring { angles: Vec<f64> },
    /// Planar coordinates; distance is Euclidean.
    Planar { points: Vec<[f64; 2]> },
    /// Explicit symmetric distance matrix, row-major.
    Explicit { distances: Vec<f64>, n: usize },
}

impl Metric {
    fn len(&self) -> usize {
        match self {
            Metric::Ring { angles } => angles.len(),
            Metric::Planar { points } => points.len(),
            Metric::Explicit { n, .. } => *n,
        }
    }

    fn distance(&self, a: usize, b: usize) -> f64 {
        match self {
            Metric::Ring { angles } => {
                let gap = (angles[a] - angles[b]).abs() % (2.0 * std::f64::consts::PI);
                gap.min(2.0 * std::f64::consts::PI - gap)
            }
            Metric::Planar { points } => {
                let dx = points[a][0] - points[b][0];
                let dy = points[a][1] - points[b][1];
                dx.hypot(dy)
            }
            Metric::Explicit { distances, n } => distances[a * n + b],
        }
    }

    /// Apply the permutation `perm` (new index → old index).
    fn permuted(&self, perm: &[usize]) -> Metric {
        match self {
            Metric::Ring { angles } => {
                Metric::Ring { angles: perm.iter().map(|&o| angles[o]).collect() }
            }
            Metric::Planar { points } => {
                Metric::Planar { points: perm.iter().map(|&o| points[o]).collect() }
            }
            Metric::Explicit { distances, n } => {
                let m = perm.len();
                let mut out = vec![0.0; m * m];
                for (a, &oa) in perm.iter().enumerate() {
                    for (b, &ob) in perm.iter().enumerate() {
                        out[a * m + b] = distances[oa * n + ob];
                    }
                }
                Metric::Explicit { distances: out, n: m }
            }
        }
    }
}

/// A ranked system of cities.
///
/// Cities are stored in rank order: index `u` is the city of rank `u + 1`,
/// sizes are non-increasing, and size ties are broken by ascending
/// identifier. Industry presence is stored as one bitset per industry over
/// the city indices, so choice-city sets come out in rank order for free.
#[derive(Debug, Clone)]
pub struct CitySystem {
    ids: Vec<usize>,
    sizes: Vec<f64>,
    industries: usize,
    /// One bitset per industry; bit `u` says the industry is present in the
    /// city of index `u`. `words_per_set` u64 words each.
    presence: Vec<u64>,
    words_per_set: usize,
    metric: Metric,
}

impl CitySystem {
    /// Build a system from parallel arrays in any order; cities are ranked
    /// internally. `presence[i][k]` says industry `i` is present in the city
    /// described by position `k` of the input arrays.
    pub fn from_parts(
        ids: Vec<usize>,
        sizes: Vec<f64>,
        metric: Metric,
        presence: Vec<Vec<bool>>,
    ) -> Result<CitySystem> {
        let n = ids.len();
        if n == 0 {
            return Err(Error::EmptySystem { threshold: 0.0 });
        }
        if sizes.len() != n || metric.len() != n {
            return Err(Error::dim(format!(
                "{n} ids against {} sizes and {} positions",
                sizes.len(),
                metric.len()
            )));
        }
        if let Some(bad) = sizes.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::param("sizes", format!("city sizes must be positive, got {bad}")));
        }
        for (i, row) in presence.iter().enumerate() {
            if row.len() != n {
                return Err(Error::dim(format!(
                    "presence row {i} has {} entries for {n} cities",
                    row.len()
                )));
            }
        }
        {
            let mut seen = ids.clone();
            seen.sort_unstable();
            if seen.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::param("ids", "city identifiers must be unique".to_string()));
            }
        }
        // rank: size descending, ties by ascending id
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| sizes[b].total_cmp(&sizes[a]).then(ids[a].cmp(&ids[b])));
        let industries = presence.len();
        let words_per_set = n.div_ceil(64);
        let mut bits = vec![0u64; industries * words_per_set];
        for (i, row) in presence.iter().enumerate() {
            for (u, &old) in order.iter().enumerate() {
                if row[old] {
                    bits[i * words_per_set + u / 64] |= 1u64 << (u % 64);
                }
            }
        }
        Ok(CitySystem {
            ids: order.iter().map(|&o| ids[o]).collect(),
            sizes: order.iter().map(|&o| sizes[o]).collect(),
            industries,
            presence: bits,
            words_per_set,
            metric: metric.permuted(&order),
        })
    }

    /// Number of cities `U`.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Identifier of the city at rank `u + 1` (a ring location index for
    /// simulated systems, the table id otherwise).
    pub fn id(&self, u: usize) -> usize {
        self.ids[u]
    }

    /// Size of the city at index `u` (sizes are non-increasing in `u`).
    pub fn size(&self, u: usize) -> f64 {
        self.sizes[u]
    }

    /// All sizes in rank order.
    pub fn sizes(&self) -> &[f64] {
        &self.sizes
    }

    /// City index for an identifier, if the identifier names a city.
    pub fn index_of_id(&self, id: usize) -> Option<usize> {
        self.ids.iter().position(|&x| x == id)
    }

    /// Distance between the cities at indices `a` and `b`.
    pub fn distance(&self, a: usize, b: usize) -> f64 {
        self.metric.distance(a, b)
    }

    /// Number of industries carried by the presence sets (zero for external
    /// tables, which have no industry information).
    pub fn industries(&self) -> usize {
        self.industries
    }

    /// Is industry `i` present in city `u`?
    pub fn present(&self, i: usize, u: usize) -> bool {
        let w = self.presence[i * self.words_per_set + u / 64];
        w >> (u % 64) & 1 == 1
    }

    /// Choice cities of industry `i` — the cities where it is present — in
    /// rank order.
    pub fn choice_cities(&self, i: usize) -> Vec<usize> {
        (0..self.len()).filter(|&u| self.present(i, u)).collect()
    }

    /// `|U_i|` without materializing the set.
    pub fn choice_count(&self, i: usize) -> usize {
        self.presence_words(i).iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Number of industries present in city `u`.
    pub fn industrial_diversity(&self, u: usize) -> usize {
        (0..self.industries).filter(|&i| self.present(i, u)).count()
    }

    /// The industry-`i` presence bitset over city indices.
    pub(crate) fn presence_words(&self, i: usize) -> &[u64] {
        &self.presence[i * self.words_per_set..(i + 1) * self.words_per_set]
    }

    /// Replace the metric with an explicit distance matrix (row-major,
    /// `U × U`). The matrix must be finite, nonnegative, zero on the
    /// diagonal, and symmetric.
    pub fn set_distance_matrix(&mut self, distances: Vec<f64>) -> Result<()> {
        let n = self.len();
        if distances.len() != n * n {
            return Err(Error::dim(format!(
                "distance matrix has {} entries, expected {n}×{n}",
                distances.len()
            )));
        }
        let scale = distances.iter().cloned().fold(0.0_f64, f64::max);
        for a in 0..n {
            if distances[a * n + a] != 0.0 {
                return Err(Error::param(
                    "distances",
                    format!("diagonal entry {a} is {}, expected 0", distances[a * n + a]),
                ));
            }
            for b in 0..n {
                let d = distances[a * n + b];
                if !d.is_finite() || d < 0.0 {
                    return Err(Error::param(
                        "distances",
                        format!("entry ({a},{b}) is {d}; distances must be finite and nonnegative"),
                    ));
                }
                let t = distances[b * n + a];
                if (d - t).abs() > 1e-9 * scale.max(1.0) {
                    return Err(Error::param(
                        "distances",
                        format!("matrix is not symmetric at ({a},{b}): {d} vs {t}"),
                    ));
                }
            }
        }
        self.metric = Metric::Explicit { distances, n };
        Ok(())
    }

    /// Parse an external city table.
    ///
    /// Delimited text with a header line of either `id,x,y,size` (planar
    /// coordinates, Euclidean distance) or `id,angle,size` (positions on the
    /// unit ring). Blank lines and `#` comments are skipped. `origin` names
    /// the input in error messages.
    pub fn from_table(text: &str, origin: &str) -> Result<CitySystem> {
        let mut rows = text
            .lines()
            .enumerate()
            .map(|(k, l)| (k + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (header_line, header) = rows
            .next()
            .ok_or_else(|| Error::parse(origin, 1, "empty city table"))?;
        let cols: Vec<String> = header
            .split(',')
            .map(|c| c.trim().to_ascii_lowercase())
            .collect();
        let planar = match cols.iter().map(String::as_str).collect::<Vec<_>>()[..] {
            ["id", "x", "y", "size"] => true,
            ["id", "angle", "size"] => false,
            _ => {
                return Err(Error::parse(
                    origin,
                    header_line,
                    format!("header must be `id,x,y,size` or `id,angle,size`, got `{header}`"),
                ))
            }
        };
        let mut ids = Vec::new();
        let mut sizes = Vec::new();
        let mut points = Vec::new();
        let mut angles = Vec::new();
        for (line, row) in rows {
            let fields: Vec<&str> = row.split(',').map(str::trim).collect();
            if fields.len() != cols.len() {
                return Err(Error::parse(
                    origin,
                    line,
                    format!("expected {} fields, got {}", cols.len(), fields.len()),
                ));
            }
            let num = |k: usize| -> Result<f64> {
                fields[k].parse::<f64>().map_err(|_| {
                    Error::parse(origin, line, format!("`{}` is not a number", fields[k]))
                })
            };
            let id = fields[0].parse::<usize>().map_err(|_| {
                Error::parse(origin, line, format!("`{}` is not a city id", fields[0]))
            })?;
            ids.push(id);
            if planar {
                points.push([num(1)?, num(2)?]);
                sizes.push(num(3)?);
            } else {
                angles.push(num(1)?);
                sizes.push(num(2)?);
            }
            if !(sizes[sizes.len() - 1] > 0.0) {
                return Err(Error::parse(
                    origin,
                    line,
                    format!("city size must be positive, got {}", fields[cols.len() - 1]),
                ));
            }
        }
        if ids.is_empty() {
            return Err(Error::parse(origin, header_line, "no city rows after the header"));
        }
        let metric =
            if planar { Metric::Planar { points } } else { Metric::Ring { angles } };
        CitySystem::from_parts(ids, sizes, metric, Vec::new())
            .map_err(|e| match e {
                Error::Param { message, .. } => Error::parse(origin, header_line, message),
                other => other,
            })
    }
}

/// Reduce an equilibrium to its cities.
///
/// A location is a city when its total mobile employment exceeds
/// `eps_city`; industry `i` counts as present there when its own employment
/// exceeds `eps_city / I`. Converged equilibria carry numerical dust of
/// order 1e-12 and below, so a small positive threshold (the CLI uses
/// `1e-8 · H`) separates genuine occupation from noise without touching any
/// real city.
pub fn extract_cities(
    h: &WorkerDistribution,
    geo: &RingGeography,
    eps_city: f64,
) -> Result<CitySystem> {
    if !eps_city.is_finite() || eps_city < 0.0 {
        return Err(Error::param("eps_city", format!("threshold must be ≥ 0, got {eps_city}")));
    }
    let (industries, rows) = (h.h.nrows(), h.h.ncols());
    if rows != geo.len() {
        return Err(Error::dim(format!(
            "distribution covers {rows} locations but the ring has {}",
            geo.len()
        )));
    }
    let mut ids = Vec::new();
    let mut sizes = Vec::new();
    let mut angles = Vec::new();
    let mut presence: Vec<Vec<bool>> = vec![Vec::new(); industries];
    let eps_ind = eps_city / industries as f64;
    for r in 0..rows {
        let total: f64 = (0..industries).map(|i| h.h[[i, r]]).sum();
        if total > eps_city {
            ids.push(r);
            sizes.push(total);
            angles.push(geo.angle(r).expect("r < rows"));
            for (i, row) in presence.iter_mut().enumerate() {
                row.push(h.h[[i, r]] > eps_ind);
            }
        }
    }
    if ids.is_empty() {
        return Err(Error::EmptySystem { threshold: eps_city });
    }
    CitySystem::from_parts(ids, sizes, Metric::Ring { angles }, presence)
}

/// One cell of a [`PartitionTree`]: a set of cities, the centers it was (or
/// would be) split around, and its children.
#[derive(Debug, Clone)]
pub struct PartitionCell {
    /// Member city indices in rank order (ascending index).
    pub(crate) members: Vec<usize>,
    /// The cell's `min(L, |members|)` largest cities.
    pub(crate) centers: Vec<usize>,
    pub(crate) depth: usize,
    /// Child cells, one per center and in center order; empty for leaves.
    pub(crate) children: Vec<PartitionCell>,
}

impl PartitionCell {
    /// Member city indices in rank order.
    pub fn members(&self) -> &[usize] {
        &self.members
    }

    /// The centers the cell splits around (its largest cities).
    pub fn centers(&self) -> &[usize] {
        &self.centers
    }

    /// Depth below the root (the root is 0).
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn children(&self) -> &[PartitionCell] {
        &self.children
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// The recursive largest-city Voronoi partition of a [`CitySystem`].
#[derive(Debug, Clone)]
pub struct PartitionTree {
    root: PartitionCell,
    branching: usize,
    max_depth: usize,
}

impl PartitionTree {
    pub fn root(&self) -> &PartitionCell {
        &self.root
    }

    /// The branching factor `L` the tree was built with.
    pub fn branching(&self) -> usize {
        self.branching
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    /// Every cell in breadth-first order (root first, then depth 1 cells in
    /// sibling order, and so on). Deterministic, so cell numbering is stable
    /// across runs.
    pub fn cells(&self) -> Vec<&PartitionCell> {
        let mut out = Vec::new();
        let mut queue = std::collections::VecDeque::from([&self.root]);
        while let Some(cell) = queue.pop_front() {
            out.push(cell);
            queue.extend(cell.children.iter());
        }
        out
    }

    /// The hinterland of the city at index `u`: the shallowest cell that has
    /// it as a center, or the singleton `{u}` if it is a center nowhere.
    pub fn hinterland_of_index(&self, u: usize) -> Vec<usize> {
        for cell in self.cells() {
            if !cell.is_leaf() && cell.centers.contains(&u) {
                return cell.members.clone();
            }
        }
        vec![u]
    }
}

/// The hinterland of a city named by identifier: the shallowest (largest)
/// cell of the partition for which it is a center. The overall largest city
/// gets the root cell; a city that is never a center gets its own singleton.
/// Returns member city indices in rank order.
pub fn hinterland(tree: &PartitionTree, sys: &CitySystem, id: usize) -> Result<Vec<usize>> {
    let u = sys
        .index_of_id(id)
        .ok_or_else(|| Error::param("city", format!("no city has identifier {id}")))?;
    Ok(tree.hinterland_of_index(u))
}

/// Build the recursive largest-city Voronoi partition.
///
/// Each cell takes its `L` largest cities as centers and assigns every
/// member to the nearest center, distance ties going to the larger center.
/// The root always splits (when there are at least two cities); a child
/// splits again only while it holds more than `L` cities and its depth is
/// below `max_depth`.
pub fn l_partition(sys: &CitySystem, branching: usize, max_depth: usize) -> Result<PartitionTree> {
    if branching < 2 {
        return Err(Error::param("branching", format!("need at least 2 centers, got {branching}")));
    }
    let members: Vec<usize> = (0..sys.len()).collect();
    let root = build_cell(sys, members, 0, branching, max_depth);
    Ok(PartitionTree { root, branching, max_depth })
}

fn build_cell(
    sys: &CitySystem,
    members: Vec<usize>,
    depth: usize,
    branching: usize,
    max_depth: usize,
) -> PartitionCell {
    // members arrive sorted ascending, so the first entries are the largest
    let centers: Vec<usize> = members.iter().take(branching).copied().collect();
    let splits = members.len() >= 2
        && depth < max_depth
        && (depth == 0 || members.len() > branching);
    let children = if splits {
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); centers.len()];
        for &u in &members {
            groups[nearest_center(sys, u, &centers)].push(u);
        }
        groups
            .into_iter()
            .map(|g| build_cell(sys, g, depth + 1, branching, max_depth))
            .collect()
    } else {
        Vec::new()
    };
    PartitionCell { members, centers, depth, children }
}

/// Index into `centers` of the center nearest to `u`; ties break toward the
/// earlier (larger) center because only a strictly smaller distance replaces
/// the incumbent.
fn nearest_center(sys: &CitySystem, u: usize, centers: &[usize]) -> usize {
    let mut best = 0;
    let mut best_d = sys.distance(u, centers[0]);
    for (k, &c) in centers.iter().enumerate().skip(1) {
        let d = sys.distance(u, c);
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::economy::ModelParams;
    use approx::assert_relative_eq;
    use ndarray::Array2;
    use std::f64::consts::PI;

    fn ring_system(angles: &[f64], sizes: &[f64]) -> CitySystem {
        CitySystem::from_parts(
            (0..angles.len()).collect(),
            sizes.to_vec(),
            Metric::Ring { angles: angles.to_vec() },
            Vec::new(),
        )
        .unwrap()
    }

    #[test]
    fn uniform_distribution_makes_every_location_an_equal_city() {
        let p = ModelParams::new(6, 2, 600.0, 0.0, 0.5, 1.0, vec![2.0, 3.0]).unwrap();
        let h = WorkerDistribution::uniform(&p);
        let geo = p.geography();
        let sys = extract_cities(&h, &geo, 1e-8 * 600.0).unwrap();
        assert_eq!(sys.len(), 6);
        for u in 0..6 {
            assert_relative_eq!(sys.size(u), 100.0, max_relative = 1e-12);
            assert_eq!(sys.industrial_diversity(u), 2);
        }
        // size ties rank by ascending location id
        let ids: Vec<usize> = (0..6).map(|u| sys.id(u)).collect();
        assert_eq!(ids, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn two_occupied_sites_make_two_cities() {
        let p = ModelParams::new(8, 1, 100.0, 0.0, 0.5, 1.0, vec![2.0]).unwrap();
        let mut raw = Array2::zeros((1, 8));
        raw[[0, 3]] = 60.0;
        raw[[0, 7]] = 40.0;
        let h = WorkerDistribution::from_array(&p, raw).unwrap();
        let geo = p.geography();
        let sys = extract_cities(&h, &geo, 1e-6).unwrap();
        assert_eq!(sys.len(), 2);
        assert_eq!((sys.id(0), sys.id(1)), (3, 7));
        assert_eq!(sys.choice_cities(0), vec![0, 1]);
    }

    #[test]
    fn dust_stays_below_the_city_threshold() {
        let p = ModelParams::new(4, 2, 100.0, 0.0, 0.5, 1.0, vec![2.0, 3.0]).unwrap();
        let mut raw = Array2::zeros((2, 4));
        raw[[0, 0]] = 60.0;
        raw[[1, 0]] = 40.0 - 3e-12;
        raw[[0, 2]] = 2e-12; // numerical dust
        raw[[1, 2]] = 1e-12;
        let h = WorkerDistribution::from_array(&p, raw).unwrap();
        let geo = p.geography();
        let sys = extract_cities(&h, &geo, 1e-8 * 100.0).unwrap();
        assert_eq!(sys.len(), 1);
        assert_eq!(sys.id(0), 0);
        // and with a zero threshold the dust site appears
        let sys0 = extract_cities(&h, &geo, 0.0).unwrap();
        assert_eq!(sys0.len(), 2);
    }

    #[test]
    fn empty_distribution_region_is_an_error() {
        let p = ModelParams::new(4, 1, 100.0, 0.0, 0.5, 1.0, vec![2.0]).unwrap();
        let h = WorkerDistribution::uniform(&p);
        let geo = p.geography();
        let err = extract_cities(&h, &geo, 1e9).unwrap_err();
        assert!(matches!(err, Error::EmptySystem { .. }));
    }

    #[test]
    fn presence_uses_the_per_industry_threshold() {
        let p = ModelParams::new(4, 2, 100.0, 0.0, 0.5, 1.0, vec![2.0, 3.0]).unwrap();
        let mut raw = Array2::zeros((2, 4));
        raw[[0, 1]] = 99.0;
        raw[[1, 1]] = 0.4; // above eps/I = 0.5? no: below
        raw[[0, 3]] = 0.6;
        let h = WorkerDistribution::from_array(&p, raw).unwrap();
        let geo = p.geography();
        let sys = extract_cities(&h, &geo, 1.0).unwrap();
        // site 1 (size 99.4) and site 3 is below the city threshold
        assert_eq!(sys.len(), 1);
        assert!(sys.present(0, 0));
        assert!(!sys.present(1, 0)); // 0.4 < 1.0/2
        assert_eq!(sys.industrial_diversity(0), 1);
    }

    #[test]
    fn diversity_and_choice_sets_double_count_identically() {
        let presence = vec![
            vec![true, true, false, true],
            vec![false, true, true, false],
            vec![true, false, false, false],
        ];
        let sys = CitySystem::from_parts(
            vec![10, 20, 30, 40],
            vec![9.0, 7.0, 5.0, 3.0],
            Metric::Ring { angles: vec![0.0, 1.0, 2.0, 3.0] },
            presence,
        )
        .unwrap();
        let by_city: usize = (0..4).map(|u| sys.industrial_diversity(u)).sum();
        let by_industry: usize = (0..3).map(|i| sys.choice_cities(i).len()).sum();
        assert_eq!(by_city, by_industry);
        assert_eq!(sys.choice_count(1), 2);
    }

    #[test]
    fn four_city_partition_matches_the_hand_computation() {
        // sizes (10, 8, 5, 3) at angles (0, π, π/2, 3π/2); L = 2: centers are
        // the two largest; both smaller cities are equidistant and the tie
        // goes to the rank-1 center
        let sys = ring_system(&[0.0, PI, PI / 2.0, 1.5 * PI], &[10.0, 8.0, 5.0, 3.0]);
        let tree = l_partition(&sys, 2, 6).unwrap();
        let root = tree.root();
        assert_eq!(root.centers(), &[0, 1]);
        assert_eq!(root.children().len(), 2);
        assert_eq!(root.children()[0].members(), &[0, 2, 3]);
        assert_eq!(root.children()[1].members(), &[1]);
    }

    #[test]
    fn small_system_splits_into_singletons_and_stops() {
        let sys = ring_system(&[0.0, 2.0, 4.0], &[5.0, 4.0, 3.0]);
        let tree = l_partition(&sys, 3, 6).unwrap();
        let root = tree.root();
        assert_eq!(root.children().len(), 3);
        for child in root.children() {
            assert_eq!(child.members().len(), 1);
            assert!(child.is_leaf());
        }
    }

    #[test]
    fn branching_below_two_is_rejected() {
        let sys = ring_system(&[0.0, 1.0], &[2.0, 1.0]);
        assert!(l_partition(&sys, 1, 6).is_err());
    }

    #[test]
    fn partitions_are_well_formed_on_many_systems() {
        for salt in 0..24 {
            let n = 2 + (salt * 37 + 11) % 199;
            let angles: Vec<f64> = (0..n)
                .map(|k| 2.0 * PI * ((k * 73 + salt * 29) % 360) as f64 / 360.0 + k as f64 * 1e-7)
                .collect();
            let sizes: Vec<f64> =
                (0..n).map(|k| 1.0 + ((k * 7919 + salt * 131) % 997) as f64).collect();
            let sys = ring_system(&angles, &sizes);
            let branching = 2 + salt % 4;
            let tree = l_partition(&sys, branching, 6).unwrap();
            for cell in tree.cells() {
                // sizes rank-ordered within the cell
                assert!(cell.members().windows(2).all(|w| w[0] < w[1]));
                if cell.is_leaf() {
                    continue;
                }
                // children partition the parent's members…
                let mut gathered: Vec<usize> =
                    cell.children().iter().flat_map(|c| c.members().iter().copied()).collect();
                gathered.sort_unstable();
                assert_eq!(gathered, cell.members());
                // …each center sits in its own child…
                for (k, child) in cell.children().iter().enumerate() {
                    assert!(child.members().contains(&cell.centers()[k]));
                }
                // …and every member is with its nearest center (brute force)
                for (k, child) in cell.children().iter().enumerate() {
                    for &u in child.members() {
                        let d_here = sys.distance(u, cell.centers()[k]);
                        for (k2, &c2) in cell.centers().iter().enumerate() {
                            let d2 = sys.distance(u, c2);
                            assert!(
                                d_here < d2 || (d_here == d2 && k <= k2),
                                "city {u} in cell of center {k} but center {k2} is nearer"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn hinterlands_follow_the_shallowest_center_rule() {
        // 12 cities around the ring with strongly decreasing sizes so the
        // tree recurses at least twice
        let n = 12;
        let angles: Vec<f64> = (0..n).map(|k| 2.0 * PI * k as f64 / n as f64).collect();
        let sizes: Vec<f64> = (0..n).map(|k| 1000.0 / (k + 1) as f64).collect();
        let sys = ring_system(&angles, &sizes);
        let tree = l_partition(&sys, 2, 6).unwrap();
        // the overall largest city owns the root
        assert_eq!(hinterland(&tree, &sys, 0).unwrap(), tree.root().members().to_vec());
        // a deeper center owns the shallowest cell it centers
        let deeper = tree.root().children()[0].children().first();
        if let Some(cell) = deeper {
            let c = cell.centers()[0];
            if c != tree.root().centers()[0] && !tree.root().centers().contains(&c) {
                assert_eq!(tree.hinterland_of_index(c), cell.members().to_vec());
            }
        }
        // a never-center city maps to its own singleton
        let never_center: Vec<usize> = (0..n)
            .filter(|&u| {
                tree.cells().iter().all(|cell| cell.is_leaf() || !cell.centers().contains(&u))
            })
            .collect();
        if let Some(&u) = never_center.first() {
            assert_eq!(tree.hinterland_of_index(u), vec![u]);
        }
        // unknown id errors
        assert!(hinterland(&tree, &sys, 999).is_err());
    }

    #[test]
    fn rotation_produces_an_isomorphic_system() {
        let p = ModelParams::new(8, 2, 700.0, 0.0, 0.5, 1.0, vec![2.0, 3.0]).unwrap();
        let mut raw = Array2::zeros((2, 8));
        for (r, v) in [(0usize, 300.0), (2, 250.0), (5, 150.0)] {
            raw[[0, r]] = v * 0.6;
            raw[[1, r]] = v * 0.4;
        }
        let h = WorkerDistribution::from_array(&p, raw.clone()).unwrap();
        let shift = 3;
        let mut rot = Array2::zeros((2, 8));
        for i in 0..2 {
            for r in 0..8 {
                rot[[i, (r + shift) % 8]] = raw[[i, r]];
            }
        }
        let h_rot = WorkerDistribution::from_array(&p, rot).unwrap();
        let geo = p.geography();
        let a = extract_cities(&h, &geo, 1e-6).unwrap();
        let b = extract_cities(&h_rot, &geo, 1e-6).unwrap();
        assert_eq!(a.len(), b.len());
        for u in 0..a.len() {
            assert_eq!((a.id(u) + shift) % 8, b.id(u));
            assert_relative_eq!(a.size(u), b.size(u), max_relative = 1e-12);
            for v in 0..a.len() {
                assert_relative_eq!(a.distance(u, v), b.distance(u, v), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn planar_table_round_trips() {
        let text = "id,x,y,size\n1, 0.0, 0.0, 50\n2, 3.0, 4.0, 70\n# comment\n3, 0.0, 1.0, 70\n";
        let sys = CitySystem::from_table(text, "cities.csv").unwrap();
        assert_eq!(sys.len(), 3);
        // ties (70, 70) break by ascending id
        assert_eq!((sys.id(0), sys.id(1), sys.id(2)), (2, 3, 1));
        assert_relative_eq!(sys.distance(0, 2), 5.0, max_relative = 1e-12);
        assert_eq!(sys.industries(), 0);
    }

    #[test]
    fn ring_table_and_distance_override() {
        let text = "id,angle,size\n0, 0.0, 9\n1, 3.141592653589793, 5\n2, 1.5707963267948966, 3\n";
        let mut sys = CitySystem::from_table(text, "ring.csv").unwrap();
        assert_relative_eq!(sys.distance(0, 1), PI, max_relative = 1e-12);
        sys.set_distance_matrix(vec![0.0, 1.0, 2.0, 1.0, 0.0, 3.0, 2.0, 3.0, 0.0]).unwrap();
        assert_eq!(sys.distance(1, 2), 3.0);
        // asymmetric and misshapen matrices are rejected
        let mut sys2 = CitySystem::from_table(text, "ring.csv").unwrap();
        assert!(sys2
            .set_distance_matrix(vec![0.0, 1.0, 2.0, 9.0, 0.0, 3.0, 2.0, 3.0, 0.0])
            .is_err());
        assert!(sys2.set_distance_matrix(vec![0.0; 4]).is_err());
    }

    #[test]
    fn table_errors_carry_line_numbers() {
        let bad_header = CitySystem::from_table("id,size\n1,2\n", "t.csv").unwrap_err();
        assert!(bad_header.to_string().contains("t.csv:1"));
        let bad_size = CitySystem::from_table("id,angle,size\n7, 0.5, -3\n", "t.csv").unwrap_err();
        assert!(bad_size.to_string().contains("t.csv:2"));
        let bad_num = CitySystem::from_table("id,angle,size\n7, x, 3\n", "t.csv").unwrap_err();
        assert!(bad_num.to_string().contains("not a number"));
        let dup = CitySystem::from_table("id,angle,size\n7,0.1,3\n7,0.2,4\n", "t.csv").unwrap_err();
        assert!(dup.to_string().contains("unique"));
    }
}
