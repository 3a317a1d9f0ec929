//! Spatio-temporal benchmark generator.
//!
//! Responses follow a linear mixed model
//!
//! ```text
//! Y_t = β₀ + β₁·X_t + Z + ε₀,        t = 1..T
//! X_t = Σ_{i=0..p} φ_i · X̃_{t−i},   X̃_t iid N(0, Σ_X)
//! ```
//!
//! with a time-constant spatial random effect `Z ~ N(0, Σ_Z)` and fresh
//! noise `ε₀ ~ N(0, σ₀²·I)` at every tick. `Σ_X` always uses the Euclidean
//! kernel; `Σ_Z` uses either the Euclidean kernel or the tail-up river
//! kernel, which only correlates flow-connected sites.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_jittered, Matrix};
use crate::rng::{self, stream, Rng};
use crate::series::{default_sensor_ids, MultivariateSeries};

pub type Point = [f64; 2];

/// Planar sensor locations.
#[derive(Debug, Clone, PartialEq)]
pub struct Locations {
    pub coords: Vec<Point>,
    pub ids: Vec<String>,
}

impl Locations {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// `n` points uniform on the unit square.
pub fn sample_locations(n: usize, seed: u64) -> Result<Locations> {
    if n < 2 {
        return Err(Error::param("n_sensors", format!("need at least 2, got {n}")));
    }
    let mut rng = rng::stream_rng(seed, stream::LOCATIONS);
    let coords = (0..n)
        .map(|_| [rng.random::<f64>(), rng.random::<f64>()])
        .collect();
    Ok(Locations {
        coords,
        ids: default_sensor_ids(n),
    })
}

/// Covariance scale `σ²`, range `α` and nugget variance `σ₀²`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KernelParams {
    pub sigma2: f64,
    pub range_alpha: f64,
    pub nugget_sigma02: f64,
}

impl KernelParams {
    pub fn new(sigma2: f64, range_alpha: f64, nugget_sigma02: f64) -> Result<Self> {
        let p = Self {
            sigma2,
            range_alpha,
            nugget_sigma02,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(Error::param("sigma2", format!("must be > 0, got {}", self.sigma2)));
        }
        if !(self.range_alpha > 0.0 && self.range_alpha.is_finite()) {
            return Err(Error::param(
                "range_alpha",
                format!("must be > 0, got {}", self.range_alpha),
            ));
        }
        if !(self.nugget_sigma02 >= 0.0 && self.nugget_sigma02.is_finite()) {
            return Err(Error::param(
                "nugget_sigma02",
                format!("must be >= 0, got {}", self.nugget_sigma02),
            ));
        }
        Ok(())
    }
}

/// Squared-exponential kernel `σ²·exp(−‖s − s′‖²/α)`.
pub fn euclidean_kernel(s: &Point, s2: &Point, params: &KernelParams) -> f64 {
    let dx = s[0] - s2[0];
    let dy = s[1] - s2[1];
    params.sigma2 * libm::exp(-(dx * dx + dy * dy) / params.range_alpha)
}

/// A position on a river network: `offset` length units upstream of the
/// downstream end of `segment`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Placement {
    pub segment: usize,
    pub offset: f64,
}

/// One stream reach. `parent` is the next segment downstream (`None` for
/// the outlet).
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub parent: Option<usize>,
    pub length: f64,
    pub shreve_order: u32,
    /// Additive weight Ω used by the tail-up kernel (the Shreve order).
    pub additive_weight: f64,
    /// Planar position of the downstream end, for plotting.
    pub downstream_xy: Point,
    /// Planar position of the upstream end, for plotting.
    pub upstream_xy: Point,
}

/// Rooted in-tree of stream segments draining to a single outlet, with
/// sensors placed along it.
#[derive(Debug, Clone, PartialEq)]
pub struct RiverNetwork {
    segments: Vec<Segment>,
    outlet: usize,
    placements: Vec<Placement>,
    /// Distance from each segment's downstream end to the river mouth.
    base_distance: Vec<f64>,
}

impl RiverNetwork {
    /// Builds a network from `(parent, length)` pairs indexed by segment id,
    /// computing Shreve orders, additive weights and a planar embedding.
    pub fn from_edges(edges: &[(Option<usize>, f64)], placements: Vec<Placement>) -> Result<Self> {
        let n = edges.len();
        if n == 0 {
            return Err(Error::param("segments", "network has no segments"));
        }
        let mut outlet = None;
        for (id, &(parent, length)) in edges.iter().enumerate() {
            if !(length > 0.0 && length.is_finite()) {
                return Err(Error::param(
                    "length",
                    format!("segment {id} has non-positive length {length}"),
                ));
            }
            match parent {
                None if outlet.is_some() => {
                    return Err(Error::param("parent_id", "more than one outlet segment"))
                }
                None => outlet = Some(id),
                Some(p) if p >= n => return Err(Error::UnknownSegment(p)),
                Some(p) if p == id => {
                    return Err(Error::param("parent_id", format!("segment {id} drains to itself")))
                }
                Some(_) => {}
            }
        }
        let outlet = outlet.ok_or_else(|| Error::param("parent_id", "no outlet segment"))?;

        // every segment must reach the outlet without revisiting a segment
        for start in 0..n {
            let mut cur = start;
            let mut steps = 0;
            while let Some(p) = edges[cur].0 {
                cur = p;
                steps += 1;
                if steps > n {
                    return Err(Error::param("parent_id", "segment graph contains a cycle"));
                }
            }
        }

        let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (id, &(parent, _)) in edges.iter().enumerate() {
            if let Some(p) = parent {
                children[p].push(id);
            }
        }

        // parents before children
        let mut order = Vec::with_capacity(n);
        order.push(outlet);
        let mut head = 0;
        while head < order.len() {
            let s = order[head];
            head += 1;
            order.extend_from_slice(&children[s]);
        }

        let mut base_distance = vec![0.0; n];
        for &s in &order {
            if let Some(p) = edges[s].0 {
                base_distance[s] = base_distance[p] + edges[p].1;
            }
        }

        let mut shreve = vec![0u32; n];
        for &s in order.iter().rev() {
            shreve[s] = if children[s].is_empty() {
                1
            } else {
                children[s].iter().map(|&c| shreve[c]).sum()
            };
        }

        // leaves get consecutive x slots, junctions sit over their children
        let mut x = vec![0.0; n];
        let mut next_slot = 0.0;
        assign_x(outlet, &children, &mut x, &mut next_slot);
        let x_span = (next_slot - 1.0_f64).max(1.0);
        let y_span = (0..n)
            .map(|s| base_distance[s] + edges[s].1)
            .fold(0.0, f64::max);

        let segments = (0..n)
            .map(|s| {
                let up = [x[s] / x_span, (base_distance[s] + edges[s].1) / y_span];
                let down = match edges[s].0 {
                    Some(p) => [x[p] / x_span, (base_distance[p] + edges[p].1) / y_span],
                    None => [x[s] / x_span, 0.0],
                };
                Segment {
                    parent: edges[s].0,
                    length: edges[s].1,
                    shreve_order: shreve[s],
                    additive_weight: f64::from(shreve[s]),
                    downstream_xy: down,
                    upstream_xy: up,
                }
            })
            .collect();

        let net = Self {
            segments,
            outlet,
            placements: Vec::new(),
            base_distance,
        };
        for p in &placements {
            net.check_placement(p)?;
        }
        Ok(Self { placements, ..net })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn outlet(&self) -> usize {
        self.outlet
    }

    pub fn placements(&self) -> &[Placement] {
        &self.placements
    }

    pub fn n_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn children(&self, segment: usize) -> Vec<usize> {
        (0..self.segments.len())
            .filter(|&c| self.segments[c].parent == Some(segment))
            .collect()
    }

    fn check_placement(&self, p: &Placement) -> Result<()> {
        let seg = self
            .segments
            .get(p.segment)
            .ok_or(Error::UnknownSegment(p.segment))?;
        if !(0.0..=seg.length).contains(&p.offset) {
            return Err(Error::param(
                "offset",
                format!(
                    "offset {} outside segment {} of length {}",
                    p.offset, p.segment, seg.length
                ),
            ));
        }
        Ok(())
    }

    /// Segment ids from `segment` down to the outlet, inclusive.
    fn downstream_path(&self, segment: usize) -> Vec<usize> {
        let mut path = vec![segment];
        let mut cur = segment;
        while let Some(p) = self.segments[cur].parent {
            path.push(p);
            cur = p;
        }
        path
    }

    /// Distance travelled along the network from `p` to the river mouth.
    fn distance_to_mouth(&self, p: &Placement) -> f64 {
        self.base_distance[p.segment] + p.offset
    }

    /// Planar coordinates of a placement on the plotting embedding.
    pub fn planar_position(&self, p: &Placement) -> Result<Point> {
        self.check_placement(p)?;
        let seg = &self.segments[p.segment];
        let f = p.offset / seg.length;
        Ok([
            seg.downstream_xy[0] + f * (seg.upstream_xy[0] - seg.downstream_xy[0]),
            seg.downstream_xy[1] + f * (seg.upstream_xy[1] - seg.downstream_xy[1]),
        ])
    }

    /// Planar coordinates of all sensors.
    pub fn sensor_coords(&self) -> Vec<Point> {
        self.placements
            .iter()
            .map(|p| self.planar_position(p).expect("placements validated"))
            .collect()
    }
}

fn assign_x(s: usize, children: &[Vec<usize>], x: &mut [f64], next_slot: &mut f64) {
    if children[s].is_empty() {
        x[s] = *next_slot;
        *next_slot += 1.0;
    } else {
        for &c in &children[s] {
            assign_x(c, children, x, next_slot);
        }
        x[s] = children[s].iter().map(|&c| x[c]).sum::<f64>() / children[s].len() as f64;
    }
}

/// Random binary in-tree: starting from the outlet, every segment above
/// `depth` splits into two upstream tributaries with probability
/// `branch_prob`. Lengths are uniform on `[0.5, 1.5]`; sensors are placed
/// uniformly along the total stream length.
pub fn build_river_network(
    n_sensors: usize,
    branch_prob: f64,
    depth: usize,
    seed: u64,
) -> Result<RiverNetwork> {
    if depth < 1 {
        return Err(Error::param("depth", "must be at least 1"));
    }
    if !(0.0..=1.0).contains(&branch_prob) {
        return Err(Error::param("branch_prob", format!("{branch_prob} not in [0, 1]")));
    }
    let mut rng = rng::stream_rng(seed, stream::NETWORK);
    let mut edges: Vec<(Option<usize>, f64)> = vec![(None, rng.random_range(0.5..=1.5))];
    let mut level = vec![1usize];
    let mut head = 0;
    while head < edges.len() {
        let s = head;
        head += 1;
        if level[s] < depth && rng.random::<f64>() < branch_prob {
            for _ in 0..2 {
                edges.push((Some(s), rng.random_range(0.5..=1.5)));
                level.push(level[s] + 1);
            }
        }
    }

    let total: f64 = edges.iter().map(|e| e.1).sum();
    let placements = (0..n_sensors)
        .map(|_| {
            let mut u = rng.random::<f64>() * total;
            let mut seg = edges.len() - 1;
            for (id, e) in edges.iter().enumerate() {
                if u < e.1 {
                    seg = id;
                    break;
                }
                u -= e.1;
            }
            Placement {
                segment: seg,
                offset: u.clamp(0.0, edges[seg].1),
            }
        })
        .collect();
    RiverNetwork::from_edges(&edges, placements)
}

/// Length of the tree path between two placements.
pub fn stream_distance(net: &RiverNetwork, a: &Placement, b: &Placement) -> Result<f64> {
    net.check_placement(a)?;
    net.check_placement(b)?;
    if a.segment == b.segment {
        return Ok(libm::fabs(a.offset - b.offset));
    }
    let path_a = net.downstream_path(a.segment);
    let path_b = net.downstream_path(b.segment);
    let da = net.distance_to_mouth(a);
    let db = net.distance_to_mouth(b);
    if path_a.contains(&b.segment) || path_b.contains(&a.segment) {
        return Ok(libm::fabs(da - db));
    }
    // first segment both drain into; the paths meet at its upstream end
    let meet = path_a
        .iter()
        .copied()
        .find(|s| path_b.contains(s))
        .expect("tree has a single outlet");
    let junction = net.base_distance[meet] + net.segments[meet].length;
    Ok(da + db - 2.0 * junction)
}

/// Whether one point lies on the other's downstream path to the outlet.
pub fn flow_connected(net: &RiverNetwork, a: &Placement, b: &Placement) -> Result<bool> {
    net.check_placement(a)?;
    net.check_placement(b)?;
    Ok(a.segment == b.segment
        || net.downstream_path(a.segment).contains(&b.segment)
        || net.downstream_path(b.segment).contains(&a.segment))
}

/// Branching weight `ω = sqrt(Ω_up/Ω_down)` for a flow-connected pair.
pub fn tailup_weight(net: &RiverNetwork, a: &Placement, b: &Placement) -> Result<f64> {
    let da = net.distance_to_mouth(a);
    let db = net.distance_to_mouth(b);
    let (up, down) = if da >= db { (a, b) } else { (b, a) };
    let w_up = net.segments[up.segment].additive_weight;
    let w_down = net.segments[down.segment].additive_weight;
    Ok(libm::sqrt(w_up / w_down))
}

/// Tail-up kernel `ω·σ²·exp(−h/α)` for flow-connected pairs, 0 otherwise.
pub fn tailup_kernel(
    net: &RiverNetwork,
    a: &Placement,
    b: &Placement,
    params: &KernelParams,
) -> Result<f64> {
    if !flow_connected(net, a, b)? {
        return Ok(0.0);
    }
    let h = stream_distance(net, a, b)?;
    let omega = tailup_weight(net, a, b)?;
    Ok(omega * params.sigma2 * libm::exp(-h / params.range_alpha))
}

/// Element-wise kernel evaluation over all pairs of points.
pub fn covariance_matrix<P>(points: &[P], kernel: impl Fn(&P, &P) -> Result<f64>) -> Result<Matrix> {
    let n = points.len();
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let k = kernel(&points[i], &points[j])?;
            m[(i, j)] = k;
            m[(j, i)] = k;
        }
    }
    Ok(m)
}

/// Euclidean-kernel covariance over planar points.
pub fn euclidean_covariance(coords: &[Point], params: &KernelParams) -> Result<Matrix> {
    params.validate()?;
    covariance_matrix(coords, |a, b| Ok(euclidean_kernel(a, b, params)))
}

/// Tail-up covariance over the network's sensor placements.
pub fn tailup_covariance(net: &RiverNetwork, params: &KernelParams) -> Result<Matrix> {
    params.validate()?;
    covariance_matrix(net.placements(), |a, b| tailup_kernel(net, a, b, params))
}

/// `φ_i ∝ 0.5^i`, `i = 0..=p`, scaled so `Σ φ_i² = 1`.
pub fn default_ma_weights(p: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..=p).map(|i| libm::pow(0.5, i as f64)).collect();
    let norm = libm::sqrt(raw.iter().map(|w| w * w).sum::<f64>());
    raw.into_iter().map(|w| w / norm).collect()
}

fn standard_normals(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Draws one `N(0, L Lᵀ)` vector.
fn correlated_normal(lower: &Matrix, rng: &mut Rng) -> Vec<f64> {
    let z = standard_normals(rng, lower.rows());
    lower.mul_vec(&z).expect("square factor")
}

/// `T × n` moving-average field series `X_t = Σ φ_i X̃_{t−i}` with iid
/// `X̃ ~ N(0, cov)`. The first `p` innovations are burn-in so every output
/// tick uses the full weight vector. `scale` sets the jitter magnitude.
pub fn sample_field_series(
    cov: &Matrix,
    scale: f64,
    n_ticks: usize,
    ma_weights: &[f64],
    rng: &mut Rng,
) -> Result<Matrix> {
    check_ma_weights(ma_weights)?;
    let p = ma_weights.len() - 1;
    if n_ticks <= p {
        return Err(Error::param(
            "n_ticks",
            format!("need more than {p} ticks for moving-average order {p}"),
        ));
    }
    let (lower, _) = cholesky_jittered(cov, scale)?;
    let n = cov.rows();
    let innovations: Vec<Vec<f64>> = (0..n_ticks + p)
        .map(|_| correlated_normal(&lower, rng))
        .collect();
    let mut out = Matrix::zeros(n_ticks, n);
    for t in 0..n_ticks {
        let row = out.row_mut(t);
        for (i, phi) in ma_weights.iter().enumerate() {
            for (o, x) in row.iter_mut().zip(&innovations[t + p - i]) {
                *o += phi * x;
            }
        }
    }
    Ok(out)
}

fn check_ma_weights(ma_weights: &[f64]) -> Result<()> {
    if ma_weights.is_empty() || ma_weights.iter().all(|&w| w == 0.0) {
        return Err(Error::param("ma_weights", "need at least one nonzero weight"));
    }
    if ma_weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::param("ma_weights", "weights must be finite"));
    }
    Ok(())
}

/// Which kernel builds the random-effect covariance `Σ_Z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum KernelKind {
    Euclidean,
    Tailup,
}

/// Linear mixed model configuration (one covariate).
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n_sensors: usize,
    pub n_ticks: usize,
    pub beta0: f64,
    pub beta1: f64,
    pub ma_weights: Vec<f64>,
    pub covariate_kernel: KernelParams,
    /// `Σ_Z` kernel parameters; its nugget is the noise variance `σ₀²`.
    /// `None` removes both `Z` and `ε₀`.
    pub random_effect: Option<KernelParams>,
    pub kernel_kind: KernelKind,
    pub branch_prob: f64,
    pub depth: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_sensors: 40,
            n_ticks: 4000,
            beta0: 5.0,
            beta1: 1.0,
            ma_weights: default_ma_weights(3),
            covariate_kernel: KernelParams {
                sigma2: 1.0,
                range_alpha: 10.0,
                nugget_sigma02: 0.0,
            },
            random_effect: Some(KernelParams {
                sigma2: 1.0,
                range_alpha: 10.0,
                nugget_sigma02: 0.1,
            }),
            kernel_kind: KernelKind::Euclidean,
            branch_prob: 0.8,
            depth: 5,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sensors < 2 {
            return Err(Error::param("n_sensors", "need at least 2 sensors"));
        }
        check_ma_weights(&self.ma_weights)?;
        if self.n_ticks < self.ma_weights.len() {
            return Err(Error::param(
                "n_ticks",
                "must exceed the moving-average order",
            ));
        }
        if !self.beta0.is_finite() || !self.beta1.is_finite() {
            return Err(Error::param("beta", "regression parameters must be finite"));
        }
        self.covariate_kernel.validate()?;
        if let Some(re) = &self.random_effect {
            re.validate()?;
        }
        Ok(())
    }
}

/// Sensor positions: planar coordinates always, plus a river network when
/// the tail-up kernel needs one.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialLayout {
    pub locations: Locations,
    pub network: Option<RiverNetwork>,
}

impl SpatialLayout {
    /// River network whose sensors are also embedded in the plane, so the
    /// same layout serves both kernel kinds.
    pub fn river(n_sensors: usize, branch_prob: f64, depth: usize, seed: u64) -> Result<Self> {
        let net = build_river_network(n_sensors, branch_prob, depth, seed)?;
        Ok(Self {
            locations: Locations {
                coords: net.sensor_coords(),
                ids: default_sensor_ids(n_sensors),
            },
            network: Some(net),
        })
    }

    pub fn planar(n_sensors: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            locations: sample_locations(n_sensors, seed)?,
            network: None,
        })
    }

    /// Unit-square points for the Euclidean kind, a river network for the
    /// tail-up kind.
    pub fn for_config(config: &SimConfig) -> Result<Self> {
        match config.kernel_kind {
            KernelKind::Euclidean => Self::planar(config.n_sensors, config.seed),
            KernelKind::Tailup => {
                Self::river(config.n_sensors, config.branch_prob, config.depth, config.seed)
            }
        }
    }

    /// Random-effect covariance for `kind`.
    pub fn random_effect_covariance(&self, kind: KernelKind, params: &KernelParams) -> Result<Matrix> {
        match kind {
            KernelKind::Euclidean => euclidean_covariance(&self.locations.coords, params),
            KernelKind::Tailup => {
                let net = self
                    .network
                    .as_ref()
                    .ok_or_else(|| Error::param("kernel_kind", "tail-up kernel needs a river network"))?;
                tailup_covariance(net, params)
            }
        }
    }
}

/// Output of [`simulate_response`].
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub series: MultivariateSeries,
    pub layout: SpatialLayout,
}

/// Builds the layout for `config` and simulates on it.
pub fn simulate_response(config: &SimConfig) -> Result<Simulation> {
    config.validate()?;
    let layout = SpatialLayout::for_config(config)?;
    let series = simulate_on_layout(config, &layout)?;
    Ok(Simulation { series, layout })
}

/// Simulates the mixed model on a given layout. Covariates depend only on
/// the seed, the covariate kernel and the planar coordinates, so the two
/// kernel kinds share `X` on a shared layout.
pub fn simulate_on_layout(config: &SimConfig, layout: &SpatialLayout) -> Result<MultivariateSeries> {
    config.validate()?;
    let n = config.n_sensors;
    if layout.locations.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            found: layout.locations.len(),
        });
    }

    let ck = &config.covariate_kernel;
    let mut sigma_x = euclidean_covariance(&layout.locations.coords, ck)?;
    for i in 0..n {
        sigma_x[(i, i)] += ck.nugget_sigma02;
    }
    let mut x_rng = rng::stream_rng(config.seed, stream::COVARIATES);
    let x = sample_field_series(&sigma_x, ck.sigma2, config.n_ticks, &config.ma_weights, &mut x_rng)?;

    let (z, noise_sd) = match &config.random_effect {
        Some(re) => {
            let sigma_z = layout.random_effect_covariance(config.kernel_kind, re)?;
            let (lower, _) = cholesky_jittered(&sigma_z, re.sigma2)?;
            let mut z_rng = rng::stream_rng(config.seed, stream::RANDOM_EFFECT);
            (correlated_normal(&lower, &mut z_rng), libm::sqrt(re.nugget_sigma02))
        }
        None => (vec![0.0; n], 0.0),
    };

    let mut noise_rng = rng::stream_rng(config.seed, stream::NOISE);
    let mut values = Matrix::zeros(config.n_ticks, n);
    for t in 0..config.n_ticks {
        let eps = standard_normals(&mut noise_rng, n);
        for i in 0..n {
            values[(t, i)] = config.beta0 + config.beta1 * x[(t, i)] + z[i] + noise_sd * eps[i];
        }
    }
    let ticks = (1..=config.n_ticks as i64).collect();
    MultivariateSeries::new(values, ticks, layout.locations.ids.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn unit() -> KernelParams {
        KernelParams::new(1.0, 1.0, 0.0).unwrap()
    }

    /// Two leaves (1, 2) joining at the outlet (0).
    fn fork() -> RiverNetwork {
        RiverNetwork::from_edges(
            &[(None, 1.0), (Some(0), 2.0), (Some(0), 1.5)],
            vec![
                Placement { segment: 1, offset: 0.5 },
                Placement { segment: 2, offset: 1.0 },
                Placement { segment: 0, offset: 0.25 },
            ],
        )
        .unwrap()
    }

    #[test]
    fn locations_are_seeded() {
        let a = sample_locations(40, 1).unwrap();
        let b = sample_locations(40, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 40);
        for i in 0..40 {
            for j in 0..i {
                assert_ne!(a.coords[i], a.coords[j]);
            }
        }
        assert!(sample_locations(1, 1).is_err());
    }

    #[test]
    fn euclidean_kernel_values() {
        let p = unit();
        assert_eq!(euclidean_kernel(&[0.3, 0.3], &[0.3, 0.3], &p), 1.0);
        assert_abs_diff_eq!(
            euclidean_kernel(&[0.0, 0.0], &[1.0, 0.0], &p),
            0.36788,
            epsilon = 1e-5
        );
        let (a, b) = ([0.1, 0.7], [0.4, 0.2]);
        assert_eq!(euclidean_kernel(&a, &b, &p), euclidean_kernel(&b, &a, &p));
    }

    #[test]
    fn kernel_params_validated() {
        assert!(KernelParams::new(0.0, 1.0, 0.0).is_err());
        assert!(KernelParams::new(1.0, -1.0, 0.0).is_err());
        assert!(KernelParams::new(1.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn single_segment_network() {
        let net = build_river_network(3, 0.8, 1, 4).unwrap();
        assert_eq!(net.n_segments(), 1);
        assert_eq!(net.segments()[0].shreve_order, 1);
    }

    #[test]
    fn shreve_sum_at_outlet() {
        let net = fork();
        assert_eq!(net.segments()[0].shreve_order, 2);
        assert_eq!(net.segments()[1].shreve_order, 1);
    }

    #[test]
    fn fork_distances() {
        let net = fork();
        let p = net.placements();
        // sibling branches meet at the upstream end of the outlet
        assert_abs_diff_eq!(stream_distance(&net, &p[0], &p[1]).unwrap(), 1.5);
        // leaf to outlet point: 0.5 + (1.0 − 0.25)
        assert_abs_diff_eq!(stream_distance(&net, &p[0], &p[2]).unwrap(), 1.25);
        let a = Placement { segment: 1, offset: 0.2 };
        let b = Placement { segment: 1, offset: 0.7 };
        assert_abs_diff_eq!(stream_distance(&net, &a, &b).unwrap(), 0.5);
        assert!(matches!(
            stream_distance(&net, &a, &Placement { segment: 9, offset: 0.0 }),
            Err(Error::UnknownSegment(9))
        ));
    }

    #[test]
    fn fork_connectivity_and_kernel() {
        let net = fork();
        let p = net.placements();
        assert!(flow_connected(&net, &p[0], &p[2]).unwrap());
        assert!(!flow_connected(&net, &p[0], &p[1]).unwrap());
        let params = unit();
        assert_eq!(tailup_kernel(&net, &p[0], &p[1], &params).unwrap(), 0.0);
        assert_eq!(tailup_kernel(&net, &p[0], &p[0], &params).unwrap(), 1.0);
        // ω = sqrt(1/2), h = 1.25
        assert_abs_diff_eq!(
            tailup_kernel(&net, &p[0], &p[2], &params).unwrap(),
            libm::sqrt(0.5) * libm::exp(-1.25),
            epsilon = 1e-15
        );
    }

    #[test]
    fn tailup_scalar_value() {
        // ω = 0.5 needs Ω ratio 1/4: a leaf draining into an order-4 reach
        let edges = [
            (None, 1.0),
            (Some(0), 1.0),
            (Some(0), 1.0),
            (Some(1), 1.0),
            (Some(1), 1.0),
            (Some(2), 1.0),
            (Some(2), 1.0),
        ];
        // leaf 3 (Ω=1) to outlet (Ω=4): h = 0.5 + 1.0 + 0.5 = 2 = α
        let net = RiverNetwork::from_edges(
            &edges,
            vec![
                Placement { segment: 3, offset: 0.5 },
                Placement { segment: 0, offset: 0.5 },
            ],
        )
        .unwrap();
        let p = net.placements();
        let params = KernelParams::new(1.0, 2.0, 0.0).unwrap();
        assert_abs_diff_eq!(tailup_weight(&net, &p[0], &p[1]).unwrap(), 0.5);
        assert_abs_diff_eq!(
            tailup_kernel(&net, &p[0], &p[1], &params).unwrap(),
            0.18394,
            epsilon = 1e-5
        );
    }

    #[test]
    fn rejects_malformed_networks() {
        assert!(RiverNetwork::from_edges(&[(None, 1.0), (None, 1.0)], vec![]).is_err());
        assert!(RiverNetwork::from_edges(&[(Some(1), 1.0), (Some(0), 1.0)], vec![]).is_err());
        assert!(RiverNetwork::from_edges(&[(None, 0.0)], vec![]).is_err());
        assert!(RiverNetwork::from_edges(
            &[(None, 1.0)],
            vec![Placement { segment: 0, offset: 2.0 }]
        )
        .is_err());
    }

    #[test]
    fn network_is_seeded() {
        let a = build_river_network(10, 0.8, 5, 11).unwrap();
        let b = build_river_network(10, 0.8, 5, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn covariance_of_one_point() {
        let p = KernelParams::new(2.5, 1.0, 0.0).unwrap();
        let m = euclidean_covariance(&[[0.2, 0.2]], &p).unwrap();
        assert_eq!(m.as_slice(), &[2.5]);
    }

    #[test]
    fn default_weights_preserve_variance() {
        let w = default_ma_weights(3);
        assert_eq!(w.len(), 4);
        assert_abs_diff_eq!(w.iter().map(|x| x * x).sum::<f64>(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w[1] / w[0], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn degenerate_model_is_constant() {
        let cfg = SimConfig {
            n_sensors: 5,
            n_ticks: 20,
            beta0: 3.5,
            beta1: 0.0,
            random_effect: None,
            ..SimConfig::default()
        };
        let sim = simulate_response(&cfg).unwrap();
        assert!(sim.series.values().as_slice().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn output_shape_and_determinism() {
        let cfg = SimConfig {
            n_ticks: 4000,
            n_sensors: 40,
            seed: 3,
            ..SimConfig::default()
        };
        let a = simulate_response(&cfg).unwrap();
        assert_eq!(a.series.values().shape(), (4000, 40));
        let b = simulate_response(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn kinds_share_covariates_on_shared_layout() {
        let layout = SpatialLayout::river(8, 0.8, 4, 5).unwrap();
        let base = SimConfig {
            n_sensors: 8,
            n_ticks: 50,
            random_effect: None,
            ..SimConfig::default()
        };
        let euc = simulate_on_layout(&base, &layout).unwrap();
        let tu = simulate_on_layout(
            &SimConfig {
                kernel_kind: KernelKind::Tailup,
                ..base
            },
            &layout,
        )
        .unwrap();
        assert_eq!(euc.values(), tu.values());
    }

    #[test]
    fn tailup_requires_network() {
        let layout = SpatialLayout::planar(4, 1).unwrap();
        assert!(layout
            .random_effect_covariance(KernelKind::Tailup, &unit())
            .is_err());
    }
}
