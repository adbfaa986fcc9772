//! Synthetic benchmarks: wave-shaped surfaces and truncated cones, the
//! unstructuring procedure that turns them into varying-size clouds, and the
//! roughness and roundness responses computed from them.

use std::f64::consts::PI;

use nalgebra::{DMatrix, Matrix2, Vector2};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{Dataset, Point3, PointCloud};

pub const DEFAULT_B1: [[f64; 3]; 3] = [[4.0, 1.0, 0.0], [1.0, 0.1, 0.0], [1.0, 0.0, 1.0]];
pub const DEFAULT_B2: [[f64; 3]; 3] = [[1.0, 2.0, 0.0], [1.0, 3.0, 0.0], [1.0, 0.0, 0.2]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WaveParams {
    pub i1: usize,
    pub i2: usize,
    pub n: usize,
    pub noise_sd: f64,
    pub b1: [[f64; 3]; 3],
    pub b2: [[f64; 3]; 3],
    /// Optional `i1 × i2` row-major mean surface added to every sample.
    pub mean_surface: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for WaveParams {
    fn default() -> Self {
        Self {
            i1: 100,
            i2: 100,
            n: 100,
            noise_sd: 0.1,
            b1: DEFAULT_B1,
            b2: DEFAULT_B2,
            mean_surface: None,
            seed: 0,
        }
    }
}

/// `u_α[i] = sin(π α i / n)` for `i = 1..=n`.
pub fn wave_basis(n: usize, alpha: usize) -> Vec<f64> {
    (1..=n).map(|i| (PI * (alpha * i) as f64 / n as f64).sin()).collect()
}

/// Noise-free `i1 × i2` height matrix (row-major) for latent scores `z`.
pub fn wave_surface(params: &WaveParams, z: [f64; 2]) -> Vec<f64> {
    let u1: Vec<Vec<f64>> = (1..=3).map(|a| wave_basis(params.i1, a)).collect();
    let u2: Vec<Vec<f64>> = (1..=3).map(|a| wave_basis(params.i2, a)).collect();
    // Collapse the third mode first: C[a][b] = Σ_c B[a][b][c] z_c.
    let mut core = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            core[a][b] = params.b1[a][b] * z[0] + params.b2[a][b] * z[1];
        }
    }
    let mut out = vec![0.0; params.i1 * params.i2];
    for (p, row) in out.chunks_mut(params.i2).enumerate() {
        for (q, v) in row.iter_mut().enumerate() {
            let mut s = 0.0;
            for a in 0..3 {
                for b in 0..3 {
                    s += core[a][b] * u1[a][p] * u2[b][q];
                }
            }
            *v = s;
        }
    }
    out
}

fn validate_wave(p: &WaveParams) -> Result<()> {
    if p.i1 < 2 || p.i2 < 2 || p.n == 0 || !(p.noise_sd >= 0.0) {
        return Err(Error::Config(format!(
            "wave needs I1, I2 >= 2, N >= 1 and noise >= 0 (got {}, {}, {}, {})",
            p.i1, p.i2, p.n, p.noise_sd
        )));
    }
    if let Some(m) = &p.mean_surface {
        if m.len() != p.i1 * p.i2 {
            return Err(Error::Config("mean surface must have I1·I2 values".into()));
        }
    }
    Ok(())
}

/// Latent scores `Z` (N × 2) drawn from the dataset seed, before any noise.
pub fn wave_scores(params: &WaveParams) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    draw_scores(&mut rng, params.n)
}

fn draw_scores(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 2]> {
    (0..n)
        .map(|_| [StandardNormal.sample(rng), StandardNormal.sample(rng)])
        .collect()
}

/// Structured wave clouds at `(i1/I1, i2/I2, z)`; scores are drawn first, then the noise.
pub fn gen_wave(params: &WaveParams) -> Result<Vec<PointCloud>> {
    validate_wave(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let scores = draw_scores(&mut rng, params.n);
    gen_wave_with_scores(params, &scores, &mut rng)
}

fn gen_wave_with_scores(params: &WaveParams, scores: &[[f64; 2]], rng: &mut ChaCha8Rng) -> Result<Vec<PointCloud>> {
    let noise = Normal::new(0.0, params.noise_sd).map_err(|e| Error::Config(e.to_string()))?;
    scores
        .iter()
        .enumerate()
        .map(|(s, z)| {
            let heights = wave_surface(params, *z);
            let mut points = Vec::with_capacity(heights.len());
            for p in 0..params.i1 {
                for q in 0..params.i2 {
                    let mut h = heights[p * params.i2 + q];
                    if let Some(m) = &params.mean_surface {
                        h += m[p * params.i2 + q];
                    }
                    if params.noise_sd > 0.0 {
                        h += noise.sample(rng);
                    }
                    points.push([(p + 1) as f64 / params.i1 as f64, (q + 1) as f64 / params.i2 as f64, h]);
                }
            }
            PointCloud::new(format!("wave_{s:04}"), points)
        })
        .collect()
}

/// Wave clouds for explicitly given scores (noise still drawn from the seed).
pub fn gen_wave_from_scores(params: &WaveParams, scores: &[[f64; 2]]) -> Result<Vec<PointCloud>> {
    validate_wave(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    gen_wave_with_scores(params, scores, &mut rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConeShape {
    pub theta: f64,
    pub radius: f64,
    pub eccentricity: f64,
    pub curvature: f64,
}

pub const NORMAL_CONE: ConeShape = ConeShape {
    theta: PI / 8.0,
    radius: 1.3,
    eccentricity: 0.3,
    curvature: 0.5,
};

impl ConeShape {
    /// `r(φ, z) = (r + z tan θ) / sqrt(1 − e² cos² φ) + c (z² − z)`.
    pub fn radius_at(&self, phi: f64, z: f64) -> f64 {
        let e = self.eccentricity;
        (self.radius + z * self.theta.tan()) / (1.0 - e * e * phi.cos().powi(2)).sqrt()
            + self.curvature * (z * z - z)
    }

    fn validate(&self) -> Result<()> {
        let ok = self.theta > 0.0
            && self.theta < PI / 2.0
            && self.radius > 0.0
            && (0.0..1.0).contains(&self.eccentricity)
            && self.curvature.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid cone shape {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConeParams {
    pub i1: usize,
    pub i2: usize,
    pub normal: ConeShape,
    /// Multipliers applied to each of the four normal-condition parameters.
    pub levels: Vec<f64>,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for ConeParams {
    fn default() -> Self {
        Self {
            i1: 100,
            i2: 100,
            normal: NORMAL_CONE,
            levels: vec![0.9, 1.0, 1.2],
            noise_sd: 0.01,
            seed: 0,
        }
    }
}

impl ConeParams {
    /// Full factorial over the levels, curvature varying fastest.
    pub fn shapes(&self) -> Vec<ConeShape> {
        let l = &self.levels;
        let mut out = Vec::with_capacity(l.len().pow(4));
        for &a in l {
            for &b in l {
                for &c in l {
                    for &d in l {
                        out.push(ConeShape {
                            theta: self.normal.theta * a,
                            radius: self.normal.radius * b,
                            eccentricity: self.normal.eccentricity * c,
                            curvature: self.normal.curvature * d,
                        });
                    }
                }
            }
        }
        out
    }
}

/// One structured cone at `φ = 2π i1/I1`, `z = i2/I2`, noise added to the radius.
pub fn cone_cloud(
    shape: &ConeShape,
    i1: usize,
    i2: usize,
    noise_sd: f64,
    rng: &mut impl Rng,
    id: impl Into<String>,
) -> Result<PointCloud> {
    shape.validate()?;
    if i1 < 3 || i2 < 1 || !(noise_sd >= 0.0) {
        return Err(Error::Config("cone needs I1 >= 3, I2 >= 1 and noise >= 0".into()));
    }
    let mut points = Vec::with_capacity(i1 * i2);
    for a in 1..=i1 {
        let phi = 2.0 * PI * a as f64 / i1 as f64;
        for b in 1..=i2 {
            let z = b as f64 / i2 as f64;
            let mut r = shape.radius_at(phi, z);
            if noise_sd > 0.0 {
                let e: f64 = StandardNormal.sample(rng);
                r += noise_sd * e;
            }
            points.push([r * phi.cos(), r * phi.sin(), z]);
        }
    }
    PointCloud::new(id, points)
}

pub fn gen_cone(params: &ConeParams) -> Result<Vec<PointCloud>> {
    if params.levels.is_empty() {
        return Err(Error::Config("cone design needs at least one level".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    params
        .shapes()
        .iter()
        .enumerate()
        .map(|(s, shape)| cone_cloud(shape, params.i1, params.i2, params.noise_sd, &mut rng, format!("cone_{s:04}")))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnstructureParams {
    pub m_l: usize,
    pub m_u: usize,
    /// Size of the extreme-value subset; a multiple of 6.
    pub m_r: usize,
    pub seed: u64,
}

/// Random subsample of varying size plus its extreme-value subset.
pub fn unstructure(cloud: &PointCloud, params: &UnstructureParams) -> Result<(PointCloud, PointCloud)> {
    let big_m = cloud.len();
    let UnstructureParams { m_l, m_u, m_r, .. } = *params;
    if m_r == 0 || m_r % 6 != 0 {
        return Err(Error::Config(format!("m_r = {m_r} must be a positive multiple of 6")));
    }
    if !(1 <= m_l && m_l <= m_u && m_u <= big_m) || m_r >= m_u || m_r > m_l {
        return Err(Error::Config(format!(
            "need 1 <= m_l <= m_u <= M and m_r <= m_l, m_r < m_u (m_l {m_l}, m_u {m_u}, m_r {m_r}, M {big_m})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let m_i = rng.random_range(m_l..=m_u);
    let mut picked = index::sample(&mut rng, big_m, m_i).into_vec();
    picked.sort_unstable();
    let pts = cloud.points();
    let model: Vec<Point3> = picked.iter().map(|&i| pts[i]).collect();

    let k = m_r / 6;
    let mut chosen = vec![false; m_i];
    for axis in 0..3 {
        let mut order: Vec<usize> = (0..m_i).collect();
        order.sort_by(|&a, &b| {
            model[a][axis]
                .total_cmp(&model[b][axis])
                .then_with(|| lex_cmp(&model[a], &model[b]))
                .then(a.cmp(&b))
        });
        for &i in order[..k].iter().chain(&order[m_i - k..]) {
            chosen[i] = true;
        }
    }
    let have = chosen.iter().filter(|&&c| c).count();
    let rest: Vec<usize> = (0..m_i).filter(|&i| !chosen[i]).collect();
    for j in index::sample(&mut rng, rest.len(), m_r - have) {
        chosen[rest[j]] = true;
    }
    let response: Vec<Point3> = (0..m_i).filter(|&i| chosen[i]).map(|i| model[i]).collect();
    Ok((
        PointCloud::new(cloud.sample_id.clone(), model)?,
        PointCloud::new(cloud.sample_id.clone(), response)?,
    ))
}

fn lex_cmp(a: &Point3, b: &Point3) -> std::cmp::Ordering {
    a[0].total_cmp(&b[0])
        .then(a[1].total_cmp(&b[1]))
        .then(a[2].total_cmp(&b[2]))
}

/// `z = β0 + β1 x + β2 y` with the smallest singular value of the centered `[x y z]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdrPlane {
    pub beta: [f64; 3],
    pub smallest_singular_value: f64,
}

impl OdrPlane {
    pub fn unit_normal(&self) -> [f64; 3] {
        let [_, b1, b2] = self.beta;
        let norm = (b1 * b1 + b2 * b2 + 1.0).sqrt();
        [b1 / norm, b2 / norm, -1.0 / norm]
    }

    /// Unsigned orthogonal distance of `p` from the plane.
    pub fn distance(&self, p: &Point3) -> f64 {
        let n = self.unit_normal();
        let v = [p[0], p[1], p[2] - self.beta[0]];
        (n[0] * v[0] + n[1] * v[1] + n[2] * v[2]).abs()
    }
}

/// Orthogonal distance regression plane from the shifted normal equations
/// `(XᵀX − δ²I) β = Xᵀz` on centered coordinates.
pub fn odr_plane(cloud: &PointCloud) -> Result<OdrPlane> {
    let pts = cloud.points();
    let n = pts.len();
    if n < 3 {
        return Err(Error::Degenerate(format!("plane fit needs 3 points, got {n}")));
    }
    let mut mean = [0.0; 3];
    for p in pts {
        for c in 0..3 {
            mean[c] += p[c];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, 3, |r, c| pts[r][c] - mean[c]);
    let svd = centered.clone().svd(false, true);
    let v_t = svd.v_t.as_ref().unwrap();
    let (mut imin, mut imid) = (0, 0);
    let mut sv: Vec<(f64, usize)> = svd.singular_values.iter().copied().zip(0..).collect();
    sv.sort_by(|a, b| a.0.total_cmp(&b.0));
    if let [(_, a), (_, b), _] = sv[..] {
        imin = a;
        imid = b;
    }
    let delta = svd.singular_values[imin];
    let scale = svd.singular_values.max().max(f64::MIN_POSITIVE);
    if svd.singular_values[imid] <= 1e-12 * scale {
        return Err(Error::Degenerate("points are collinear".into()));
    }
    if v_t[(imin, 2)].abs() < 1e-6 {
        return Err(Error::Degenerate(
            "fitted plane is vertical; rotate the cloud so the surface faces z".into(),
        ));
    }
    let x = centered.columns(0, 2);
    let z = centered.column(2);
    let gram = x.transpose() * x;
    let shifted = Matrix2::new(gram[(0, 0)] - delta * delta, gram[(0, 1)], gram[(1, 0)], gram[(1, 1)] - delta * delta);
    let rhs = x.transpose() * z;
    let slopes = shifted
        .lu()
        .solve(&Vector2::new(rhs[0], rhs[1]))
        .filter(|s| s.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Degenerate("shifted normal equations are singular".into()))?;
    let beta = [mean[2] - slopes[0] * mean[0] - slopes[1] * mean[1], slopes[0], slopes[1]];
    Ok(OdrPlane {
        beta,
        smallest_singular_value: delta,
    })
}

/// Population standard deviation of unsigned distances to the ODR plane.
pub fn roughness_response(cloud: &PointCloud) -> Result<f64> {
    let plane = odr_plane(cloud)?;
    let d: Vec<f64> = cloud.points().iter().map(|p| plane.distance(p)).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    Ok((d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt())
}

/// Radial zone width `max_i |p_i − c| − min_i |p_i − c|`.
pub fn zone_width(ring: &[[f64; 2]], center: [f64; 2]) -> f64 {
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for p in ring {
        let r = (p[0] - center[0]).hypot(p[1] - center[1]);
        lo = lo.min(r);
        hi = hi.max(r);
    }
    hi - lo
}

/// Convex hull in counter-clockwise order (monotone chain).
fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn inside_hull(hull: &[[f64; 2]], p: [f64; 2]) -> bool {
    let n = hull.len();
    (0..n).all(|i| {
        let a = hull[i];
        let b = hull[(i + 1) % n];
        (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0
    })
}

/// Nelder–Mead on a 2-D function.
fn nelder_mead(f: &impl Fn([f64; 2]) -> f64, start: [f64; 2], step: f64, iters: usize) -> ([f64; 2], f64) {
    let mut simplex = [start, [start[0] + step, start[1]], [start[0], start[1] + step]];
    let mut vals = simplex.map(|p| f(p));
    for _ in 0..iters {
        let mut order = [0, 1, 2];
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        simplex = order.map(|i| simplex[i]);
        vals = order.map(|i| vals[i]);
        let size = (simplex[1][0] - simplex[0][0])
            .abs()
            .max((simplex[1][1] - simplex[0][1]).abs())
            .max((simplex[2][0] - simplex[0][0]).abs())
            .max((simplex[2][1] - simplex[0][1]).abs());
        if size < 1e-13 * (1.0 + start[0].abs() + start[1].abs()) {
            break;
        }
        let c = [(simplex[0][0] + simplex[1][0]) / 2.0, (simplex[0][1] + simplex[1][1]) / 2.0];
        let along = |t: f64| [c[0] + t * (simplex[2][0] - c[0]), c[1] + t * (simplex[2][1] - c[1])];
        let refl = along(-1.0);
        let fr = f(refl);
        if fr < vals[0] {
            let exp = along(-2.0);
            let fe = f(exp);
            if fe < fr {
                simplex[2] = exp;
                vals[2] = fe;
            } else {
                simplex[2] = refl;
                vals[2] = fr;
            }
        } else if fr < vals[1] {
            simplex[2] = refl;
            vals[2] = fr;
        } else {
            let con = if fr < vals[2] { along(-0.5) } else { along(0.5) };
            let fc = f(con);
            if fc < vals[2].min(fr) {
                simplex[2] = con;
                vals[2] = fc;
            } else {
                for i in 1..3 {
                    simplex[i] = [
                        (simplex[0][0] + simplex[i][0]) / 2.0,
                        (simplex[0][1] + simplex[i][1]) / 2.0,
                    ];
                    vals[i] = f(simplex[i]);
                }
            }
        }
    }
    let best = (0..3).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
    (simplex[best], vals[best])
}

/// Minimum-zone roundness of a ring: the smallest radial zone width over
/// centers inside the ring's convex hull.
pub fn mzt_roundness(ring: &[[f64; 2]]) -> Result<f64> {
    Ok(mzt_center(ring)?.1)
}

/// Minimizing center and zone width.
pub fn mzt_center(ring: &[[f64; 2]]) -> Result<([f64; 2], f64)> {
    if ring.len() < 3 || ring.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate(format!("ring needs 3 finite points, got {}", ring.len())));
    }
    let hull = convex_hull(ring);
    let area: f64 = (0..hull.len())
        .map(|i| {
            let (a, b) = (hull[i], hull[(i + 1) % hull.len()]);
            a[0] * b[1] - a[1] * b[0]
        })
        .sum::<f64>()
        / 2.0;
    let n = ring.len() as f64;
    let centroid = [
        ring.iter().map(|p| p[0]).sum::<f64>() / n,
        ring.iter().map(|p| p[1]).sum::<f64>() / n,
    ];
    let extent = ring
        .iter()
        .map(|p| (p[0] - centroid[0]).hypot(p[1] - centroid[1]))
        .fold(0.0f64, f64::max);
    if hull.len() < 3 || area <= 1e-12 * extent * extent {
        return Err(Error::Degenerate("ring points are collinear".into()));
    }
    let objective = |c: [f64; 2]| {
        if inside_hull(&hull, c) {
            zone_width(ring, c)
        } else {
            f64::INFINITY
        }
    };
    let (mut best, mut best_val) = (centroid, objective(centroid));
    // Restarted Nelder–Mead with shrinking initial simplices.
    let mut step = 0.1 * extent;
    for _ in 0..4 {
        let (c, v) = nelder_mead(&objective, best, step, 400);
        if v < best_val {
            best = c;
            best_val = v;
        }
        step *= 0.1;
    }
    // Compass polish: the objective is a max/min of distances and has kinks
    // where simplex methods stall.
    let mut h = 0.05 * extent;
    let dirs = [
        [1.0, 0.0],
        [-1.0, 0.0],
        [0.0, 1.0],
        [0.0, -1.0],
        [1.0, 1.0],
        [1.0, -1.0],
        [-1.0, 1.0],
        [-1.0, -1.0],
    ];
    while h > 1e-12 * extent {
        let mut improved = false;
        for d in dirs {
            let c = [best[0] + h * d[0], best[1] + h * d[1]];
            let v = objective(c);
            if v < best_val {
                best = c;
                best_val = v;
                improved = true;
            }
        }
        if !improved {
            h *= 0.5;
        }
    }
    Ok((best, best_val))
}

/// Mean minimum-zone roundness over equal-width z-bins holding at least
/// `min_points` points.
pub fn roundness_response_with(cloud: &PointCloud, n_bins: usize, min_points: usize) -> Result<f64> {
    if n_bins == 0 {
        return Err(Error::Config("need at least one z-bin".into()));
    }
    let pts = cloud.points();
    let (lo, hi) = pts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p[2]), b.max(p[2])));
    if !(hi > lo) && n_bins > 1 {
        return Err(Error::InsufficientData("cloud has no z-extent".into()));
    }
    let mut bins: Vec<Vec<[f64; 2]>> = vec![Vec::new(); n_bins];
    for p in pts {
        let b = if hi > lo {
            (((p[2] - lo) / (hi - lo) * n_bins as f64) as usize).min(n_bins - 1)
        } else {
            0
        };
        bins[b].push([p[0], p[1]]);
    }
    let values: Vec<f64> = bins
        .iter()
        .filter(|b| b.len() >= min_points)
        .filter_map(|b| mzt_roundness(b).ok())
        .collect();
    if values.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no z-bin holds {min_points} points in general position"
        )));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

pub const DEFAULT_ROUNDNESS_BINS: usize = 20;
pub const MIN_RING_POINTS: usize = 8;

pub fn roundness_response(cloud: &PointCloud, n_bins: usize) -> Result<f64> {
    roundness_response_with(cloud, n_bins, MIN_RING_POINTS)
}

/// Unstructures every cloud (seed offset by sample position) and computes the
/// response on each extreme subset. Samples are the subsampled clouds.
pub fn unstructured_dataset(
    clouds: &[PointCloud],
    params: &UnstructureParams,
    response: impl Fn(&PointCloud) -> Result<f64>,
) -> Result<Dataset> {
    let mut samples = Vec::with_capacity(clouds.len());
    let mut responses = Vec::with_capacity(clouds.len());
    for (i, c) in clouds.iter().enumerate() {
        let p = UnstructureParams {
            seed: params.seed.wrapping_add(i as u64),
            ..*params
        };
        let (model, extreme) = unstructure(c, &p)?;
        responses.push(vec![response(&extreme)?]);
        samples.push(model);
    }
    Dataset::new(samples, responses)
}
