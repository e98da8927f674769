//! Geometry of the unit hypersphere `S^{d-1}`: points, the geodesic metric,
//! caps, covering nets and the cap-measure constants used by the ball-count
//! verifier.

use std::f64::consts::PI;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::model::VmfMixture;
use crate::rng;

/// A point on `S^{d-1}`, `d >= 2`. Coordinates are renormalized on
/// construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct UnitVector(Vec<f64>);

impl UnitVector {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.len() < 2 {
            return Err(domain(format!("unit vectors need d >= 2, got {}", coords.len())));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(domain("unit vector has non-finite coordinates"));
        }
        let norm = norm(&coords);
        if norm == 0.0 {
            return Err(domain("cannot normalize the zero vector"));
        }
        let mut v = coords;
        // keep already-unit vectors bit-exact
        if (norm - 1.0).abs() > 4.0 * f64::EPSILON {
            v.iter_mut().for_each(|c| *c /= norm);
        }
        Ok(Self(v))
    }

    /// `i`-th standard basis vector of `R^d`.
    pub fn basis(d: usize, i: usize) -> Result<Self> {
        if i >= d {
            return Err(domain(format!("basis index {i} out of range for d = {d}")));
        }
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        Self::new(v)
    }

    /// Point on the circle at angle `theta`.
    pub fn from_angle(theta: f64) -> Self {
        Self(vec![theta.cos(), theta.sin()])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.0
    }

    /// Inner product. Dimensions must agree.
    pub fn dot(&self, other: &UnitVector) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        dot(&self.0, &other.0)
    }

    pub fn negated(&self) -> Self {
        Self(self.0.iter().map(|c| -c).collect())
    }
}

impl TryFrom<Vec<f64>> for UnitVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<UnitVector> for Vec<f64> {
    fn from(v: UnitVector) -> Self {
        v.0
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn check_same_dim(x: &UnitVector, y: &UnitVector) -> Result<()> {
    if x.dim() != y.dim() {
        return Err(Error::DimensionMismatch {
            expected: x.dim(),
            found: y.dim(),
        });
    }
    Ok(())
}

/// `arccos(x^T y)`, evaluated as `2 atan2(|x - y|, |x + y|)` so that it stays
/// accurate for nearly equal and nearly antipodal points.
pub fn geodesic_distance(x: &UnitVector, y: &UnitVector) -> Result<f64> {
    check_same_dim(x, y)?;
    let (mut diff, mut sum) = (0.0, 0.0);
    for (a, b) in x.coords().iter().zip(y.coords()) {
        diff += (a - b) * (a - b);
        sum += (a + b) * (a + b);
    }
    Ok(2.0 * diff.sqrt().atan2(sum.sqrt()))
}

/// Open geodesic ball `B_r(center) = { y : d(center, y) < r }`.
#[derive(Debug, Clone, PartialEq)]
pub struct SphericalCap {
    center: UnitVector,
    radius: f64,
}

impl SphericalCap {
    pub fn new(center: UnitVector, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius <= PI) {
            return Err(domain(format!("cap radius must lie in (0, pi], got {radius}")));
        }
        Ok(Self { center, radius })
    }

    pub fn center(&self) -> &UnitVector {
        &self.center
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn contains(&self, x: &UnitVector) -> Result<bool> {
        Ok(geodesic_distance(&self.center, x)? < self.radius)
    }
}

/// `A_2 = 2^{d-1} * 2 pi^{(d-1)/2} / Gamma((d-1)/2)`, the constant bounding
/// the surface measure of a `2 eps` cap by `A_2 eps^{d-1}`.
pub fn a2_constant(d: usize) -> Result<f64> {
    if d < 2 {
        return Err(domain(format!("dimension must be >= 2, got {d}")));
    }
    let h = (d as f64 - 1.0) / 2.0;
    Ok(2f64.powi(d as i32 - 1) * 2.0 * PI.powf(h) / libm::tgamma(h))
}

/// `delta(eps) = M A_2 eps^{d-1}`.
pub fn delta_bound(max_density: f64, d: usize, epsilon: f64) -> Result<f64> {
    if !(max_density > 0.0) {
        return Err(domain(format!("M must be positive, got {max_density}")));
    }
    if !(epsilon >= 0.0) {
        return Err(domain(format!("epsilon must be >= 0, got {epsilon}")));
    }
    Ok(max_density * a2_constant(d)? * epsilon.powi(d as i32 - 1))
}

/// Exact surface measure of a cap of geodesic radius `r` on `S^{d-1}`:
/// `omega_{d-2} int_0^r sin^{d-2}(t) dt`, by composite Simpson.
pub fn cap_measure(d: usize, r: f64) -> Result<f64> {
    if d < 2 {
        return Err(domain(format!("dimension must be >= 2, got {d}")));
    }
    let r = r.clamp(0.0, PI);
    if d == 2 {
        return Ok(2.0 * r);
    }
    let h = (d as f64 - 1.0) / 2.0;
    let lower_area = 2.0 * PI.powf(h) / libm::tgamma(h);
    let steps = 2000;
    let dt = r / steps as f64;
    let f = |t: f64| t.sin().powi(d as i32 - 2);
    let mut s = f(0.0) + f(r);
    for i in 1..steps {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(i as f64 * dt);
    }
    Ok(lower_area * s * dt / 3.0)
}

// ---------------------------------------------------------------------------
// Covering nets
// ---------------------------------------------------------------------------

/// Recursive latitude-band net. A node covers `S^k` (ambient dimension `k+1`)
/// and describes points as `(cos theta, sin theta * u)` with `u` taken from a
/// child net on `S^{k-1}`.
#[derive(Debug, Clone)]
enum NetNode {
    /// Any single point covers the whole sphere when the radius exceeds `pi`.
    Single,
    /// Equally spaced angles on the circle.
    Circle { count: usize },
    Bands { bands: Vec<Band>, len: usize },
}

#[derive(Debug, Clone)]
struct Band {
    theta: f64,
    offset: usize,
    child: NetNode,
}

impl NetNode {
    fn build(ambient: usize, radius: f64) -> NetNode {
        if radius > PI {
            return NetNode::Single;
        }
        if ambient == 2 {
            let count = (PI / radius).floor() as usize + 1;
            return NetNode::Circle { count };
        }
        // |theta - theta_b| <= radius/2 and the child covers the band circle
        // to within (radius/2) / sin(theta_b); by the triangle inequality
        // every point then lies strictly within `radius`.
        let half = 0.5 * radius;
        let count = (PI / (2.0 * half)).ceil() as usize;
        let width = PI / count as f64;
        let mut bands = Vec::with_capacity(count);
        let mut offset = 0;
        for b in 0..count {
            let theta = (b as f64 + 0.5) * width;
            let child = NetNode::build(ambient - 1, half / theta.sin());
            let len = child.len();
            bands.push(Band { theta, offset, child });
            offset += len;
        }
        NetNode::Bands { bands, len: offset }
    }

    fn len(&self) -> usize {
        match self {
            NetNode::Single => 1,
            NetNode::Circle { count } => *count,
            NetNode::Bands { len, .. } => *len,
        }
    }

    fn write_point(&self, index: usize, out: &mut [f64]) {
        match self {
            NetNode::Single => {
                out.iter_mut().for_each(|c| *c = 0.0);
                out[0] = 1.0;
            }
            NetNode::Circle { count } => {
                let phi = 2.0 * PI * index as f64 / *count as f64;
                out[0] = phi.cos();
                out[1] = phi.sin();
            }
            NetNode::Bands { bands, .. } => {
                let b = bands.partition_point(|band| band.offset <= index) - 1;
                let band = &bands[b];
                band.child.write_point(index - band.offset, &mut out[1..]);
                let s = band.theta.sin();
                out[1..].iter_mut().for_each(|c| *c *= s);
                out[0] = band.theta.cos();
            }
        }
    }

    /// Indices of points possibly within angular distance `radius` of the
    /// unit vector `x`. Superset of the exact answer.
    fn candidates(&self, x: &[f64], radius: f64, base: usize, out: &mut Vec<usize>) {
        match self {
            NetNode::Single => out.push(base),
            NetNode::Circle { count } => {
                let n = *count;
                if radius >= PI || n <= 2 {
                    out.extend(base..base + n);
                    return;
                }
                let step = 2.0 * PI / n as f64;
                let phi = x[1].atan2(x[0]);
                let lo = ((phi - radius) / step).floor() as i64;
                let hi = ((phi + radius) / step).ceil() as i64;
                if (hi - lo + 1) as usize >= n {
                    out.extend(base..base + n);
                    return;
                }
                for j in lo..=hi {
                    out.push(base + j.rem_euclid(n as i64) as usize);
                }
            }
            NetNode::Bands { bands, .. } => {
                let c0 = x[0].clamp(-1.0, 1.0);
                let theta = c0.acos();
                let rest = &x[1..];
                let s = norm(rest);
                let cos_r = radius.cos();
                let first = bands.partition_point(|b| b.theta < theta - radius);
                let mut u = vec![0.0; rest.len()];
                if s > 0.0 {
                    u.iter_mut().zip(rest).for_each(|(ui, ri)| *ui = ri / s);
                }
                for band in &bands[first..] {
                    if band.theta > theta + radius {
                        break;
                    }
                    let sb = band.theta.sin();
                    let denom = s * sb;
                    if denom <= 1e-300 {
                        out.extend(base + band.offset..base + band.offset + band.child.len());
                        continue;
                    }
                    let threshold = (cos_r - c0 * band.theta.cos()) / denom;
                    if threshold <= -1.0 {
                        out.extend(base + band.offset..base + band.offset + band.child.len());
                    } else if threshold < 1.0 {
                        let alpha = threshold.acos() + 1e-9;
                        band.child.candidates(&u, alpha, base + band.offset, out);
                    }
                }
            }
        }
    }
}

/// A finite set of points such that every point of `S^{d-1}` lies at
/// geodesic distance strictly less than `radius` from one of them.
///
/// The net is implicit: points are generated on demand and neighbour
/// queries walk the band structure, so nets with millions of points cost
/// almost no memory. A seeded random rotation decorrelates the net from the
/// coordinate axes.
#[derive(Debug, Clone)]
pub struct CoveringNet {
    dim: usize,
    radius: f64,
    root: NetNode,
    /// Row-major orthogonal matrix mapping net coordinates to the sphere.
    rotation: Vec<f64>,
}

impl CoveringNet {
    pub fn new(d: usize, radius: f64, seed: u64) -> Result<Self> {
        if d < 2 {
            return Err(domain(format!("dimension must be >= 2, got {d}")));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(domain(format!("covering radius must be positive, got {radius}")));
        }
        Ok(Self {
            dim: d,
            radius,
            root: NetNode::build(d, radius),
            rotation: random_rotation(d, seed),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn len(&self) -> usize {
        self.root.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, index: usize) -> UnitVector {
        let mut local = vec![0.0; self.dim];
        self.root.write_point(index, &mut local);
        let mut out = vec![0.0; self.dim];
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(&self.rotation[i * self.dim..(i + 1) * self.dim], &local);
        }
        UnitVector(out)
    }

    pub fn points(&self) -> impl Iterator<Item = UnitVector> + '_ {
        (0..self.len()).map(move |i| self.point(i))
    }

    fn to_local(&self, x: &UnitVector) -> Vec<f64> {
        let d = self.dim;
        let mut local = vec![0.0; d];
        for (i, xi) in x.coords().iter().enumerate() {
            for (j, l) in local.iter_mut().enumerate() {
                *l += self.rotation[i * d + j] * xi;
            }
        }
        local
    }

    /// Indices of all net points at geodesic distance `< radius` from `x`.
    pub fn within(&self, x: &UnitVector, radius: f64) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        self.within_into(x, radius, &mut out)?;
        Ok(out)
    }

    /// As [`CoveringNet::within`], writing sorted indices into `out`.
    pub fn within_into(&self, x: &UnitVector, radius: f64, out: &mut Vec<usize>) -> Result<()> {
        if x.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: x.dim(),
            });
        }
        let local = self.to_local(x);
        out.clear();
        self.root.candidates(&local, radius + 1e-9, 0, out);
        out.sort_unstable();
        out.dedup();
        let mut buf = vec![0.0; self.dim];
        out.retain(|&i| {
            self.root.write_point(i, &mut buf);
            dot(&buf, &local).clamp(-1.0, 1.0).acos() < radius
        });
        Ok(())
    }

    /// Geodesic distance from `x` to the nearest net point, searching only
    /// within the covering radius. `None` if no net point is that close,
    /// which would mean the net does not cover `x`.
    pub fn nearest_distance(&self, x: &UnitVector) -> Result<Option<f64>> {
        let hits = self.within(x, self.radius)?;
        Ok(hits
            .into_iter()
            .map(|i| x.dot(&self.point(i)).clamp(-1.0, 1.0).acos())
            .min_by(f64::total_cmp))
    }
}

/// Haar-ish random orthogonal matrix (Gram-Schmidt on Gaussian columns).
fn random_rotation(d: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng::seeded(seed);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        for c in &cols {
            let p = dot(&v, c);
            v.iter_mut().zip(c).for_each(|(vi, ci)| *vi -= p * ci);
        }
        let n = norm(&v);
        if n > 1e-8 {
            v.iter_mut().for_each(|vi| *vi /= n);
            cols.push(v);
        }
    }
    let mut m = vec![0.0; d * d];
    for (j, c) in cols.iter().enumerate() {
        for i in 0..d {
            m[i * d + j] = c[i];
        }
    }
    m
}

/// Materialized covering net of radius `epsilon`, `0 < epsilon < pi/4`.
pub fn covering_net(d: usize, epsilon: f64, seed: u64) -> Result<Vec<UnitVector>> {
    if !(epsilon > 0.0 && epsilon < PI / 4.0) {
        return Err(domain(format!("epsilon must lie in (0, pi/4), got {epsilon}")));
    }
    Ok(CoveringNet::new(d, epsilon, seed)?.points().collect())
}

// ---------------------------------------------------------------------------
// Maximum of a mixture density
// ---------------------------------------------------------------------------

/// Default grid size for [`max_density_estimate`].
pub const DEFAULT_DENSITY_GRID: usize = 10_000;

/// `M = max_x g(x)` for a vMF mixture: the best point of a covering net with
/// about `grid_size` points, refined by projected gradient ascent from the
/// ten best grid points and from every component mean.
pub fn max_density_estimate(mix: &VmfMixture, grid_size: usize) -> Result<f64> {
    let d = mix.dim();
    let grid_size = grid_size.max(1);
    let net = net_with_size(d, grid_size)?;

    let mut best: Vec<(f64, usize)> = Vec::with_capacity(11);
    for i in 0..net.len() {
        let v = mix.log_density_unchecked(net.point(i).coords());
        if best.len() < 10 || v > best[best.len() - 1].0 {
            best.push((v, i));
            best.sort_by(|a, b| b.0.total_cmp(&a.0));
            best.truncate(10);
        }
    }

    let mut starts: Vec<Vec<f64>> = best.iter().map(|&(_, i)| net.point(i).into_coords()).collect();
    starts.extend(mix.components().iter().map(|c| c.mu().coords().to_vec()));

    let mut top = best.first().map(|b| b.0).unwrap_or(f64::NEG_INFINITY);
    for s in starts {
        top = top.max(hill_climb(mix, s));
    }
    Ok(top.exp())
}

/// Smallest-radius net with at least `target` points, by bisection on the
/// radius (net size is nonincreasing in the radius up to rounding).
fn net_with_size(d: usize, target: usize) -> Result<CoveringNet> {
    // halve until the net is large enough, then bisect inside the bracket
    let mut hi = PI;
    let mut lo = PI / 2.0;
    while CoveringNet::new(d, lo, 0)?.len() < target {
        if lo < 1e-4 {
            return CoveringNet::new(d, lo, 0);
        }
        hi = lo;
        lo /= 2.0;
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if CoveringNet::new(d, mid, 0)?.len() >= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    CoveringNet::new(d, lo, 0)
}

/// Projected gradient ascent of `log g` on the sphere with step adaptation.
fn hill_climb(mix: &VmfMixture, start: Vec<f64>) -> f64 {
    let d = start.len();
    let mut x = start;
    let mut val = mix.log_density_unchecked(&x);
    let mut step = 0.1;
    let mut grad = vec![0.0; d];
    let mut cand = vec![0.0; d];
    for _ in 0..500 {
        mix.log_density_gradient(&x, &mut grad);
        let radial = dot(&grad, &x);
        grad.iter_mut().zip(&x).for_each(|(g, xi)| *g -= radial * xi);
        let gnorm = norm(&grad);
        if gnorm < 1e-14 {
            break;
        }
        loop {
            for i in 0..d {
                cand[i] = x[i] + step * grad[i] / gnorm;
            }
            let n = norm(&cand);
            cand.iter_mut().for_each(|c| *c /= n);
            let v = mix.log_density_unchecked(&cand);
            if v > val {
                val = v;
                std::mem::swap(&mut x, &mut cand);
                step *= 1.5;
                break;
            }
            step *= 0.5;
            if step < 1e-13 {
                return val;
            }
        }
    }
    val
}
