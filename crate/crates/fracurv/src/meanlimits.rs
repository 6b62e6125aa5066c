//! Monte-Carlo mean curvature curves, the paired R_k estimator and the three
//! limit functionals (Cesàro average, renewal integral, lattice sums).

use crate::codetree::{sample_tree, LabeledTree, NodeRef, StopRule, TreeError, TreeModel};
use crate::rasterlab::{cover_profile, Cover, CurvatureTriple, RasterError, MAX_VIRTUAL_SIDE};
use crate::rng::replicate_seed;
use crate::simgeom::OpenSetSpec;
use crate::spectrum::mean_stderr;
use rayon::prelude::*;
use serde::Serialize;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

#[derive(Debug, thiserror::Error)]
pub enum LimitError {
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("grid cap exceeded; the smallest feasible radius at this h_ratio is {smallest_eps:.3e}")]
    GridCap { smallest_eps: f64 },
    #[error("grid too sparse: {per_decade:.1} points per decade, need 8")]
    SparseGrid { per_decade: f64 },
    #[error("r grid does not cover {0}")]
    Coverage(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Pixel and cover resolution relative to the radius being measured.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Resolution {
    /// stop scale δ = q·ε
    pub q: f64,
    /// pixel size h = h_ratio·ε
    pub h_ratio: f64,
    pub big_r: f64,
}

/// `max, max·2^(-1/n), …` down to `min` inclusive (up to rounding).
pub fn geometric_grid(min: f64, max: f64, per_octave: u32) -> Vec<f64> {
    let n = ((max / min).log2() * per_octave as f64 + 1e-9).floor() as i32;
    (0..=n).map(|k| max * 2f64.powf(-(k as f64) / per_octave as f64)).collect()
}

/// Splits a strictly decreasing grid into runs spanning less than a factor 2.
fn octave_groups(desc: &[f64]) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut top = f64::INFINITY;
    for (k, &e) in desc.iter().enumerate() {
        if e > top / 2.0 * (1.0 + 1e-9) {
            out.last_mut().unwrap().push(k);
        } else {
            out.push(vec![k]);
            top = e;
        }
    }
    out
}

fn check_desc(xs: &[f64], hi: f64, what: &str) -> Result<(), LimitError> {
    if xs.is_empty() {
        return Err(LimitError::Invalid(format!("empty {what} grid")));
    }
    if xs.windows(2).any(|w| !(w[0] > w[1])) {
        return Err(LimitError::Invalid(format!("{what} grid must be strictly decreasing")));
    }
    if !(xs[xs.len() - 1] > 0.0) || xs[0] > hi * (1.0 + 1e-9) {
        return Err(LimitError::Invalid(format!("{what} grid must lie in (0, R]")));
    }
    Ok(())
}

fn check_cap(o: &OpenSetSpec, desc: &[f64], res: &Resolution) -> Result<(), LimitError> {
    let b = o.bbox();
    let ext = (b[2] - b[0]).max(b[3] - b[1]);
    for g in octave_groups(desc) {
        let lo = desc[*g.last().unwrap()];
        let h = res.h_ratio * lo;
        let side = (ext + 2.0 * desc[g[0]] + 6.0 * h) / h + 1.0;
        if side > MAX_VIRTUAL_SIDE as f64 {
            let cap = MAX_VIRTUAL_SIDE as f64;
            return Err(LimitError::GridCap {
                smallest_eps: ext / (res.h_ratio * (cap - 1.0) - 4.0 - 6.0 * res.h_ratio),
            });
        }
    }
    Ok(())
}

/// Curvature triples of F(ε) of one realization for a decreasing grid; each
/// octave shares one cover and one pixel size.
fn profile_from(tree: &LabeledTree, start: NodeRef, o: &OpenSetSpec, desc: &[f64], res: &Resolution) -> Result<Vec<CurvatureTriple>, LimitError> {
    let mut out = vec![CurvatureTriple { c0: 0.0, c1: 0.0, c2: 0.0 }; desc.len()];
    for g in octave_groups(desc) {
        let lo = desc[*g.last().unwrap()];
        let cover = Cover::new(tree, start, res.q * lo / res.big_r, o);
        let eps: Vec<f64> = g.iter().map(|&k| desc[k]).collect();
        for (k, t) in g.iter().zip(cover_profile(&cover, res.h_ratio * lo, &eps)?) {
            out[*k] = t;
        }
    }
    Ok(out)
}

fn grow(model: &Arc<TreeModel>, finest: f64, res: &Resolution, seed: u64) -> LabeledTree {
    sample_tree(
        model,
        StopRule::Markov {
            r: res.q * finest,
            big_r: res.big_r,
        },
        seed,
    )
}

fn replicate_count(model: &TreeModel, n_mc: usize) -> usize {
    if model.is_deterministic() {
        1
    } else {
        n_mc
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanCurve {
    pub eps: Vec<f64>,
    pub k_set: Vec<usize>,
    pub mean: Vec<[f64; 3]>,
    pub stderr: Vec<[f64; 3]>,
    pub n_mc: usize,
    /// Per-replicate triples (one row for deterministic models).
    pub samples: Vec<Vec<[f64; 3]>>,
}

fn summarize(samples: &[Vec<[f64; 3]>], len: usize) -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
    let mut mean = vec![[0.0; 3]; len];
    let mut se = vec![[0.0; 3]; len];
    for j in 0..len {
        for k in 0..3 {
            let xs: Vec<f64> = samples.iter().map(|s| s[j][k]).collect();
            let (m, e) = mean_stderr(&xs);
            mean[j][k] = m;
            se[j][k] = e;
        }
    }
    (mean, se)
}

fn as_rows(p: Vec<CurvatureTriple>) -> Vec<[f64; 3]> {
    p.into_iter().map(|t| [t.c0, t.c1, t.c2]).collect()
}

pub fn mean_curvature_curve(
    model: &Arc<TreeModel>,
    o: &OpenSetSpec,
    k_set: &[usize],
    eps_grid: &[f64],
    n_mc: usize,
    res: &Resolution,
    seed: u64,
) -> Result<MeanCurve, LimitError> {
    if n_mc < 30 {
        return Err(LimitError::Invalid(format!("n_mc = {n_mc}, need at least 30")));
    }
    if k_set.iter().any(|&k| k > 2) {
        return Err(LimitError::Invalid("k must be 0, 1 or 2".into()));
    }
    check_desc(eps_grid, res.big_r, "eps")?;
    check_cap(o, eps_grid, res)?;
    let finest = eps_grid[eps_grid.len() - 1];
    let samples: Result<Vec<Vec<[f64; 3]>>, LimitError> = (0..replicate_count(model, n_mc) as u64)
        .into_par_iter()
        .map(|i| {
            let tree = grow(model, finest, res, replicate_seed(seed, i));
            Ok(as_rows(profile_from(&tree, NodeRef::ROOT, o, eps_grid, res)?))
        })
        .collect();
    let samples = samples?;
    let (mean, stderr) = summarize(&samples, eps_grid.len());
    Ok(MeanCurve {
        eps: eps_grid.to_vec(),
        k_set: k_set.to_vec(),
        mean,
        stderr,
        n_mc,
        samples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RkCurve {
    pub k: usize,
    /// decreasing
    pub r_grid: Vec<f64>,
    pub rk: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Standard error of the difference of two independent means of
    /// C_k(F(r)) and of the sum over first-level pieces.
    pub stderr_unpaired: Vec<f64>,
    pub n_mc: usize,
    pub samples: Vec<Vec<f64>>,
    /// R_k jumps up by this much just above r when r = R·r_i for some
    /// first-level piece; zero elsewhere.
    pub jump: Vec<f64>,
    pub jump_samples: Vec<Vec<f64>>,
}

impl RkCurve {
    /// Curve from given values, for synthetic inputs.
    pub fn from_values(k: usize, r_grid: Vec<f64>, rk: Vec<f64>) -> Self {
        let n = rk.len();
        RkCurve {
            k,
            samples: vec![rk.clone()],
            jump: vec![0.0; n],
            jump_samples: vec![vec![0.0; n]],
            r_grid,
            rk,
            stderr: vec![0.0; n],
            stderr_unpaired: vec![0.0; n],
            n_mc: 1,
        }
    }
}

type Rows = Vec<[f64; 3]>;

/// Per replicate: C(F(r)), Σ_i 1{r ≤ R r_i} C(F_i(r)), and the part of the
/// latter whose breakpoint R r_i equals r.
fn rk_replicate(tree: &LabeledTree, o: &OpenSetSpec, desc: &[f64], res: &Resolution) -> Result<(Rows, Rows, Rows), LimitError> {
    let x = as_rows(profile_from(tree, NodeRef::ROOT, o, desc, res)?);
    let mut y = vec![[0.0; 3]; desc.len()];
    let mut jump = vec![[0.0; 3]; desc.len()];
    for c in tree.children(NodeRef::ROOT) {
        let reach = res.big_r * tree.ratio_at(c);
        let from = desc.partition_point(|&r| r > reach * (1.0 + BREAK_TOL));
        if from == desc.len() {
            continue;
        }
        let on_grid = (desc[from] / reach - 1.0).abs() <= BREAK_TOL;
        if !on_grid && from > 0 {
            return Err(LimitError::Coverage(format!("breakpoint {reach} is not on the r grid")));
        }
        // keep octave boundaries of the full grid so both sides share covers
        let mut p = vec![CurvatureTriple { c0: 0.0, c1: 0.0, c2: 0.0 }; desc.len()];
        for g in octave_groups(desc) {
            let lo = desc[*g.last().unwrap()];
            let ks: Vec<usize> = g.into_iter().filter(|&k| k >= from).collect();
            if ks.is_empty() {
                continue;
            }
            let cover = Cover::new(tree, c, res.q * lo / res.big_r, o);
            let eps: Vec<f64> = ks.iter().map(|&k| desc[k]).collect();
            for (k, t) in ks.iter().zip(cover_profile(&cover, res.h_ratio * lo, &eps)?) {
                p[*k] = t;
            }
        }
        for k in from..desc.len() {
            y[k][0] += p[k].c0;
            y[k][1] += p[k].c1;
            y[k][2] += p[k].c2;
        }
        if on_grid && from > 0 {
            let t = p[from];
            jump[from][0] += t.c0;
            jump[from][1] += t.c1;
            jump[from][2] += t.c2;
        }
    }
    Ok((x, y, jump))
}

const BREAK_TOL: f64 = 1e-9;

/// `R·2^(-k/per_octave)` for k up to octaves·per_octave, merged with every
/// breakpoint R·r of a first-level ratio r inside that range.
pub fn r_grid_with_breaks(model: &TreeModel, big_r: f64, octaves: u32, per_octave: u32) -> Vec<f64> {
    let mut g = geometric_grid(big_r * 2f64.powi(-(octaves as i32)), big_r, per_octave);
    let lo = g[g.len() - 1];
    for l in model.labels() {
        for m in &l.maps {
            let b = big_r * m.ratio;
            if b >= lo * (1.0 - BREAK_TOL) && !g.iter().any(|&r| (r / b - 1.0).abs() <= BREAK_TOL) {
                g.push(b);
            }
        }
    }
    g.sort_by(|a, b| b.partial_cmp(a).unwrap());
    g
}

/// Paired estimates of R_k(r) for k = 0, 1, 2 from the same replicates.
pub fn estimate_rk_all(
    model: &Arc<TreeModel>,
    o: &OpenSetSpec,
    r_grid: &[f64],
    n_mc: usize,
    res: &Resolution,
    seed: u64,
) -> Result<[RkCurve; 3], LimitError> {
    check_desc(r_grid, res.big_r, "r")?;
    check_cap(o, r_grid, res)?;
    let finest = r_grid[r_grid.len() - 1];
    let reps: Result<Vec<_>, LimitError> = (0..replicate_count(model, n_mc) as u64)
        .into_par_iter()
        .map(|i| {
            let tree = grow(model, finest, res, replicate_seed(seed, i));
            rk_replicate(&tree, o, r_grid, res)
        })
        .collect();
    let reps = reps?;
    let n = r_grid.len();
    let curve = |k: usize| -> RkCurve {
        let samples: Vec<Vec<f64>> = reps.iter().map(|(x, y, _)| (0..n).map(|j| x[j][k] - y[j][k]).collect()).collect();
        let jump_samples: Vec<Vec<f64>> = reps.iter().map(|r| r.2.iter().map(|v| v[k]).collect()).collect();
        let jump = (0..n).map(|j| mean_stderr(&jump_samples.iter().map(|s| s[j]).collect::<Vec<_>>()).0).collect();
        let mut rk = Vec::with_capacity(n);
        let mut se = Vec::with_capacity(n);
        let mut se_u = Vec::with_capacity(n);
        for j in 0..n {
            let d: Vec<f64> = samples.iter().map(|s| s[j]).collect();
            let (m, e) = mean_stderr(&d);
            let xs: Vec<f64> = reps.iter().map(|r| r.0[j][k]).collect();
            let ys: Vec<f64> = reps.iter().map(|r| r.1[j][k]).collect();
            let ex = mean_stderr(&xs).1;
            let ey = mean_stderr(&ys).1;
            rk.push(m);
            se.push(e);
            se_u.push((ex * ex + ey * ey).sqrt());
        }
        RkCurve {
            k,
            r_grid: r_grid.to_vec(),
            rk,
            stderr: se,
            stderr_unpaired: se_u,
            n_mc,
            samples,
            jump,
            jump_samples,
        }
    };
    Ok([curve(0), curve(1), curve(2)])
}

pub fn estimate_rk(
    model: &Arc<TreeModel>,
    o: &OpenSetSpec,
    k: usize,
    r_grid: &[f64],
    n_mc: usize,
    res: &Resolution,
    seed: u64,
) -> Result<RkCurve, LimitError> {
    if k > 2 {
        return Err(LimitError::Invalid("k must be 0, 1 or 2".into()));
    }
    let [a, b, c] = estimate_rk_all(model, o, r_grid, n_mc, res, seed)?;
    Ok([a, b, c].into_iter().nth(k).unwrap())
}

/// (1/|ln δ|)·∫_δ^1 g(ε) dε/ε for g = ε^{D−k}·values, piecewise linear in
/// ln ε, held at its last value above the top of the grid.
fn cesaro(eps_desc: &[f64], values: &[f64], d: f64, k: usize, delta: f64) -> f64 {
    if delta >= 1.0 {
        return 0.0;
    }
    let mut pts: Vec<(f64, f64)> = eps_desc
        .iter()
        .zip(values)
        .rev()
        .map(|(&e, &v)| (e.ln(), e.powf(d - k as f64) * v))
        .collect();
    let top = pts[pts.len() - 1];
    if top.0 < 0.0 {
        pts.push((0.0, top.1));
    }
    let (a, b) = (delta.ln(), 0.0);
    let at = |t: f64| -> f64 {
        let j = pts.partition_point(|p| p.0 < t).clamp(1, pts.len() - 1);
        let (p, q) = (pts[j - 1], pts[j]);
        p.1 + (q.1 - p.1) * (t - p.0) / (q.0 - p.0)
    };
    let mut knots = vec![a];
    knots.extend(pts.iter().map(|p| p.0).filter(|&t| t > a && t < b));
    knots.push(b);
    let integral: f64 = knots.windows(2).map(|w| 0.5 * (w[1] - w[0]) * (at(w[0]) + at(w[1]))).sum();
    integral / (b - a)
}

fn per_decade(desc: &[f64]) -> f64 {
    if desc.len() < 2 {
        return 0.0;
    }
    (desc.len() - 1) as f64 / (desc[0] / desc[desc.len() - 1]).log10()
}

/// Cesàro mean (1/|ln δ|)∫_δ^1 ε^{D−k}·E C_k(F(ε)) dε/ε with its standard
/// error over replicates.
pub fn average_limit_with_err(curve: &MeanCurve, k: usize, d: f64, delta: f64) -> Result<(f64, f64), LimitError> {
    if k > 2 {
        return Err(LimitError::Invalid("k must be 0, 1 or 2".into()));
    }
    let lo = curve.eps[curve.eps.len() - 1];
    if delta < lo * (1.0 - 1e-9) {
        return Err(LimitError::Invalid(format!("delta = {delta} below the grid minimum {lo}")));
    }
    if delta > 1.0 {
        return Err(LimitError::Invalid(format!("delta = {delta} above 1")));
    }
    let pd = per_decade(&curve.eps);
    if pd < 8.0 - 1e-9 {
        return Err(LimitError::SparseGrid { per_decade: pd });
    }
    let delta = delta.max(lo);
    let col = |rows: &[[f64; 3]]| -> Vec<f64> { rows.iter().map(|r| r[k]).collect() };
    let value = cesaro(&curve.eps, &col(&curve.mean), d, k, delta);
    let per: Vec<f64> = curve.samples.iter().map(|s| cesaro(&curve.eps, &col(s), d, k, delta)).collect();
    Ok((value, mean_stderr(&per).1))
}

pub fn average_limit(curve: &MeanCurve, k: usize, d: f64, delta: f64) -> Result<f64, LimitError> {
    Ok(average_limit_with_err(curve, k, d, delta)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TailFit {
    /// fitted exponent of |R_k| against r
    pub slope: f64,
    /// slope − (k − D)
    pub delta_hat: f64,
    /// fitted R_k at the smallest grid radius, with the sign observed there
    pub at_lo: f64,
}

/// Least-squares power law through the small-r half of the grid.
pub fn fit_tail(rk: &RkCurve, d: f64) -> Option<TailFit> {
    let n = rk.r_grid.len();
    let half: Vec<(f64, f64)> = (n / 2..n)
        .filter(|&j| rk.rk[j] != 0.0 && rk.rk[j].is_finite())
        .map(|j| (rk.r_grid[j].ln(), rk.rk[j].abs().ln()))
        .collect();
    if half.len() < 3 {
        return None;
    }
    let m = half.len() as f64;
    let mx = half.iter().map(|p| p.0).sum::<f64>() / m;
    let my = half.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = half.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = half.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let lo = rk.r_grid[n - 1].ln();
    let sign = rk.rk[n - 1].signum();
    Some(TailFit {
        slope,
        delta_hat: slope - (rk.k as f64 - d),
        at_lo: sign * (my + slope * (lo - mx)).exp(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RenewalValue {
    pub value: f64,
    pub stderr: f64,
    pub tail: f64,
    pub tail_fraction: f64,
    pub fit: Option<TailFit>,
    pub warning: Option<String>,
}

/// ∫ r^{D−k−1} f dr = ∫ r^{D−k} f d(ln r), trapezoid per segment; the lower
/// end of a segment takes the limit from above, `vals + jump`.
fn log_trapezoid(r_desc: &[f64], vals: &[f64], jump: &[f64], d: f64, k: usize) -> f64 {
    let w = |j: usize| r_desc[j].powf(d - k as f64);
    (1..r_desc.len())
        .map(|j| 0.5 * (r_desc[j - 1] / r_desc[j]).ln() * (w(j - 1) * vals[j - 1] + w(j) * (vals[j] + jump[j])))
        .sum()
}

/// (1/η)∫_0^R r^{D−k−1} R_k(r) dr: log-grid trapezoid down to the smallest
/// radius, power-law tail below it.
pub fn renewal_integral(rk: &RkCurve, d: f64, k: usize, eta: f64, big_r: f64) -> Result<RenewalValue, LimitError> {
    let n = rk.r_grid.len();
    if n < 2 {
        return Err(LimitError::Coverage("fewer than two radii".into()));
    }
    let lo = rk.r_grid[n - 1];
    if lo > big_r / 256.0 * (1.0 + 1e-9) {
        return Err(LimitError::Coverage(format!("(0, R/256]: smallest radius is {lo}")));
    }
    if (rk.r_grid[0] / big_r - 1.0).abs() > 1e-6 {
        return Err(LimitError::Coverage(format!("R = {big_r}: largest radius is {}", rk.r_grid[0])));
    }
    let body = log_trapezoid(&rk.r_grid, &rk.rk, &rk.jump, d, k);
    let per: Vec<f64> = rk
        .samples
        .iter()
        .zip(&rk.jump_samples)
        .map(|(s, j)| log_trapezoid(&rk.r_grid, s, j, d, k))
        .collect();
    let stderr = mean_stderr(&per).1 / eta;
    let fit = fit_tail(rk, d);
    let (tail, warning) = match fit {
        _ if rk.rk.iter().all(|&v| v == 0.0) => (0.0, None),
        Some(f) if f.delta_hat > 0.0 => (f.at_lo * lo.powf(d - k as f64) / f.delta_hat, None),
        Some(f) => (
            0.0,
            Some(format!("fitted tail not integrable (delta_hat = {:.3}); tail excluded", f.delta_hat)),
        ),
        None => (0.0, Some("too few non-zero points to fit a tail; tail excluded".into())),
    };
    let total = body + tail;
    Ok(RenewalValue {
        value: total / eta,
        stderr,
        tail: tail / eta,
        tail_fraction: if total != 0.0 { (tail / total).abs() } else { 0.0 },
        fit,
        warning,
    })
}

/// Linear interpolation of `vals` at `x` on a decreasing grid, in ln x.
fn interp_desc(grid: &[f64], vals: &[f64], x: f64) -> Option<f64> {
    let n = grid.len();
    let tol = 1e-9;
    if x > grid[0] * (1.0 + tol) || x < grid[n - 1] * (1.0 - tol) {
        return None;
    }
    let j = grid.partition_point(|&g| g > x).clamp(1, n.max(2) - 1);
    if n == 1 {
        return Some(vals[0]);
    }
    let (a, b) = (grid[j - 1].ln(), grid[j].ln());
    let w = (x.ln() - a) / (b - a);
    Some(vals[j - 1] + (vals[j] - vals[j - 1]) * w.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatticeSum {
    pub s: f64,
    pub value: f64,
    pub terms: usize,
}

/// (1/η)·Σ_{m=0}^{m_max} e^{(k−D)(s+mc)} R_k(e^{−(s+mc)}) for each s. Lattice
/// points below the grid use the fitted power-law tail.
pub fn lattice_sums(rk: &RkCurve, d: f64, k: usize, eta: f64, c: f64, s_grid: &[f64], m_max: usize) -> Result<Vec<LatticeSum>, LimitError> {
    if !(c > 0.0) {
        return Err(LimitError::Invalid(format!("lattice constant {c}")));
    }
    let n = rk.r_grid.len();
    let lo = rk.r_grid[n - 1];
    let all_zero = rk.rk.iter().all(|&v| v == 0.0);
    let fit = fit_tail(rk, d);
    let mut out = Vec::with_capacity(s_grid.len());
    for &s in s_grid {
        if !(0.0..c).contains(&s) {
            return Err(LimitError::Invalid(format!("s = {s} outside [0, c)")));
        }
        let mut total = 0.0;
        for m in 0..=m_max {
            let x = s + m as f64 * c;
            let r = (-x).exp();
            let v = match interp_desc(&rk.r_grid, &rk.rk, r) {
                Some(v) => v,
                None if r < lo => match fit {
                    _ if all_zero => 0.0,
                    Some(f) if f.delta_hat > 0.0 => f.at_lo * (r / lo).powf(f.slope),
                    _ => return Err(LimitError::Coverage(format!("lattice point {r:.3e} and no usable tail"))),
                },
                None => return Err(LimitError::Coverage(format!("lattice point {r:.3e}"))),
            };
            total += ((k as f64 - d) * x).exp() * v;
        }
        out.push(LatticeSum {
            s,
            value: total / eta,
            terms: m_max + 1,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DirectTerm {
    pub n: i32,
    pub eps: f64,
    pub value: f64,
    pub stderr: f64,
}

/// e^{(k−D)(s+nc)}·E C_k(F(e^{−(s+nc)})) for n in `ns`.
pub fn direct_sequence(curve: &MeanCurve, k: usize, d: f64, c: f64, s: f64, ns: std::ops::RangeInclusive<i32>) -> Result<Vec<DirectTerm>, LimitError> {
    let mean: Vec<f64> = curve.mean.iter().map(|r| r[k]).collect();
    let se: Vec<f64> = curve.stderr.iter().map(|r| r[k]).collect();
    ns.map(|n| {
        let x = s + n as f64 * c;
        let e = (-x).exp();
        let f = ((k as f64 - d) * x).exp();
        match (interp_desc(&curve.eps, &mean, e), interp_desc(&curve.eps, &se, e)) {
            (Some(m), Some(v)) => Ok(DirectTerm {
                n,
                eps: e,
                value: f * m,
                stderr: f * v,
            }),
            _ => Err(LimitError::Coverage(format!("eps = {e:.3e} outside the curve"))),
        }
    })
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitReport {
    pub k: usize,
    pub value_renewal: Option<f64>,
    pub stderr_renewal: Option<f64>,
    pub tail_fraction: Option<f64>,
    pub value_average: f64,
    pub stderr_average: f64,
    pub delta: f64,
    pub value_lattice: Option<Vec<LatticeSum>>,
    /// min over the grid of ε^{k−D}·E C_k(F(ε)) and its standard error
    pub min_rescaled: f64,
    pub min_rescaled_stderr: f64,
    pub warnings: Vec<String>,
}

/// Gathers the three functionals for one k. `rk` and `lattice` are optional;
/// `lattice` is (c, s grid, m_max).
#[allow(clippy::too_many_arguments)]
pub fn limit_report(
    curve: &MeanCurve,
    rk: Option<&RkCurve>,
    k: usize,
    d: f64,
    eta: f64,
    big_r: f64,
    delta: f64,
    lattice: Option<(f64, &[f64], usize)>,
) -> Result<LimitReport, LimitError> {
    let (value_average, stderr_average) = average_limit_with_err(curve, k, d, delta)?;
    let mut warnings = Vec::new();
    let (mut vr, mut sr, mut tf) = (None, None, None);
    let mut value_lattice = None;
    if let Some(rk) = rk {
        let r = renewal_integral(rk, d, k, eta, big_r)?;
        if let Some(w) = &r.warning {
            warnings.push(format!("k={k}: {w}"));
        }
        if r.tail_fraction > 0.2 {
            warnings.push(format!("k={k}: tail fraction {:.3} exceeds 0.2", r.tail_fraction));
        }
        vr = Some(r.value);
        sr = Some(r.stderr);
        tf = Some(r.tail_fraction);
        if let Some((c, s, m)) = lattice {
            value_lattice = Some(lattice_sums(rk, d, k, eta, c, s, m)?);
        }
    }
    let (mut mn, mut mse) = (f64::INFINITY, 0.0);
    for (j, &e) in curve.eps.iter().enumerate() {
        let f = e.powf(d - k as f64);
        let v = f * curve.mean[j][k];
        if v < mn {
            mn = v;
            mse = f * curve.stderr[j][k];
        }
    }
    Ok(LimitReport {
        k,
        value_renewal: vr,
        stderr_renewal: sr,
        tail_fraction: tf,
        value_average,
        stderr_average,
        delta,
        value_lattice,
        min_rescaled: mn,
        min_rescaled_stderr: mse,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub min_rescaled: f64,
    pub min_rescaled_stderr: f64,
    pub positive: bool,
    pub ratio: Option<f64>,
    pub ratio_stderr: Option<f64>,
    pub target: Option<f64>,
    pub note: Option<String>,
}

impl Verdict {
    /// Relative deviation of the ratio from its target.
    pub fn ratio_error(&self) -> Option<f64> {
        Some((self.ratio? / self.target? - 1.0).abs())
    }
}

/// Positivity of the rescaled volume at 3σ and the ratio of the averaged
/// k = 2 and k = 1 limits against 2/(2 − D).
pub fn positivity_and_ratio(report_d: &LimitReport, report_dm1: &LimitReport, d: f64) -> Verdict {
    let positive = report_d.min_rescaled - 3.0 * report_d.min_rescaled_stderr > 0.0;
    let mut v = Verdict {
        min_rescaled: report_d.min_rescaled,
        min_rescaled_stderr: report_d.min_rescaled_stderr,
        positive,
        ratio: None,
        ratio_stderr: None,
        target: None,
        note: None,
    };
    if d >= 2.0 - 1e-12 {
        v.note = Some("D = 2: ratio clause skipped".into());
        return v;
    }
    let (a, b) = (report_d.value_average, report_dm1.value_average);
    let ratio = a / b;
    let rel = ((report_d.stderr_average / a).powi(2) + (report_dm1.stderr_average / b).powi(2)).sqrt();
    v.ratio = Some(ratio);
    v.ratio_stderr = Some(ratio.abs() * rel);
    v.target = Some(2.0 / (2.0 - d));
    v
}

#[derive(Serialize)]
struct MeanRow {
    eps: f64,
    k: usize,
    mean: f64,
    stderr: f64,
    n_mc: usize,
}

#[derive(Serialize)]
struct RkRow {
    r: f64,
    k: usize,
    rk: f64,
    stderr: f64,
}

#[derive(Serialize)]
struct LimitRow<'a> {
    k: usize,
    method: &'a str,
    value: f64,
    stderr: f64,
    diagnostics: String,
}

pub fn write_mean_curve(curve: &MeanCurve, path: impl AsRef<Path>) -> Result<(), LimitError> {
    let mut w = csv::Writer::from_path(path)?;
    for (j, &eps) in curve.eps.iter().enumerate() {
        for &k in &curve.k_set {
            w.serialize(MeanRow {
                eps,
                k,
                mean: curve.mean[j][k],
                stderr: curve.stderr[j][k],
                n_mc: curve.n_mc,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_rk_curves(curves: &[RkCurve], path: impl AsRef<Path>) -> Result<(), LimitError> {
    let mut w = csv::Writer::from_path(path)?;
    for c in curves {
        for j in 0..c.r_grid.len() {
            w.serialize(RkRow {
                r: c.r_grid[j],
                k: c.k,
                rk: c.rk[j],
                stderr: c.stderr[j],
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_limits(reports: &[LimitReport], path: impl AsRef<Path>) -> Result<(), LimitError> {
    let mut w = csv::Writer::from_path(path)?;
    let json = |v: serde_json::Value| v.to_string();
    for r in reports {
        if let Some(v) = r.value_renewal {
            w.serialize(LimitRow {
                k: r.k,
                method: "renewal",
                value: v,
                stderr: r.stderr_renewal.unwrap_or(f64::NAN),
                diagnostics: json(serde_json::json!({
                    "tail_fraction": r.tail_fraction,
                    "warnings": r.warnings,
                })),
            })?;
        }
        w.serialize(LimitRow {
            k: r.k,
            method: "average",
            value: r.value_average,
            stderr: r.stderr_average,
            diagnostics: json(serde_json::json!({
                "delta": r.delta,
                "min_rescaled": r.min_rescaled,
                "min_rescaled_stderr": r.min_rescaled_stderr,
            })),
        })?;
        for l in r.value_lattice.iter().flatten() {
            w.serialize(LimitRow {
                k: r.k,
                method: "lattice",
                value: l.value,
                stderr: f64::NAN,
                diagnostics: json(serde_json::json!({ "s": l.s, "terms": l.terms })),
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes any serializable value as pretty JSON.
pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<(), LimitError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(serde_json::to_string_pretty(value).map_err(|e| LimitError::Invalid(e.to_string()))?.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}
