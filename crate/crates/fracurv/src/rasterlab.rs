//! Pixel geometry: cover rasterization, exact Euclidean distance transform,
//! parallel sets and the (c0, c1, c2) estimators on 2×2 configurations.
//!
//! Pixel (i, j) of a grid has its center at `origin + (i + ½, j + ½)·h`; rows
//! run upward in y. Grids may be windows into a larger virtual lattice, in
//! which case `x0`/`y0` give the offset of the window so that every window
//! samples identical pixel centers.

use crate::codetree::{LabeledTree, MarkovStop, NodeRef, TreeError};
use crate::simgeom::{apply_polygon, bbox, OpenSetSpec, Point, Similarity};
use rayon::prelude::*;
use serde::Serialize;
use std::f64::consts::{PI, SQRT_2};
use std::io::Write;
use std::path::Path;

/// Largest side of a materialized grid.
pub const MAX_GRID_SIDE: usize = 8192;
/// Largest side of the virtual lattice swept tile by tile.
pub const MAX_VIRTUAL_SIDE: usize = 1 << 17;
pub const TILE: usize = 1024;

#[derive(Debug, thiserror::Error)]
pub enum RasterError {
    #[error("grid too coarse: h = {h} but at most {required} is needed")]
    TooCoarse { h: f64, required: f64 },
    #[error("mask has no occupied pixel")]
    EmptyMask,
    #[error("eps = {eps} exceeds the grid margin ({max})")]
    EpsExceedsMargin { eps: f64, max: f64 },
    #[error("mask touches the grid border; enlarge grid margin")]
    BorderContact,
    #[error("grid of {width}x{height} pixels exceeds the cap of {cap} per side")]
    GridTooLarge { width: usize, height: usize, cap: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub origin: Point,
    pub h: f64,
    pub x0: i64,
    pub y0: i64,
    pub width: usize,
    pub height: usize,
}

impl Grid {
    /// Window of the lattice hZ² covering `b` = [xmin, ymin, xmax, ymax]
    /// with `pad` on every side. Grids with equal h share pixel centers.
    pub fn covering(b: [f64; 4], pad: f64, h: f64) -> Grid {
        let x0 = ((b[0] - pad) / h).floor();
        let y0 = ((b[1] - pad) / h).floor();
        let width = ((b[2] + pad) / h).ceil() - x0 + 1.0;
        let height = ((b[3] + pad) / h).ceil() - y0 + 1.0;
        Grid {
            origin: [0.0, 0.0],
            h,
            x0: x0 as i64,
            y0: y0 as i64,
            width: width as usize,
            height: height as usize,
        }
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn center(&self, i: usize, j: usize) -> Point {
        [
            self.origin[0] + ((self.x0 + i as i64) as f64 + 0.5) * self.h,
            self.origin[1] + ((self.y0 + j as i64) as f64 + 0.5) * self.h,
        ]
    }

    /// World rectangle spanned by the pixels of this window.
    pub fn extent(&self) -> [f64; 4] {
        [
            self.origin[0] + self.x0 as f64 * self.h,
            self.origin[1] + self.y0 as f64 * self.h,
            self.origin[0] + (self.x0 + self.width as i64) as f64 * self.h,
            self.origin[1] + (self.y0 + self.height as i64) as f64 * self.h,
        ]
    }

    fn window(&self, x0: usize, y0: usize, width: usize, height: usize) -> Grid {
        Grid {
            x0: self.x0 + x0 as i64,
            y0: self.y0 + y0 as i64,
            width,
            height,
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub grid: Grid,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(grid: Grid) -> Self {
        BinaryMask {
            bits: vec![false; grid.len()],
            grid,
        }
    }

    pub fn width(&self) -> usize {
        self.grid.width
    }

    pub fn height(&self) -> usize {
        self.grid.height
    }

    pub fn h(&self) -> f64 {
        self.grid.h
    }

    pub fn origin(&self) -> Point {
        let e = self.grid.extent();
        [e[0], e[1]]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[j * self.grid.width + i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.bits[j * self.grid.width + i] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn area(&self) -> f64 {
        self.count() as f64 * self.grid.h * self.grid.h
    }

    fn touches_border(&self) -> bool {
        let (w, h) = (self.grid.width, self.grid.height);
        (0..w).any(|i| self.get(i, 0) || self.get(i, h - 1))
            || (0..h).any(|j| self.get(0, j) || self.get(w - 1, j))
    }

    /// Rasterizes a closed polygon into the mask; see [`fill_polygon`].
    pub fn fill(&mut self, poly: &[Point]) -> bool {
        fill_polygon(&mut self.bits, &self.grid, poly)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceField {
    pub grid: Grid,
    /// Squared distance in pixel units; `u32::MAX` where nothing is occupied.
    pub sq: Vec<u32>,
}

impl DistanceField {
    pub fn value(&self, i: usize, j: usize) -> f64 {
        let s = self.sq[j * self.grid.width + i];
        if s == u32::MAX {
            f64::INFINITY
        } else {
            (s as f64).sqrt() * self.grid.h
        }
    }

    /// Largest ε for which the parallel set stays off the grid border.
    pub fn margin(&self) -> f64 {
        let (w, h) = (self.grid.width, self.grid.height);
        let border = (0..w)
            .flat_map(|i| [(i, 0), (i, h - 1)])
            .chain((0..h).flat_map(|j| [(0, j), (w - 1, j)]));
        let m = border.map(|(i, j)| self.sq[j * w + i]).min().unwrap_or(u32::MAX);
        if m == u32::MAX {
            f64::INFINITY
        } else {
            // largest threshold strictly below the border minimum
            ((m as f64).sqrt() - 1e-9) * self.grid.h
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvatureTriple {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
}

impl CurvatureTriple {
    pub fn get(&self, k: usize) -> f64 {
        match k {
            0 => self.c0,
            1 => self.c1,
            _ => self.c2,
        }
    }
}

// Crofton weights of the 2×2 classes, in units of h; isotropic for a
// uniformly rotated boundary.
const ALPHA: f64 = PI / 16.0;
const BETA: f64 = PI * SQRT_2 / 16.0;
const W_ONE: f64 = 2.0 * ALPHA + BETA;
const W_EDGE: f64 = 2.0 * ALPHA + 2.0 * BETA;
const W_DIAG: f64 = 4.0 * ALPHA;

/// Raw configuration counts of one binary image.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct Counts {
    pub pixels: i64,
    pub n1: i64,
    pub n2: i64,
    pub nd: i64,
    pub n3: i64,
}

impl Counts {
    fn add(&mut self, o: &Counts) {
        self.pixels += o.pixels;
        self.n1 += o.n1;
        self.n2 += o.n2;
        self.nd += o.nd;
        self.n3 += o.n3;
    }

    /// χ of the complex on occupied pixel centers: 4-connected foreground,
    /// 8-connected holes.
    pub fn euler(&self) -> i64 {
        debug_assert_eq!((self.n1 - self.n3 + 2 * self.nd) % 4, 0);
        (self.n1 - self.n3 + 2 * self.nd) / 4
    }

    pub fn triple(&self, h: f64) -> CurvatureTriple {
        let per = W_ONE * (self.n1 + self.n3) as f64 + W_EDGE * self.n2 as f64 + W_DIAG * self.nd as f64;
        CurvatureTriple {
            c0: self.euler() as f64,
            c1: 0.5 * per * h,
            c2: self.pixels as f64 * h * h,
        }
    }
}

fn spans_at(poly: &[Point], y: f64, out: &mut Vec<f64>) {
    out.clear();
    let n = poly.len();
    for k in 0..n {
        let p = poly[k];
        let q = poly[(k + 1) % n];
        if p[1] == q[1] {
            continue;
        }
        let (lo, hi) = if p[1] < q[1] { (p, q) } else { (q, p) };
        if lo[1] <= y && y < hi[1] {
            out.push(lo[0] + (y - lo[1]) * (hi[0] - lo[0]) / (hi[1] - lo[1]));
        }
    }
    out.sort_by(|a, b| a.partial_cmp(b).unwrap());
    out.truncate(out.len() & !1);
    // horizontal edges lying on the scanline belong to the closure
    for k in 0..n {
        let p = poly[k];
        let q = poly[(k + 1) % n];
        if p[1] == q[1] && p[1] == y {
            out.push(p[0].min(q[0]));
            out.push(p[0].max(q[0]));
        }
    }
}

#[inline]
fn in_spans(spans: &[f64], x: f64, tol: f64) -> bool {
    spans.chunks_exact(2).any(|s| x >= s[0] - tol && x <= s[1] + tol)
}

/// Marks pixels whose center lies in the closed polygon, or at least two of
/// whose four quarter-offset subsamples do. Polygons smaller than a pixel,
/// and polygons that would mark nothing, mark the pixels holding their
/// vertices. Returns whether anything inside the window was marked.
pub fn fill_polygon(bits: &mut [bool], g: &Grid, poly: &[Point]) -> bool {
    let b = bbox(poly);
    let h = g.h;
    let (w, ht) = (g.width as i64, g.height as i64);
    let splat = |bits: &mut [bool]| -> bool {
        let mut any = false;
        for p in poly {
            let i = ((p[0] - g.origin[0]) / h).floor() as i64 - g.x0;
            let j = ((p[1] - g.origin[1]) / h).floor() as i64 - g.y0;
            if (0..w).contains(&i) && (0..ht).contains(&j) {
                bits[(j * w + i) as usize] = true;
                any = true;
            }
        }
        any
    };
    if (b[2] - b[0]).max(b[3] - b[1]) < h {
        return splat(bits);
    }
    let tol = 1e-9 * h;
    let gi = |x: f64| ((x - g.origin[0]) / h - 0.5) as f64;
    let gj = |y: f64| ((y - g.origin[1]) / h - 0.5) as f64;
    let j_lo = ((gj(b[1]) - 0.25).ceil() as i64 - g.y0).max(0);
    let j_hi = ((gj(b[3]) + 0.25).floor() as i64 - g.y0).min(ht - 1);
    let (mut sc, mut sl, mut su) = (Vec::new(), Vec::new(), Vec::new());
    let mut any = false;
    let mut hit_outside = false;
    for j in j_lo..=j_hi {
        let yc = g.origin[1] + ((g.y0 + j) as f64 + 0.5) * h;
        spans_at(poly, yc, &mut sc);
        spans_at(poly, yc - 0.25 * h, &mut sl);
        spans_at(poly, yc + 0.25 * h, &mut su);
        let lo = sc.iter().chain(&sl).chain(&su).cloned().fold(f64::INFINITY, f64::min);
        let hi = sc.iter().chain(&sl).chain(&su).cloned().fold(f64::NEG_INFINITY, f64::max);
        if lo > hi {
            continue;
        }
        let i_lo = (gi(lo) - 0.25).ceil() as i64 - g.x0;
        let i_hi = (gi(hi) + 0.25).floor() as i64 - g.x0;
        if i_lo < 0 || i_hi >= w {
            hit_outside = true;
        }
        for i in i_lo.max(0)..=i_hi.min(w - 1) {
            let xc = g.origin[0] + ((g.x0 + i) as f64 + 0.5) * h;
            let inside = in_spans(&sc, xc, tol) || {
                let (xl, xr) = (xc - 0.25 * h, xc + 0.25 * h);
                let c = in_spans(&sl, xl, tol) as u8
                    + in_spans(&sl, xr, tol) as u8
                    + in_spans(&su, xl, tol) as u8
                    + in_spans(&su, xr, tol) as u8;
                c >= 2
            };
            if inside {
                bits[(j * w + i) as usize] = true;
                any = true;
            }
        }
    }
    let rows_clipped = (gj(b[1]) - 0.25).ceil() as i64 - g.y0 < 0
        || (gj(b[3]) + 0.25).floor() as i64 - g.y0 > ht - 1;
    if !any && !hit_outside && !rows_clipped {
        return splat(bits);
    }
    any
}

/// Exact squared Euclidean distance transform, in pixel units, by the
/// two-pass separable method. Pixels with nothing occupied in the window
/// get `u32::MAX`.
pub fn edt_sq(bits: &[bool], w: usize, h: usize) -> Vec<u32> {
    assert_eq!(bits.len(), w * h);
    let big = (w + h + 1) as u32;
    let mut g = vec![big; w * h];
    for i in 0..w {
        if bits[i] {
            g[i] = 0;
        }
    }
    for j in 1..h {
        let (prev, cur) = g.split_at_mut(j * w);
        let prev = &prev[(j - 1) * w..];
        let cur = &mut cur[..w];
        let b = &bits[j * w..(j + 1) * w];
        for i in 0..w {
            cur[i] = if b[i] { 0 } else { (prev[i] + 1).min(big) };
        }
    }
    for j in (0..h.saturating_sub(1)).rev() {
        let (cur, next) = g.split_at_mut((j + 1) * w);
        let cur = &mut cur[j * w..];
        let next = &next[..w];
        for i in 0..w {
            if next[i] + 1 < cur[i] {
                cur[i] = next[i] + 1;
            }
        }
    }
    let inf = (big as u64) * (big as u64);
    let mut out = vec![0u32; w * h];
    out.par_chunks_mut(w)
        .zip(g.par_chunks(w))
        .for_each_init(
            || (vec![0usize; w], vec![0i64; w]),
            |(s, t), (row, gr)| {
                let f = |x: usize, i: usize| -> i64 {
                    let d = x as i64 - i as i64;
                    d * d + (gr[i] as i64) * (gr[i] as i64)
                };
                let sep = |i: usize, u: usize| -> i64 {
                    let (gi, gu) = (gr[i] as i64, gr[u] as i64);
                    let (ii, uu) = (i as i64, u as i64);
                    (uu * uu - ii * ii + gu * gu - gi * gi).div_euclid(2 * (uu - ii))
                };
                let mut q: isize = 0;
                s[0] = 0;
                t[0] = 0;
                for u in 1..w {
                    while q >= 0 && f(t[q as usize] as usize, s[q as usize]) > f(t[q as usize] as usize, u) {
                        q -= 1;
                    }
                    if q < 0 {
                        q = 0;
                        s[0] = u;
                    } else {
                        let x = 1 + sep(s[q as usize], u);
                        if x < w as i64 {
                            q += 1;
                            s[q as usize] = u;
                            t[q as usize] = x;
                        }
                    }
                }
                for u in (0..w).rev() {
                    let v = f(u, s[q as usize]) as u64;
                    row[u] = if v >= inf { u32::MAX } else { v as u32 };
                    if u as i64 == t[q as usize] {
                        q -= 1;
                    }
                }
            },
        );
    out
}

pub fn distance_transform(mask: &BinaryMask) -> Result<DistanceField, RasterError> {
    if !mask.bits.iter().any(|&b| b) {
        return Err(RasterError::EmptyMask);
    }
    Ok(DistanceField {
        grid: mask.grid,
        sq: edt_sq(&mask.bits, mask.grid.width, mask.grid.height),
    })
}

/// Integer threshold on squared pixel distances equivalent to `d ≤ eps`.
fn sq_threshold(eps: f64, h: f64) -> u32 {
    let x = (eps / h) * (eps / h);
    (x * (1.0 + 1e-12)).floor().min(u32::MAX as f64 - 1.0) as u32
}

pub fn parallel_set(field: &DistanceField, eps: f64) -> Result<BinaryMask, RasterError> {
    if !(eps >= 0.0) {
        return Err(RasterError::Invalid(format!("eps = {eps}")));
    }
    let max = field.margin();
    if eps > max {
        return Err(RasterError::EpsExceedsMargin { eps, max });
    }
    let t = sq_threshold(eps, field.grid.h);
    Ok(BinaryMask {
        grid: field.grid,
        bits: field.sq.iter().map(|&s| s <= t).collect(),
    })
}

/// Counts for all thresholds at once. `idx[p]` is the first threshold
/// index at which pixel p is occupied (`nt` if never). Windows are those
/// with top-left corner in `[cx0, cx1) × [cy0, cy1)`, which also selects the
/// pixels counted for volume.
fn accumulate(idx: &[u8], w: usize, core: [usize; 4], nt: usize) -> Vec<Counts> {
    let [cx0, cx1, cy0, cy1] = core;
    let mut hist = vec![0i64; nt + 1];
    let mut d1 = vec![0i64; nt + 1];
    let mut d2 = vec![0i64; nt + 1];
    let mut dd = vec![0i64; nt + 1];
    let mut d3 = vec![0i64; nt + 1];
    for j in cy0..cy1 {
        let r0 = &idx[j * w..(j + 1) * w];
        let r1 = &idx[(j + 1) * w..(j + 2) * w];
        for i in cx0..cx1 {
            hist[r0[i] as usize] += 1;
            let v = [r0[i], r0[i + 1], r1[i], r1[i + 1]];
            if v[0] == v[1] && v[1] == v[2] && v[2] == v[3] {
                continue;
            }
            let mut o = [0usize, 1, 2, 3];
            for a in 1..4 {
                let mut b = a;
                while b > 0 && v[o[b - 1]] > v[o[b]] {
                    o.swap(b - 1, b);
                    b -= 1;
                }
            }
            let s = [v[o[0]] as usize, v[o[1]] as usize, v[o[2]] as usize, v[o[3]] as usize];
            if s[0] < s[1] {
                d1[s[0]] += 1;
                d1[s[1]] -= 1;
            }
            if s[1] < s[2] {
                let d = if o[0] + o[1] == 3 { &mut dd } else { &mut d2 };
                d[s[1]] += 1;
                d[s[2]] -= 1;
            }
            if s[2] < s[3] {
                d3[s[2]] += 1;
                d3[s[3]] -= 1;
            }
        }
    }
    let mut out = Vec::with_capacity(nt);
    let mut acc = Counts::default();
    for k in 0..nt {
        acc.pixels += hist[k];
        acc.n1 += d1[k];
        acc.n2 += d2[k];
        acc.nd += dd[k];
        acc.n3 += d3[k];
        out.push(acc);
    }
    out
}

fn threshold_index(sq: &[u32], thresholds: &[u32]) -> Vec<u8> {
    sq.iter().map(|&s| thresholds.partition_point(|&t| t < s) as u8).collect()
}

/// Configuration counts of a mask that stays off the grid border.
pub fn counts(mask: &BinaryMask) -> Result<Counts, RasterError> {
    if mask.touches_border() {
        return Err(RasterError::BorderContact);
    }
    let (w, h) = (mask.grid.width, mask.grid.height);
    let idx: Vec<u8> = mask.bits.iter().map(|&b| (!b) as u8).collect();
    Ok(accumulate(&idx, w, [0, w - 1, 0, h - 1], 1)[0])
}

pub fn curvature_triple(mask: &BinaryMask) -> Result<CurvatureTriple, RasterError> {
    if !mask.bits.iter().any(|&b| b) {
        return Err(RasterError::EmptyMask);
    }
    Ok(counts(mask)?.triple(mask.grid.h))
}

fn sorted_thresholds(eps: &[f64], h: f64) -> Result<(Vec<usize>, Vec<u32>), RasterError> {
    if eps.is_empty() || eps.len() > 250 {
        return Err(RasterError::Invalid("between 1 and 250 radii per call".into()));
    }
    if eps.iter().any(|e| !(*e >= 0.0)) {
        return Err(RasterError::Invalid("radii must be non-negative".into()));
    }
    let mut order: Vec<usize> = (0..eps.len()).collect();
    order.sort_by(|&a, &b| eps[a].partial_cmp(&eps[b]).unwrap());
    let t = order.iter().map(|&k| sq_threshold(eps[k], h)).collect();
    Ok((order, t))
}

fn unsort(order: &[usize], sorted: Vec<Counts>, h: f64) -> Vec<CurvatureTriple> {
    let mut out = vec![CurvatureTriple { c0: 0.0, c1: 0.0, c2: 0.0 }; order.len()];
    for (k, c) in order.iter().zip(sorted) {
        out[*k] = c.triple(h);
    }
    out
}

/// Curvature triples of the parallel sets at every `eps`, from one field.
pub fn curvature_profile(field: &DistanceField, eps: &[f64]) -> Result<Vec<CurvatureTriple>, RasterError> {
    let (order, t) = sorted_thresholds(eps, field.grid.h)?;
    let max = field.margin();
    let e_max = eps[*order.last().unwrap()];
    if e_max > max {
        return Err(RasterError::EpsExceedsMargin { eps: e_max, max });
    }
    let (w, h) = (field.grid.width, field.grid.height);
    let idx = threshold_index(&field.sq, &t);
    Ok(unsort(&order, accumulate(&idx, w, [0, w - 1, 0, h - 1], t.len()), field.grid.h))
}

/// Cells of a cover: the images f_σ(O) for the nodes σ below `start` whose
/// cumulative ratio first drops to `t` or below.
#[derive(Clone, Copy)]
pub struct Cover<'a> {
    pub tree: &'a LabeledTree,
    pub start: NodeRef,
    pub t: f64,
    pub open_set: &'a OpenSetSpec,
}

impl<'a> Cover<'a> {
    pub fn new(tree: &'a LabeledTree, start: NodeRef, t: f64, open_set: &'a OpenSetSpec) -> Self {
        Cover {
            tree,
            start,
            t,
            open_set,
        }
    }

    /// Bounding box of f_start(O), which holds every cell.
    pub fn bbox(&self) -> [f64; 4] {
        bbox(&apply_polygon(&self.tree.map_of(self.start), &self.open_set.polygon))
    }

    /// Visits every cell polygon whose image may meet `rect` (expanded by
    /// `pad`).
    pub fn for_each_cell<F: FnMut(&[Point])>(&self, rect: [f64; 4], pad: f64, mut f: F) -> Result<(), TreeError> {
        let poly = &self.open_set.polygon;
        let b = bbox(poly);
        let c0 = [(b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0];
        let rho = poly
            .iter()
            .map(|p| ((p[0] - c0[0]).powi(2) + (p[1] - c0[1]).powi(2)).sqrt())
            .fold(0.0, f64::max);
        let mut buf: Vec<Point> = Vec::with_capacity(poly.len());
        self.tree.walk_stop(
            self.start,
            self.t,
            |s: &Similarity| {
                let c = s.apply(c0);
                let dx = (rect[0] - c[0]).max(c[0] - rect[2]).max(0.0);
                let dy = (rect[1] - c[1]).max(c[1] - rect[3]).max(0.0);
                (dx * dx + dy * dy).sqrt() > s.ratio * rho + pad
            },
            |_, s| {
                buf.clear();
                buf.extend(poly.iter().map(|&p| s.apply(p)));
                f(&buf);
            },
        )
    }
}

/// Curvature triples of the parallel sets of a cover at every `eps`, swept
/// over the virtual lattice in tiles of `tile` pixels. Each tile carries a
/// margin of ⌈ε_max/h⌉ + 2 pixels, so thresholded distances are exact.
pub fn cover_profile_tiled(cover: &Cover, h: f64, eps: &[f64], tile: usize) -> Result<Vec<CurvatureTriple>, RasterError> {
    if !(h > 0.0) || tile < 2 {
        return Err(RasterError::Invalid(format!("h = {h}, tile = {tile}")));
    }
    let (order, t) = sorted_thresholds(eps, h)?;
    let e_max = eps[*order.last().unwrap()];
    let grid = Grid::covering(cover.bbox(), e_max + 3.0 * h, h);
    if grid.width > MAX_VIRTUAL_SIDE || grid.height > MAX_VIRTUAL_SIDE {
        return Err(RasterError::GridTooLarge {
            width: grid.width,
            height: grid.height,
            cap: MAX_VIRTUAL_SIDE,
        });
    }
    let m = (e_max / h).ceil() as usize + 2;
    let (ww, wh) = (grid.width - 1, grid.height - 1);
    let tiles: Vec<(usize, usize)> = (0..wh.div_ceil(tile))
        .flat_map(|ty| (0..ww.div_ceil(tile)).map(move |tx| (tx * tile, ty * tile)))
        .collect();
    let per_tile: Result<Vec<Option<Vec<Counts>>>, RasterError> = tiles
        .par_iter()
        .map(|&(cx, cy)| {
            let cx1 = (cx + tile).min(ww);
            let cy1 = (cy + tile).min(wh);
            let lx0 = cx.saturating_sub(m);
            let ly0 = cy.saturating_sub(m);
            let lx1 = (cx1 + 1 + m).min(grid.width);
            let ly1 = (cy1 + 1 + m).min(grid.height);
            let local = grid.window(lx0, ly0, lx1 - lx0, ly1 - ly0);
            let mut bits = vec![false; local.len()];
            let mut any = false;
            cover.for_each_cell(local.extent(), 2.0 * h, |p| {
                any |= fill_polygon(&mut bits, &local, p);
            })?;
            if !any {
                return Ok(None);
            }
            let sq = edt_sq(&bits, local.width, local.height);
            drop(bits);
            let idx = threshold_index(&sq, &t);
            let core = [cx - lx0, cx1 - lx0, cy - ly0, cy1 - ly0];
            Ok(Some(accumulate(&idx, local.width, core, t.len())))
        })
        .collect();
    let mut total = vec![Counts::default(); t.len()];
    for c in per_tile?.into_iter().flatten() {
        for (a, b) in total.iter_mut().zip(&c) {
            a.add(b);
        }
    }
    Ok(unsort(&order, total, h))
}

pub fn cover_profile(cover: &Cover, h: f64, eps: &[f64]) -> Result<Vec<CurvatureTriple>, RasterError> {
    cover_profile_tiled(cover, h, eps, TILE)
}

/// Rasterizes a cover onto one materialized grid with `margin` of empty
/// space around f_start(O).
pub fn rasterize_cells(cover: &Cover, h: f64, margin: f64) -> Result<BinaryMask, RasterError> {
    let grid = Grid::covering(cover.bbox(), margin + 2.0 * h, h);
    if grid.width > MAX_GRID_SIDE || grid.height > MAX_GRID_SIDE {
        return Err(RasterError::GridTooLarge {
            width: grid.width,
            height: grid.height,
            cap: MAX_GRID_SIDE,
        });
    }
    let mut mask = BinaryMask::empty(grid);
    cover.for_each_cell(grid.extent(), 2.0 * h, |p| {
        mask.fill(p);
    })?;
    Ok(mask)
}

/// ∪ closure(O_σ) over a Markov stop, at a pixel size no larger than a
/// quarter of the stop scale.
pub fn rasterize_cover(tree: &LabeledTree, stop: &MarkovStop, o: &OpenSetSpec, h: f64) -> Result<BinaryMask, RasterError> {
    let required = stop.r / 4.0;
    if !(h > 0.0) || h > required {
        return Err(RasterError::TooCoarse { h, required });
    }
    let b = o.bbox();
    let grid = Grid::covering(b, 2.0 * h, h);
    if grid.width > MAX_GRID_SIDE || grid.height > MAX_GRID_SIDE {
        return Err(RasterError::GridTooLarge {
            width: grid.width,
            height: grid.height,
            cap: MAX_GRID_SIDE,
        });
    }
    let mut mask = BinaryMask::empty(grid);
    for e in &stop.entries {
        mask.fill(&apply_polygon(&tree.map_of(e.node), &o.polygon));
    }
    Ok(mask)
}

/// Occupied pixels as rectangles; runs in a row are merged, then identical
/// runs in consecutive rows.
fn rectangles(mask: &BinaryMask) -> Vec<(usize, usize, usize, usize)> {
    let (w, h) = (mask.width(), mask.height());
    let mut done = Vec::new();
    let mut open: Vec<(usize, usize, usize)> = Vec::new(); // (x0, x1, first row)
    for j in 0..=h {
        let mut runs = Vec::new();
        if j < h {
            let mut i = 0;
            while i < w {
                if mask.get(i, j) {
                    let s = i;
                    while i < w && mask.get(i, j) {
                        i += 1;
                    }
                    runs.push((s, i));
                } else {
                    i += 1;
                }
            }
        }
        let mut next = Vec::new();
        for (x0, x1, j0) in open.drain(..) {
            if let Some(p) = runs.iter().position(|&r| r == (x0, x1)) {
                runs.remove(p);
                next.push((x0, x1, j0));
            } else {
                done.push((x0, j0, x1 - x0, j - j0));
            }
        }
        next.extend(runs.into_iter().map(|(a, b)| (a, b, j)));
        open = next;
    }
    done
}

pub fn render_svg(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<(), RasterError> {
    let (w, h) = (mask.width(), mask.height());
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {w} {h}\" width=\"{w}\" height=\"{h}\" shape-rendering=\"crispEdges\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n<g fill=\"black\">\n"
    ));
    for (x, y, rw, rh) in rectangles(mask) {
        // flip: row 0 is the bottom of the image
        s.push_str(&format!(
            "<rect x=\"{x}\" y=\"{}\" width=\"{rw}\" height=\"{rh}\"/>\n",
            h - y - rh
        ));
    }
    s.push_str("</g>\n</svg>\n");
    std::fs::write(path, s)?;
    Ok(())
}

pub fn write_pgm(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<(), RasterError> {
    let (w, h) = (mask.width(), mask.height());
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{w} {h}\n255\n")?;
    for j in (0..h).rev() {
        let row: Vec<u8> = (0..w).map(|i| if mask.get(i, j) { 255 } else { 0 }).collect();
        f.write_all(&row)?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codetree::{markov_stop, sample_tree, ModelKind, ModelSpec, Rifs, StopRule, TreeModel};
    use crate::simgeom::{cutoff_r, Similarity};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use std::sync::Arc;

    fn grid(b: [f64; 4], pad: f64, h: f64) -> Grid {
        Grid::covering(b, pad, h)
    }

    fn point_mask(h: f64, pad: f64) -> BinaryMask {
        let g = grid([0.0, 0.0, 0.0, 0.0], pad, h);
        let mut m = BinaryMask::empty(g);
        m.set(g.width / 2, g.height / 2, true);
        m
    }

    fn disk_poly(c: Point, r: f64, n: usize, phase: f64) -> Vec<Point> {
        (0..n)
            .map(|k| {
                let a = phase + 2.0 * PI * k as f64 / n as f64;
                [c[0] + r * a.cos(), c[1] + r * a.sin()]
            })
            .collect()
    }

    fn brute_sq(bits: &[bool], w: usize, h: usize) -> Vec<u32> {
        let occ: Vec<(i64, i64)> = (0..w * h).filter(|&p| bits[p]).map(|p| ((p % w) as i64, (p / w) as i64)).collect();
        (0..w * h)
            .map(|p| {
                let (x, y) = ((p % w) as i64, (p / w) as i64);
                occ.iter()
                    .map(|&(a, b)| ((x - a).pow(2) + (y - b).pow(2)) as u32)
                    .min()
                    .unwrap_or(u32::MAX)
            })
            .collect()
    }

    fn gasket() -> Arc<TreeModel> {
        let s3 = 3f64.sqrt();
        let g = Rifs::new(vec![
            Similarity::scaling(0.5, [0.0, 0.0]),
            Similarity::scaling(0.5, [0.5, 0.0]),
            Similarity::scaling(0.5, [0.25, s3 / 4.0]),
        ]);
        Arc::new(
            TreeModel::new(ModelSpec {
                kind: ModelKind::Recursive,
                labels: vec![g],
                probs: vec![1.0],
                v: None,
                pinned: None,
                transition: None,
            })
            .unwrap(),
        )
    }

    #[test]
    fn pythagorean_offset() {
        let m = point_mask(0.1, 1.0);
        let f = distance_transform(&m).unwrap();
        let (ci, cj) = (m.width() / 2, m.height() / 2);
        assert!((f.value(ci + 3, cj + 4) - 0.5).abs() < 1e-12);
        assert_eq!(f.sq[(cj + 4) * m.width() + ci + 3], 25);
    }

    #[test]
    fn full_and_empty_masks() {
        let g = grid([0.0, 0.0, 1.0, 1.0], 0.0, 0.1);
        let mut m = BinaryMask::empty(g);
        assert!(matches!(distance_transform(&m), Err(RasterError::EmptyMask)));
        m.bits.iter_mut().for_each(|b| *b = true);
        assert!(distance_transform(&m).unwrap().sq.iter().all(|&s| s == 0));
    }

    #[test]
    fn two_points_exhaustive() {
        let (w, h) = (64, 64);
        let mut bits = vec![false; w * h];
        bits[5 * w + 7] = true;
        bits[50 * w + 41] = true;
        assert_eq!(edt_sq(&bits, w, h), brute_sq(&bits, w, h));
    }

    #[test]
    fn random_masks_match_brute_force() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(11);
        for k in 0..30 {
            let (w, h) = (32, 32);
            let p = [0.01, 0.05, 0.3, 0.8][k % 4];
            let bits: Vec<bool> = (0..w * h).map(|_| rng.random::<f64>() < p).collect();
            assert_eq!(edt_sq(&bits, w, h), brute_sq(&bits, w, h));
        }
        let bits: Vec<bool> = (0..17 * 5).map(|p| p == 40).collect();
        assert_eq!(edt_sq(&bits, 17, 5), brute_sq(&bits, 17, 5));
    }

    #[test]
    fn parallel_set_of_point_is_disk() {
        let f = distance_transform(&point_mask(0.001, 0.32)).unwrap();
        assert_eq!(parallel_set(&f, 0.0).unwrap().count(), 1);
        let a = parallel_set(&f, 0.3).unwrap().area();
        assert!((a / (PI * 0.09) - 1.0).abs() < 0.01);
        assert!(matches!(parallel_set(&f, 0.4), Err(RasterError::EpsExceedsMargin { .. })));
    }

    #[test]
    fn stadium_area() {
        let h = 0.001;
        let g = grid([0.0, 0.0, 1.0, 0.0], 0.25, h);
        let mut m = BinaryMask::empty(g);
        let j = (-g.y0) as usize;
        for i in 0..g.width {
            let x = g.center(i, j)[0];
            if (0.0..=1.0).contains(&x) {
                m.set(i, j, true);
            }
        }
        let f = distance_transform(&m).unwrap();
        let p = parallel_set(&f, 0.2).unwrap();
        let target = 0.4 + 0.04 * PI;
        assert!((p.area() / target - 1.0).abs() < 0.01);
    }

    #[test]
    fn disk_functionals() {
        let h = 1.0 / 2048.0;
        let f = distance_transform(&point_mask(h, 0.27)).unwrap();
        let d = parallel_set(&f, 0.25).unwrap();
        let t = curvature_triple(&d).unwrap();
        assert!((t.c2 / (PI * 0.0625) - 1.0).abs() < 0.01);
        assert!((t.c1 / (PI * 0.25) - 1.0).abs() < 0.02);
        assert_eq!(t.c0, 1.0);
        let prof = curvature_profile(&f, &[0.25, 0.1]).unwrap();
        assert_eq!(prof[0], t);
        assert!((prof[1].c1 / (PI * 0.1) - 1.0).abs() < 0.02);
    }

    #[test]
    fn annulus_and_two_disks() {
        let h = 1.0 / 512.0;
        let g = grid([-0.5, -0.5, 0.5, 0.5], 0.05, h);
        let mut ring = BinaryMask::empty(g);
        for j in 0..g.height {
            for i in 0..g.width {
                let c = g.center(i, j);
                let r = (c[0] * c[0] + c[1] * c[1]).sqrt();
                ring.set(i, j, (0.2..=0.4).contains(&r));
            }
        }
        assert_eq!(curvature_triple(&ring).unwrap().c0, 0.0);
        let mut two = BinaryMask::empty(g);
        two.fill(&disk_poly([-0.25, 0.0], 0.2, 720, 0.0));
        two.fill(&disk_poly([0.3, 0.1], 0.1, 720, 0.0));
        let t = curvature_triple(&two).unwrap();
        assert_eq!(t.c0, 2.0);
        assert!((t.c2 / (PI * 0.05) - 1.0).abs() < 0.01);
    }

    #[test]
    fn border_contact_is_an_error() {
        let g = grid([0.0, 0.0, 1.0, 1.0], 0.0, 0.1);
        let mut m = BinaryMask::empty(g);
        m.set(0, 3, true);
        assert!(matches!(curvature_triple(&m), Err(RasterError::BorderContact)));
    }

    #[test]
    fn homogeneity_and_rotation() {
        let at = |scale: f64, phase: f64| {
            let h = scale / 1024.0;
            let g = grid([-scale, -scale, scale, scale], 4.0 * h, h);
            let mut m = BinaryMask::empty(g);
            m.fill(&disk_poly([0.013 * scale, 0.0], 0.3 * scale, 2048, phase));
            curvature_triple(&m).unwrap()
        };
        let a = at(1.0, 0.0);
        let b = at(2.0, 0.0);
        assert!((b.c2 / a.c2 / 4.0 - 1.0).abs() < 0.02);
        assert!((b.c1 / a.c1 / 2.0 - 1.0).abs() < 0.02);
        assert_eq!(a.c0, b.c0);
        let r = at(1.0, PI / 7.0);
        assert!((r.c2 / a.c2 - 1.0).abs() < 0.02);
        assert!((r.c1 / a.c1 - 1.0).abs() < 0.02);
        assert_eq!(r.c0, a.c0);
    }

    // 4-connected foreground components minus 8-connected holes.
    fn brute_euler(m: &BinaryMask) -> i64 {
        let (w, h) = (m.width() as i64, m.height() as i64);
        let comps = |fg: bool, nb: &[(i64, i64)]| -> i64 {
            let mut seen = vec![false; (w * h) as usize];
            let mut n = 0;
            for s in 0..w * h {
                if seen[s as usize] || m.bits[s as usize] != fg {
                    continue;
                }
                n += 1;
                let mut st = vec![s];
                seen[s as usize] = true;
                while let Some(p) = st.pop() {
                    let (x, y) = (p % w, p / w);
                    for (dx, dy) in nb {
                        let (a, b) = (x + dx, y + dy);
                        if a < 0 || b < 0 || a >= w || b >= h {
                            continue;
                        }
                        let q = (b * w + a) as usize;
                        if !seen[q] && m.bits[q] == fg {
                            seen[q] = true;
                            st.push(q as i64);
                        }
                    }
                }
            }
            n
        };
        let n4 = [(1, 0), (-1, 0), (0, 1), (0, -1)];
        let n8 = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)];
        comps(true, &n4) - (comps(false, &n8) - 1)
    }

    #[test]
    fn euler_matches_components_minus_holes() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(5);
        let g = Grid {
            origin: [0.0, 0.0],
            h: 1.0,
            x0: 0,
            y0: 0,
            width: 66,
            height: 66,
        };
        for k in 0..40 {
            let p = 0.2 + 0.6 * (k as f64 / 40.0);
            let mut m = BinaryMask::empty(g);
            for j in 1..65 {
                for i in 1..65 {
                    m.set(i, j, rng.random::<f64>() < p);
                }
            }
            assert_eq!(counts(&m).unwrap().euler(), brute_euler(&m));
        }
    }

    #[test]
    fn single_cell_cover_is_the_open_set() {
        let model = gasket();
        let o = OpenSetSpec::unit_triangle();
        let big_r = cutoff_r(&o, 0.05);
        let t = sample_tree(&model, StopRule::Depth(0), 1);
        let stop = markov_stop(&t, big_r, big_r).unwrap();
        assert_eq!(stop.len(), 1);
        let h = 1.0 / 512.0;
        let m = rasterize_cover(&t, &stop, &o, h).unwrap();
        assert!((m.area() - o.area()).abs() <= 2.0 * h * o.perimeter());
        assert!(matches!(
            rasterize_cover(&t, &stop, &o, big_r),
            Err(RasterError::TooCoarse { .. })
        ));
    }

    #[test]
    fn gasket_level_area_and_disjointness() {
        let model = gasket();
        let o = OpenSetSpec::unit_triangle();
        let big_r = cutoff_r(&o, 0.05);
        for k in 1..=5 {
            let r = big_r * 0.5f64.powi(k);
            let t = sample_tree(&model, StopRule::Markov { r, big_r }, 3);
            let stop = markov_stop(&t, r, big_r).unwrap();
            assert_eq!(stop.len(), 3usize.pow(k as u32));
            let h = 1.0 / 2048.0;
            let m = rasterize_cover(&t, &stop, &o, h).unwrap();
            let target = 0.75f64.powi(k) * o.area();
            assert!((m.area() / target - 1.0).abs() < 0.03, "level {k}");
            let bound: f64 = stop
                .ratios()
                .iter()
                .map(|q| q * q * o.area() / (h * h) + 4.0 * q * o.perimeter() / h)
                .sum();
            assert!((m.count() as f64) <= bound);
        }
    }

    #[test]
    fn tiled_profile_equals_materialized() {
        let model = gasket();
        let o = OpenSetSpec::unit_triangle();
        let big_r = cutoff_r(&o, 0.05);
        let t = sample_tree(&model, StopRule::Depth(8), 0);
        let cover = Cover::new(&t, NodeRef::ROOT, 0.01 / big_r, &o);
        let h = 1.0 / 300.0;
        let eps = [0.02, 0.005, 0.0, 0.011, 0.03];
        let mask = rasterize_cells(&cover, h, 0.03 + h).unwrap();
        let want = curvature_profile(&distance_transform(&mask).unwrap(), &eps).unwrap();
        for tile in [37, 100, 1024] {
            assert_eq!(cover_profile_tiled(&cover, h, &eps, tile).unwrap(), want, "tile {tile}");
        }
        assert_eq!(want[2].c2, mask.area());
    }

    #[test]
    fn svg_and_pgm() {
        let dir = std::env::temp_dir().join(format!("fracurv-raster-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let g = grid([0.0, 0.0, 1.0, 1.0], 0.0, 0.1);
        let mut full = BinaryMask::empty(g);
        full.bits.iter_mut().for_each(|b| *b = true);
        assert_eq!(rectangles(&full).len(), 1);
        render_svg(&full, dir.join("full.svg")).unwrap();
        let s = std::fs::read_to_string(dir.join("full.svg")).unwrap();
        assert_eq!(s.matches("<rect").count(), 2);
        assert!(render_svg(&full, "").is_err());
        write_pgm(&full, dir.join("full.pgm")).unwrap();
        let b = std::fs::read(dir.join("full.pgm")).unwrap();
        assert!(b.starts_with(b"P5\n11 11\n255\n"));
        assert_eq!(b.len(), 13 + 121);
        let mut l = BinaryMask::empty(g);
        l.set(2, 2, true);
        l.set(3, 2, true);
        l.set(2, 3, true);
        let area: usize = rectangles(&l).iter().map(|r| r.2 * r.3).sum();
        assert_eq!(area, 3);
        std::fs::remove_dir_all(&dir).ok();
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn edt_exact_on_random_masks(w in 1usize..20, h in 1usize..20, seed in any::<u64>(), p in 0.0f64..1.0) {
            let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
            let bits: Vec<bool> = (0..w * h).map(|_| rng.random::<f64>() < p).collect();
            prop_assert_eq!(edt_sq(&bits, w, h), brute_sq(&bits, w, h));
        }

        #[test]
        fn parallel_sets_are_nested(seed in any::<u64>(), e1 in 0.0f64..3.0, e2 in 0.0f64..3.0) {
            let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
            let g = Grid { origin: [0.0, 0.0], h: 1.0, x0: 0, y0: 0, width: 24, height: 24 };
            let mut m = BinaryMask::empty(g);
            for j in 8..16 {
                for i in 8..16 {
                    m.set(i, j, rng.random::<f64>() < 0.2);
                }
            }
            m.set(12, 12, true);
            let f = distance_transform(&m).unwrap();
            let (a, b) = (e1.min(e2), e1.max(e2));
            let pa = parallel_set(&f, a).unwrap();
            let pb = parallel_set(&f, b).unwrap();
            prop_assert!(pa.bits.iter().zip(&pb.bits).all(|(x, y)| !*x || *y));
        }
    }
}
