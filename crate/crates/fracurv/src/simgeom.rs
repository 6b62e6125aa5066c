//! Planar similarities, codes and the polygonal open set used for the
//! open set condition.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;

pub type Point = [f64; 2];
pub type Polygon = Vec<Point>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeomError {
    #[error("invalid open set: {0}")]
    InvalidOpenSet(String),
    #[error("unsupported open set: {0}")]
    Unsupported(String),
}

/// x ↦ t + ratio · Rot(rotation) · Refl x, where Refl = diag(1, -1) when
/// `reflect` is set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub ratio: f64,
    #[serde(default)]
    pub rotation: f64,
    #[serde(default)]
    pub reflect: bool,
    #[serde(default)]
    pub translation: Point,
}

impl Similarity {
    pub const IDENTITY: Similarity = Similarity {
        ratio: 1.0,
        rotation: 0.0,
        reflect: false,
        translation: [0.0, 0.0],
    };

    pub fn new(ratio: f64, rotation: f64, reflect: bool, translation: Point) -> Self {
        Similarity {
            ratio,
            rotation: normalize_angle(rotation),
            reflect,
            translation,
        }
    }

    /// Pure scaling followed by a shift.
    pub fn scaling(ratio: f64, translation: Point) -> Self {
        Self::new(ratio, 0.0, false, translation)
    }

    /// Linear part as a row-major 2x2 matrix.
    pub fn linear(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.rotation.sin_cos();
        let k = self.ratio;
        if self.reflect {
            [[k * c, k * s], [k * s, -k * c]]
        } else {
            [[k * c, -k * s], [k * s, k * c]]
        }
    }

    pub fn apply(&self, p: Point) -> Point {
        let m = self.linear();
        [
            m[0][0] * p[0] + m[0][1] * p[1] + self.translation[0],
            m[1][0] * p[0] + m[1][1] * p[1] + self.translation[1],
        ]
    }

    /// `self ∘ other`.
    pub fn then_inner(&self, other: &Similarity) -> Similarity {
        let rotation = if self.reflect {
            self.rotation - other.rotation
        } else {
            self.rotation + other.rotation
        };
        let t = self.apply(other.translation);
        Similarity {
            ratio: self.ratio * other.ratio,
            rotation: normalize_angle(rotation),
            reflect: self.reflect ^ other.reflect,
            translation: t,
        }
    }
}

fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// f_1 ∘ f_2 ∘ … ∘ f_n, the identity for an empty path.
pub fn compose(path: &[Similarity]) -> Similarity {
    path.iter()
        .fold(Similarity::IDENTITY, |acc, f| acc.then_inner(f))
}

pub fn apply_polygon(f: &Similarity, poly: &[Point]) -> Polygon {
    poly.iter().map(|&p| f.apply(p)).collect()
}

/// Finite word over {1, 2, …}; the empty word is the root.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct Code(pub Vec<u32>);

impl Code {
    pub fn root() -> Self {
        Code(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// σ|n
    pub fn prefix(&self, n: usize) -> Code {
        Code(self.0[..n.min(self.0.len())].to_vec())
    }

    pub fn child(&self, i: u32) -> Code {
        let mut v = self.0.clone();
        v.push(i);
        Code(v)
    }

    pub fn concat(&self, other: &Code) -> Code {
        let mut v = self.0.clone();
        v.extend_from_slice(&other.0);
        Code(v)
    }

    pub fn is_prefix_of(&self, other: &Code) -> bool {
        other.0.len() >= self.0.len() && other.0[..self.0.len()] == self.0[..]
    }
}

impl From<&[u32]> for Code {
    fn from(v: &[u32]) -> Self {
        Code(v.to_vec())
    }
}

impl fmt::Display for Code {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return write!(f, "∅");
        }
        let parts: Vec<String> = self.0.iter().map(|i| i.to_string()).collect();
        write!(f, "{}", parts.join("."))
    }
}

/// Polygon describing the open set O (interior of the counterclockwise
/// vertex list).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpenSetSpec {
    pub polygon: Polygon,
    pub diameter: f64,
}

impl OpenSetSpec {
    pub fn new(polygon: Polygon) -> Result<Self, GeomError> {
        validate_polygon(&polygon)?;
        let diameter = polygon_diameter(&polygon);
        Ok(OpenSetSpec { polygon, diameter })
    }

    pub fn unit_square() -> Self {
        Self::new(vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]).unwrap()
    }

    pub fn unit_triangle() -> Self {
        Self::new(vec![[0.0, 0.0], [1.0, 0.0], [0.5, 3f64.sqrt() / 2.0]]).unwrap()
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.polygon)
    }

    pub fn perimeter(&self) -> f64 {
        perimeter(&self.polygon)
    }

    pub fn bbox(&self) -> [f64; 4] {
        bbox(&self.polygon)
    }

    pub fn is_convex(&self) -> bool {
        is_convex(&self.polygon)
    }
}

impl<'de> Deserialize<'de> for OpenSetSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            polygon: Polygon,
        }
        let raw = Raw::deserialize(d)?;
        OpenSetSpec::new(raw.polygon).map_err(serde::de::Error::custom)
    }
}

pub fn signed_area(p: &[Point]) -> f64 {
    let n = p.len();
    let mut s = 0.0;
    for i in 0..n {
        let a = p[i];
        let b = p[(i + 1) % n];
        s += a[0] * b[1] - a[1] * b[0];
    }
    0.5 * s
}

pub fn perimeter(p: &[Point]) -> f64 {
    let n = p.len();
    (0..n).map(|i| dist(p[i], p[(i + 1) % n])).sum()
}

/// [xmin, ymin, xmax, ymax]
pub fn bbox(p: &[Point]) -> [f64; 4] {
    let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for q in p {
        b[0] = b[0].min(q[0]);
        b[1] = b[1].min(q[1]);
        b[2] = b[2].max(q[0]);
        b[3] = b[3].max(q[1]);
    }
    b
}

pub fn polygon_diameter(p: &[Point]) -> f64 {
    let mut d: f64 = 0.0;
    for i in 0..p.len() {
        for j in i + 1..p.len() {
            d = d.max(dist(p[i], p[j]));
        }
    }
    d
}

pub fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

pub fn is_convex(p: &[Point]) -> bool {
    let n = p.len();
    if n < 3 {
        return false;
    }
    let sign = signed_area(p).signum();
    (0..n).all(|i| cross(p[i], p[(i + 1) % n], p[(i + 2) % n]) * sign >= -1e-12)
}

fn segments_cross(a: Point, b: Point, c: Point, d: Point) -> bool {
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    let on = |p: Point, q: Point, r: Point, v: f64| {
        v == 0.0
            && r[0] >= p[0].min(q[0])
            && r[0] <= p[0].max(q[0])
            && r[1] >= p[1].min(q[1])
            && r[1] <= p[1].max(q[1])
    };
    on(c, d, a, d1) || on(c, d, b, d2) || on(a, b, c, d3) || on(a, b, d, d4)
}

fn validate_polygon(p: &[Point]) -> Result<(), GeomError> {
    if p.len() < 3 {
        return Err(GeomError::InvalidOpenSet(format!(
            "polygon needs at least 3 vertices, got {}",
            p.len()
        )));
    }
    if p.iter().any(|q| !q[0].is_finite() || !q[1].is_finite()) {
        return Err(GeomError::InvalidOpenSet("non-finite vertex".into()));
    }
    let a = signed_area(p);
    if a <= 0.0 {
        return Err(GeomError::InvalidOpenSet(
            "polygon must be counterclockwise with positive area".into(),
        ));
    }
    let n = p.len();
    for i in 0..n {
        for j in i + 1..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                continue;
            }
            if segments_cross(p[i], p[(i + 1) % n], p[j], p[(j + 1) % n]) {
                return Err(GeomError::InvalidOpenSet("polygon is not simple".into()));
            }
        }
    }
    Ok(())
}

/// Outcome of the open set check for one realized IFS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct UoscReport {
    pub contained: bool,
    pub pairwise_disjoint: bool,
}

/// Containment f_i(O) ⊂ closure(O) and disjointness of the open images,
/// both up to `tol`. Only convex O is supported.
pub fn check_uosc(ifs: &[Similarity], o: &OpenSetSpec, tol: f64) -> Result<UoscReport, GeomError> {
    validate_polygon(&o.polygon)?;
    if !o.is_convex() {
        return Err(GeomError::Unsupported(
            "open set check requires a convex polygon".into(),
        ));
    }
    let images: Vec<Polygon> = ifs.iter().map(|f| apply_polygon(f, &o.polygon)).collect();
    let contained = images
        .iter()
        .all(|img| img.iter().all(|&q| convex_signed_depth(&o.polygon, q) >= -tol));
    let mut pairwise_disjoint = true;
    'outer: for i in 0..images.len() {
        for j in i + 1..images.len() {
            if !separated(&images[i], &images[j], tol) {
                pairwise_disjoint = false;
                break 'outer;
            }
        }
    }
    Ok(UoscReport {
        contained,
        pairwise_disjoint,
    })
}

/// Minimum over edges of the signed distance of `q` to the edge lines of a
/// counterclockwise convex polygon; positive inside.
pub fn convex_signed_depth(poly: &[Point], q: Point) -> f64 {
    let n = poly.len();
    let mut m = f64::INFINITY;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        let len = dist(a, b);
        m = m.min(cross(a, b, q) / len);
    }
    m
}

/// Separating axis test for convex polygons of either orientation: true if
/// some edge normal gives projections overlapping by at most `tol`.
fn separated(p: &[Point], q: &[Point], tol: f64) -> bool {
    for poly in [p, q] {
        let n = poly.len();
        for i in 0..n {
            let a = poly[i];
            let b = poly[(i + 1) % n];
            let len = dist(a, b);
            if len == 0.0 {
                continue;
            }
            let ax = [(a[1] - b[1]) / len, (b[0] - a[0]) / len];
            let proj = |v: &[Point]| {
                v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), z| {
                    let s = z[0] * ax[0] + z[1] * ax[1];
                    (lo.min(s), hi.max(s))
                })
            };
            let (plo, phi) = proj(p);
            let (qlo, qhi) = proj(q);
            if phi.min(qhi) - plo.max(qlo) <= tol {
                return true;
            }
        }
    }
    false
}

/// R = √2·|O|·(1 + slack); slack is raised to at least 1e-6 so that R > √2·|O|.
pub fn cutoff_r(o: &OpenSetSpec, slack: f64) -> f64 {
    2f64.sqrt() * o.diameter * (1.0 + slack.max(1e-6))
}

/// Distance from `q` to the segment [a, b].
pub fn point_segment_dist(q: Point, a: Point, b: Point) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let l2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if l2 == 0.0 {
        0.0
    } else {
        (((q[0] - a[0]) * ab[0] + (q[1] - a[1]) * ab[1]) / l2).clamp(0.0, 1.0)
    };
    dist(q, [a[0] + t * ab[0], a[1] + t * ab[1]])
}

/// Euclidean distance between two closed polygons (0 if they intersect).
pub fn polygon_distance(p: &[Point], q: &[Point]) -> f64 {
    if point_in_polygon(p, q[0]) || point_in_polygon(q, p[0]) {
        return 0.0;
    }
    let mut d = f64::INFINITY;
    for (x, y) in [(p, q), (q, p)] {
        let n = y.len();
        for &v in x {
            for j in 0..n {
                d = d.min(point_segment_dist(v, y[j], y[(j + 1) % n]));
            }
        }
    }
    let (np, nq) = (p.len(), q.len());
    for i in 0..np {
        for j in 0..nq {
            if segments_cross(p[i], p[(i + 1) % np], q[j], q[(j + 1) % nq]) {
                return 0.0;
            }
        }
    }
    d
}

/// Even-odd point-in-polygon test (closed boundary counts as inside only
/// approximately).
pub fn point_in_polygon(poly: &[Point], q: Point) -> bool {
    let n = poly.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > q[1]) != (b[1] > q[1]) {
            let x = a[0] + (q[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if q[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: Point, b: Point, tol: f64) -> bool {
        dist(a, b) <= tol
    }

    fn g(t: Point) -> Similarity {
        Similarity::scaling(0.5, t)
    }

    fn gasket_g() -> Vec<Similarity> {
        vec![g([0.0, 0.0]), g([0.5, 0.0]), g([0.25, 3f64.sqrt() / 4.0])]
    }

    fn g4() -> Similarity {
        Similarity::new(0.5, PI / 3.0, false, [0.5, 0.0])
    }

    #[test]
    fn compose_empty_is_identity() {
        let id = compose(&[]);
        assert_eq!(id.ratio, 1.0);
        assert!(close(id.apply([0.3, -2.0]), [0.3, -2.0], 0.0));
    }

    #[test]
    fn compose_two_halvings() {
        let h = g([0.0, 0.0]);
        let f = compose(&[h, h]);
        assert!((f.ratio - 0.25).abs() < 1e-15);
        assert!(close(f.apply([1.0, 1.0]), [0.25, 0.25], 1e-15));
    }

    #[test]
    fn compose_order_is_outer_first() {
        let f = compose(&[g([0.0, 0.0]), g([0.5, 0.0])]);
        assert!((f.ratio - 0.25).abs() < 1e-15);
        assert!(close(f.translation, [0.25, 0.0], 1e-15));
    }

    #[test]
    fn g4_maps_triangle_to_middle() {
        let t = OpenSetSpec::unit_triangle();
        let img = apply_polygon(&g4(), &t.polygon);
        let h = 3f64.sqrt() / 4.0;
        assert!(close(img[0], [0.5, 0.0], 1e-12));
        assert!(close(img[1], [0.75, h], 1e-12));
        assert!(close(img[2], [0.25, h], 1e-12));
    }

    #[test]
    fn scaling_maps_unit_square() {
        let sq = OpenSetSpec::unit_square();
        let img = apply_polygon(&g([0.0, 0.0]), &sq.polygon);
        assert_eq!(bbox(&img), [0.0, 0.0, 0.5, 0.5]);
        let same = apply_polygon(&Similarity::IDENTITY, &sq.polygon);
        assert_eq!(same, sq.polygon);
    }

    #[test]
    fn reflection_flips_orientation() {
        let sq = OpenSetSpec::unit_square();
        let f = Similarity::new(0.3, 0.4, true, [0.1, 0.2]);
        assert!(signed_area(&apply_polygon(&f, &sq.polygon)) < 0.0);
        let f = Similarity::new(0.3, 0.4, false, [0.1, 0.2]);
        assert!(signed_area(&apply_polygon(&f, &sq.polygon)) > 0.0);
    }

    #[test]
    fn uosc_gasket_and_g_prime() {
        let t = OpenSetSpec::unit_triangle();
        let tol = 1e-9 * t.diameter;
        let r = check_uosc(&gasket_g(), &t, tol).unwrap();
        assert!(r.contained && r.pairwise_disjoint);
        let mut gp = gasket_g();
        gp.push(g4());
        let r = check_uosc(&gp, &t, tol).unwrap();
        assert!(r.contained && r.pairwise_disjoint);
    }

    #[test]
    fn uosc_identical_maps_overlap() {
        let t = OpenSetSpec::unit_triangle();
        let r = check_uosc(&[g([0.0, 0.0]), g([0.0, 0.0])], &t, 1e-9).unwrap();
        assert_eq!(
            r,
            UoscReport {
                contained: true,
                pairwise_disjoint: false
            }
        );
    }

    #[test]
    fn uosc_detects_escape() {
        let sq = OpenSetSpec::unit_square();
        let r = check_uosc(&[g([0.6, 0.0])], &sq, 1e-9).unwrap();
        assert!(!r.contained);
    }

    #[test]
    fn degenerate_open_sets_rejected() {
        assert!(OpenSetSpec::new(vec![[0.0, 0.0], [1.0, 0.0]]).is_err());
        assert!(OpenSetSpec::new(vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]).is_err());
        // clockwise
        assert!(OpenSetSpec::new(vec![[0.0, 0.0], [0.0, 1.0], [1.0, 0.0]]).is_err());
        // bow tie
        assert!(OpenSetSpec::new(vec![[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]]).is_err());
    }

    #[test]
    fn cutoff_values() {
        let t = OpenSetSpec::unit_triangle();
        assert!((cutoff_r(&t, 0.05) - 1.4849242404917498).abs() < 1e-12);
        let big = OpenSetSpec::new(vec![[0.0, 0.0], [2.0, 0.0], [1.0, 3f64.sqrt()]]).unwrap();
        assert!((cutoff_r(&big, 0.05) - 2.9698484809834995).abs() < 1e-12);
        let r0 = cutoff_r(&t, 0.0);
        assert!(r0 > 2f64.sqrt() && r0 <= 2f64.sqrt() * (1.0 + 1e-6) + 1e-15);
    }

    #[test]
    fn polygon_distance_basics() {
        let a = vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let b: Vec<Point> = a.iter().map(|p| [p[0] + 3.0, p[1]]).collect();
        assert!((polygon_distance(&a, &b) - 2.0).abs() < 1e-12);
        let c: Vec<Point> = a.iter().map(|p| [p[0] + 0.5, p[1] + 0.5]).collect();
        assert_eq!(polygon_distance(&a, &c), 0.0);
    }

    fn arb_sim() -> impl Strategy<Value = Similarity> {
        (0.05f64..0.95, -4.0f64..4.0, any::<bool>(), -3.0f64..3.0, -3.0f64..3.0)
            .prop_map(|(r, a, f, x, y)| Similarity::new(r, a, f, [x, y]))
    }

    proptest! {
        #[test]
        fn similarity_scales_distances(f in arb_sim(), p in prop::array::uniform4(-5.0f64..5.0)) {
            let (x, y) = ([p[0], p[1]], [p[2], p[3]]);
            let lhs = dist(f.apply(x), f.apply(y));
            prop_assert!((lhs - f.ratio * dist(x, y)).abs() < 1e-12);
        }

        #[test]
        fn compose_ratio_is_product(path in prop::collection::vec(arb_sim(), 0..30)) {
            let c = compose(&path);
            let prod: f64 = path.iter().map(|s| s.ratio).product();
            prop_assert!((c.ratio - prod).abs() <= 1e-12 * prod.max(1e-300) + 1e-300);
        }

        #[test]
        fn compose_acts_like_nested_application(path in prop::collection::vec(arb_sim(), 1..12)) {
            let poly = OpenSetSpec::unit_triangle().polygon;
            let whole = apply_polygon(&compose(&path), &poly);
            let inner = apply_polygon(&compose(&path[1..]), &poly);
            let nested = apply_polygon(&path[0], &inner);
            for (a, b) in whole.iter().zip(&nested) {
                prop_assert!(dist(*a, *b) < 1e-9);
            }
        }
    }
}
