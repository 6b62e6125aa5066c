use fracurv::codetree::{sample_tree, ModelKind, ModelSpec, NodeRef, Rifs, StopRule, TreeModel};
use fracurv::meanlimits::{geometric_grid, mean_curvature_curve, Resolution};
use fracurv::rasterlab::{cover_profile, Cover};
use fracurv::simgeom::{cutoff_r, OpenSetSpec, Similarity};
use proptest::prelude::*;
use std::sync::Arc;

/// Quadrants of the unit square; label 1 keeps three, label 2 all four.
fn percolation() -> Arc<TreeModel> {
    let q = [[0.0, 0.0], [0.5, 0.0], [0.0, 0.5], [0.5, 0.5]].map(|t| Similarity::scaling(0.5, t));
    Arc::new(
        TreeModel::new(ModelSpec {
            kind: ModelKind::Recursive,
            labels: vec![Rifs::new(q[..3].to_vec()), Rifs::new(q.to_vec())],
            probs: vec![0.5, 0.5],
            v: None,
            pinned: None,
            transition: None,
        })
        .unwrap(),
    )
}

#[test]
fn mean_volume_grows_with_eps() {
    let m = percolation();
    let o = OpenSetSpec::unit_square();
    let res = Resolution {
        q: 0.25,
        h_ratio: 1.0 / 16.0,
        big_r: cutoff_r(&o, 0.05),
    };
    let eps = geometric_grid(2f64.powi(-6), 2f64.powi(-2), 4);
    let c = mean_curvature_curve(&m, &o, &[2], &eps, 30, &res, 8).unwrap();
    for j in 1..eps.len() {
        // eps decreasing, so the volume must not increase beyond noise
        let slack = 2.0 * (c.stderr[j][2] + c.stderr[j - 1][2]);
        assert!(c.mean[j][2] <= c.mean[j - 1][2] + slack, "{} at {}", c.mean[j][2], eps[j]);
    }
}

#[test]
fn pieces_never_exceed_the_whole() {
    let m = percolation();
    let o = OpenSetSpec::unit_square();
    let big_r = cutoff_r(&o, 0.05);
    let eps = [0.1, 0.05];
    let h = 0.05 / 16.0;
    for seed in 0..5 {
        let t = sample_tree(&m, StopRule::Markov { r: 0.01, big_r }, seed);
        let whole = cover_profile(&Cover::new(&t, NodeRef::ROOT, 0.01 / big_r, &o), h, &eps).unwrap();
        for c in t.children(NodeRef::ROOT) {
            let part = cover_profile(&Cover::new(&t, c, 0.01 / big_r, &o), h, &eps).unwrap();
            for k in 0..eps.len() {
                assert!(part[k].c2 <= whole[k].c2 + 1e-12);
            }
        }
    }
}

proptest! {
    #[test]
    fn geometric_grid_shape(lo in 1e-4f64..0.5, span in 0.0f64..6.0, n in 1u32..12) {
        let hi = lo * 2f64.powf(span);
        let g = geometric_grid(lo, hi, n);
        prop_assert_eq!(g[0], hi);
        prop_assert!(g.windows(2).all(|w| w[0] > w[1]));
        prop_assert!(g[g.len() - 1] >= lo * (1.0 - 1e-9));
        // next point would fall below min
        prop_assert!(g[g.len() - 1] * 2f64.powf(-1.0 / n as f64) < lo * (1.0 + 1e-9));
        let step = 2f64.powf(-1.0 / n as f64);
        prop_assert!(g.windows(2).all(|w| (w[1] / w[0] / step - 1.0).abs() < 1e-9));
    }
}
