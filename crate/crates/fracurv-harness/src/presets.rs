//! Shipped model configurations.

use crate::config::{EpsGrid, RGrid, RunConfig, Task, TaskOptions};
use fracurv::codetree::{ModelKind, ModelSpec, Rifs};
use fracurv::simgeom::{OpenSetSpec, Similarity};
use std::f64::consts::PI;

pub const PRESETS: [&str; 5] = [
    "gasket-recursive",
    "gasket-dependent",
    "pinned-n2",
    "carpet-markov",
    "nonlattice-demo",
];

fn half(t: [f64; 2]) -> Similarity {
    Similarity::scaling(0.5, t)
}

pub fn gasket_g() -> Rifs {
    Rifs::new(vec![half([0.0, 0.0]), half([0.5, 0.0]), half([0.25, 3f64.sqrt() / 4.0])])
}

/// G plus a fourth map, half size and rotated by π/3, placed at (1/2, 0).
pub fn gasket_g_prime() -> Rifs {
    let mut m = gasket_g().maps;
    m.push(Similarity::new(0.5, PI / 3.0, false, [0.5, 0.0]));
    Rifs::new(m)
}

fn spec(kind: ModelKind, labels: Vec<Rifs>, probs: Vec<f64>) -> ModelSpec {
    ModelSpec {
        kind,
        labels,
        probs,
        v: None,
        pinned: None,
        transition: None,
    }
}

/// Quadrant maps of the unit square, 1 top-left .. 4 bottom-right.
fn quadrant(j: usize) -> Similarity {
    half([[0.0, 0.5], [0.5, 0.5], [0.0, 0.0], [0.5, 0.0]][j - 1])
}

fn model(name: &str) -> Option<(ModelSpec, OpenSetSpec)> {
    let tri = OpenSetSpec::unit_triangle();
    let sq = OpenSetSpec::unit_square();
    Some(match name {
        "gasket-recursive" => (spec(ModelKind::Recursive, vec![gasket_g()], vec![1.0]), tri),
        "gasket-dependent" => (
            spec(ModelKind::DependentGasket, vec![gasket_g(), gasket_g_prime()], vec![0.5, 0.5]),
            tri,
        ),
        "pinned-n2" => {
            let a = Rifs::new(vec![half([0.0, 0.0]), half([0.5, 0.5])]);
            let b = Rifs::new(vec![half([0.0, 0.5]), Similarity::scaling(0.25, [0.75, 0.0])]);
            let mut s = spec(ModelKind::Pinned, vec![a, b], vec![0.5, 0.5]);
            s.pinned = Some(vec![vec![1], vec![2, 1]]);
            (s, sq)
        }
        "carpet-markov" => {
            // label k keeps every quadrant except k
            let labels = (1..=4)
                .map(|k| Rifs::new((1..=4).filter(|&j| j != k).map(quadrant).collect()))
                .collect();
            let mut s = spec(ModelKind::MarkovCarpet, labels, vec![0.25; 4]);
            s.transition = Some(vec![
                vec![0.25; 4],
                vec![0.25; 4],
                vec![0.5, 0.25, 0.0, 0.25],
                vec![0.25; 4],
                vec![0.0, 0.25, 0.5, 0.25],
            ]);
            (s, sq)
        }
        "nonlattice-demo" => {
            let a = Rifs::new(vec![half([0.0, 0.0]), Similarity::scaling(1.0 / 3.0, [2.0 / 3.0, 2.0 / 3.0])]);
            let b = Rifs::new(vec![half([0.5, 0.0]), Similarity::scaling(1.0 / 3.0, [0.0, 2.0 / 3.0])]);
            (spec(ModelKind::Recursive, vec![a, b], vec![0.5, 0.5]), sq)
        }
        _ => return None,
    })
}

pub fn preset(name: &str) -> Result<RunConfig, String> {
    let (model, open_set) = model(name).ok_or_else(|| format!("unknown preset '{name}'; available: {}", PRESETS.join(", ")))?;
    Ok(RunConfig {
        name: name.to_string(),
        model,
        open_set,
        r_slack: 0.05,
        eps_grid: EpsGrid {
            min: 2f64.powi(-8),
            max: 2f64.powi(-3),
            per_octave: 8,
        },
        r_grid: RGrid {
            octaves: 8,
            per_octave: 8,
        },
        n_mc: 200,
        q: 0.05,
        h_ratio: 1.0 / 32.0,
        seed: 1,
        outputs: String::new(),
        tasks: vec![
            Task::Dimension,
            Task::StopMass,
            Task::MeanCurve,
            Task::Rk,
            Task::Limits,
            Task::VerifyA2,
            Task::Render,
        ],
        options: TaskOptions::default(),
    })
}
