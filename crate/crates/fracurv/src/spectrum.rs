//! Scaling exponent D, the mean η of the logarithmic ratio measure,
//! lattice classification and the stop-mass identity.

use crate::codetree::{enumerate_trees, markov_stop, sample_tree, NodeRef, StopRule, TreeError, TreeModel};
use crate::rng::replicate_seed;
use rayon::prelude::*;
use serde::Serialize;
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SpectrumError {
    #[error("model error: mean number of maps is {0}, must exceed 1")]
    Subcritical(f64),
    #[error("invalid ratio law: {0}")]
    InvalidLaw(String),
    #[error("at least 100 replicates are needed, got {0}")]
    TooFewReplicates(usize),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

/// Finitely supported law of the ratio vector (r_1, …, r_N).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioLaw {
    pub atoms: Vec<(Vec<f64>, f64)>,
}

impl RatioLaw {
    pub fn new(atoms: Vec<(Vec<f64>, f64)>) -> Result<Self, SpectrumError> {
        let total: f64 = atoms.iter().map(|a| a.1).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(SpectrumError::InvalidLaw(format!("probabilities sum to {total}")));
        }
        for (rs, p) in &atoms {
            if *p < 0.0 || rs.is_empty() || rs.iter().any(|&r| !(r > 0.0 && r < 1.0)) {
                return Err(SpectrumError::InvalidLaw("ratios must lie in (0,1)".into()));
            }
        }
        Ok(RatioLaw { atoms })
    }

    pub fn from_model(model: &TreeModel) -> Self {
        let atoms = model
            .labels()
            .iter()
            .zip(&model.spec.probs)
            .filter(|(_, &p)| p > 0.0)
            .map(|(l, &p)| (l.maps.iter().map(|m| m.ratio).collect(), p))
            .collect();
        RatioLaw { atoms }
    }

    pub fn mean_n(&self) -> f64 {
        self.atoms.iter().map(|(r, p)| p * r.len() as f64).sum()
    }

    /// φ(s) = E Σ r_i^s − 1
    pub fn phi(&self, s: f64) -> f64 {
        self.atoms
            .iter()
            .map(|(rs, p)| p * rs.iter().map(|r| r.powf(s)).sum::<f64>())
            .sum::<f64>()
            - 1.0
    }

    fn dphi(&self, s: f64) -> f64 {
        self.atoms
            .iter()
            .map(|(rs, p)| p * rs.iter().map(|r| r.ln() * r.powf(s)).sum::<f64>())
            .sum()
    }

    fn support_logs(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self
            .atoms
            .iter()
            .filter(|a| a.1 > 0.0)
            .flat_map(|(rs, _)| rs.iter().map(|r| -r.ln()))
            .collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v.dedup_by(|a, b| (*a - *b).abs() <= 1e-15 * b.abs());
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectrumResult {
    #[serde(rename = "D")]
    pub d: f64,
    pub eta: f64,
    pub lattice_c: Option<f64>,
    pub tol: f64,
}

fn bisect<F: Fn(f64) -> f64>(f: F, tol: f64) -> f64 {
    // f is decreasing with f(0) > 0.
    let mut hi = 1.0;
    while f(hi) >= 0.0 {
        hi *= 2.0;
        if hi > 1e6 {
            break;
        }
    }
    let mut lo = 0.0;
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Root of E Σ r_i^D = 1.
pub fn solve_dimension(law: &RatioLaw, tol: f64) -> Result<f64, SpectrumError> {
    let en = law.mean_n();
    if en <= 1.0 {
        return Err(SpectrumError::Subcritical(en));
    }
    let mut d = bisect(|s| law.phi(s), 1e-12);
    for _ in 0..2 {
        let step = law.phi(d) / law.dphi(d);
        if step.is_finite() {
            d -= step;
        }
    }
    debug_assert!(law.phi(d).abs() < tol.max(1e-10));
    Ok(d)
}

/// η = E Σ |ln r_i| r_i^D
pub fn eta(law: &RatioLaw, d: f64) -> f64 {
    law.atoms
        .iter()
        .map(|(rs, p)| p * rs.iter().map(|r| -r.ln() * r.powf(d)).sum::<f64>())
        .sum()
}

/// Largest c with every |ln r_i| in the support an integer multiple of c up to
/// `tol`·max, by a Euclid iteration on reals. Spans below √tol·max are
/// treated as non-lattice.
pub fn lattice_detect(law: &RatioLaw, tol: f64) -> Option<f64> {
    let v = law.support_logs();
    let max = *v.last()?;
    let eps = tol * max;
    let floor = tol.sqrt() * max;
    let mut c = v[0];
    for &x in &v[1..] {
        let (mut a, mut b) = (x.max(c), x.min(c));
        while b > eps {
            let r = (a - b * (a / b).round()).abs();
            a = b;
            b = r;
        }
        c = a;
        if c < floor {
            return None;
        }
    }
    let ok = v.iter().all(|&x| (x - c * (x / c).round()).abs() <= eps.max(1e-12 * x));
    if ok {
        Some(c)
    } else {
        None
    }
}

pub fn spectrum(law: &RatioLaw, tol: f64) -> Result<SpectrumResult, SpectrumError> {
    let d = solve_dimension(law, tol)?;
    Ok(SpectrumResult {
        d,
        eta: eta(law, d),
        lattice_c: lattice_detect(law, 1e-9),
        tol,
    })
}

/// Root of E ln Σ r_i^s = 0, the almost sure dimension of homogeneous
/// models.
pub fn as_dimension_homogeneous(law: &RatioLaw, tol: f64) -> Result<f64, SpectrumError> {
    let en = law.mean_n();
    if en <= 1.0 {
        return Err(SpectrumError::Subcritical(en));
    }
    let psi = |s: f64| -> f64 {
        law.atoms
            .iter()
            .map(|(rs, p)| p * rs.iter().map(|r| r.powf(s)).sum::<f64>().ln())
            .sum()
    };
    if psi(0.0) <= 0.0 {
        return Ok(0.0);
    }
    Ok(bisect(psi, tol.min(1e-12)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StopMass {
    pub mean: f64,
    pub stderr: f64,
    pub n_mc: usize,
}

/// Sample mean and standard error of a slice, summed in index order.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

/// Monte-Carlo mean of Σ_{σ∈Σ(r)} r_σ^D over independent trees.
pub fn check_stop_mass(
    model: &Arc<TreeModel>,
    r: f64,
    big_r: f64,
    n_mc: usize,
    seed: u64,
) -> Result<StopMass, SpectrumError> {
    if n_mc < 100 {
        return Err(SpectrumError::TooFewReplicates(n_mc));
    }
    let law = RatioLaw::from_model(model);
    let d = solve_dimension(&law, 1e-12)?;
    // every replicate of a deterministic model is the same tree
    let reps = if model.is_deterministic() { 1 } else { n_mc };
    let sums: Result<Vec<f64>, TreeError> = (0..reps as u64)
        .into_par_iter()
        .map(|i| {
            let t = sample_tree(model, StopRule::Markov { r, big_r }, replicate_seed(seed, i));
            let s = markov_stop(&t, r, big_r)?;
            Ok(s.entries.iter().map(|e| e.ratio.powf(d)).sum())
        })
        .collect();
    let sums = sums?;
    let (mean, stderr) = mean_stderr(&sums);
    Ok(StopMass {
        mean,
        stderr,
        n_mc: reps,
    })
}

/// E Σ_{σ∈Σ_n} r_σ^D by enumerating every realization of the levels
/// 0..n−1; None if there are more than `cap` of them.
pub fn level_mass_exact(model: &Arc<TreeModel>, n: usize, d: f64, cap: usize) -> Option<f64> {
    if n == 0 {
        return Some(1.0);
    }
    let mut total = 0.0;
    let done = enumerate_trees(model, n - 1, cap, |t, w| {
        let lv = &t.levels[n - 1];
        let mut s = 0.0;
        for i in 0..lv.len() {
            let node = NodeRef {
                level: (n - 1) as u32,
                index: i as u32,
            };
            let base = lv.ratio[i];
            s += t
                .label_at(node)
                .maps
                .iter()
                .map(|m| (base * m.ratio).powf(d))
                .sum::<f64>();
        }
        total += w * s;
    });
    done.then_some(total)
}
