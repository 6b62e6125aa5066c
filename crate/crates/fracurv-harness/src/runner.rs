//! Task orchestration and the run manifest.

use crate::config::{validate, RunConfig, Task};
use fracurv::codetree::{markov_stop, sample_tree, test_a2, StopRule, TreeModel};
use fracurv::meanlimits::{
    estimate_rk_all, limit_report, mean_curvature_curve, positivity_and_ratio, write_json, write_limits,
    write_mean_curve, write_rk_curves, LimitReport, MeanCurve, Resolution, RkCurve,
};
use fracurv::rasterlab::{rasterize_cover, render_svg};
use fracurv::spectrum::{check_stop_mass, spectrum, RatioLaw, SpectrumResult};
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub name: String,
    pub config_hash: String,
    pub tool_version: String,
    pub seed: u64,
    pub spectrum: Option<SpectrumResult>,
    /// task name -> files written, relative to the output directory
    pub outputs: BTreeMap<String, Vec<String>>,
    /// task name -> wall-clock seconds
    pub times: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
    pub complete: bool,
    pub error: Option<String>,
}

#[derive(Debug)]
pub enum RunError {
    /// config diagnostics; nothing was run
    Invalid(Vec<String>),
    /// a task failed; the partial manifest was written
    Failed(Box<RunManifest>),
}

/// --out, then FRACURV_OUT, then the config's `outputs`, then
/// `fracurv-out/<name>`.
pub fn output_dir(cfg: &RunConfig, flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os("FRACURV_OUT").filter(|s| !s.is_empty()) {
        return PathBuf::from(p);
    }
    if !cfg.outputs.is_empty() {
        return PathBuf::from(&cfg.outputs);
    }
    PathBuf::from("fracurv-out").join(&cfg.name)
}

fn task_name(t: Task) -> &'static str {
    match t {
        Task::Dimension => "dimension",
        Task::StopMass => "stop_mass",
        Task::MeanCurve => "mean_curve",
        Task::Rk => "rk",
        Task::Limits => "limits",
        Task::VerifyA2 => "verify_a2",
        Task::Render => "render",
    }
}

#[derive(Serialize)]
struct StopMassRow {
    r: f64,
    mean: f64,
    stderr: f64,
    n_mc: usize,
}

#[derive(Serialize)]
struct A2Row {
    letter: u32,
    p_marginal: f64,
    p_independence: f64,
    samples_used: usize,
}

fn write_rows<T: Serialize>(rows: &[T], path: &Path) -> Result<(), String> {
    let mut w = csv::Writer::from_path(path).map_err(|e| e.to_string())?;
    for r in rows {
        w.serialize(r).map_err(|e| e.to_string())?;
    }
    w.flush().map_err(|e| e.to_string())
}

struct State {
    model: Arc<TreeModel>,
    spec: SpectrumResult,
    res: Resolution,
    curve: Option<MeanCurve>,
    rk: Option<[RkCurve; 3]>,
    reports: Vec<LimitReport>,
}

/// Runs every task of `cfg` in dependency order on `jobs` worker threads
/// (rayon's default when None) and writes outputs plus the manifest to `out`.
pub fn run(cfg: &RunConfig, jobs: Option<usize>, out: &Path) -> Result<RunManifest, RunError> {
    let diags = validate(cfg);
    if !diags.is_empty() {
        return Err(RunError::Invalid(diags));
    }
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        b = b.num_threads(j.max(1));
    }
    let pool = b.build().map_err(|e| RunError::Invalid(vec![format!("thread pool: {e}")]))?;
    let mut m = RunManifest {
        name: cfg.name.clone(),
        config_hash: cfg.hash(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        spectrum: None,
        outputs: BTreeMap::new(),
        times: BTreeMap::new(),
        warnings: Vec::new(),
        complete: false,
        error: None,
    };
    let result = pool.install(|| run_tasks(cfg, out, &mut m));
    if let Err(e) = result {
        m.error = Some(e);
        let _ = std::fs::create_dir_all(out);
        let _ = write_json(&m, out.join(MANIFEST));
        return Err(RunError::Failed(Box::new(m)));
    }
    m.complete = true;
    write_json(&m, out.join(MANIFEST)).map_err(|e| RunError::Failed(Box::new(RunManifest {
        error: Some(e.to_string()),
        complete: false,
        ..m.clone()
    })))?;
    Ok(m)
}

fn run_tasks(cfg: &RunConfig, out: &Path, m: &mut RunManifest) -> Result<(), String> {
    std::fs::create_dir_all(out).map_err(|e| format!("{}: {e}", out.display()))?;
    let model = Arc::new(TreeModel::new(cfg.model.clone()).map_err(|e| e.to_string())?);
    let spec = spectrum(&RatioLaw::from_model(&model), 1e-12).map_err(|e| e.to_string())?;
    m.spectrum = Some(spec);
    let mut st = State {
        res: Resolution {
            q: cfg.q,
            h_ratio: cfg.h_ratio,
            big_r: cfg.big_r(),
        },
        model,
        spec,
        curve: None,
        rk: None,
        reports: Vec::new(),
    };
    let mut tasks = cfg.tasks.clone();
    tasks.sort();
    for t in tasks {
        let t0 = Instant::now();
        let files = run_task(t, cfg, &mut st, out, &mut m.warnings).map_err(|e| format!("{}: {e}", task_name(t)))?;
        m.times.insert(task_name(t).to_string(), t0.elapsed().as_secs_f64());
        m.outputs.insert(task_name(t).to_string(), files);
    }
    Ok(())
}

fn ensure_curve(cfg: &RunConfig, st: &mut State) -> Result<(), String> {
    if st.curve.is_none() {
        let c = mean_curvature_curve(&st.model, &cfg.open_set, &[0, 1, 2], &cfg.eps_values(), cfg.n_mc, &st.res, cfg.seed)
            .map_err(|e| e.to_string())?;
        st.curve = Some(c);
    }
    Ok(())
}

fn run_task(t: Task, cfg: &RunConfig, st: &mut State, out: &Path, warnings: &mut Vec<String>) -> Result<Vec<String>, String> {
    let big_r = st.res.big_r;
    let file = |name: &str| (out.join(name), name.to_string());
    match t {
        Task::Dimension => {
            let (p, n) = file("spectrum.json");
            write_json(&st.spec, p).map_err(|e| e.to_string())?;
            Ok(vec![n])
        }
        Task::StopMass => {
            let k = cfg.options.stop_mass_radii.max(1);
            let mut rows = Vec::with_capacity(k);
            for j in 0..k {
                // R down to R/64
                let r = if k == 1 { big_r } else { big_r * 64f64.powf(-(j as f64) / (k - 1) as f64) };
                let s = check_stop_mass(&st.model, r, big_r, cfg.options.stop_mass_n_mc, cfg.seed.wrapping_add(1))
                    .map_err(|e| e.to_string())?;
                rows.push(StopMassRow {
                    r,
                    mean: s.mean,
                    stderr: s.stderr,
                    n_mc: s.n_mc,
                });
            }
            let (p, n) = file("stop_mass.csv");
            write_rows(&rows, &p)?;
            Ok(vec![n])
        }
        Task::MeanCurve => {
            ensure_curve(cfg, st)?;
            let (p, n) = file("mean_curve.csv");
            write_mean_curve(st.curve.as_ref().unwrap(), p).map_err(|e| e.to_string())?;
            Ok(vec![n])
        }
        Task::Rk => {
            let grid = cfg.r_values(&st.model);
            let rk = estimate_rk_all(&st.model, &cfg.open_set, &grid, cfg.n_mc, &st.res, cfg.seed.wrapping_add(2))
                .map_err(|e| e.to_string())?;
            let (p, n) = file("rk_curve.csv");
            write_rk_curves(&rk, p).map_err(|e| e.to_string())?;
            st.rk = Some(rk);
            Ok(vec![n])
        }
        Task::Limits => {
            ensure_curve(cfg, st)?;
            let curve = st.curve.as_ref().unwrap();
            let delta = cfg.options.delta.unwrap_or(curve.eps[curve.eps.len() - 1]);
            let s_grid: Vec<f64> = match st.spec.lattice_c {
                Some(c) => {
                    let n = cfg.options.lattice_s_points.max(1);
                    (0..n).map(|j| c * j as f64 / n as f64).collect()
                }
                None => Vec::new(),
            };
            let lattice = st.spec.lattice_c.map(|c| (c, s_grid.as_slice(), cfg.options.lattice_m_max));
            st.reports.clear();
            for k in 0..=2 {
                let rk = st.rk.as_ref().map(|r| &r[k]);
                let r = limit_report(curve, rk, k, st.spec.d, st.spec.eta, big_r, delta, lattice).map_err(|e| e.to_string())?;
                for w in &r.warnings {
                    warnings.push(format!("k={k}: {w}"));
                }
                if let Some(f) = r.tail_fraction.filter(|&f| f > 0.2) {
                    warnings.push(format!("k={k}: renewal tail fraction {f:.3} above 0.2"));
                }
                st.reports.push(r);
            }
            let (p, n) = file("limits.csv");
            write_limits(&st.reports, p).map_err(|e| e.to_string())?;
            let verdict = positivity_and_ratio(&st.reports[2], &st.reports[1], st.spec.d);
            let (pv, nv) = file("verdict.json");
            write_json(&verdict, pv).map_err(|e| e.to_string())?;
            Ok(vec![n, nv])
        }
        Task::VerifyA2 => {
            let n_letters = st.model.labels().iter().map(|l| l.n()).min().unwrap_or(0) as u32;
            let mut rows = Vec::new();
            for i in 1..=n_letters {
                let r = test_a2(
                    &st.model,
                    i,
                    cfg.options.a2_samples,
                    cfg.options.a2_depth,
                    cfg.seed.wrapping_add(3 + i as u64),
                )
                .map_err(|e| e.to_string())?;
                if r.p_marginal <= 0.01 || r.p_independence <= 0.01 {
                    warnings.push(format!("letter {i}: back-path independence rejected at 1%"));
                }
                rows.push(A2Row {
                    letter: i,
                    p_marginal: r.p_marginal,
                    p_independence: r.p_independence,
                    samples_used: r.samples_used,
                });
            }
            let (p, n) = file("a2.csv");
            write_rows(&rows, &p)?;
            Ok(vec![n])
        }
        Task::Render => {
            let r = big_r * 2f64.powi(-(cfg.options.render_level as i32));
            let tree = sample_tree(&st.model, StopRule::Markov { r, big_r }, cfg.seed);
            let stop = markov_stop(&tree, r, big_r).map_err(|e| e.to_string())?;
            let b = cfg.open_set.bbox();
            let ext = (b[2] - b[0]).max(b[3] - b[1]);
            let h = (ext / 512.0).min(stop.r / 4.0);
            let mask = rasterize_cover(&tree, &stop, &cfg.open_set, h).map_err(|e| e.to_string())?;
            let (p, n) = file("cover.svg");
            render_svg(&mask, p).map_err(|e| e.to_string())?;
            Ok(vec![n])
        }
    }
}
