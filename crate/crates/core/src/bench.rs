//! Per-step latency of control prediction and of a full value-iteration
//! baseline on the same cost fields.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::costnet::CostModel;
use crate::export::write_text;
use crate::gridworld::{sample_episode, AgentState, ClassSet, Control, Demonstration, GridParams};
use crate::learner::Model;
use crate::planner::{self, CostView, PlanOptions};
use crate::semantic_map::LogOddsMap;
use crate::sensor::SensorConfig;

/// First-exit value iteration over the whole grid with Jacobi sweeps until
/// no value changes. Returns `V` (infinite where the goal is unreachable)
/// and the number of sweeps.
pub fn full_value_iteration(width: usize, height: usize, cost: &[f64], goal: AgentState) -> (Vec<f64>, usize) {
    let n = width * height;
    let goal_i = goal.row * width + goal.col;
    let mut v = vec![f64::INFINITY; n];
    v[goal_i] = 0.0;
    let mut next = v.clone();
    let mut sweeps = 0;
    loop {
        sweeps += 1;
        let mut changed = false;
        for i in 0..n {
            if i == goal_i || !cost[i].is_finite() {
                continue;
            }
            let x = AgentState::new(i / width, i % width);
            let mut best = f64::INFINITY;
            for u in Control::ALL {
                if let Some(nb) = u.neighbor(x, width, height) {
                    let j = nb.row * width + nb.col;
                    let q = cost[j] + v[j];
                    if q < best {
                        best = q;
                    }
                }
            }
            if best != v[i] {
                changed = true;
            }
            next[i] = best;
        }
        std::mem::swap(&mut v, &mut next);
        if !changed {
            return (v, sweeps);
        }
    }
}

/// `Q(x, u)` read off a full value function.
pub fn q_from_values(width: usize, height: usize, cost: &[f64], v: &[f64], x: AgentState) -> [Option<f64>; 4] {
    let mut q = [None; 4];
    for u in Control::ALL {
        if let Some(nb) = u.neighbor(x, width, height) {
            let j = nb.row * width + nb.col;
            let val = cost[j] + v[j];
            if val.is_finite() {
                q[u.index()] = Some(val);
            }
        }
    }
    q
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub grid_size: usize,
    pub method: String,
    pub mean_ms: f64,
    /// Spread over individual steps.
    pub std_ms: f64,
    /// Spread of the per-run means over repeated runs.
    pub run_std_ms: f64,
    pub steps: usize,
    pub runs: usize,
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("grid_size,method,mean_ms,steps,std_ms,run_std_ms,runs\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{},{:.6},{:.6},{}",
            r.grid_size, r.method, r.mean_ms, r.steps, r.std_ms, r.run_std_ms, r.runs
        );
    }
    out
}

pub fn write_bench_csv(path: &Path, rows: &[BenchRow]) -> Result<()> {
    write_text(path, &bench_csv(rows))
}

fn mean_std(samples: &[f64]) -> (f64, f64) {
    let n = samples.len().max(1) as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn summarize(grid_size: usize, method: &str, runs: &[Vec<f64>]) -> BenchRow {
    let all: Vec<f64> = runs.iter().flatten().copied().collect();
    let (mean, std) = mean_std(&all);
    let means: Vec<f64> = runs.iter().map(|r| mean_std(r).0).collect();
    BenchRow {
        grid_size,
        method: method.to_string(),
        mean_ms: mean,
        std_ms: std,
        run_std_ms: mean_std(&means).1,
        steps: all.len(),
        runs: runs.len(),
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Replays expert episodes on `size`x`size` maps until at least `min_steps`
/// steps are timed, `repeats` times over the same episodes. Per step it
/// measures the full prediction (map update, encoder forward, A*), A* alone
/// and the value-iteration baseline, the last two on the same learned cost
/// field.
#[allow(clippy::too_many_arguments)]
pub fn run_bench(
    model: &Model,
    size: usize,
    min_steps: usize,
    repeats: usize,
    first_seed: u64,
    classes: &ClassSet,
    sensor_cfg: &SensorConfig,
    opts: &PlanOptions,
) -> Result<Vec<BenchRow>> {
    if repeats == 0 {
        return Err(Error::invalid("bench needs at least one run"));
    }
    let params = GridParams::desk(size);
    let mut demos = Vec::new();
    let mut total = 0;
    let mut seed = first_seed;
    while total < min_steps {
        if let Some(demo) = sample_episode(seed, &params, classes, sensor_cfg)? {
            total += demo.len();
            demos.push(demo);
        }
        seed += 1;
    }
    let (mut pipeline, mut astar, mut vi) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..repeats {
        let (mut p, mut a, mut v) = (Vec::new(), Vec::new(), Vec::new());
        for demo in &demos {
            time_episode(model, demo, opts, &mut p, &mut a, &mut v)?;
        }
        pipeline.push(p);
        astar.push(a);
        vi.push(v);
    }
    Ok(vec![
        summarize(size, "pipeline", &pipeline),
        summarize(size, "astar", &astar),
        summarize(size, "value_iteration", &vi),
    ])
}

fn time_episode(
    model: &Model,
    demo: &Demonstration,
    opts: &PlanOptions,
    pipeline: &mut Vec<f64>,
    astar: &mut Vec<f64>,
    vi: &mut Vec<f64>,
) -> Result<()> {
    let (w, h) = (demo.grid.width, demo.grid.height);
    let mut map = LogOddsMap::new(w, h, model.classes());
    for step in &demo.steps {
        let t = Instant::now();
        map.update(step.state, &step.scan, &model.psi)?;
        let field = model.encoder.forward(&map.posterior_tensor())?;
        let view = CostView::new(w, h, &field.values)?;
        let plan = planner::plan(step.state, demo.goal, &view, opts)?;
        pipeline.push(ms(t));

        let t = Instant::now();
        let again = planner::plan(step.state, demo.goal, &view, opts)?;
        astar.push(ms(t));

        let t = Instant::now();
        let (v, _) = full_value_iteration(w, h, &field.values, demo.goal);
        let q = q_from_values(w, h, &field.values, &v, step.state);
        vi.push(ms(t));

        if again.q != plan.q || !same_q(&q, &plan.q) {
            return Err(Error::invalid(format!("baseline disagrees with A* at {:?}", step.state)));
        }
    }
    Ok(())
}

fn same_q(a: &[Option<f64>; 4], b: &[Option<f64>; 4]) -> bool {
    a.iter().zip(b).all(|(x, y)| match (x, y) {
        (Some(x), Some(y)) => (x - y).abs() <= 1e-9 * x.abs().max(1.0),
        (None, None) => true,
        _ => false,
    })
}
