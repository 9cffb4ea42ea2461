//! Discounted value iteration with hard-min and soft-min (log-sum-exp)
//! Bellman backups on a known cost field, plus the policies they induce.
//!
//! Costs are per-cell arrival costs; `+inf` marks a wall. Moves off the grid
//! or into a wall have `Q = +inf`. The goal is absorbing: every control at
//! the goal loops back to it at zero cost, so under the hard backup its
//! Q-values stay zero while the soft backup credits it the entropy bonus of
//! staying forever.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::export::{write_heatmap_ppm, write_ppm, write_text};
use crate::gridworld::{AgentState, Control};
use crate::planner::boltzmann;

/// A deterministic grid MDP with a single absorbing goal.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMdp {
    pub width: usize,
    pub height: usize,
    pub cost: Vec<f64>,
    pub goal: AgentState,
}

impl GridMdp {
    pub fn new(width: usize, height: usize, cost: Vec<f64>, goal: AgentState) -> Result<Self> {
        if cost.len() != width * height {
            return Err(Error::ShapeMismatch { expected: format!("{width}x{height}"), got: format!("{} cells", cost.len()) });
        }
        if cost.iter().any(|c| c.is_nan() || *c < 0.0) {
            return Err(Error::invalid("costs must be non-negative"));
        }
        if goal.row >= height || goal.col >= width || !cost[goal.row * width + goal.col].is_finite() {
            return Err(Error::invalid("goal must be a traversable cell"));
        }
        Ok(Self { width, height, cost, goal })
    }

    fn idx(&self, x: AgentState) -> usize {
        x.row * self.width + x.col
    }

    pub fn is_state(&self, x: AgentState) -> bool {
        self.cost[self.idx(x)].is_finite()
    }

    fn successor(&self, i: usize, u: Control) -> Option<usize> {
        let x = AgentState::new(i / self.width, i % self.width);
        u.neighbor(x, self.width, self.height).map(|n| self.idx(n)).filter(|&j| self.cost[j].is_finite())
    }
}

/// The bordered empty grid: walls on the outside ring, unit arrival cost
/// everywhere else and zero cost for arriving at the goal.
pub fn bordered_instance(size: usize) -> Result<(GridMdp, AgentState, AgentState)> {
    if size < 5 {
        return Err(Error::invalid("bordered grid needs at least 5 cells per side"));
    }
    let mut cost = vec![1.0; size * size];
    for r in 0..size {
        for c in 0..size {
            if r == 0 || c == 0 || r == size - 1 || c == size - 1 {
                cost[r * size + c] = f64::INFINITY;
            }
        }
    }
    let start = AgentState::new(2, 3);
    let goal = AgentState::new(size - 5, size - 6);
    cost[goal.row * size + goal.col] = 0.0;
    Ok((GridMdp::new(size, size, cost, goal)?, start, goal))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Backup {
    /// `min_u' Q(x', u')`.
    Hard,
    /// `-alpha log sum_u' exp(-Q(x', u') / alpha)`.
    Soft,
}

/// State-action values over all cells. Walls hold `+inf` everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    pub width: usize,
    pub height: usize,
    pub q: Vec<[f64; 4]>,
    pub gamma: f64,
    pub alpha: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Sup-norm change of the last sweep.
    pub residual: f64,
}

impl QTable {
    pub fn at(&self, x: AgentState) -> &[f64; 4] {
        &self.q[x.row * self.width + x.col]
    }

    /// `min_u Q(x, u)`.
    pub fn value_hard(&self, x: AgentState) -> f64 {
        self.at(x).iter().copied().fold(f64::INFINITY, f64::min)
    }
}

fn soft_min(q: &[f64; 4], alpha: f64) -> f64 {
    let m = q.iter().copied().fold(f64::INFINITY, f64::min);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = q.iter().filter(|v| v.is_finite()).map(|v| (-(v - m) / alpha).exp()).sum();
    m - alpha * s.ln()
}

fn hard_min(q: &[f64; 4]) -> f64 {
    q.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Zero for every possible move, `+inf` for the rest.
pub fn initial_table(mdp: &GridMdp) -> Vec<[f64; 4]> {
    (0..mdp.width * mdp.height)
        .map(|i| {
            let mut row = [f64::INFINITY; 4];
            if mdp.cost[i].is_finite() {
                for u in Control::ALL {
                    if i == mdp.idx(mdp.goal) || mdp.successor(i, u).is_some() {
                        row[u.index()] = 0.0;
                    }
                }
            }
            row
        })
        .collect()
}

fn backup(q: &[[f64; 4]], mdp: &GridMdp, gamma: f64, alpha: f64, kind: Backup) -> Vec<[f64; 4]> {
    let goal = mdp.idx(mdp.goal);
    let value = |j: usize| -> f64 {
        match kind {
            Backup::Hard => hard_min(&q[j]),
            Backup::Soft => soft_min(&q[j], alpha),
        }
    };
    (0..q.len())
        .map(|i| {
            let mut row = [f64::INFINITY; 4];
            if i == goal {
                let v = if gamma == 0.0 { 0.0 } else { gamma * value(goal) };
                return [v; 4];
            }
            if !mdp.cost[i].is_finite() {
                return row;
            }
            for u in Control::ALL {
                if let Some(j) = mdp.successor(i, u) {
                    let v = value(j);
                    // gamma * inf with gamma = 0 would be NaN
                    row[u.index()] = mdp.cost[j] + if gamma == 0.0 { 0.0 } else { gamma * v };
                }
            }
            row
        })
        .collect()
}

/// One hard-min sweep (Jacobi: reads `q`, returns the new table).
pub fn bellman_hard(q: &[[f64; 4]], mdp: &GridMdp, gamma: f64) -> Vec<[f64; 4]> {
    backup(q, mdp, gamma, 1.0, Backup::Hard)
}

/// One soft-min sweep with max-subtracted log-sum-exp.
pub fn bellman_soft(q: &[[f64; 4]], mdp: &GridMdp, gamma: f64, alpha: f64) -> Vec<[f64; 4]> {
    backup(q, mdp, gamma, alpha, Backup::Soft)
}

/// Sup-norm distance over entries finite in both tables.
pub fn sup_diff(a: &[[f64; 4]], b: &[[f64; 4]]) -> f64 {
    let mut m: f64 = 0.0;
    for (ra, rb) in a.iter().zip(b) {
        for (x, y) in ra.iter().zip(rb) {
            if x.is_finite() && y.is_finite() {
                m = m.max((x - y).abs());
            } else if x.is_finite() != y.is_finite() {
                return f64::INFINITY;
            }
        }
    }
    m
}

/// Iterate until the sup-norm change drops below `tol` or `max_iters`.
pub fn value_iteration(mdp: &GridMdp, kind: Backup, gamma: f64, alpha: f64, tol: f64, max_iters: usize) -> Result<QTable> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::invalid("discount must lie in [0, 1]"));
    }
    if !(alpha > 0.0) || !(tol > 0.0) {
        return Err(Error::invalid("alpha and tol must be positive"));
    }
    let mut q = initial_table(mdp);
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < max_iters {
        let next = backup(&q, mdp, gamma, alpha, kind);
        residual = sup_diff(&next, &q);
        q = next;
        iterations += 1;
        if residual < tol {
            break;
        }
    }
    Ok(QTable {
        width: mdp.width,
        height: mdp.height,
        q,
        gamma,
        alpha,
        iterations,
        converged: residual < tol,
        residual,
    })
}

/// Boltzmann policy per cell; `None` for walls.
pub fn extract_policy(table: &QTable) -> Vec<Option<[f64; 4]>> {
    table
        .q
        .iter()
        .map(|row| {
            let opt: [Option<f64>; 4] = row.map(|v| v.is_finite().then_some(v));
            boltzmann(&opt, table.alpha).ok()
        })
        .collect()
}

/// Most probable control per cell, first on ties.
pub fn greedy_controls(table: &QTable) -> Vec<Option<Control>> {
    table
        .q
        .iter()
        .map(|row| {
            let mut best: Option<(usize, f64)> = None;
            for (u, &v) in row.iter().enumerate() {
                if v.is_finite() && best.is_none_or(|(_, b)| v < b) {
                    best = Some((u, v));
                }
            }
            best.and_then(|(u, _)| Control::from_index(u))
        })
        .collect()
}

/// Follow the greedy controls from `start` until the goal or `max_steps`.
pub fn greedy_rollout(table: &QTable, mdp: &GridMdp, start: AgentState, max_steps: usize) -> Vec<AgentState> {
    let controls = greedy_controls(table);
    let mut path = vec![start];
    let mut x = start;
    for _ in 0..max_steps {
        if x == mdp.goal {
            break;
        }
        let Some(u) = controls[mdp.idx(x)] else { break };
        let Some(n) = u.neighbor(x, mdp.width, mdp.height) else { break };
        x = n;
        path.push(x);
    }
    path
}

/// Fraction of non-goal states where both tables pick the same control.
pub fn argmax_agreement(a: &QTable, b: &QTable, mdp: &GridMdp) -> f64 {
    let ga = greedy_controls(a);
    let gb = greedy_controls(b);
    let goal = mdp.idx(mdp.goal);
    let mut total = 0;
    let mut same = 0;
    for i in 0..ga.len() {
        if i == goal || !mdp.cost[i].is_finite() {
            continue;
        }
        total += 1;
        if ga[i] == gb[i] {
            same += 1;
        }
    }
    if total == 0 {
        1.0
    } else {
        same as f64 / total as f64
    }
}

/// Fraction of non-goal states where the greedy control of `a` is one of the
/// optimal controls of `b` (within `tol`). Unlike [`argmax_agreement`] this
/// does not count tie-breaking differences as disagreement.
pub fn optimal_set_agreement(a: &QTable, b: &QTable, mdp: &GridMdp, tol: f64) -> f64 {
    let ga = greedy_controls(a);
    let goal = mdp.idx(mdp.goal);
    let mut total = 0;
    let mut same = 0;
    for (i, g) in ga.iter().enumerate() {
        if i == goal || !mdp.cost[i].is_finite() {
            continue;
        }
        total += 1;
        let best = hard_min(&b.q[i]);
        if g.is_some_and(|u| b.q[i][u.index()] <= best + tol) {
            same += 1;
        }
    }
    if total == 0 {
        1.0
    } else {
        same as f64 / total as f64
    }
}

/// `soft <= hard + slack` at every finite entry.
pub fn soft_below_hard(soft: &QTable, hard: &QTable, slack: f64) -> bool {
    soft.q.iter().zip(&hard.q).all(|(s, h)| s.iter().zip(h).all(|(a, b)| !b.is_finite() || *a <= b + slack))
}

/// Rows `row,col,q_up,q_down,q_left,q_right,v`.
pub fn write_q_csv(path: &Path, table: &QTable) -> Result<()> {
    let mut out = String::from("row,col,q_up,q_down,q_left,q_right,v\n");
    for (i, row) in table.q.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            i / table.width,
            i % table.width,
            row[0],
            row[1],
            row[2],
            row[3],
            hard_min(row)
        );
    }
    write_text(path, &out)
}

/// Grayscale heatmap of `min_u Q`.
pub fn write_value_ppm(path: &Path, table: &QTable, scale: usize) -> Result<()> {
    let v: Vec<f64> = table.q.iter().map(hard_min).collect();
    write_heatmap_ppm(path, table.width, table.height, &v, scale)
}

/// Colour per greedy control; walls black, goal white.
pub fn write_policy_ppm(path: &Path, table: &QTable, mdp: &GridMdp, scale: usize) -> Result<()> {
    const COLOURS: [[u8; 3]; 4] = [[220, 60, 60], [60, 160, 60], [60, 90, 220], [230, 180, 40]];
    let greedy = greedy_controls(table);
    let px: Vec<[u8; 3]> = greedy
        .iter()
        .enumerate()
        .map(|(i, g)| {
            if i == mdp.idx(mdp.goal) {
                [255, 255, 255]
            } else {
                g.map_or([0, 0, 0], |u| COLOURS[u.index()])
            }
        })
        .collect();
    write_ppm(path, table.width, table.height, &px, scale)
}
