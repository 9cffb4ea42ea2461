//! Backward A* over per-cell arrival costs, Boltzmann policies over the
//! resulting cost-to-go, and the visitation subgradient of `Q(x_t, u)`.
//!
//! The search starts at the goal and expands predecessors until every
//! neighbour of the current state is closed, so `Q(x_t, u)` is exact for all
//! four controls. The edge cost of `(x, u)` is the cost of the cell it
//! arrives at. Moves off the grid and into cells of infinite cost are not
//! edges; the corresponding `Q` is absent.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridworld::{AgentState, Control};

/// Borrowed arrival-cost field. `+inf` marks an impassable cell.
#[derive(Debug, Clone, Copy)]
pub struct CostView<'a> {
    pub width: usize,
    pub height: usize,
    pub values: &'a [f64],
}

impl<'a> CostView<'a> {
    pub fn new(width: usize, height: usize, values: &'a [f64]) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::ShapeMismatch {
                expected: format!("{width}x{height}"),
                got: format!("{} cells", values.len()),
            });
        }
        if let Some(v) = values.iter().find(|v| v.is_nan() || **v < 0.0) {
            return Err(Error::invalid(format!("costs must be non-negative, found {v}")));
        }
        Ok(Self { width, height, values })
    }

    #[inline]
    pub fn at(&self, x: AgentState) -> f64 {
        self.values[x.row * self.width + x.col]
    }

    fn contains(&self, x: AgentState) -> bool {
        x.row < self.height && x.col < self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum Heuristic {
    #[default]
    Zero,
    /// Manhattan distance to the current state times the smallest cell cost.
    Manhattan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanOptions {
    pub heuristic: Heuristic,
    /// Weight on the heuristic; 1 keeps the search exact.
    pub eps_weight: f64,
    /// Record the expansion order for debugging.
    pub trace: bool,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self { heuristic: Heuristic::Zero, eps_weight: 1.0, trace: false }
    }
}

/// Expansion order and the g-value each state was closed with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub expansions: Vec<(AgentState, f64)>,
}

/// Output of one backward search.
#[derive(Debug, Clone)]
pub struct PlanResult {
    width: usize,
    height: usize,
    pub current: AgentState,
    pub goal: AgentState,
    g: Vec<f64>,
    child: Vec<Option<u32>>,
    closed: Vec<bool>,
    /// `Q(x_t, u)` in `Control::ALL` order; `None` is an infinite cost-to-go.
    pub q: [Option<f64>; 4],
    pub expansions: usize,
    pub trace: Option<SearchTrace>,
}

impl PlanResult {
    fn idx(&self, x: AgentState) -> usize {
        x.row * self.width + x.col
    }

    /// Cost-to-go estimate; exact for closed states.
    pub fn g(&self, x: AgentState) -> Option<f64> {
        let v = self.g[self.idx(x)];
        v.is_finite().then_some(v)
    }

    pub fn is_closed(&self, x: AgentState) -> bool {
        self.closed[self.idx(x)]
    }

    pub fn child(&self, x: AgentState) -> Option<AgentState> {
        self.child[self.idx(x)].map(|i| AgentState::new(i as usize / self.width, i as usize % self.width))
    }

    pub fn closed_states(&self) -> impl Iterator<Item = AgentState> + '_ {
        let w = self.width;
        self.closed.iter().enumerate().filter(|(_, c)| **c).map(move |(i, _)| AgentState::new(i / w, i % w))
    }

    /// At least one control reaches the goal.
    pub fn reachable(&self) -> bool {
        self.q.iter().any(Option::is_some)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

#[derive(Clone, Copy, PartialEq)]
struct OpenEntry {
    f: f64,
    g: f64,
    index: usize,
}

impl Eq for OpenEntry {}

impl Ord for OpenEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // reversed: BinaryHeap is a max-heap and we pop the smallest (f, g, index)
        other
            .f
            .total_cmp(&self.f)
            .then_with(|| other.g.total_cmp(&self.g))
            .then_with(|| other.index.cmp(&self.index))
    }
}

impl PartialOrd for OpenEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Backward A* from `goal` until every neighbour of `current` is closed.
pub fn plan(current: AgentState, goal: AgentState, cost: &CostView<'_>, opts: &PlanOptions) -> Result<PlanResult> {
    if !cost.contains(current) || !cost.contains(goal) {
        return Err(Error::invalid("current or goal state outside the cost field"));
    }
    if !cost.at(current).is_finite() {
        return Err(Error::invalid(format!("current state {current:?} is impassable")));
    }
    if !(opts.eps_weight >= 1.0) {
        return Err(Error::invalid("heuristic weight must be at least 1"));
    }
    let (w, h) = (cost.width, cost.height);
    let n = w * h;
    let min_cost = match opts.heuristic {
        Heuristic::Zero => 0.0,
        Heuristic::Manhattan => cost.values.iter().copied().filter(|v| v.is_finite()).fold(f64::INFINITY, f64::min),
    };
    let min_cost = if min_cost.is_finite() { min_cost } else { 0.0 };
    let heur = |x: AgentState| opts.eps_weight * min_cost * x.manhattan(&current) as f64;

    let targets: Vec<usize> = Control::ALL
        .iter()
        .filter_map(|u| u.neighbor(current, w, h))
        .filter(|nb| cost.at(*nb).is_finite())
        .map(|nb| nb.row * w + nb.col)
        .collect();

    let mut g = vec![f64::INFINITY; n];
    let mut child: Vec<Option<u32>> = vec![None; n];
    let mut closed = vec![false; n];
    let mut open = BinaryHeap::new();
    let mut trace = opts.trace.then(|| SearchTrace { expansions: Vec::new() });
    let goal_i = goal.row * w + goal.col;
    g[goal_i] = 0.0;
    open.push(OpenEntry { f: heur(goal), g: 0.0, index: goal_i });
    let mut expansions = 0;

    while targets.iter().any(|&t| !closed[t]) {
        let Some(OpenEntry { g: ge, index, .. }) = open.pop() else { break };
        if closed[index] || ge != g[index] {
            continue;
        }
        closed[index] = true;
        expansions += 1;
        let x = AgentState::new(index / w, index % w);
        if let Some(t) = trace.as_mut() {
            t.expansions.push((x, ge));
        }
        let arrive = cost.values[index];
        if !arrive.is_finite() {
            continue;
        }
        for u in Control::ALL {
            let Some(pred) = u.neighbor(x, w, h) else { continue };
            let p = pred.row * w + pred.col;
            if closed[p] || !cost.values[p].is_finite() {
                continue;
            }
            let cand = ge + arrive;
            if g[p] > cand {
                g[p] = cand;
                child[p] = Some(index as u32);
                open.push(OpenEntry { f: cand + heur(pred), g: cand, index: p });
            }
        }
    }

    let mut q = [None; 4];
    for u in Control::ALL {
        if let Some(nb) = u.neighbor(current, w, h) {
            let i = nb.row * w + nb.col;
            let c = cost.values[i];
            if closed[i] && c.is_finite() {
                q[u.index()] = Some(c + g[i]);
            }
        }
    }
    Ok(PlanResult { width: w, height: h, current, goal, g, child, closed, q, expansions, trace })
}

/// `pi(u) ∝ exp(-Q(u)/alpha)`; absent controls get probability zero.
pub fn boltzmann(q: &[Option<f64>; 4], alpha: f64) -> Result<[f64; 4]> {
    if !(alpha > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let qmin = q.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    if !qmin.is_finite() {
        return Err(Error::Unreachable);
    }
    let mut pi = [0.0; 4];
    let mut z = 0.0;
    for (p, qu) in pi.iter_mut().zip(q) {
        if let Some(v) = qu {
            *p = (-(v - qmin) / alpha).exp();
            z += *p;
        }
    }
    for p in &mut pi {
        *p /= z;
    }
    Ok(pi)
}

/// Index of the most probable control; ties go to the earliest control.
pub fn argmax(pi: &[f64; 4]) -> usize {
    let mut best = 0;
    for u in 1..4 {
        if pi[u] > pi[best] {
            best = u;
        }
    }
    best
}

/// State-control visitation counts of one concrete trajectory.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Visitation {
    pub counts: BTreeMap<(AgentState, Control), u32>,
}

impl Visitation {
    /// Counts per arrival cell, i.e. the subgradient with respect to a
    /// per-cell cost field.
    pub fn cell_counts(&self, width: usize, height: usize) -> BTreeMap<usize, u32> {
        let mut out = BTreeMap::new();
        for (&(x, u), &c) in &self.counts {
            if let Some(nb) = u.neighbor(x, width, height) {
                *out.entry(nb.row * width + nb.col).or_insert(0) += c;
            }
        }
        out
    }

    /// `<c, mu>` under the arrival-cost convention.
    pub fn inner_product(&self, cost: &CostView<'_>) -> f64 {
        self.counts
            .iter()
            .filter_map(|(&(x, u), &c)| u.neighbor(x, cost.width, cost.height).map(|nb| c as f64 * cost.at(nb)))
            .sum()
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

/// Trace the optimal trajectory for `(x_t, u)` along child pointers and
/// return its visitation counts: `dQ(x_t, u) / dc(x, u') = mu(x, u')`.
pub fn subgradient(result: &PlanResult, u: Control) -> Result<Visitation> {
    if result.q[u.index()].is_none() {
        return Err(Error::invalid(format!("Q({:?}, {u:?}) is infinite", result.current)));
    }
    let (w, h) = (result.width, result.height);
    let mut vis = Visitation::default();
    let mut x = result.current;
    let mut next = u.neighbor(x, w, h).expect("finite Q implies an in-grid neighbour");
    *vis.counts.entry((x, u)).or_insert(0) += 1;
    let mut hops = 0;
    while next != result.goal {
        x = next;
        next = result
            .child(x)
            .ok_or_else(|| Error::invalid(format!("closed state {x:?} has no child pointer")))?;
        let ctrl = Control::ALL
            .into_iter()
            .find(|c| c.neighbor(x, w, h) == Some(next))
            .expect("child pointers link 4-neighbours");
        *vis.counts.entry((x, ctrl)).or_insert(0) += 1;
        hops += 1;
        if hops > w * h {
            return Err(Error::invalid("child pointers form a cycle"));
        }
    }
    Ok(vis)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// First-exit Bellman-Ford: exact optimal cost-to-go per cell.
    fn bellman_oracle(w: usize, h: usize, cost: &[f64], goal: AgentState) -> Vec<f64> {
        let mut v = vec![f64::INFINITY; w * h];
        v[goal.row * w + goal.col] = 0.0;
        loop {
            let mut changed = false;
            for i in 0..w * h {
                if i == goal.row * w + goal.col || !cost[i].is_finite() {
                    continue;
                }
                let x = AgentState::new(i / w, i % w);
                for u in Control::ALL {
                    if let Some(nb) = u.neighbor(x, w, h) {
                        let j = nb.row * w + nb.col;
                        let cand = cost[j] + v[j];
                        if cand < v[i] {
                            v[i] = cand;
                            changed = true;
                        }
                    }
                }
            }
            if !changed {
                return v;
            }
        }
    }

    fn oracle_q(w: usize, h: usize, cost: &[f64], x: AgentState, goal: AgentState) -> [Option<f64>; 4] {
        let v = bellman_oracle(w, h, cost, goal);
        let mut q = [None; 4];
        for u in Control::ALL {
            if let Some(nb) = u.neighbor(x, w, h) {
                let j = nb.row * w + nb.col;
                let val = cost[j] + v[j];
                if val.is_finite() {
                    q[u.index()] = Some(val);
                }
            }
        }
        q
    }

    #[test]
    fn adjacent_goal_unit_cost() {
        let c = vec![1.0; 9];
        let cv = CostView::new(3, 3, &c).unwrap();
        let r = plan(AgentState::new(1, 1), AgentState::new(1, 2), &cv, &PlanOptions::default()).unwrap();
        assert_eq!(r.q[Control::Right.index()], Some(1.0));
        let mu = subgradient(&r, Control::Right).unwrap();
        assert_eq!(mu.counts.len(), 1);
        assert_eq!(mu.counts[&(AgentState::new(1, 1), Control::Right)], 1);
    }

    #[test]
    fn free_4x4_matches_manhattan() {
        let c = vec![1.0; 16];
        let cv = CostView::new(4, 4, &c).unwrap();
        let goal = AgentState::new(3, 3);
        let x = AgentState::new(1, 1);
        let r = plan(x, goal, &cv, &PlanOptions::default()).unwrap();
        let oq = oracle_q(4, 4, &c, x, goal);
        for u in Control::ALL {
            let nb = u.neighbor(x, 4, 4).unwrap();
            let expect = 1.0 + nb.manhattan(&goal) as f64;
            assert_eq!(r.q[u.index()], Some(expect));
            assert!((oq[u.index()].unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn enclosed_goal_is_unreachable() {
        let inf = f64::INFINITY;
        #[rustfmt::skip]
        let c = vec![
            1.0, 1.0, 1.0, 1.0, 1.0,
            1.0, 1.0, inf, 1.0, 1.0,
            1.0, inf, 1.0, inf, 1.0,
            1.0, 1.0, inf, 1.0, 1.0,
        ];
        let cv = CostView::new(5, 4, &c).unwrap();
        let r = plan(AgentState::new(0, 0), AgentState::new(2, 2), &cv, &PlanOptions::default()).unwrap();
        assert!(!r.reachable());
        assert!(matches!(boltzmann(&r.q, 1.0), Err(Error::Unreachable)));
    }

    #[test]
    fn corridor_inner_product() {
        // 1x7 corridor, goal at the end: five arrivals after the first move
        let c = vec![1.0, 1.0, 2.0, 3.0, 0.5, 4.0, 1.5];
        let cv = CostView::new(7, 1, &c).unwrap();
        let r = plan(AgentState::new(0, 1), AgentState::new(0, 6), &cv, &PlanOptions::default()).unwrap();
        let mu = subgradient(&r, Control::Right).unwrap();
        assert_eq!(mu.counts.len(), 5);
        assert!(mu.counts.values().all(|&v| v == 1));
        assert_eq!(mu.inner_product(&cv), r.q[Control::Right.index()].unwrap());
        assert_eq!(r.q[Control::Right.index()], Some(11.0));
        // Left goes back through cell 0 and returns through cell 1
        let left = subgradient(&r, Control::Left).unwrap();
        assert_eq!(left.cell_counts(7, 1)[&1], 1);
        assert_eq!(left.inner_product(&cv), r.q[Control::Left.index()].unwrap());
        assert!(subgradient(&r, Control::Up).is_err());
    }

    #[test]
    fn perturbing_on_path_cost_shifts_q_by_visits() {
        let mut c = vec![1.0; 25];
        c[7] = 3.0;
        let cv = CostView::new(5, 5, &c).unwrap();
        let x = AgentState::new(2, 0);
        let goal = AgentState::new(2, 4);
        let r = plan(x, goal, &cv, &PlanOptions::default()).unwrap();
        let mu = subgradient(&r, Control::Right).unwrap();
        let cells = mu.cell_counts(5, 5);
        let q0 = r.q[Control::Right.index()].unwrap();
        let delta = 1e-6;
        for (&j, &count) in &cells {
            let mut c2 = c.clone();
            c2[j] += delta;
            let cv2 = CostView::new(5, 5, &c2).unwrap();
            let r2 = plan(x, goal, &cv2, &PlanOptions::default()).unwrap();
            let q1 = r2.q[Control::Right.index()].unwrap();
            assert!((q1 - q0 - count as f64 * delta).abs() < 1e-12, "cell {j}");
            assert_eq!(subgradient(&r2, Control::Right).unwrap(), mu);
        }
    }

    #[test]
    fn boltzmann_examples() {
        let eq = boltzmann(&[Some(2.0); 4], 1.0).unwrap();
        assert_eq!(eq, [0.25; 4]);
        let one = boltzmann(&[Some(0.0), None, None, None], 0.3).unwrap();
        assert_eq!(one, [1.0, 0.0, 0.0, 0.0]);
        let pi = boltzmann(&[Some(1.0), Some(2.0), Some(3.0), Some(4.0)], 1.0).unwrap();
        // direct evaluation of softmax(-Q)
        let z: f64 = (1..=4).map(|k| (-(k as f64)).exp()).sum();
        for (k, p) in pi.iter().enumerate() {
            assert!((p - (-((k + 1) as f64)).exp() / z).abs() < 1e-15);
        }
        let rounded: Vec<f64> = pi.iter().map(|p| (p * 1e4).round() / 1e4).collect();
        assert_eq!(rounded, vec![0.6439, 0.2369, 0.0871, 0.0321]);
        assert!(boltzmann(&[Some(1.0); 4], 0.0).is_err());
    }

    #[test]
    fn trace_records_expansions() {
        let c = vec![1.0; 16];
        let cv = CostView::new(4, 4, &c).unwrap();
        let opts = PlanOptions { trace: true, ..Default::default() };
        let r = plan(AgentState::new(0, 0), AgentState::new(3, 3), &cv, &opts).unwrap();
        let t = r.trace.unwrap();
        assert_eq!(t.expansions.len(), r.expansions);
        assert_eq!(t.expansions[0], (AgentState::new(3, 3), 0.0));
        assert!(t.expansions.windows(2).all(|w| w[0].1 <= w[1].1));
    }

    #[test]
    fn rejects_negative_costs() {
        assert!(CostView::new(2, 1, &[1.0, -1.0]).is_err());
        assert!(CostView::new(2, 2, &[1.0, 1.0]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn instance() -> impl Strategy<Value = (usize, usize, Vec<f64>, usize, usize)> {
            (2usize..=8, 2usize..=8).prop_flat_map(|(w, h)| {
                (
                    Just(w),
                    Just(h),
                    proptest::collection::vec(
                        prop_oneof![9 => 0.0f64..5.0, 1 => Just(f64::INFINITY)],
                        w * h,
                    ),
                    0..w * h,
                    0..w * h,
                )
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(200))]

            #[test]
            fn astar_matches_bellman((w, h, mut c, xi, gi) in instance()) {
                c[xi] = c[xi].min(1.0);
                let x = AgentState::new(xi / w, xi % w);
                let goal = AgentState::new(gi / w, gi % w);
                let cv = CostView::new(w, h, &c).unwrap();
                let oq = oracle_q(w, h, &c, x, goal);
                for heuristic in [Heuristic::Zero, Heuristic::Manhattan] {
                    let opts = PlanOptions { heuristic, ..Default::default() };
                    let r = plan(x, goal, &cv, &opts).unwrap();
                    prop_assert!(r.expansions <= w * h);
                    for u in 0..4 {
                        match (r.q[u], oq[u]) {
                            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-9),
                            (None, None) => {}
                            other => prop_assert!(false, "mismatch {:?}", other),
                        }
                    }
                    for s in r.closed_states() {
                        let mut at = s;
                        let mut steps = 0;
                        while at != goal {
                            at = r.child(at).unwrap();
                            steps += 1;
                            prop_assert!(steps <= w * h);
                        }
                    }
                    for u in Control::ALL {
                        if let Some(qv) = r.q[u.index()] {
                            let mu = subgradient(&r, u).unwrap();
                            prop_assert!((mu.inner_product(&cv) - qv).abs() < 1e-9);
                        }
                    }
                }
            }
        }
    }
}
