//! Procedural semantic grid worlds, deterministic agent dynamics and the
//! shortest-path expert used to produce demonstrations.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sensor::{self, PointCloud, SensorConfig};

/// Ordered class labels with the expert's per-class arrival cost.
///
/// Index 0 is always the free class. One class is marked as the wall: it is
/// never traversable and the agent bumps against it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSet {
    labels: Vec<String>,
    expert_costs: Vec<f64>,
    wall: usize,
}

impl ClassSet {
    pub fn new(labels: Vec<String>, expert_costs: Vec<f64>, wall: usize) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::invalid("a class set needs the free class and at least one other"));
        }
        if labels.len() != expert_costs.len() {
            return Err(Error::invalid(format!(
                "{} labels but {} expert costs",
                labels.len(),
                expert_costs.len()
            )));
        }
        if wall == 0 || wall >= labels.len() {
            return Err(Error::invalid("the wall class must be a non-free class index"));
        }
        if expert_costs.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(Error::invalid("expert costs must be finite and strictly positive"));
        }
        let wall_cost = expert_costs[wall];
        if expert_costs.iter().any(|&c| c > wall_cost) {
            return Err(Error::invalid("the wall cost must dominate every traversable cost"));
        }
        Ok(Self { labels, expert_costs, wall })
    }

    /// empty / wall / lava / lawn with arrival costs 1 / 100 / 10 / 0.5.
    pub fn minigrid() -> Self {
        Self {
            labels: ["empty", "wall", "lava", "lawn"].iter().map(|s| s.to_string()).collect(),
            expert_costs: vec![1.0, 100.0, 10.0, 0.5],
            wall: 1,
        }
    }

    /// Number of classes including the free class (K + 1).
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn expert_costs(&self) -> &[f64] {
        &self.expert_costs
    }

    pub fn wall(&self) -> usize {
        self.wall
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// Cost the expert pays for arriving at a cell of class `class_index`.
pub fn expert_cost_of_arrival(classes: &ClassSet, class_index: usize) -> Result<f64> {
    classes
        .expert_costs
        .get(class_index)
        .copied()
        .ok_or(Error::ClassOutOfRange { index: class_index, count: classes.len() })
}

/// Integer cell coordinates of the agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AgentState {
    pub row: usize,
    pub col: usize,
}

impl AgentState {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    pub fn manhattan(&self, other: &AgentState) -> usize {
        self.row.abs_diff(other.row) + self.col.abs_diff(other.col)
    }

    /// Euclidean distance between cell centers.
    pub fn euclidean(&self, other: &AgentState) -> f64 {
        let dr = self.row as f64 - other.row as f64;
        let dc = self.col as f64 - other.col as f64;
        (dr * dr + dc * dc).sqrt()
    }
}

/// The four grid moves, in the fixed order used for every tie-break.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Control {
    Up,
    Down,
    Left,
    Right,
}

impl Control {
    pub const ALL: [Control; 4] = [Control::Up, Control::Down, Control::Left, Control::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Control> {
        Self::ALL.get(i).copied()
    }

    pub fn delta(self) -> (isize, isize) {
        match self {
            Control::Up => (-1, 0),
            Control::Down => (1, 0),
            Control::Left => (0, -1),
            Control::Right => (0, 1),
        }
    }

    pub fn opposite(self) -> Control {
        match self {
            Control::Up => Control::Down,
            Control::Down => Control::Up,
            Control::Left => Control::Right,
            Control::Right => Control::Left,
        }
    }

    /// The in-bounds 4-neighbour of `x`, ignoring cell contents.
    pub fn neighbor(self, x: AgentState, width: usize, height: usize) -> Option<AgentState> {
        let (dr, dc) = self.delta();
        let row = x.row.checked_add_signed(dr)?;
        let col = x.col.checked_add_signed(dc)?;
        (row < height && col < width).then_some(AgentState { row, col })
    }
}

/// Parameters of the rectangle-overlay environment generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridParams {
    pub width: usize,
    pub height: usize,
    /// Inclusive range of the number of rectangles.
    pub rect_count: (usize, usize),
    /// Inclusive range of rectangle side lengths.
    pub rect_size: (usize, usize),
    /// Sampling weight of each class for a rectangle; entry 0 (free) is ignored.
    pub class_weights: Vec<f64>,
}

impl GridParams {
    /// 16x16, 2-6 rectangles of side 2-6, uniform over the three non-free classes.
    pub fn desk(size: usize) -> Self {
        Self {
            width: size,
            height: size,
            rect_count: (2, 6),
            rect_size: (2, 6),
            class_weights: vec![0.0, 1.0, 1.0, 1.0],
        }
    }
}

impl Default for GridParams {
    fn default() -> Self {
        Self::desk(16)
    }
}

/// Ground-truth class label of every cell, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticGrid {
    pub width: usize,
    pub height: usize,
    pub cells: Vec<u8>,
    pub seed: u64,
    pub wall: u8,
}

impl SemanticGrid {
    /// A grid whose interior is all free and whose border is wall.
    pub fn bordered(width: usize, height: usize, wall: u8) -> Self {
        let mut cells = vec![0u8; width * height];
        for r in 0..height {
            for c in 0..width {
                if r == 0 || c == 0 || r + 1 == height || c + 1 == width {
                    cells[r * width + c] = wall;
                }
            }
        }
        Self { width, height, cells, seed: 0, wall }
    }

    /// Parse rows of single-digit class indices, e.g. `["1111", "1001", ...]`.
    pub fn from_rows(rows: &[&str], wall: u8) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        let mut cells = Vec::with_capacity(width * height);
        for row in rows {
            if row.len() != width {
                return Err(Error::invalid("ragged grid rows"));
            }
            for ch in row.chars() {
                let d = ch.to_digit(10).ok_or_else(|| Error::invalid(format!("bad cell {ch:?}")))?;
                cells.push(d as u8);
            }
        }
        Ok(Self { width, height, cells, seed: 0, wall })
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn index(&self, x: AgentState) -> usize {
        x.row * self.width + x.col
    }

    pub fn state(&self, index: usize) -> AgentState {
        AgentState { row: index / self.width, col: index % self.width }
    }

    pub fn contains(&self, x: AgentState) -> bool {
        x.row < self.height && x.col < self.width
    }

    pub fn class_at(&self, x: AgentState) -> usize {
        self.cells[self.index(x)] as usize
    }

    pub fn is_wall(&self, x: AgentState) -> bool {
        self.cells[self.index(x)] == self.wall
    }

    pub fn is_free(&self, x: AgentState) -> bool {
        self.cells[self.index(x)] == 0
    }

    pub fn set(&mut self, x: AgentState, class: u8) {
        let i = self.index(x);
        self.cells[i] = class;
    }

    pub fn states(&self) -> impl Iterator<Item = AgentState> + '_ {
        (0..self.len()).map(|i| self.state(i))
    }

    /// Per-cell expert arrival cost with the wall mapped to +inf (impassable).
    pub fn expert_cost_field(&self, classes: &ClassSet) -> Vec<f64> {
        self.cells
            .iter()
            .map(|&k| if k == self.wall { f64::INFINITY } else { classes.expert_costs[k as usize] })
            .collect()
    }
}

/// Generate a bordered grid with class rectangles overlaid on a free background.
pub fn generate_environment(seed: u64, params: &GridParams) -> Result<SemanticGrid> {
    let GridParams { width, height, rect_count, rect_size, class_weights } = params;
    let (width, height) = (*width, *height);
    if width < 4 || height < 4 {
        return Err(Error::invalid(format!("grid must be at least 4x4, got {width}x{height}")));
    }
    if rect_count.0 > rect_count.1 || rect_size.0 > rect_size.1 || rect_size.0 == 0 {
        return Err(Error::invalid("empty rectangle count or size range"));
    }
    if class_weights.len() < 2 {
        return Err(Error::invalid("class weights must cover at least one non-free class"));
    }
    let total: f64 = class_weights[1..].iter().sum();
    if class_weights.iter().any(|w| !w.is_finite() || *w < 0.0) || (rect_count.1 > 0 && total <= 0.0) {
        return Err(Error::invalid("class weights must be non-negative with a positive sum"));
    }

    let mut grid = SemanticGrid::bordered(width, height, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(rect_count.0..=rect_count.1);
    for _ in 0..count {
        let h = rng.gen_range(rect_size.0..=rect_size.1);
        let w = rng.gen_range(rect_size.0..=rect_size.1);
        let r0 = rng.gen_range(1..height - 1);
        let c0 = rng.gen_range(1..width - 1);
        let mut pick = rng.gen::<f64>() * total;
        let mut class = class_weights.len() - 1;
        for (k, &wk) in class_weights.iter().enumerate().skip(1) {
            if pick < wk {
                class = k;
                break;
            }
            pick -= wk;
        }
        for r in r0..(r0 + h).min(height - 1) {
            for c in c0..(c0 + w).min(width - 1) {
                grid.cells[r * width + c] = class as u8;
            }
        }
    }
    grid.seed = seed;
    Ok(grid)
}

/// Deterministic dynamics: move to the neighbour unless it is wall (or off-grid).
pub fn step(grid: &SemanticGrid, x: AgentState, u: Control) -> AgentState {
    match u.neighbor(x, grid.width, grid.height) {
        Some(next) if !grid.is_wall(next) => next,
        _ => x,
    }
}

#[derive(Clone, Copy, PartialEq)]
struct HeapEntry {
    cost: f64,
    index: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on (cost, index)
        other.cost.total_cmp(&self.cost).then_with(|| other.index.cmp(&self.index))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Exact cost-to-go to `goal` under per-cell arrival costs (Dijkstra over
/// predecessors). `None` marks cells that cannot reach the goal; cells with
/// infinite cost are impassable.
pub fn cost_to_go(width: usize, height: usize, cost: &[f64], goal: AgentState) -> Vec<Option<f64>> {
    let n = width * height;
    let mut dist: Vec<Option<f64>> = vec![None; n];
    let mut done = vec![false; n];
    let g = goal.row * width + goal.col;
    dist[g] = Some(0.0);
    let mut heap = BinaryHeap::new();
    heap.push(HeapEntry { cost: 0.0, index: g });
    while let Some(HeapEntry { cost: d, index }) = heap.pop() {
        if done[index] {
            continue;
        }
        done[index] = true;
        let x = AgentState { row: index / width, col: index % width };
        let arrival = cost[index];
        if !arrival.is_finite() && index != g {
            continue;
        }
        for u in Control::ALL {
            let Some(pred) = u.neighbor(x, width, height) else { continue };
            let p = pred.row * width + pred.col;
            if done[p] || !cost[p].is_finite() {
                continue;
            }
            let nd = d + arrival;
            if dist[p].is_none_or(|old| nd < old) {
                dist[p] = Some(nd);
                heap.push(HeapEntry { cost: nd, index: p });
            }
        }
    }
    dist
}

/// One demonstrated step: the state, the expert control and the scan taken there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoStep {
    pub state: AgentState,
    pub control: Control,
    pub scan: PointCloud,
}

/// An expert trajectory from `start` to `goal` on `grid`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub grid: SemanticGrid,
    pub start: AgentState,
    pub goal: AgentState,
    pub steps: Vec<DemoStep>,
}

impl Demonstration {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// States visited, including the final goal state.
    pub fn trajectory(&self) -> Vec<AgentState> {
        let mut states: Vec<AgentState> = self.steps.iter().map(|s| s.state).collect();
        states.push(self.goal);
        states
    }

    /// Replays the controls through the dynamics and checks the recorded states.
    pub fn replay_consistent(&self) -> bool {
        let mut x = self.start;
        for s in &self.steps {
            if s.state != x {
                return false;
            }
            x = step(&self.grid, x, s.control);
        }
        x == self.goal
    }
}

/// Expert controls along a minimum-arrival-cost path, or `None` when the goal
/// cannot be reached. Ties go to the first control in `Control::ALL` order.
pub fn expert_controls(
    grid: &SemanticGrid,
    classes: &ClassSet,
    start: AgentState,
    goal: AgentState,
) -> Option<Vec<(AgentState, Control)>> {
    let cost = grid.expert_cost_field(classes);
    let togo = cost_to_go(grid.width, grid.height, &cost, goal);
    togo[grid.index(start)]?;
    let mut x = start;
    let mut out = Vec::new();
    while x != goal {
        let mut best: Option<(f64, Control, AgentState)> = None;
        for u in Control::ALL {
            let Some(next) = u.neighbor(x, grid.width, grid.height) else { continue };
            let Some(v) = togo[grid.index(next)] else { continue };
            if grid.is_wall(next) {
                continue;
            }
            let q = cost[grid.index(next)] + v;
            if best.is_none_or(|(b, _, _)| q < b) {
                best = Some((q, u, next));
            }
        }
        let (_, u, next) = best?;
        out.push((x, u));
        x = next;
    }
    Some(out)
}

/// Run the expert from `start` to `goal`, scanning at every visited state.
pub fn generate_demonstration(
    grid: &SemanticGrid,
    start: AgentState,
    goal: AgentState,
    classes: &ClassSet,
    sensor_cfg: &SensorConfig,
) -> Result<Option<Demonstration>> {
    for (name, x) in [("start", start), ("goal", goal)] {
        if !grid.contains(x) || grid.is_wall(x) {
            return Err(Error::invalid(format!("{name} {x:?} is not a traversable cell")));
        }
    }
    let Some(path) = expert_controls(grid, classes, start, goal) else {
        return Ok(None);
    };
    let mut steps = Vec::with_capacity(path.len());
    for (state, control) in path {
        let scan = sensor::scan(grid, state, sensor_cfg)?;
        steps.push(DemoStep { state, control, scan });
    }
    Ok(Some(Demonstration { grid: grid.clone(), start, goal, steps }))
}

/// Total expert arrival cost along a state sequence.
pub fn path_cost(grid: &SemanticGrid, classes: &ClassSet, states: &[AgentState]) -> f64 {
    states.iter().skip(1).map(|&x| classes.expert_costs[grid.class_at(x)]).sum()
}

/// Sample a free start/goal pair with Manhattan separation of at least half
/// the grid side and produce its demonstration. Returns `None` when no
/// feasible pair is found within a fixed number of draws.
pub fn sample_episode(
    seed: u64,
    params: &GridParams,
    classes: &ClassSet,
    sensor_cfg: &SensorConfig,
) -> Result<Option<Demonstration>> {
    const DRAWS: usize = 64;
    let grid = generate_environment(seed, params)?;
    let free: Vec<AgentState> = grid.states().filter(|x| grid.is_free(*x)).collect();
    if free.len() < 2 {
        return Ok(None);
    }
    let min_sep = params.width.min(params.height) / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    for _ in 0..DRAWS {
        let start = free[rng.gen_range(0..free.len())];
        let goal = free[rng.gen_range(0..free.len())];
        if start.manhattan(&goal) < min_sep {
            continue;
        }
        if let Some(demo) = generate_demonstration(&grid, start, goal, classes, sensor_cfg)? {
            return Ok(Some(demo));
        }
    }
    Ok(None)
}

/// Collect `count` episodes from consecutive seeds starting at `first_seed`,
/// skipping seeds without a feasible episode.
pub fn sample_episodes(
    first_seed: u64,
    count: usize,
    params: &GridParams,
    classes: &ClassSet,
    sensor_cfg: &SensorConfig,
) -> Result<Vec<Demonstration>> {
    let mut out = Vec::with_capacity(count);
    let mut seed = first_seed;
    while out.len() < count {
        if let Some(demo) = sample_episode(seed, params, classes, sensor_cfg)? {
            out.push(demo);
        }
        seed += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corridor_grid() -> SemanticGrid {
        // lava corridor on row 1, lawn corridor on row 3, free row 2 blocked mid-way
        SemanticGrid::from_rows(
            &["1111111", "1022201", "1011111", "1033301", "1111111"],
            1,
        )
        .unwrap()
    }

    #[test]
    fn zero_rectangles_gives_free_interior() {
        let params = GridParams { rect_count: (0, 0), ..GridParams::desk(16) };
        let g = generate_environment(0, &params).unwrap();
        for x in g.states() {
            let border = x.row == 0 || x.col == 0 || x.row == 15 || x.col == 15;
            assert_eq!(g.is_wall(x), border, "{x:?}");
            if !border {
                assert!(g.is_free(x));
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_labels_valid() {
        let p = GridParams::desk(16);
        assert_eq!(generate_environment(7, &p).unwrap(), generate_environment(7, &p).unwrap());
        let g = generate_environment(1, &p).unwrap();
        assert!(g.cells.iter().all(|&k| k < 4));
        for x in g.states() {
            if x.row == 0 || x.col == 0 || x.row == 15 || x.col == 15 {
                assert!(g.is_wall(x));
            }
        }
    }

    #[test]
    fn degenerate_dimensions_rejected() {
        let p = GridParams::desk(3);
        assert!(matches!(generate_environment(0, &p), Err(Error::InvalidArgument(_))));
        let p = GridParams { rect_size: (3, 2), ..GridParams::desk(8) };
        assert!(generate_environment(0, &p).is_err());
    }

    #[test]
    fn step_moves_and_bumps() {
        let g = SemanticGrid::bordered(6, 6, 1);
        assert_eq!(step(&g, AgentState::new(1, 1), Control::Right), AgentState::new(1, 2));
        assert_eq!(step(&g, AgentState::new(1, 1), Control::Up), AgentState::new(1, 1));
        let mut x = AgentState::new(2, 1);
        for _ in 0..3 {
            x = step(&g, x, Control::Right);
        }
        for _ in 0..3 {
            x = step(&g, x, Control::Left);
        }
        assert_eq!(x, AgentState::new(2, 1));
    }

    #[test]
    fn expert_costs_match_minigrid() {
        let cs = ClassSet::minigrid();
        assert_eq!(expert_cost_of_arrival(&cs, 3).unwrap(), 0.5);
        assert_eq!(expert_cost_of_arrival(&cs, 1).unwrap(), 100.0);
        assert_eq!(expert_cost_of_arrival(&cs, 0).unwrap(), 1.0);
        assert_eq!(expert_cost_of_arrival(&cs, 2).unwrap(), 10.0);
        assert!(matches!(
            expert_cost_of_arrival(&cs, 4),
            Err(Error::ClassOutOfRange { index: 4, count: 4 })
        ));
    }

    #[test]
    fn class_set_validation() {
        let l = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert!(ClassSet::new(l(&["a", "b"]), vec![1.0, 0.0], 1).is_err());
        assert!(ClassSet::new(l(&["a", "b", "c"]), vec![1.0, 2.0, 5.0], 1).is_err());
        assert!(ClassSet::new(l(&["a", "b"]), vec![1.0, 2.0], 0).is_err());
        assert!(ClassSet::new(l(&["a", "b"]), vec![1.0, 2.0], 1).is_ok());
    }

    #[test]
    fn zero_length_demo_when_start_is_goal() {
        let g = SemanticGrid::bordered(6, 6, 1);
        let x = AgentState::new(2, 2);
        let d = generate_demonstration(&g, x, x, &ClassSet::minigrid(), &SensorConfig::default())
            .unwrap()
            .unwrap();
        assert!(d.is_empty());
        assert!(d.replay_consistent());
    }

    #[test]
    fn expert_prefers_lawn_corridor() {
        let g = corridor_grid();
        let cs = ClassSet::minigrid();
        let path = expert_controls(&g, &cs, AgentState::new(2, 1), AgentState::new(3, 5)).unwrap();
        let states: Vec<_> = path.iter().map(|p| p.0).collect();
        assert!(states.contains(&AgentState::new(3, 2)));
        assert!(!states.iter().any(|x| x.row == 1));
    }

    #[test]
    fn infeasible_pair_reported() {
        let g = SemanticGrid::from_rows(&["11111", "10101", "11111"], 1).unwrap();
        let r = generate_demonstration(
            &g,
            AgentState::new(1, 1),
            AgentState::new(1, 3),
            &ClassSet::minigrid(),
            &SensorConfig::default(),
        )
        .unwrap();
        assert!(r.is_none());
    }

    #[test]
    fn wall_start_is_invalid() {
        let g = SemanticGrid::bordered(5, 5, 1);
        let r = generate_demonstration(
            &g,
            AgentState::new(0, 0),
            AgentState::new(2, 2),
            &ClassSet::minigrid(),
            &SensorConfig::default(),
        );
        assert!(r.is_err());
    }

    #[test]
    fn sampled_episodes_replay_and_are_separated() {
        let p = GridParams::desk(16);
        let cs = ClassSet::minigrid();
        let eps = sample_episodes(100, 5, &p, &cs, &SensorConfig::default()).unwrap();
        assert_eq!(eps.len(), 5);
        for d in &eps {
            assert!(d.replay_consistent());
            assert!(d.start.manhattan(&d.goal) >= 8);
            assert!(d.grid.is_free(d.start) && d.grid.is_free(d.goal));
        }
        let again = sample_episodes(100, 5, &p, &cs, &SensorConfig::default()).unwrap();
        assert_eq!(eps, again);
    }
}
