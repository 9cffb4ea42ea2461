//! Simulated 360 degree semantic LiDAR on a `SemanticGrid`.
//!
//! Continuous coordinates put cell `(row, col)` at the point `(col, row)`;
//! angles are measured from the +col axis, counter-clockwise as seen on a
//! map drawn with row 0 at the top (so 90 degrees points up).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridworld::{AgentState, SemanticGrid};

/// Tolerance for corner crossings and end-of-segment touches.
const GEOM_EPS: f64 = 1e-9;

/// A sensed cell with per-class weights over the non-free classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "(usize, usize, Vec<f64>)", from = "(usize, usize, Vec<f64>)")]
pub struct LabeledPoint {
    pub cell: AgentState,
    /// Length K; all-zero for a free-space (max range) return.
    pub weights: Vec<f64>,
}

impl From<LabeledPoint> for (usize, usize, Vec<f64>) {
    fn from(p: LabeledPoint) -> Self {
        (p.cell.row, p.cell.col, p.weights)
    }
}

impl From<(usize, usize, Vec<f64>)> for LabeledPoint {
    fn from((row, col, weights): (usize, usize, Vec<f64>)) -> Self {
        LabeledPoint { cell: AgentState { row, col }, weights }
    }
}

impl LabeledPoint {
    /// `[0, y]`: the weight vector augmented with the free-class slot.
    pub fn augmented(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.weights.len() + 1);
        v.push(0.0);
        v.extend_from_slice(&self.weights);
        v
    }

    pub fn is_free_return(&self) -> bool {
        self.weights.iter().all(|w| *w == 0.0)
    }

    /// Class index (1-based over the full class set) of a one-hot hit.
    pub fn hit_class(&self) -> Option<usize> {
        let (k, w) = self
            .weights
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))?;
        (*w > 0.0).then_some(k + 1)
    }
}

/// All labelled points from one scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub origin: AgentState,
    pub points: Vec<LabeledPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    pub ray_count: usize,
    pub resolution_deg: f64,
    /// Maximum range in cells.
    pub max_range: f64,
    /// Size of the class set including the free class (K + 1).
    pub classes: usize,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self { ray_count: 72, resolution_deg: 5.0, max_range: 3.0, classes: 4 }
    }
}

/// Signed cell coordinates; rays may leave the grid.
pub type Cell = (isize, isize);

/// Cells intersected by a segment of length `length` from the center of `x`
/// along the unit direction `(d_col, d_row)`, excluding the origin cell.
///
/// Supercover traversal: when the segment passes exactly through a cell
/// corner, both side cells are reported (column step first) before the
/// diagonal cell, so no cell touched by the segment is skipped.
pub fn traverse(x: AgentState, d_col: f64, d_row: f64, length: f64) -> Vec<Cell> {
    let mut col = x.col as isize;
    let mut row = x.row as isize;
    let axis = |d: f64| -> (isize, f64, f64) {
        if d.abs() < 1e-12 {
            (0, f64::INFINITY, f64::INFINITY)
        } else {
            (d.signum() as isize, 0.5 / d.abs(), 1.0 / d.abs())
        }
    };
    let (step_c, mut t_c, dt_c) = axis(d_col);
    let (step_r, mut t_r, dt_r) = axis(d_row);
    let mut cells = Vec::new();
    loop {
        let t = t_c.min(t_r);
        if t > length + GEOM_EPS {
            break;
        }
        if (t_c - t_r).abs() <= GEOM_EPS {
            cells.push((row, col + step_c));
            cells.push((row + step_r, col));
            col += step_c;
            row += step_r;
            t_c += dt_c;
            t_r += dt_r;
        } else if t_c < t_r {
            col += step_c;
            t_c += dt_c;
        } else {
            row += step_r;
            t_r += dt_r;
        }
        cells.push((row, col));
    }
    cells
}

/// Unit direction `(d_col, d_row)` of a sensor angle in degrees.
pub fn direction(angle_deg: f64) -> (f64, f64) {
    let a = angle_deg.to_radians();
    // row grows downward, so counter-clockwise means decreasing row
    (a.cos(), -a.sin())
}

/// Ordered cells along the ray at `angle_deg` out to `max_range`.
pub fn ray_cells(x: AgentState, angle_deg: f64, max_range: f64) -> Vec<Cell> {
    let (dc, dr) = direction(angle_deg);
    traverse(x, dc, dr, max_range)
}

/// Ordered cells on the segment from the center of `x` to the center of
/// `target`, ending with `target` itself.
pub fn segment_cells(x: AgentState, target: AgentState) -> Vec<Cell> {
    let dc = target.col as f64 - x.col as f64;
    let dr = target.row as f64 - x.row as f64;
    let len = (dc * dc + dr * dr).sqrt();
    if len == 0.0 {
        return Vec::new();
    }
    traverse(x, dc / len, dr / len, len)
}

fn in_grid(grid: &SemanticGrid, (row, col): Cell) -> Option<AgentState> {
    (row >= 0 && col >= 0 && (row as usize) < grid.height && (col as usize) < grid.width)
        .then(|| AgentState::new(row as usize, col as usize))
}

/// Trace every ray from `x`; each ray stops at the first non-free cell and
/// reports it with a one-hot label, or reports its last free cell with
/// all-zero weights when the range is exhausted.
pub fn scan(grid: &SemanticGrid, x: AgentState, cfg: &SensorConfig) -> Result<PointCloud> {
    if !grid.contains(x) || grid.is_wall(x) {
        return Err(Error::invalid(format!("cannot scan from wall or off-grid cell {x:?}")));
    }
    let k = cfg.classes - 1;
    let mut points = Vec::with_capacity(cfg.ray_count);
    for i in 0..cfg.ray_count {
        let angle = i as f64 * cfg.resolution_deg;
        let mut last_free = None;
        let mut hit = None;
        for cell in ray_cells(x, angle, cfg.max_range) {
            let Some(s) = in_grid(grid, cell) else { break };
            let class = grid.class_at(s);
            if class != 0 {
                if class > k {
                    return Err(Error::ClassOutOfRange { index: class, count: cfg.classes });
                }
                hit = Some((s, class));
                break;
            }
            last_free = Some(s);
        }
        match (hit, last_free) {
            (Some((cell, class)), _) => {
                let mut weights = vec![0.0; k];
                weights[class - 1] = 1.0;
                points.push(LabeledPoint { cell, weights });
            }
            (None, Some(cell)) => points.push(LabeledPoint { cell, weights: vec![0.0; k] }),
            (None, None) => {}
        }
    }
    Ok(PointCloud { origin: x, points })
}
