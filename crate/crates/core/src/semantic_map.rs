//! Recursive Bayesian multi-class occupancy mapping in log-odds form.
//!
//! Each touched cell stores its class log-odds vector `h` (free component
//! pinned to zero) and the accumulated ray evidence `E = sum of [0, y] * dp`
//! that produced it. Because the inverse observation model is linear in the
//! shared parameter matrix `psi`, `dh/dpsi` is exactly `E`, which is what
//! [`LogOddsMap::backprop_to_psi`] uses.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::export;
use crate::gridworld::AgentState;
use crate::sensor::{segment_cells, LabeledPoint, PointCloud};
use crate::tensor::Tensor;

/// Distance from a hit cell's center back to the face the beam strikes.
pub const SURFACE_OFFSET: f64 = 0.5;

/// Slack on the `dp <= epsilon` gate for rounding in the distance difference.
const GATE_SLACK: f64 = 1e-9;

/// Where ray evidence is written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum UpdateMode {
    /// Every cell on the ray with `dp <= epsilon` receives `[0, y] * dp`.
    #[default]
    AlongRay,
    /// Only the hit cell receives `[0, y]`.
    EndpointOnly,
}

/// Linear inverse observation model shared by every ray.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseModelParams {
    /// K + 1.
    pub classes: usize,
    /// Row-major (K+1) x (K+1).
    pub psi: Vec<f64>,
    pub epsilon: f64,
    pub mode: UpdateMode,
}

impl InverseModelParams {
    pub fn zeros(classes: usize) -> Self {
        Self { classes, psi: vec![0.0; classes * classes], epsilon: 0.5, mode: UpdateMode::AlongRay }
    }

    /// `scale` on the diagonal of the class rows, zero elsewhere.
    pub fn diagonal(classes: usize, scale: f64) -> Self {
        let mut p = Self::zeros(classes);
        for k in 1..classes {
            p.psi[k * classes + k] = scale;
        }
        p
    }

    /// The hand-set model used as a reference for map recovery.
    pub fn oracle(classes: usize) -> Self {
        Self::diagonal(classes, 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.psi.len() != self.classes * self.classes {
            return Err(Error::ShapeMismatch {
                expected: format!("{0}x{0}", self.classes),
                got: format!("{} entries", self.psi.len()),
            });
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        Ok(())
    }

    /// `psi * ybar * dp`: the log-odds increment of one active ray cell.
    pub fn increment(&self, ybar: &[f64], dp: f64) -> Vec<f64> {
        let f: Vec<f64> = ybar.iter().map(|y| y * dp).collect();
        let mut out = vec![0.0; self.classes];
        self.apply(&f, &mut out);
        out
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        let n = self.classes;
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.psi[k * n..(k + 1) * n].iter().zip(v).map(|(a, b)| a * b).sum();
        }
    }
}

/// Accumulated loss gradient with respect to `psi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapGradients {
    pub dpsi: Vec<f64>,
}

impl MapGradients {
    pub fn zeros(classes: usize) -> Self {
        Self { dpsi: vec![0.0; classes * classes] }
    }

    pub fn zero(&mut self) {
        self.dpsi.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn add(&mut self, other: &MapGradients) {
        for (a, b) in self.dpsi.iter_mut().zip(&other.dpsi) {
            *a += b;
        }
    }
}

fn center(x: AgentState) -> (f64, f64) {
    (x.col as f64, x.row as f64)
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// `d(x, center of j) - |p - x|`, in cells.
pub fn delta_p(x: AgentState, p: (f64, f64), j: AgentState) -> f64 {
    let o = center(x);
    dist(o, center(j)) - dist(o, p)
}

/// Continuous measurement location of a labelled point seen from `x`.
///
/// Obstacle hits are placed on the beam's line to the hit cell center,
/// `SURFACE_OFFSET` short of that center (the face the beam strikes).
/// Free-space returns sit at the center of the last free cell.
pub fn measurement_point(x: AgentState, point: &LabeledPoint) -> (f64, f64) {
    let o = center(x);
    let c = center(point.cell);
    let d = dist(o, c);
    if point.is_free_return() || d == 0.0 {
        return c;
    }
    let r = (d - SURFACE_OFFSET).max(0.0) / d;
    (o.0 + (c.0 - o.0) * r, o.1 + (c.1 - o.1) * r)
}

/// Active `(cell, [0, y] * dp)` pairs contributed by one point: the COO
/// entries of that point's evidence. Cells off the grid are dropped.
pub fn ray_features(
    x: AgentState,
    point: &LabeledPoint,
    params: &InverseModelParams,
    width: usize,
    height: usize,
) -> Vec<(AgentState, Vec<f64>)> {
    let ybar = point.augmented();
    match params.mode {
        UpdateMode::EndpointOnly => {
            if point.cell.row < height && point.cell.col < width {
                vec![(point.cell, ybar)]
            } else {
                Vec::new()
            }
        }
        UpdateMode::AlongRay => {
            let p = measurement_point(x, point);
            segment_cells(x, point.cell)
                .into_iter()
                .filter(|&(r, c)| r >= 0 && c >= 0 && (r as usize) < height && (c as usize) < width)
                .filter_map(|(r, c)| {
                    let j = AgentState::new(r as usize, c as usize);
                    let dp = delta_p(x, p, j);
                    (dp <= params.epsilon + GATE_SLACK).then(|| (j, ybar.iter().map(|y| y * dp).collect()))
                })
                .collect()
        }
    }
}

/// Log-odds vector `g_j` of the inverse observation model for one point.
pub fn inverse_logodds(
    x: AgentState,
    point: &LabeledPoint,
    j: AgentState,
    params: &InverseModelParams,
    prior: &[f64],
) -> Vec<f64> {
    let feats = ray_features(x, point, params, usize::MAX, usize::MAX);
    match feats.into_iter().find(|(c, _)| *c == j) {
        Some((_, f)) => {
            let mut g = vec![0.0; params.classes];
            params.apply(&f, &mut g);
            g
        }
        None => prior.to_vec(),
    }
}

/// Numerically stable softmax.
pub fn softmax(h: &[f64]) -> Vec<f64> {
    let m = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = h.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Pull a gradient on `p = softmax(h)` back to `h`.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    p.iter().zip(dp).map(|(pk, dk)| pk * (dk - inner)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CellEntry {
    logodds: Vec<f64>,
    evidence: Vec<f64>,
}

/// Sparse per-cell class log-odds; absent cells sit at the prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogOddsMap {
    pub width: usize,
    pub height: usize,
    classes: usize,
    prior: Vec<f64>,
    cells: BTreeMap<usize, CellEntry>,
}

impl LogOddsMap {
    /// Uniform (all-zero) prior.
    pub fn new(width: usize, height: usize, classes: usize) -> Self {
        Self { width, height, classes, prior: vec![0.0; classes], cells: BTreeMap::new() }
    }

    pub fn with_prior(width: usize, height: usize, prior: Vec<f64>) -> Result<Self> {
        if prior.first().copied() != Some(0.0) {
            return Err(Error::invalid("the free-class component of the prior must be 0"));
        }
        let classes = prior.len();
        Ok(Self { width, height, classes, prior, cells: BTreeMap::new() })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    /// Number of stored (touched) cells.
    pub fn stored(&self) -> usize {
        self.cells.len()
    }

    pub fn is_stored(&self, j: usize) -> bool {
        self.cells.contains_key(&j)
    }

    pub fn stored_cells(&self) -> impl Iterator<Item = usize> + '_ {
        self.cells.keys().copied()
    }

    pub fn logodds(&self, j: usize) -> &[f64] {
        self.cells.get(&j).map_or(&self.prior[..], |e| &e.logodds[..])
    }

    /// Accumulated evidence `dh/dpsi` of a cell (zero when untouched).
    pub fn evidence(&self, j: usize) -> Option<&[f64]> {
        self.cells.get(&j).map(|e| &e.evidence[..])
    }

    /// Fold one scan taken at `x` into the map.
    pub fn update(&mut self, x: AgentState, cloud: &PointCloud, params: &InverseModelParams) -> Result<()> {
        params.validate()?;
        if params.classes != self.classes {
            return Err(Error::ShapeMismatch {
                expected: format!("{} classes", self.classes),
                got: format!("{} classes", params.classes),
            });
        }
        if cloud.origin != x {
            return Err(Error::invalid(format!("scan origin {:?} differs from state {x:?}", cloud.origin)));
        }
        let mut entries: Vec<(usize, Vec<f64>)> = Vec::new();
        for point in &cloud.points {
            if point.weights.len() + 1 != self.classes {
                return Err(Error::ShapeMismatch {
                    expected: format!("{} weights", self.classes - 1),
                    got: format!("{} weights", point.weights.len()),
                });
            }
            for (j, f) in ray_features(x, point, params, self.width, self.height) {
                entries.push((j.row * self.width + j.col, f));
            }
        }
        // canonical order: the per-scan sum must not depend on point order
        entries.sort_by(|a, b| {
            a.0.cmp(&b.0).then_with(|| {
                a.1.iter().zip(&b.1).map(|(u, v)| u.total_cmp(v)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
            })
        });
        let n = self.classes;
        let mut inc = vec![0.0; n];
        let mut i = 0;
        while i < entries.len() {
            let j = entries[i].0;
            let mut sum = vec![0.0; n];
            let mut count = 0usize;
            while i < entries.len() && entries[i].0 == j {
                for (s, f) in sum.iter_mut().zip(&entries[i].1) {
                    *s += f;
                }
                count += 1;
                i += 1;
            }
            params.apply(&sum, &mut inc);
            let prior = &self.prior;
            let entry = self.cells.entry(j).or_insert_with(|| CellEntry {
                logodds: prior.clone(),
                evidence: vec![0.0; n],
            });
            for k in 0..n {
                entry.logodds[k] += inc[k] - count as f64 * prior[k];
                entry.evidence[k] += sum[k];
            }
            entry.logodds[0] = 0.0;
        }
        Ok(())
    }

    /// Class posterior of cell `j`.
    pub fn posterior(&self, j: usize) -> Vec<f64> {
        softmax(self.logodds(j))
    }

    /// Most probable class; ties go to the lowest index.
    pub fn argmax(&self, j: usize) -> usize {
        let p = self.posterior(j);
        let mut best = 0;
        for k in 1..p.len() {
            if p[k] > p[best] {
                best = k;
            }
        }
        best
    }

    /// Dense `(K+1) x H x W` tensor of class posteriors.
    pub fn posterior_tensor(&self) -> Tensor {
        let hw = self.width * self.height;
        let mut t = Tensor::zeros(self.classes, self.height, self.width);
        let base = softmax(&self.prior);
        for j in 0..hw {
            for (k, v) in base.iter().enumerate() {
                t.data[k * hw + j] = *v;
            }
        }
        for (&j, e) in &self.cells {
            for (k, v) in softmax(&e.logodds).into_iter().enumerate() {
                t.data[k * hw + j] = v;
            }
        }
        t
    }

    /// Log-odds gradients for stored cells from a gradient on the dense
    /// posterior tensor (through the softmax Jacobian).
    pub fn logodds_grad_from_posterior(&self, dpost: &Tensor) -> Vec<(usize, Vec<f64>)> {
        let hw = self.width * self.height;
        self.cells
            .iter()
            .map(|(&j, e)| {
                let p = softmax(&e.logodds);
                let dp: Vec<f64> = (0..self.classes).map(|k| dpost.data[k * hw + j]).collect();
                (j, softmax_backward(&p, &dp))
            })
            .collect()
    }

    /// Accumulate `dpsi += dh_j (outer) E_j` over the given cells. The free
    /// row is masked because `h^0` is pinned.
    pub fn backprop_to_psi(&self, upstream: &[(usize, Vec<f64>)], grads: &mut MapGradients) -> Result<()> {
        let n = self.classes;
        for (j, dh) in upstream {
            let Some(e) = self.cells.get(j) else {
                if dh.iter().all(|v| *v == 0.0) {
                    continue;
                }
                return Err(Error::invalid(format!("gradient on untouched cell {j}")));
            };
            if dh.len() != n {
                return Err(Error::ShapeMismatch { expected: format!("{n}"), got: format!("{}", dh.len()) });
            }
            for k in 1..n {
                let row = &mut grads.dpsi[k * n..(k + 1) * n];
                for (g, ev) in row.iter_mut().zip(&e.evidence) {
                    *g += dh[k] * ev;
                }
            }
        }
        Ok(())
    }

    /// CSV rows `j,h0,...,hK` for stored cells.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("j");
        for k in 0..self.classes {
            out.push_str(&format!(",h{k}"));
        }
        out.push('\n');
        for (j, e) in &self.cells {
            out.push_str(&j.to_string());
            for v in &e.logodds {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// PPM image of the most probable class per cell.
    pub fn write_argmax_ppm(&self, path: &Path, scale: usize) -> Result<()> {
        let labels: Vec<usize> = (0..self.width * self.height).map(|j| self.argmax(j)).collect();
        export::write_label_ppm(path, self.width, self.height, &labels, scale)
    }
}
