//! End-to-end training of the map and cost parameters from demonstrations,
//! and closed-loop rollouts of the learned policy.
//!
//! Per step `t` the loss is `-ln pi(u*_t | x_t)` with
//! `pi(u) ∝ exp(-Q(x_t, u) / alpha)`. Its gradient with respect to `Q(u)` is
//! `(1{u = u*} - pi(u)) / alpha`; the planner's visitation counts move that
//! onto cells of the cost field, the cost encoder backward moves it onto the
//! posterior tensor, and the map backward moves it onto `psi`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::costnet::{Adam, CostEncoder, CostField, CostModel, EncoderCheckpoint};
use crate::error::{Error, Result};
use crate::export::write_text;
use crate::gridworld::{step, AgentState, ClassSet, Control, Demonstration, SemanticGrid};
use crate::metrics::{self, RolloutOutcome};
use crate::planner::{self, boltzmann, CostView, PlanOptions, PlanResult};
use crate::semantic_map::{InverseModelParams, LogOddsMap, MapGradients};
use crate::sensor::{self, PointCloud, SensorConfig};

/// Loss charged to a step whose demonstrated control has zero probability.
pub const LOSS_CLAMP: f64 = 50.0;
pub const STATE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub epochs: usize,
    /// Episodes per Adam step.
    pub batch_size: usize,
    pub seed: u64,
    /// Save a resumable checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    pub plan: PlanOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            epochs: 20,
            batch_size: 8,
            seed: 0,
            checkpoint_every: 1,
            plan: PlanOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::invalid("alpha must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        Ok(())
    }
}

/// Learnable parameters: the inverse observation model and the cost encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub psi: InverseModelParams,
    pub encoder: CostEncoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub psi: InverseModelParams,
    pub encoder: EncoderCheckpoint,
}

impl Model {
    /// Identity on the class rows of `psi` and a freshly seeded encoder.
    pub fn new(classes: usize, seed: u64) -> Self {
        Self { psi: InverseModelParams::diagonal(classes, 1.0), encoder: CostEncoder::new(classes, seed) }
    }

    pub fn classes(&self) -> usize {
        self.psi.classes
    }

    pub fn param_count(&self) -> usize {
        self.encoder.params.len() + self.psi.psi.len()
    }

    /// Encoder parameters followed by `psi`.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = self.encoder.params.flatten();
        v.extend_from_slice(&self.psi.psi);
        v
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::ShapeMismatch { expected: self.param_count().to_string(), got: flat.len().to_string() });
        }
        let n = self.encoder.params.len();
        self.encoder.params.assign_flat(&flat[..n])?;
        self.psi.psi.copy_from_slice(&flat[n..]);
        Ok(())
    }

    pub fn checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint { psi: self.psi.clone(), encoder: self.encoder.checkpoint() }
    }

    pub fn from_checkpoint(ck: ModelCheckpoint) -> Result<Self> {
        ck.psi.validate()?;
        let encoder = CostEncoder::from_checkpoint(ck.encoder)?;
        if encoder.in_channels != ck.psi.classes {
            return Err(Error::Schema("encoder input channels differ from the class count".into()));
        }
        Ok(Self { psi: ck.psi, encoder })
    }

    /// Fold the scan into `map`, run the encoder and plan at `x`.
    fn step_forward(
        &self,
        map: &mut LogOddsMap,
        x: AgentState,
        scan: &PointCloud,
        goal: AgentState,
        opts: &PlanOptions,
    ) -> Result<(CostField, PlanResult)> {
        map.update(x, scan, &self.psi)?;
        let field = self.encoder.forward(&map.posterior_tensor())?;
        let view = CostView::new(field.width, field.height, &field.values)?;
        let plan = planner::plan(x, goal, &view, opts)?;
        Ok((field, plan))
    }
}

/// Per-cell cost gradient of one step: `sum_u coef(u) * mu_u`.
pub fn cell_gradient(plan: &PlanResult, coef: &[f64; 4]) -> Result<BTreeMap<usize, f64>> {
    let (w, h) = plan.dims();
    let mut out = BTreeMap::new();
    for u in Control::ALL {
        if plan.q[u.index()].is_none() || coef[u.index()] == 0.0 {
            continue;
        }
        let mu = planner::subgradient(plan, u)?;
        for (cell, count) in mu.cell_counts(w, h) {
            *out.entry(cell).or_insert(0.0) += coef[u.index()] * count as f64;
        }
    }
    Ok(out)
}

/// `dL/dQ(u) = (1{u = u*} - pi(u)) / alpha`.
pub fn q_coefficients(pi: &[f64; 4], expert: Control, alpha: f64) -> [f64; 4] {
    let mut c = [0.0; 4];
    for u in 0..4 {
        let ind = if u == expert.index() { 1.0 } else { 0.0 };
        c[u] = (ind - pi[u]) / alpha;
    }
    c
}

/// `-ln pi(u*)`, or `None` when `pi(u*) = 0`.
pub fn nll_loss(pi: &[f64; 4], expert: Control) -> Option<f64> {
    let p = pi[expert.index()];
    (p > 0.0).then(|| -p.ln())
}

/// Loss, gradient and bookkeeping for one demonstration.
#[derive(Debug, Clone)]
pub struct EpisodeGradient {
    /// Sum of per-step losses.
    pub loss: f64,
    pub step_losses: Vec<f64>,
    pub policies: Vec<[f64; 4]>,
    pub controls: Vec<Control>,
    /// Flat gradient, encoder parameters followed by `psi`.
    pub grad: Vec<f64>,
    /// Steps whose demonstrated control had zero probability.
    pub incidents: usize,
    /// Per step, per control: the cell counts of the optimal trajectory.
    pub paths: Vec<[Vec<(usize, u32)>; 4]>,
}

/// Run the demonstration through the model and differentiate the summed
/// step losses with respect to every parameter.
pub fn loss_gradient_step(model: &Model, demo: &Demonstration, cfg: &TrainConfig) -> Result<EpisodeGradient> {
    run_episode(model, demo, cfg, true)
}

/// Forward-only variant: policies and losses, no gradient.
pub fn teacher_forced(model: &Model, demo: &Demonstration, cfg: &TrainConfig) -> Result<EpisodeGradient> {
    run_episode(model, demo, cfg, false)
}

fn run_episode(model: &Model, demo: &Demonstration, cfg: &TrainConfig, with_grad: bool) -> Result<EpisodeGradient> {
    let (w, h) = (demo.grid.width, demo.grid.height);
    let mut map = LogOddsMap::new(w, h, model.classes());
    let mut dphi = model.encoder.params.zeros_like();
    let mut dpsi = MapGradients::zeros(model.classes());
    let mut out = EpisodeGradient {
        loss: 0.0,
        step_losses: Vec::with_capacity(demo.len()),
        policies: Vec::with_capacity(demo.len()),
        controls: Vec::with_capacity(demo.len()),
        grad: Vec::new(),
        incidents: 0,
        paths: Vec::new(),
    };
    for (t, s) in demo.steps.iter().enumerate() {
        let (field, plan) = model.step_forward(&mut map, s.state, &s.scan, demo.goal, &cfg.plan)?;
        let pi = match boltzmann(&plan.q, cfg.alpha) {
            Ok(pi) => pi,
            Err(Error::Unreachable) => [0.0; 4],
            Err(e) => return Err(e),
        };
        out.policies.push(pi);
        out.controls.push(s.control);
        let Some(loss) = nll_loss(&pi, s.control) else {
            log::warn!(
                "step {t} at {:?}: demonstrated {:?} has zero probability (Q = {:?}); loss clamped",
                s.state,
                s.control,
                plan.q
            );
            out.incidents += 1;
            out.loss += LOSS_CLAMP;
            out.step_losses.push(LOSS_CLAMP);
            continue;
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {t}: Q = {:?}, pi = {pi:?}", plan.q)));
        }
        out.loss += loss;
        out.step_losses.push(loss);
        if !with_grad {
            continue;
        }
        let mut paths: [Vec<(usize, u32)>; 4] = Default::default();
        for u in Control::ALL {
            if plan.q[u.index()].is_some() {
                paths[u.index()] = planner::subgradient(&plan, u)?.cell_counts(w, h).into_iter().collect();
            }
        }
        let coef = q_coefficients(&pi, s.control, cfg.alpha);
        let mut dc: BTreeMap<usize, f64> = BTreeMap::new();
        for u in 0..4 {
            for &(cell, count) in &paths[u] {
                *dc.entry(cell).or_insert(0.0) += coef[u] * count as f64;
            }
        }
        out.paths.push(paths);
        let upstream: Vec<(usize, f64)> = dc.into_iter().filter(|(_, g)| *g != 0.0).collect();
        if upstream.is_empty() {
            continue;
        }
        let (g_phi, d_post) = model.encoder.backward(&field, &upstream)?;
        if !g_phi.is_finite() || !d_post.is_finite() {
            return Err(Error::NonFinite(format!("encoder gradient at step {t}")));
        }
        dphi.add_assign(&g_phi);
        let dh = map.logodds_grad_from_posterior(&d_post);
        map.backprop_to_psi(&dh, &mut dpsi)?;
    }
    if with_grad {
        out.grad = dphi.flatten();
        out.grad.extend_from_slice(&dpsi.dpsi);
    }
    Ok(out)
}

/// Teacher-forced NLL and accuracy over a set of demonstrations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub nll: f64,
    pub acc: f64,
    pub steps: usize,
}

pub fn evaluate_steps(model: &Model, demos: &[Demonstration], cfg: &TrainConfig) -> Result<StepMetrics> {
    let mut policies = Vec::new();
    let mut controls = Vec::new();
    for d in demos {
        let e = teacher_forced(model, d, cfg)?;
        policies.extend(e.policies);
        controls.extend(e.controls);
    }
    Ok(StepMetrics {
        nll: metrics::nll(&policies, &controls)?,
        acc: metrics::accuracy(&policies, &controls)?,
        steps: policies.len(),
    })
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_nll: f64,
    pub train_acc: f64,
    pub val_nll: Option<f64>,
    pub val_acc: Option<f64>,
    pub incidents: usize,
}

/// Everything needed to resume training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochReport>,
    pub best: Option<(usize, f64)>,
    pub best_model: Model,
}

#[derive(Serialize, Deserialize)]
struct TrainStateFile {
    version: u32,
    model: ModelCheckpoint,
    adam: Adam,
    epoch: usize,
    history: Vec<EpochReport>,
    best: Option<(usize, f64)>,
    best_model: ModelCheckpoint,
}

impl TrainState {
    pub fn new(model: Model, cfg: &TrainConfig) -> Self {
        let mut adam = Adam::new(model.param_count(), cfg.lr);
        adam.beta1 = cfg.beta1;
        adam.beta2 = cfg.beta2;
        adam.eps = cfg.eps_adam;
        Self { best_model: model.clone(), model, adam, epoch: 0, history: Vec::new(), best: None }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = TrainStateFile {
            version: STATE_VERSION,
            model: self.model.checkpoint(),
            adam: self.adam.clone(),
            epoch: self.epoch,
            history: self.history.clone(),
            best: self.best,
            best_model: self.best_model.checkpoint(),
        };
        let text = serde_json::to_string(&file).map_err(|e| Error::Schema(e.to_string()))?;
        write_text(path, &text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let f: TrainStateFile = serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        if f.version != STATE_VERSION {
            return Err(Error::Version { found: f.version, expected: STATE_VERSION });
        }
        let model = Model::from_checkpoint(f.model)?;
        if f.adam.m.len() != model.param_count() || f.adam.v.len() != model.param_count() {
            return Err(Error::Schema("optimizer state does not match the model".into()));
        }
        Ok(Self {
            model,
            adam: f.adam,
            epoch: f.epoch,
            history: f.history,
            best: f.best,
            best_model: Model::from_checkpoint(f.best_model)?,
        })
    }
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let text = serde_json::to_string(&model.checkpoint()).map_err(|e| Error::Schema(e.to_string()))?;
    write_text(path, &text)
}

pub fn load_model(path: &Path) -> Result<Model> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ck: ModelCheckpoint = serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    Model::from_checkpoint(ck)
}

/// Episode order for an epoch; depends only on the seed and epoch index.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Train until `state.epoch == cfg.epochs`, calling `on_epoch` after every
/// completed epoch.
pub fn train<F>(
    train_set: &[Demonstration],
    val_set: &[Demonstration],
    cfg: &TrainConfig,
    mut state: TrainState,
    mut on_epoch: F,
) -> Result<TrainState>
where
    F: FnMut(&TrainState) -> Result<()>,
{
    cfg.validate()?;
    if state.epoch < cfg.epochs && train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    state.adam.lr = cfg.lr;
    while state.epoch < cfg.epochs {
        let order = epoch_order(train_set.len(), cfg.seed, state.epoch);
        let mut loss_sum = 0.0;
        let mut policies = Vec::new();
        let mut controls = Vec::new();
        let mut incidents = 0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = vec![0.0; state.model.param_count()];
            for &i in batch {
                let eg = loss_gradient_step(&state.model, &train_set[i], cfg)?;
                for (g, v) in grad.iter_mut().zip(&eg.grad) {
                    *g += v;
                }
                loss_sum += eg.loss;
                incidents += eg.incidents;
                policies.extend(eg.policies);
                controls.extend(eg.controls);
            }
            let mut flat = state.model.flat_params();
            state.adam.step(&mut flat, &grad)?;
            state.model.assign_flat(&flat)?;
        }
        let train_nll = loss_sum / policies.len().max(1) as f64;
        let train_acc = metrics::accuracy(&policies, &controls).unwrap_or(0.0);
        let val = if val_set.is_empty() { None } else { Some(evaluate_steps(&state.model, val_set, cfg)?) };
        state.epoch += 1;
        let report = EpochReport {
            epoch: state.epoch,
            train_nll,
            train_acc,
            val_nll: val.map(|v| v.nll),
            val_acc: val.map(|v| v.acc),
            incidents,
        };
        log::info!(
            "epoch {}: train nll {:.4} acc {:.3}, val nll {:?} acc {:?}",
            report.epoch,
            report.train_nll,
            report.train_acc,
            report.val_nll,
            report.val_acc
        );
        if let Some(v) = val {
            if state.best.is_none_or(|(_, b)| v.nll < b) {
                state.best = Some((state.epoch, v.nll));
                state.best_model = state.model.clone();
            }
        }
        state.history.push(report);
        on_epoch(&state)?;
    }
    Ok(state)
}

/// History as CSV rows `epoch,split,nll,acc`.
pub fn history_csv(history: &[EpochReport]) -> String {
    let mut out = String::from("epoch,split,nll,acc\n");
    for r in history {
        let _ = writeln!(out, "{},train,{},{}", r.epoch, r.train_nll, r.train_acc);
        if let (Some(n), Some(a)) = (r.val_nll, r.val_acc) {
            let _ = writeln!(out, "{},val,{n},{a}", r.epoch);
        }
    }
    out
}

/// Source of the cost field used by a rollout.
pub trait CostProvider {
    fn observe(&mut self, x: AgentState, scan: &PointCloud) -> Result<()>;
    fn costs(&mut self) -> Result<Vec<f64>>;
}

/// Learned map and cost encoder.
pub struct LearnedCosts<'a> {
    pub model: &'a Model,
    pub map: LogOddsMap,
}

impl<'a> LearnedCosts<'a> {
    pub fn new(model: &'a Model, width: usize, height: usize) -> Self {
        Self { model, map: LogOddsMap::new(width, height, model.classes()) }
    }
}

impl CostProvider for LearnedCosts<'_> {
    fn observe(&mut self, x: AgentState, scan: &PointCloud) -> Result<()> {
        self.map.update(x, scan, &self.model.psi)
    }

    fn costs(&mut self) -> Result<Vec<f64>> {
        Ok(self.model.encoder.forward(&self.map.posterior_tensor())?.values)
    }
}

/// Fixed, fully known cost field.
pub struct FixedCosts(pub Vec<f64>);

impl FixedCosts {
    /// Expert arrival costs with walls impassable.
    pub fn expert(grid: &SemanticGrid, classes: &ClassSet) -> Self {
        Self(grid.expert_cost_field(classes))
    }
}

impl CostProvider for FixedCosts {
    fn observe(&mut self, _: AgentState, _: &PointCloud) -> Result<()> {
        Ok(())
    }

    fn costs(&mut self) -> Result<Vec<f64>> {
        Ok(self.0.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RolloutFailure {
    Unreachable,
    StepCap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    /// Visited states, starting with the start state.
    pub trajectory: Vec<AgentState>,
    pub controls: Vec<Control>,
    pub reached_goal: bool,
    pub failure: Option<RolloutFailure>,
}

impl RolloutResult {
    pub fn steps(&self) -> usize {
        self.controls.len()
    }

    pub fn outcome(&self, expert_steps: usize) -> RolloutOutcome {
        RolloutOutcome { reached_goal: self.reached_goal, steps: self.steps(), expert_steps }
    }
}

/// Closed loop: scan, update, plan, take the most probable control.
pub fn rollout(
    grid: &SemanticGrid,
    start: AgentState,
    goal: AgentState,
    costs: &mut dyn CostProvider,
    sensor_cfg: &SensorConfig,
    step_cap: usize,
    opts: &PlanOptions,
) -> Result<RolloutResult> {
    let mut res = RolloutResult { trajectory: vec![start], controls: Vec::new(), reached_goal: start == goal, failure: None };
    let mut x = start;
    while !res.reached_goal {
        if res.controls.len() >= step_cap {
            res.failure = Some(RolloutFailure::StepCap);
            break;
        }
        let scan = sensor::scan(grid, x, sensor_cfg)?;
        costs.observe(x, &scan)?;
        let c = costs.costs()?;
        let view = CostView::new(grid.width, grid.height, &c)?;
        let plan = planner::plan(x, goal, &view, opts)?;
        if !plan.reachable() {
            res.failure = Some(RolloutFailure::Unreachable);
            break;
        }
        // argmin Q, first control on ties; same as argmax of the policy
        let mut best = None;
        for u in Control::ALL {
            if let Some(q) = plan.q[u.index()] {
                if best.is_none_or(|(_, b)| q < b) {
                    best = Some((u, q));
                }
            }
        }
        let (u, _) = best.expect("reachable plan has a finite control");
        x = step(grid, x, u);
        res.controls.push(u);
        res.trajectory.push(x);
        res.reached_goal = x == goal;
    }
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{generate_demonstration, path_cost, sample_episodes, GridParams};
    use rand::Rng;

    fn corridor_demo() -> (Demonstration, ClassSet, SensorConfig) {
        let classes = ClassSet::minigrid();
        let sensor_cfg = SensorConfig::default();
        let grid = SemanticGrid::from_rows(
            &["11111111", "10000001", "10030001", "10000001", "10002301", "10200001", "10000001", "11111111"],
            1,
        )
        .unwrap();
        let demo = generate_demonstration(&grid, AgentState::new(3, 2), AgentState::new(3, 5), &classes, &sensor_cfg)
            .unwrap()
            .unwrap();
        (demo, classes, sensor_cfg)
    }

    #[test]
    fn nll_examples() {
        assert!((nll_loss(&[0.25; 4], Control::Up).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert_eq!(nll_loss(&[1.0, 0.0, 0.0, 0.0], Control::Up), Some(0.0));
        let v = nll_loss(&[0.6439, 0.2369, 0.0871, 0.0321], Control::Down).unwrap();
        assert_eq!((v * 1e4).round() / 1e4, 1.4401);
        assert_eq!(nll_loss(&[1.0, 0.0, 0.0, 0.0], Control::Left), None);
    }

    #[test]
    fn certain_policy_has_zero_coefficients() {
        assert_eq!(q_coefficients(&[0.0, 0.0, 1.0, 0.0], Control::Left, 1.0), [0.0; 4]);
        let c = q_coefficients(&[0.25; 4], Control::Up, 0.5);
        assert_eq!(c, [1.5, -0.5, -0.5, -0.5]);
    }

    #[test]
    fn goal_adjacent_cell_gradient_by_hand() {
        // 3x3, agent in the expensive middle, goal to its right; costs make
        // every control's optimal trajectory unique
        #[rustfmt::skip]
        let cost = vec![
            1.0, 1.0, 1.0,
            1.0, 5.0, 1.0,
            1.5, 1.5, 1.5,
        ];
        let view = CostView::new(3, 3, &cost).unwrap();
        let x = AgentState::new(1, 1);
        let goal = AgentState::new(1, 2);
        let plan = planner::plan(x, goal, &view, &PlanOptions::default()).unwrap();
        assert_eq!(plan.q, [Some(3.0), Some(4.0), Some(5.0), Some(1.0)]);
        let pi = boltzmann(&plan.q, 1.0).unwrap();
        let c = q_coefficients(&pi, Control::Right, 1.0);
        let g = cell_gradient(&plan, &c).unwrap();
        // Up: (0,1) (0,2) goal. Down: (2,1) (2,2) goal.
        // Left: (1,0) (0,0) (0,1) (0,2) goal. Right: goal.
        let expect: BTreeMap<usize, f64> = [
            (0, c[2]),
            (1, c[0] + c[2]),
            (2, c[0] + c[2]),
            (3, c[2]),
            (5, c[0] + c[1] + c[2] + c[3]),
            (7, c[1]),
            (8, c[1]),
        ]
        .into_iter()
        .collect();
        assert_eq!(g.keys().collect::<Vec<_>>(), expect.keys().collect::<Vec<_>>());
        for (k, v) in &expect {
            assert!((g[k] - v).abs() < 1e-15, "cell {k}");
        }
        // coefficients sum to zero, so the goal cell gets nothing
        assert!(g[&5].abs() < 1e-15);
    }

    #[test]
    fn loss_is_sum_of_step_losses() {
        let (demo, _, _) = corridor_demo();
        let model = Model::new(4, 3);
        let e = loss_gradient_step(&model, &demo, &TrainConfig::default()).unwrap();
        assert_eq!(e.step_losses.len(), demo.len());
        assert_eq!(e.loss, e.step_losses.iter().sum::<f64>());
        assert_eq!(e.grad.len(), model.param_count());
        let psi_grad = &e.grad[model.encoder.params.len()..];
        assert!(psi_grad[..4].iter().all(|v| *v == 0.0), "free row stays fixed");
    }

    #[test]
    fn alpha_flattens_policy_but_keeps_argmax() {
        let q = [Some(2.0), Some(1.0), Some(4.0), Some(1.5)];
        let sharp = boltzmann(&q, 0.5).unwrap();
        let flat = boltzmann(&q, 5.0).unwrap();
        assert_eq!(planner::argmax(&sharp), planner::argmax(&flat));
        let spread = |p: &[f64; 4]| p.iter().cloned().fold(0.0, f64::max) - p.iter().cloned().fold(1.0, f64::min);
        assert!(spread(&flat) < spread(&sharp));
    }

    /// Loss of the episode and whether any optimal trajectory differs from
    /// the reference.
    fn loss_at(model: &Model, demo: &Demonstration, cfg: &TrainConfig, reference: &EpisodeGradient) -> (f64, bool) {
        let e = loss_gradient_step(model, demo, cfg).unwrap();
        (e.loss, e.paths != reference.paths)
    }

    #[test]
    fn full_pipeline_finite_differences() {
        let (demo, _, _) = corridor_demo();
        assert_eq!(demo.len(), 3);
        let mut model = Model::new(4, 17);
        // off-diagonal psi so every entry matters
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for k in 4..16 {
            model.psi.psi[k] += rng.gen_range(-0.3..0.3);
        }
        let cfg = TrainConfig::default();
        let base = loss_gradient_step(&model, &demo, &cfg).unwrap();
        let n_phi = model.encoder.params.len();
        let mut checked = 0;
        let mut attempts = 0;
        while checked < 20 {
            attempts += 1;
            assert!(attempts < 200, "too many kinks");
            let i = if checked % 2 == 0 { rng.gen_range(0..n_phi) } else { n_phi + rng.gen_range(4..16) };
            let mut flat = model.flat_params();
            let orig = flat[i];
            let d = 1e-6 * orig.abs().max(1.0);
            flat[i] = orig + d;
            let mut mp = model.clone();
            mp.assign_flat(&flat).unwrap();
            let (lp, kp) = loss_at(&mp, &demo, &cfg, &base);
            flat[i] = orig - d;
            let mut mm = model.clone();
            mm.assign_flat(&flat).unwrap();
            let (lm, km) = loss_at(&mm, &demo, &cfg, &base);
            if kp || km {
                continue;
            }
            let num = (lp - lm) / (2.0 * d);
            let ana = base.grad[i];
            let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6 / 1e-3);
            assert!(err < 1e-3, "coordinate {i}: analytic {ana}, numeric {num}");
            checked += 1;
        }
    }

    #[test]
    fn zero_epochs_leave_params_unchanged() {
        let (demo, _, _) = corridor_demo();
        let model = Model::new(4, 1);
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let st = train(&[demo], &[], &cfg, TrainState::new(model.clone(), &cfg), |_| Ok(())).unwrap();
        assert_eq!(st.model, model);
        assert!(st.history.is_empty());
    }

    #[test]
    fn single_episode_overfits() {
        let classes = ClassSet::minigrid();
        let sensor_cfg = SensorConfig::default();
        let demo = sample_episodes(40, 1, &GridParams::default(), &classes, &sensor_cfg).unwrap().remove(0);
        let cfg = TrainConfig { epochs: 200 / demo.len().max(1) + 1, batch_size: 1, lr: 1e-2, ..Default::default() };
        let model = Model::new(4, 2);
        let initial = teacher_forced(&model, &demo, &cfg).unwrap().loss / demo.len() as f64;
        let st = train(std::slice::from_ref(&demo), &[], &cfg, TrainState::new(model, &cfg), |_| Ok(())).unwrap();
        let fin = teacher_forced(&st.model, &demo, &cfg).unwrap().loss / demo.len() as f64;
        assert!(fin < initial, "{fin} vs {initial}");
        assert!(fin < 4f64.ln());
        let h = &st.history;
        let first: f64 = h[..3].iter().map(|r| r.train_nll).sum::<f64>() / 3.0;
        let last: f64 = h[h.len() - 3..].iter().map(|r| r.train_nll).sum::<f64>() / 3.0;
        assert!(last < first);
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let classes = ClassSet::minigrid();
        let sensor_cfg = SensorConfig::default();
        let params = GridParams::desk(8);
        let demos = sample_episodes(0, 6, &params, &classes, &sensor_cfg).unwrap();
        let val = sample_episodes(1_000_000, 2, &params, &classes, &sensor_cfg).unwrap();
        let cfg = TrainConfig { epochs: 3, batch_size: 2, ..Default::default() };
        let run = || train(&demos, &val, &cfg, TrainState::new(Model::new(4, 9), &cfg), |_| Ok(())).unwrap();
        let a = run();
        let b = run();
        assert_eq!(a, b);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.json");
        let short = TrainConfig { epochs: 2, ..cfg.clone() };
        let partial = train(&demos, &val, &short, TrainState::new(Model::new(4, 9), &cfg), |_| Ok(())).unwrap();
        partial.save(&path).unwrap();
        let resumed = train(&demos, &val, &cfg, TrainState::load(&path).unwrap(), |_| Ok(())).unwrap();
        assert_eq!(resumed, a);
        assert_eq!(history_csv(&resumed.history), history_csv(&a.history));
    }

    #[test]
    fn rollout_start_equals_goal() {
        let grid = SemanticGrid::bordered(6, 6, 1);
        let x = AgentState::new(2, 2);
        let mut c = FixedCosts::expert(&grid, &ClassSet::minigrid());
        let r = rollout(&grid, x, x, &mut c, &SensorConfig::default(), 10, &PlanOptions::default()).unwrap();
        assert!(r.reached_goal);
        assert!(r.controls.is_empty());
    }

    #[test]
    fn rollout_unreachable_goal() {
        let grid = SemanticGrid::from_rows(&["111111", "100101", "100111", "100001", "111111"], 1).unwrap();
        let mut c = FixedCosts::expert(&grid, &ClassSet::minigrid());
        let r = rollout(&grid, AgentState::new(3, 1), AgentState::new(1, 4), &mut c, &SensorConfig::default(), 10, &PlanOptions::default())
            .unwrap();
        assert!(!r.reached_goal);
        assert_eq!(r.failure, Some(RolloutFailure::Unreachable));
    }

    /// Cheapest path cost by exhaustive search over simple paths.
    fn brute_force_cost(grid: &SemanticGrid, classes: &ClassSet, x: AgentState, goal: AgentState) -> f64 {
        fn go(grid: &SemanticGrid, classes: &ClassSet, x: AgentState, goal: AgentState, seen: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if acc >= *best {
                return;
            }
            if x == goal {
                *best = acc;
                return;
            }
            for u in Control::ALL {
                if let Some(n) = u.neighbor(x, grid.width, grid.height) {
                    let i = grid.index(n);
                    if grid.is_wall(n) || seen[i] {
                        continue;
                    }
                    seen[i] = true;
                    go(grid, classes, n, goal, seen, acc + classes.expert_costs()[grid.class_at(n)], best);
                    seen[i] = false;
                }
            }
        }
        let mut seen = vec![false; grid.len()];
        seen[grid.index(x)] = true;
        let mut best = f64::INFINITY;
        go(grid, classes, x, goal, &mut seen, 0.0, &mut best);
        best
    }

    #[test]
    fn oracle_costs_reproduce_expert_path_cost() {
        let classes = ClassSet::minigrid();
        let sensor_cfg = SensorConfig::default();
        let params = GridParams::desk(6);
        let demos = sample_episodes(500, 25, &params, &classes, &sensor_cfg).unwrap();
        for d in &demos {
            let mut c = FixedCosts::expert(&d.grid, &classes);
            let r = rollout(&d.grid, d.start, d.goal, &mut c, &sensor_cfg, 2 * d.len(), &PlanOptions::default()).unwrap();
            assert!(r.reached_goal);
            let got = path_cost(&d.grid, &classes, &r.trajectory);
            let expert = path_cost(&d.grid, &classes, &d.trajectory());
            assert!((got - expert).abs() < 1e-9);
            assert!((got - brute_force_cost(&d.grid, &classes, d.start, d.goal)).abs() < 1e-9);
        }
    }
}
