//! Evaluation metrics: NLL, control accuracy, trajectory success rate and
//! modified Hausdorff distance.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::export::write_text;
use crate::gridworld::{AgentState, Control};
use crate::planner::argmax;

/// Ordered states of one run.
pub type Trajectory = Vec<AgentState>;

/// Consecutive states are equal or 4-adjacent.
pub fn is_valid_trajectory(t: &[AgentState]) -> bool {
    t.windows(2).all(|w| w[0].manhattan(&w[1]) <= 1)
}

fn check_aligned(policies: &[[f64; 4]], controls: &[Control]) -> Result<()> {
    if policies.len() != controls.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} controls", policies.len()),
            got: format!("{}", controls.len()),
        });
    }
    if policies.is_empty() {
        return Err(Error::invalid("no steps to evaluate"));
    }
    Ok(())
}

/// Mean of `-ln pi(u*)` over all steps.
pub fn nll(policies: &[[f64; 4]], controls: &[Control]) -> Result<f64> {
    check_aligned(policies, controls)?;
    let total: f64 = policies.iter().zip(controls).map(|(p, u)| -p[u.index()].ln()).sum();
    Ok(total / policies.len() as f64)
}

/// Fraction of steps whose argmax control (first on ties) is `u*`.
pub fn accuracy(policies: &[[f64; 4]], controls: &[Control]) -> Result<f64> {
    check_aligned(policies, controls)?;
    let hits = policies.iter().zip(controls).filter(|(p, u)| argmax(p) == u.index()).count();
    Ok(hits as f64 / policies.len() as f64)
}

/// Outcome of one closed-loop rollout against its expert length `T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutOutcome {
    pub reached_goal: bool,
    pub steps: usize,
    pub expert_steps: usize,
}

impl RolloutOutcome {
    /// Reached the goal in at most `2T` steps.
    pub fn success(&self) -> bool {
        self.reached_goal && self.steps <= 2 * self.expert_steps
    }
}

/// Fraction of successful rollouts; zero for an empty set.
pub fn tsr(rollouts: &[RolloutOutcome]) -> f64 {
    if rollouts.is_empty() {
        return 0.0;
    }
    rollouts.iter().filter(|r| r.success()).count() as f64 / rollouts.len() as f64
}

fn directed(a: &[AgentState], b: &[AgentState]) -> f64 {
    a.iter()
        .map(|p| b.iter().map(|q| p.euclidean(q)).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / a.len() as f64
}

/// Modified Hausdorff distance of one pair of trajectories.
pub fn mhd_pair(a: &[AgentState], e: &[AgentState]) -> Result<f64> {
    if a.is_empty() || e.is_empty() {
        return Err(Error::invalid("empty trajectory"));
    }
    Ok(directed(a, e).max(directed(e, a)))
}

/// Mean modified Hausdorff distance over paired trajectories.
pub fn mhd(agent: &[Trajectory], expert: &[Trajectory]) -> Result<f64> {
    if agent.len() != expert.len() {
        return Err(Error::ShapeMismatch { expected: format!("{} expert trajectories", agent.len()), got: expert.len().to_string() });
    }
    if agent.is_empty() {
        return Err(Error::invalid("no trajectory pairs"));
    }
    let mut total = 0.0;
    for (a, e) in agent.iter().zip(expert) {
        total += mhd_pair(a, e)?;
    }
    Ok(total / agent.len() as f64)
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsRow {
    pub split: String,
    pub nll: f64,
    pub acc: f64,
    pub tsr: f64,
    pub mhd: f64,
}

pub fn results_csv(rows: &[ResultsRow]) -> String {
    let mut out = String::from("split,nll,acc,tsr,mhd\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.split, r.nll, r.acc, r.tsr, r.mhd);
    }
    out
}

pub fn write_results_csv(path: &Path, rows: &[ResultsRow]) -> Result<()> {
    write_text(path, &results_csv(rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(r: usize, c: usize) -> AgentState {
        AgentState::new(r, c)
    }

    #[test]
    fn nll_examples() {
        let uniform = vec![[0.25; 4]; 3];
        let u = vec![Control::Up, Control::Left, Control::Right];
        assert!((nll(&uniform, &u).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert_eq!(nll(&[[0.0, 1.0, 0.0, 0.0]], &[Control::Down]).unwrap(), 0.0);
        let v = nll(&[[0.5, 0.5, 0.0, 0.0], [0.25; 4]], &[Control::Up, Control::Up]).unwrap();
        assert!((v - (2f64.ln() + 4f64.ln()) / 2.0).abs() < 1e-15);
        assert_eq!((v * 1e4).round() / 1e4, 1.0397);
        assert!(nll(&uniform, &u[..2]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let p = [[0.7, 0.1, 0.1, 0.1], [0.1, 0.7, 0.1, 0.1], [0.1, 0.1, 0.7, 0.1], [0.1, 0.1, 0.1, 0.7]];
        let right = [Control::Up, Control::Down, Control::Left, Control::Right];
        assert_eq!(accuracy(&p, &right).unwrap(), 1.0);
        let wrong = [Control::Down, Control::Up, Control::Right, Control::Left];
        assert_eq!(accuracy(&p, &wrong).unwrap(), 0.0);
        let three = [Control::Up, Control::Down, Control::Left, Control::Left];
        assert_eq!(accuracy(&p, &three).unwrap(), 0.75);
        // ties resolve to the first control
        assert_eq!(accuracy(&[[0.25; 4]], &[Control::Up]).unwrap(), 1.0);
        assert_eq!(accuracy(&[[0.25; 4]], &[Control::Down]).unwrap(), 0.0);
    }

    #[test]
    fn tsr_examples() {
        let ok = RolloutOutcome { reached_goal: true, steps: 5, expert_steps: 5 };
        assert_eq!(tsr(&[ok; 4]), 1.0);
        let boundary = RolloutOutcome { reached_goal: true, steps: 10, expert_steps: 5 };
        assert!(boundary.success());
        let over = RolloutOutcome { reached_goal: true, steps: 11, expert_steps: 5 };
        assert!(!over.success());
        let fail = RolloutOutcome { reached_goal: false, steps: 3, expert_steps: 5 };
        let mut runs = vec![ok; 93];
        runs.extend(std::iter::repeat_n(fail, 7));
        assert_eq!(tsr(&runs), 0.93);
        assert_eq!(tsr(&[]), 0.0);
    }

    #[test]
    fn mhd_examples() {
        let a = vec![s(0, 0), s(0, 1), s(1, 1)];
        assert_eq!(mhd_pair(&a, &a).unwrap(), 0.0);
        assert_eq!(mhd_pair(&[s(0, 0)], &[s(0, 3)]).unwrap(), 3.0);
        assert_eq!(mhd_pair(&[s(0, 0), s(0, 1)], &[s(1, 0), s(1, 1)]).unwrap(), 1.0);
        // asymmetric directed terms: max of 0 and 2/3
        let e = vec![s(0, 0), s(0, 1), s(0, 2)];
        let t = vec![s(0, 0)];
        assert!((mhd_pair(&t, &e).unwrap() - 1.0).abs() < 1e-15);
        assert!(mhd_pair(&[], &e).is_err());
        let m = mhd(&[t.clone(), a.clone()], &[e.clone(), a.clone()]).unwrap();
        assert!((m - 0.5).abs() < 1e-15);
        assert!(mhd(&[t], &[]).is_err());
    }

    #[test]
    fn trajectory_validity() {
        assert!(is_valid_trajectory(&[s(1, 1), s(1, 2), s(1, 2), s(2, 2)]));
        assert!(!is_valid_trajectory(&[s(1, 1), s(2, 2)]));
    }

    #[test]
    fn csv_schema() {
        let rows = [ResultsRow { split: "test".into(), nll: 0.5, acc: 0.8, tsr: 0.9, mhd: 0.25 }];
        assert_eq!(results_csv(&rows), "split,nll,acc,tsr,mhd\ntest,0.5,0.8,0.9,0.25\n");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn traj() -> impl Strategy<Value = Vec<AgentState>> {
            proptest::collection::vec((0usize..10, 0usize..10).prop_map(|(r, c)| AgentState::new(r, c)), 1..8)
        }

        proptest! {
            #[test]
            fn mhd_symmetric_nonnegative(a in traj(), b in traj()) {
                let ab = mhd_pair(&a, &b).unwrap();
                prop_assert_eq!(ab, mhd_pair(&b, &a).unwrap());
                prop_assert!(ab >= 0.0);
                prop_assert_eq!(mhd_pair(&a, &a).unwrap(), 0.0);
            }

            #[test]
            fn nll_and_accuracy_ranges(raw in proptest::collection::vec((0.01f64..1.0, 0.01f64..1.0, 0.01f64..1.0, 0.01f64..1.0, 0usize..4), 1..20)) {
                let policies: Vec<[f64; 4]> = raw.iter().map(|(a, b, c, d, _)| {
                    let z = a + b + c + d;
                    [a / z, b / z, c / z, d / z]
                }).collect();
                let controls: Vec<Control> = raw.iter().map(|r| Control::from_index(r.4).unwrap()).collect();
                prop_assert!(nll(&policies, &controls).unwrap() >= 0.0);
                let acc = accuracy(&policies, &controls).unwrap();
                prop_assert!((0.0..=1.0).contains(&acc));
            }
        }
    }
}
