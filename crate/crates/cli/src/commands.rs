use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use semnav::bench::{run_bench, write_bench_csv};
use semnav::costnet::CostModel;
use semnav::dataset::{Dataset, TEST_SEED, TRAIN_SEED, VAL_SEED};
use semnav::export::{write_heatmap_ppm, write_label_ppm, write_ppm, write_text, PALETTE};
use semnav::gridworld::{AgentState, ClassSet, Control, Demonstration};
use semnav::learner::{
    self, evaluate_steps, history_csv, load_model, rollout, save_model, FixedCosts, LearnedCosts, Model, RolloutFailure,
    TrainState,
};
use semnav::metrics::{self, mhd_pair, ResultsRow};
use semnav::planner::{self, boltzmann, subgradient, CostView};
use semnav::policy_lab::{self, Backup};
use semnav::semantic_map::LogOddsMap;

use crate::config::RunConfig;

const SPLITS: [(&str, u64); 3] = [("train", TRAIN_SEED), ("val", VAL_SEED), ("test", TEST_SEED)];

fn split_count(cfg: &RunConfig, split: &str) -> usize {
    match split {
        "train" => cfg.train_episodes,
        "val" => cfg.val_episodes,
        _ => cfg.test_episodes,
    }
}

fn dataset_path(cfg: &RunConfig, split: &str) -> PathBuf {
    cfg.data_dir().join(format!("{split}.json"))
}

fn load_split(cfg: &RunConfig, split: &str) -> Result<Dataset> {
    let path = dataset_path(cfg, split);
    Dataset::load(&path).with_context(|| format!("loading {split} set; run gen-data first"))
}

/// Model given by `checkpoint`, else the best model of a training run in `out`.
fn load_checkpoint(cfg: &RunConfig) -> Result<Model> {
    let path = cfg.checkpoint.clone().unwrap_or_else(|| cfg.out.join("best_model.json"));
    load_model(&path).with_context(|| format!("loading model {}", path.display()))
}

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    cfg.echo("gen-data")?;
    let classes = ClassSet::minigrid();
    if cfg.sensor.classes != classes.len() {
        bail!("sensor.classes is {} but the class set has {}", cfg.sensor.classes, classes.len());
    }
    for (split, base) in SPLITS {
        let n = split_count(cfg, split);
        let d = Dataset::generate(base + cfg.seed, n, &cfg.grid, &classes, &cfg.sensor)?;
        let path = cfg.out.join(format!("{split}.json"));
        d.save(&path)?;
        println!("{split}: {} episodes, {} steps -> {}", d.len(), d.total_steps(), path.display());
    }
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    cfg.echo("train")?;
    let train_set = load_split(cfg, "train")?;
    let val_set = load_split(cfg, "val")?;
    let state = match &cfg.checkpoint {
        Some(p) => {
            let s = TrainState::load(p).with_context(|| format!("resuming from {}", p.display()))?;
            println!("resuming after epoch {}", s.epoch);
            s
        }
        None => TrainState::new(Model::new(train_set.classes.len(), cfg.seed), &cfg.train),
    };
    let out = &cfg.out;
    let state_path = out.join("train_state.json");
    let every = cfg.train.checkpoint_every;
    let state = learner::train(&train_set.demonstrations, &val_set.demonstrations, &cfg.train, state, |s| {
        write_text(&out.join("history.csv"), &history_csv(&s.history))?;
        save_model(&s.best_model, &out.join("best_model.json"))?;
        if every > 0 && s.epoch % every == 0 {
            s.save(&state_path)?;
        }
        if let Some(r) = s.history.last() {
            println!(
                "epoch {:>3}  train nll {:.4} acc {:.3}  val nll {} acc {}",
                r.epoch,
                r.train_nll,
                r.train_acc,
                r.val_nll.map_or("-".into(), |v| format!("{v:.4}")),
                r.val_acc.map_or("-".into(), |v| format!("{v:.3}")),
            );
        }
        Ok(())
    })?;
    state.save(&state_path)?;
    write_text(&out.join("history.csv"), &history_csv(&state.history))?;
    save_model(&state.model, &out.join("final_model.json"))?;
    save_model(&state.best_model, &out.join("best_model.json"))?;
    match state.best {
        Some((epoch, nll)) => println!("best validation nll {nll:.4} at epoch {epoch}"),
        None => println!("no validation epochs; best model is the current model"),
    }
    Ok(())
}

#[derive(Serialize)]
struct EpisodeRecord {
    index: usize,
    seed: u64,
    start: AgentState,
    goal: AgentState,
    expert_steps: usize,
    steps: usize,
    reached_goal: bool,
    success: bool,
    failure: Option<RolloutFailure>,
    mhd: f64,
    trajectory: Vec<AgentState>,
}

/// Per-step policies from planning on the true expert costs.
fn oracle_policies(demo: &Demonstration, classes: &ClassSet, cfg: &RunConfig) -> Result<Vec<[f64; 4]>> {
    let cost = demo.grid.expert_cost_field(classes);
    let view = CostView::new(demo.grid.width, demo.grid.height, &cost)?;
    let mut out = Vec::with_capacity(demo.len());
    for s in &demo.steps {
        let plan = planner::plan(s.state, demo.goal, &view, &cfg.train.plan)?;
        out.push(boltzmann(&plan.q, cfg.train.alpha)?);
    }
    Ok(out)
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    cfg.echo("eval")?;
    let model = if cfg.eval.oracle { None } else { Some(load_checkpoint(cfg)?) };
    let mut rows = Vec::new();
    for split in &cfg.eval.splits {
        let data = load_split(cfg, split)?;
        if data.is_empty() {
            println!("{split}: empty, skipped");
            continue;
        }
        let (nll, acc) = match &model {
            Some(m) => {
                let s = evaluate_steps(m, &data.demonstrations, &cfg.train)?;
                (s.nll, s.acc)
            }
            None => {
                let mut policies = Vec::new();
                let mut controls: Vec<Control> = Vec::new();
                for d in &data.demonstrations {
                    policies.extend(oracle_policies(d, &data.classes, cfg)?);
                    controls.extend(d.steps.iter().map(|s| s.control));
                }
                (metrics::nll(&policies, &controls)?, metrics::accuracy(&policies, &controls)?)
            }
        };
        let mut outcomes = Vec::new();
        let mut records = Vec::new();
        for (i, d) in data.demonstrations.iter().enumerate() {
            let cap = cfg.eval.step_cap_factor * d.len().max(1);
            let r = match &model {
                Some(m) => {
                    let mut p = LearnedCosts::new(m, d.grid.width, d.grid.height);
                    rollout(&d.grid, d.start, d.goal, &mut p, &data.sensor, cap, &cfg.train.plan)?
                }
                None => {
                    let mut p = FixedCosts::expert(&d.grid, &data.classes);
                    rollout(&d.grid, d.start, d.goal, &mut p, &data.sensor, cap, &cfg.train.plan)?
                }
            };
            let outcome = r.outcome(d.len());
            let mhd = mhd_pair(&r.trajectory, &d.trajectory())?;
            outcomes.push(outcome);
            records.push(EpisodeRecord {
                index: i,
                seed: d.grid.seed,
                start: d.start,
                goal: d.goal,
                expert_steps: d.len(),
                steps: r.steps(),
                reached_goal: r.reached_goal,
                success: outcome.success(),
                failure: r.failure,
                mhd,
                trajectory: r.trajectory,
            });
        }
        let row = ResultsRow {
            split: split.clone(),
            nll,
            acc,
            tsr: metrics::tsr(&outcomes),
            mhd: records.iter().map(|r| r.mhd).sum::<f64>() / records.len() as f64,
        };
        println!("{split}: nll {:.4} acc {:.3} tsr {:.3} mhd {:.3}", row.nll, row.acc, row.tsr, row.mhd);
        write_text(&cfg.out.join(format!("episodes_{split}.json")), &serde_json::to_string_pretty(&records)?)?;
        rows.push(row);
    }
    metrics::write_results_csv(&cfg.out.join("results.csv"), &rows)?;
    Ok(())
}

pub fn bench(cfg: &RunConfig) -> Result<()> {
    cfg.echo("bench")?;
    let model = load_checkpoint(cfg)?;
    let classes = ClassSet::minigrid();
    let mut rows = Vec::new();
    for &size in &cfg.bench.sizes {
        let r = run_bench(&model, size, cfg.bench.min_steps, cfg.bench.repeats, cfg.seed, &classes, &cfg.sensor, &cfg.train.plan)?;
        for row in &r {
            println!(
                "{:>3}x{:<3} {:<16} {:>9.4} ms  (step sd {:.4}, run sd {:.4}, {} steps x {} runs)",
                size, size, row.method, row.mean_ms, row.std_ms, row.run_std_ms, row.steps / row.runs, row.runs
            );
        }
        rows.extend(r);
    }
    write_bench_csv(&cfg.out.join("bench.csv"), &rows)?;
    Ok(())
}

fn write_map_images(dir: &Path, tag: &str, map: &LogOddsMap, w: usize, h: usize, scale: usize) -> Result<()> {
    let post = map.posterior_tensor();
    for k in 0..map.classes() {
        let plane: Vec<f64> = (0..w * h).map(|j| post.data[k * w * h + j]).collect();
        write_prob_ppm(&dir.join(format!("posterior_{tag}_class{k}.ppm")), w, h, &plane, scale)?;
    }
    let labels: Vec<usize> = (0..w * h).map(|j| map.argmax(j)).collect();
    write_label_ppm(&dir.join(format!("argmax_{tag}.ppm")), w, h, &labels, scale)?;
    Ok(())
}

/// Probabilities on a fixed [0, 1] gray scale, so a uniform map stays uniform.
fn write_prob_ppm(path: &Path, w: usize, h: usize, p: &[f64], scale: usize) -> Result<()> {
    let rgb: Vec<[u8; 3]> = p
        .iter()
        .map(|v| {
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [g, g, g]
        })
        .collect();
    Ok(write_ppm(path, w, h, &rgb, scale)?)
}

pub fn inspect(cfg: &RunConfig) -> Result<()> {
    cfg.echo("inspect")?;
    let model = load_checkpoint(cfg)?;
    let data = load_split(cfg, &cfg.inspect.split)?;
    let Some(demo) = data.demonstrations.get(cfg.inspect.episode) else {
        bail!("{} set has {} episodes, no episode {}", cfg.inspect.split, data.len(), cfg.inspect.episode);
    };
    let (w, h, scale) = (demo.grid.width, demo.grid.height, cfg.inspect.scale);
    let dir = &cfg.out;
    let truth: Vec<usize> = (0..w * h).map(|j| demo.grid.cells[j] as usize).collect();
    write_label_ppm(&dir.join("grid.ppm"), w, h, &truth, scale)?;

    let mut map = LogOddsMap::new(w, h, model.classes());
    write_map_images(dir, "fresh", &map, w, h, scale)?;
    let last = demo.len().saturating_sub(1);
    let snapshots = [0, demo.len() / 2, last];
    let mut cost = Vec::new();
    for (t, step) in demo.steps.iter().enumerate() {
        map.update(step.state, &step.scan, &model.psi)?;
        if !snapshots.contains(&t) {
            continue;
        }
        let tag = format!("t{t:03}");
        write_map_images(dir, &tag, &map, w, h, scale)?;
        cost = model.encoder.forward(&map.posterior_tensor())?.values;
        write_heatmap_ppm(&dir.join(format!("cost_{tag}.ppm")), w, h, &cost, scale)?;
        let view = CostView::new(w, h, &cost)?;
        let plan = planner::plan(step.state, demo.goal, &view, &cfg.train.plan)?;
        for u in Control::ALL {
            let mut mask = vec![0.0; w * h];
            if plan.q[u.index()].is_some() {
                for (j, n) in subgradient(&plan, u)?.cell_counts(w, h) {
                    mask[j] = n as f64;
                }
            }
            write_heatmap_ppm(&dir.join(format!("subgrad_{tag}_{u:?}.ppm")), w, h, &mask, scale)?;
        }
    }

    let mut provider = LearnedCosts::new(&model, w, h);
    let cap = cfg.eval.step_cap_factor * demo.len().max(1);
    let r = rollout(&demo.grid, demo.start, demo.goal, &mut provider, &data.sensor, cap, &cfg.train.plan)?;
    let mut rgb: Vec<[u8; 3]> = truth.iter().map(|&k| dim(PALETTE[k % PALETTE.len()])).collect();
    for x in demo.trajectory() {
        rgb[x.row * w + x.col] = [230, 160, 30];
    }
    for x in &r.trajectory {
        let j = x.row * w + x.col;
        rgb[j] = if rgb[j] == [230, 160, 30] { [200, 40, 40] } else { [40, 160, 60] };
    }
    rgb[demo.start.row * w + demo.start.col] = [0, 0, 255];
    rgb[demo.goal.row * w + demo.goal.col] = [255, 255, 0];
    write_ppm(&dir.join("rollout.ppm"), w, h, &rgb, scale)?;

    // mean final cost per true class, for a quick look at what was learned
    let mut summary = String::from("class,label,cells,mean_cost\n");
    for (k, label) in data.classes.labels().iter().enumerate() {
        let vals: Vec<f64> = (0..w * h).filter(|&j| truth[j] == k).map(|j| cost[j]).collect();
        let mean = if vals.is_empty() { f64::NAN } else { vals.iter().sum::<f64>() / vals.len() as f64 };
        let _ = writeln!(summary, "{k},{label},{},{mean}", vals.len());
    }
    write_text(&dir.join("cost_by_class.csv"), &summary)?;
    println!(
        "episode {} ({}x{}, {} expert steps): rollout {} in {} steps; images in {}",
        cfg.inspect.episode,
        w,
        h,
        demo.len(),
        if r.reached_goal { "reached the goal" } else { "failed" },
        r.steps(),
        dir.display()
    );
    Ok(())
}

fn dim(c: [u8; 3]) -> [u8; 3] {
    c.map(|v| v / 2)
}

pub fn policy_lab(cfg: &RunConfig) -> Result<()> {
    cfg.echo("policy-lab")?;
    let p = &cfg.policy_lab;
    let (mdp, start, goal) = policy_lab::bordered_instance(p.size)?;
    let hard = policy_lab::value_iteration(&mdp, Backup::Hard, p.gamma, p.alpha, p.tol, p.max_iters)?;
    let soft = policy_lab::value_iteration(&mdp, Backup::Soft, p.gamma, p.alpha, p.tol, p.max_iters)?;
    let dir = &cfg.out;
    for (name, t) in [("hard", &hard), ("soft", &soft)] {
        policy_lab::write_q_csv(&dir.join(format!("q_{name}.csv")), t)?;
        policy_lab::write_value_ppm(&dir.join(format!("value_{name}.ppm")), t, p.scale)?;
        policy_lab::write_policy_ppm(&dir.join(format!("policy_{name}.ppm")), t, &mdp, p.scale)?;
    }
    let cap = 4 * mdp.width * mdp.height;
    let hard_path = policy_lab::greedy_rollout(&hard, &mdp, start, cap);
    let soft_path = policy_lab::greedy_rollout(&soft, &mdp, start, cap);
    let hard_ok = hard_path.last() == Some(&goal);
    let soft_ok = soft_path.last() == Some(&goal);
    let strict = policy_lab::argmax_agreement(&soft, &hard, &mdp);
    let tied = policy_lab::optimal_set_agreement(&soft, &hard, &mdp, 1e-9);
    let below = policy_lab::soft_below_hard(&soft, &hard, 1e-9);
    let mut csv = String::from(
        "size,gamma,alpha,hard_iterations,soft_iterations,hard_converged,soft_converged,argmax_agreement,\
         optimal_set_agreement,soft_le_hard,hard_reaches_goal,soft_reaches_goal,hard_steps,soft_steps\n",
    );
    let _ = writeln!(
        csv,
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        p.size,
        p.gamma,
        p.alpha,
        hard.iterations,
        soft.iterations,
        hard.converged,
        soft.converged,
        strict,
        tied,
        below,
        hard_ok,
        soft_ok,
        hard_path.len() - 1,
        soft_path.len() - 1
    );
    write_text(&dir.join("agreement.csv"), &csv)?;
    println!(
        "hard: {} sweeps, soft: {} sweeps; argmax agreement {:.3} ({:.3} counting ties); soft <= hard: {}; goal reached: hard {}, soft {}",
        hard.iterations, soft.iterations, strict, tied, below, hard_ok, soft_ok
    );
    if !hard.converged || !soft.converged {
        bail!("value iteration did not converge within {} sweeps", p.max_iters);
    }
    Ok(())
}
