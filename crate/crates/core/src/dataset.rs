//! JSON persistence of demonstration sets.
//!
//! Every demonstration stores its grid twice: the generator seed and the
//! row-major cell array. Loading regenerates each grid from its seed and
//! rejects the file when the two disagree.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::export::write_text;
use crate::gridworld::{
    generate_environment, sample_episodes, AgentState, ClassSet, Control, DemoStep, Demonstration, GridParams,
};
use crate::sensor::{LabeledPoint, PointCloud, SensorConfig};

pub const DATASET_VERSION: u32 = 1;

/// First environment seed of each split. Splits never share a seed as long
/// as a split needs fewer than a million seeds.
pub const TRAIN_SEED: u64 = 0;
pub const VAL_SEED: u64 = 1_000_000;
pub const TEST_SEED: u64 = 2_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: ClassSet,
    pub grid_params: GridParams,
    pub sensor: SensorConfig,
    pub demonstrations: Vec<Demonstration>,
}

impl Dataset {
    /// `count` episodes from consecutive seeds starting at `first_seed`.
    pub fn generate(
        first_seed: u64,
        count: usize,
        grid_params: &GridParams,
        classes: &ClassSet,
        sensor: &SensorConfig,
    ) -> Result<Self> {
        Ok(Self {
            classes: classes.clone(),
            grid_params: grid_params.clone(),
            sensor: sensor.clone(),
            demonstrations: sample_episodes(first_seed, count, grid_params, classes, sensor)?,
        })
    }

    pub fn len(&self) -> usize {
        self.demonstrations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demonstrations.is_empty()
    }

    pub fn total_steps(&self) -> usize {
        self.demonstrations.iter().map(|d| d.len()).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = DatasetFile {
            version: DATASET_VERSION,
            classes: self.classes.labels().to_vec(),
            expert_costs: self.classes.expert_costs().to_vec(),
            wall: self.classes.wall(),
            grid_params: self.grid_params.clone(),
            sensor: self.sensor.clone(),
            demonstrations: self.demonstrations.iter().map(DemoRecord::from_demo).collect(),
        };
        serde_json::to_string(&file).map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let header: Header = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        if header.version != DATASET_VERSION {
            return Err(Error::Version { found: header.version, expected: DATASET_VERSION });
        }
        let file: DatasetFile = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        let classes = ClassSet::new(file.classes, file.expert_costs, file.wall)?;
        let mut demonstrations = Vec::with_capacity(file.demonstrations.len());
        for (i, rec) in file.demonstrations.into_iter().enumerate() {
            demonstrations.push(rec.into_demo(&file.grid_params, i)?);
        }
        Ok(Self { classes, grid_params: file.grid_params, sensor: file.sensor, demonstrations })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Schema(msg) => Error::Schema(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

#[derive(Deserialize)]
struct Header {
    version: u32,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    version: u32,
    classes: Vec<String>,
    expert_costs: Vec<f64>,
    wall: usize,
    grid_params: GridParams,
    sensor: SensorConfig,
    demonstrations: Vec<DemoRecord>,
}

#[derive(Serialize, Deserialize)]
struct DemoRecord {
    seed: u64,
    width: usize,
    height: usize,
    cells: Vec<u8>,
    start: [usize; 2],
    goal: [usize; 2],
    steps: Vec<StepRecord>,
}

#[derive(Serialize, Deserialize)]
struct StepRecord {
    control: usize,
    scan: Vec<LabeledPoint>,
}

impl DemoRecord {
    fn from_demo(d: &Demonstration) -> Self {
        Self {
            seed: d.grid.seed,
            width: d.grid.width,
            height: d.grid.height,
            cells: d.grid.cells.clone(),
            start: [d.start.row, d.start.col],
            goal: [d.goal.row, d.goal.col],
            steps: d.steps.iter().map(|s| StepRecord { control: s.control.index(), scan: s.scan.points.clone() }).collect(),
        }
    }

    fn into_demo(self, params: &GridParams, i: usize) -> Result<Demonstration> {
        let bad = |msg: String| Error::Schema(format!("demonstration {i}: {msg}"));
        let grid = generate_environment(self.seed, params)?;
        if grid.width != self.width || grid.height != self.height || grid.cells != self.cells {
            return Err(bad(format!("stored grid differs from the one generated by seed {}", self.seed)));
        }
        let start = AgentState::new(self.start[0], self.start[1]);
        let goal = AgentState::new(self.goal[0], self.goal[1]);
        if !grid.contains(start) || !grid.contains(goal) {
            return Err(bad("start or goal outside the grid".into()));
        }
        let mut steps = Vec::with_capacity(self.steps.len());
        let mut x = start;
        for s in self.steps {
            let control = Control::from_index(s.control).ok_or_else(|| bad(format!("control index {}", s.control)))?;
            steps.push(DemoStep { state: x, control, scan: PointCloud { origin: x, points: s.scan } });
            x = crate::gridworld::step(&grid, x, control);
        }
        let demo = Demonstration { grid, start, goal, steps };
        if x != goal {
            return Err(bad("controls do not reach the goal".into()));
        }
        Ok(demo)
    }
}
