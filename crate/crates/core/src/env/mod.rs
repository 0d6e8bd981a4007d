//! Gridworld manipulation tasks whose single frames are ambiguous without
//! history.
//!
//! The world is a 7×7 grid of cell stacks. Observations show only the top of
//! each stack, proprioception exposes the gripper cell and a holding flag but
//! not what is held, and each task's progress lives in hidden phase counters.

mod ceiling;
mod demos;
mod expert;
mod sim;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use ceiling::{chunk_at, history_ceiling, single_frame_ceiling, AmbiguityGroup, CeilingReport, FrameKey};
pub use demos::{demo_set, episode_seed, generate_demonstrations, read_demo_file, rollout_expert, write_demo_file, DemoManifest, DemoSet, DEMO_FORMAT_VERSION};
pub use expert::scripted_expert_action;
pub use sim::{GridState, StepOutcome};

pub const GRID: usize = 7;
pub const NUM_CELLS: usize = GRID * GRID;
pub const HORIZON: usize = 120;
pub const NUM_ACTIONS: usize = 6;
pub const HOME: (usize, usize) = (3, 6);

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("episode already complete")]
    EpisodeComplete,
    #[error("invalid demonstration data: {0}")]
    InvalidDemo(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    PickPlaceTwice,
    CoverAndStack,
    SwapCubes,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::PickPlaceTwice, TaskId::CoverAndStack, TaskId::SwapCubes];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::PickPlaceTwice => "pick_place_twice",
            TaskId::CoverAndStack => "cover_and_stack",
            TaskId::SwapCubes => "swap_cubes",
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskId {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| EnvError::UnknownTask(s.to_string()))
    }
}

/// Rendered cell contents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum CellToken {
    Empty = 0,
    CubeR,
    CubeB,
    CubeG,
    CupY,
    CupP,
    SiteL,
    SiteR,
    SiteAux,
    Mask,
}

impl CellToken {
    pub const COUNT: usize = 10;
    pub const NAMES: [&'static str; Self::COUNT] = [
        "EMPTY", "CUBE_R", "CUBE_B", "CUBE_G", "CUP_Y", "CUP_P", "SITE_L", "SITE_R", "SITE_AUX", "MASK",
    ];

    pub fn from_id(id: u8) -> Option<Self> {
        use CellToken::*;
        [Empty, CubeR, CubeB, CubeG, CupY, CupP, SiteL, SiteR, SiteAux, Mask]
            .get(id as usize)
            .copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Action {
    Up = 0,
    Down,
    Left,
    Right,
    Grasp,
    Release,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [
        Action::Up,
        Action::Down,
        Action::Left,
        Action::Right,
        Action::Grasp,
        Action::Release,
    ];
    pub const NAMES: [&'static str; NUM_ACTIONS] = ["UP", "DOWN", "LEFT", "RIGHT", "GRASP", "RELEASE"];

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn id(self) -> usize {
        self as usize
    }
}

/// Instruction vocabulary.
pub mod instr {
    pub const PICK_PLACE: u8 = 0;
    pub const TWICE: u8 = 1;
    pub const COVER: u8 = 2;
    pub const STACK: u8 = 3;
    pub const SWAP: u8 = 4;
    pub const USING_AUX: u8 = 5;
    pub const CUBE: u8 = 6;
    pub const CUP: u8 = 7;
    pub const RED: u8 = 8;
    pub const BLUE: u8 = 9;
    pub const GREEN: u8 = 10;
    pub const VOCAB: usize = 11;
    pub const MAX_LEN: usize = 8;
    pub const NAMES: [&str; VOCAB] = [
        "PICK_PLACE", "TWICE", "COVER", "STACK", "SWAP", "USING_AUX", "CUBE", "CUP", "RED", "BLUE", "GREEN",
    ];
}

/// Top-of-stack rendering of the grid, row-major from the top-left cell.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Observation {
    pub cells: [u8; NUM_CELLS],
}

impl Observation {
    pub fn token(&self, x: usize, y: usize) -> CellToken {
        CellToken::from_id(self.cells[y * GRID + x]).expect("valid token")
    }

    pub fn from_slice(ids: &[u8]) -> Result<Self, EnvError> {
        if ids.len() != NUM_CELLS || ids.iter().any(|&t| t as usize >= CellToken::COUNT) {
            return Err(EnvError::InvalidDemo(format!("bad observation of length {}", ids.len())));
        }
        let mut cells = [0u8; NUM_CELLS];
        cells.copy_from_slice(ids);
        Ok(Self { cells })
    }
}

/// Gripper position normalized to `[0,1]` and a holding flag.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProprioState {
    pub x: f32,
    pub y: f32,
    pub holding: f32,
}

impl ProprioState {
    pub fn from_cell(x: usize, y: usize, holding: bool) -> Self {
        let scale = (GRID - 1) as f32;
        Self {
            x: x as f32 / scale,
            y: y as f32 / scale,
            holding: if holding { 1.0 } else { 0.0 },
        }
    }

    /// Grid cell and holding flag, recovered by rounding.
    pub fn cell(&self) -> (usize, usize, bool) {
        let scale = (GRID - 1) as f32;
        (
            (self.x * scale).round() as usize,
            (self.y * scale).round() as usize,
            self.holding > 0.5,
        )
    }

    pub fn to_array(self) -> [f32; 3] {
        [self.x, self.y, self.holding]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Instruction(pub Vec<u8>);

impl Instruction {
    pub fn tokens(&self) -> &[u8] {
        &self.0
    }
}

/// One recorded timestep of a demonstration.
#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub obs: Observation,
    pub proprio: ProprioState,
    pub action: Action,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub task: TaskId,
    pub seed: u64,
    pub instruction: Instruction,
    pub steps: Vec<Step>,
    pub full_success: bool,
    pub partial_success: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Creates a fresh episode.
pub fn reset(task: TaskId, variant_seed: u64) -> (GridState, Observation, ProprioState, Instruction) {
    let state = GridState::new(task, variant_seed);
    let obs = state.render_observation();
    let proprio = state.proprio();
    let instruction = state.instruction();
    (state, obs, proprio, instruction)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_ids_parse() {
        for t in TaskId::ALL {
            assert_eq!(t.name().parse::<TaskId>().unwrap(), t);
        }
        assert!("stack_everything".parse::<TaskId>().is_err());
    }

    #[test]
    fn proprio_round_trips_cells() {
        for x in 0..GRID {
            for y in 0..GRID {
                for h in [false, true] {
                    assert_eq!(ProprioState::from_cell(x, y, h).cell(), (x, y, h));
                }
            }
        }
    }
}
