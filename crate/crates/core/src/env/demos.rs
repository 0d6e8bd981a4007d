use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    instr, reset, scripted_expert_action, Action, CellToken, EnvError, Instruction, Observation, ProprioState, Step, TaskId,
    Trajectory, GRID, HORIZON,
};

pub const DEMO_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct StepRecord {
    obs: Vec<u8>,
    proprio: [f32; 3],
    action: u8,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryRecord {
    task: TaskId,
    seed: u64,
    instruction: Vec<u8>,
    steps: Vec<StepRecord>,
    full_success: bool,
    partial_success: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub cell_tokens: Vec<String>,
    pub actions: Vec<String>,
    pub instruction_tokens: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoManifest {
    pub task: TaskId,
    pub count: usize,
    pub seed: u64,
    pub format_version: u32,
    pub grid: usize,
    pub horizon: usize,
    pub mean_length: f64,
    pub vocabulary: Vocabulary,
}

impl DemoManifest {
    pub fn path_for(demo_path: &Path) -> PathBuf {
        let stem = demo_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        demo_path.with_file_name(format!("{stem}.manifest.json"))
    }

    pub fn read(path: &Path) -> Result<Self, EnvError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Clone, Debug)]
pub struct DemoSet {
    pub trajectories: Vec<Trajectory>,
    pub manifest: DemoManifest,
}

fn io_err(path: &Path, source: std::io::Error) -> EnvError {
    EnvError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Per-episode seed, decorrelated from neighbouring indices.
pub fn episode_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rollout_expert(task: TaskId, variant_seed: u64) -> Trajectory {
    let (mut state, mut obs, mut proprio, instruction) = reset(task, variant_seed);
    let mut steps = Vec::new();
    while !state.is_done() {
        let action = scripted_expert_action(&state).expect("episode in progress");
        steps.push(Step { obs, proprio, action });
        let out = state.step(action).expect("episode in progress");
        obs = out.obs;
        proprio = out.proprio;
    }
    Trajectory {
        task,
        seed: variant_seed,
        instruction,
        steps,
        full_success: state.full_success(),
        partial_success: state.partial_success(),
    }
}

fn manifest_for(task: TaskId, seed: u64, trajectories: &[Trajectory]) -> DemoManifest {
    let total: usize = trajectories.iter().map(Trajectory::len).sum();
    DemoManifest {
        task,
        count: trajectories.len(),
        seed,
        format_version: DEMO_FORMAT_VERSION,
        grid: GRID,
        horizon: HORIZON,
        mean_length: total as f64 / trajectories.len().max(1) as f64,
        vocabulary: Vocabulary {
            cell_tokens: CellToken::NAMES.iter().map(|s| s.to_string()).collect(),
            actions: Action::NAMES.iter().map(|s| s.to_string()).collect(),
            instruction_tokens: instr::NAMES.iter().map(|s| s.to_string()).collect(),
        },
    }
}

/// Expert demonstrations in memory; the same data `generate_demonstrations`
/// writes.
pub fn demo_set(task: TaskId, n_episodes: usize, seed: u64) -> Result<DemoSet, EnvError> {
    if n_episodes == 0 {
        return Err(EnvError::InvalidDemo("n_episodes must be at least 1".into()));
    }
    let trajectories: Vec<Trajectory> = (0..n_episodes as u64)
        .map(|i| rollout_expert(task, episode_seed(seed, i)))
        .collect();
    let manifest = manifest_for(task, seed, &trajectories);
    Ok(DemoSet { trajectories, manifest })
}

pub fn generate_demonstrations(task: TaskId, n_episodes: usize, seed: u64, out_path: &Path) -> Result<DemoSet, EnvError> {
    let set = demo_set(task, n_episodes, seed)?;
    write_demo_file(out_path, &set)?;
    Ok(set)
}

pub fn write_demo_file(path: &Path, set: &DemoSet) -> Result<(), EnvError> {
    let mut buf = Vec::new();
    for t in &set.trajectories {
        let rec = TrajectoryRecord {
            task: t.task,
            seed: t.seed,
            instruction: t.instruction.0.clone(),
            steps: t
                .steps
                .iter()
                .map(|s| StepRecord {
                    obs: s.obs.cells.to_vec(),
                    proprio: s.proprio.to_array(),
                    action: s.action as u8,
                })
                .collect(),
            full_success: t.full_success,
            partial_success: t.partial_success,
        };
        serde_json::to_writer(&mut buf, &rec)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&buf).map_err(|e| io_err(path, e))?;
    let mpath = DemoManifest::path_for(path);
    let mut json = serde_json::to_vec_pretty(&set.manifest)?;
    json.push(b'\n');
    fs::write(&mpath, json).map_err(|e| io_err(&mpath, e))?;
    Ok(())
}

/// Reads a demo file and its manifest sidecar.
pub fn read_demo_file(path: &Path) -> Result<DemoSet, EnvError> {
    let f = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut trajectories = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrajectoryRecord = serde_json::from_str(&line)?;
        let bad = |m: String| EnvError::InvalidDemo(format!("line {}: {m}", lineno + 1));
        let steps = rec
            .steps
            .into_iter()
            .map(|s| {
                let action = Action::from_id(s.action as usize).ok_or_else(|| bad(format!("action {}", s.action)))?;
                Ok(Step {
                    obs: Observation::from_slice(&s.obs)?,
                    proprio: ProprioState {
                        x: s.proprio[0],
                        y: s.proprio[1],
                        holding: s.proprio[2],
                    },
                    action,
                })
            })
            .collect::<Result<Vec<_>, EnvError>>()?;
        if steps.len() > HORIZON {
            return Err(bad(format!("{} steps exceed the horizon", steps.len())));
        }
        trajectories.push(Trajectory {
            task: rec.task,
            seed: rec.seed,
            instruction: Instruction(rec.instruction),
            steps,
            full_success: rec.full_success,
            partial_success: rec.partial_success,
        });
    }
    if trajectories.is_empty() {
        return Err(EnvError::InvalidDemo(format!("{} holds no trajectories", path.display())));
    }
    let manifest = DemoManifest::read(&DemoManifest::path_for(path))?;
    if manifest.count != trajectories.len() {
        return Err(EnvError::InvalidDemo(format!(
            "manifest lists {} trajectories, file holds {}",
            manifest.count,
            trajectories.len()
        )));
    }
    Ok(DemoSet { trajectories, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regeneration_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        generate_demonstrations(TaskId::SwapCubes, 20, 1, &a).unwrap();
        generate_demonstrations(TaskId::SwapCubes, 20, 1, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert_eq!(
            fs::read(dir.path().join("a.manifest.json")).unwrap(),
            fs::read(dir.path().join("b.manifest.json")).unwrap()
        );
    }

    #[test]
    fn file_round_trip_preserves_trajectories() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("demos.jsonl");
        let set = generate_demonstrations(TaskId::CoverAndStack, 12, 9, &p).unwrap();
        let back = read_demo_file(&p).unwrap();
        assert_eq!(back.trajectories, set.trajectories);
        assert_eq!(back.manifest, set.manifest);
        assert!(back.trajectories.iter().all(|t| t.full_success));
        let mean = set.trajectories.iter().map(Trajectory::len).sum::<usize>() as f64 / 12.0;
        assert_eq!(set.manifest.mean_length, mean);
    }

    #[test]
    fn unwritable_path_is_reported() {
        let err = generate_demonstrations(TaskId::PickPlaceTwice, 1, 0, Path::new("/nonexistent-dir/x.jsonl")).unwrap_err();
        assert!(matches!(err, EnvError::Io { .. }));
        assert!(demo_set(TaskId::PickPlaceTwice, 0, 0).is_err());
    }

    #[test]
    fn episode_seeds_differ() {
        let seeds: std::collections::BTreeSet<u64> = (0..1000).map(|i| episode_seed(1, i)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_ne!(episode_seed(1, 0), episode_seed(2, 0));
    }
}
