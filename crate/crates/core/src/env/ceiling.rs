use std::collections::BTreeMap;

use serde::Serialize;

use super::{Action, Instruction, Observation, TaskId, Trajectory};

/// Everything a memoryless policy sees at one timestep. Proprio is
/// quantized to the grid cell.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FrameKey {
    pub obs: Observation,
    pub instruction: Instruction,
    pub cell: (usize, usize, bool),
}

impl FrameKey {
    pub fn of(traj: &Trajectory, t: usize) -> Self {
        let s = &traj.steps[t];
        Self {
            obs: s.obs.clone(),
            instruction: traj.instruction.clone(),
            cell: s.proprio.cell(),
        }
    }
}

/// The `k` expert actions from `t`, right-padded with the final action.
pub fn chunk_at(traj: &Trajectory, t: usize, k: usize) -> Vec<Action> {
    let last = traj.steps.last().expect("non-empty trajectory").action;
    (t..t + k)
        .map(|i| traj.steps.get(i).map_or(last, |s| s.action))
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct AmbiguityGroup {
    pub task: TaskId,
    pub gripper: (usize, usize),
    pub holding: bool,
    pub occurrences: usize,
    /// Distinct expert chunks with their counts, most frequent first.
    pub chunks: Vec<(Vec<&'static str>, usize)>,
    /// Whether the conflicting chunks already disagree on the first action.
    pub next_action_conflict: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct CeilingReport {
    pub ceiling: f64,
    pub timesteps: usize,
    pub groups: usize,
    pub ambiguous_timesteps: usize,
    pub ambiguous: Vec<AmbiguityGroup>,
}

impl CeilingReport {
    pub fn action_conflicts(&self) -> usize {
        self.ambiguous.iter().filter(|g| g.next_action_conflict).count()
    }
}

fn sampled_steps(traj: &Trajectory, stride: usize) -> impl Iterator<Item = usize> {
    (0..traj.len()).step_by(stride.max(1))
}

fn ceiling_by<K: Ord + Clone>(
    trajectories: &[Trajectory],
    k: usize,
    stride: usize,
    key: impl Fn(&Trajectory, usize) -> K,
) -> (f64, usize, Vec<(K, BTreeMap<Vec<Action>, usize>)>) {
    let mut groups: BTreeMap<K, BTreeMap<Vec<Action>, usize>> = BTreeMap::new();
    let mut total = 0;
    for traj in trajectories {
        for t in sampled_steps(traj, stride) {
            *groups.entry(key(traj, t)).or_default().entry(chunk_at(traj, t, k)).or_default() += 1;
            total += 1;
        }
    }
    let best: usize = groups.values().map(|g| g.values().copied().max().unwrap_or(0)).sum();
    let ceiling = if total == 0 { 1.0 } else { best as f64 / total as f64 };
    (ceiling, total, groups.into_iter().collect())
}

/// Best chunk accuracy any memoryless policy can reach on these timesteps:
/// group by what the policy sees and credit each group's most frequent
/// expert chunk.
pub fn single_frame_ceiling(trajectories: &[Trajectory], k: usize, stride: usize) -> CeilingReport {
    let task_of: BTreeMap<&Instruction, TaskId> = trajectories.iter().map(|t| (&t.instruction, t.task)).collect();
    let (ceiling, timesteps, groups) = ceiling_by(trajectories, k, stride, FrameKey::of);
    let n_groups = groups.len();
    let mut ambiguous = Vec::new();
    let mut ambiguous_timesteps = 0;
    for (key, chunks) in groups {
        if chunks.len() < 2 {
            continue;
        }
        let occurrences: usize = chunks.values().sum();
        ambiguous_timesteps += occurrences;
        let first_actions: std::collections::BTreeSet<Action> = chunks.keys().map(|c| c[0]).collect();
        let mut listed: Vec<(Vec<&'static str>, usize)> = chunks
            .into_iter()
            .map(|(c, n)| (c.iter().map(|a| Action::NAMES[a.id()]).collect(), n))
            .collect();
        listed.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ambiguous.push(AmbiguityGroup {
            task: task_of[&key.instruction],
            gripper: (key.cell.0, key.cell.1),
            holding: key.cell.2,
            occurrences,
            chunks: listed,
            next_action_conflict: first_actions.len() > 1,
        });
    }
    CeilingReport {
        ceiling,
        timesteps,
        groups: n_groups,
        ambiguous_timesteps,
        ambiguous,
    }
}

/// Like [`single_frame_ceiling`] but the key also holds the `history - 1`
/// previous frames at spacing `k` (the first frame repeats during warm-up).
/// Bounds what a policy with that much memory can reach.
pub fn history_ceiling(trajectories: &[Trajectory], k: usize, stride: usize, history: usize) -> f64 {
    ceiling_by(trajectories, k, stride, |traj, t| {
        let frames: Vec<_> = (0..history.max(1))
            .map(|j| {
                let s = &traj.steps[t.saturating_sub(j * k)];
                (s.obs.clone(), s.proprio.cell())
            })
            .collect();
        (traj.instruction.clone(), frames)
    })
    .0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{demo_set, ProprioState, Step};

    fn toy(actions: &[Action], obs_ids: &[u8]) -> Trajectory {
        Trajectory {
            task: TaskId::PickPlaceTwice,
            seed: 0,
            instruction: Instruction(vec![0]),
            steps: actions
                .iter()
                .zip(obs_ids)
                .map(|(&a, &o)| Step {
                    obs: Observation { cells: [o; 49] },
                    proprio: ProprioState::from_cell(0, 0, false),
                    action: a,
                })
                .collect(),
            full_success: true,
            partial_success: true,
        }
    }

    #[test]
    fn unique_keys_give_ceiling_one() {
        let t = toy(&[Action::Up, Action::Down, Action::Left], &[0, 1, 2]);
        let r = single_frame_ceiling(&[t], 1, 1);
        assert_eq!(r.ceiling, 1.0);
        assert!(r.ambiguous.is_empty());
    }

    #[test]
    fn conflicting_pair_gives_half() {
        let t = toy(&[Action::Up, Action::Down], &[3, 3]);
        let r = single_frame_ceiling(&[t], 1, 1);
        assert_eq!(r.ceiling, 0.5);
        assert_eq!(r.ambiguous.len(), 1);
        assert!(r.ambiguous[0].next_action_conflict);
    }

    #[test]
    fn chunks_pad_with_final_action() {
        let t = toy(&[Action::Up, Action::Grasp, Action::Release], &[0, 0, 0]);
        assert_eq!(chunk_at(&t, 1, 4), vec![Action::Grasp, Action::Release, Action::Release, Action::Release]);
    }

    #[test]
    fn history_never_lowers_the_bound() {
        for task in TaskId::ALL {
            let set = demo_set(task, 60, 3).unwrap();
            let single = single_frame_ceiling(&set.trajectories, 4, 4).ceiling;
            let hist = history_ceiling(&set.trajectories, 4, 4, 4);
            assert!(hist + 1e-12 >= single, "{task}: {hist} < {single}");
        }
    }
}
