//! Seeded evaluation rollouts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::PolicyBundle;
use crate::env::{
    demo_set, episode_seed, reset, scripted_expert_action, single_frame_ceiling, Action, GridState, Instruction, Observation, ProprioState,
    TaskId, NUM_ACTIONS,
};
use crate::error::{Error, Result};
use crate::policy::Episode;
use crate::training;

/// Anything that emits action chunks for a running episode.
pub trait Controller: Sync {
    type Episode;

    fn begin(&self, seed: u64) -> Self::Episode;

    fn act(&self, ep: &mut Self::Episode, state: &GridState, obs: &Observation, proprio: &ProprioState, instruction: &Instruction) -> Result<Vec<Action>>;
}

impl Controller for PolicyBundle {
    type Episode = Episode;

    fn begin(&self, _seed: u64) -> Episode {
        self.new_episode()
    }

    fn act(&self, ep: &mut Episode, _state: &GridState, obs: &Observation, proprio: &ProprioState, instruction: &Instruction) -> Result<Vec<Action>> {
        Ok(PolicyBundle::act(self, ep, obs, proprio, instruction, false)?.actions)
    }
}

/// The scripted expert, planning `k` steps ahead on a copy of the state.
pub struct ExpertController {
    pub chunk: usize,
}

impl Controller for ExpertController {
    type Episode = ();

    fn begin(&self, _seed: u64) {}

    fn act(&self, _: &mut (), state: &GridState, _: &Observation, _: &ProprioState, _: &Instruction) -> Result<Vec<Action>> {
        let mut sim = state.clone();
        let mut out = Vec::with_capacity(self.chunk);
        while out.len() < self.chunk && !sim.is_done() {
            let a = scripted_expert_action(&sim)?;
            sim.step(a)?;
            out.push(a);
        }
        Ok(out)
    }
}

/// Uniformly random chunks.
pub struct RandomController {
    pub chunk: usize,
}

impl Controller for RandomController {
    type Episode = ChaCha8Rng;

    fn begin(&self, seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed ^ 0x7a2d)
    }

    fn act(&self, rng: &mut ChaCha8Rng, _: &GridState, _: &Observation, _: &ProprioState, _: &Instruction) -> Result<Vec<Action>> {
        Ok((0..self.chunk)
            .map(|_| Action::from_id(rng.random_range(0..NUM_ACTIONS)).expect("valid id"))
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub seed: u64,
    pub full: bool,
    pub partial: bool,
    pub length: usize,
}

/// Runs one episode; chunks execute in full unless the episode ends.
pub fn rollout<C: Controller>(ctrl: &C, task: TaskId, seed: u64) -> Result<EpisodeOutcome> {
    let (mut state, mut obs, mut proprio, instruction) = reset(task, seed);
    let mut ep = ctrl.begin(seed);
    while !state.is_done() {
        let chunk = ctrl.act(&mut ep, &state, &obs, &proprio, &instruction)?;
        if chunk.is_empty() {
            return Err(Error::Contract("controller returned an empty chunk".into()));
        }
        for a in chunk {
            if state.is_done() {
                break;
            }
            let out = state.step(a)?;
            obs = out.obs;
            proprio = out.proprio;
        }
    }
    Ok(EpisodeOutcome {
        seed,
        full: state.full_success(),
        partial: state.partial_success(),
        length: state.steps(),
    })
}

/// Worker count from `HAMLETBENCH_THREADS`, else 1. Outcomes never depend on
/// it.
pub fn thread_count() -> usize {
    std::env::var("HAMLETBENCH_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Episode `i` uses seed `episode_seed(seed, i)` for every controller, so
/// variants evaluated with one seed see identical episodes.
pub fn rollouts<C: Controller>(ctrl: &C, task: TaskId, n: usize, seed: u64) -> Result<Vec<EpisodeOutcome>> {
    let seeds: Vec<u64> = (0..n as u64).map(|i| episode_seed(seed ^ 0xe7a1, i)).collect();
    let threads = thread_count().min(n.max(1));
    if threads <= 1 {
        return seeds.iter().map(|&s| rollout(ctrl, task, s)).collect();
    }
    let per = n.div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .chunks(per)
            .map(|part| scope.spawn(move || part.iter().map(|&s| rollout(ctrl, task, s)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(n);
        for h in handles {
            out.extend(h.join().expect("rollout worker panicked")?);
        }
        Ok(out)
    })
}

/// Binomial standard error of a rate over `n` trials.
pub fn binomial_se(rate: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        (rate * (1.0 - rate) / n as f64).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub task: TaskId,
    pub episodes: usize,
    pub full: f64,
    pub partial: f64,
    pub full_se: f64,
    pub partial_se: f64,
    pub mean_length: f64,
    /// Whole-chunk accuracy on held-out demonstrations, with the single-frame
    /// ceiling of the same timesteps.
    pub chunk_accuracy: Option<f64>,
    pub ceiling: Option<f64>,
    pub outcomes: Vec<EpisodeOutcome>,
}

impl TaskEval {
    pub fn from_outcomes(task: TaskId, outcomes: Vec<EpisodeOutcome>) -> Self {
        let n = outcomes.len();
        let rate = |f: fn(&EpisodeOutcome) -> bool| {
            if n == 0 {
                0.0
            } else {
                outcomes.iter().filter(|o| f(o)).count() as f64 / n as f64
            }
        };
        let full = rate(|o| o.full);
        let partial = rate(|o| o.partial);
        let mean_length = if n == 0 {
            0.0
        } else {
            outcomes.iter().map(|o| o.length as f64).sum::<f64>() / n as f64
        };
        Self {
            task,
            episodes: n,
            full,
            partial,
            full_se: binomial_se(full, n),
            partial_se: binomial_se(partial, n),
            mean_length,
            chunk_accuracy: None,
            ceiling: None,
            outcomes,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeldOut {
    pub demos: usize,
    pub seed: u64,
}

/// Rollout success on `n_episodes` seeded episodes plus, when `held_out` is
/// given, chunk accuracy against the single-frame ceiling.
pub fn evaluate_policy(bundle: &PolicyBundle, task: TaskId, n_episodes: usize, seed: u64, held_out: Option<HeldOut>) -> Result<TaskEval> {
    let mut eval = TaskEval::from_outcomes(task, rollouts(bundle, task, n_episodes, seed)?);
    if let Some(h) = held_out {
        let demos = demo_set(task, h.demos, h.seed)?.trajectories;
        let k = bundle.meta.chunk();
        eval.ceiling = Some(single_frame_ceiling(&demos, k, k).ceiling);
        eval.chunk_accuracy = Some(training::chunk_accuracy(bundle, &demos)?);
    }
    Ok(eval)
}
