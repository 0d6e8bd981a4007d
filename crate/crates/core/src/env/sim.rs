use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{instr, Action, CellToken, EnvError, Instruction, Observation, ProprioState, TaskId, GRID, HOME, HORIZON, NUM_CELLS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub(crate) enum Entity {
    /// Colour index 0..3 (red, blue, green).
    Cube(u8),
    /// Colour index 0..2 (yellow, purple).
    Cup(u8),
}

impl Entity {
    fn token(self) -> CellToken {
        match self {
            Entity::Cube(0) => CellToken::CubeR,
            Entity::Cube(1) => CellToken::CubeB,
            Entity::Cube(_) => CellToken::CubeG,
            Entity::Cup(0) => CellToken::CupY,
            Entity::Cup(_) => CellToken::CupP,
        }
    }
}

/// Hidden task progress. Never rendered.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub(crate) enum Phase {
    PickPlace {
        cube: usize,
        site_l: usize,
        site_r: usize,
        /// Completed site-to-site transfers.
        transfers: u8,
        last_site: usize,
    },
    CoverStack {
        cube: usize,
        near_cup: usize,
        far_cup: usize,
        covered: bool,
    },
    Swap {
        /// Cube moved to the auxiliary site first (lower colour index).
        first: usize,
        second: usize,
        first_home: usize,
        second_home: usize,
        aux: usize,
        staged: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GridState {
    task: TaskId,
    seed: u64,
    sites: [Option<CellToken>; NUM_CELLS],
    stacks: Vec<Vec<usize>>,
    entities: Vec<Entity>,
    gripper: (usize, usize),
    held: Option<usize>,
    pub(crate) phase: Phase,
    steps: usize,
    full: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub obs: Observation,
    pub proprio: ProprioState,
    pub done: bool,
    pub full_success: bool,
    pub partial_success: bool,
}

pub(crate) fn cell(x: usize, y: usize) -> usize {
    y * GRID + x
}

pub(crate) fn coords(c: usize) -> (usize, usize) {
    (c % GRID, c / GRID)
}

impl GridState {
    pub fn new(task: TaskId, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = GridState {
            task,
            seed,
            sites: [None; NUM_CELLS],
            stacks: vec![Vec::new(); NUM_CELLS],
            entities: Vec::new(),
            gripper: HOME,
            held: None,
            phase: Phase::CoverStack {
                cube: 0,
                near_cup: 0,
                far_cup: 0,
                covered: false,
            },
            steps: 0,
            full: false,
        };
        // All three layouts put the task objects on one row so that transits
        // in opposite directions cross the same cells.
        let row = rng.random_range(1..=4);
        match task {
            TaskId::PickPlaceTwice => {
                let site_l = cell(rng.random_range(0..=1), row);
                let site_r = cell(rng.random_range(5..=6), row);
                s.sites[site_l] = Some(CellToken::SiteL);
                s.sites[site_r] = Some(CellToken::SiteR);
                let cube = s.spawn(Entity::Cube(rng.random_range(0..3)), site_l);
                s.phase = Phase::PickPlace {
                    cube,
                    site_l,
                    site_r,
                    transfers: 0,
                    last_site: site_l,
                };
            }
            TaskId::CoverAndStack => {
                // Both cups share a colour, so a covered cube and a free cup
                // look alike from above.
                let (cube_x, a_x, b_x) = loop {
                    let mut xs: Vec<usize> = (0..GRID).collect();
                    xs.shuffle(&mut rng);
                    let (c, a, b) = (xs[0], xs[1], xs[2]);
                    if c.abs_diff(a) != c.abs_diff(b) {
                        break if c.abs_diff(a) < c.abs_diff(b) { (c, a, b) } else { (c, b, a) };
                    }
                };
                let cup_colour = rng.random_range(0..2);
                let cube = s.spawn(Entity::Cube(rng.random_range(0..3)), cell(cube_x, row));
                let near_cup = s.spawn(Entity::Cup(cup_colour), cell(a_x, row));
                let far_cup = s.spawn(Entity::Cup(cup_colour), cell(b_x, row));
                s.phase = Phase::CoverStack {
                    cube,
                    near_cup,
                    far_cup,
                    covered: false,
                };
            }
            TaskId::SwapCubes => {
                let site_l = cell(rng.random_range(0..=1), row);
                let site_r = cell(rng.random_range(5..=6), row);
                let aux = cell(3, row);
                s.sites[site_l] = Some(CellToken::SiteL);
                s.sites[site_r] = Some(CellToken::SiteR);
                s.sites[aux] = Some(CellToken::SiteAux);
                let mut colours = [0u8, 1, 2];
                colours.shuffle(&mut rng);
                let left = s.spawn(Entity::Cube(colours[0]), site_l);
                let right = s.spawn(Entity::Cube(colours[1]), site_r);
                let (first, second, first_home, second_home) = if colours[0] < colours[1] {
                    (left, right, site_l, site_r)
                } else {
                    (right, left, site_r, site_l)
                };
                s.phase = Phase::Swap {
                    first,
                    second,
                    first_home,
                    second_home,
                    aux,
                    staged: false,
                };
            }
        }
        s
    }

    fn spawn(&mut self, e: Entity, at: usize) -> usize {
        self.entities.push(e);
        let id = self.entities.len() - 1;
        self.stacks[at].push(id);
        id
    }

    pub fn task(&self) -> TaskId {
        self.task
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn gripper(&self) -> (usize, usize) {
        self.gripper
    }

    pub fn is_holding(&self) -> bool {
        self.held.is_some()
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn cube_count(&self) -> usize {
        self.entities.iter().filter(|e| matches!(e, Entity::Cube(_))).count()
    }

    pub fn cup_count(&self) -> usize {
        self.entities.iter().filter(|e| matches!(e, Entity::Cup(_))).count()
    }

    /// Bottom-to-top entity tokens at a cell, occluded ones included.
    pub fn stack_tokens(&self, x: usize, y: usize) -> Vec<CellToken> {
        self.stacks[cell(x, y)].iter().map(|&e| self.entities[e].token()).collect()
    }

    pub fn site_at(&self, x: usize, y: usize) -> Option<CellToken> {
        self.sites[cell(x, y)]
    }

    pub(crate) fn held(&self) -> Option<usize> {
        self.held
    }

    /// Cell holding entity `e`, or `None` while it is in the gripper.
    pub(crate) fn location(&self, e: usize) -> Option<usize> {
        self.stacks.iter().position(|s| s.contains(&e))
    }

    pub(crate) fn stack(&self, c: usize) -> &[usize] {
        &self.stacks[c]
    }

    pub(crate) fn entity(&self, e: usize) -> Entity {
        self.entities[e]
    }

    pub fn full_success(&self) -> bool {
        self.full
    }

    pub fn partial_success(&self) -> bool {
        match self.phase {
            Phase::PickPlace { transfers, .. } => transfers >= 1,
            Phase::CoverStack { covered, .. } => covered,
            Phase::Swap { staged, .. } => staged,
        }
    }

    pub fn is_done(&self) -> bool {
        self.full || self.steps >= HORIZON
    }

    pub fn render_observation(&self) -> Observation {
        let mut cells = [CellToken::Empty as u8; NUM_CELLS];
        for (c, out) in cells.iter_mut().enumerate() {
            let tok = match self.stacks[c].last() {
                Some(&e) => self.entities[e].token(),
                None => self.sites[c].unwrap_or(CellToken::Empty),
            };
            *out = tok as u8;
        }
        Observation { cells }
    }

    pub fn proprio(&self) -> ProprioState {
        ProprioState::from_cell(self.gripper.0, self.gripper.1, self.held.is_some())
    }

    pub fn instruction(&self) -> Instruction {
        let colour = |e: usize| match self.entities[e] {
            Entity::Cube(c) => instr::RED + c,
            Entity::Cup(_) => unreachable!("cube expected"),
        };
        Instruction(match self.phase {
            Phase::PickPlace { cube, .. } => vec![instr::PICK_PLACE, colour(cube), instr::CUBE, instr::TWICE],
            Phase::CoverStack { cube, .. } => vec![instr::COVER, colour(cube), instr::CUBE, instr::STACK],
            Phase::Swap { .. } => vec![instr::SWAP, instr::CUBE, instr::CUBE, instr::USING_AUX],
        })
    }

    fn can_place(&self, e: usize, c: usize) -> bool {
        match (self.entities[e], self.stacks[c].last()) {
            (_, None) => true,
            (Entity::Cup(_), Some(_)) => true,
            (Entity::Cube(_), Some(_)) => false,
        }
    }

    /// Applies one action. Physically impossible actions only advance the
    /// step counter.
    pub fn step(&mut self, action: Action) -> Result<StepOutcome, EnvError> {
        if self.is_done() {
            return Err(EnvError::EpisodeComplete);
        }
        let (x, y) = self.gripper;
        let here = cell(x, y);
        match action {
            Action::Up => self.gripper.1 = y.saturating_sub(1),
            Action::Down => self.gripper.1 = (y + 1).min(GRID - 1),
            Action::Left => self.gripper.0 = x.saturating_sub(1),
            Action::Right => self.gripper.0 = (x + 1).min(GRID - 1),
            Action::Grasp => {
                if self.held.is_none() {
                    self.held = self.stacks[here].pop();
                }
            }
            Action::Release => {
                if let Some(e) = self.held {
                    if self.can_place(e, here) {
                        self.stacks[here].push(e);
                        self.held = None;
                        self.on_placed(e, here);
                    }
                }
            }
        }
        self.steps += 1;
        self.full = self.check_full();
        Ok(StepOutcome {
            obs: self.render_observation(),
            proprio: self.proprio(),
            done: self.is_done(),
            full_success: self.full,
            partial_success: self.partial_success(),
        })
    }

    fn on_placed(&mut self, e: usize, at: usize) {
        let stacks = &self.stacks;
        match &mut self.phase {
            Phase::PickPlace {
                cube,
                site_l,
                site_r,
                transfers,
                last_site,
            } => {
                if e == *cube && (at == *site_l || at == *site_r) && at != *last_site {
                    *transfers += 1;
                    *last_site = at;
                }
            }
            Phase::CoverStack { cube, near_cup, covered, .. } => {
                if e == *near_cup && stacks[at].first() == Some(cube) {
                    *covered = true;
                }
            }
            Phase::Swap { aux, staged, .. } => {
                if at == *aux {
                    *staged = true;
                }
            }
        }
    }

    fn check_full(&self) -> bool {
        if self.held.is_some() {
            return false;
        }
        match self.phase {
            Phase::PickPlace {
                cube,
                site_r,
                transfers,
                ..
            } => transfers >= 3 && self.stacks[site_r].last() == Some(&cube),
            Phase::CoverStack { cube, .. } => {
                let at = self.location(cube).expect("cube not held");
                self.stacks[at].len() == 3 && self.stacks[at][0] == cube
            }
            Phase::Swap {
                first,
                second,
                first_home,
                second_home,
                ..
            } => self.stacks[second_home] == [first] && self.stacks[first_home] == [second],
        }
    }

    #[cfg(test)]
    pub(crate) fn distance(&self, a: usize, b: usize) -> usize {
        let (ax, ay) = coords(self.location(a).unwrap());
        let (bx, by) = coords(self.location(b).unwrap());
        ax.abs_diff(bx) + ay.abs_diff(by)
    }
}
