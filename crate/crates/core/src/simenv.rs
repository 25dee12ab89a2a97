//! Synthetic 2-D manipulation suite.
//!
//! A point agent moves on the unit square next to one object and one goal
//! marker. Reach, push and pick-and-place share one dynamics function and
//! differ only in their success predicate and scripted expert. The goal is
//! never part of the proprioceptive state; it only shows up in the image.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datastore::Trajectory;
use crate::error::{Error, Result};

pub const PROPRIO_DIM: usize = 4;
pub const ACTION_DIM: usize = 3;
pub const IMAGE_SIDE: usize = 24;

pub const DT: f64 = 0.1;
pub const DAMPING: f64 = 0.1;
pub const V_MAX: f64 = 0.5;
pub const CONTACT_RADIUS: f64 = 0.08;
pub const SUCCESS_TOLERANCE: f64 = 0.05;
pub const HOLD_STEPS: usize = 5;
pub const EPISODE_LEN: usize = 64;
pub const MIN_SEPARATION: f64 = 0.2;
const SPAWN_LO: f64 = 0.1;
const SPAWN_HI: f64 = 0.9;

const KP: f64 = 5.0;
const KD: f64 = 2.0;

const GOAL_INTENSITY: f32 = 0.4;
const OBJECT_INTENSITY: f32 = 0.7;
const AGENT_INTENSITY: f32 = 1.0;

pub type Vec2 = [f64; 2];

fn dist(a: Vec2, b: Vec2) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn clip_unit(p: Vec2) -> Vec2 {
    [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Reach,
    Push,
    PickPlace,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Reach => "reach",
            TaskKind::Push => "push",
            TaskKind::PickPlace => "pickplace",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "reach" => Some(TaskKind::Reach),
            "push" => Some(TaskKind::Push),
            "pickplace" => Some(TaskKind::PickPlace),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: usize,
    pub kind: TaskKind,
    pub tolerance: f64,
    pub hold_steps: usize,
    pub episode_len: usize,
}

impl TaskSpec {
    pub fn new(id: usize, kind: TaskKind) -> Self {
        Self {
            id,
            kind,
            tolerance: SUCCESS_TOLERANCE,
            hold_steps: HOLD_STEPS,
            episode_len: EPISODE_LEN,
        }
    }

    /// The standard three-task suite, ids 0..3.
    pub fn suite() -> Vec<TaskSpec> {
        [TaskKind::Reach, TaskKind::Push, TaskKind::PickPlace]
            .into_iter()
            .enumerate()
            .map(|(i, k)| TaskSpec::new(i, k))
            .collect()
    }

    pub fn by_name(name: &str) -> Option<TaskSpec> {
        Self::suite().into_iter().find(|t| t.kind.name() == name)
    }

    pub fn by_id(id: usize) -> Option<TaskSpec> {
        Self::suite().into_iter().find(|t| t.id == id)
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    /// Position that must sit within tolerance of the goal.
    fn tracked(&self, s: &WorldState) -> Vec2 {
        match self.kind {
            TaskKind::Reach => s.agent_pos,
            TaskKind::Push | TaskKind::PickPlace => s.object_pos,
        }
    }

    pub fn success_now(&self, s: &WorldState) -> bool {
        dist(self.tracked(s), s.goal_pos) < self.tolerance
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub agent_pos: Vec2,
    pub agent_vel: Vec2,
    pub object_pos: Vec2,
    pub goal_pos: Vec2,
    pub holding: bool,
    pub step_index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionVector(pub [f64; ACTION_DIM]);

impl ActionVector {
    pub fn zero() -> Self {
        ActionVector([0.0; ACTION_DIM])
    }

    pub fn clipped(self) -> Self {
        ActionVector(self.0.map(|v| v.clamp(-1.0, 1.0)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn blank(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// `(agent_x, agent_y, agent_vx, agent_vy)`
    pub proprio: [f64; PROPRIO_DIM],
    pub image: Image,
    pub task_id: usize,
}

fn seed_for(task: &TaskSpec, seed: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((task.id as u64 + 1) << 48)
}

/// Seeded initial state: three points in the spawn box, pairwise at least
/// `MIN_SEPARATION` apart.
pub fn reset(task: &TaskSpec, seed: u64) -> (WorldState, Observation) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed_for(task, seed));
    let state = loop {
        let mut p = [[0.0; 2]; 3];
        for pt in &mut p {
            *pt = [
                rng.gen_range(SPAWN_LO..SPAWN_HI),
                rng.gen_range(SPAWN_LO..SPAWN_HI),
            ];
        }
        if dist(p[0], p[1]) >= MIN_SEPARATION
            && dist(p[0], p[2]) >= MIN_SEPARATION
            && dist(p[1], p[2]) >= MIN_SEPARATION
        {
            break WorldState {
                agent_pos: p[0],
                agent_vel: [0.0; 2],
                object_pos: p[1],
                goal_pos: p[2],
                holding: false,
                step_index: 0,
            };
        }
    };
    let obs = observe(task, &state);
    (state, obs)
}

/// The single dynamics function shared by every task.
pub fn dynamics(state: &WorldState, action: ActionVector) -> WorldState {
    let a = action.clipped().0;
    let mut vel = [0.0; 2];
    let mut pos = [0.0; 2];
    for i in 0..2 {
        vel[i] = ((1.0 - DAMPING) * state.agent_vel[i] + DT * a[i]).clamp(-V_MAX, V_MAX);
        pos[i] = state.agent_pos[i] + DT * vel[i];
    }
    let pos = clip_unit(pos);
    let disp = [pos[0] - state.agent_pos[0], pos[1] - state.agent_pos[1]];

    let mut object = state.object_pos;
    let mut holding = state.holding;
    if holding {
        object = pos;
    } else if dist(state.agent_pos, state.object_pos) < CONTACT_RADIUS {
        object = clip_unit([object[0] + disp[0], object[1] + disp[1]]);
    }
    let grip = a[2];
    if grip > 0.0 && dist(pos, object) < CONTACT_RADIUS {
        holding = true;
        object = pos;
    } else if grip <= 0.0 {
        holding = false;
    }

    WorldState {
        agent_pos: pos,
        agent_vel: vel,
        object_pos: object,
        goal_pos: state.goal_pos,
        holding,
        step_index: state.step_index + 1,
    }
}

pub fn step(
    task: &TaskSpec,
    state: &WorldState,
    action: ActionVector,
) -> (WorldState, Observation, bool) {
    let next = dynamics(state, action);
    let obs = observe(task, &next);
    let success = task.success_now(&next);
    (next, obs, success)
}

pub fn observe(task: &TaskSpec, state: &WorldState) -> Observation {
    Observation {
        proprio: [
            state.agent_pos[0],
            state.agent_pos[1],
            state.agent_vel[0],
            state.agent_vel[1],
        ],
        image: render(state),
        task_id: task.id,
    }
}

pub fn render(state: &WorldState) -> Image {
    render_sized(state, IMAGE_SIDE, IMAGE_SIDE)
}

/// Rasterizes goal, object and agent (in that order) as 2x2 blocks; `x` maps
/// to columns and `y` to rows.
pub fn render_sized(state: &WorldState, height: usize, width: usize) -> Image {
    let mut img = Image::blank(height, width);
    let mut block = |p: Vec2, v: f32| {
        let c = (p[0] * (width - 2) as f64).round() as usize;
        let r = (p[1] * (height - 2) as f64).round() as usize;
        for dr in 0..2 {
            for dc in 0..2 {
                img.pixels[(r + dr) * width + c + dc] = v;
            }
        }
    };
    block(state.goal_pos, GOAL_INTENSITY);
    block(state.object_pos, OBJECT_INTENSITY);
    block(state.agent_pos, AGENT_INTENSITY);
    img
}

/// PD controller toward a task-specific waypoint.
pub fn scripted_expert(task: &TaskSpec, state: &WorldState) -> ActionVector {
    let (agent, obj, goal) = (state.agent_pos, state.object_pos, state.goal_pos);
    let mut grip = -1.0;
    let waypoint = match task.kind {
        TaskKind::Reach => goal,
        TaskKind::Push => {
            if dist(agent, obj) < CONTACT_RADIUS {
                // In contact the object keeps its offset, so steer the agent
                // to the point that puts the object on the goal.
                [goal[0] + agent[0] - obj[0], goal[1] + agent[1] - obj[1]]
            } else {
                obj
            }
        }
        TaskKind::PickPlace => {
            if state.holding {
                if dist(obj, goal) >= task.tolerance / 2.0 {
                    grip = 1.0;
                }
                goal
            } else if dist(obj, goal) < task.tolerance {
                goal
            } else {
                if dist(agent, obj) < CONTACT_RADIUS {
                    grip = 1.0;
                }
                obj
            }
        }
    };
    let mut f = [0.0; 2];
    for i in 0..2 {
        f[i] = (KP * (waypoint[i] - agent[i]) - KD * state.agent_vel[i]).clamp(-1.0, 1.0);
    }
    ActionVector([f[0], f[1], grip])
}

/// Anything that can drive an episode. Each call returns the actions to
/// execute open-loop before the next call (one for per-step policies, a
/// chunk for chunked ones).
///
/// The world state is privileged information for scripted and replay
/// policies; learned policies must only read the observation.
pub trait Policy {
    fn plan(&mut self, obs: &Observation, world: &WorldState) -> Result<Vec<ActionVector>>;

    /// Called once before each episode.
    fn reset(&mut self) {}
}

pub struct ExpertPolicy {
    pub task: TaskSpec,
}

impl Policy for ExpertPolicy {
    fn plan(&mut self, _obs: &Observation, world: &WorldState) -> Result<Vec<ActionVector>> {
        Ok(vec![scripted_expert(&self.task, world)])
    }
}

/// Always outputs zero force and an open gripper.
pub struct NullPolicy;

impl Policy for NullPolicy {
    fn plan(&mut self, _obs: &Observation, _world: &WorldState) -> Result<Vec<ActionVector>> {
        Ok(vec![ActionVector::zero()])
    }
}

/// Replays a fixed action list in chunks of `chunk` actions.
pub struct ReplayPolicy {
    actions: Vec<ActionVector>,
    chunk: usize,
    cursor: usize,
}

impl ReplayPolicy {
    pub fn new(actions: Vec<ActionVector>, chunk: usize) -> Self {
        Self {
            actions,
            chunk: chunk.max(1),
            cursor: 0,
        }
    }
}

impl Policy for ReplayPolicy {
    fn plan(&mut self, _obs: &Observation, _world: &WorldState) -> Result<Vec<ActionVector>> {
        let end = (self.cursor + self.chunk).min(self.actions.len());
        let out = if self.cursor < end {
            self.actions[self.cursor..end].to_vec()
        } else {
            vec![ActionVector::zero()]
        };
        self.cursor = end;
        Ok(out)
    }

    fn reset(&mut self) {
        self.cursor = 0;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub trajectory: Trajectory,
    pub states: Vec<WorldState>,
    pub steps: usize,
    pub queries: usize,
}

/// Runs `policy` from `reset(task, seed)` until the success predicate has
/// held for `hold_steps` consecutive steps or `max_steps` actions ran.
pub fn run_episode(
    task: &TaskSpec,
    seed: u64,
    policy: &mut dyn Policy,
    max_steps: usize,
) -> Result<Episode> {
    run_episode_until(task, seed, policy, max_steps, true)
}

/// Like [`run_episode`]; with `stop_on_success` false the episode always
/// runs `max_steps` actions and success means the hold was reached at some
/// point.
pub fn run_episode_until(
    task: &TaskSpec,
    seed: u64,
    policy: &mut dyn Policy,
    max_steps: usize,
    stop_on_success: bool,
) -> Result<Episode> {
    policy.reset();
    let (mut state, mut obs) = reset(task, seed);
    let mut observations = Vec::new();
    let mut actions = Vec::new();
    let mut states = vec![state];
    let mut streak = 0;
    let mut queries = 0;
    let mut success = false;
    'outer: while actions.len() < max_steps {
        let plan = policy.plan(&obs, &state)?;
        queries += 1;
        if plan.is_empty() {
            return Err(Error::Config("policy returned an empty plan".into()));
        }
        for action in plan {
            let action = action.clipped();
            let (next, next_obs, now) = step(task, &state, action);
            observations.push(obs);
            actions.push(action);
            states.push(next);
            state = next;
            obs = next_obs;
            streak = if now { streak + 1 } else { 0 };
            if streak >= task.hold_steps {
                success = true;
                if stop_on_success {
                    break 'outer;
                }
            }
            if actions.len() >= max_steps {
                break 'outer;
            }
        }
    }
    let steps = actions.len();
    Ok(Episode {
        trajectory: Trajectory {
            task_id: task.id,
            seed,
            observations,
            actions,
            success,
        },
        states,
        steps,
        queries,
    })
}

/// Demonstration over the full horizon, so post-success behavior is
/// recorded too.
pub fn collect_episode(
    task: &TaskSpec,
    seed: u64,
    policy: &mut dyn Policy,
    max_steps: usize,
) -> Result<Trajectory> {
    Ok(run_episode_until(task, seed, policy, max_steps, false)?.trajectory)
}

/// Expert demonstration; an unsuccessful expert run is an error.
pub fn collect_expert_episode(task: &TaskSpec, seed: u64) -> Result<Trajectory> {
    let mut expert = ExpertPolicy { task: *task };
    let traj = collect_episode(task, seed, &mut expert, task.episode_len)?;
    if !traj.success {
        return Err(Error::ExpertFailure {
            task: task.name().to_string(),
            seed,
        });
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reach() -> TaskSpec {
        TaskSpec::by_name("reach").unwrap()
    }

    fn at_rest(agent: Vec2) -> WorldState {
        WorldState {
            agent_pos: agent,
            agent_vel: [0.0; 2],
            object_pos: [0.9, 0.9],
            goal_pos: [0.1, 0.9],
            holding: false,
            step_index: 0,
        }
    }

    #[test]
    fn reset_is_deterministic() {
        let a = reset(&reach(), 7);
        let b = reset(&reach(), 7);
        assert_eq!(a, b);
        assert!(!a.0.holding);
    }

    #[test]
    fn reset_respects_separation() {
        let push = TaskSpec::by_name("push").unwrap();
        for seed in 0..100 {
            let (s, _) = reset(&push, seed);
            assert!(dist(s.agent_pos, s.object_pos) >= MIN_SEPARATION);
            assert!(dist(s.agent_pos, s.goal_pos) >= MIN_SEPARATION);
            assert!(dist(s.object_pos, s.goal_pos) >= MIN_SEPARATION);
        }
    }

    #[test]
    fn zero_action_at_rest_stays_put() {
        let s = at_rest([0.3, 0.4]);
        let next = dynamics(&s, ActionVector([0.0, 0.0, -1.0]));
        assert_eq!(next.agent_pos, s.agent_pos);
        assert_eq!(next.agent_vel, [0.0, 0.0]);
    }

    #[test]
    fn coasting_step_matches_hand_evaluation() {
        let mut s = at_rest([0.3, 0.4]);
        s.agent_vel = [0.1, 0.0];
        let next = dynamics(&s, ActionVector::zero());
        assert!((next.agent_vel[0] - 0.09).abs() < 1e-15);
        assert!((next.agent_pos[0] - 0.309).abs() < 1e-15);
        assert_eq!(next.agent_pos[1], 0.4);
    }

    #[test]
    fn held_object_tracks_agent() {
        let mut s = at_rest([0.5, 0.5]);
        s.object_pos = s.agent_pos;
        s.holding = true;
        let mut cur = s;
        for _ in 0..10 {
            cur = dynamics(&cur, ActionVector([1.0, -0.5, 1.0]));
            assert!(cur.holding);
            assert_eq!(cur.object_pos, cur.agent_pos);
        }
    }

    #[test]
    fn render_examples() {
        let s = at_rest([0.0, 0.0]);
        assert_eq!(render(&s), render(&s));
        let img = render(&s);
        assert_eq!(img.at(0, 0), 1.0);
        assert_eq!(img.at(1, 1), 1.0);
        let max = img.pixels.iter().cloned().fold(0.0, f32::max);
        assert_eq!(max, 1.0);
    }

    #[test]
    fn expert_examples() {
        let mut s = at_rest([0.3, 0.3]);
        s.goal_pos = [0.3, 0.3];
        let a = scripted_expert(&reach(), &s);
        assert_eq!(&a.0[..2], &[0.0, 0.0]);

        let mut s = at_rest([0.2, 0.5]);
        s.goal_pos = [0.7, 0.5];
        assert!(scripted_expert(&reach(), &s).0[0] > 0.0);
    }

    #[test]
    fn replay_policy_emits_chunks() {
        let acts: Vec<_> = (0..5).map(|i| ActionVector([i as f64 * 0.1, 0.0, 0.0])).collect();
        let mut p = ReplayPolicy::new(acts.clone(), 2);
        let s = at_rest([0.5, 0.5]);
        let o = observe(&reach(), &s);
        assert_eq!(p.plan(&o, &s).unwrap(), acts[0..2].to_vec());
        assert_eq!(p.plan(&o, &s).unwrap(), acts[2..4].to_vec());
        assert_eq!(p.plan(&o, &s).unwrap(), acts[4..5].to_vec());
    }
}
