use actjepa::simenv::{
    collect_expert_episode, dynamics, render, reset, run_episode, run_episode_until, step, ActionVector, NullPolicy,
    ReplayPolicy, TaskSpec, EPISODE_LEN, V_MAX,
};
use proptest::prelude::*;

fn blobs(img: &actjepa::simenv::Image) -> usize {
    let (h, w) = (img.height, img.width);
    let mut seen = vec![false; h * w];
    let mut count = 0;
    for start in 0..h * w {
        if seen[start] || img.pixels[start] == 0.0 {
            continue;
        }
        count += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            let (r, c) = ((i / w) as i64, (i % w) as i64);
            for (dr, dc) in [(-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1)] {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                    continue;
                }
                let j = nr as usize * w + nc as usize;
                if !seen[j] && img.pixels[j] != 0.0 {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    count
}

#[test]
fn separated_entities_render_three_blobs() {
    for task in TaskSpec::suite() {
        for seed in 0..100 {
            let (s, obs) = reset(&task, seed);
            assert_eq!(blobs(&obs.image), 3, "task {} seed {seed}", task.name());
            assert_eq!(obs.image, render(&s));
            assert!(obs.image.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}

#[test]
fn expert_solves_collection_and_evaluation_seeds() {
    for task in TaskSpec::suite() {
        for seed in (0..40).chain(10_000..10_060) {
            let e = collect_expert_episode(&task, seed)
                .unwrap_or_else(|err| panic!("{err}"));
            assert!(e.success);
            assert!(e.len() <= EPISODE_LEN);
            assert_eq!(e.observations.len(), e.actions.len());
        }
    }
}

#[test]
fn recorded_actions_replay_bitwise() {
    for task in TaskSpec::suite() {
        for seed in 0..10 {
            let rec = collect_expert_episode(&task, seed).unwrap();
            let (mut s, mut o) = reset(&task, seed);
            for (i, a) in rec.actions.iter().enumerate() {
                assert_eq!(o, rec.observations[i]);
                let (ns, no, _) = step(&task, &s, *a);
                s = ns;
                o = no;
            }
            let mut replay = ReplayPolicy::new(rec.actions.clone(), 8);
            let ep = run_episode_until(&task, seed, &mut replay, EPISODE_LEN, false).unwrap();
            assert_eq!(ep.trajectory, rec);
            assert_eq!(ep.queries, rec.len().div_ceil(8));
        }
    }
}

#[test]
fn null_policy_never_succeeds() {
    for task in TaskSpec::suite() {
        for seed in 0..20 {
            let ep = run_episode(&task, seed, &mut NullPolicy, EPISODE_LEN).unwrap();
            assert!(!ep.trajectory.success);
            assert_eq!(ep.steps, EPISODE_LEN);
        }
    }
}

fn arb_action() -> impl Strategy<Value = ActionVector> {
    prop::array::uniform3(-3.0f64..3.0).prop_map(ActionVector)
}

proptest! {
    #[test]
    fn dynamics_stay_in_bounds(seed in 0u64..1000, task in 0usize..3,
                               actions in prop::collection::vec(arb_action(), 1..80)) {
        let task = TaskSpec::by_id(task).unwrap();
        let (mut s, _) = reset(&task, seed);
        for a in actions {
            s = dynamics(&s, a);
            for i in 0..2 {
                prop_assert!((0.0..=1.0).contains(&s.agent_pos[i]));
                prop_assert!((0.0..=1.0).contains(&s.object_pos[i]));
                prop_assert!(s.agent_vel[i].abs() <= V_MAX);
            }
            if s.holding {
                prop_assert_eq!(s.object_pos, s.agent_pos);
            }
        }
    }

    #[test]
    fn trajectories_are_determined_by_actions(seed in 0u64..1000, task in 0usize..3,
                                               actions in prop::collection::vec(arb_action(), 1..40)) {
        let task = TaskSpec::by_id(task).unwrap();
        let run = || {
            let (mut s, _) = reset(&task, seed);
            let mut out = vec![s];
            for a in &actions {
                s = dynamics(&s, *a);
                out.push(s);
            }
            out
        };
        prop_assert_eq!(run(), run());
    }
}
