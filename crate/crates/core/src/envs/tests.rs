use super::*;
use crate::flow::warp_layered;
use proptest::prelude::*;
use rand::Rng;

fn grid(n_distractors: usize) -> EnvConfig {
    EnvConfig {
        n_distractors,
        ..EnvConfig::distractor_grid()
    }
}

#[test]
fn reset_is_deterministic() {
    let c = grid(3);
    assert_eq!(env_reset(&c, 11).unwrap(), env_reset(&c, 11).unwrap());
}

#[test]
fn nearby_seeds_move_the_agent() {
    let c = grid(3);
    let differ = (0..100)
        .filter(|&s| env_reset(&c, s).unwrap().agent != env_reset(&c, s + 1).unwrap().agent)
        .count();
    assert!(differ >= 90, "{differ}/100");
}

#[test]
fn no_distractors_renders_agent_and_background_only() {
    let mut c = grid(0);
    c.goal_enabled = false;
    let s = env_reset(&c, 3).unwrap();
    let img = render(&s);
    let mask = oracle_agent_mask(&s);
    for y in 0..c.height {
        for x in 0..c.width {
            let p = img.get(x, y);
            if mask.get(x, y) {
                assert!(p == AGENT_RING || p == AGENT_CORE);
            } else {
                assert_eq!(p, s.background[(y / PATCH) * (c.width / PATCH) + x / PATCH]);
            }
        }
    }
}

#[test]
fn overcrowded_reset_is_a_config_error() {
    let mut c = grid(40);
    c.height = 8;
    c.width = 8;
    assert!(matches!(env_reset(&c, 0), Err(Error::Config(_))));
}

#[test]
fn invalid_config_rejected() {
    let mut c = grid(1);
    c.width = 30;
    assert!(c.validate().is_err());
    let mut c = grid(1);
    c.agent_step = 0;
    assert!(c.validate().is_err());
}

#[test]
fn noop_with_static_distractors_keeps_frame() {
    let mut c = grid(3);
    c.distractor_speed = 0;
    let s = env_reset(&c, 5).unwrap();
    let (n, _) = env_step(&s, &Action::NOOP).unwrap();
    assert_eq!(render(&s), render(&n));
    assert_eq!(n.step_index, 1);
    let f = oracle_flow(&s, &n).unwrap();
    assert!(f.u.iter().chain(&f.v).all(|&x| x == 0.0));
}

#[test]
fn right_moves_agent_two_pixels() {
    let c = grid(0);
    let mut s = env_reset(&c, 1).unwrap();
    s.agent = (10.0, 10.0);
    let (n, _) = env_step(&s, &Action::RIGHT).unwrap();
    assert_eq!(n.agent, (12.0, 10.0));
    s.agent = (c.max_x(), 10.0);
    let (n, _) = env_step(&s, &Action::RIGHT).unwrap();
    assert_eq!(n.agent, (c.max_x(), 10.0));
}

#[test]
fn distractor_bounces_off_right_border() {
    let c = grid(1);
    let mut s = env_reset(&c, 1).unwrap();
    s.distractors[0].x = c.max_x();
    s.distractors[0].vx = 1.0;
    s.distractors[0].vy = 0.0;
    let (n, _) = env_step(&s, &Action::NOOP).unwrap();
    assert_eq!((n.distractors[0].vx, n.distractors[0].vy), (-1.0, 0.0));
    assert_eq!(n.distractors[0].x, c.max_x() - 1.0);
}

#[test]
fn wrong_action_type_is_usage_error() {
    let s = env_reset(&grid(1), 0).unwrap();
    assert!(matches!(env_step(&s, &Action::Continuous(1.0, 0.0)), Err(Error::Usage(_))));
    assert!(env_step(&s, &Action::Discrete(5)).is_err());
    let p = env_reset(&EnvConfig::point_mass(), 0).unwrap();
    assert!(env_step(&p, &Action::UP).is_err());
    assert!(env_step(&p, &Action::Continuous(3.5, 0.0)).is_err());
    assert!(env_step(&p, &Action::Continuous(-3.0, 2.5)).is_ok());
}

#[test]
fn render_is_pure_and_moving_distractors_change_frames() {
    let c = grid(3);
    let s = env_reset(&c, 9).unwrap();
    assert_eq!(render(&s), render(&s));
    let mut diff = 0.0;
    for seed in 0..20 {
        let s = env_reset(&c, seed).unwrap();
        let (n, _) = env_step(&s, &Action::NOOP).unwrap();
        let (a, b) = (render(&s), render(&n));
        diff += a.data.iter().zip(&b.data).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum::<f64>();
    }
    assert!(diff > 0.0);
}

#[test]
fn agent_moving_right_has_exact_flow() {
    let c = grid(0);
    let mut s = env_reset(&c, 2).unwrap();
    s.agent = (8.0, 8.0);
    s.goal = Some((20.0, 20.0));
    let (n, _) = env_step(&s, &Action::RIGHT).unwrap();
    let f = oracle_flow(&s, &n).unwrap();
    let m = oracle_agent_mask(&s);
    for y in 0..c.height {
        for x in 0..c.width {
            let expect = if m.get(x, y) { (2.0, 0.0) } else { (0.0, 0.0) };
            assert_eq!(f.at(x, y), expect);
        }
    }
}

#[test]
fn mask_counts_and_translates() {
    let c = grid(3);
    let s = env_reset(&c, 4).unwrap();
    let m = oracle_agent_mask(&s);
    assert_eq!(m.count(), SPRITE * SPRITE);
    for d in &s.distractors {
        for dy in 0..SPRITE {
            for dx in 0..SPRITE {
                assert!(!m.get(d.x as usize + dx, d.y as usize + dy));
            }
        }
    }
    let mut moved = s.clone();
    moved.agent = (8.0, 8.0);
    let m1 = oracle_agent_mask(&moved);
    moved.agent = (10.0, 8.0);
    let m2 = oracle_agent_mask(&moved);
    for y in 0..c.height {
        for x in 0..c.width - 2 {
            assert_eq!(m1.get(x, y), m2.get(x + 2, y));
        }
    }
}

#[test]
fn mismatched_states_rejected_by_oracle() {
    let a = env_reset(&grid(3), 0).unwrap();
    let b = env_reset(&grid(2), 0).unwrap();
    assert!(oracle_flow(&a, &b).is_err());
}

#[test]
fn expert_moves_toward_goal() {
    let c = grid(0);
    let mut s = env_reset(&c, 0).unwrap();
    s.agent = (4.0, 10.0);
    s.goal = Some((10.0, 4.0));
    assert_eq!(scripted_expert(&s).unwrap(), Action::RIGHT);
    s.agent = (10.0, 10.0);
    assert_eq!(scripted_expert(&s).unwrap(), Action::UP);
    s.agent = (10.0, 4.0);
    assert_eq!(scripted_expert(&s).unwrap(), Action::NOOP);
    let mut nogoal = c.clone();
    nogoal.goal_enabled = false;
    let s = env_reset(&nogoal, 0).unwrap();
    assert!(matches!(scripted_expert(&s), Err(Error::Usage(_))));
}

fn expert_success(c: &EnvConfig, episodes: u64) -> usize {
    (0..episodes)
        .filter(|&seed| {
            let mut s = env_reset(c, seed).unwrap();
            for _ in 0..c.horizon() {
                let (n, done) = env_step(&s, &scripted_expert(&s).unwrap()).unwrap();
                if done {
                    return true;
                }
                s = n;
            }
            false
        })
        .count()
}

#[test]
fn expert_reaches_goal_within_horizon() {
    let ok = expert_success(&grid(3), 1000);
    assert!(ok >= 990, "{ok}/1000");
    let ok = expert_success(&EnvConfig::point_mass(), 1000);
    assert!(ok >= 990, "{ok}/1000");
}

#[test]
fn uniform_policy_actions_pass_chi_square() {
    let c = grid(0);
    let mut counts = [0usize; N_DISCRETE_ACTIONS];
    let stream = generate_transitions(&c, 10_000, Policy::UniformRandom, FlowLabeling::for_env(&c), 3).unwrap();
    for t in stream {
        counts[t.unwrap().action.index().unwrap()] += 1;
    }
    let e = 10_000.0 / N_DISCRETE_ACTIONS as f64;
    let chi2: f64 = counts.iter().map(|&o| (o as f64 - e).powi(2) / e).sum();
    // 4 degrees of freedom, alpha = 0.01
    assert!(chi2 < 13.277, "chi2 = {chi2}, counts {counts:?}");
}

#[test]
fn warped_frames_match_next_frames() {
    let c = grid(3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut matched, mut total) = (0usize, 0usize);
    let mut s = env_reset(&c, 0).unwrap();
    for _ in 0..100 {
        let a = Policy::pretrain_default().act(&s, &mut rng).unwrap();
        let (n, done) = env_step(&s, &a).unwrap();
        let (f, layers) = oracle_flow_layers(&s, &n).unwrap();
        let warped = warp_layered(&render(&s), &f, &layers);
        let next = render(&n);
        matched += (0..c.width * c.height)
            .filter(|&p| warped.data[3 * p..3 * p + 3] == next.data[3 * p..3 * p + 3])
            .count();
        total += c.width * c.height;
        s = if done { env_reset(&c, rng.random()).unwrap() } else { n };
    }
    let rate = matched as f64 / total as f64;
    assert!(rate >= 0.95, "match rate {rate}");
}

proptest! {
    #[test]
    fn distractors_ignore_actions(seed in any::<u64>(), acts in prop::collection::vec(0u8..5, 1..20)) {
        let c = grid(3);
        let mut a = env_reset(&c, seed).unwrap();
        let mut b = a.clone();
        for &i in &acts {
            a = env_step(&a, &Action::Discrete(i)).unwrap().0;
            b = env_step(&b, &Action::NOOP).unwrap().0;
            prop_assert_eq!(&a.distractors, &b.distractors);
        }
    }

    #[test]
    fn agent_flow_equals_clamped_displacement(seed in any::<u64>(), i in 0u8..5) {
        let c = grid(3);
        let s = env_reset(&c, seed).unwrap();
        let (n, _) = env_step(&s, &Action::Discrete(i)).unwrap();
        let f = oracle_flow(&s, &n).unwrap();
        let m = oracle_agent_mask(&s);
        let d = (n.agent.0 - s.agent.0, n.agent.1 - s.agent.1);
        for y in 0..c.height {
            for x in 0..c.width {
                if m.get(x, y) {
                    prop_assert_eq!(f.at(x, y), d);
                }
            }
        }
    }

    #[test]
    fn continuous_agent_flow_matches(seed in any::<u64>(), dx in -3.0f32..3.0, dy in -3.0f32..3.0) {
        let c = EnvConfig::point_mass();
        let s = env_reset(&c, seed).unwrap();
        let (n, _) = env_step(&s, &Action::Continuous(dx, dy)).unwrap();
        let f = oracle_flow(&s, &n).unwrap();
        let m = oracle_agent_mask(&s);
        let d = (n.agent.0 - s.agent.0, n.agent.1 - s.agent.1);
        prop_assert!(n.agent.0 >= 0.0 && n.agent.0 <= c.max_x());
        for (i, &bit) in m.data.iter().enumerate() {
            if bit == 1 {
                prop_assert_eq!((f.u[i], f.v[i]), d);
            }
        }
    }

    #[test]
    fn rollouts_are_deterministic(seed in any::<u64>(), acts in prop::collection::vec(0u8..5, 1..10)) {
        let c = grid(2);
        let run = || {
            let mut s = env_reset(&c, seed).unwrap();
            let mut frames = vec![render(&s)];
            for &i in &acts {
                s = env_step(&s, &Action::Discrete(i)).unwrap().0;
                frames.push(render(&s));
            }
            frames
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn sprites_stay_inside_frame(seed in any::<u64>(), acts in prop::collection::vec(0u8..5, 1..40)) {
        let c = grid(3);
        let mut s = env_reset(&c, seed).unwrap();
        for &i in &acts {
            s = env_step(&s, &Action::Discrete(i)).unwrap().0;
            let inside = |x: f32, y: f32| (0.0..=c.max_x()).contains(&x) && (0.0..=c.max_y()).contains(&y);
            prop_assert!(inside(s.agent.0, s.agent.1));
            for d in &s.distractors {
                prop_assert!(inside(d.x, d.y));
            }
        }
    }

    #[test]
    fn expert_never_increases_goal_distance(seed in any::<u64>()) {
        let c = grid(3);
        let mut s = env_reset(&c, seed).unwrap();
        let dist = |s: &EnvState| {
            let g = s.goal.unwrap();
            (g.0 - s.agent.0).abs() + (g.1 - s.agent.1).abs()
        };
        for _ in 0..c.horizon() {
            let (n, done) = env_step(&s, &scripted_expert(&s).unwrap()).unwrap();
            prop_assert!(dist(&n) <= dist(&s));
            if done { break; }
            s = n;
        }
    }
}
