use pcrl::agents::random_action;
use pcrl::environment::{admissible_centers, episode_seed, AgentPose, EnvConfig, Heading, StartRule, WorldState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn cylinder_centers_are_uniform_over_admissible_cells() {
    let env = EnvConfig::default();
    let centers = admissible_centers(&env);
    let mut counts = vec![0usize; centers.len()];
    let seeds = 10_000;
    for s in 0..seeds {
        let world = WorldState::new(episode_seed(11, s), &env, StartRule::Uniform).unwrap();
        for c in world.cylinders() {
            let cell = [c.center[0].floor() as i64, c.center[1].floor() as i64];
            counts[centers.iter().position(|&a| a == cell).expect("admissible center")] += 1;
        }
    }
    let n = seeds as f64;
    let p = env.cylinder_count as f64 / centers.len() as f64;
    let (expected, se) = (n * p, (n * p * (1.0 - p)).sqrt());
    for (cell, &c) in centers.iter().zip(&counts) {
        assert!((c as f64 - expected).abs() < 3.0 * se, "center {cell:?}: {c} vs {expected:.1} ± {se:.1}");
    }
    // Pearson statistic with 80 degrees of freedom; 0.1% critical value 124.8.
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    assert_eq!(centers.len(), 81);
    assert!(chi2 < 124.8, "chi-square {chi2:.1}");
}

#[test]
fn random_actions_are_uniform_when_all_are_legal() {
    let env = EnvConfig::default();
    let pose = AgentPose { cell: [6, 6], heading: Heading::North };
    let world = (0..)
        .map(|s| WorldState::new(s, &env, StartRule::Fixed(pose)))
        .find_map(|w| w.ok().filter(|w| w.legal_actions().len() == 6))
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut counts = [0usize; 6];
    for _ in 0..60_000 {
        counts[random_action(&world, &mut rng).index()] += 1;
    }
    let se = (60_000.0f64 * (1.0 / 6.0) * (5.0 / 6.0)).sqrt();
    for c in counts {
        assert!((c as f64 - 10_000.0).abs() < 3.0 * se, "{counts:?}");
    }
}

#[test]
fn wall_adjacent_starts_touch_the_wall_ring() {
    let env = EnvConfig::default();
    let hi = env.room_size as i64 - 2;
    for s in 0..200 {
        let [x, y] = WorldState::new(s, &env, StartRule::WallAdjacent).unwrap().pose().cell;
        assert!(x == 1 || y == 1 || x == hi || y == hi, "start {x},{y}");
    }
}
