use super::*;
use crate::interaction::{AttractionParams, CooperationParams};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn session_config() -> SessionConfig {
    SessionConfig {
        planner: PlannerConfig {
            horizon: 8,
            sample_count: 30,
            dt: 0.1,
            seed: 17,
            refine_iterations: 3,
            refine_proposals: 4,
        },
        interaction: InteractionParams {
            attraction: Some(AttractionParams::isotropic(2, 0.1).unwrap()),
            cooperation: Some(CooperationParams::new(0.9, 0.4).unwrap()),
        },
        goal: Some([3.0, 1.0]),
        ..SessionConfig::default()
    }
}

fn robot_obs(seq: u64, t: f64, pose: [f64; 3]) -> TimedObservation {
    TimedObservation::new(Source::Robot, seq, t, pose.to_vec())
}

fn command(seq: u64, t: f64, v: [f64; 2]) -> TimedObservation {
    TimedObservation::new(Source::Operator, seq, t, v.to_vec())
}

fn agent(id: u32, seq: u64, t: f64, p: [f64; 2]) -> TimedObservation {
    TimedObservation::new(Source::Agent(id), seq, t, p.to_vec())
}

/// Drives a session with a toy integrator; returns every result.
fn drive(
    config: SessionConfig,
    ticks: u64,
    commands: impl Fn(u64, f64) -> Option<[f64; 2]>,
) -> Vec<BlendResult> {
    let mut session = PlannerSession::new(config).unwrap();
    let dt = session.config().planner.dt;
    let mut pose = [0.0, 0.0, 0.0];
    let mut out = Vec::new();
    for k in 0..ticks {
        let now = k as f64 * dt;
        let mut batch = vec![robot_obs(k, now, pose), agent(0, k, now, [1.5, -0.5 + 0.1 * now])];
        if let Some(v) = commands(k, now) {
            batch.push(command(k, now, v));
        }
        let r = session.step(now, &batch).unwrap();
        pose[0] += r.velocity[0] * dt;
        pose[1] += r.velocity[1] * dt;
        out.push(r);
    }
    out
}

#[test]
fn silent_operator_matches_autonomy_only() {
    let blended = drive(session_config(), 6, |_, _| None);
    let alone = drive(
        SessionConfig {
            autonomy_only: true,
            ..session_config()
        },
        6,
        |_, _| None,
    );
    for (a, b) in blended.iter().zip(&alone) {
        assert_eq!(a.map_sample, b.map_sample);
        assert_eq!(a.velocity, b.velocity);
        assert_eq!(a.next_action, b.next_action);
    }
    // the prior-only operator still shows up in the allocation
    assert!(blended[0].autonomy.operator_weight > 0.0);
    assert_eq!(alone[0].autonomy.operator_weight, 0.0);
}

#[test]
fn delivery_order_does_not_matter() {
    let mut batch: Vec<TimedObservation> = (0..6)
        .flat_map(|k| {
            let t = k as f64 * 0.1;
            [
                robot_obs(k, t, [0.1 * t, 0.0, 0.0]),
                command(k, t - 0.05, [1.0, 0.2]),
                agent(3, k, t, [1.0, 0.5 - t]),
            ]
        })
        .collect();
    let mut a = PlannerSession::new(session_config()).unwrap();
    let ra = a.step(0.5, &batch).unwrap();
    batch.shuffle(&mut ChaCha8Rng::seed_from_u64(4));
    let mut b = PlannerSession::new(session_config()).unwrap();
    let rb = b.step(0.5, &batch).unwrap();
    assert_eq!(ra, rb);
    let grid = TimeGrid::new(0.5, 8, 0.1).unwrap();
    assert_eq!(a.posteriors(&grid).unwrap(), b.posteriors(&grid).unwrap());
}

#[test]
fn dropped_command_equals_never_sent() {
    let all: Vec<TimedObservation> = (0..5).map(|k| command(k, 0.1 * k as f64, [1.0, 0.1 * k as f64])).collect();
    let mut dropped = all.clone();
    dropped.remove(2);
    let never: Vec<TimedObservation> = all.iter().filter(|o| o.sequence != 2).cloned().collect();
    let robot = [robot_obs(0, 0.4, [0.0, 0.0, 0.0])];
    let mut a = PlannerSession::new(session_config()).unwrap();
    let mut b = PlannerSession::new(session_config()).unwrap();
    // the dropped stream arrives in two pieces, the other at once
    a.step(0.3, &[&dropped[..2], &robot[..]].concat()).unwrap();
    let ra = a.step(0.4, &dropped[2..]).unwrap();
    b.step(0.3, &robot).unwrap();
    let rb = b.step(0.4, &never).unwrap();
    let grid = TimeGrid::new(0.4, 8, 0.1).unwrap();
    assert_eq!(a.posteriors(&grid).unwrap(), b.posteriors(&grid).unwrap());
    assert_eq!(ra, rb);
}

#[test]
fn duplicates_are_ignored() {
    let obs = [robot_obs(0, 0.0, [0.0, 0.0, 0.0]), command(0, 0.0, [1.0, 0.0])];
    let mut a = PlannerSession::new(session_config()).unwrap();
    a.step(0.0, &obs).unwrap();
    a.step(0.1, &obs).unwrap();
    assert_eq!(a.observations().len(), 2);
}

#[test]
fn history_window_forgets_old_observations() {
    let mut s = PlannerSession::new(session_config()).unwrap();
    s.step(0.0, &[robot_obs(0, 0.0, [0.0, 0.0, 0.0]), command(0, 0.0, [1.0, 0.0])])
        .unwrap();
    s.step(5.0, &[robot_obs(1, 5.0, [1.0, 0.0, 0.0])]).unwrap();
    let kept = s.observations();
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0].sequence, 1);
}

#[test]
fn invalid_batch_rejected_without_side_effects() {
    let mut s = PlannerSession::new(session_config()).unwrap();
    let bad = [robot_obs(0, 0.0, [0.0, 0.0, 0.0]), TimedObservation::new(Source::Operator, 0, 0.0, vec![1.0, 0.0, 0.0])];
    assert!(matches!(
        s.step(0.0, &bad),
        Err(PlannerError::Gp(GpError::DimensionMismatch { .. }))
    ));
    let nan = [command(1, 0.0, [f64::NAN, 0.0])];
    assert!(matches!(
        s.step(0.0, &nan),
        Err(PlannerError::Gp(GpError::NonFiniteObservation { .. }))
    ));
    assert!(s.observations().is_empty());
    assert_eq!(s.tick(), 0);
}

#[test]
fn failing_tick_repeats_previous_action() {
    let mut s = PlannerSession::new(session_config()).unwrap();
    let first = s
        .step(0.0, &[robot_obs(0, 0.0, [0.0, 0.0, 0.0]), command(0, 0.0, [1.0, 0.0])])
        .unwrap();
    assert!(!first.diagnostics.fallback);
    // a wildly out-of-range command makes every candidate score −∞
    let second = s.step(0.1, &[command(1, 0.1, [1e200, 0.0])]).unwrap();
    assert!(second.diagnostics.fallback);
    assert!(second.diagnostics.failure.is_some());
    assert_eq!(second.next_action, first.next_action);
    assert_eq!(second.velocity, first.velocity);
}

#[test]
fn goal_attracts_the_robot() {
    let results = drive(session_config(), 40, |_, _| None);
    let mut pose = [0.0f64, 0.0];
    for r in &results {
        pose[0] += r.velocity[0] * 0.1;
        pose[1] += r.velocity[1] * 0.1;
    }
    let start = (3.0f64).hypot(1.0);
    let end = (3.0 - pose[0]).hypot(1.0 - pose[1]);
    assert!(end < 0.5 * start, "distance {start} -> {end}");
}

#[test]
fn operator_command_steers_the_plan() {
    let cfg = SessionConfig {
        goal: None,
        ..session_config()
    };
    let results = drive(cfg, 20, |_, _| Some([0.0, 1.0]));
    let last = results.last().unwrap();
    assert!(last.velocity[1] > 0.8, "{:?}", last.velocity);
    assert!(last.velocity[0].abs() < 0.2, "{:?}", last.velocity);
    assert!(last.autonomy.operator_weight > 0.0);
}

#[test]
fn wrap_angle_range() {
    for a in [-7.0, -PI, -1.0, 0.0, PI, 4.0, 10.0] {
        let w = wrap_angle(a);
        assert!(w > -PI && w <= PI, "{a} -> {w}");
        assert!(((a - w) / (2.0 * PI)).fract().abs() < 1e-12 || ((a - w) / (2.0 * PI)).fract().abs() > 1.0 - 1e-12);
    }
}

#[test]
fn config_validation() {
    let bad = SessionConfig {
        history_s: 0.0,
        ..session_config()
    };
    assert!(PlannerSession::new(bad).is_err());
    let bad = SessionConfig {
        interaction: InteractionParams {
            attraction: Some(AttractionParams::isotropic(3, 1.0).unwrap()),
            cooperation: None,
        },
        ..session_config()
    };
    assert!(PlannerSession::new(bad).is_err());
}
