use super::*;
use proptest::collection::vec;
use proptest::prelude::*;

fn command(seq: u64, sent_at: f64, vx: f64, vy: f64) -> WireMessage {
    WireMessage::new(seq, sent_at, Body::Command(Command { vx, vy }))
}

#[test]
fn command_round_trips() {
    let m = command(1, 0.0, 1.0, 0.0);
    let bytes = encode(&m).unwrap();
    assert_eq!(
        std::str::from_utf8(&bytes).unwrap(),
        "{\"type\":\"command\",\"seq\":1,\"sent_at\":0.000000,\"body\":{\"vx\":1.000000,\"vy\":0.000000}}\n"
    );
    assert_eq!(decode(&bytes).unwrap(), m);
}

#[test]
fn truncated_line_is_an_error() {
    let bytes = encode(&command(4, 1.5, 0.5, -0.5)).unwrap();
    let cut = &bytes[..bytes.len() - 1];
    let e = decode(cut).unwrap_err();
    assert_eq!(e.offset, cut.len());
    let half = &bytes[..20];
    let mut line = half.to_vec();
    line.push(b'\n');
    let e = decode(&line).unwrap_err();
    assert!(e.offset <= 20, "{e}");
}

#[test]
fn offsets_point_at_the_problem() {
    let e = decode(b"{\"type\":\"command\",\"seq\":x}\n").unwrap_err();
    assert_eq!(e.offset, 24);
    let e = decode(b"{\"type\":\"warp\",\"seq\":1,\"sent_at\":0.0,\"body\":{}}\n").unwrap_err();
    assert_eq!(e.offset, 8);
    let line = b"{\"type\":\"command\",\"seq\":1,\"sent_at\":0.0,\"body\":{\"vx\":1.0}}\n";
    let e = decode(line).unwrap_err();
    assert_eq!(e.offset, 47);
    assert!(e.message.contains("vy"), "{e}");
    let e = decode(b"{\"type\":\"bye\",\"seq\":1,\"sent_at\":0.0,\"body\":{\"reason\":\"x\"}}\n\n").unwrap_err();
    assert_eq!(e.message, "trailing data after newline");
}

#[test]
fn unknown_keys_rejected() {
    let line = b"{\"type\":\"command\",\"seq\":1,\"sent_at\":0.0,\"body\":{\"vx\":1.0,\"vy\":0.0,\"vz\":2.0}}\n";
    assert!(decode(line).is_err());
    let line = b"{\"type\":\"bye\",\"seq\":1,\"sent_at\":0.0,\"body\":{\"reason\":\"x\"},\"extra\":1}\n";
    assert!(decode(line).is_err());
}

#[test]
fn non_finite_values_do_not_encode() {
    assert!(encode(&command(1, 0.0, f64::NAN, 0.0)).is_err());
    assert!(encode(&command(1, f64::INFINITY, 0.0, 0.0)).is_err());
    let diag = BlendDiag {
        tick: 0,
        operator_weight: 0.0,
        robot_weight: 1.0,
        operator_std: Some(f64::INFINITY),
        robot_std: None,
        log_density: None,
        finite_candidates: 0,
        fallback: false,
    };
    assert!(encode(&WireMessage::new(0, 0.0, Body::BlendDiag(diag))).is_err());
}

#[test]
fn floats_are_fixed_width_and_never_negative_zero() {
    let bytes = encode(&command(2, 0.1234567, -1e-9, 12.0)).unwrap();
    let text = String::from_utf8(bytes).unwrap();
    assert!(text.contains("\"sent_at\":0.123457"), "{text}");
    assert!(text.contains("\"vx\":0.000000"), "{text}");
    assert!(text.contains("\"vy\":12.000000"), "{text}");
    // re-encoding the decoded form reproduces the bytes
    let again = encode(&decode(text.as_bytes()).unwrap()).unwrap();
    assert_eq!(again, text.as_bytes());
}

/// Floats with an exact six-decimal representation.
fn fixed() -> impl Strategy<Value = f64> + Clone {
    (-10_000_000_000i64..10_000_000_000).prop_map(|k| k as f64 / 1e6)
}

fn text() -> impl Strategy<Value = String> {
    "[ -~]{0,12}|[α-ω\"\\\\\n]{0,4}"
}

fn body() -> impl Strategy<Value = Body> {
    let pose = (fixed(), fixed(), fixed()).prop_map(|(x, y, theta)| Pose { x, y, theta });
    let point = || (fixed(), fixed()).prop_map(|(a, b)| [a, b]);
    prop_oneof![
        (text(), proptest::option::of(text())).prop_map(|(version, session)| Body::Hello(Hello { version, session })),
        (text(), fixed(), fixed(), any::<u64>(), proptest::option::of(point())).prop_map(
            |(session, dt, v_max, tick, goal)| Body::Config(SessionInfo { session, dt, v_max, tick, goal })
        ),
        (fixed(), fixed()).prop_map(|(vx, vy)| Body::Command(Command { vx, vy })),
        (
            any::<u64>(),
            fixed(),
            pose,
            vec((any::<u32>(), fixed(), fixed()).prop_map(|(id, x, y)| AgentPose { id, x, y }), 0..4),
            proptest::option::of(point()),
            (fixed(), fixed(), fixed()),
            vec(point(), 0..6),
        )
            .prop_map(|(tick, time, robot, agents, goal, (ow, rw, staleness_s), planned_path)| {
                Body::WorldState(WorldState {
                    tick,
                    time,
                    robot,
                    agents,
                    goal,
                    operator_weight: ow,
                    robot_weight: rw,
                    planned_path,
                    staleness_s,
                })
            }),
        (
            any::<u64>(),
            (fixed(), fixed()),
            proptest::option::of(fixed()),
            proptest::option::of(fixed()),
            proptest::option::of(fixed()),
            any::<u64>(),
            any::<bool>(),
        )
            .prop_map(|(tick, (ow, rw), os, rs, ld, n, fallback)| {
                Body::BlendDiag(BlendDiag {
                    tick,
                    operator_weight: ow,
                    robot_weight: rw,
                    operator_std: os,
                    robot_std: rs,
                    log_density: ld,
                    finite_candidates: n,
                    fallback,
                })
            }),
        (text(), text()).prop_map(|(code, message)| Body::Error(ErrorBody { code, message })),
        text().prop_map(|reason| Body::Bye(Bye { reason })),
    ]
}

proptest! {
    #[test]
    fn decode_inverts_encode(seq in any::<u64>(), sent_at in fixed(), body in body()) {
        let m = WireMessage::new(seq, sent_at, body);
        let bytes = encode(&m).unwrap();
        prop_assert_eq!(bytes.iter().filter(|&&b| b == b'\n').count(), 1);
        prop_assert_eq!(decode(&bytes).unwrap(), m);
    }

    #[test]
    fn encoding_is_stable_for_any_float(seq in any::<u64>(), sent_at in -1e6..1e6f64, vx in -1e6..1e6f64, vy in -1e6..1e6f64) {
        let once = encode(&command(seq, sent_at, vx, vy)).unwrap();
        let twice = encode(&decode(&once).unwrap()).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn garbage_never_panics(bytes in vec(any::<u8>(), 0..64)) {
        if let Err(e) = decode(&bytes) {
            prop_assert!(e.offset <= bytes.len());
        }
    }
}
