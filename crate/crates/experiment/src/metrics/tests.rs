use super::*;
use tempfile::tempdir;

fn row(drop: f64, seed: u64, path_length: f64, clearance: Option<f64>, completion: Option<u64>) -> SummaryRow {
    SummaryRow {
        cell: 0,
        drop_probability: drop,
        base_delay_s: 0.0,
        seed,
        ticks: 100,
        completed: completion.is_some(),
        completion_tick: completion,
        path_length,
        mean_clearance: clearance,
        min_clearance: clearance.map(|c| c / 2.0),
        mean_operator_weight: 0.25 * seed as f64,
        mean_tracking_error: None,
        fallback_ticks: seed,
        failed: false,
    }
}

fn stat<'a>(cell: &'a CellSummary, name: &str) -> &'a Stat {
    &cell.metrics.iter().find(|(n, _)| *n == name).unwrap().1
}

#[test]
fn tick_rows_round_trip_through_csv() {
    let dir = tempdir().unwrap();
    let rows = vec![
        TickRow {
            seed: 3,
            tick: 0,
            time: 0.0,
            x: 0.1,
            y: -0.2,
            theta: 0.3,
            operator_weight: 0.7,
            robot_weight: 0.3,
            operator_std: Some(0.01),
            commanded_vx: Some(1.0),
            commanded_vy: Some(0.0),
            executed_vx: 0.9,
            executed_vy: 0.05,
            tracking_error: Some(0.1),
            min_clearance: None,
            staleness_s: Some(0.5),
            fallback: false,
        },
        TickRow {
            seed: 3,
            tick: 1,
            time: 0.05,
            x: 1.0 / 3.0,
            y: 0.0,
            theta: 0.0,
            operator_weight: 0.0,
            robot_weight: 1.0,
            operator_std: None,
            commanded_vx: None,
            commanded_vy: None,
            executed_vx: 0.0,
            executed_vy: 0.0,
            tracking_error: None,
            min_clearance: Some(2.5),
            staleness_s: None,
            fallback: true,
        },
    ];
    let path = dir.path().join("a.ticks.csv");
    write_file(&path, &ticks_csv(&rows)).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("# schema=blendnav-ticks/1\nseed,tick,time,x,y,theta,"), "{text}");
    assert_eq!(read_ticks(&path).unwrap(), rows);
}

#[test]
fn schema_mismatch_names_the_file() {
    let dir = tempdir().unwrap();
    let ticks = dir.path().join("odd.summary.csv");
    write_file(&ticks, &ticks_csv(&[])).unwrap();
    let e = read_summary(&ticks).unwrap_err();
    assert!(matches!(e, MetricsError::Schema { .. }));
    assert!(e.to_string().contains("odd.summary.csv"), "{e}");

    let good = dir.path().join("good.summary.csv");
    write_file(&good, &summary_csv(&[row(0.0, 0, 1.0, None, None)])).unwrap();
    let e = summarize(&[good, ticks.clone()], &dir.path().join("t.csv")).unwrap_err();
    assert!(e.to_string().contains("odd.summary.csv"), "{e}");

    let plain = dir.path().join("plain.summary.csv");
    std::fs::write(&plain, "cell,seed\n0,1\n").unwrap();
    assert!(matches!(read_summary(&plain), Err(MetricsError::Schema { .. })));
}

#[test]
fn single_file_is_its_own_summary() {
    let dir = tempdir().unwrap();
    let f = dir.path().join("one.summary.csv");
    let r = row(0.3, 2, 4.5, Some(1.25), Some(80));
    write_file(&f, &summary_csv(std::slice::from_ref(&r))).unwrap();
    let cells = summarize(&[f], &dir.path().join("table.csv")).unwrap();
    assert_eq!(cells.len(), 1);
    let c = &cells[0];
    assert_eq!((c.drop_probability, c.runs), (0.3, 1));
    assert_eq!(stat(c, "path_length").mean, Some(4.5));
    assert_eq!(stat(c, "mean_clearance").mean, Some(1.25));
    assert_eq!(stat(c, "completion_tick").mean, Some(80.0));
    assert_eq!(stat(c, "mean_operator_weight").mean, Some(0.5));
    assert_eq!(stat(c, "path_length").std_error, None);
    assert_eq!(stat(c, "mean_tracking_error").n, 0);
}

#[test]
fn identical_files_have_zero_std_error() {
    let dir = tempdir().unwrap();
    let rows = [row(0.0, 1, 3.0, Some(0.5), Some(10)), row(0.6, 1, 2.0, Some(0.7), None)];
    let a = dir.path().join("a.summary.csv");
    let b = dir.path().join("b.summary.csv");
    write_file(&a, &summary_csv(&rows)).unwrap();
    write_file(&b, &summary_csv(&rows)).unwrap();
    let cells = summarize(&[a, b], &dir.path().join("t.csv")).unwrap();
    assert_eq!(cells.len(), 2);
    for c in &cells {
        assert_eq!(c.runs, 2);
        for (name, s) in &c.metrics {
            if s.n >= 2 {
                assert_eq!(s.std_error, Some(0.0), "{name}");
            }
        }
    }
}

#[test]
fn three_row_fixture_matches_hand_arithmetic() {
    let rows = [
        row(0.3, 0, 1.0, Some(2.0), Some(40)),
        row(0.3, 1, 2.0, None, None),
        row(0.3, 2, 6.0, Some(4.0), Some(60)),
    ];
    let cells = summarize_rows(&rows);
    assert_eq!(cells.len(), 1);
    let c = &cells[0];
    assert_eq!(c.runs, 3);
    // path length 1, 2, 6: mean 3, sample variance (4 + 1 + 9) / 2 = 7
    let p = stat(c, "path_length");
    assert_eq!(p.mean, Some(3.0));
    assert!((p.std_error.unwrap() - (7.0f64 / 3.0).sqrt()).abs() < 1e-15);
    // clearance 2, 4 over the two runs that had one: mean 3, var 2
    let m = stat(c, "mean_clearance");
    assert_eq!((m.n, m.mean), (2, Some(3.0)));
    assert!((m.std_error.unwrap() - 1.0).abs() < 1e-15);
    // completion: two of three runs
    assert!((stat(c, "completed").mean.unwrap() - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(stat(c, "completion_tick").mean, Some(50.0));
    // operator weight 0, 0.25, 0.5
    assert!((stat(c, "mean_operator_weight").mean.unwrap() - 0.25).abs() < 1e-15);
    assert_eq!(stat(c, "fallback_ticks").mean, Some(1.0));
}

#[test]
fn table_has_schema_and_one_line_per_cell() {
    let rows = [row(0.6, 0, 1.0, None, None), row(0.0, 0, 1.0, None, None), row(0.6, 1, 3.0, None, None)];
    let text = String::from_utf8(table_csv(&summarize_rows(&rows))).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "# schema=blendnav-table/1");
    assert!(lines[1].starts_with("drop_probability,base_delay_s,runs,completed_mean,completed_std_error,"));
    assert_eq!(lines.len(), 4);
    assert!(lines[2].starts_with("0,0,1,"), "{}", lines[2]);
    assert!(lines[3].starts_with("0.6,0,2,"), "{}", lines[3]);
}

#[test]
fn summarize_needs_input() {
    let dir = tempdir().unwrap();
    assert!(matches!(summarize(&[], &dir.path().join("t.csv")), Err(MetricsError::Empty(_))));
    assert!(summary_files(dir.path()).unwrap().is_empty());
}
