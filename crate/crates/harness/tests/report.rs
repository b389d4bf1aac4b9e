use std::collections::BTreeMap;

use flexcomp_harness::report::{emit_report, write_series, ExperimentKind, MetricTable, Report, ReportFormat, Series};
use flexcomp_harness::Metrics;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn sample_report(controllers: &[&str], channels: usize, seed: u64) -> Report {
    let mut x = seed as f64 * 0.1 + 0.1;
    let mut next = || {
        x = (x * 7.3 + 0.37).fract();
        x / 3.0 + 1e-17
    };
    let metrics = controllers
        .iter()
        .map(|_| Metrics {
            l2: (0..channels).map(|_| next()).collect(),
            linf: (0..channels).map(|_| next()).collect(),
        })
        .collect();
    let mut report = Report {
        experiment: ExperimentKind::Sinusoid,
        seed,
        controllers: controllers.iter().map(|c| c.to_string()).collect(),
        tables: vec![MetricTable {
            name: "joint".into(),
            unit: "rad".into(),
            channels: (1..=channels).map(|i| format!("j{i}")).collect(),
            metrics,
        }],
        summary: BTreeMap::from([("ilc.final_error".to_string(), 0.1 + 0.2)]),
        ilc_history: BTreeMap::from([("rnn_ilc".to_string(), vec![1.0, 0.5, 1.0 / 3.0])]),
    };
    report.summarize_improvements();
    report
}

fn emit(report: &Report, format: ReportFormat) -> String {
    let mut buf = Vec::new();
    emit_report(report, format, &mut buf).unwrap();
    String::from_utf8(buf).unwrap()
}

#[test]
fn json_round_trip_is_identical() {
    let r = sample_report(&["baseline", "rnn_ilc", "brnn"], 7, 3);
    let back = Report::from_json(&emit(&r, ReportFormat::Json)).unwrap();
    assert_eq!(back, r);
}

#[test]
fn csv_round_trips_every_float() {
    let r = sample_report(&["baseline", "rnn_ilc", "brnn"], 4, 5);
    let text = emit(&r, ReportFormat::Csv);
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header.len(), 3 + 2 * 3);
    assert_eq!(header[3], "baseline_l2");
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells.len(), header.len());
        for (c, m) in r.tables[0].metrics.iter().enumerate() {
            assert_eq!(cells[3 + 2 * c].parse::<f64>().unwrap(), m.l2[i]);
            assert_eq!(cells[4 + 2 * c].parse::<f64>().unwrap(), m.linf[i]);
        }
    }
}

#[test]
fn empty_report_is_header_only() {
    let r = Report {
        experiment: ExperimentKind::Random,
        seed: 0,
        controllers: vec!["baseline".into(), "brnn".into()],
        tables: vec![],
        summary: BTreeMap::new(),
        ilc_history: BTreeMap::new(),
    };
    let csv = emit(&r, ReportFormat::Csv);
    assert_eq!(csv.lines().count(), 1);
    assert_eq!(csv.trim_end(), "table,channel,unit,baseline_l2,baseline_linf,brnn_l2,brnn_linf");
    let md = emit(&r, ReportFormat::Markdown);
    assert_eq!(md.trim_end(), "# random (seed 0)");
    assert_eq!(Report::from_json(&emit(&r, ReportFormat::Json)).unwrap(), r);
}

#[test]
fn markdown_layout() {
    let r = sample_report(&["baseline", "rnn_ilc", "brnn"], 7, 1);
    let md = emit(&r, ReportFormat::Markdown);
    let header = md.lines().find(|l| l.starts_with("| Channel | Unit")).unwrap();
    let cols = header.trim_matches('|').split('|').count();
    assert_eq!(cols, 2 + 2 * 3);
    // One row per joint under the header and separator.
    let start = md.lines().position(|l| l == header).unwrap();
    let rows: Vec<&str> = md.lines().skip(start + 2).take_while(|l| l.starts_with('|')).collect();
    assert_eq!(rows.len(), 7);
    assert!(rows[0].starts_with("| j1 | rad |"));
    assert!(md.contains("| mean |"));
    assert!(md.contains("ilc.final_error"));
}

#[test]
fn improvement_summary_keys() {
    let r = sample_report(&["baseline", "rnn_ilc", "brnn"], 2, 2);
    for c in ["rnn_ilc", "brnn"] {
        let mean = r.mean_improvement("joint", c).unwrap();
        assert_eq!(r.summary[&format!("improvement.joint.{c}.mean")], mean);
        let per = r.improvement("joint", c).unwrap();
        assert_eq!(r.summary[&format!("improvement.joint.{c}.j2")], per[1]);
    }
    assert!(!r.summary.contains_key("improvement.joint.baseline.mean"));
    assert!(r.improvement("tool", "brnn").is_none());
    assert!(r.metrics("joint", "nope").is_none());
}

#[test]
fn series_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = DMatrix::from_row_slice(2, 3, &[0.1, 0.2, 0.3, 1.0 / 3.0, -2.0, 5e-300]);
    write_series(dir.path(), &[Series { name: "q_d".into(), sample_rate: 100.0, data: data.clone() }]).unwrap();
    let text = std::fs::read_to_string(dir.path().join("q_d.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "t,c0,c1");
    assert_eq!(lines.len(), 4);
    for (t, line) in lines[1..].iter().enumerate() {
        let cells: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert!((cells[0] - t as f64 / 100.0).abs() < 1e-12);
        assert_eq!(cells[1], data[(0, t)]);
        assert_eq!(cells[2], data[(1, t)]);
    }
}

#[test]
fn unwritable_path_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let err = write_series(&blocker.join("sub"), &[]).unwrap_err();
    assert_eq!(err.code(), "io");
}

proptest! {
    #[test]
    fn markdown_column_count(n_ctrl in 1usize..6, n_ch in 1usize..8, seed in 0u64..100) {
        let names: Vec<String> = (0..n_ctrl).map(|i| format!("c{i}")).collect();
        let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
        let r = sample_report(&refs, n_ch, seed);
        let md = emit(&r, ReportFormat::Markdown);
        let header = md.lines().find(|l| l.starts_with("| Channel | Unit")).unwrap();
        prop_assert_eq!(header.trim_matches('|').split('|').count(), 2 + 2 * n_ctrl);
        prop_assert_eq!(Report::from_json(&emit(&r, ReportFormat::Json)).unwrap(), r);
    }
}
