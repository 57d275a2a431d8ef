use std::path::Path;

use pixelsynth::backend::write_json;
use pixelsynth::impm::{reflection, PortConfiguration};
use pixelsynth::pipeline::{
    curve_for, evaluate_design, extract_partitioned, run_pipeline, run_stage1, run_tuning, verify_against_oracle,
    PipelineConfig, PipelineError,
};
use pixelsynth::response::local_minima;

const BASE: &str = r#"
[grid]
rows = 2
cols = 2

[stage1.objective]
kind = "broadband"
f_low_ghz = 3.8
f_high_ghz = 10.0
thd_db = -10.0

[stage2.objective]
kind = "broadband"
f_low_ghz = 3.8
f_high_ghz = 10.0
thd_db = -10.0

[trust_region]
max_iterations = 3
"#;

fn cfg(extra: &str) -> Result<PipelineConfig, PipelineError> {
    PipelineConfig::from_toml_str(&format!("{extra}\n{BASE}"), Path::new("."))
}

fn small() -> PipelineConfig {
    cfg("").unwrap()
}

#[test]
fn bundled_configs_parse() {
    for name in ["broadband.toml", "dualband.toml"] {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
        let c = PipelineConfig::load(&path).unwrap();
        assert_eq!(c.port_count().unwrap(), 12);
    }
}

#[test]
fn out_of_bounds_x0_names_the_component() {
    let err = cfg("[design]\nx0 = [4.0, 0.4, 1.0, 7.5]").unwrap_err();
    assert!(err.is_config_error());
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("gamma"), "{err}");
}

#[test]
fn unknown_keys_are_rejected() {
    let err = cfg("colour = 3").unwrap_err();
    assert!(err.is_config_error(), "{err}");
}

#[test]
fn missing_backend_file_is_a_config_error() {
    let c = cfg("[backend]\nkind = \"file\"\npath = \"does/not/exist.z5p\"").unwrap();
    let err = run_stage1(&c, false).unwrap_err();
    assert!(err.is_config_error(), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn stage1_spends_exactly_one_extraction() {
    let s = run_stage1(&small(), true).unwrap();
    assert_eq!(s.ledger.multiport_extractions, 1);
    assert_eq!(s.ledger.single_response_evaluations, 0);
    assert_eq!(s.search.evaluated_count, 16);
    assert_eq!(s.search.value_table.unwrap().len(), 16);
}

#[test]
fn pipeline_ledger_matches_trace() {
    let r = run_pipeline(&small()).unwrap();
    assert_eq!(r.ledger.multiport_extractions, 1);
    assert_eq!(r.ledger.single_response_evaluations as usize, r.trace.evaluations);
    assert_eq!(r.trace.evaluations, r.trace.expected_evaluations());
    assert!(r.final_objective <= r.initial_objective);
    let fresh = evaluate_design(
        &small(),
        &PortConfiguration::from_bitstring(&r.y_star).unwrap(),
        &r.x_star,
    )
    .unwrap();
    assert_eq!(fresh, r.curves.final_);
}

#[test]
fn tuning_alone_has_no_extraction() {
    let r = run_tuning(&small(), &PortConfiguration::all_open(4)).unwrap();
    assert_eq!(r.ledger.multiport_extractions, 0);
    assert!(r.stage1.is_none());
    assert!(r.curves.predicted_x0.is_none());
}

#[test]
fn tuning_rejects_wrong_length() {
    assert!(run_tuning(&small(), &PortConfiguration::all_open(5)).is_err());
}

#[test]
fn verify_small_grids_exhaustively() {
    let one = cfg("").map(|mut c| {
        c.grid.rows = 1;
        c.grid.cols = 2;
        c
    });
    for c in [one.unwrap(), small()] {
        let check = verify_against_oracle(&c, 1000, 0).unwrap();
        assert!(check.exhaustive);
        assert_eq!(check.configurations, 1 << c.port_count().unwrap());
        assert!(check.max_abs_gamma_diff <= 1e-8, "{}", check.max_abs_gamma_diff);
    }
}

#[test]
fn all_open_curve_is_the_unreduced_input() {
    let c = small();
    let p = extract_partitioned(&c).unwrap();
    let curve = curve_for(&c, &PortConfiguration::all_open(4), None).unwrap();
    for (g, b) in curve.gamma().iter().zip(p.blocks()) {
        let expected = reflection(b.z_a, 50.0).unwrap();
        assert!((g - expected).norm() < 1e-9);
    }
}

#[test]
fn file_backend_supports_search_but_not_tuning() {
    let dir = tempfile::tempdir().unwrap();
    let p = extract_partitioned(&small()).unwrap();
    let z = pixelsynth::backend::MultiportZ::new(
        p.sweep().clone(),
        50.0,
        p.blocks().iter().map(|b| b.reassemble()).collect(),
    )
    .unwrap();
    std::fs::write(dir.path().join("z.json"), write_json(&z)).unwrap();
    let file_cfg = PipelineConfig::from_toml_str(
        &format!("[backend]\nkind = \"file\"\npath = \"z.json\"\n{BASE}"),
        dir.path(),
    )
    .unwrap();

    let from_file = run_stage1(&file_cfg, true).unwrap();
    let direct = run_stage1(&small(), true).unwrap();
    assert_eq!(from_file.search.best_config, direct.search.best_config);
    assert_eq!(from_file.search.value_table, direct.search.value_table);

    let err = run_pipeline(&file_cfg).unwrap_err();
    assert!(err.is_config_error(), "{err}");
}

#[test]
fn min_resonances_filters_topologies() {
    let strict = cfg("").map(|mut c| {
        c.stage1.min_resonances = 1;
        c
    });
    let s = run_stage1(&strict.unwrap(), true).unwrap();
    let p = s.partitioned;
    let table = s.search.value_table.unwrap();
    for (i, v) in table.iter().enumerate() {
        let y = PortConfiguration::from_index(i as u64, 4);
        if let Ok(curve) = pixelsynth::impm::evaluate_configuration(&p, &y, 50.0) {
            if local_minima((&curve).into()).is_empty() {
                assert_eq!(*v, f64::INFINITY);
            }
        }
    }

    let impossible = cfg("").map(|mut c| {
        c.stage1.min_resonances = 1000;
        c
    });
    let err = run_stage1(&impossible.unwrap(), false).unwrap_err();
    assert!(matches!(err, PipelineError::NoFeasibleTopology { evaluated: 16 }));
    assert!(err.to_string().contains("NoFeasibleTopology"));
}

#[test]
fn more_than_24_ports_is_refused_before_extraction() {
    let big = cfg("").map(|mut c| {
        c.grid.rows = 5;
        c.grid.cols = 5;
        c
    });
    let err = run_stage1(&big.unwrap(), false).unwrap_err();
    assert!(err.to_string().contains("TooManyPorts"), "{err}");
    assert_eq!(err.exit_code(), 2);
}
