//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits non-zero if any fails.

use std::cell::Cell;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pixelsynth::backend::{
    build_circuit, extract_multiport, load_multiport_file, read_json, write_json, BackendError, FileFormat,
    FrequencySweep, MultiportZ,
};
use pixelsynth::geometry::{enumerate_ports, port_count, GeometryParams, GridShape, PortMap};
use pixelsynth::impm::{
    evaluate_configuration, magnitude_db, partition, reduce_input_impedance, reflection, PartitionedZ,
    PortConfiguration, PortState,
};
use pixelsynth::pipeline::{run_pipeline, run_stage1, verify_against_oracle, CostLedger, PipelineConfig};
use pixelsynth::response::{extract_features, objective_feature, DbResponse, FeatureVector};
use pixelsynth::trust_region::{tr_optimize, Bounds, OptimizationTrace, TrustRegionConfig};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn load(name: &str) -> PipelineConfig {
    PipelineConfig::load(&config_path(name)).expect("bundled config loads")
}

fn with_grid(mut cfg: PipelineConfig, rows: usize, cols: usize) -> PipelineConfig {
    cfg.grid.rows = rows;
    cfg.grid.cols = cols;
    cfg
}

fn synthetic_z(shape: GridShape) -> (MultiportZ, PortMap) {
    let ports = enumerate_ports(shape);
    let circuit = build_circuit(&GeometryParams::INITIAL, shape, 1.6).unwrap();
    let z = extract_multiport(&circuit, &ports, &FrequencySweep::default()).unwrap();
    (z, ports)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let cfg = load("broadband.toml");
    let sampled = verify_against_oracle(&cfg, 50, 0).map_err(|e| e.to_string())?;
    check(
        sampled.configurations == 50 && !sampled.exhaustive,
        "expected 50 sampled configurations",
    )?;
    let small = verify_against_oracle(&with_grid(cfg, 2, 2), 16, 0).map_err(|e| e.to_string())?;
    check(
        small.exhaustive && small.configurations == 16,
        "2x2 grid should be checked exhaustively",
    )?;
    let secs = start.elapsed().as_secs_f64();
    let worst = sampled.max_abs_gamma_diff.max(small.max_abs_gamma_diff);
    check(worst <= 1e-8, format!("max |dGamma| = {worst:.3e} > 1e-8"))?;
    check(secs <= 10.0, format!("took {secs:.1} s > 10 s"))?;
    Ok(format!(
        "3x3 50 cfg x 201 f max |dGamma| = {:.2e}; 2x2 all 16 max = {:.2e}; {secs:.2} s",
        sampled.max_abs_gamma_diff, small.max_abs_gamma_diff
    ))
}

/// Loaded-port reduction with a finite load on every open port instead of
/// deleting it.
fn finite_load_z_in(p: &PartitionedZ, y: &PortConfiguration, load: f64) -> Vec<Complex64> {
    p.blocks()
        .iter()
        .map(|b| {
            let m = y.len();
            let mut d = b.z_d.clone();
            for (k, s) in y.states().iter().enumerate() {
                if *s == PortState::Open {
                    d[(k, k)] += load;
                }
            }
            let x = d
                .lu()
                .solve(&DVector::from_fn(m, |i, _| b.z_c[i]))
                .expect("loaded block is regular");
            b.z_a - (&b.z_b * x)[(0, 0)]
        })
        .collect()
}

fn random_passive(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<Complex64> {
    let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-8.0..8.0));
    let r = &b * b.transpose() + DMatrix::identity(n, n) * 5.0;
    let mut x = DMatrix::from_fn(n, n, |_, _| rng.random_range(-60.0..60.0));
    x = (&x + x.transpose()) * 0.5;
    DMatrix::from_fn(n, n, |i, j| Complex64::new(r[(i, j)], x[(i, j)]))
}

/// Random configuration whose closed ports never form a loop, so the
/// finite-load system stays regular.
fn random_forest(rng: &mut ChaCha8Rng, shape: GridShape, ports: &PortMap) -> PortConfiguration {
    let mut parent: Vec<usize> = (0..shape.n_pixels()).collect();
    fn root(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            i = parent[i];
        }
        i
    }
    let states = ports
        .iter()
        .map(|port| {
            let a = root(&mut parent, shape.pixel_index(port.a));
            let b = root(&mut parent, shape.pixel_index(port.b));
            if a != b && rng.random_bool(0.5) {
                parent[a] = b;
                PortState::Closed
            } else {
                PortState::Open
            }
        })
        .collect();
    PortConfiguration::new(states)
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let z0 = 50.0;
    let compare = |p: &PartitionedZ, y: &PortConfiguration, worst: &mut f64| -> Result<(), String> {
        let exact = evaluate_configuration(p, y, z0).map_err(|e| e.to_string())?;
        let loaded = finite_load_z_in(p, y, 1e10);
        for (g, z) in exact.gamma().iter().zip(loaded) {
            let g_loaded = reflection(z, z0).map_err(|e| e.to_string())?;
            *worst = worst.max((g.norm() - g_loaded.norm()).abs());
        }
        Ok(())
    };

    // Ten random passive matrices with random configurations.
    let sweep = FrequencySweep::from_points(vec![1.0]).unwrap();
    for _ in 0..10 {
        let z = MultiportZ::new(sweep.clone(), z0, vec![random_passive(&mut rng, 7)]).unwrap();
        let y = PortConfiguration::from_index(rng.random_range(0..64), 6);
        compare(&partition(&z), &y, &mut worst)?;
    }
    // Ten loop-free configurations of the synthetic 3x3 structure.
    let shape = GridShape::new(3, 3).unwrap();
    let (z, ports) = synthetic_z(shape);
    let p = partition(&z);
    for _ in 0..10 {
        let y = random_forest(&mut rng, shape, &ports);
        compare(&p, &y, &mut worst)?;
    }
    check(worst <= 1e-4, format!("max ||Gamma| difference| = {worst:.3e} > 1e-4"))?;
    Ok(format!(
        "20 cases (10 random passive, 10 synthetic) max ||dGamma|| = {worst:.2e}"
    ))
}

fn criterion_3() -> Outcome {
    let (z, ports) = synthetic_z(GridShape::new(3, 3).unwrap());
    let p = partition(&z);
    let z_in = reduce_input_impedance(&p, &PortConfiguration::all_open(ports.len())).map_err(|e| e.to_string())?;
    check(
        z_in.iter().zip(p.blocks()).all(|(z, b)| *z == b.z_a),
        "all-open Z_in differs from Z_A",
    )?;
    let g = |z: f64| reflection(Complex64::new(z, 0.0), 50.0).unwrap();
    check(g(50.0) == Complex64::new(0.0, 0.0), "Gamma(50) != 0")?;
    check(g(0.0) == Complex64::new(-1.0, 0.0), "Gamma(0) != -1")?;
    check(g(150.0) == Complex64::new(0.5, 0.0), "Gamma(150) != 0.5")?;
    let db = magnitude_db(g(150.0));
    check((db + 6.0206).abs() <= 1e-4, format!("|Gamma(150)| = {db} dB"))?;
    let m = port_count(GridShape::new(3, 3).unwrap());
    check(m == 12, format!("M(3,3) = {m}"))?;
    Ok(format!(
        "Z_in = Z_A bit-exact over 201 f; Gamma(50)=0, Gamma(0)=-1, Gamma(150)=0.5 ({db:.4} dB); M(3,3)={m}"
    ))
}

fn criterion_4() -> Outcome {
    let cfg = load("broadband.toml");
    let start = Instant::now();
    let s = run_stage1(&cfg, true).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let table = s.search.value_table.clone().ok_or("search table missing")?;
    check(
        table.len() == 4096 && s.search.evaluated_count == 4096,
        "expected 4096 configurations",
    )?;

    // Independent sequential re-enumeration with the objective written out.
    let (f_low, f_high, thd) = (3.8, 10.0, -10.0);
    let mut best = (f64::INFINITY, 0u64);
    for i in 0..4096u64 {
        let y = PortConfiguration::from_index(i, 12);
        let u = match evaluate_configuration(&s.partitioned, &y, 50.0) {
            Ok(curve) => curve
                .freqs()
                .iter()
                .zip(curve.mag_db())
                .filter(|(f, _)| (f_low - 1e-9..=f_high + 1e-9).contains(*f))
                .map(|(_, db)| (db - thd).max(0.0))
                .fold(0.0, f64::max),
            Err(_) => f64::INFINITY,
        };
        check(
            u.to_bits() == table[i as usize].to_bits(),
            format!("configuration {i}: table {} vs recomputed {u}", table[i as usize]),
        )?;
        if u < best.0 {
            best = (u, i);
        }
    }
    check(
        best.1 == s.search.best_config.index() && best.0 == s.search.best_value,
        format!(
            "re-enumeration found {best:?}, search returned index {}",
            s.search.best_config.index()
        ),
    )?;

    for threads in [1, 2, 4] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let r = pool.install(|| run_stage1(&cfg, true)).map_err(|e| e.to_string())?;
        let same_table = r
            .search
            .value_table
            .as_ref()
            .is_some_and(|t| t.iter().zip(&table).all(|(a, b)| a.to_bits() == b.to_bits()));
        check(
            r.search.best_config == s.search.best_config
                && r.search.best_value.to_bits() == s.search.best_value.to_bits()
                && same_table,
            format!("{threads}-thread run differs"),
        )?;
    }
    check(secs <= 60.0, format!("search took {secs:.1} s > 60 s"))?;
    Ok(format!(
        "2^12 search in {secs:.2} s; y* = {} U = {:.6}; re-enumeration agrees; identical on 1/2/4 threads",
        s.search.best_config, s.search.best_value
    ))
}

/// Replays the radius rule from the recorded gain ratios.
fn replay_radius(trace: &OptimizationTrace) -> Result<(), String> {
    let mut delta = 1.0f64;
    for r in &trace.records {
        check(
            r.delta == delta,
            format!("iteration {}: delta {} vs replay {delta}", r.iteration, r.delta),
        )?;
        delta = match r.rho {
            Some(rho) if rho > 0.75 => delta * 2.0,
            Some(rho) if rho >= 0.25 => delta,
            _ => delta / 3.0,
        };
        check(
            r.delta_next == delta,
            format!(
                "iteration {}: next delta {} vs replay {delta}",
                r.iteration, r.delta_next
            ),
        )?;
        check(
            r.accepted == r.rho.is_some_and(|rho| rho > 0.0),
            "acceptance disagrees with rho",
        )?;
    }
    Ok(())
}

fn counted_identity(trace: &OptimizationTrace, calls: usize) -> Result<(), String> {
    let d = trace.dimension;
    let expected = trace.accepted_designs() * (d + 1) + trace.rejected_steps();
    check(
        calls == expected && trace.evaluations == calls,
        format!("{calls} calls, identity gives {expected}"),
    )
}

fn criterion_5() -> Outcome {
    let cfg = TrustRegionConfig::default();
    check(
        cfg.delta0 == 1.0 && cfg.epsilon == 1e-2,
        "default radius constants changed",
    )?;

    // (a) affine response, linear objective.
    let b2 = Bounds::new(vec![0.0, 0.0], vec![5.0, 5.0]).unwrap();
    let calls = Cell::new(0);
    let (_, affine) = tr_optimize(
        |x: &[f64]| {
            calls.set(calls.get() + 1);
            Ok::<_, BackendError>(vec![2.0 * x[0] - x[1] + 1.0, 0.5 * x[0] + 3.0 * x[1]])
        },
        |r: &[f64]| Ok::<_, BackendError>(r[0] + r[1]),
        &[2.5, 2.5],
        &b2,
        &cfg,
    )
    .map_err(|e| e.to_string())?;
    let first = affine.records.first().ok_or("no iterations")?;
    let rho = first.rho.ok_or("first step has no gain ratio")?;
    check(
        first.accepted && (rho - 1.0).abs() <= 1e-6,
        format!("first step rho = {rho}"),
    )?;
    counted_identity(&affine, calls.get())?;
    replay_radius(&affine)?;

    // (b) 1-D quadratic.
    let b1 = Bounds::new(vec![0.0], vec![5.0]).unwrap();
    let calls = Cell::new(0);
    let (x, quad) = tr_optimize(
        |x: &[f64]| {
            calls.set(calls.get() + 1);
            Ok::<_, BackendError>(vec![(x[0] - 3.0).powi(2)])
        },
        |r: &[f64]| Ok::<_, BackendError>(r[0]),
        &[1.0],
        &b1,
        &cfg,
    )
    .map_err(|e| e.to_string())?;
    check((x[0] - 3.0).abs() <= 0.05, format!("x* = {}", x[0]))?;
    counted_identity(&quad, calls.get())?;
    replay_radius(&quad)?;

    // A min-max problem that produces rejected steps as well.
    let calls = Cell::new(0);
    let (_, minmax) = tr_optimize(
        |x: &[f64]| {
            calls.set(calls.get() + 1);
            Ok::<_, BackendError>(vec![
                (x[0] - 1.0).powi(2) + 0.3 * x[1],
                3.0 * (x[1] - 2.0).powi(2) + x[0].sin(),
            ])
        },
        |r: &[f64]| Ok::<_, BackendError>(r[0].max(r[1])),
        &[4.0, 4.5],
        &b2,
        &cfg,
    )
    .map_err(|e| e.to_string())?;
    counted_identity(&minmax, calls.get())?;
    replay_radius(&minmax)?;
    check(
        minmax.rejected_steps() > 0,
        "min-max run should include a rejected step",
    )?;

    Ok(format!(
        "(a) rho1 = {rho:.9}; (b) x* = {:.4}; (c) radius replay exact on 3 traces; (d) calls = (1+accepted)(D+1)+rejected on 3 traces ({} / {} / {})",
        x[0],
        affine.evaluations,
        quad.evaluations,
        minmax.evaluations
    ))
}

fn criterion_6() -> Outcome {
    let sweep = FrequencySweep::default();
    let f = sweep.points();
    let lorentz = |x: f64, c: f64, w: f64| 1.0 / (1.0 + ((x - c) / w).powi(2));
    let db: Vec<f64> = f
        .iter()
        .map(|&x| -20.0 * lorentz(x, 3.0, 0.3) - 15.0 * lorentz(x, 6.0, 0.4))
        .collect();
    let fv = extract_features(DbResponse::new(f, &db), 2).map_err(|e| e.to_string())?;
    let err = (fv.omega[0] - 3.0).abs().max((fv.omega[1] - 6.0).abs());
    check(err <= 0.02, format!("omega = {:?}", fv.omega))?;

    let c = -3.5;
    let shifted: Vec<f64> = db.iter().map(|v| v + c).collect();
    let fs = extract_features(DbResponse::new(f, &shifted), 2).map_err(|e| e.to_string())?;
    let d_omega = fv
        .omega
        .iter()
        .zip(&fs.omega)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let d_level = fv
        .levels
        .iter()
        .zip(&fs.levels)
        .map(|(a, b)| (b - a - c).abs())
        .fold(0.0, f64::max);
    check(d_omega <= 1e-9, format!("omega moved by {d_omega:e}"))?;
    check(d_level <= 1e-12, format!("levels off by {d_level:e}"))?;

    let reference = FeatureVector {
        omega: vec![3.74, 9.1],
        levels: vec![-16.0, -18.0],
    };
    let u = objective_feature(&reference, &[3.0, 6.0], -15.0, 10.0).map_err(|e| e.to_string())?;
    check((u + 6.8129).abs() <= 1e-3, format!("U_F = {u}"))?;
    Ok(format!(
        "omega = [{:.4}, {:.4}] (err {err:.1e}); shift: |d omega| = {d_omega:.1e}, |d L - c| = {d_level:.1e}; U_F = {u:.4}",
        fv.omega[0], fv.omega[1]
    ))
}

fn criterion_7() -> Outcome {
    let a = CostLedger {
        multiport_extractions: 1,
        single_response_evaluations: 31,
        weight: 2.3,
    };
    let b = CostLedger {
        single_response_evaluations: 33,
        ..a
    };
    check(
        (a.total() - 33.3).abs() < 1e-12,
        format!("31 + 1 extraction = {}", a.total()),
    )?;
    check(
        (b.total() - 35.3).abs() < 1e-12,
        format!("33 + 1 extraction = {}", b.total()),
    )?;
    Ok(format!("31 + 2.3 = {:.1}; 33 + 2.3 = {:.1}", a.total(), b.total()))
}

fn end_to_end(name: &str) -> Result<String, String> {
    let cfg = load(name);
    let start = Instant::now();
    let report = run_pipeline(&cfg).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let again = run_pipeline(&cfg).map_err(|e| e.to_string())?;
    check(
        report.to_json() == again.to_json(),
        format!("{name}: rerun report differs"),
    )?;
    check(
        report.final_objective <= report.initial_objective,
        format!(
            "{name}: final U {} > initial {}",
            report.final_objective, report.initial_objective
        ),
    )?;
    let l = report.ledger;
    check(
        l.multiport_extractions == 1 && l.single_response_evaluations as usize == report.trace.expected_evaluations(),
        format!("{name}: ledger does not match the trace"),
    )?;
    check(l.total() <= 45.0, format!("{name}: ledger {} > 45", l.total()))?;
    check(secs <= 120.0, format!("{name}: took {secs:.1} s > 120 s"))?;
    Ok(format!(
        "{name}: U {:.4} -> {:.4}, ledger {:.1}, {secs:.2} s",
        report.initial_objective,
        report.final_objective,
        l.total()
    ))
}

fn criterion_8() -> Outcome {
    let a = end_to_end("broadband.toml")?;
    let b = end_to_end("dualband.toml")?;
    Ok(format!("{a}; {b}; reruns byte-identical"))
}

fn criterion_9() -> Outcome {
    let close = |a: Complex64, b: Complex64| (a - b).norm() <= 1e-9;
    let ri =
        load_multiport_file(&fixture("one_port_ri.z1p"), FileFormat::Touchstone, None).map_err(|e| e.to_string())?;
    check(ri.sweep().points() == [1.0, 2.0], "RI fixture frequencies")?;
    check(
        close(ri.matrices()[0][(0, 0)], Complex64::new(50.0, 0.0))
            && close(ri.matrices()[1][(0, 0)], Complex64::new(25.0, -12.5)),
        "RI fixture values",
    )?;

    let ma =
        load_multiport_file(&fixture("two_port_ma.z2p"), FileFormat::Touchstone, None).map_err(|e| e.to_string())?;
    let z = &ma.matrices()[0];
    let h = 80.0 * std::f64::consts::FRAC_1_SQRT_2;
    check((ma.sweep().points()[0] - 1.0).abs() <= 1e-12, "MA fixture frequency")?;
    check(
        close(z[(0, 0)], Complex64::new(100.0, 0.0))
            && close(z[(1, 0)], Complex64::new(0.0, 10.0))
            && close(z[(0, 1)], Complex64::new(0.0, 10.0))
            && close(z[(1, 1)], Complex64::new(h, -h)),
        format!("MA fixture values {z}"),
    )?;

    let (synthetic, _) = synthetic_z(GridShape::new(3, 3).unwrap());
    let back = read_json(&write_json(&synthetic)).map_err(|e| e.to_string())?;
    let bits = |m: &MultiportZ| -> Vec<u64> {
        m.matrices()
            .iter()
            .flat_map(|z| z.iter().flat_map(|c| [c.re.to_bits(), c.im.to_bits()]))
            .chain(m.sweep().points().iter().map(|f| f.to_bits()))
            .collect()
    };
    check(bits(&back) == bits(&synthetic), "JSON round trip is not bit-exact")?;

    match load_multiport_file(&fixture("bad_option.z1p"), FileFormat::Touchstone, None) {
        Err(BackendError::Parse { .. }) => {}
        other => return Err(format!("malformed option line gave {other:?}")),
    }
    Ok("RI and MA fixtures within 1e-9; 13-port JSON round trip bit-exact; bad option line -> ParseError".into())
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("IMPM-oracle equivalence", criterion_1),
        ("open-port limit", criterion_2),
        ("analytic spot checks", criterion_3),
        ("exhaustive search", criterion_4),
        ("trust-region correctness", criterion_5),
        ("feature machinery", criterion_6),
        ("cost ledger identity", criterion_7),
        ("end-to-end runs", criterion_8),
        ("file I/O", criterion_9),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("criterion {} [{name}]: PASS ({detail})", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} [{name}]: FAIL ({why})", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
