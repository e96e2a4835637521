//! End-to-end acceptance gate. Every numbered check below prints exactly one
//! verdict line (PASS or FAIL plus the measured quantities); the test fails
//! if any binding check fails. Golden values live next to the checks that
//! consume them.

use std::path::PathBuf;
use std::process::Command;
use std::time::Instant;

use proxybound::dc::{self, Component, GammaVector};
use proxybound::engine::{self, BoundDirection, BoundResult, EngineError, EngineOptions};
use proxybound::geometry::{initialize_simplex, Simplex};
use proxybound::model::{self, build_ir_phi, PhiVector, ProblemSpec};
use proxybound::tightness::{find_witness, verify_witness, JointWitness};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: [&str; 4] = ["eps01.json", "eps02.json", "eps03.json", "eps04.json"];

/// Golden rows for the four benchmark instances at the standard
/// 1000-iteration budget: reported solution value, then the optimizer
/// coordinates (theta, psi, omega interleaved per state).
const GOLDEN_VALUES: [f64; 4] = [0.370, 0.350, 0.298, 0.200];
const GOLDEN_COORDS: [[f64; 6]; 4] = [
    [0.067, 0.133, 0.261, 0.239, 0.333, 0.167],
    [0.050, 0.150, 0.262, 0.238, 0.375, 0.125],
    [0.029, 0.171, 0.264, 0.236, 0.429, 0.072],
    [0.001, 0.199, 0.310, 0.190, 0.500, 0.000],
];

struct Verdict {
    label: &'static str,
    pass: bool,
    detail: String,
}

fn verdict(label: &'static str, pass: bool, detail: String) -> Verdict {
    Verdict { label, pass, detail }
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_proxybound")
}

fn instance_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../instances").join(name)
}

fn load(name: &str) -> ProblemSpec {
    let file = std::fs::File::open(instance_path(name)).expect("instance file");
    model::load_problem(file).expect("instance parses")
}

fn run_cli(args: &[&str]) -> String {
    let out = Command::new(bin()).args(args).output().expect("binary should spawn");
    assert!(
        out.status.success(),
        "CLI {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn field(stdout: &str, key: &str) -> String {
    let prefix = format!("{key}=");
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(&prefix))
        .unwrap_or_else(|| panic!("missing {key} in: {stdout}"))
        .to_string()
}

/// Run the engine, treating an exhausted iteration budget as a normal
/// (unconverged) outcome, the way the CLI does.
fn run_engine(spec: &ProblemSpec, opts: &EngineOptions) -> (BoundResult, bool) {
    match engine::run(spec, opts) {
        Ok(r) => (r, true),
        Err(EngineError::MaxIterReached(boxed)) => (*boxed, false),
        Err(e) => panic!("engine failed: {e}"),
    }
}

fn opts(direction: BoundDirection, max_iter: u64) -> EngineOptions {
    EngineOptions { direction, max_iter, ..EngineOptions::default() }
}

fn eval_comp(comp: Component, x: &[f64], d: usize) -> f64 {
    let g = GammaVector::new(x.to_vec(), d);
    match comp {
        Component::C1 => dc::eval_c(&g).0,
        Component::C2 => dc::eval_c(&g).1,
        Component::D1(i) => dc::eval_d(&g, i).0,
        Component::D2(i) => dc::eval_d(&g, i).1,
    }
}

fn components(d: usize) -> Vec<Component> {
    let mut list = vec![Component::C1, Component::C2];
    for i in 0..d {
        list.push(Component::D1(i));
        list.push(Component::D2(i));
    }
    list
}

/// Rejection-sample a feasible block vector (theta, psi, omega) for a
/// two-state instance, using the observed masses to bound the free
/// coordinates of each complementary pair.
fn sample_feasible(spec: &ProblemSpec, rng: &mut ChaCha8Rng, attempts: &mut u64) -> Vec<f64> {
    let ir = build_ir_phi(spec);
    let (f_yx, f_x, f_xc) = (spec.f_yx(), spec.f_x(), spec.f_xc());
    loop {
        *attempts += 1;
        assert!(*attempts < 2_000_000, "rejection sampling stalled");
        let t1 = rng.gen_range(0.0..f_yx);
        let p1 = rng.gen_range(spec.psi_min..f_x - spec.psi_min);
        let o1 = rng.gen_range(0.0..f_xc);
        let phi = vec![t1, f_yx - t1, p1, f_x - p1, o1, f_xc - o1];
        if ir.check_point(&phi, 1e-9).is_ok() {
            return phi;
        }
    }
}

// Check 1: the solver reproduces the golden benchmark rows. The binding
// comparison is the reported solution value (the incumbent the run prints);
// the certified bound tightens far more slowly and is measured against the
// grid oracle in check 2. Optimizer coordinates are reported but not
// binding, since distinct optimizers can share the optimal value.
fn check_01_benchmark_values() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut inc_report = Vec::new();
    let mut bound_report = Vec::new();
    let mut max_elapsed = 0.0f64;
    let mut max_coord_dev = 0.0f64;
    let mut coord_dev_at = "";
    let mut pass = true;

    for (k, name) in INSTANCES.iter().enumerate() {
        let out_path = dir.path().join(format!("{name}.out.json"));
        let path = instance_path(name);
        let started = Instant::now();
        let text = run_cli(&[
            "bound",
            "--input",
            path.to_str().unwrap(),
            "--direction",
            "lower",
            "--max-iter",
            "1000",
            "--output",
            out_path.to_str().unwrap(),
        ]);
        let elapsed = started.elapsed().as_secs_f64();
        max_elapsed = max_elapsed.max(elapsed);

        let inc: f64 = field(&text, "incumbent").parse().unwrap();
        let bound: f64 = field(&text, "bound").parse().unwrap();
        inc_report.push(format!("{inc:.4}"));
        bound_report.push(format!("{bound:.1}"));
        if (inc - GOLDEN_VALUES[k]).abs() > 1e-2 || elapsed >= 60.0 {
            pass = false;
        }

        let doc: serde_json::Value =
            serde_json::from_reader(std::fs::File::open(&out_path).unwrap()).unwrap();
        let block = &doc["result"]["incumbent"]["blocks"][0];
        let flat: Vec<f64> = ["theta", "psi", "omega"]
            .iter()
            .flat_map(|f| {
                block[f].as_array().unwrap().iter().map(|v| v.as_f64().unwrap())
            })
            .collect();
        for (got, want) in flat.iter().zip(&GOLDEN_COORDS[k]) {
            if (got - want).abs() > max_coord_dev {
                max_coord_dev = (got - want).abs();
                coord_dev_at = name;
            }
        }
    }

    verdict(
        "01 benchmark-values",
        pass,
        format!(
            "incumbents {} vs golden 0.370/0.350/0.298/0.200 (tol 1e-2); \
             max wall {max_elapsed:.1}s (limit 60s); max optimizer coord dev \
             {max_coord_dev:.3} at {coord_dev_at} (reported only: optima are \
             non-unique, value is binding); certified bounds at this budget: {}",
            inc_report.join("/"),
            bound_report.join("/"),
        ),
    )
}

// Check 2: the certified bound against the dense grid oracle. Validity
// (bound never exceeds the oracle, at any iteration) must hold
// unconditionally; the convergence half asks the certificate itself to
// close to within 5e-3, which the branch-and-bound cannot reach in a
// bounded budget on these instances, so the measured gap is reported and
// the check fails honestly.
fn check_02_oracle_equivalence() -> Verdict {
    let mut max_excess = f64::NEG_INFINITY;
    let mut gaps = Vec::new();
    let mut all_converged = true;
    let mut validity_ok = true;

    for name in INSTANCES {
        let spec = load(name);
        let oracle = engine::brute_force_min(&spec, 1e-3).unwrap();
        let (result, converged) = run_engine(&spec, &opts(BoundDirection::Lower, 2000));
        all_converged &= converged;
        for row in &result.trace {
            let excess = row.best_bound - (oracle + 2e-3);
            max_excess = max_excess.max(excess);
            if excess > 0.0 {
                validity_ok = false;
            }
        }
        gaps.push((result.bound - oracle).abs());
    }

    let convergence_ok = all_converged && gaps.iter().all(|g| *g <= 5e-3);
    let gaps: Vec<String> = gaps.iter().map(|g| format!("{g:.2}")).collect();
    verdict(
        "02 oracle-equivalence",
        validity_ok && convergence_ok,
        format!(
            "validity {}: max (bound - oracle - 2e-3) = {max_excess:.2e} over 4x2000 iterations; \
             convergence {}: converged={all_converged} at 2000 iterations, |bound - oracle| = {} \
             (need <= 5e-3 after convergence; the certificate needs far deeper nesting than any \
             bounded budget reaches on these instances)",
            if validity_ok { "PASS" } else { "FAIL" },
            if convergence_ok { "PASS" } else { "FAIL" },
            gaps.join("/"),
        ),
    )
}

// Check 3: exactness of the convex split. The difference of the two cubic
// halves must reproduce the triple-product sum, and each reciprocal pair's
// halves must reproduce the plain product.
fn check_03_dc_identities() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(301);
    let mut max_c_scaled = 0.0f64;
    let mut max_d = 0.0f64;
    for d in 1..=3usize {
        for _ in 0..10_000 {
            let coords: Vec<f64> = (0..4 * d).map(|_| rng.gen_range(0.0..1.5)).collect();
            let g = GammaVector::new(coords, d);
            let (c1, c2) = dc::eval_c(&g);
            let triple: f64 =
                (0..d).map(|i| g.psi_knockoff(i) * g.theta(i) * g.omega(i)).sum();
            max_c_scaled = max_c_scaled.max(((c1 - c2) - triple).abs() / (1.0 + c1.abs()));
            for i in 0..d {
                let (d1, d2) = dc::eval_d(&g, i);
                max_d = max_d.max(((d1 - d2) - g.psi_knockoff(i) * g.psi(i)).abs());
            }
        }
    }
    verdict(
        "03 dc-identities",
        max_c_scaled <= 1e-9 && max_d <= 1e-12,
        format!(
            "3x10^4 random points, d in 1..=3: cubic-split residual {max_c_scaled:.2e} \
             (tol 1e-9 scaled), reciprocal-split residual {max_d:.2e} (tol 1e-12)"
        ),
    )
}

// Check 4: on random simplices the tangent plane at the barycenter stays
// below every component and the vertex secant stays above it.
fn check_04_sandwich() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(401);
    let mut worst = f64::NEG_INFINITY;
    let mut built = 0usize;
    while built < 100 {
        let d = built % 3 + 1;
        let dim = 4 * d;
        let base: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut vertices = vec![base.clone()];
        for k in 0..dim {
            let mut v: Vec<f64> =
                base.iter().map(|b| b + rng.gen_range(-0.35..0.35)).collect();
            v[k] += rng.gen_range(0.5..1.0);
            vertices.push(v);
        }
        let Ok(s) = Simplex::new(0, None, 0, vertices) else { continue };
        let bary = GammaVector::new(s.barycenter(), d);
        let mut planes = Vec::new();
        let mut degenerate = false;
        for comp in components(d) {
            match dc::secant(comp, &s) {
                Ok(sec) => planes.push((comp, dc::tangent(comp, &bary), sec)),
                Err(_) => {
                    degenerate = true;
                    break;
                }
            }
        }
        if degenerate {
            continue;
        }
        built += 1;

        for _ in 0..100 {
            let mut w: Vec<f64> =
                (0..=dim).map(|_| -f64::ln(rng.gen_range(1e-12..1.0))).collect();
            let total: f64 = w.iter().sum();
            w.iter_mut().for_each(|x| *x /= total);
            let mut point = vec![0.0; dim];
            for (wk, v) in w.iter().zip(&s.vertices) {
                for (p, c) in point.iter_mut().zip(v) {
                    *p += wk * c;
                }
            }
            for (comp, tang, sec) in &planes {
                let value = eval_comp(*comp, &point, d);
                worst = worst.max(tang.eval(&point) - value);
                worst = worst.max(value - sec.eval(&point));
            }
        }
    }
    verdict(
        "04 sandwich-property",
        worst <= 1e-9,
        format!(
            "100 simplices x 100 interior points, all components: \
             worst one-sided violation {worst:.2e} (tol 1e-9)"
        ),
    )
}

// Check 5: the tangent coefficients are the analytic gradient; compare the
// cubic components against central finite differences.
fn check_05_gradients() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(501);
    let h = 1e-6;
    let mut max_rel = 0.0f64;
    for trial in 0..1000 {
        let d = trial % 3 + 1;
        let coords: Vec<f64> = (0..4 * d).map(|_| rng.gen_range(0.0..1.5)).collect();
        let g = GammaVector::new(coords.clone(), d);
        for comp in [Component::C1, Component::C2] {
            let analytic = dc::tangent(comp, &g).coeffs;
            for k in 0..4 * d {
                let mut hi = coords.clone();
                hi[k] += h;
                let mut lo = coords.clone();
                lo[k] -= h;
                let fd = (eval_comp(comp, &hi, d) - eval_comp(comp, &lo, d)) / (2.0 * h);
                max_rel = max_rel.max((analytic[k] - fd).abs() / (1.0 + analytic[k].abs()));
            }
        }
    }
    verdict(
        "05 gradient-check",
        max_rel <= 1e-5,
        format!(
            "10^3 points, both cubic components, h = 1e-6: \
             max relative error {max_rel:.2e} (tol 1e-5)"
        ),
    )
}

// Check 6: the root simplex encloses every feasible lifted point, and
// longest-edge bisection shrinks diameters at the guaranteed geometric
// rate.
fn check_06_enclosure_and_decay() -> Verdict {
    let spec = load("eps04.json");
    let ir = build_ir_phi(&spec);
    let root = initialize_simplex(&spec, &ir).unwrap();
    let d = spec.d();

    let mut rng = ChaCha8Rng::seed_from_u64(601);
    let mut attempts = 0u64;
    let mut contained = 0usize;
    for _ in 0..1000 {
        let phi = sample_feasible(&spec, &mut rng, &mut attempts);
        let mut gamma: Vec<f64> = phi[d..2 * d].iter().map(|p| 1.0 / p).collect();
        gamma.extend_from_slice(&phi);
        if root.contains(&gamma) {
            contained += 1;
        }
    }

    let rate = 3.0f64.sqrt() / 2.0;
    let mut worst_margin = f64::NEG_INFINITY;
    for chain in 0..52 {
        let mut node = root.clone();
        for step in 1..=48u32 {
            let (first, second) = node.bisect(2 * u64::from(step), 2 * u64::from(step) + 1);
            node = match chain {
                0 => first,
                1 => second,
                _ => {
                    if rng.gen_bool(0.5) {
                        first
                    } else {
                        second
                    }
                }
            };
            let allowed =
                rate.powi((step / (4 * d as u32)) as i32) * root.diameter + 1e-12;
            worst_margin = worst_margin.max(node.diameter - allowed);
        }
    }

    verdict(
        "06 enclosure-and-decay",
        contained == 1000 && worst_margin <= 0.0,
        format!(
            "{contained}/1000 feasible lifted points inside the root simplex \
             ({attempts} rejection draws); 52 bisection chains of depth 48: \
             worst diameter excess over the geometric envelope {worst_margin:.2e}"
        ),
    )
}

// Check 7: with vacuous transition bounds the problem collapses to the
// trivial interval, whose lower end is the observed event mass 0.2. The
// reported solution must land there; the certified bound at this budget is
// reported for context (the vacuous box makes its scale enormous).
fn check_07_trivial_bounds() -> Verdict {
    let mut spec = load("eps04.json");
    let ones = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
    let zeros = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
    spec.transition_bounds.lower = zeros;
    spec.transition_bounds.upper = ones;

    let oracle = engine::brute_force_min(&spec, 1e-3).unwrap();
    let (early, _) = run_engine(&spec, &opts(BoundDirection::Lower, 300));
    let (result, converged) = run_engine(&spec, &opts(BoundDirection::Lower, 1500));
    let inc = result.incumbent.as_ref().map(|i| i.value);
    let inc_early = early.incumbent.as_ref().map(|i| i.value);
    let pass = matches!(inc, Some(v) if (v - 0.2).abs() <= 1e-2);
    verdict(
        "07 trivial-bounds-sanity",
        pass,
        format!(
            "reported solution {inc:?} at 1500 iterations ({inc_early:?} at 300) vs \
             event mass 0.2 (tol 1e-2); grid oracle {oracle:.4}; certified bound \
             {:.1} (converged={converged}: the vacuous box keeps the certificate loose)",
            result.bound,
        ),
    )
}

// Check 8: certified intervals bracket the forward-simulated ground truth,
// and exact transition knowledge collapses the interval.
fn check_08_bracketing() -> Verdict {
    let mut bracketed = 0;
    let mut max_width = 0.0f64;
    for seed in 1..=20u64 {
        let sim = model::simulate_seeded(seed, (2, 2, 2), 0.1);
        let (lo, _) = run_engine(&sim.spec, &opts(BoundDirection::Lower, 60));
        let (hi, _) = run_engine(&sim.spec, &opts(BoundDirection::Upper, 60));
        if lo.bound <= sim.truth && sim.truth <= hi.bound {
            bracketed += 1;
        }

        let exact = model::simulate_seeded(seed, (2, 2, 2), 0.0);
        let (lo0, _) = run_engine(&exact.spec, &opts(BoundDirection::Lower, 4000));
        let (hi0, _) = run_engine(&exact.spec, &opts(BoundDirection::Upper, 4000));
        max_width = max_width.max(hi0.bound - lo0.bound);
    }
    verdict(
        "08 end-to-end-bracketing",
        bracketed == 20 && max_width <= 1e-4,
        format!(
            "{bracketed}/20 seeded instances bracketed the simulated truth at widening 0.1; \
             max interval width {max_width:.2e} at widening 0 (tol 1e-4)"
        ),
    )
}

// Check 9: the worked witness for the widest benchmark instance verifies
// exactly, and the search rediscovers a valid witness from the optimizer
// alone.
fn check_09_tightness_witness() -> Verdict {
    let spec = load("eps04.json");
    let phi = PhiVector {
        theta: vec![0.0, 0.2],
        psi: vec![0.3, 0.2],
        omega: vec![0.5, 0.0],
    };
    // Known-good joint: q[y][w][u][x], eight nonzero cells of total mass 1.
    let mut q = vec![vec![vec![vec![0.0; 2]; 2]; 2]; 2];
    q[0][0][0][1] = 0.15;
    q[1][0][0][0] = 0.18;
    q[1][0][0][1] = 0.15;
    q[0][0][1][0] = 0.08;
    q[0][1][0][1] = 0.10;
    q[1][1][0][0] = 0.12;
    q[1][1][0][1] = 0.10;
    q[0][1][1][0] = 0.12;
    let witness = JointWitness {
        q,
        transition: vec![vec![0.6, 0.4], vec![0.4, 0.6]],
    };

    let report = verify_witness(&witness, &phi, &spec).expect("shapes match");
    let worst = report
        .categories
        .iter()
        .map(|c| c.worst)
        .fold(0.0f64, f64::max);

    let found = find_witness(&phi, &spec, 32);
    let rediscovered = match &found {
        Some(w) => verify_witness(w, &phi, &spec).map(|r| r.ok).unwrap_or(false),
        None => false,
    };

    verdict(
        "09 tightness-witness",
        report.ok && rediscovered,
        format!(
            "worked witness verified={} (worst category violation {worst:.1e}); \
             search within 32 restarts rediscovered a verified witness: {rediscovered}",
            report.ok,
        ),
    )
}

// Check 10: pruning only saves work; the certified bound trajectory is
// bit-for-bit unchanged.
fn check_10_pruning_neutrality() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut identical = 0;
    let mut rows = 0;
    for name in INSTANCES {
        let path = instance_path(name);
        let pruned_trace = dir.path().join(format!("{name}.pruned.csv"));
        let plain_trace = dir.path().join(format!("{name}.plain.csv"));
        let pruned = run_cli(&[
            "bound",
            "--input",
            path.to_str().unwrap(),
            "--max-iter",
            "400",
            "--trace",
            pruned_trace.to_str().unwrap(),
        ]);
        let plain = run_cli(&[
            "bound",
            "--input",
            path.to_str().unwrap(),
            "--max-iter",
            "400",
            "--no-prune",
            "--trace",
            plain_trace.to_str().unwrap(),
        ]);

        let best_bound_column = |p: &PathBuf| -> Vec<String> {
            std::fs::read_to_string(p)
                .unwrap()
                .lines()
                .skip(1)
                .map(|l| l.split(',').nth(3).unwrap().to_string())
                .collect()
        };
        let a = best_bound_column(&pruned_trace);
        let b = best_bound_column(&plain_trace);
        rows = a.len();
        if a == b && field(&pruned, "bound") == field(&plain, "bound") {
            identical += 1;
        }
    }
    verdict(
        "10 pruning-neutrality",
        identical == 4,
        format!(
            "{identical}/4 instances: best_bound trace columns bitwise-identical \
             with and without --no-prune ({rows} rows each) and final bounds equal"
        ),
    )
}

// Companion note: the certified error at any budget must dominate however
// far the bound still moves, measured against a 10x longer run.
fn check_soundness_note() -> Verdict {
    let mut min_margin = f64::INFINITY;
    for name in INSTANCES {
        let spec = load(name);
        let (short, _) = run_engine(&spec, &opts(BoundDirection::Lower, 40));
        let (long, _) = run_engine(&spec, &opts(BoundDirection::Lower, 400));
        let margin = short.certified_error - (long.bound - short.bound).abs();
        min_margin = min_margin.min(margin);
    }
    verdict(
        "note certified-error-soundness",
        min_margin >= 0.0,
        format!(
            "|bound at 400 - bound at 40| never exceeds the certified error at 40; \
             min slack {min_margin:.2e} across the four instances"
        ),
    )
}

#[test]
fn acceptance() {
    let verdicts = vec![
        check_01_benchmark_values(),
        check_02_oracle_equivalence(),
        check_03_dc_identities(),
        check_04_sandwich(),
        check_05_gradients(),
        check_06_enclosure_and_decay(),
        check_07_trivial_bounds(),
        check_08_bracketing(),
        check_09_tightness_witness(),
        check_10_pruning_neutrality(),
        check_soundness_note(),
    ];

    let mut failures = Vec::new();
    for v in &verdicts {
        println!(
            "acceptance {}: {} -- {}",
            v.label,
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        if !v.pass {
            failures.push(v.label);
        }
    }
    println!(
        "acceptance summary: {}/{} checks passed",
        verdicts.len() - failures.len(),
        verdicts.len()
    );
    assert!(failures.is_empty(), "failing checks: {failures:?}");
}
