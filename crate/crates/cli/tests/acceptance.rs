//! End-to-end acceptance run over the bundled scenarios. Prints one line per
//! criterion and exits nonzero if any fails.

use std::time::{Duration, Instant};

use asdinv_cli::commands::test_frequencies;
use asdinv_cli::scenario::{self, Built};
use asdinv_core::analysis::bound_report;
use asdinv_core::design::{decompose, verify_output_structure};
use asdinv_core::numlin;
use asdinv_core::plants::{self, QUAD_REFERENCE_K0};
use asdinv_core::sim::{energy_index, energy_of, metrics, sup_tail, tail_start};
use asdinv_core::{simulate, Matrix, Realization, SimConfig, SimError, Trace, Vector};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const ALL: [&str; 7] = [
    "siso",
    "f16",
    "quadrotor",
    "quadrotor_payload",
    "synthetic",
    "deadzone",
    "delay_demo",
];

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn build(name: &str, overrides: &[&str]) -> Result<Built, String> {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    scenario::load(name, &o)
        .and_then(|s| s.build())
        .map_err(|e| format!("{name}: {e}"))
}

fn run(b: &Built) -> Result<Trace, String> {
    simulate(b.plant.as_ref(), &b.spec, &b.sim).map_err(|e| format!("{}: {e}", b.scenario.name))
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s, || {
        format!("took {:.2} s, limit {limit_s} s", elapsed.as_secs_f64())
    })
}

/// Angle between two vectors, ignoring sign.
fn angle(a: &Vector, b: &Vector) -> f64 {
    let c = (a.dot(b) / (a.norm() * b.norm())).abs().min(1.0);
    c.acos()
}

fn sorted_real_spectrum(a: &Matrix) -> Result<Vec<f64>, String> {
    let ev = numlin::eigenvalues(a).map_err(|e| e.to_string())?;
    if ev.iter().any(|z| z.im.abs() > 1e-9) {
        return Err(format!("complex spectrum {ev:?}"));
    }
    let mut v: Vec<f64> = ev.iter().map(|z| z.re).collect();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

fn spectrum_close(got: &[f64], want: &[f64], tol: f64) -> Result<f64, String> {
    let mut want = want.to_vec();
    want.sort_by(f64::total_cmp);
    ensure(got.len() == want.len(), || {
        format!("{} eigenvalues, wanted {}", got.len(), want.len())
    })?;
    let err = got.iter().zip(&want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max);
    ensure(err <= tol, || {
        format!("spectrum {got:?} vs {want:?}: {err:e} > {tol:e}")
    })?;
    Ok(err)
}

fn c1_gain() -> Outcome {
    let b = build("siso", &[])?;
    let want = [-5.0, -8.0, -5.0];
    let err = (0..3).map(|i| (b.core.k[i] - want[i]).abs()).fold(0.0, f64::max);
    ensure(err <= 1e-10, || format!("K = {:?}, error {err:e}", b.core.k.as_slice()))?;
    Ok(format!("K error {err:.1e}"))
}

fn c2_output_matrix() -> Outcome {
    let siso = build("siso", &[])?;
    let a = angle(
        &siso.core.c.column(0).into_owned(),
        &Vector::from_vec(vec![6.0, 5.0, 1.0]),
    );
    ensure(a < 1e-8, || format!("SISO angle {a:e}"))?;

    let f16 = build("f16", &[])?;
    let reference = Matrix::from_row_slice(
        4,
        2,
        &[0.6537, -0.5473, 0.6819, 0.7985, 0.2285, 0.1961, -0.2354, 0.1561],
    );
    let mut f16_err: f64 = 0.0;
    for j in 0..2 {
        let col = f16.core.c.column(j);
        let want = reference.column(j);
        let e = (col - want).amax().min((col + want).amax());
        f16_err = f16_err.max(e);
    }
    ensure(f16_err <= 1e-3, || format!("F-16 C error {f16_err:e}"))?;

    let quad = build("quadrotor", &[])?;
    let c0 = Vector::from_vec(vec![0.9283, 0.3713, 0.0206]);
    let mut quad_err: f64 = 0.0;
    for j in 0..3 {
        let col = quad.core.c.column(j);
        let (ch, _) = (0..3)
            .map(|ch| (ch, col.rows(3 * ch, 3).norm()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        let blk = col.rows(3 * ch, 3).into_owned();
        let e = (&blk - &c0).amax().min((&blk + &c0).amax());
        quad_err = quad_err.max(e);
    }
    ensure(quad_err <= 1e-3, || format!("quadrotor C0 error {quad_err:e}"))?;
    Ok(format!(
        "SISO angle {a:.1e}, F-16 {f16_err:.1e}, quadrotor {quad_err:.1e}"
    ))
}

fn c3_spectrum() -> Outcome {
    let siso = build("siso", &[])?;
    let e1 = spectrum_close(&sorted_real_spectrum(&siso.core.a)?, &[-1.0, -2.0, -3.0], 1e-8)?;
    let f16 = build("f16", &[])?;
    let e2 = spectrum_close(&sorted_real_spectrum(&f16.core.a)?, &[-1.0, -2.0, -3.0, -4.0], 1e-2)?;

    let want = [-15.0, -3.0, -1.0];
    // The reference 3-digit channel gain lands 6.7e-2 off the fast pole;
    // its deviation is reported, the scenario gain is the one checked.
    let (a, b) = plants::quad_channel(15.0);
    let k0 = Matrix::from_column_slice(3, 1, &QUAD_REFERENCE_K0);
    let e3 = spectrum_close(
        &sorted_real_spectrum(&(&a + &b * k0.transpose()))?,
        &want,
        f64::INFINITY,
    )?;
    let quad = build("quadrotor", &[])?;
    let mut e4: f64 = 0.0;
    for ch in 0..3 {
        let blk = quad.core.a.view((3 * ch, 3 * ch), (3, 3)).into_owned();
        e4 = e4.max(spectrum_close(&sorted_real_spectrum(&blk)?, &want, 5e-2)?);
    }
    Ok(format!(
        "SISO {e1:.1e}, F-16 {e2:.1e}, quadrotor {e4:.1e} (reference channel gain {e3:.1e})"
    ))
}

fn c4_structure() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for name in ["siso", "f16", "quadrotor"] {
        let b = build(name, &[])?;
        let core = &b.core;
        let res = numlin::norm2(&(core.c.transpose() * &core.a + core.lambda_matrix() * core.c.transpose()));
        let rel = res / numlin::norm2(&core.a);
        let det = core.ctb().determinant().abs();
        ensure(rel < 1e-8, || format!("{name}: residual {rel:e}"))?;
        ensure(det > 1e-6, || format!("{name}: |det CᵀB| = {det:e}"))?;
        ensure(verify_output_structure(core).passed(), || {
            format!("{name}: structure report failed")
        })?;
        worst = worst.max(rel);
    }
    within(start.elapsed(), 1.0)?;
    Ok(format!(
        "worst relative residual {worst:.1e} in {:.2} s",
        start.elapsed().as_secs_f64()
    ))
}

fn c5_identity() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for name in ALL {
        let b = build(name, &["sim.record_stride=1"])?;
        let tr = run(&b)?;
        let dec = decompose(&b.core, b.plant.as_ref(), &tr).map_err(|e| format!("{name}: {e}"))?;
        let (err, scale) = dec.identity_error(&b.core, &tr);
        ensure(err <= 1e-6 * scale, || format!("{name}: {err:e} vs scale {scale:e}"))?;
        worst = worst.max(err / scale);
    }
    within(start.elapsed(), 10.0)?;
    Ok(format!(
        "{} scenarios, worst relative {worst:.1e} in {:.2} s",
        ALL.len(),
        start.elapsed().as_secs_f64()
    ))
}

fn max_rel_diff(a: &[Vector], b: &[Vector]) -> f64 {
    let scale = a.iter().map(|v| v.amax()).fold(0.0, f64::max);
    let diff = a.iter().zip(b).map(|(p, q)| (p - q).amax()).fold(0.0, f64::max);
    diff / scale
}

fn c6_realizations() -> Outcome {
    let mut traj: f64 = 0.0;
    for name in ["siso", "synthetic"] {
        let b = build(name, &["saturation=null"])?;
        let obs = b.spec.clone().with_realization(Realization::Observer);
        let pi = b.spec.clone().with_realization(Realization::PiClosed);
        let ta = simulate(b.plant.as_ref(), &obs, &b.sim).map_err(|e| e.to_string())?;
        let tb = simulate(b.plant.as_ref(), &pi, &b.sim).map_err(|e| e.to_string())?;
        let rel = max_rel_diff(&ta.u, &tb.u);
        ensure(rel <= 1e-6, || format!("{name}: trajectories differ by {rel:e}"))?;
        traj = traj.max(rel);
    }
    let mut freq: f64 = 0.0;
    for name in ALL {
        let b = build(name, &[])?;
        let fa = b.spec.clone().with_realization(Realization::Observer).linear_map();
        let fb = b.spec.clone().with_realization(Realization::PiClosed).linear_map();
        let ws = test_frequencies();
        ensure(ws.len() == 20, || "frequency grid".into())?;
        for w in ws {
            let (ra, rb) = (fa.freq_response(w), fb.freq_response(w));
            let rel = (&ra - &rb).norm() / rb.norm();
            ensure(rel <= 1e-10, || format!("{name}: ω = {w}: {rel:e}"))?;
            freq = freq.max(rel);
        }
    }
    Ok(format!("trajectories {traj:.1e}, frequency responses {freq:.1e}"))
}

fn attitude_tail(tr: &Trace) -> f64 {
    tr.x[tail_start(tr)..]
        .iter()
        .map(|x| Vector::from_vec(vec![x[0], x[3], x[6]]).norm())
        .fold(0.0, f64::max)
}

fn c7_stabilization() -> Outcome {
    let mut notes = Vec::new();
    for (name, limit, tail_tol) in [("siso", 5.0, 1e-2), ("f16", 20.0, 5e-2)] {
        let b = build(name, &[])?;
        let tr = run(&b)?;
        let m = metrics(&tr, tail_tol).map_err(|e| e.to_string())?;
        ensure(m.sup_tail < tail_tol, || format!("{name}: sup-tail {:e}", m.sup_tail))?;
        ensure(m.max_abs_u.iter().all(|&u| u <= limit), || {
            format!("{name}: max |u| {:?}", m.max_abs_u)
        })?;
        let half = run(&build(name, &["dt=0.0005"])?)?;
        let drift = (sup_tail(&half) - m.sup_tail).abs();
        ensure(drift <= 1e-6, || {
            format!("{name}: dt halving moves sup-tail by {drift:e}")
        })?;
        notes.push(format!("{name} {:.1e}", m.sup_tail));
    }
    for name in ["quadrotor", "quadrotor_payload"] {
        let b = build(name, &[])?;
        let tail = attitude_tail(&run(&b)?);
        ensure(tail < 1e-2, || format!("{name}: attitude tail {tail:e}"))?;
        let half = attitude_tail(&run(&build(name, &["dt=0.0005"])?)?);
        ensure((half - tail).abs() <= 1e-6, || {
            format!("{name}: dt halving moves tail by {:e}", half - tail)
        })?;
        notes.push(format!("{name} {tail:.1e}"));
    }
    Ok(notes.join(", "))
}

fn c8_sufficiency() -> Outcome {
    let start = Instant::now();
    let b = build("synthetic", &[])?;
    let c = b.constants.ok_or("synthetic plant lost its constants")?;
    let rep = bound_report(&b.core, &c, Some(b.spec.epsilon)).map_err(|e| e.to_string())?;
    ensure(
        (b.spec.epsilon - rep.epsilon_max / 2.0).abs() <= 1e-12 * rep.epsilon_max,
        || format!("ε = {} is not ε_max/2 = {}", b.spec.epsilon, rep.epsilon_max / 2.0),
    )?;
    let bound = rep.bound.ok_or("η(ε_max/2) is not positive")?.full;
    let tail = sup_tail(&run(&b)?);
    ensure(tail <= bound, || format!("sup-tail {tail:e} exceeds bound {bound:e}"))?;

    let ti = build("synthetic", &["plant.d_amp=0"])?;
    let tc = ti.constants.ok_or("missing constants")?;
    ensure(tc.l_ht == 0.0 && tc.d_sigma == 0.0, || {
        format!("constants not time-invariant: {tc:?}")
    })?;
    let tr = run(&ti)?;
    let ratio = tr.x.last().unwrap().norm() / ti.sim.x0.norm();
    ensure(ratio < 1e-4, || format!("‖x(T)‖/‖x0‖ = {ratio:e}"))?;
    within(start.elapsed(), 30.0)?;
    Ok(format!(
        "sup-tail {tail:.2e} ≤ bound {bound:.2e}; time-invariant ratio {ratio:.1e}; {:.1} s",
        start.elapsed().as_secs_f64()
    ))
}

fn c9_energy() -> Outcome {
    let n = 100_000;
    let u: Vec<Vector> = (0..=n)
        .map(|k| Vector::from_element(1, (2.0 * std::f64::consts::PI * k as f64 / n as f64).sin()))
        .collect();
    let e = *energy_of(&u).last().unwrap();
    ensure((e - 4.0).abs() <= 1e-3, || format!("E(sin) = {e}"))?;
    for name in ALL {
        let tr = run(&build(name, &[])?)?;
        let series = energy_index(&tr).map_err(|e| e.to_string())?;
        ensure(series.windows(2).all(|w| w[1] >= w[0]), || {
            format!("{name}: E decreases")
        })?;
        ensure(series.last().is_some_and(|v| v.is_finite()), || {
            format!("{name}: E not finite")
        })?;
    }
    Ok(format!("E(sin, one period) = {e:.6}; monotone on {} traces", ALL.len()))
}

fn random_matrix(rng: &mut StdRng, n: usize) -> Matrix {
    Matrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0))
}

fn c10_kernels() -> Outcome {
    let mut rng = StdRng::seed_from_u64(7);
    let mut lyap: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.gen_range(1..=9);
        let raw = random_matrix(&mut rng, n);
        let shift = numlin::spectral_abscissa(&raw).map_err(|e| e.to_string())? + 0.5;
        let a = raw - Matrix::identity(n, n) * shift.max(0.0);
        let w = random_matrix(&mut rng, n);
        let m = &w * w.transpose() + Matrix::identity(n, n);
        let p = numlin::solve_lyapunov(&a, &m).map_err(|e| e.to_string())?;
        let res = numlin::norm2(&(&p * &a + a.transpose() * &p + &m)) / numlin::norm2(&m);
        ensure(res < 1e-8, || format!("Lyapunov residual {res:e} at n = {n}"))?;
        lyap = lyap.max(res);
    }

    let mut eig: f64 = 0.0;
    let mut built = 0;
    while built < 100 {
        let n = rng.gen_range(1..=9);
        let v = random_matrix(&mut rng, n) * 0.4 + Matrix::identity(n, n);
        let sv = v.clone().singular_values();
        if sv.max() / sv.min() > 50.0 {
            continue;
        }
        let mut acc = -6.0;
        let vals: Vec<f64> = (0..n)
            .map(|_| {
                acc += 0.1 + rng.gen_range(0.0..1.0);
                acc
            })
            .collect();
        let a = &v * Matrix::from_diagonal(&Vector::from_column_slice(&vals)) * v.clone().try_inverse().unwrap();
        let pairs = numlin::real_eig(&a, 1e-8).map_err(|e| e.to_string())?;
        let scale = numlin::norm2(&a).max(1.0);
        for (p, w) in pairs.iter().zip(&vals) {
            let res = (a.transpose() * &p.vector - &p.vector * p.value).norm() / scale;
            let off = (p.value - w).abs() / scale;
            ensure(res < 1e-8 && off < 1e-8, || {
                format!("eigenpair error {res:e} / {off:e} at n = {n}")
            })?;
            eig = eig.max(res).max(off);
        }
        built += 1;
    }

    let b = build("synthetic", &["epsilon=0.1"])?;
    let final_state = |dt: f64| -> Result<Vector, String> {
        let cfg = SimConfig::new(dt, 2.0, b.sim.x0.clone());
        let tr = simulate(b.plant.as_ref(), &b.spec, &cfg).map_err(|e| e.to_string())?;
        Ok(tr.x.last().unwrap().clone())
    };
    let reference = final_state(1.25e-4)?;
    let e1 = (final_state(1e-2)? - &reference).norm();
    let e2 = (final_state(5e-3)? - &reference).norm();
    let ratio = e1 / e2;
    ensure((12.0..=20.0).contains(&ratio), || format!("step-halving ratio {ratio}"))?;
    Ok(format!(
        "Lyapunov {lyap:.1e}, eigenpairs {eig:.1e}, RK4 ratio {ratio:.2}"
    ))
}

fn delay_outcome(epsilon: &str) -> Result<(bool, String), String> {
    let b = build("delay_demo", &[&format!("epsilon={epsilon}")])?;
    let x0 = b.sim.x0.norm();
    match simulate(b.plant.as_ref(), &b.spec, &b.sim) {
        Err(SimError::NonFiniteState { time, .. }) => Ok((true, format!("blew up at t = {time:.2}"))),
        Ok(tr) => {
            let peak = tr.x.iter().map(|x| x.norm()).fold(0.0, f64::max);
            Ok((sup_tail(&tr) > 10.0 * x0, format!("peak ‖x‖ {peak:.2e}")))
        }
        Err(e) => Err(e.to_string()),
    }
}

fn c11_delay() -> Outcome {
    let (fast_unstable, fast) = delay_outcome("0.01")?;
    let (slow_unstable, slow) = delay_outcome("0.2")?;
    ensure(fast_unstable, || format!("ε = 0.01 stayed bounded ({fast})"))?;
    ensure(!slow_unstable, || format!("ε = 0.2 diverged ({slow})"))?;
    Ok(format!("ε = 0.01: {fast}; ε = 0.2: {slow}"))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("gain reproduction", c1_gain),
        ("output matrices", c2_output_matrix),
        ("closed-loop spectra", c3_spectrum),
        ("structural residuals", c4_structure),
        ("decomposition identity", c5_identity),
        ("realization equivalence", c6_realizations),
        ("stabilization", c7_stabilization),
        ("ultimate bound sufficiency", c8_sufficiency),
        ("energy index", c9_energy),
        ("numerical kernels", c10_kernels),
        ("input delay", c11_delay),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let res = f();
        let secs = start.elapsed().as_secs_f64();
        match res {
            Ok(msg) => println!("PASS {:>2} {name}: {msg} [{secs:.2} s]", i + 1),
            Err(msg) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {msg} [{secs:.2} s]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
