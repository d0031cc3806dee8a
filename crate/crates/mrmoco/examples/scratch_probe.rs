//! Scratch probe (will be replaced by curated examples).

use mrmoco::config::SolverConfig;
use mrmoco::deformation::{invert, InversionParams};
use mrmoco::field::DisplacementField;
use mrmoco::fourier::FourierOp;
use mrmoco::metrics::{endpoint_error, psnr};
use mrmoco::phantom::{generate, MotionKind, Phantom, PhantomSpec};
use mrmoco::solver::{solve, update_u};

fn run_default_phantom(ph: &Phantom, cfg: &SolverConfig, label: &str) {
    let t0 = std::time::Instant::now();
    let (state, report) = match solve(&ph.acquisitions, cfg, None) {
        Ok(r) => r,
        Err(e) => {
            println!("[{label}] FAILED: {e}");
            return;
        }
    };
    let elapsed = t0.elapsed();
    let (w, h) = (ph.truth.width(), ph.truth.height());
    let t = ph.z_true.len();
    let op = FourierOp::new(w, h).unwrap();
    let adjoints: Vec<_> = ph
        .acquisitions
        .frames()
        .iter()
        .map(|x| op.adjoint(x).unwrap())
        .collect();
    let zeros: Vec<_> = (0..t).map(|_| DisplacementField::zeros(w, h).unwrap()).collect();
    let mean = update_u(&adjoints, &zeros).unwrap();
    let peak = ph.truth.max();
    let totals = state.total_displacements().unwrap();
    let mut ees = Vec::new();
    for i in 0..t {
        let expected = invert(&ph.z_true[i], &InversionParams::default())
            .unwrap()
            .displacement;
        let ee = endpoint_error(&totals[i], &expected, 8).unwrap();
        ees.push(ee.mean);
    }
    let moved_mean =
        ees.iter().enumerate().filter(|(i, _)| ph.z_true[*i].max_norm() > 0.0).map(|(_, e)| e).sum::<f64>()
            / ees.iter().enumerate().filter(|(i, _)| ph.z_true[*i].max_norm() > 0.0).count().max(1) as f64;
    println!(
        "[{label}] psnr(u)={:.2} (mean {:.2})  ee={:?}  moved-mean={:.3}  all-mean={:.3}  regrids={:?}  min_det_min={:.3}  time={:.2?}",
        psnr(&state.u, &ph.truth, peak).unwrap(),
        psnr(&mean, &ph.truth, peak).unwrap(),
        ees.iter().map(|e| (e * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
        moved_mean,
        ees.iter().sum::<f64>() / t as f64,
        report.regrid_counts,
        report.min_det.iter().cloned().fold(f64::INFINITY, f64::min),
        elapsed,
    );
}

fn main() {
    // --- Probe 1: null motion, noiseless, T = 1 ---
    let spec = PhantomSpec {
        frames: 1,
        amplitude: 0.0,
        noise_sigma: 0.0,
        ..PhantomSpec::default()
    };
    let ph = generate(&spec).unwrap();
    let cfg = SolverConfig::default();
    let t0 = std::time::Instant::now();
    let (state, report) = solve(&ph.acquisitions, &cfg, None).unwrap();
    let p = psnr(&state.u, &ph.truth, ph.truth.max()).unwrap();
    println!(
        "null-motion: psnr={:.2} dB  min_det={:?}  time={:?}",
        p, report.min_det, t0.elapsed()
    );

    // --- Probe 2: two-frame 1 px translation ---
    let spec2 = PhantomSpec {
        frames: 2,
        period: 4,
        amplitude: 1.0,
        noise_sigma: 0.0,
        kind: MotionKind::Translation,
        ..PhantomSpec::default()
    };
    let ph2 = generate(&spec2).unwrap();
    let (state2, _report2) = solve(&ph2.acquisitions, &cfg, None).unwrap();
    let totals = state2.total_displacements().unwrap();
    for i in 0..2 {
        let expected = invert(&ph2.z_true[i], &InversionParams::default())
            .unwrap()
            .displacement;
        let ee = endpoint_error(&totals[i], &expected, 8).unwrap();
        println!(
            "translation frame {i}: ee mean={:.3} max={:.3}  (true max |z|={:.3})",
            ee.mean,
            ee.max,
            ph2.z_true[i].max_norm()
        );
    }

    // --- Probe 2b: two acquisitions at +1 and -1 px, relative displacement ---
    {
        let spec = PhantomSpec {
            frames: 4,
            period: 4,
            amplitude: 1.0,
            noise_sigma: 0.0,
            kind: MotionKind::Translation,
            ..PhantomSpec::default()
        };
        let ph = generate(&spec).unwrap();
        let stack = mrmoco::fourier::KSpaceStack::new(vec![
            ph.acquisitions.frames()[1].clone(),
            ph.acquisitions.frames()[3].clone(),
        ])
        .unwrap();
        let mean_vec = |z: &DisplacementField| {
            let (mut mx, mut my, mut n) = (0.0, 0.0, 0.0);
            for y in 8..56 {
                for x in 8..56 {
                    let weight = ph.truth.get(x, y).max(0.0);
                    mx += weight * z.x.get(x, y);
                    my += weight * z.y.get(x, y);
                    n += weight;
                }
            }
            (mx / n, my / n)
        };
        let exp0 = mean_vec(
            &invert(&ph.z_true[1], &InversionParams::default())
                .unwrap()
                .displacement,
        );
        let exp1 = mean_vec(
            &invert(&ph.z_true[3], &InversionParams::default())
                .unwrap()
                .displacement,
        );
        let rel_exp = (exp1.0 - exp0.0, exp1.1 - exp0.1);
        for (levels, k_outer) in [(3, 2), (3, 4), (2, 2), (2, 4), (1, 2), (1, 4), (1, 6)] {
            let cfg = SolverConfig {
                levels,
                k_outer,
                ..SolverConfig::default()
            };
            let (state, _) = solve(&stack, &cfg, None).unwrap();
            let totals = state.total_displacements().unwrap();
            let est0 = mean_vec(&totals[0]);
            let est1 = mean_vec(&totals[1]);
            let rel_est = (est1.0 - est0.0, est1.1 - est0.1);
            let err = (rel_est.0 - rel_exp.0).hypot(rel_est.1 - rel_exp.1);
            println!(
                "pm1px L{levels} k{k_outer}: est=({:+.3},{:+.3}) true=({:+.3},{:+.3}) err={:.3}",
                rel_est.0, rel_est.1, rel_exp.0, rel_exp.1, err
            );
        }
    }

    // --- Probe 2c: 8 px amplitude forces regridding ---
    {
        let spec = PhantomSpec {
            amplitude: 8.0,
            noise_sigma: 0.004,
            ..PhantomSpec::default()
        };
        let ph = generate(&spec).unwrap();
        match solve(&ph.acquisitions, &cfg, None) {
            Ok((state, report)) => {
                let peak = ph.truth.max();
                println!(
                    "8px: psnr={:.2}  regrids={:?}  min_det={:?}",
                    psnr(&state.u, &ph.truth, peak).unwrap(),
                    report.regrid_counts,
                    report
                        .min_det
                        .iter()
                        .map(|d| (d * 1000.0).round() / 1000.0)
                        .collect::<Vec<_>>()
                );
            }
            Err(e) => println!("8px FAILED: {e}"),
        }
    }

    // --- Probe 3: default phantom across solver variants ---
    let spec3 = PhantomSpec {
        noise_sigma: 0.004,
        ..PhantomSpec::default()
    };
    let ph3 = generate(&spec3).unwrap();

    run_default_phantom(&ph3, &cfg, "L3 baseline");
    run_default_phantom(
        &ph3,
        &SolverConfig {
            a1: 1e-9,
            ..SolverConfig::default()
        },
        "a1~0 diag",
    );
    run_default_phantom(
        &ph3,
        &SolverConfig {
            k_outer: 4,
            ..SolverConfig::default()
        },
        "k=4 diag",
    );

    // Mean error vector per frame: coherent drift or incoherent fill error?
    let (state3, _) = solve(&ph3.acquisitions, &cfg, None).unwrap();
    let totals3 = state3.total_displacements().unwrap();
    for i in 0..6 {
        let expected = invert(&ph3.z_true[i], &InversionParams::default())
            .unwrap()
            .displacement;
        let est = &totals3[i];
        let (mut mx, mut my, mut n) = (0.0, 0.0, 0usize);
        for y in 8..56 {
            for x in 8..56 {
                mx += est.x.get(x, y) - expected.x.get(x, y);
                my += est.y.get(x, y) - expected.y.get(x, y);
                n += 1;
            }
        }
        println!(
            "frame {i}: mean error vector = ({:+.3}, {:+.3})  true = ({:+.3}, {:+.3})",
            mx / n as f64,
            my / n as f64,
            expected.x.get(32, 32),
            expected.y.get(32, 32)
        );
    }
    // Region breakdown + slice for frame 4
    {
        let i = 4;
        let expected = invert(&ph3.z_true[i], &InversionParams::default())
            .unwrap()
            .displacement;
        let est = &totals3[i];
        let gt = mrmoco::calculus::gradient(&ph3.truth);
        let gmax = gt.max_norm();
        let mut edge = (0.0, 0usize);
        let mut body_flat = (0.0, 0usize);
        let mut background = (0.0, 0usize);
        for y in 8..56 {
            for x in 8..56 {
                let ee = (est.x.get(x, y) - expected.x.get(x, y))
                    .hypot(est.y.get(x, y) - expected.y.get(x, y));
                let g = gt.x.get(x, y).hypot(gt.y.get(x, y));
                if g > 0.15 * gmax {
                    edge.0 += ee;
                    edge.1 += 1;
                } else if ph3.truth.get(x, y) > 0.02 {
                    body_flat.0 += ee;
                    body_flat.1 += 1;
                } else {
                    background.0 += ee;
                    background.1 += 1;
                }
            }
        }
        println!(
            "frame4 EE by region: edge={:.3} (n={})  body-flat={:.3} (n={})  background={:.3} (n={})",
            edge.0 / edge.1 as f64,
            edge.1,
            body_flat.0 / body_flat.1.max(1) as f64,
            body_flat.1,
            background.0 / background.1 as f64,
            background.1
        );
        let y = 32;
        print!("z_est.x row32:  ");
        for x in (8..56).step_by(4) {
            print!("{:+.2} ", est.x.get(x, y));
        }
        println!();
        print!("z_true_inv.x:   ");
        for x in (8..56).step_by(4) {
            print!("{:+.2} ", expected.x.get(x, y));
        }
        println!();
        print!("truth row32:    ");
        for x in (8..56).step_by(4) {
            print!("{:+.2} ", ph3.truth.get(x, y));
        }
        println!();
    }

    // centroid of u vs truth (intensity-weighted)
    let centroid = |f: &mrmoco::field::ScalarField| {
        let (mut cx, mut cy, mut m) = (0.0, 0.0, 0.0);
        for y in 0..f.height() {
            for x in 0..f.width() {
                let v = f.get(x, y).max(0.0);
                cx += v * x as f64;
                cy += v * y as f64;
                m += v;
            }
        }
        (cx / m, cy / m)
    };
    let ct = centroid(&ph3.truth);
    let cu = centroid(&state3.u);
    println!(
        "centroid: truth=({:.3},{:.3}) u=({:.3},{:.3}) shift=({:+.3},{:+.3})",
        ct.0,
        ct.1,
        cu.0,
        cu.1,
        cu.0 - ct.0,
        cu.1 - ct.1
    );
}
