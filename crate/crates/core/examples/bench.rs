use ipm_core::engine::*;
use ipm_core::model::*;
use ipm_core::rng::*;
use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use std::time::Instant;

fn main() {
    let n: usize = 10_000_000;
    // substream + 2 normals
    let t0 = Instant::now();
    let mut acc = 0.0;
    for i in 0..n {
        let mut rng = substream(1, StreamDomain::Propagate, 3, i as u64);
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        acc += a + b;
    }
    println!("substream+2 normals: {:.1} ns ({acc:.3})", t0.elapsed().as_secs_f64() / n as f64 * 1e9);

    // exp1 draws
    let mut rng = substream(1, StreamDomain::Resample, 0, 0);
    let t0 = Instant::now();
    let mut acc = 0.0;
    for _ in 0..n {
        let e: f64 = rng.sample(Exp1);
        acc += e;
    }
    println!("exp1: {:.1} ns ({acc:.3})", t0.elapsed().as_secs_f64() / n as f64 * 1e9);

    // exp()
    let t0 = Instant::now();
    let mut acc = 0.0;
    let mut x = 0.001f64;
    for _ in 0..n {
        acc += (-x).exp();
        x += 1e-9;
    }
    println!("exp(): {:.1} ns ({acc:.3})", t0.elapsed().as_secs_f64() / n as f64 * 1e9);

    // boxed closure calls, le1 model
    let p = builtin_problem("le1", &BuiltinOptions::default()).unwrap();
    let x = [0.3f64, -0.7];
    let mut b = [0.0f64; 2];
    let mut g = [0.0f64; 2];
    let t0 = Instant::now();
    let mut acc = 0.0;
    for _ in 0..n {
        (p.grad_potential)(&x, &mut g);
        (p.drift)(&x, &mut b);
        let lap = (p.laplacian_potential)(&x);
        let div = (p.div_drift)(&x);
        acc += b[0] + g[1] + lap + div;
        std::hint::black_box(&mut acc);
    }
    println!("4 dyn model calls (le1): {:.1} ns ({acc:.3})", t0.elapsed().as_secs_f64() / n as f64 * 1e9);

    // full run again for reference
    let cfg = RunConfig {
        params: WeightParams::new(0.1, 0.25).unwrap(),
        n_particles: 20_000,
        dt: 1.0 / 128.0,
        horizon: 8.0,
        burn_in: 4.0,
        seed: 1,
        initial: InitialMeasure::StandardGaussian,
    };
    let t0 = Instant::now();
    let out = run_ipm(&p, &cfg).unwrap();
    let el = t0.elapsed().as_secs_f64();
    let pstep = cfg.n_particles as f64 * cfg.n_steps() as f64;
    println!("full le1 run: {:.1} ns/pstep (lambda {})", el / pstep * 1e9, out.result.lambda_hat);
}
