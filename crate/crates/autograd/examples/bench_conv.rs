use dscm_autograd::{Tape32, Tensor32};
use rand::SeedableRng;
use std::time::Instant;

fn main() {
    let mut rng = rand::rngs::StdRng::seed_from_u64(0);
    for &(c, hw) in &[(8usize, 32usize), (16, 32), (16, 16), (32, 8)] {
        let x = Tensor32::randn(&[16, c, hw, hw], 1.0, &mut rng);
        let w = Tensor32::randn(&[c, c, 3, 3], 0.1, &mut rng);
        let iters = 20;
        let t0 = Instant::now();
        for _ in 0..iters {
            let tape = Tape32::new();
            let xv = tape.var(x.clone());
            let wv = tape.var(w.clone());
            let y = xv.conv2d(wv, None, 1, 1).relu().sum();
            let _ = tape.backward(y);
        }
        let dt = t0.elapsed().as_secs_f64() / iters as f64;
        let macs = 16.0 * (c * c * 9 * hw * hw) as f64 * 3.0;
        println!("c={c} hw={hw}: {:.2} ms/iter, {:.2} GFLOP/s", dt * 1e3, 2.0 * macs / dt / 1e9);
    }
}
