use std::time::Instant;

fn main() {
    let n = 20_000_000usize;
    let xs: Vec<f64> = (0..n).map(|i| (i % 61) as f64 * 0.1 - 3.0).collect();
    let t0 = Instant::now();
    let mut acc = 0.0;
    for &x in &xs {
        acc += x.exp();
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("std exp: {:.1} M/s ({acc:.1})", n as f64 / dt / 1e6);
}
