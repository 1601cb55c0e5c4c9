use gatefusion::tensor::Matrix;
use std::time::Instant;

fn bench(m: usize, k: usize, n: usize, iters: usize) {
    let a = Matrix::from_elem((m, k), 0.5);
    let b = Matrix::from_elem((k, n), 0.25);
    let t0 = Instant::now();
    let mut acc = 0.0;
    for _ in 0..iters {
        let c = a.dot(&b);
        acc += c[(0, 0)];
    }
    let dt = t0.elapsed().as_secs_f64();
    let flops = (2 * m * k * n * iters) as f64;
    println!(
        "{m}x{k} . {k}x{n}: {:.2} GFLOP/s ({acc})",
        flops / dt / 1e9
    );
}

fn main() {
    bench(256, 32, 32, 4000);
    bench(256, 32, 8, 8000);
    bench(256, 8, 256, 2000);
    bench(256, 256, 8, 2000);
    bench(256, 32, 64, 2000);
    bench(64, 32, 32, 8000);
    bench(1024, 32, 64, 1000);
    bench(512, 512, 512, 20);
}
