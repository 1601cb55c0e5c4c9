use gatefusion::tensor::Matrix;
use std::time::Instant;

fn gf(m: usize, k: usize, n: usize, iters: usize, dt: f64) -> f64 {
    (2 * m * k * n * iters) as f64 / dt / 1e9
}

fn main() {
    // Attention backward patterns.
    let d = Matrix::from_elem((256, 256), 0.1); // upstream grad of scores
    let k = Matrix::from_elem((256, 8), 0.2);
    let q = Matrix::from_elem((256, 8), 0.3);
    let iters = 3000;

    let t0 = Instant::now();
    for _ in 0..iters { std::hint::black_box(d.dot(&k)); } // dQ
    println!("dQ = d.k        (256x256)(256x8): {:.1} GF/s", gf(256,256,8,iters,t0.elapsed().as_secs_f64()));

    let t0 = Instant::now();
    for _ in 0..iters { std::hint::black_box(d.t().dot(&q)); } // dK
    println!("dK = d^T.q      view-transposed:  {:.1} GF/s", gf(256,256,8,iters,t0.elapsed().as_secs_f64()));

    let v = Matrix::from_elem((256, 8), 0.4);
    let dp = Matrix::from_elem((256, 8), 0.5); // upstream of PV output
    let t0 = Instant::now();
    for _ in 0..iters { std::hint::black_box(dp.dot(&v.t())); } // dP
    println!("dP = dp.v^T     (256x8)(8x256):   {:.1} GF/s", gf(256,8,256,iters,t0.elapsed().as_secs_f64()));

    let p = Matrix::from_elem((256, 256), 0.6);
    let t0 = Instant::now();
    for _ in 0..iters { std::hint::black_box(p.t().dot(&dp)); } // dV
    println!("dV = p^T.dp     view-transposed:  {:.1} GF/s", gf(256,256,8,iters,t0.elapsed().as_secs_f64()));

    // QKV weight grads: dW = x^T.d  (32x256)(256x8)
    let x = Matrix::from_elem((256, 32), 0.7);
    let dq = Matrix::from_elem((256, 8), 0.8);
    let iters2 = 20000;
    let t0 = Instant::now();
    for _ in 0..iters2 { std::hint::black_box(x.t().dot(&dq)); }
    println!("dW = x^T.d      (32x256)(256x8):  {:.1} GF/s", gf(32,256,8,iters2,t0.elapsed().as_secs_f64()));

    // dX = d.W^T  (256x8)(8x32)
    let w = Matrix::from_elem((32, 8), 0.9);
    let t0 = Instant::now();
    for _ in 0..iters2 { std::hint::black_box(dq.dot(&w.t())); }
    println!("dX = d.w^T      (256x8)(8x32):    {:.1} GF/s", gf(256,8,32,iters2,t0.elapsed().as_secs_f64()));
}
