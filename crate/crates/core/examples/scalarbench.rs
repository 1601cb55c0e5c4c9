use std::time::Instant;

fn main() {
    let n = 5_000_000usize;
    let xs: Vec<f64> = (0..n).map(|i| (i % 97) as f64 * 0.08 - 3.5).collect();

    let t0 = Instant::now();
    let mut acc = 0.0;
    for &x in &xs { acc += libm::erf(x); }
    println!("libm erf: {:.0} M/s ({acc:.1})", n as f64 / t0.elapsed().as_secs_f64() / 1e6);

    let t0 = Instant::now();
    let mut acc = 0.0;
    for &x in &xs { acc += gatefusion::tensor::gelu_scalar(x); }
    println!("gelu: {:.0} M/s ({acc:.1})", n as f64 / t0.elapsed().as_secs_f64() / 1e6);

    let t0 = Instant::now();
    let mut acc = 0.0;
    for &x in &xs { acc += gatefusion::tensor::gelu_grad_scalar(x); }
    println!("gelu_grad: {:.0} M/s ({acc:.1})", n as f64 / t0.elapsed().as_secs_f64() / 1e6);

    let t0 = Instant::now();
    let mut acc = 0.0;
    for &x in &xs { acc += 1.0 / (1.0 + (-x).exp()); }
    println!("sigmoid: {:.0} M/s ({acc:.1})", n as f64 / t0.elapsed().as_secs_f64() / 1e6);
}
