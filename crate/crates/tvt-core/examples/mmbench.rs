use std::time::Instant;
use tvt_core::tensor::{mm_nn_acc, mm_nt_acc, mm_tn_acc, im2col};
use tvt_core::rng::Stream;

fn main() {
    let mut s = Stream::derive(1, &["bench"]);
    for &(m, k, n) in &[(64, 72, 4096), (128, 256, 1024), (256, 256, 256), (16, 144, 4096)] {
        let a: Vec<f64> = (0..m * k).map(|_| s.normal()).collect();
        let b: Vec<f64> = (0..k * n).map(|_| s.normal()).collect();
        let mut c = vec![0.0; m * n];
        let t0 = Instant::now();
        let mut reps = 0u64;
        while t0.elapsed().as_millis() < 300 {
            mm_nn_acc(&mut c, &a, &b, m, k, n);
            reps += 1;
        }
        let gmacs = (m * k * n) as f64 * reps as f64 / t0.elapsed().as_secs_f64() / 1e9;
        println!("mm_nn {m}x{k}x{n}: {gmacs:.2} GMAC/s");
    }
    let (m, k, n) = (128, 256, 1024);
    let a: Vec<f64> = (0..m * k).map(|_| s.normal()).collect();
    let bt: Vec<f64> = (0..k * n).map(|_| s.normal()).collect();
    let mut c = vec![0.0; m * n];
    let t0 = Instant::now();
    let mut reps = 0u64;
    while t0.elapsed().as_millis() < 300 {
        mm_nt_acc(&mut c, &a, &bt, m, k, n);
        reps += 1;
    }
    println!("mm_nt: {:.2} GMAC/s", (m * k * n) as f64 * reps as f64 / t0.elapsed().as_secs_f64() / 1e9);
    let mut c = vec![0.0; m * n];
    let at: Vec<f64> = (0..k * m).map(|_| s.normal()).collect();
    let b2: Vec<f64> = (0..k * n).map(|_| s.normal()).collect();
    let t0 = Instant::now();
    let mut reps = 0u64;
    while t0.elapsed().as_millis() < 300 {
        mm_tn_acc(&mut c, &at, &b2, m, k, n);
        reps += 1;
    }
    println!("mm_tn: {:.2} GMAC/s", (m * k * n) as f64 * reps as f64 / t0.elapsed().as_secs_f64() / 1e9);
    // im2col cost at toy scale
    let x: Vec<f64> = (0..8 * 64 * 64).map(|_| s.normal()).collect();
    let mut col = Vec::new();
    let t0 = Instant::now();
    for _ in 0..200 {
        im2col(&x, 8, 64, 64, 3, 1, 1, &mut col);
    }
    println!("im2col 8x64x64 k3: {:.3} ms", t0.elapsed().as_secs_f64() * 1000.0 / 200.0);
}
