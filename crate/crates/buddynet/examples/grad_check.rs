//! Reverse-mode gradients vs the central finite-difference oracle, on a few
//! representative compositions.
//!
//!     cargo run --release --example grad_check

use buddynet::autodiff::{grad_check, Graph, TensorId};
use buddynet::rng::Rng;

fn main() {
    let mut rng = Rng::from_seed(7);
    let mut rand = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.range(-1.5, 1.5)).collect() };

    // softmax cross-entropy style composition
    let x = rand(12);
    let w = rand(12);
    let f = |g: &mut Graph, ids: &[TensorId]| {
        let xm = g.reshape(ids[0], &[3, 4])?;
        let wm = g.reshape(ids[1], &[4, 3])?;
        let logits = g.matmul(xm, wm)?;
        let logp = g.log_softmax(logits, 1, 1.0)?;
        let s = g.sum(logp, None)?;
        g.neg(s)
    };
    let err = grad_check(&f, &[(&x, &[12]), (&w, &[12])], 1e-5).unwrap();
    println!("matmul + log_softmax   max relative error {err:.3e}");

    // generalized-mean style composition with a learnable exponent
    let feats: Vec<f64> = (0..20).map(|i| 0.3 + 0.1 * i as f64).collect();
    let p = [2.5];
    let f = |g: &mut Graph, ids: &[TensorId]| {
        let x = g.reshape(ids[0], &[4, 5])?;
        let s = g.softplus(x)?;
        let powed = g.pow(s, ids[1])?;
        let mean = g.mean(powed, Some(0))?;
        let mean = g.reshape(mean, &[1, 5])?;
        let one = g.scalar(1.0);
        let inv_p = g.div(one, ids[1])?;
        let pooled = g.pow(mean, inv_p)?;
        g.sum(pooled, None)
    };
    let err = grad_check(&f, &[(&feats, &[20]), (&p, &[1])], 1e-5).unwrap();
    println!("generalized-mean pool  max relative error {err:.3e}");

    // normalized cosine similarity
    let a = rand(8);
    let b = rand(8);
    let f = |g: &mut Graph, ids: &[TensorId]| {
        let a = g.reshape(ids[0], &[1, 8])?;
        let b = g.reshape(ids[1], &[1, 8])?;
        let an = g.l2_normalize(a, 1, 1e-12)?;
        let bn = g.l2_normalize(b, 1, 1e-12)?;
        let prod = g.mul(an, bn)?;
        g.sum(prod, None)
    };
    let err = grad_check(&f, &[(&a, &[8]), (&b, &[8])], 1e-5).unwrap();
    println!("cosine similarity      max relative error {err:.3e}");
}
