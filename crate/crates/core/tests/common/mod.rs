#![allow(dead_code)]

use lider_core::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut *rng)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// `|a − b| ≤ atol + rtol·max(|a|, |b|)`.
pub fn close(a: f64, b: f64, rtol: f64, atol: f64) -> bool {
    (a - b).abs() <= atol + rtol * a.abs().max(b.abs())
}

fn evaluate<F>(inputs: &[Tensor], f: &F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    f(&tape, &vars).item().unwrap()
}

/// Analytic gradients of the scalar `f` w.r.t. every input.
pub fn analytic<F>(inputs: &[Tensor], f: &F) -> Vec<Tensor>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars);
    let grads = tape.backward(loss).unwrap();
    vars.iter().map(|&v| grads.wrt(v)).collect()
}

/// Central differences with step `h` for every element of every input.
pub fn numeric<F>(inputs: &[Tensor], f: &F, h: f64) -> Vec<Tensor>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let mut out = Vec::new();
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            g.data_mut()[j] = (evaluate(&plus, f) - evaluate(&minus, f)) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Panics with the first mismatching element.
pub fn assert_gradients<F>(inputs: &[Tensor], f: F, h: f64, rtol: f64, atol: f64)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let a = analytic(inputs, &f);
    let n = numeric(inputs, &f, h);
    for (i, (ga, gn)) in a.iter().zip(&n).enumerate() {
        assert_eq!(ga.shape(), inputs[i].shape());
        for (j, (x, y)) in ga.data().iter().zip(gn.data()).enumerate() {
            assert!(close(*x, *y, rtol, atol), "input {} element {}: analytic {} numeric {}", i, j, x, y);
        }
    }
}
