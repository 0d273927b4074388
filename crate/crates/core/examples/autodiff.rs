//! The reverse-mode engine on its own: a two-layer network fitted to a sine
//! with Adam, and a finite-difference check of its gradients.
//!
//! ```text
//! cargo run --example autodiff
//! ```

use dtclab::neural::{adam_step, grad_check, AdamConfig, AdamState, Graph, Init, NeuralError, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn loss(s: &ParamStore, g: &mut Graph, x: &Tensor, y: &[f64]) -> Result<Var, NeuralError> {
    let xv = g.input(x.clone())?;
    let (w1, b1) = (g.param_by_name(s, "w1"), g.param_by_name(s, "b1"));
    let (w2, b2) = (g.param_by_name(s, "w2"), g.param_by_name(s, "b2"));
    let h = g.linear(xv, w1, b1)?;
    let h = g.tanh(h)?;
    let out = g.linear(h, w2, b2)?;
    g.mse(out, y)
}

fn main() -> Result<(), NeuralError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = ParamStore::new();
    params.add("w1", &[1, 16], Init::Normal(1.0), &mut rng);
    params.add("b1", &[16], Init::Zeros, &mut rng);
    params.add("w2", &[16, 1], Init::Normal(0.25), &mut rng);
    params.add("b2", &[1], Init::Zeros, &mut rng);

    let n = 64;
    let xs: Vec<f64> = (0..n).map(|i| -3.0 + 6.0 * i as f64 / (n - 1) as f64).collect();
    let ys: Vec<f64> = xs.iter().map(|x| x.sin()).collect();
    let x = Tensor::new(vec![n, 1], xs)?;

    let report = grad_check(&params, |s, g| loss(s, g, &x, &ys), 1e-6)?;
    println!(
        "gradient check: {} entries, max relative error {:.2e}, passed {}",
        report.n_checked, report.max_rel_err, report.passed
    );

    let mut state = AdamState::new(AdamConfig { lr: 1e-2, ..AdamConfig::default() }, &params);
    for step in 0..=2000 {
        let mut g = Graph::new();
        let l = loss(&params, &mut g, &x, &ys)?;
        if step % 400 == 0 {
            println!("step {step:>4}: mse {:.6}", g.value(l).data[0]);
        }
        g.backward(l)?;
        let grads = g.param_grads(&params);
        adam_step(&mut params, &grads, &mut state)?;
    }
    Ok(())
}
