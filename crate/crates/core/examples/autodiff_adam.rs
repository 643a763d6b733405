//! Fits a two-layer perceptron to `sin(3x)` with the tape and Adam, after
//! checking its gradients against central differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use splatforge::numerics::{check_gradients, layers, AdamConfig, Graph, ParamStore, Tensor, Var};

fn model(g: &Graph, params: &ParamStore, xs: &Tensor, ys: &Tensor) -> Var {
    let x = g.constant(xs.clone());
    let hidden = g.silu(layers::linear(g, params, "fc1", x));
    let pred = layers::linear(g, params, "fc2", hidden);
    let err = g.sub(pred, g.constant(ys.clone()));
    g.mean(g.square(err))
}

fn main() -> splatforge::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut params = ParamStore::new();
    layers::init_linear(&mut params, "fc1", 1, 16, &mut rng);
    layers::init_linear(&mut params, "fc2", 16, 1, &mut rng);

    let n = 64;
    let xs = Tensor::from_fn(&[n, 1], |i| -1.0 + 2.0 * i as f64 / (n - 1) as f64);
    let ys = xs.map(|x| (3.0 * x).sin());

    let err = check_gradients(|g, p| Ok(model(g, p, &xs, &ys)), &params, 1e-6)?;
    println!("gradient check: max relative error {err:.2e}");

    let adam = AdamConfig {
        lr: 1e-2,
        ..Default::default()
    };
    for step in 0..=1500 {
        let g = Graph::new();
        let loss = model(&g, &params, &xs, &ys);
        if step % 300 == 0 {
            println!("step {step:5}  mse {:.6}", g.scalar_value(loss));
        }
        params.backward(&g, loss)?;
        params.adam_step(&adam)?;
    }
    Ok(())
}
