//! A small batch-normalised ReLU network fitted to sin(3x) by hand-written
//! backpropagation, Adam for the first 70% of the steps and SGD after.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rough_cpde::nn::{gradient_check, DenseNet, OptimState};

fn main() -> rough_cpde::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut net = DenseNet::new(&[1, 16, 16, 1], &mut rng)?;
    let iterations = 3000;
    let mut opt = OptimState::with_schedule(net.n_params(), 0.01, iterations, 0.7)?;

    let x = Array2::from_shape_fn((8, 1), |_| rng.random_range(-1.0..1.0));
    let c = Array2::from_shape_fn((8, 1), |_| rng.random_range(-1.0..1.0));
    if let Some(err) = gradient_check(&net, x.view(), c.view(), true)? {
        println!("gradient check at init: max rel err {err:.2e}");
    }

    for it in 0..iterations {
        let x = Array2::from_shape_fn((64, 1), |_| rng.random_range(-1.0..1.0));
        let (out, cache) = net.forward_train(x.view())?;
        let diff = &out - &x.mapv(|v| (3.0 * v).sin());
        let loss = diff.mapv(|d| d * d).mean().unwrap();
        let grads = net.backward(&cache, (diff * (2.0 / 64.0)).view())?;
        opt.step(net.params_mut(), &grads)?;
        if it % 500 == 0 || it + 1 == iterations {
            println!("{it:>5} {:?} loss {loss:.3e}", opt.mode());
        }
    }

    let grid = Array2::from_shape_fn((9, 1), |(i, _)| -1.0 + 0.25 * i as f64);
    let (y, _) = net.forward_eval(grid.view())?;
    println!("\n    x    net   sin(3x)");
    for (x, y) in grid.iter().zip(y.iter()) {
        println!("{x:>5.2} {y:>7.4} {:>7.4}", (3.0 * x).sin());
    }
    Ok(())
}
