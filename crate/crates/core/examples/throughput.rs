//! Times forward/backward passes of the default model.

use std::time::Instant;

use avae_core::graph::Graph;
use avae_core::vae::{vae_forward, Mode, VaeConfig, VaeModel};
use avae_core::{OptimizerState, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = VaeModel::<f32>::new(VaeConfig::with_latent(8), &mut rng).unwrap();
    let mut opt = OptimizerState::adam(1e-3, 5e-4);
    let n = 256;
    let x = Tensor::from_fn(&[n, 1, 40, 40], |i| ((i * 7919) % 97) as f32 / 96.0);
    let noise = Tensor::randn(&[n, 8], &mut rng);
    for trainable in [true, false] {
        let t = Instant::now();
        let reps = 5;
        for _ in 0..reps {
            let mut g = Graph::new();
            let f = vae_forward(&mut g, &model, &x, &noise, Mode::Train, trainable).unwrap();
            let loss = f.elbo.mean_total(&mut g);
            let grads = g.backward(loss).unwrap();
            if trainable {
                model.zero_grad();
                for (v, p) in f.params.iter().zip(model.params_mut()) {
                    grads.accumulate_into(*v, p);
                }
                opt.step(&mut model.params_mut()).unwrap();
            }
        }
        let per = t.elapsed().as_secs_f64() / (reps * n) as f64;
        println!("trainable={trainable}: {:.3} ms/image fwd+bwd", per * 1e3);
    }
    let t = Instant::now();
    for _ in 0..5 {
        let mut g = Graph::new();
        vae_forward(&mut g, &model, &x, &noise, Mode::Eval, false).unwrap();
    }
    println!("eval forward: {:.3} ms/image", t.elapsed().as_secs_f64() / (5 * n) as f64 * 1e3);
}
