//! Log-sum-exp global pooling interpolates between average pooling (small
//! similarity s) and max pooling (large s), and distributes gradient by the
//! softmax-weighted responsibility of each activation.
//!
//! ```bash
//! cargo run --example lse_pooling
//! ```

use deconvstack::layers::{lse_pool, lse_pool_backward};
use deconvstack::tensor::{SeededRng, Tensor4};

fn main() -> deconvstack::Result<()> {
    let mut rng = SeededRng::new(9);
    let map = Tensor4::uniform(&mut rng, (1, 1, 8, 8), 0.0, 1.0)?;
    let mean = map.data().iter().sum::<f64>() / 64.0;
    let max = map.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    println!("random 8x8 map: mean {mean:.4}, max {max:.4}");
    println!("{:>8}  {:>8}", "s", "lse");
    for s in [0.01, 0.1, 1.0, 5.0, 20.0, 100.0, 1000.0] {
        let y = lse_pool(&map, s)?.get(0, 0, 0, 0);
        println!("{s:>8.2}  {y:>8.4}");
    }
    println!("small s approaches the mean, large s approaches the max");

    // constant-map identity
    let flat = Tensor4::fill((1, 1, 8, 8), 0.37)?;
    for s in [0.01, 5.0, 100.0] {
        assert!((lse_pool(&flat, s)?.get(0, 0, 0, 0) - 0.37).abs() < 1e-12);
    }
    println!("constant map pools to itself for every s");

    // gradient concentrates on the strongest activations as s grows
    let d_y = Tensor4::fill((1, 1, 1, 1), 1.0)?;
    for s in [0.01, 5.0, 100.0] {
        let g = lse_pool_backward(&map, s, &d_y)?;
        let gmax = g.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let share = gmax / g.data().iter().sum::<f64>();
        println!("s = {s:>6.2}: top activation receives {:.1}% of the gradient", share * 100.0);
    }
    Ok(())
}
