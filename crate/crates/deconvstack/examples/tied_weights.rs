//! Mechanics of weight tying: the deconvolution kernel is a computed view
//! of its partner convolution kernel (channel axes swapped, spatially
//! rotated 180 degrees), views track partner mutations, the transform is an
//! involution, and gradients from both uses land on the one stored buffer.
//!
//! ```bash
//! cargo run --example tied_weights
//! ```

use deconvstack::layers::{tie_transform_kernel, ConvWeight};
use deconvstack::model::TiedParamStore;
use deconvstack::tensor::SeededRng;

fn main() -> deconvstack::Result<()> {
    let mut rng = SeededRng::new(5);
    let mut store = TiedParamStore::new();
    store.insert_param("conv5_1", ConvWeight::glorot(&mut rng, 4, 3, 3, 3)?);
    store.insert_deconv_bias("deconv1_1", 3);
    store.register_tie("deconv1_1", "conv5_1", true)?;

    let view = store.make_tied_view("deconv1_1")?;
    println!("partner kernel dims: {:?}", store.param("conv5_1").unwrap().weight.kernel_dims());
    println!("tied view dims:      {:?}", view.kernel_dims());
    let w = &store.param("conv5_1").unwrap().weight;
    println!(
        "partner[o=1, i=2, ky=0, kx=2] = {:+.4} == view[i=2, o=1, ky=2, kx=0] = {:+.4}",
        w.at(1, 2, 0, 2),
        view.at(2, 1, 2, 0)
    );

    // The transform is an involution: applying it twice returns the kernel.
    let once = tie_transform_kernel(w.data(), 4, 3, 3, 3, true);
    let twice = tie_transform_kernel(&once, 3, 4, 3, 3, true);
    assert_eq!(&twice, w.data());
    println!("double transform reproduces the stored kernel");

    // No copy drift: mutate the partner, re-read the view.
    store.param_mut("conv5_1").unwrap().weight.data_mut()[0] = 9.0;
    let fresh = store.make_tied_view("deconv1_1")?;
    assert_eq!(fresh.at(0, 0, 2, 2), 9.0);
    println!("partner mutation is visible through a fresh view");

    // Shared gradient: conv-path and deconv-path contributions accumulate
    // on the same stored kernel.
    let conv_path = vec![1.0; 4 * 3 * 9];
    store.accumulate_param_grad("conv5_1", Some(&conv_path), None)?;
    let deconv_path_view_frame = vec![0.5; 3 * 4 * 9];
    store.accumulate_tied_grad("deconv1_1", &deconv_path_view_frame)?;
    let g = &store.param("conv5_1").unwrap().grad_w;
    assert!(g.iter().all(|v| (*v - 1.5).abs() < 1e-15));
    println!("kernel gradient is the sum of both paths: {:.1} everywhere", g[0]);
    Ok(())
}
