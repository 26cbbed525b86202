//! Check every analytic gradient of a small stage-1 network against central
//! finite differences, including the shared tied-kernel path (a parameter
//! used by both a convolution and its partner deconvolution).
//!
//! ```bash
//! cargo run --release --example gradient_check
//! ```

use deconvstack::layers::bce_multilabel_loss;
use deconvstack::model::{NetworkConfig, StageNet};
use deconvstack::reference::{fd_grad, max_rel_err};
use deconvstack::tensor::{SeededRng, Tensor4};

fn main() -> deconvstack::Result<()> {
    let cfg = NetworkConfig::from_json(
        r#"{
            "input_size": [16, 16],
            "input_channels": 1,
            "conv_layers": [
                { "blocks": [{ "filters": 4, "kh": 3, "kw": 3 }], "pool": { "kh": 2, "kw": 2, "stride": 2 } },
                { "blocks": [{ "filters": 6, "kh": 3, "kw": 3 }], "pool": { "kh": 2, "kw": 2, "stride": 2 } }
            ],
            "deconv_stages": 1,
            "num_classes": 3,
            "task": "multi-label",
            "s": 5.0
        }"#,
    )?;
    let mut rng = SeededRng::new(17);
    let mut net = StageNet::build(&cfg, 1, &mut rng)?;
    let x = Tensor4::uniform(&mut rng, (1, 1, 16, 16), 0.0, 1.0)?;
    let t = Tensor4::new((1, 3, 1, 1), vec![1.0, 1.0, 0.0])?;

    let (y, _) = net.forward(&x)?;
    let (loss, d_y) = bce_multilabel_loss(&y, &t)?;
    net.backward(&d_y)?;
    println!("loss at the probe point: {loss:.6}");

    let names: Vec<String> = net.store().param_names().cloned().collect();
    for name in names {
        let analytic = net.store().param(&name).unwrap().grad_w.clone();
        let base = net.store().param(&name).unwrap().weight.data().to_vec();
        let fd = fd_grad(&base, 1e-5, |vals| {
            let mut probe = net.clone();
            probe.store_mut().param_mut(&name).unwrap().weight.data_mut().copy_from_slice(vals);
            let (y, _) = probe.forward(&x).unwrap();
            bce_multilabel_loss(&y, &t).unwrap().0
        });
        let err = max_rel_err(&analytic, &fd);
        let note = if name == "conv2_1" { "  <- tied kernel, both paths summed" } else { "" };
        println!("{name:>10}: {} entries, max rel err {err:.2e}{note}", analytic.len());
        assert!(err < 1e-4);
    }
    println!("all analytic gradients agree with finite differences");
    Ok(())
}
