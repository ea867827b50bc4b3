//! Finite-difference verification of the reverse-mode engine, from single
//! ops up to a full predictor forward pass.
//!
//! ```bash
//! cargo run --release -p tap --example gradient_check
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tap::autodiff::{grad_check, Tape, Tensor, TensorId};
use tap::models::{Bound, Predictor, PredictorConfig};

fn report(name: &str, r: &tap::autodiff::GradCheckReport) {
    println!(
        "{:<28} {:>5} elements  max rel err {:.2e}  {}",
        name,
        r.checked,
        r.max_rel_err,
        if r.pass() { "ok" } else { "FAIL" }
    );
}

fn main() -> tap::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let eps = 1e-4;
    let tol = 1e-3;

    let x = Tensor::randn(&[2, 6, 6], 1.0, &mut rng);
    let w = Tensor::randn(&[3, 2, 4, 4], 0.4, &mut rng);
    let b = Tensor::randn(&[3], 0.1, &mut rng);
    let (wc, bc) = (w.clone(), b.clone());
    let conv = move |tape: &mut Tape, xi: TensorId| {
        let wi = tape.leaf(&wc, false)?;
        let bi = tape.leaf(&bc, false)?;
        let y = tape.conv2d(xi, wi, bi, 2, 1)?;
        let y = tape.tanh(y)?;
        tape.mean_all(y)
    };
    report("conv2d + tanh (d/dx)", &grad_check(&conv, &x, eps, tol)?);

    let img = Tensor::randn(&[3, 8, 8], 0.7, &mut rng);
    let flow = {
        let mut f = Tensor::randn(&[2, 8, 8], 0.8, &mut rng);
        f.data_mut().iter_mut().for_each(|v| *v += 0.27); // stay off grid kinks
        f
    };
    let ic = img.clone();
    let warp = move |tape: &mut Tape, fi: TensorId| {
        let ii = tape.leaf(&ic, false)?;
        let y = tape.bilinear_sample(ii, fi)?;
        tape.mean_all(y)
    };
    report("bilinear warp (d/dflow)", &grad_check(&warp, &flow, eps, tol)?);

    let v = Tensor::randn(&[9], 2.0, &mut rng);
    let min = |tape: &mut Tape, xi: TensorId| tape.min_all(xi);
    report("min reduction", &grad_check(&min, &v, eps, tol)?);

    // every parameter of a small predictor at once
    let cfg = PredictorConfig {
        frame_size: (8, 8, 1),
        context_count: 1,
        code_dim: 4,
        latent_dim: 2,
        widths: vec![3, 4],
        use_vae: true,
        use_new_pixels: true,
    };
    let model = Predictor::new(cfg.clone(), &mut rng)?;
    let shapes: Vec<(String, Vec<usize>)> = model
        .params
        .iter()
        .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
        .collect();
    let flat: Vec<f64> = model.params.iter().flat_map(|(_, t)| t.data().to_vec()).collect();
    let flat = Tensor::from_vec(vec![flat.len()], flat)?;
    let ctx = Tensor::randn(&[1, 8, 8], 0.4, &mut rng);
    let target = Tensor::randn(&[1, 8, 8], 0.4, &mut rng);
    let z = Tensor::randn(&[2], 1.0, &mut rng);
    let full = move |tape: &mut Tape, flat_id: TensorId| {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = Predictor::new(cfg.clone(), &mut rng)?;
        let mut ids = Vec::new();
        let mut off = 0;
        for (_, shape) in &shapes {
            let numel: usize = shape.iter().product();
            let slice = tape.narrow(flat_id, 0, off, numel)?;
            ids.push(tape.reshape(slice, shape)?);
            off += numel;
        }
        let bound = Bound::from_ids(ids);
        let c = tape.constant(&ctx)?;
        let zi = tape.constant(&z)?;
        let out = model.predict(tape, &bound, &[c], Some(zi))?;
        let t = tape.constant(&target)?;
        tap::taploss::l1_mean(tape, out.composited, t)
    };
    report("full predictor l1", &grad_check(&full, &flat, eps, tol)?);
    Ok(())
}
