use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tap::autodiff::Tensor;
use tap::models::{sample_latent_value, Discriminator, InferenceNet, Predictor, PredictorConfig};

fn main() {
    let cfg = PredictorConfig {
        frame_size: (8, 8, 1), context_count: 2, code_dim: 4, latent_dim: 2,
        widths: vec![3, 4], use_vae: true, use_new_pixels: true,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut model = Predictor::new(cfg.clone(), &mut rng).unwrap();
    let inf = {
        let mut r = ChaCha8Rng::seed_from_u64(21);
        let _ = Predictor::new(cfg.clone(), &mut r).unwrap();
        let _ = Discriminator::new(&cfg, 3, &mut r).unwrap();
        let _ = Discriminator::new(&cfg, 3, &mut r).unwrap();
        InferenceNet::new(&cfg, 5, &mut r).unwrap()
    };
    let idx = model.params.iter().position(|(n, _)| n == "dec_flow.out.b").unwrap();
    for (k, v) in model.params.tensor_mut(idx).data_mut().iter_mut().enumerate() {
        *v += 0.31 + 0.06 * k as f64;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x0DA7A);
    let ctx: Vec<Tensor> = (0..2).map(|_| Tensor::randn(&[1,8,8], 0.4, &mut rng)).collect();
    let frames: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[1,8,8], 0.4, &mut rng)).collect();
    let noise1 = Tensor::randn(&[2], 1.0, &mut rng);
    let noise2 = Tensor::randn(&[2], 1.0, &mut rng);
    let video: Vec<&Tensor> = ctx.iter().chain(frames.iter()).collect();
    let post = inf.infer_posterior(&video).unwrap();
    let z = sample_latent_value(&post, &noise1).unwrap();
    let ctx_refs: Vec<&Tensor> = ctx.iter().collect();
    for (tag, zz) in [("post", &z), ("prior", &noise2)] {
        let p = model.predict_frames(&ctx_refs, Some(zz)).unwrap();
        let mut worst = f64::INFINITY;
        let mut worst_info = (0usize, 0usize, 0usize, 0.0f64);
        for (fi, flow) in p.flows.iter().enumerate() {
            for y in 0..8 { for x in 0..8 {
                for (axis, _dim) in [(0usize, 8usize), (1, 8)] {
                    let coord = if axis == 0 { x } else { y } as f64;
                    let pos = coord + flow.at(&[axis, y, x]);
                    if !(-0.01..=7.01).contains(&pos) { continue; }
                    let frac = pos - pos.floor();
                    let d = frac.min(1.0 - frac);
                    if d < worst { worst = d; worst_info = (fi, x, y, pos); }
                }
            }}
        }
        println!("{tag}: min kink distance {:.4} at flow{} ({}, {}) pos {:.4}", worst, worst_info.0, worst_info.1, worst_info.2, worst_info.3);
    }
}
