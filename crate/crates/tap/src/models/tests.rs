use super::*;
use crate::autodiff::grad_check;
use crate::taploss::kl_standard_normal;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_cfg() -> PredictorConfig {
    PredictorConfig {
        frame_size: (8, 8, 2),
        context_count: 2,
        code_dim: 8,
        latent_dim: 3,
        widths: vec![4, 6],
        use_vae: false,
        use_new_pixels: true,
    }
}

fn frames_in_range(cfg: &PredictorConfig, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, c) = cfg.frame_size;
    (0..cfg.context_count + 1)
        .map(|_| {
            let mut t = Tensor::randn(&[c, h, w], 0.5, &mut rng);
            for v in t.data_mut() {
                *v = v.clamp(-1.0, 1.0);
            }
            t
        })
        .collect()
}

#[test]
fn masks_sum_to_one_for_untrained_net() {
    let cfg = small_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = Predictor::new(cfg.clone(), &mut rng).unwrap();
    let frames = frames_in_range(&cfg, 2);
    let out = model.predict_frames(&[&frames[0], &frames[1]], None).unwrap();
    let masks = &out.masks;
    let k = cfg.mask_channels();
    let plane = masks.numel() / k;
    for p in 0..plane {
        let sum: f64 = (0..k).map(|ch| masks.data()[ch * plane + p]).sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }
    // composited stays in range for in-range inputs
    assert!(out.composited.data().iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn forced_one_hot_mask_and_zero_flow_reproduce_context() {
    // composite with mask one-hot on context 0 and identity flow returns
    // context 0 exactly
    let mut tape = Tape::new();
    let ctx0 = Tensor::from_vec(vec![1, 2, 2], vec![0.1, -0.5, 0.9, 0.3]).unwrap();
    let ctx1 = Tensor::from_vec(vec![1, 2, 2], vec![0.7, 0.7, 0.7, 0.7]).unwrap();
    let c0 = tape.constant(&ctx0).unwrap();
    let c1 = tape.constant(&ctx1).unwrap();
    let zero_flow = tape.constant(&Tensor::zeros(&[2, 2, 2])).unwrap();
    let w0 = tape.bilinear_sample(c0, zero_flow).unwrap();
    let w1 = tape.bilinear_sample(c1, zero_flow).unwrap();
    let mut mask_data = vec![0.0; 8];
    mask_data[..4].fill(1.0);
    let masks = tape
        .constant(&Tensor::from_vec(vec![2, 2, 2], mask_data).unwrap())
        .unwrap();
    let out = composite(&mut tape, &[w0, w1], None, masks).unwrap();
    assert_eq!(tape.value(out), ctx0.data());
}

#[test]
fn predict_is_pure_given_inputs() {
    let cfg = small_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = Predictor::new(cfg.clone(), &mut rng).unwrap();
    let frames = frames_in_range(&cfg, 4);
    let a = model.predict_frames(&[&frames[0], &frames[1]], None).unwrap();
    let b = model.predict_frames(&[&frames[0], &frames[1]], None).unwrap();
    assert_eq!(a.composited, b.composited);
    assert_eq!(a.masks, b.masks);
}

#[test]
fn predictor_gradients_match_finite_differences() {
    // tiny variational model so the full parameter vector is FD-checkable
    let cfg = PredictorConfig {
        frame_size: (8, 8, 1),
        context_count: 1,
        code_dim: 4,
        latent_dim: 2,
        widths: vec![3, 4],
        use_vae: true,
        use_new_pixels: true,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = Predictor::new(cfg.clone(), &mut rng).unwrap();
    let ctx = Tensor::randn(&[1, 8, 8], 0.4, &mut rng);
    let target = Tensor::randn(&[1, 8, 8], 0.4, &mut rng);
    let z = Tensor::randn(&[2], 1.0, &mut rng);

    // flatten all parameters into one vector and check d(l1)/d(params)
    let flat: Vec<f64> = model.params.iter().flat_map(|(_, t)| t.data().to_vec()).collect();
    let flat = Tensor::from_vec(vec![flat.len()], flat).unwrap();
    let shapes: Vec<(String, Vec<usize>)> = model
        .params
        .iter()
        .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
        .collect();
    let cfg2 = cfg.clone();
    let (ctx2, tgt2, z2) = (ctx.clone(), target.clone(), z.clone());
    let f = move |tape: &mut Tape, flat_id: crate::autodiff::TensorId| {
        // rebuild the model around the flat parameter leaf
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = Predictor::new(cfg2.clone(), &mut rng)?;
        let mut ids = Vec::new();
        let mut off = 0usize;
        for (_, shape) in &shapes {
            let numel: usize = shape.iter().product();
            let slice = tape.narrow(flat_id, 0, off, numel)?;
            ids.push(tape.reshape(slice, shape)?);
            off += numel;
        }
        let bound = Bound { ids };
        let c = tape.constant(&ctx2)?;
        let zi = tape.constant(&z2)?;
        let out = model.predict(tape, &bound, &[c], Some(zi))?;
        let t = tape.constant(&tgt2)?;
        crate::taploss::l1_mean(tape, out.composited, t)
    };
    let report = grad_check(&f, &flat, 1e-4, 1e-3).unwrap();
    assert!(
        report.pass(),
        "max rel err {} over {} params",
        report.max_rel_err,
        report.checked
    );
}

#[test]
fn discriminator_outputs_probabilities_deterministically() {
    let cfg = small_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let disc = Discriminator::new(&cfg, 5, &mut rng).unwrap();
    let frames = frames_in_range(&cfg, 8);
    let probs = disc.discriminate(&[&frames[0], &frames[1]], &frames[2]).unwrap();
    assert_eq!(probs.shape(), &[5]);
    assert!(probs.data().iter().all(|&p| p > 0.0 && p < 1.0));
    let again = disc.discriminate(&[&frames[0], &frames[1]], &frames[2]).unwrap();
    assert_eq!(probs, again);
}

#[test]
fn inference_net_shapes_and_nonnegative_kl() {
    let mut cfg = small_cfg();
    cfg.use_vae = true;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let video_len = 6;
    let inf = InferenceNet::new(&cfg, video_len, &mut rng).unwrap();
    let (h, w, c) = cfg.frame_size;
    let zeros: Vec<Tensor> = (0..video_len).map(|_| Tensor::zeros(&[c, h, w])).collect();
    let refs: Vec<&Tensor> = zeros.iter().collect();
    let post = inf.infer_posterior(&refs).unwrap();
    assert_eq!(post.mean.numel(), cfg.latent_dim);
    assert_eq!(post.log_variance.numel(), cfg.latent_dim);
    assert!(post.mean.data().iter().all(|v| v.is_finite()));
    assert!(post.log_variance.data().iter().all(|v| v.is_finite()));

    let mut tape = Tape::new();
    let mu = tape.constant(&post.mean).unwrap();
    let lv = tape.constant(&post.log_variance).unwrap();
    let kl = kl_standard_normal(&mut tape, mu, lv).unwrap();
    assert!(tape.item(kl) >= 0.0);

    // wrong frame count is rejected
    let short: Vec<&Tensor> = zeros.iter().take(3).collect();
    assert!(inf.infer_posterior(&short).is_err());
}

#[test]
fn latent_sampling_reparameterizes() {
    let mu = Tensor::from_vec(vec![3], vec![0.4, -0.2, 1.0]).unwrap();
    let noise = Tensor::from_vec(vec![3], vec![0.5, -1.5, 0.25]).unwrap();

    // variance -> 0 collapses the sample onto the mean
    let tight = LatentPosterior {
        mean: mu.clone(),
        log_variance: Tensor::full(&[3], -40.0),
    };
    let z = sample_latent_value(&tight, &noise).unwrap();
    for (a, b) in z.data().iter().zip(mu.data()) {
        assert!((a - b).abs() < 1e-8);
    }

    // standard-normal prior passes the noise through
    let prior = LatentPosterior {
        mean: Tensor::zeros(&[3]),
        log_variance: Tensor::zeros(&[3]),
    };
    let z = sample_latent_value(&prior, &noise).unwrap();
    assert_eq!(z, noise);

    // d sum(z) / d mu = 1
    let mut tape = Tape::new();
    let mu_id = tape.leaf(&mu, true).unwrap();
    let lv_id = tape.leaf(&Tensor::zeros(&[3]), true).unwrap();
    let z = sample_latent(&mut tape, mu_id, lv_id, &noise).unwrap();
    let s = tape.sum_all(z).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(mu_id).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn default_desk_config_is_under_budget() {
    let cfg = PredictorConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let gen = Predictor::new(cfg.clone(), &mut rng).unwrap();
    let disc = Discriminator::new(&cfg, 13, &mut rng).unwrap();
    let disc2 = Discriminator::new(&cfg, 13, &mut rng).unwrap();
    let inf = InferenceNet::new(&cfg, 15, &mut rng).unwrap();
    let total = gen.params.numel() + disc.params.numel() + disc2.params.numel() + inf.params.numel();
    assert!(total < 500_000, "parameter count {} exceeds budget", total);
}

#[test]
fn z_arity_is_enforced() {
    let mut cfg = small_cfg();
    cfg.use_vae = true;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let model = Predictor::new(cfg.clone(), &mut rng).unwrap();
    let frames = frames_in_range(&cfg, 14);
    // missing z
    assert!(model.predict_frames(&[&frames[0], &frames[1]], None).is_err());
    // wrong z length
    let bad = Tensor::zeros(&[cfg.latent_dim + 1]);
    assert!(model
        .predict_frames(&[&frames[0], &frames[1]], Some(&bad))
        .is_err());
    // non-variational model rejects z
    let det = Predictor::new(small_cfg(), &mut rng).unwrap();
    let z = Tensor::zeros(&[3]);
    assert!(det.predict_frames(&[&frames[0], &frames[1]], Some(&z)).is_err());
}

#[test]
fn checkpoint_roundtrip_and_corruption() {
    use std::io::{Read, Seek, SeekFrom, Write};
    let cfg = small_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let model = Predictor::new(cfg.clone(), &mut rng).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");

    #[derive(serde::Serialize, serde::Deserialize, PartialEq, Debug)]
    struct Meta {
        t_len: usize,
        tag: String,
    }
    let meta = Meta {
        t_len: 15,
        tag: "unit".into(),
    };
    write_checkpoint(&path, &meta, &[("gen", &model.params)]).unwrap();

    let (meta2, sections): (Meta, _) = read_checkpoint(&path).unwrap();
    assert_eq!(meta, meta2);
    assert_eq!(sections.len(), 1);
    assert_eq!(sections[0].0, "gen");
    let loaded = &sections[0].1;
    for (name, tensor) in model.params.iter() {
        assert_eq!(loaded.by_name(name).unwrap(), tensor);
    }

    // wrong magic is rejected
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"NOTACKPTxxxx").unwrap();
    assert!(matches!(
        read_checkpoint::<Meta>(&bad),
        Err(crate::Error::BadMagic { .. })
    ));

    // truncation is rejected
    let f = std::fs::OpenOptions::new().read(true).write(true).open(&path).unwrap();
    let len = f.metadata().unwrap().len();
    f.set_len(len - 16).unwrap();
    drop(f);
    assert!(matches!(
        read_checkpoint::<Meta>(&path),
        Err(crate::Error::Truncated { .. })
    ));

    // flipping a payload byte changes a parameter (format has no checksum;
    // the dataset format carries CRCs, checkpoints rely on determinism)
    let path2 = dir.path().join("model2.ckpt");
    write_checkpoint(&path2, &meta, &[("gen", &model.params)]).unwrap();
    let mut f = std::fs::OpenOptions::new().read(true).write(true).open(&path2).unwrap();
    f.seek(SeekFrom::End(-4)).unwrap();
    let mut b = [0u8; 1];
    f.read_exact(&mut b).unwrap();
    f.seek(SeekFrom::End(-4)).unwrap();
    f.write_all(&[b[0] ^ 0xff]).unwrap();
    drop(f);
    let (_, sections2): (Meta, _) = read_checkpoint(&path2).unwrap();
    let last_orig = model.params.iter().last().unwrap();
    let last_loaded = sections2[0].1.by_name(last_orig.0).unwrap();
    assert_ne!(last_loaded, last_orig.1);
}
