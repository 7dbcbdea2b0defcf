//! Finite-difference check of the full toy network under the self-distillation loss.

use cdnet::config::CDNetConfig;
use cdnet::gradcheck::grad_samples;
use cdnet::model::Arch;
use cdnet::nn::Bound;
use cdnet::pyramid::gen_synthetic;
use cdnet::ssl::{augment_pair, dino_loss, AugmentationPolicy, DinoNet, HeadConfig};
use cdnet::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Perturbs every parameter so zero-initialized branches carry gradient too.
fn randomized(store: &cdnet::nn::ParamStore, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    store
        .iter()
        .map(|(_, t)| {
            let noise = Tensor::randn(t.shape(), 0.1, &mut rng);
            let mut out = t.clone();
            out.add_assign(&noise);
            out
        })
        .collect()
}

#[test]
fn full_network_dino_gradient_matches_finite_differences() {
    let cfg = CDNetConfig::toy();
    let head = HeadConfig {
        hidden: 16,
        bottleneck: 8,
        k: 12,
    };
    let (net, store) = DinoNet::init(cfg, Arch::CdNet, head, 5).unwrap();
    let params = randomized(&store, 6);
    let slide = gen_synthetic(3, 1, 128, 4).unwrap();
    let pair = cdnet::pyramid::tile(&slide, cfg.patch_px() as u32).unwrap().swap_remove(3);
    let (v1, v2) = augment_pair(&pair, &AugmentationPolicy::default(), 9);
    let mut teacher = store.clone();
    for (i, t) in randomized(&store, 8).into_iter().enumerate() {
        *teacher.tensor_mut(i) = t;
    }
    let t1 = net.infer_logits(&teacher, &v1).unwrap();
    let t2 = net.infer_logits(&teacher, &v2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let center = Tensor::from_vec(&[head.k], (0..head.k).map(|_| rng.random_range(-0.1..0.1)).collect());

    let samples = grad_samples(
        |g, ids| {
            let p = Bound::from_nodes(ids.to_vec());
            let s1 = net.logits(g, &p, &v1)?;
            let s2 = net.logits(g, &p, &v2)?;
            let c1 = g.constant(t1.reshape(&[1, head.k])?);
            let c2 = g.constant(t2.reshape(&[1, head.k])?);
            let a = dino_loss(g, s1, c2, 0.1, 0.04, &center)?;
            let b = dino_loss(g, s2, c1, 0.1, 0.04, &center)?;
            let both = g.add(a, b)?;
            Ok(g.scale(both, 0.5))
        },
        &params,
        1e-5,
        40,
        11,
    )
    .unwrap();
    let nonzero = samples.iter().filter(|s| s.analytic.abs() > 1e-6).count();
    assert!(nonzero >= 20, "only {nonzero} informative coordinates");
    for s in &samples {
        assert!(
            s.rel_error <= 1e-4,
            "param {} index {}: analytic {} numeric {} (rel {})",
            store.name(s.param),
            s.index,
            s.analytic,
            s.numeric,
            s.rel_error
        );
    }
}
