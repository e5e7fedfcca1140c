//! Overfit smoke test: 200 plain gradient-descent steps on one synthetic
//! image must collapse the heatmap MSE by at least two orders of
//! magnitude. The target is a scaled copy of the network's own initial
//! response, which a correct gradient chain can match almost exactly by
//! rescaling; a representation-limited target would hide optimizer bugs
//! behind its fitting floor.

use omnipose_core::model::*;
use omnipose_core::tensor::Tensor;
use omnipose_core::wasp::WaspConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn two_hundred_descent_steps_reduce_the_loss_a_hundredfold() {
    let cfg = ModelConfig {
        backbone: BackboneConfig {
            branches: vec![
                BranchSpec { channels: 16, divisor: 4 },
                BranchSpec { channels: 24, divisor: 8 },
            ],
            num_exchange_blocks: 1,
            ..BackboneConfig::default()
        },
        wasp: WaspConfig {
            dilations: vec![1, 2],
            branch_channels: 16,
            llf_channels: 16,
            num_joints: 2,
            ..WaspConfig::default()
        },
        input_size: (32, 32),
        heatmap_stride: 4,
        seed: 9,
    };
    let mut model = Model::new(cfg.clone()).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(33);
    // The amplitude puts the head features in a regime where the pinned
    // 1e-3 step size makes visible progress within 200 steps.
    let image = Tensor::uniform(vec![1, 3, 32, 32], 300.0, &mut r);
    let target = model.forward(&image).unwrap().map(|v| 2.0 * v);
    let mask = vec![true; cfg.num_joints()];
    let lr = lr_schedule(0);

    let mut initial = None;
    let mut last = f64::INFINITY;
    for _ in 0..200 {
        let (loss, grads) = model.gradients(&image, &target, &mask).unwrap();
        assert!(loss.is_finite());
        initial.get_or_insert(loss);
        last = loss;
        model.sgd_step(&grads, lr).unwrap();
    }
    let initial = initial.unwrap();
    assert!(
        last * 100.0 <= initial,
        "loss only went from {initial:.6e} to {last:.6e} in 200 steps"
    );
}
