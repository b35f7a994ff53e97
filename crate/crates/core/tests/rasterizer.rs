mod common;

use bubblesplat::config::LossConfig;
use bubblesplat::optim::SupervisedView;
use common::*;

#[test]
fn tiled_render_matches_oracle() {
    let cam = front_camera(64);
    for seed in 0..4 {
        let mut r = rng(100 + seed);
        let surfels = random_surfels(&mut r, 5);
        let (dev, compared) = oracle_deviation(&surfels, 45.0, &cam, 1e-6);
        assert!(compared > 64 * 60, "seed {seed}: only {compared} pixels comparable");
        assert!(dev < 1e-6, "seed {seed}: deviation {dev:e}");
    }
}

#[test]
fn full_loss_gradients_match_central_differences() {
    let cam = front_camera(64);
    let cfg = LossConfig { lambda_app: 1.0, lambda_geo: 1.0, epsilon_proj: 0.1 };
    for seed in 0..3 {
        let mut r = rng(200 + seed);
        let surfels = random_surfels(&mut r, 4);
        let target = target_image(&mut r, &cam);
        let views = [SupervisedView { camera: &cam, target: &target, weight: 1.0 }];
        let check = check_loss_gradients(&surfels, 40.0, &views, &cfg, 1e-5, 1e-3, 1e-6);
        eprintln!("seed {seed}: {check:?}");
        assert!(check.passing as f64 >= 0.99 * check.coordinates as f64, "seed {seed}: {check:?}");
    }
}
