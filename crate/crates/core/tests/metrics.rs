mod common;

use common::{psnr_oracle, ssim_oracle};
use dualformer::metrics::{psnr, ssim};
use dualformer::{Rng, Shape, Tensor};

#[test]
fn psnr_and_ssim_match_definitions_on_random_pairs() {
    let root = Rng::new(2024);
    for i in 0..50 {
        let mut rng = root.split_index("pair", i);
        let h = 11 + (rng.next_u64() % 6) as usize;
        let w = 11 + (rng.next_u64() % 6) as usize;
        let shape = Shape::new(1, 1 + (i as usize % 3), h, w);
        let a: Tensor<f64> = rng.uniform_tensor(shape, 0.0, 1.0);
        let noise: Tensor<f64> = rng.uniform_tensor(shape, -0.2, 0.2);
        let b = a.add(&noise).unwrap().map(|v| v.clamp(0.0, 1.0));
        assert!((psnr(&a, &b, 1.0).unwrap() - psnr_oracle(&a, &b)).abs() < 1e-8);
        assert!((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs() < 1e-8);
    }
}

#[test]
fn ssim_of_self_is_one() {
    let a: Tensor<f64> = Rng::new(3).uniform_tensor(Shape::new(1, 3, 20, 20), 0.0, 1.0);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn uniform_offset_gives_twenty_db() {
    let a = Tensor::<f64>::full(Shape::new(1, 3, 8, 8), 0.25);
    let b = a.map(|v| v + 0.1);
    assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-12);
    assert!(psnr(&a, &b, 1.0).unwrap() >= 0.0);
}
