use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use woodprune::io::{encode_idx_images, encode_idx_labels};

/// Writes MNIST-named IDX files with 4x4 images: one noisy prototype per
/// class, 600 training and 200 test examples.
pub fn write_idx_fixture(dir: &Path) {
    let mut rng = ChaCha8Rng::seed_from_u64(113);
    let (side, classes) = (4usize, 10usize);
    let protos: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            (0..side * side)
                .map(|_| rng.random_range(0.0..255.0))
                .collect()
        })
        .collect();
    for (images, labels, n) in [
        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", 600),
        ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", 200),
    ] {
        let mut px = Vec::with_capacity(n * side * side);
        let mut ys = Vec::with_capacity(n);
        for i in 0..n {
            let y = i % classes;
            ys.push(y as u8);
            for &p in &protos[y] {
                let noise: f64 = rng.sample::<f64, _>(StandardNormal) * 40.0;
                px.push((p + noise).clamp(0.0, 255.0) as u8);
            }
        }
        std::fs::write(dir.join(images), encode_idx_images(side, side, &px)).unwrap();
        std::fs::write(dir.join(labels), encode_idx_labels(&ys)).unwrap();
    }
}
