#![allow(dead_code)]

pub mod oracle;

use std::path::{Path, PathBuf};

use dasr::cli::{self, ToyNetArgs};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CORPUS_HEIGHT: u32 = 48;
pub const CORPUS_WIDTH: u32 = 64;

/// Dark noisy background with two to four bright rectangles.
pub fn synthetic_image(seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = RgbImage::from_fn(CORPUS_WIDTH, CORPUS_HEIGHT, |_, _| {
        let v = rng.random_range(0..40u8);
        Rgb([v, v, v])
    });
    for _ in 0..rng.random_range(2..5) {
        let (h, w) = (rng.random_range(6..20), rng.random_range(6..24));
        let (y0, x0) = (rng.random_range(0..CORPUS_HEIGHT - h), rng.random_range(0..CORPUS_WIDTH - w));
        let color = Rgb([rng.random_range(120..=255), rng.random_range(0..=255), rng.random_range(60..=255)]);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                img.put_pixel(x, y, color);
            }
        }
    }
    img
}

/// Writes `n` PNGs named `img00.png`, `img01.png`, ...
pub fn write_corpus(dir: &Path, n: usize) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        synthetic_image(i as u64 + 100).save(dir.join(format!("img{i:02}.png"))).unwrap();
    }
}

/// Toy network files in `dir`: `(weights, graph)`.
pub fn toy_net(dir: &Path) -> (PathBuf, PathBuf) {
    cli::run_toy_net(&ToyNetArgs {
        out_dir: dir.to_path_buf(),
        template: "toy".into(),
        seed: 7,
    })
    .unwrap();
    (dir.join("toy.dasr"), dir.join("toy.graph"))
}
