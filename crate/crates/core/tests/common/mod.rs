//! Fixtures shared by several test targets.

use std::path::PathBuf;

use udcn::augment::{strong_augment, GrayImage, SeededRng, StrongPolicy};

/// Smooth off-centre blob on a `size × size` grid. Built from IEEE basic
/// arithmetic only, so the pixels are identical on every platform.
pub fn blob(size: usize) -> GrayImage {
    let c = (size as f64 - 1.0) / 2.0;
    let px = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64, (i % size) as f64);
            let r2 = (y - c + 1.5).powi(2) + 0.6 * (x - c - 1.0).powi(2);
            1.0 / (1.0 + r2 / size as f64)
        })
        .collect();
    GrayImage::from_clamped(size, size, px)
}

pub fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/strong_seed42.txt")
}

/// Four consecutive strong views of `blob(16)` from seed 42, one row of
/// hex-encoded f64 bit patterns per image row.
pub fn golden_raster() -> String {
    let img = blob(16);
    let policy = StrongPolicy::default();
    let mut rng = SeededRng::new(42);
    let mut out = String::new();
    for k in 0..4 {
        let aug = strong_augment(&img, &policy, &mut rng);
        out.push_str(&format!("# view {k}\n"));
        for row in aug.pixels().chunks(16) {
            let line: Vec<String> = row.iter().map(|p| format!("{:016x}", p.to_bits())).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
    }
    out
}
