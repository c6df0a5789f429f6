use udcn::data::{generate_glyph_benchmark, BatchIterator, Dataset, GlyphCounts, GlyphSpec};

fn centroids(data: &Dataset) -> Vec<Vec<f64>> {
    let labels = data.labels().unwrap();
    let dim = data.images[0].pixels().len();
    let mut sums = vec![vec![0.0; dim]; data.classes];
    let mut counts = vec![0usize; data.classes];
    for (img, &y) in data.images.iter().zip(labels) {
        for (s, p) in sums[y].iter_mut().zip(img.pixels()) {
            *s += p;
        }
        counts[y] += 1;
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= n as f64);
    }
    sums
}

fn nearest_centroid_accuracy(cents: &[Vec<f64>], data: &Dataset) -> f64 {
    let labels = data.labels().unwrap();
    let mut correct = 0;
    for (img, &y) in data.images.iter().zip(labels) {
        let mut best = (usize::MAX, f64::INFINITY);
        for (k, c) in cents.iter().enumerate() {
            let d: f64 = c.iter().zip(img.pixels()).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        correct += usize::from(best.0 == y);
    }
    correct as f64 / data.len() as f64
}

#[test]
fn counts_and_balance() {
    let spec = GlyphSpec {
        classes: 2,
        ..GlyphSpec::default()
    };
    let counts = GlyphCounts {
        source_train: 10,
        target_train: 10,
        test: 5,
    };
    let bench = generate_glyph_benchmark(&spec, &counts, 3).unwrap();
    assert_eq!(bench.source_train.len(), 20);
    let labels = bench.source_train.labels().unwrap();
    assert_eq!(labels.iter().filter(|&&l| l == 0).count(), 10);
    assert_eq!(bench.target_test.len(), 10);
    for (_, d) in bench.splits() {
        assert!(d
            .images
            .iter()
            .all(|i| i.pixels().iter().all(|p| (0.0..=1.0).contains(p))));
    }
    assert!(!bench.target_train.labels_trainable());
    assert!(bench.source_train.labels_trainable());
}

#[test]
fn same_seed_is_bit_identical() {
    let counts = GlyphCounts {
        source_train: 5,
        target_train: 5,
        test: 2,
    };
    let a = generate_glyph_benchmark(&GlyphSpec::default(), &counts, 11).unwrap();
    let b = generate_glyph_benchmark(&GlyphSpec::default(), &counts, 11).unwrap();
    assert_eq!(a, b);
    let c = generate_glyph_benchmark(&GlyphSpec::default(), &counts, 12).unwrap();
    assert_ne!(a.source_train, c.source_train);
}

#[test]
fn no_shift_target_matches_source_distribution() {
    let spec = GlyphSpec::default().without_shift();
    let counts = GlyphCounts {
        source_train: 3,
        target_train: 3,
        test: 1,
    };
    let bench = generate_glyph_benchmark(&spec, &counts, 5).unwrap();
    let mean = |d: &Dataset| d.images.iter().map(|i| i.mean()).sum::<f64>() / d.len() as f64;
    assert!((mean(&bench.source_train) - mean(&bench.target_train)).abs() < 0.03);
}

#[test]
fn benchmark_is_learnable_and_shifted() {
    let bench = generate_glyph_benchmark(&GlyphSpec::default(), &GlyphCounts::default(), 0).unwrap();
    let cents = centroids(&bench.source_train);
    let src = nearest_centroid_accuracy(&cents, &bench.source_test);
    let tgt = nearest_centroid_accuracy(&cents, &bench.target_test);
    println!("nearest centroid: source {src:.3} target {tgt:.3}");
    assert!(src >= 0.80, "source accuracy {src}");
    assert!(src - tgt >= 0.15, "source {src} target {tgt}");
}

#[test]
fn batch_indices_cover_shuffled_prefix() {
    let (n, b) = (23, 5);
    let mut it = BatchIterator::new(n, b, 77).unwrap();
    let order = it.epoch_order(0);
    let mut seen: Vec<usize> = (0..n / b).flat_map(|_| it.next_batch()).collect();
    let mut expect = order[..(n / b) * b].to_vec();
    seen.sort_unstable();
    expect.sort_unstable();
    assert_eq!(seen, expect);
    let again: Vec<Vec<usize>> = BatchIterator::new(n, b, 77).unwrap().take(9).collect();
    let other: Vec<Vec<usize>> = BatchIterator::new(n, b, 77).unwrap().take(9).collect();
    assert_eq!(again, other);
    assert_ne!(it.epoch_order(1), order);
}
