//! Seeded synthetic image datasets for experiments and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Split};
use crate::tensor::Tensor;

pub const SHAPE_CLASSES: [&str; 5] = ["disk", "square", "triangle", "cross", "stripes"];

fn inside(class: usize, dy: f64, dx: f64, size: f64) -> bool {
    match class {
        0 => dy * dy + dx * dx <= size * size,
        1 => dy.abs() <= size * 0.85 && dx.abs() <= size * 0.85,
        2 => {
            // apex up, base at +size
            let t = (dy + size) / (2.0 * size);
            (0.0..=1.0).contains(&t) && dx.abs() <= t * size
        }
        3 => {
            let arm = size * 0.3;
            (dy.abs() <= arm && dx.abs() <= size) || (dx.abs() <= arm && dy.abs() <= size)
        }
        _ => {
            let band = ((dy + size) / (size / 2.5)).floor() as i64;
            dy.abs() <= size && dx.abs() <= size && band % 2 == 0
        }
    }
}

fn bright_color(rng: &mut impl Rng) -> [f64; 3] {
    let mut c = [
        rng.gen_range(0.3..1.0),
        rng.gen_range(0.3..1.0),
        rng.gen_range(0.3..1.0),
    ];
    let k = rng.gen_range(0..3);
    c[k] = rng.gen_range(0.85..1.0);
    c
}

/// Five classes of filled shapes (disk, square, triangle, cross, stripes) at a
/// random position, size and colour over a dark noisy background.
/// `per_class` images of each class, interleaved by class.
pub fn shapes_dataset(size: usize, per_class: usize, seed: u64, split: Split) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(per_class * SHAPE_CLASSES.len());
    let mut labels = Vec::with_capacity(images.capacity());
    let s = size as f64;
    for _ in 0..per_class {
        for class in 0..SHAPE_CLASSES.len() {
            let radius = rng.gen_range(0.22 * s..0.34 * s);
            let cy = rng.gen_range(radius..s - radius);
            let cx = rng.gen_range(radius..s - radius);
            let fg = bright_color(&mut rng);
            let bg = [
                rng.gen_range(0.0..0.25),
                rng.gen_range(0.0..0.25),
                rng.gen_range(0.0..0.25),
            ];
            let mut data = Vec::with_capacity(size * size * 3);
            for y in 0..size {
                for x in 0..size {
                    let hit = inside(class, y as f64 + 0.5 - cy, x as f64 + 0.5 - cx, radius);
                    let base = if hit { fg } else { bg };
                    for ch in base {
                        data.push((ch + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0));
                    }
                }
            }
            images.push(Tensor::new(vec![size, size, 3], data).expect("image shape"));
            labels.push(class);
        }
    }
    Dataset {
        images,
        labels,
        class_names: SHAPE_CLASSES.iter().map(|s| s.to_string()).collect(),
        split,
    }
}

/// Two classes: a Gaussian blob in the red channel (class 0) or in the blue
/// channel (class 1), at a random position.
pub fn blobs_dataset(size: usize, per_class: usize, seed: u64, split: Split) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let s = size as f64;
    for _ in 0..per_class {
        for class in 0..2 {
            let sigma = rng.gen_range(0.12 * s..0.2 * s);
            let cy = rng.gen_range(0.25 * s..0.75 * s);
            let cx = rng.gen_range(0.25 * s..0.75 * s);
            let channel = if class == 0 { 0 } else { 2 };
            let mut data = Vec::with_capacity(size * size * 3);
            for y in 0..size {
                for x in 0..size {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    let blob = (-d2 / (2.0 * sigma * sigma)).exp();
                    for ch in 0..3 {
                        let base = if ch == channel { blob } else { 0.1 * blob };
                        data.push((base + rng.gen_range(0.0..0.1)).clamp(0.0, 1.0));
                    }
                }
            }
            images.push(Tensor::new(vec![size, size, 3], data).expect("image shape"));
            labels.push(class);
        }
    }
    Dataset {
        images,
        labels,
        class_names: vec!["red".into(), "blue".into()],
        split,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_are_seeded_and_balanced() {
        let a = shapes_dataset(32, 4, 5, Split::Train);
        let b = shapes_dataset(32, 4, 5, Split::Train);
        assert_eq!(a, b);
        assert_eq!(a.class_counts(), vec![4; 5]);
        a.validate().unwrap();
        assert!(a
            .images
            .iter()
            .all(|im| im.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn blobs_have_two_classes() {
        let d = blobs_dataset(16, 3, 1, Split::Test);
        assert_eq!(d.class_counts(), vec![3, 3]);
    }
}
