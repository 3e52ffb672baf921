//! Seeded fixtures shared by the benchmarks.

use langgrasp_core::io_formats::{Entry, TensorData};
use langgrasp_core::synthgen::{gen_scene, SceneConfig, SceneRecord};
use langgrasp_core::GraspRect;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` rotated rectangles scattered over a `size`-pixel square.
pub fn random_rects(n: usize, size: f64, seed: u64) -> Vec<GraspRect> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let w = rng.gen_range(4.0..size / 4.0);
            GraspRect::new(
                rng.gen_range(w..size - w),
                rng.gen_range(w..size - w),
                w,
                rng.gen_range(-1.5..1.5),
                w / 2.0,
            )
            .with_score(rng.gen())
        })
        .collect()
}

/// The first scene at or after `seed` that places `n_objects` objects.
pub fn scene(n_objects: usize, image_size: usize, seed: u64) -> SceneRecord {
    (seed..)
        .find_map(|s| gen_scene(s, &SceneConfig::new(n_objects, image_size)).ok())
        .expect("some seed places the objects")
}

/// A container the size of one stored scene: an image, a depth map and masks.
pub fn scene_sized_entries(image_size: usize, seed: u64) -> Vec<Entry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = image_size * image_size;
    vec![
        Entry::new("image", vec![image_size as u32, image_size as u32, 3], TensorData::U8((0..3 * n).map(|_| rng.gen()).collect())),
        Entry::new("depth", vec![image_size as u32, image_size as u32], TensorData::F32((0..n).map(|_| rng.gen()).collect())),
        Entry::new("masks", vec![6, image_size as u32, image_size as u32], TensorData::U8((0..6 * n).map(|_| rng.gen_range(0..2)).collect())),
    ]
}
