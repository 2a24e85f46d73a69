//! Seeded random weights for a fresh network.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::container::WeightMap;
use crate::error::Result;
use crate::tensor::{Shape, WeightTensor};

/// He-normal weights, `std = sqrt(2 / (kh * kw * in))`. Layers are filled in
/// id order from one stream, so the result depends only on `seed` and shapes.
pub fn init_weights(shapes: &BTreeMap<String, Shape>, seed: u64) -> Result<WeightMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes
        .iter()
        .map(|(id, &shape)| {
            let fan_in = (shape[0] * shape[1] * shape[2]) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            let data = (0..shape.iter().product::<usize>())
                .map(|_| normal.sample(&mut rng) as f32)
                .collect();
            Ok((id.clone(), WeightTensor::new(id.clone(), shape, data)?))
        })
        .collect()
}
