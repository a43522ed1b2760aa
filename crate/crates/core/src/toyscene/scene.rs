//! Scenes: a fixed number of object slots, each with a presence weight, a
//! point on the color simplex and a 2-D position in the unit square.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::{normal_tensor, rng_from};
use crate::numerics::Tensor;

/// Dimensions and tolerances of the toy world.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub k_slots: usize,
    pub n_colors: usize,
    /// Strict margin for spatial relations.
    pub relation_margin: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self { k_slots: 4, n_colors: 6, relation_margin: 0.05 }
    }
}

impl WorldConfig {
    /// Features per slot: presence, colors, x, y.
    pub fn slot_width(&self) -> usize {
        1 + self.n_colors + 2
    }

    /// Length of the flat scene vector.
    pub fn flat_dim(&self) -> usize {
        self.k_slots * self.slot_width()
    }
}

pub const COLOR_NAMES: [&str; 8] = ["red", "green", "blue", "yellow", "purple", "orange", "white", "black"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub presence: f64,
    pub color: Vec<f64>,
    pub x: f64,
    pub y: f64,
}

impl Slot {
    pub fn absent(n_colors: usize) -> Self {
        Self { presence: 0.0, color: vec![1.0 / n_colors as f64; n_colors], x: 0.0, y: 0.0 }
    }

    pub fn object(n_colors: usize, color: usize, x: f64, y: f64) -> Self {
        let mut c = vec![0.0; n_colors];
        c[color] = 1.0;
        Self { presence: 1.0, color: c, x, y }
    }

    pub fn is_present(&self) -> bool {
        self.presence > 0.5
    }

    /// Index of the largest color weight (first on ties).
    pub fn argmax_color(&self) -> usize {
        let mut best = 0;
        for (i, w) in self.color.iter().enumerate() {
            if *w > self.color[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub slots: Vec<Slot>,
}

impl Scene {
    pub fn empty(world: &WorldConfig) -> Self {
        Self { slots: (0..world.k_slots).map(|_| Slot::absent(world.n_colors)).collect() }
    }

    pub fn validate(&self, world: &WorldConfig) -> Result<()> {
        if self.slots.len() != world.k_slots {
            return Err(Error::Shape(format!("scene has {} slots, expected {}", self.slots.len(), world.k_slots)));
        }
        for (i, s) in self.slots.iter().enumerate() {
            if s.color.len() != world.n_colors {
                return Err(Error::Shape(format!("slot {i} has {} colors", s.color.len())));
            }
            let unit = |v: f64| (0.0..=1.0).contains(&v);
            if !(unit(s.presence) && unit(s.x) && unit(s.y)) {
                return Err(Error::InvalidArgument(format!("slot {i} presence/position outside [0, 1]")));
            }
            if s.color.iter().any(|w| *w < 0.0) || (s.color.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!("slot {i} color is not on the simplex")));
            }
        }
        Ok(())
    }

    pub fn present(&self) -> impl Iterator<Item = (usize, &Slot)> {
        self.slots.iter().enumerate().filter(|(_, s)| s.is_present())
    }

    pub fn present_count(&self) -> usize {
        self.present().count()
    }

    /// Per-slot feature rows `[presence ‖ color ‖ x, y]`.
    pub fn features(&self) -> Tensor {
        let width = self.slots.first().map_or(0, |s| s.color.len() + 3);
        let mut data = Vec::with_capacity(self.slots.len() * width);
        for s in &self.slots {
            data.push(s.presence);
            data.extend_from_slice(&s.color);
            data.push(s.x);
            data.push(s.y);
        }
        Tensor::from_parts(self.slots.len(), width, data)
    }
}

/// Canonical flat vector: slot-major concatenation of [`Scene::features`].
pub fn encode_flat(scene: &Scene) -> Vec<f64> {
    scene.features().into_data()
}

/// Frozen random linear map from slot features to perception tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneEncoder {
    pub map: Tensor,
}

impl SceneEncoder {
    pub const SEED: u64 = 0;

    pub fn new(world: &WorldConfig, token_dim: usize) -> Self {
        let width = world.slot_width();
        let mut rng = rng_from(Self::SEED, &[0x5ce0e]);
        Self { map: normal_tensor(&mut rng, width, token_dim, 1.0 / (width as f64).sqrt()) }
    }

    pub fn from_map(map: Tensor) -> Self {
        Self { map }
    }

    /// `(flat, tokens)`: the flat scene vector and one token row per slot.
    pub fn encode(&self, scene: &Scene) -> (Vec<f64>, Tensor) {
        let features = scene.features();
        let tokens = features.matmul(&self.map);
        (features.into_data(), tokens)
    }
}

/// Euclidean projection onto the probability simplex: `max(v − τ, 0)` with
/// the shift `τ` chosen so the result sums to one. Points already on the
/// simplex are returned unchanged.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut tau = 0.0;
    for (i, u) in sorted.iter().enumerate() {
        cumulative += u;
        let t = (cumulative - 1.0) / (i + 1) as f64;
        if u - t > 0.0 {
            tau = t;
        }
    }
    v.iter().map(|x| (x - tau).max(0.0)).collect()
}

/// Total decoder: any real vector of the right length maps to a valid scene.
pub fn decode_scene(world: &WorldConfig, flat: &[f64]) -> Result<Scene> {
    if flat.len() != world.flat_dim() {
        return Err(Error::Shape(format!("flat scene has length {}, expected {}", flat.len(), world.flat_dim())));
    }
    let w = world.slot_width();
    let clip = |v: f64| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    let slots = flat
        .chunks(w)
        .map(|c| {
            let colors: Vec<f64> = c[1..1 + world.n_colors].iter().map(|v| if v.is_finite() { *v } else { 0.0 }).collect();
            Slot { presence: clip(c[0]), color: project_simplex(&colors), x: clip(c[w - 2]), y: clip(c[w - 1]) }
        })
        .collect();
    Ok(Scene { slots })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_scene(world: &WorldConfig, seed: u64) -> Scene {
        use rand::Rng;
        let mut rng = rng_from(seed, &[]);
        let slots = (0..world.k_slots)
            .map(|_| {
                if rng.random_bool(0.6) {
                    Slot::object(world.n_colors, rng.random_range(0..world.n_colors), rng.random(), rng.random())
                } else {
                    Slot::absent(world.n_colors)
                }
            })
            .collect();
        Scene { slots }
    }

    #[test]
    fn flat_dim_identity() {
        let w = WorldConfig::default();
        assert_eq!(w.flat_dim(), w.k_slots * (1 + w.n_colors + 2));
        assert_eq!(encode_flat(&Scene::empty(&w)).len(), 36);
    }

    #[test]
    fn zeros_decode_to_empty_uniform_scene() {
        let w = WorldConfig::default();
        let s = decode_scene(&w, &vec![0.0; w.flat_dim()]).unwrap();
        for slot in &s.slots {
            assert_eq!(slot.presence, 0.0);
            assert_eq!((slot.x, slot.y), (0.0, 0.0));
            for c in &slot.color {
                assert!((c - 1.0 / 6.0).abs() < 1e-12);
            }
        }
        assert!(decode_scene(&w, &[0.0; 5]).is_err());
    }

    #[test]
    fn distinct_scenes_have_distinct_flats() {
        let w = WorldConfig::default();
        for seed in 0..200u64 {
            let (a, b) = (sample_scene(&w, seed), sample_scene(&w, seed + 1000));
            if a != b {
                assert_ne!(encode_flat(&a), encode_flat(&b));
            }
        }
    }

    #[test]
    fn encoder_is_deterministic() {
        let w = WorldConfig::default();
        let enc = SceneEncoder::new(&w, 16);
        let s = sample_scene(&w, 3);
        assert_eq!(enc.encode(&s), SceneEncoder::new(&w, 16).encode(&s));
        assert_eq!(enc.encode(&s).1.shape(), [4, 16]);
    }

    proptest! {
        #[test]
        fn round_trip_on_valid_scenes(seed in any::<u64>()) {
            let w = WorldConfig::default();
            let s = sample_scene(&w, seed);
            let back = decode_scene(&w, &encode_flat(&s)).unwrap();
            for (a, b) in encode_flat(&s).iter().zip(encode_flat(&back)) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }

        #[test]
        fn any_vector_decodes_to_a_valid_scene(v in proptest::collection::vec(-5.0f64..5.0, 36)) {
            let w = WorldConfig::default();
            let s = decode_scene(&w, &v).unwrap();
            prop_assert!(s.validate(&w).is_ok());
        }
    }
}
