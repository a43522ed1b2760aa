//! Seeded task sampling and rule-based draft corruption.

use rand::seq::IndexedRandom;
use rand::Rng;

use super::prompt::{Category, Constraint, PromptSpec, Relation};
use super::reward::reward;
use super::scene::{Scene, Slot, WorldConfig};
use crate::numerics::rng::{derive_seed, rng_from};

const LOW_BAND: (f64, f64) = (0.1, 0.35);
const HIGH_BAND: (f64, f64) = (0.65, 0.9);
const MAX_CORRUPT_ATTEMPTS: u64 = 64;

fn uniform(rng: &mut impl Rng, band: (f64, f64)) -> f64 {
    rng.random_range(band.0..band.1)
}

fn distinct_colors(rng: &mut impl Rng, n_colors: usize, n: usize) -> Vec<usize> {
    let all: Vec<usize> = (0..n_colors).collect();
    all.choose_multiple(rng, n).copied().collect()
}

/// `n` x-coordinates, one per equal-width band of `[0.1, 0.9]`, ascending.
fn spread_x(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let width = 0.8 / n as f64;
    (0..n).map(|i| 0.1 + width * (i as f64 + 0.15) + rng.random::<f64>() * width * 0.7).collect()
}

fn place(world: &WorldConfig, objects: Vec<(usize, f64, f64)>) -> Scene {
    let mut objects = objects;
    objects.sort_by(|a, b| a.1.total_cmp(&b.1));
    let mut scene = Scene::empty(world);
    for (slot, (color, x, y)) in scene.slots.iter_mut().zip(objects) {
        *slot = Slot::object(world.n_colors, color, x, y);
    }
    scene
}

/// A prompt of `category` and a reference scene that satisfies it exactly.
/// Reference scenes hold only the required objects, in slots ordered left
/// to right; the remaining slots are canonical absent slots.
pub fn sample_task(world: &WorldConfig, seed: u64, category: Category) -> (PromptSpec, Scene) {
    assert!(world.n_colors >= 2 && world.k_slots >= 3, "world too small for every category");
    let mut rng = rng_from(seed, &[0x7a5c, category.index() as u64]);
    let r = &mut rng;
    let (constraints, objects) = match category {
        Category::SingleObject | Category::Colors => {
            let c = r.random_range(0..world.n_colors);
            let obj = vec![(c, uniform(r, (0.1, 0.9)), uniform(r, (0.1, 0.9)))];
            let cons = if category == Category::Colors {
                Constraint::ColorOf { rank: 0, color: c }
            } else {
                Constraint::Exists { color: c }
            };
            (vec![cons], obj)
        }
        Category::TwoObject => {
            let cs = distinct_colors(r, world.n_colors, 2);
            let xs = spread_x(r, 2);
            let objs = cs.iter().zip(xs).map(|(&c, x)| (c, x, uniform(r, (0.1, 0.9)))).collect();
            (cs.iter().map(|&color| Constraint::Exists { color }).collect(), objs)
        }
        Category::Counting => {
            let c = r.random_range(0..world.n_colors);
            let n = r.random_range(2..=3.min(world.k_slots));
            let xs = spread_x(r, n);
            let objs = xs.into_iter().map(|x| (c, x, uniform(r, (0.1, 0.9)))).collect();
            (vec![Constraint::Count { color: c, n }], objs)
        }
        Category::Position => {
            let cs = distinct_colors(r, world.n_colors, 2);
            let rel = Relation::ALL[r.random_range(0..4)];
            let (a_band, b_band) = match rel {
                Relation::LeftOf | Relation::Below => (LOW_BAND, HIGH_BAND),
                Relation::RightOf | Relation::Above => (HIGH_BAND, LOW_BAND),
            };
            let (pa, pb) = match rel {
                Relation::LeftOf | Relation::RightOf => {
                    ((uniform(r, a_band), uniform(r, (0.1, 0.9))), (uniform(r, b_band), uniform(r, (0.1, 0.9))))
                }
                Relation::Above | Relation::Below => {
                    ((uniform(r, (0.1, 0.9)), uniform(r, a_band)), (uniform(r, (0.1, 0.9)), uniform(r, b_band)))
                }
            };
            let objs = vec![(cs[0], pa.0, pa.1), (cs[1], pb.0, pb.1)];
            (vec![Constraint::Relation { a: cs[0], b: cs[1], rel }], objs)
        }
        Category::ColorAttr => {
            let cs = distinct_colors(r, world.n_colors, 2);
            let objs = vec![
                (cs[0], uniform(r, LOW_BAND), uniform(r, (0.1, 0.9))),
                (cs[1], uniform(r, HIGH_BAND), uniform(r, (0.1, 0.9))),
            ];
            let cons = vec![Constraint::ColorOf { rank: 0, color: cs[0] }, Constraint::ColorOf { rank: 1, color: cs[1] }];
            (cons, objs)
        }
    };
    let spec = PromptSpec::new(category, constraints).expect("template arity matches category");
    (spec, place(world, objects))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Edit {
    Drop,
    SwapColor,
    SwapPosition,
}

fn apply_edit(world: &WorldConfig, scene: &mut Scene, edit: Edit, rng: &mut impl Rng) {
    let present: Vec<usize> = scene.present().map(|(i, _)| i).collect();
    if present.is_empty() {
        return;
    }
    match edit {
        Edit::Drop => {
            let i = *present.choose(rng).expect("non-empty");
            scene.slots[i] = Slot::absent(world.n_colors);
        }
        Edit::SwapColor => {
            let pairs: Vec<(usize, usize)> = present
                .iter()
                .flat_map(|&i| present.iter().map(move |&j| (i, j)))
                .filter(|&(i, j)| i < j && scene.slots[i].argmax_color() != scene.slots[j].argmax_color())
                .collect();
            if let Some(&(i, j)) = pairs.choose(rng) {
                let ci = scene.slots[i].color.clone();
                scene.slots[i].color = std::mem::replace(&mut scene.slots[j].color, ci);
            } else {
                let i = *present.choose(rng).expect("non-empty");
                let old = scene.slots[i].argmax_color();
                let new = (old + rng.random_range(1..world.n_colors)) % world.n_colors;
                let (x, y) = (scene.slots[i].x, scene.slots[i].y);
                scene.slots[i] = Slot::object(world.n_colors, new, x, y);
            }
        }
        Edit::SwapPosition => {
            if present.len() >= 2 {
                let pick: Vec<usize> = present.choose_multiple(rng, 2).copied().collect();
                let (i, j) = (pick[0], pick[1]);
                let (xi, yi) = (scene.slots[i].x, scene.slots[i].y);
                scene.slots[i].x = scene.slots[j].x;
                scene.slots[i].y = scene.slots[j].y;
                scene.slots[j].x = xi;
                scene.slots[j].y = yi;
            } else {
                let s = &mut scene.slots[present[0]];
                s.x = 1.0 - s.x;
                s.y = 1.0 - s.y;
            }
        }
    }
}

/// An imperfect candidate derived from `reference` by one or two edits
/// (drop a slot, swap colors, swap positions). The result violates at least
/// one constraint of `spec`; attempts are re-drawn from sub-seeds until it
/// does, and dropping the first present slot is the final fallback.
pub fn corrupt(world: &WorldConfig, spec: &PromptSpec, reference: &Scene, seed: u64) -> Scene {
    const EDITS: [Edit; 3] = [Edit::Drop, Edit::SwapColor, Edit::SwapPosition];
    for attempt in 0..MAX_CORRUPT_ATTEMPTS {
        let mut rng = rng_from(derive_seed(seed, &[0xc0de]), &[attempt]);
        let n_edits = if rng.random_bool(0.75) { 1 } else { 2 };
        let mut draft = reference.clone();
        for _ in 0..n_edits {
            let edit = *EDITS.choose(&mut rng).expect("non-empty");
            apply_edit(world, &mut draft, edit, &mut rng);
        }
        if spec.constraints.is_empty() || reward(world, spec, &draft) < 1.0 {
            return draft;
        }
    }
    let mut draft = reference.clone();
    if let Some((i, _)) = reference.present().next() {
        draft.slots[i] = Slot::absent(world.n_colors);
    }
    draft
}
