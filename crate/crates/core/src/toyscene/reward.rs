//! Programmatic constraint-satisfaction reward.

use super::prompt::{Constraint, PromptSpec, Relation};
use super::scene::{Scene, Slot, WorldConfig};

/// Present slots ordered left to right (ties broken by y, then color), so
/// the order does not depend on slot indices.
pub fn left_to_right(scene: &Scene) -> Vec<&Slot> {
    let mut present: Vec<&Slot> = scene.slots.iter().filter(|s| s.is_present()).collect();
    present.sort_by(|a, b| {
        a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)).then(a.argmax_color().cmp(&b.argmax_color()))
    });
    present
}

pub fn count_color(scene: &Scene, color: usize) -> usize {
    scene.slots.iter().filter(|s| s.is_present() && s.argmax_color() == color).count()
}

pub fn relation_holds(a: &Slot, b: &Slot, rel: Relation, margin: f64) -> bool {
    match rel {
        Relation::LeftOf => a.x + margin < b.x,
        Relation::RightOf => a.x > b.x + margin,
        Relation::Above => a.y > b.y + margin,
        Relation::Below => a.y + margin < b.y,
    }
}

pub fn satisfied(world: &WorldConfig, c: &Constraint, scene: &Scene) -> bool {
    match *c {
        Constraint::Exists { color } => count_color(scene, color) > 0,
        Constraint::Count { color, n } => count_color(scene, color) == n,
        Constraint::ColorOf { rank, color } => {
            left_to_right(scene).get(rank).is_some_and(|s| s.argmax_color() == color)
        }
        Constraint::Relation { a, b, rel } => scene.slots.iter().enumerate().any(|(i, sa)| {
            sa.is_present()
                && sa.argmax_color() == a
                && scene.slots.iter().enumerate().any(|(j, sb)| {
                    i != j
                        && sb.is_present()
                        && sb.argmax_color() == b
                        && relation_holds(sa, sb, rel, world.relation_margin)
                })
        }),
    }
}

/// Fraction of the prompt's constraints the scene satisfies.
pub fn reward(world: &WorldConfig, spec: &PromptSpec, scene: &Scene) -> f64 {
    if spec.constraints.is_empty() {
        return 1.0;
    }
    let ok = spec.constraints.iter().filter(|c| satisfied(world, c, scene)).count();
    ok as f64 / spec.constraints.len() as f64
}

/// Indices of the constraints the scene violates.
pub fn violations(world: &WorldConfig, spec: &PromptSpec, scene: &Scene) -> Vec<usize> {
    spec.constraints.iter().enumerate().filter(|(_, c)| !satisfied(world, c, scene)).map(|(i, _)| i).collect()
}
