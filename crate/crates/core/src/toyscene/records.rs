//! Structured teacher records for the semantic roles and the teacher
//! length labels derived from them.

use serde::{Deserialize, Serialize};

use super::prompt::{Constraint, PromptSpec};
use super::reward::{count_color, left_to_right, violations};
use super::scene::{Scene, Slot, WorldConfig};
use crate::error::{invalid, Result};
use crate::role::{Role, RoleLengths, RoleSchedule};

/// Number of buckets positions are quantized into.
pub const POSITION_BUCKETS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldTag {
    Kind,
    Color,
    Count,
    Rank,
    Relation,
    Presence,
    PosX,
    PosY,
    Violated,
    NoOp,
}

impl FieldTag {
    pub const COUNT: usize = 10;

    pub fn index(self) -> usize {
        self as usize
    }
}

/// One `(field_tag, slot_ref, attribute_value)` triple.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Field {
    pub tag: FieldTag,
    pub slot: usize,
    pub value: usize,
}

impl Field {
    pub fn new(tag: FieldTag, slot: usize, value: usize) -> Self {
        Self { tag, slot, value }
    }

    /// Largest attribute value plus one.
    pub fn value_range(world: &WorldConfig) -> usize {
        (world.n_colors + 1).max(world.k_slots + 1).max(POSITION_BUCKETS)
    }

    /// Number of distinct triples; the embedding table has one row each.
    pub fn table_rows(world: &WorldConfig) -> usize {
        FieldTag::COUNT * world.k_slots * Self::value_range(world)
    }

    /// Row of the triple in the embedding table (injective on valid triples).
    pub fn table_index(&self, world: &WorldConfig) -> Result<usize> {
        let v = Self::value_range(world);
        if self.slot >= world.k_slots || self.value >= v {
            return Err(invalid(format!("field {self:?} outside the record vocabulary")));
        }
        Ok((self.tag.index() * world.k_slots + self.slot) * v + self.value)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherRecord {
    pub role: Role,
    /// 1-based position within the role.
    pub step: usize,
    pub fields: Vec<Field>,
}

pub fn bucket(v: f64) -> usize {
    ((v.clamp(0.0, 1.0) * POSITION_BUCKETS as f64) as usize).min(POSITION_BUCKETS - 1)
}

fn constraint_fields(c: &Constraint, head: Field) -> Vec<Field> {
    let mut f = vec![head];
    match *c {
        Constraint::Exists { color } => f.push(Field::new(FieldTag::Color, 0, color)),
        Constraint::Count { color, n } => {
            f.extend([Field::new(FieldTag::Color, 0, color), Field::new(FieldTag::Count, 0, n)])
        }
        Constraint::ColorOf { rank, color } => {
            f.extend([Field::new(FieldTag::Rank, 0, rank), Field::new(FieldTag::Color, 0, color)])
        }
        Constraint::Relation { a, b, rel } => f.extend([
            Field::new(FieldTag::Color, 0, a),
            Field::new(FieldTag::Color, 1, b),
            Field::new(FieldTag::Relation, 0, rel.index()),
        ]),
    }
    f
}

/// What the draft shows for a violated constraint (slot_ref 1 marks the
/// observation side).
fn observation(world: &WorldConfig, c: &Constraint, draft: &Scene) -> Field {
    match *c {
        Constraint::Exists { color } | Constraint::Count { color, .. } => {
            Field::new(FieldTag::Count, 1, count_color(draft, color).min(world.k_slots))
        }
        Constraint::ColorOf { rank, .. } => {
            let seen = left_to_right(draft).get(rank).map_or(world.n_colors, |s| s.argmax_color());
            Field::new(FieldTag::Color, 1, seen)
        }
        Constraint::Relation { a, b, .. } => {
            let sa = draft.slots.iter().find(|s| s.is_present() && s.argmax_color() == a);
            let sb = draft.slots.iter().find(|s| s.is_present() && s.argmax_color() == b);
            let seen = match (sa, sb) {
                (Some(sa), Some(sb)) if (sa.x - sb.x).abs() >= (sa.y - sb.y).abs() => {
                    if sa.x < sb.x { 0 } else { 1 }
                }
                (Some(sa), Some(sb)) => {
                    if sa.y > sb.y { 2 } else { 3 }
                }
                _ => 4,
            };
            Field::new(FieldTag::Relation, 1, seen)
        }
    }
}

/// Reference slots a constraint is about.
fn relevant_slots(c: &Constraint, reference: &Scene) -> Vec<usize> {
    let with_color = |colors: &[usize]| -> Vec<usize> {
        reference.present().filter(|(_, s)| colors.contains(&s.argmax_color())).map(|(i, _)| i).collect()
    };
    match *c {
        Constraint::Exists { color } | Constraint::Count { color, .. } => with_color(&[color]),
        Constraint::ColorOf { rank, .. } => left_to_right(reference)
            .get(rank)
            .and_then(|target| reference.slots.iter().position(|s| std::ptr::eq(s, *target)))
            .into_iter()
            .collect(),
        Constraint::Relation { a, b, .. } => with_color(&[a, b]),
    }
}

fn slot_edits(slot: usize, reference: &Slot, draft: &Slot) -> Vec<Field> {
    let mut f = Vec::new();
    if reference.is_present() != draft.is_present() {
        f.push(Field::new(FieldTag::Presence, slot, usize::from(reference.is_present())));
    }
    if !reference.is_present() {
        return f;
    }
    if reference.argmax_color() != draft.argmax_color() || !draft.is_present() {
        f.push(Field::new(FieldTag::Color, slot, reference.argmax_color()));
    }
    if bucket(reference.x) != bucket(draft.x) || !draft.is_present() {
        f.push(Field::new(FieldTag::PosX, slot, bucket(reference.x)));
    }
    if bucket(reference.y) != bucket(draft.y) || !draft.is_present() {
        f.push(Field::new(FieldTag::PosY, slot, bucket(reference.y)));
    }
    f
}

fn edits_for(slots: &[usize], reference: &Scene, draft: &Scene) -> Vec<Field> {
    slots.iter().flat_map(|&i| slot_edits(i, &reference.slots[i], &draft.slots[i])).collect()
}

fn no_op() -> Vec<Field> {
    vec![Field::new(FieldTag::NoOp, 0, 0)]
}

/// Fit a record list to `[lo, hi]` entries: truncate, or repeat the last.
fn fit(mut fields: Vec<Vec<Field>>, (lo, hi): (usize, usize)) -> Vec<Vec<Field>> {
    fields.truncate(hi);
    while fields.len() < lo {
        let last = fields.last().cloned().unwrap_or_else(no_op);
        fields.push(last);
    }
    fields
}

/// Teacher records for plan, diagnosis and refine, and the per-role length
/// labels (draft is always 1). Refine mirrors diagnosis: one edit record per
/// violated constraint.
pub fn make_teacher_records(
    world: &WorldConfig,
    schedule: &RoleSchedule,
    spec: &PromptSpec,
    reference: &Scene,
    draft: &Scene,
) -> (Vec<TeacherRecord>, RoleLengths) {
    let plan: Vec<Vec<Field>> =
        spec.constraints.iter().map(|c| constraint_fields(c, Field::new(FieldTag::Kind, 0, c.kind_index()))).collect();

    let violated = violations(world, spec, draft);
    let (diagnosis, refine): (Vec<Vec<Field>>, Vec<Vec<Field>>) = if violated.is_empty() {
        (vec![no_op()], vec![no_op()])
    } else {
        let all: Vec<usize> = (0..world.k_slots).collect();
        violated
            .iter()
            .map(|&i| {
                let c = &spec.constraints[i];
                let mut d = constraint_fields(c, Field::new(FieldTag::Violated, 0, c.kind_index()));
                d.push(observation(world, c, draft));
                let mut r = edits_for(&relevant_slots(c, reference), reference, draft);
                if r.is_empty() {
                    r = edits_for(&all, reference, draft);
                }
                if r.is_empty() {
                    r = no_op();
                }
                (d, r)
            })
            .unzip()
    };

    let plan = fit(plan, schedule.bounds(Role::Plan));
    let diagnosis = fit(diagnosis, schedule.bounds(Role::Diagnosis));
    let refine_bounds = schedule.bounds(Role::Refine);
    let refine_len = diagnosis.len().clamp(refine_bounds.0, refine_bounds.1);
    let refine = fit(refine, (refine_len, refine_len));

    let lengths = RoleLengths([plan.len(), 1, diagnosis.len(), refine.len()]);
    let mut records = Vec::new();
    for (role, list) in [(Role::Plan, plan), (Role::Diagnosis, diagnosis), (Role::Refine, refine)] {
        for (k, fields) in list.into_iter().enumerate() {
            records.push(TeacherRecord { role, step: k + 1, fields });
        }
    }
    (records, lengths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyscene::generate::{corrupt, sample_task};
    use crate::toyscene::prompt::Category;
    use std::collections::HashSet;

    #[test]
    fn table_index_is_injective() {
        let w = WorldConfig::default();
        let v = Field::value_range(&w);
        let mut seen = HashSet::new();
        for tag in 0..FieldTag::COUNT {
            for slot in 0..w.k_slots {
                for value in 0..v {
                    let tags = [
                        FieldTag::Kind,
                        FieldTag::Color,
                        FieldTag::Count,
                        FieldTag::Rank,
                        FieldTag::Relation,
                        FieldTag::Presence,
                        FieldTag::PosX,
                        FieldTag::PosY,
                        FieldTag::Violated,
                        FieldTag::NoOp,
                    ];
                    let i = Field::new(tags[tag], slot, value).table_index(&w).unwrap();
                    assert!(i < Field::table_rows(&w));
                    assert!(seen.insert(i));
                }
            }
        }
        assert!(Field::new(FieldTag::Color, 9, 0).table_index(&w).is_err());
    }

    #[test]
    fn identical_draft_gives_no_op_diagnosis() {
        let w = WorldConfig::default();
        let s = RoleSchedule::default();
        let (spec, reference) = sample_task(&w, 1, Category::TwoObject);
        let (records, lengths) = make_teacher_records(&w, &s, &spec, &reference, &reference);
        assert_eq!(lengths, RoleLengths([2, 1, 1, 1]));
        let diag: Vec<_> = records.iter().filter(|r| r.role == Role::Diagnosis).collect();
        assert_eq!(diag.len(), 1);
        assert_eq!(diag[0].fields, no_op());
    }

    #[test]
    fn one_violation_of_two() {
        let w = WorldConfig::default();
        let s = RoleSchedule::default();
        let (spec, reference) = sample_task(&w, 2, Category::TwoObject);
        let mut draft = reference.clone();
        draft.slots[0] = Slot::absent(w.n_colors);
        let (records, lengths) = make_teacher_records(&w, &s, &spec, &reference, &draft);
        assert_eq!(lengths.get(Role::Plan), 2);
        assert_eq!(lengths.get(Role::Diagnosis), 1);
        assert_eq!(lengths.get(Role::Refine), 1);
        let refine = records.iter().find(|r| r.role == Role::Refine).unwrap();
        assert!(refine.fields.contains(&Field::new(FieldTag::Presence, 0, 1)));
        assert_eq!(make_teacher_records(&w, &s, &spec, &reference, &draft), (records, lengths));
    }

    #[test]
    fn lengths_respect_bounds_and_records_are_encodable() {
        let w = WorldConfig::default();
        let s = RoleSchedule::default();
        for cat in Category::ALL {
            for seed in 0..200 {
                let (spec, reference) = sample_task(&w, seed, cat);
                let draft = corrupt(&w, &spec, &reference, seed);
                let (records, lengths) = make_teacher_records(&w, &s, &spec, &reference, &draft);
                s.check_lengths(&lengths).unwrap();
                assert_eq!(records.len(), lengths.total() - 1);
                for r in &records {
                    assert!(r.role.is_semantic() && r.step >= 1 && r.step <= s.bounds(r.role).1);
                    assert!(!r.fields.is_empty());
                    for f in &r.fields {
                        f.table_index(&w).unwrap();
                    }
                }
            }
        }
    }
}
