//! The four ordered latent-action roles and the per-role length schedule.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Plan,
    Draft,
    Diagnosis,
    Refine,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Plan, Role::Draft, Role::Diagnosis, Role::Refine];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Roles whose targets come from teacher records (everything but draft).
    pub fn is_semantic(self) -> bool {
        self != Role::Draft
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Plan => "plan",
            Role::Draft => "draft",
            Role::Diagnosis => "diagnosis",
            Role::Refine => "refine",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Realized (or teacher-provided) length of each role, indexed by
/// [`Role::index`]. Masked roles have length 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RoleLengths(pub [usize; 4]);

impl RoleLengths {
    pub fn get(&self, role: Role) -> usize {
        self.0[role.index()]
    }

    pub fn set(&mut self, role: Role, n: usize) {
        self.0[role.index()] = n;
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    /// The role of every position, in order.
    pub fn layout(&self) -> Vec<(Role, usize)> {
        Role::ALL.iter().flat_map(|&r| (1..=self.get(r)).map(move |k| (r, k))).collect()
    }
}

/// Ordered roles with per-role `(L_min, L_max)` bounds and an activity mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoleSchedule {
    pub bounds: [(usize, usize); 4],
    pub active: [bool; 4],
}

impl Default for RoleSchedule {
    fn default() -> Self {
        Self { bounds: [(1, 4), (1, 1), (1, 3), (1, 3)], active: [true; 4] }
    }
}

impl RoleSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.bounds[Role::Draft.index()] != (1, 1) {
            return Err(invalid("draft role must have exactly one step"));
        }
        for r in Role::ALL {
            let (lo, hi) = self.bounds[r.index()];
            if lo < 1 || lo > hi {
                return Err(invalid(format!("role {r} has invalid bounds ({lo}, {hi})")));
            }
        }
        if !self.active.iter().any(|a| *a) {
            return Err(invalid("schedule has no active role"));
        }
        Ok(())
    }

    pub fn bounds(&self, role: Role) -> (usize, usize) {
        self.bounds[role.index()]
    }

    pub fn is_active(&self, role: Role) -> bool {
        self.active[role.index()]
    }

    pub fn active_roles(&self) -> impl Iterator<Item = Role> + '_ {
        Role::ALL.into_iter().filter(|r| self.is_active(*r))
    }

    /// Upper bound on the number of latent actions of any rollout.
    pub fn max_total(&self) -> usize {
        self.active_roles().map(|r| self.bounds(r).1).sum()
    }

    pub fn max_steps(&self) -> usize {
        self.active_roles().map(|r| self.bounds(r).1).max().unwrap_or(1)
    }

    /// Whether the halting head is consulted for `role` after step `k`.
    pub fn queries_halting(&self, role: Role, k: usize) -> bool {
        let (lo, hi) = self.bounds(role);
        k >= lo && k < hi
    }

    pub fn with_mask(mut self, active: [bool; 4]) -> Self {
        self.active = active;
        self
    }

    /// Fixed per-role lengths (`L_min = L_max`), for fixed-budget variants.
    pub fn fixed(lengths: RoleLengths) -> Self {
        let mut s = Self::default();
        for r in Role::ALL {
            let n = lengths.get(r);
            s.active[r.index()] = n > 0;
            s.bounds[r.index()] = if n > 0 { (n, n) } else { s.bounds[r.index()] };
        }
        s
    }

    /// Check that `lengths` respects the bounds and the mask.
    pub fn check_lengths(&self, lengths: &RoleLengths) -> Result<()> {
        for r in Role::ALL {
            let n = lengths.get(r);
            if !self.is_active(r) {
                if n != 0 {
                    return Err(invalid(format!("role {r} is masked but has length {n}")));
                }
                continue;
            }
            let (lo, hi) = self.bounds(r);
            if n < lo || n > hi {
                return Err(invalid(format!("role {r} length {n} outside [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}
