//! Structured compositional prompts and their token serialization.
//!
//! Objects in the toy world are identified by their color; the only other
//! referent is an ordinal rank in left-to-right order, used to bind a color
//! to "the first / second object from the left".

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::scene::{WorldConfig, COLOR_NAMES};
use crate::error::{invalid, Error, Result};

/// Benchmark categories, in the fixed column order used by every report.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    SingleObject,
    TwoObject,
    Counting,
    Colors,
    Position,
    ColorAttr,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::SingleObject,
        Category::TwoObject,
        Category::Counting,
        Category::Colors,
        Category::Position,
        Category::ColorAttr,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::SingleObject => "single_object",
            Category::TwoObject => "two_object",
            Category::Counting => "counting",
            Category::Colors => "colors",
            Category::Position => "position",
            Category::ColorAttr => "color_attr",
        }
    }

    /// Number of constraints of the category's template.
    pub fn arity(self) -> usize {
        match self {
            Category::TwoObject | Category::ColorAttr => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| invalid(format!("unknown category '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::LeftOf, Relation::RightOf, Relation::Above, Relation::Below];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Constraint {
    /// Some present object has this color.
    Exists { color: usize },
    /// Exactly `n` present objects have this color.
    Count { color: usize, n: usize },
    /// The present object at left-to-right `rank` has this color.
    ColorOf { rank: usize, color: usize },
    /// Some object of color `a` stands in `rel` to some object of color `b`.
    Relation { a: usize, b: usize, rel: Relation },
}

impl Constraint {
    pub fn kind_index(&self) -> usize {
        match self {
            Constraint::Exists { .. } => 0,
            Constraint::Count { .. } => 1,
            Constraint::ColorOf { .. } => 2,
            Constraint::Relation { .. } => 3,
        }
    }

    pub fn describe(&self) -> String {
        let c = |i: usize| COLOR_NAMES.get(i).copied().unwrap_or("?");
        match *self {
            Constraint::Exists { color } => format!("a {} object", c(color)),
            Constraint::Count { color, n } => format!("exactly {n} {} objects", c(color)),
            Constraint::ColorOf { rank, color } => format!("object #{} from the left is {}", rank + 1, c(color)),
            Constraint::Relation { a, b, rel } => format!("{} {:?} {}", c(a), rel, c(b)),
        }
    }
}

/// Token vocabulary layout for a world with `n_colors` colors and
/// `k_slots` slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    n_colors: usize,
    n_numbers: usize,
}

impl Vocab {
    pub const BOS: usize = 1;
    pub const EOS: usize = 2;
    const CATEGORY: usize = 3;
    const KIND: usize = Self::CATEGORY + 6;
    const COLOR: usize = Self::KIND + 4;

    pub fn new(world: &WorldConfig) -> Self {
        Self { n_colors: world.n_colors, n_numbers: world.k_slots + 1 }
    }

    fn number(&self) -> usize {
        Self::COLOR + self.n_colors
    }

    fn relation(&self) -> usize {
        self.number() + self.n_numbers
    }

    pub fn size(&self) -> usize {
        self.relation() + 4
    }

    /// Longest token sequence any category produces.
    pub fn max_prompt_len(&self) -> usize {
        2 + 2 * 3 + 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptSpec {
    pub category: Category,
    pub constraints: Vec<Constraint>,
}

impl PromptSpec {
    pub fn new(category: Category, constraints: Vec<Constraint>) -> Result<Self> {
        if constraints.len() != category.arity() {
            return Err(invalid(format!(
                "category {category} takes {} constraints, got {}",
                category.arity(),
                constraints.len()
            )));
        }
        Ok(Self { category, constraints })
    }

    /// `BOS category (kind args…)* EOS`.
    pub fn tokens(&self, vocab: &Vocab) -> Vec<usize> {
        let mut t = vec![Vocab::BOS, Vocab::CATEGORY + self.category.index()];
        let color = |c: usize| Vocab::COLOR + c;
        let number = |n: usize| vocab.number() + n;
        for c in &self.constraints {
            t.push(Vocab::KIND + c.kind_index());
            match *c {
                Constraint::Exists { color: col } => t.push(color(col)),
                Constraint::Count { color: col, n } => t.extend([color(col), number(n)]),
                Constraint::ColorOf { rank, color: col } => t.extend([number(rank), color(col)]),
                Constraint::Relation { a, b, rel } => t.extend([color(a), color(b), vocab.relation() + rel.index()]),
            }
        }
        t.push(Vocab::EOS);
        t
    }

    /// Inverse of [`PromptSpec::tokens`].
    pub fn from_tokens(tokens: &[usize], vocab: &Vocab) -> Result<Self> {
        let bad = || Error::Format(format!("malformed prompt tokens {tokens:?}"));
        let mut it = tokens.iter().copied();
        if it.next() != Some(Vocab::BOS) {
            return Err(bad());
        }
        let cat = it.next().ok_or_else(bad)?;
        let category = *Category::ALL.get(cat.wrapping_sub(Vocab::CATEGORY)).ok_or_else(bad)?;
        let color = |t: Option<usize>| -> Result<usize> {
            let t = t.ok_or_else(bad)?;
            let c = t.wrapping_sub(Vocab::COLOR);
            (c < vocab.n_colors).then_some(c).ok_or_else(bad)
        };
        let number = |t: Option<usize>| -> Result<usize> {
            let n = t.ok_or_else(bad)?.wrapping_sub(vocab.number());
            (n < vocab.n_numbers).then_some(n).ok_or_else(bad)
        };
        let mut constraints = Vec::new();
        loop {
            let t = it.next().ok_or_else(bad)?;
            if t == Vocab::EOS {
                break;
            }
            let c = match t.wrapping_sub(Vocab::KIND) {
                0 => Constraint::Exists { color: color(it.next())? },
                1 => Constraint::Count { color: color(it.next())?, n: number(it.next())? },
                2 => Constraint::ColorOf { rank: number(it.next())?, color: color(it.next())? },
                3 => {
                    let a = color(it.next())?;
                    let b = color(it.next())?;
                    let r = it.next().ok_or_else(bad)?.wrapping_sub(vocab.relation());
                    Constraint::Relation { a, b, rel: *Relation::ALL.get(r).ok_or_else(bad)? }
                }
                _ => return Err(bad()),
            };
            constraints.push(c);
        }
        if it.next().is_some() {
            return Err(bad());
        }
        PromptSpec::new(category, constraints).map_err(|_| bad())
    }

    pub fn describe(&self) -> String {
        let parts: Vec<String> = self.constraints.iter().map(Constraint::describe).collect();
        format!("[{}] {}", self.category, parts.join("; "))
    }
}
