//! Line-delimited task files: a versioned header line followed by one JSON
//! task per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::generate::{corrupt, sample_task};
use super::prompt::{Category, PromptSpec, Vocab};
use super::records::{make_teacher_records, TeacherRecord};
use super::scene::{Scene, WorldConfig};
use crate::error::{Error, Result};
use crate::numerics::rng::derive_seed;
use crate::role::{RoleLengths, RoleSchedule};

pub const TASK_FORMAT: &str = "lac-tasks";
pub const TASK_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskHeader {
    pub format: String,
    pub version: u32,
    pub world: WorldConfig,
    pub n_tasks: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: usize,
    pub seed: u64,
    pub category: Category,
    pub tokens: Vec<usize>,
    pub spec: PromptSpec,
    pub reference: Scene,
    pub draft: Scene,
    pub records: Vec<TeacherRecord>,
    pub lengths: RoleLengths,
}

/// The prompt-only view of a task line. Deserializing into it never touches
/// the teacher fields, so inference cannot depend on them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptEntry {
    pub id: usize,
    pub category: Category,
    pub tokens: Vec<usize>,
}

impl Task {
    pub fn prompt(&self) -> PromptEntry {
        PromptEntry { id: self.id, category: self.category, tokens: self.tokens.clone() }
    }
}

pub fn make_task(world: &WorldConfig, schedule: &RoleSchedule, id: usize, seed: u64, category: Category) -> Task {
    let (spec, reference) = sample_task(world, seed, category);
    let draft = corrupt(world, &spec, &reference, seed);
    let (records, lengths) = make_teacher_records(world, schedule, &spec, &reference, &draft);
    Task { id, seed, category, tokens: spec.tokens(&Vocab::new(world)), spec, reference, draft, records, lengths }
}

/// `n` tasks cycling through the categories in their fixed order.
pub fn generate_tasks(world: &WorldConfig, schedule: &RoleSchedule, n: usize, seed: u64) -> Vec<Task> {
    (0..n)
        .map(|i| {
            let cat = Category::ALL[i % Category::ALL.len()];
            make_task(world, schedule, i, derive_seed(seed, &[i as u64]), cat)
        })
        .collect()
}

pub fn write_tasks(path: &Path, world: &WorldConfig, seed: u64, tasks: &[Task]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = TaskHeader {
        format: TASK_FORMAT.into(),
        version: TASK_VERSION,
        world: *world,
        n_tasks: tasks.len(),
        seed,
    };
    serde_json::to_writer(&mut w, &header)?;
    writeln!(w)?;
    for t in tasks {
        serde_json::to_writer(&mut w, t)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<(TaskHeader, Vec<T>)> {
    let file = File::open(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines.next().ok_or_else(|| Error::Format(format!("{}: empty task file", path.display())))??;
    let header: TaskHeader = serde_json::from_str(&first)
        .map_err(|e| Error::Format(format!("{}: bad task header: {e}", path.display())))?;
    if header.format != TASK_FORMAT || header.version != TASK_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported task format {} v{}",
            path.display(),
            header.format,
            header.version
        )));
    }
    let mut items = Vec::with_capacity(header.n_tasks);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}: line {}: {e}", path.display(), i + 2)))?;
        items.push(item);
    }
    if items.len() != header.n_tasks {
        return Err(Error::Format(format!(
            "{}: header declares {} tasks, found {}",
            path.display(),
            header.n_tasks,
            items.len()
        )));
    }
    Ok((header, items))
}

pub fn read_tasks(path: &Path) -> Result<(TaskHeader, Vec<Task>)> {
    read_lines(path)
}

pub fn read_prompts(path: &Path) -> Result<(TaskHeader, Vec<PromptEntry>)> {
    read_lines(path)
}
