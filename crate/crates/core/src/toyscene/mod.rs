//! The synthetic scene world that stands in for images: scenes, structured
//! prompts, a programmatic reward, corrupted drafts and teacher records.

pub mod generate;
pub mod prompt;
pub mod records;
pub mod reward;
pub mod scene;
pub mod taskfile;

pub use generate::{corrupt, sample_task};
pub use prompt::{Category, Constraint, PromptSpec, Relation, Vocab};
pub use records::{make_teacher_records, Field, FieldTag, TeacherRecord};
pub use reward::{reward, violations};
pub use scene::{decode_scene, encode_flat, Scene, SceneEncoder, Slot, WorldConfig};
pub use taskfile::{generate_tasks, read_prompts, read_tasks, write_tasks, PromptEntry, Task, TaskHeader};
