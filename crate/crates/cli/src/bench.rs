//! Benchmark config generation from prompt templates.
//!
//! Templates fix the group structure of prompts such as "a cat and a dog" or
//! "a red car and a blue bench"; token indices are positions in the synthetic
//! embedding, with index 0 standing for the start token.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use conform_core::{TokenGroup, TokenGroups};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Template {
    /// "a [animalA] and a [animalB]"
    AnimalAnimal,
    /// "a [animal] and a [color][object]"
    AnimalObject,
    /// "a [colorA][objectA] and a [colorB][objectB]"
    ObjectObject,
    /// "[countA] [objectsA] and [countB] [objectsB]"
    MultiObject,
}

impl Template {
    pub const ALL: [Template; 4] = [
        Template::AnimalAnimal,
        Template::AnimalObject,
        Template::ObjectObject,
        Template::MultiObject,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Template::AnimalAnimal => "animal-animal",
            Template::AnimalObject => "animal-object",
            Template::ObjectObject => "object-object",
            Template::MultiObject => "multi-object",
        }
    }

    pub fn groups(self) -> TokenGroups {
        let groups = match self {
            // <s> a cat and a dog
            Template::AnimalAnimal => vec![TokenGroup::new(2, []), TokenGroup::new(5, [])],
            // <s> a cat and a red car
            Template::AnimalObject => vec![TokenGroup::new(2, []), TokenGroup::new(6, [5])],
            // <s> a red car and a blue bench
            Template::ObjectObject => vec![TokenGroup::new(3, [2]), TokenGroup::new(7, [6])],
            // <s> two cats and three dogs
            Template::MultiObject => vec![TokenGroup::new(2, [1]), TokenGroup::new(5, [4])],
        };
        TokenGroups::new(groups).expect("template tokens are distinct")
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Template {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        Template::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Template::ALL.iter().map(|t| t.name()).collect();
                CliError::config(format!(
                    "unknown template {s:?}; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

/// Write `count` configs for `template` into `dir`, seeded `0..count` on top
/// of `base`. Each config's output directory is `dir/runs/<name>`.
pub fn emit(
    template: Template,
    count: usize,
    base: &RunConfig,
    dir: &Path,
) -> CliResult<Vec<PathBuf>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut paths = Vec::with_capacity(count);
    for i in 0..count {
        let name = format!("{}-{i:03}", template.name());
        let mut cfg = base.clone();
        cfg.groups = template.groups();
        cfg.guidance.seed = i as u64;
        cfg.output_dir = dir.join("runs").join(&name);
        cfg.validate()?;
        let path = dir.join(format!("{name}.json"));
        std::fs::write(&path, cfg.to_json()).map_err(|e| CliError::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}
