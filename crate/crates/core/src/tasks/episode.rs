use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::algorithmic::{gen_recall, gen_sort, RecallInstance, SortInstance};
use super::maze::{
    canvas_size, gen_maze, observe, query_at, random_walk, sample_query, spiral_trajectory,
    LocalizationQuery, MazeWorld, Motion, Observation, Pos, SeenMap, Trajectory,
};

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MappingSpec {
    /// World side.
    pub n: usize,
    /// Observation patch side.
    pub m: usize,
    /// Query patch side.
    pub k: usize,
    #[serde(default)]
    pub wall_density: f64,
    pub motion: Motion,
    /// Trajectory length (spirals stop early once the interior is covered).
    pub steps: usize,
    /// Border ring left out of the spiral.
    #[serde(default)]
    pub margin: usize,
    /// First step (0-based) at which queries are asked.
    #[serde(default)]
    pub first_query: Option<usize>,
    /// Draw a new query every step rather than holding the first one.
    #[serde(default = "default_true")]
    pub resample_query: bool,
}

impl MappingSpec {
    pub fn first_query(&self) -> usize {
        self.first_query.unwrap_or(self.k)
    }

    pub fn canvas(&self) -> usize {
        canvas_size(self.n)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "snake_case")]
pub enum TaskSpec {
    Mapping(MappingSpec),
    Sort { length: usize, dim: usize },
    Recall { length: usize, dim: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum TaskId {
    Mapping = 0,
    Sort = 1,
    Recall = 2,
}

impl TaskId {
    pub fn from_u32(v: u32) -> Option<Self> {
        match v {
            0 => Some(TaskId::Mapping),
            1 => Some(TaskId::Sort),
            2 => Some(TaskId::Recall),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Mapping => "mapping",
            TaskId::Sort => "sort",
            TaskId::Recall => "recall",
        }
    }
}

impl TaskSpec {
    pub fn id(&self) -> TaskId {
        match self {
            TaskSpec::Mapping(_) => TaskId::Mapping,
            TaskSpec::Sort { .. } => TaskId::Sort,
            TaskSpec::Recall { .. } => TaskId::Recall,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TaskSpec::Mapping(s) => {
                if s.m % 2 == 0 || s.k % 2 == 0 || s.m == 0 || s.k == 0 {
                    return Err(Error::Invalid("patch sizes must be odd".into()));
                }
                if s.steps == 0 {
                    return Err(Error::Invalid("episodes need at least one step".into()));
                }
                if s.motion == Motion::Spiral && s.wall_density > 0.0 {
                    return Err(Error::Invalid("spiral motion needs a wall-free world".into()));
                }
                if s.n < 5 || s.n % 2 == 0 {
                    return Err(Error::Invalid("world size must be odd and at least 5".into()));
                }
                Ok(())
            }
            TaskSpec::Sort { length, dim } | TaskSpec::Recall { length, dim } => {
                if *length < 2 || *dim < 1 {
                    return Err(Error::Invalid("need at least 2 vectors of 1 bit".into()));
                }
                Ok(())
            }
        }
    }
}

/// One mapping episode: world, path and the query centre (canvas
/// coordinates) asked at each step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MappingEpisode {
    pub world: MazeWorld,
    pub trajectory: Trajectory,
    pub m: usize,
    pub k: usize,
    pub queries: Vec<Option<Pos>>,
}

/// Per-step view of a mapping episode.
#[derive(Clone, Debug)]
pub struct MappingStep {
    pub observation: Observation,
    pub query: Option<LocalizationQuery>,
}

impl MappingEpisode {
    pub fn len(&self) -> usize {
        self.trajectory.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectory.is_empty()
    }

    pub fn canvas(&self) -> usize {
        canvas_size(self.world.size())
    }

    /// Replays the episode, rebuilding the explored map as it goes.
    pub fn steps(&self) -> Result<Vec<MappingStep>> {
        let mut seen = SeenMap::for_world(&self.world);
        let mut out = Vec::with_capacity(self.len());
        for (t, &p) in self.trajectory.positions.iter().enumerate() {
            seen.record(&self.world, p, self.m);
            let query = match self.queries.get(t).copied().flatten() {
                Some(c) => Some(query_at(&seen, c, self.k)?),
                None => None,
            };
            out.push(MappingStep {
                observation: observe(&self.world, p, self.m)?,
                query,
            });
        }
        Ok(out)
    }

    /// Explored map after the last step.
    pub fn final_seen(&self) -> SeenMap {
        let mut seen = SeenMap::for_world(&self.world);
        for &p in &self.trajectory.positions {
            seen.record(&self.world, p, self.m);
        }
        seen
    }
}

pub fn gen_mapping(spec: &MappingSpec, rng: &mut impl Rng) -> Result<MappingEpisode> {
    TaskSpec::Mapping(spec.clone()).validate()?;
    let world = if spec.wall_density == 0.0 {
        MazeWorld::open(spec.n)
    } else {
        gen_maze(spec.n, spec.wall_density, rng)?
    };
    let trajectory = match spec.motion {
        Motion::Spiral => spiral_trajectory(&world, spec.steps, spec.margin)?,
        Motion::Random => random_walk(&world, spec.steps, rng)?,
    };
    let mut seen = SeenMap::for_world(&world);
    let mut queries = Vec::with_capacity(trajectory.len());
    let mut held = None;
    for (t, &p) in trajectory.positions.iter().enumerate() {
        seen.record(&world, p, spec.m);
        if t < spec.first_query() {
            queries.push(None);
            continue;
        }
        let centre = match held {
            Some(c) if !spec.resample_query => Some(c),
            _ => sample_query(&seen, spec.k, rng).ok().map(|q| q.centre),
        };
        held = held.or(centre);
        queries.push(centre);
    }
    Ok(MappingEpisode {
        world,
        trajectory,
        m: spec.m,
        k: spec.k,
        queries,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum Instance {
    Mapping(MappingEpisode),
    Sort(SortInstance),
    Recall(RecallInstance),
}

impl Instance {
    pub fn task_id(&self) -> TaskId {
        match self {
            Instance::Mapping(_) => TaskId::Mapping,
            Instance::Sort(_) => TaskId::Sort,
            Instance::Recall(_) => TaskId::Recall,
        }
    }
}

pub fn gen_instance(task: &TaskSpec, rng: &mut impl Rng) -> Result<Instance> {
    task.validate()?;
    Ok(match task {
        TaskSpec::Mapping(s) => Instance::Mapping(gen_mapping(s, rng)?),
        TaskSpec::Sort { length, dim } => Instance::Sort(gen_sort(*length, *dim, rng)?),
        TaskSpec::Recall { length, dim } => Instance::Recall(gen_recall(*length, *dim, rng)?),
    })
}
