//! Synthetic tasks: maze mapping with localization queries, priority sort
//! and associative recall, their metrics and the test-set file format.

mod algorithmic;
mod episode;
mod format;
mod maze;
mod metrics;

pub use algorithmic::{
    gen_recall, gen_sort, sort_by_priority, sort_instance, BitVec, RecallInstance, SortInstance,
};
pub use episode::{
    gen_instance, gen_mapping, Instance, MappingEpisode, MappingSpec, MappingStep, TaskId,
    TaskSpec,
};
pub use format::{Dims, TestSet, TESTSET_MAGIC, TESTSET_VERSION};
pub use maze::{
    canvas_size, gen_maze, observe, query_at, random_walk, sample_query, spiral_trajectory,
    to_canvas, LocalizationQuery, MazeWorld, Motion, Observation, Pos, Seen, SeenMap, Trajectory,
};
pub use metrics::{mean_std, metrics_bit_error, metrics_prf, Prf};

#[cfg(test)]
mod tests;
