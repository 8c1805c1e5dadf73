//! Test-set files.
//!
//! ```text
//! "MGT1" | u32 version | u32 task id | u32 dim count | u32 dims... | u32 count | records
//! ```
//!
//! Dims are `n, m, k` for mapping and `length, dim` for sort and recall.
//! All integers are little-endian. Records:
//!
//! * sort: `length·dim` bytes of bits, then `length` f32 priorities
//! * recall: `length·dim` bytes of bits, then the u32 query index
//! * mapping: u8 motion (0 spiral, 1 random), `n·n` cell bytes (1 = wall),
//!   u32 start row/col, u32 step count `T`, `T` u32 position pairs, then
//!   `T` i32 query-centre pairs on the canvas (`-1, -1` = no query)

use std::fmt::Write as _;
use std::path::Path;

use crate::codec::{put_f32, put_i32, put_u32, Reader};
use crate::error::{Error, Result};

use super::algorithmic::{sort_instance, BitVec, RecallInstance};
use super::episode::{gen_instance, Instance, MappingEpisode, TaskId, TaskSpec};
use super::maze::{canvas_size, MazeWorld, Motion, Trajectory};

pub const TESTSET_MAGIC: &[u8; 4] = b"MGT1";
pub const TESTSET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dims {
    Mapping { n: usize, m: usize, k: usize },
    Sequence { length: usize, dim: usize },
}

impl Dims {
    pub fn of(task: &TaskSpec) -> Dims {
        match task {
            TaskSpec::Mapping(s) => Dims::Mapping {
                n: s.n,
                m: s.m,
                k: s.k,
            },
            TaskSpec::Sort { length, dim } | TaskSpec::Recall { length, dim } => Dims::Sequence {
                length: *length,
                dim: *dim,
            },
        }
    }

    fn values(&self) -> Vec<usize> {
        match *self {
            Dims::Mapping { n, m, k } => vec![n, m, k],
            Dims::Sequence { length, dim } => vec![length, dim],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TestSet {
    pub task: TaskId,
    pub dims: Dims,
    pub instances: Vec<Instance>,
}

fn instance_dims(inst: &Instance) -> Dims {
    match inst {
        Instance::Mapping(e) => Dims::Mapping {
            n: e.world.size(),
            m: e.m,
            k: e.k,
        },
        Instance::Sort(s) => Dims::Sequence {
            length: s.vectors.len(),
            dim: s.vectors.first().map_or(0, Vec::len),
        },
        Instance::Recall(r) => Dims::Sequence {
            length: r.vectors.len(),
            dim: r.vectors.first().map_or(0, Vec::len),
        },
    }
}

impl TestSet {
    pub fn new(task: TaskId, dims: Dims, instances: Vec<Instance>) -> Result<Self> {
        for (i, inst) in instances.iter().enumerate() {
            if inst.task_id() != task || instance_dims(inst) != dims {
                return Err(Error::Invalid(format!(
                    "instance {i} does not match the test-set task or dimensions"
                )));
            }
        }
        Ok(TestSet {
            task,
            dims,
            instances,
        })
    }

    /// `count` instances drawn from a generator seeded with `seed`.
    pub fn generate(task: &TaskSpec, seed: u64, count: usize) -> Result<Self> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let instances = (0..count)
            .map(|_| gen_instance(task, &mut rng))
            .collect::<Result<_>>()?;
        TestSet::new(task.id(), Dims::of(task), instances)
    }

    /// Whether instances of `task` could come from this set.
    pub fn matches(&self, task: &TaskSpec) -> bool {
        self.task == task.id() && self.dims == Dims::of(task)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(TESTSET_MAGIC);
        put_u32(&mut out, TESTSET_VERSION);
        put_u32(&mut out, self.task as u32);
        let dims = self.dims.values();
        put_u32(&mut out, dims.len() as u32);
        for d in dims {
            put_u32(&mut out, d as u32);
        }
        put_u32(&mut out, self.instances.len() as u32);
        for inst in &self.instances {
            match inst {
                Instance::Sort(s) => {
                    put_bits(&mut out, &s.vectors);
                    for p in &s.priorities {
                        put_f32(&mut out, *p);
                    }
                }
                Instance::Recall(r) => {
                    put_bits(&mut out, &r.vectors);
                    put_u32(&mut out, r.query as u32);
                }
                Instance::Mapping(e) => {
                    out.push(match e.trajectory.motion {
                        Motion::Spiral => 0,
                        Motion::Random => 1,
                    });
                    out.extend(e.world.cells().iter().map(|w| *w as u8));
                    put_u32(&mut out, e.world.start().0 as u32);
                    put_u32(&mut out, e.world.start().1 as u32);
                    put_u32(&mut out, e.trajectory.len() as u32);
                    for p in &e.trajectory.positions {
                        put_u32(&mut out, p.0 as u32);
                        put_u32(&mut out, p.1 as u32);
                    }
                    for q in &e.queries {
                        let (r, c) = q.map_or((-1, -1), |(r, c)| (r as i32, c as i32));
                        put_i32(&mut out, r);
                        put_i32(&mut out, c);
                    }
                }
            }
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, "test set");
        if r.bytes(4)? != TESTSET_MAGIC {
            return r.corrupt("bad magic (expected MGT1)");
        }
        let version = r.u32()?;
        if version != TESTSET_VERSION {
            return Err(Error::Version {
                what: "test set",
                found: version,
                expected: TESTSET_VERSION,
            });
        }
        let task_raw = r.u32()?;
        let task = match TaskId::from_u32(task_raw) {
            Some(t) => t,
            None => return r.corrupt(format!("unknown task id {task_raw}")),
        };
        let ndims = r.len(8, "dimension count")?;
        let dims: Vec<usize> = (0..ndims).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
        let dims = match (task, dims.as_slice()) {
            (TaskId::Mapping, &[n, m, k]) => {
                if n == 0 || n > 1024 || m % 2 == 0 || k % 2 == 0 || m > n * 2 || k > n * 2 {
                    return r.corrupt(format!("implausible mapping dims {n}x{n}, m={m}, k={k}"));
                }
                Dims::Mapping { n, m, k }
            }
            (TaskId::Sort | TaskId::Recall, &[length, dim]) => {
                if length < 2 || dim == 0 || length.saturating_mul(dim) > 1 << 24 {
                    return r.corrupt(format!("implausible sequence dims L={length}, d={dim}"));
                }
                Dims::Sequence { length, dim }
            }
            _ => return r.corrupt(format!("{} dims for task {}", ndims, task.name())),
        };
        let count = r.u32()? as usize;
        let mut instances = Vec::with_capacity(count.min(r.remaining()));
        for i in 0..count {
            let inst = match dims {
                Dims::Sequence { length, dim } => {
                    let vectors = get_bits(&mut r, length, dim)?;
                    if task == TaskId::Sort {
                        let priorities = r.f32s(length)?;
                        Instance::Sort(sort_instance(vectors, priorities).map_err(|e| Error::Corrupt {
                            what: "test set",
                            detail: format!("instance {i}: {e}"),
                        })?)
                    } else {
                        let query = r.u32()? as usize;
                        if query + 1 >= length {
                            return r.corrupt(format!("instance {i}: query index {query} out of range"));
                        }
                        Instance::Recall(RecallInstance { vectors, query })
                    }
                }
                Dims::Mapping { n, m, k } => Instance::Mapping(get_mapping(&mut r, i, n, m, k)?),
            };
            instances.push(inst);
        }
        r.finish()?;
        Ok(TestSet {
            task,
            dims,
            instances,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        TestSet::decode(&std::fs::read(path)?)
    }

    /// Human-readable rendering of the whole set.
    pub fn dump_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "MGT1 v{TESTSET_VERSION} task={} dims={:?} count={}",
            self.task.name(),
            self.dims.values(),
            self.instances.len()
        );
        let bits = |v: &BitVec| v.iter().map(|b| if *b != 0 { '1' } else { '0' }).collect::<String>();
        for (i, inst) in self.instances.iter().enumerate() {
            let _ = writeln!(s, "# instance {i}");
            match inst {
                Instance::Sort(x) => {
                    for (v, p) in x.vectors.iter().zip(&x.priorities) {
                        let _ = writeln!(s, "{} {p:.6}", bits(v));
                    }
                }
                Instance::Recall(x) => {
                    for v in &x.vectors {
                        let _ = writeln!(s, "{}", bits(v));
                    }
                    let _ = writeln!(s, "query {}", x.query);
                }
                Instance::Mapping(e) => {
                    let n = e.world.size();
                    for r in 0..n {
                        let row: String = (0..n)
                            .map(|c| {
                                if (r, c) == e.world.start() {
                                    'S'
                                } else if e.world.is_free((r, c)) {
                                    '.'
                                } else {
                                    '#'
                                }
                            })
                            .collect();
                        let _ = writeln!(s, "{row}");
                    }
                    let _ = writeln!(s, "motion {:?} steps {}", e.trajectory.motion, e.len());
                    for (t, (p, q)) in e.trajectory.positions.iter().zip(&e.queries).enumerate() {
                        match q {
                            Some(q) => {
                                let _ = writeln!(s, "{t} {} {} query {} {}", p.0, p.1, q.0, q.1);
                            }
                            None => {
                                let _ = writeln!(s, "{t} {} {}", p.0, p.1);
                            }
                        }
                    }
                }
            }
        }
        s
    }
}

fn put_bits(out: &mut Vec<u8>, vectors: &[BitVec]) {
    for v in vectors {
        out.extend_from_slice(v);
    }
}

fn get_bits(r: &mut Reader, length: usize, dim: usize) -> Result<Vec<BitVec>> {
    let raw = r.bytes(length * dim)?;
    if raw.iter().any(|b| *b > 1) {
        return r.corrupt("bit value other than 0 or 1");
    }
    Ok(raw.chunks_exact(dim).map(<[u8]>::to_vec).collect())
}

fn get_mapping(r: &mut Reader, i: usize, n: usize, m: usize, k: usize) -> Result<MappingEpisode> {
    let bad = |detail: String| Error::Corrupt {
        what: "test set",
        detail: format!("instance {i}: {detail}"),
    };
    let motion = match r.bytes(1)?[0] {
        0 => Motion::Spiral,
        1 => Motion::Random,
        v => return Err(bad(format!("unknown motion {v}"))),
    };
    let raw = r.bytes(n * n)?;
    if raw.iter().any(|b| *b > 1) {
        return Err(bad("cell value other than 0 or 1".into()));
    }
    let start = (r.u32()? as usize, r.u32()? as usize);
    let world = MazeWorld::new(n, raw.iter().map(|b| *b == 1).collect(), start)
        .map_err(|e| bad(e.to_string()))?;
    let steps = r.len(r.remaining() / 16, "step count")?;
    if steps == 0 {
        return Err(bad("empty trajectory".into()));
    }
    let mut positions = Vec::with_capacity(steps);
    for _ in 0..steps {
        positions.push((r.u32()? as usize, r.u32()? as usize));
    }
    let canvas = canvas_size(n) as i32;
    let mut queries = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (qr, qc) = (r.i32()?, r.i32()?);
        queries.push(match (qr, qc) {
            (-1, -1) => None,
            (a, b) if (0..canvas).contains(&a) && (0..canvas).contains(&b) => {
                Some((a as usize, b as usize))
            }
            _ => return Err(bad(format!("query centre ({qr}, {qc}) off the canvas"))),
        });
    }
    let trajectory = Trajectory { positions, motion };
    if !trajectory.is_valid(&world) {
        return Err(bad("trajectory leaves free space or jumps".into()));
    }
    if trajectory.positions[0] != world.start() {
        return Err(bad("trajectory does not begin at the start".into()));
    }
    let ep = MappingEpisode {
        world,
        trajectory,
        m,
        k,
        queries,
    };
    // every query must refer to an already explored patch
    ep.steps().map_err(|e| bad(e.to_string()))?;
    Ok(ep)
}
