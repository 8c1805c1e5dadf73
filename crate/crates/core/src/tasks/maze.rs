use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid position `(row, col)`, 0-indexed.
pub type Pos = (usize, usize);

const MOVES: [(isize, isize); 4] = [(-1, 0), (0, 1), (1, 0), (0, -1)];

/// Square occupancy grid; everything outside it counts as wall.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MazeWorld {
    n: usize,
    walls: Vec<bool>,
    start: Pos,
}

impl MazeWorld {
    pub fn new(n: usize, walls: Vec<bool>, start: Pos) -> Result<Self> {
        if n == 0 || walls.len() != n * n {
            return Err(Error::Invalid(format!(
                "{} cells for a {n}x{n} world",
                walls.len()
            )));
        }
        if start.0 >= n || start.1 >= n || walls[start.0 * n + start.1] {
            return Err(Error::Invalid(format!("start {start:?} is not a free cell")));
        }
        let w = MazeWorld { n, walls, start };
        if !w.is_connected() {
            return Err(Error::Invalid("free space is not 4-connected".into()));
        }
        Ok(w)
    }

    /// Wall-free `n × n` world starting at the centre.
    pub fn open(n: usize) -> Self {
        MazeWorld {
            n,
            walls: vec![false; n * n],
            start: (n / 2, n / 2),
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn start(&self) -> Pos {
        self.start
    }

    pub fn cells(&self) -> &[bool] {
        &self.walls
    }

    /// Out-of-world coordinates read as wall.
    pub fn is_wall(&self, r: isize, c: isize) -> bool {
        if r < 0 || c < 0 || r >= self.n as isize || c >= self.n as isize {
            return true;
        }
        self.walls[r as usize * self.n + c as usize]
    }

    pub fn is_free(&self, p: Pos) -> bool {
        !self.is_wall(p.0 as isize, p.1 as isize)
    }

    pub fn wall_count(&self) -> usize {
        self.walls.iter().filter(|w| **w).count()
    }

    /// Component label per free cell (`usize::MAX` on walls) and the
    /// number of components.
    fn components(&self) -> (Vec<usize>, usize) {
        let n = self.n;
        let mut label = vec![usize::MAX; n * n];
        let mut count = 0;
        let mut queue = VecDeque::new();
        for s in 0..n * n {
            if self.walls[s] || label[s] != usize::MAX {
                continue;
            }
            label[s] = count;
            queue.push_back(s);
            while let Some(i) = queue.pop_front() {
                let (r, c) = ((i / n) as isize, (i % n) as isize);
                for (dr, dc) in MOVES {
                    let (rr, cc) = (r + dr, c + dc);
                    if !self.is_wall(rr, cc) {
                        let j = rr as usize * n + cc as usize;
                        if label[j] == usize::MAX {
                            label[j] = count;
                            queue.push_back(j);
                        }
                    }
                }
            }
            count += 1;
        }
        (label, count)
    }

    pub fn is_connected(&self) -> bool {
        self.components().1 <= 1
    }

    fn step(&self, p: Pos, dir: usize) -> Option<Pos> {
        let (dr, dc) = MOVES[dir];
        let (r, c) = (p.0 as isize + dr, p.1 as isize + dc);
        (!self.is_wall(r, c)).then_some((r as usize, c as usize))
    }
}

/// Random maze: every cell becomes a wall with probability `density`, the
/// centre is cleared, then walls are removed in a random order until the
/// free space is connected. A removal is only made where it joins two
/// components, falling back to growing the start's component when no such
/// single wall exists.
pub fn gen_maze(n: usize, density: f64, rng: &mut impl Rng) -> Result<MazeWorld> {
    if n < 5 || n.is_multiple_of(2) {
        return Err(Error::Invalid(format!("maze size must be odd and at least 5, got {n}")));
    }
    if !(0.0..=0.35).contains(&density) {
        return Err(Error::Invalid(format!("wall density {density} outside [0, 0.35]")));
    }
    let start = (n / 2, n / 2);
    let mut walls: Vec<bool> = (0..n * n).map(|_| rng.gen_bool(density)).collect();
    walls[start.0 * n + start.1] = false;
    let mut order: Vec<usize> = (0..n * n).filter(|i| walls[*i]).collect();
    order.shuffle(rng);
    let mut w = MazeWorld { n, walls, start };
    loop {
        let (label, count) = w.components();
        if count <= 1 {
            return Ok(w);
        }
        let touching = |i: usize| -> Vec<usize> {
            let (r, c) = ((i / n) as isize, (i % n) as isize);
            let mut ls: Vec<usize> = MOVES
                .iter()
                .filter(|(dr, dc)| !w.is_wall(r + dr, c + dc))
                .map(|(dr, dc)| label[(r + dr) as usize * n + (c + dc) as usize])
                .collect();
            ls.sort_unstable();
            ls.dedup();
            ls
        };
        let home = label[start.0 * n + start.1];
        let pick = order
            .iter()
            .position(|&i| touching(i).len() >= 2)
            .or_else(|| order.iter().position(|&i| touching(i).contains(&home)))
            .expect("a disconnected grid always has a wall next to the start component");
        let i = order.remove(pick);
        w.walls[i] = false;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    Spiral,
    Random,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trajectory {
    pub positions: Vec<Pos>,
    pub motion: Motion,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Every position free and consecutive positions at most one cardinal
    /// step apart.
    pub fn is_valid(&self, world: &MazeWorld) -> bool {
        self.positions.iter().all(|p| world.is_free(*p))
            && self.positions.windows(2).all(|w| {
                let d = w[0].0.abs_diff(w[1].0) + w[0].1.abs_diff(w[1].1);
                d <= 1
            })
    }
}

/// Outward square spiral from the start (right, down, left, up with arm
/// lengths 1, 1, 2, 2, 3, 3, ...). Stops after `steps` positions or once
/// the centred square of side `n − 2·margin` is covered. Only defined on
/// wall-free worlds.
pub fn spiral_trajectory(world: &MazeWorld, steps: usize, margin: usize) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::Invalid("trajectory length must be at least 1".into()));
    }
    if world.wall_count() > 0 {
        return Err(Error::Invalid("spiral motion needs a wall-free world".into()));
    }
    let n = world.size();
    if 2 * margin >= n {
        return Err(Error::Invalid(format!("margin {margin} leaves no interior in a {n}x{n} world")));
    }
    let side = n - 2 * margin;
    let (sr, sc) = world.start();
    let half = side / 2;
    if sr < margin + half || sc < margin + half || sr + half >= n - margin || sc + half >= n - margin {
        return Err(Error::Invalid("spiral interior must be centred on the start".into()));
    }
    let total = steps.min(side * side);
    let mut positions = Vec::with_capacity(total);
    let (mut r, mut c) = (sr as isize, sc as isize);
    positions.push((sr, sc));
    let dirs = [(0isize, 1isize), (1, 0), (0, -1), (-1, 0)];
    let mut arm = 1;
    'outer: loop {
        for (k, (dr, dc)) in dirs.iter().enumerate() {
            for _ in 0..arm {
                if positions.len() >= total {
                    break 'outer;
                }
                r += dr;
                c += dc;
                positions.push((r as usize, c as usize));
            }
            if k % 2 == 1 {
                arm += 1;
            }
        }
    }
    Ok(Trajectory {
        positions,
        motion: Motion::Spiral,
    })
}

/// Random walk: each step draws one of the four directions uniformly and
/// redraws while the move is blocked.
pub fn random_walk(world: &MazeWorld, steps: usize, rng: &mut impl Rng) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::Invalid("trajectory length must be at least 1".into()));
    }
    let mut p = world.start();
    if (0..4).all(|d| world.step(p, d).is_none()) {
        return Ok(Trajectory {
            positions: vec![p; steps],
            motion: Motion::Random,
        });
    }
    let mut positions = Vec::with_capacity(steps);
    positions.push(p);
    while positions.len() < steps {
        p = loop {
            if let Some(q) = world.step(p, rng.gen_range(0..4)) {
                break q;
            }
        };
        positions.push(p);
    }
    Ok(Trajectory {
        positions,
        motion: Motion::Random,
    })
}

/// What the agent sees at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub m: usize,
    /// `m × m`, row-major, `true` = wall.
    pub patch: Vec<bool>,
    /// Displacement from the start divided by `n − 1`.
    pub drow: f32,
    pub dcol: f32,
}

pub fn observe(world: &MazeWorld, pos: Pos, m: usize) -> Result<Observation> {
    if m.is_multiple_of(2) {
        return Err(Error::Invalid(format!("patch size {m} must be odd")));
    }
    if !world.is_free(pos) {
        return Err(Error::Invalid(format!("agent at {pos:?} stands on a wall")));
    }
    let h = (m / 2) as isize;
    let mut patch = Vec::with_capacity(m * m);
    for dr in -h..=h {
        for dc in -h..=h {
            patch.push(world.is_wall(pos.0 as isize + dr, pos.1 as isize + dc));
        }
    }
    let scale = (world.size().max(2) - 1) as f32;
    let s = world.start();
    Ok(Observation {
        m,
        patch,
        drow: (pos.0 as f32 - s.0 as f32) / scale,
        dcol: (pos.1 as f32 - s.1 as f32) / scale,
    })
}

/// Side of the start-centred canvas for an `n × n` world.
pub fn canvas_size(n: usize) -> usize {
    2 * n - 1
}

/// Canvas index of a world position: `p − start + (n − 1)`.
pub fn to_canvas(world: &MazeWorld, p: Pos) -> Pos {
    let n = world.size();
    (
        p.0 + n - 1 - world.start().0,
        p.1 + n - 1 - world.start().1,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Seen {
    Unknown,
    Wall,
    Free,
}

/// Explored map on the start-centred canvas.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeenMap {
    size: usize,
    cells: Vec<Seen>,
}

impl SeenMap {
    pub fn new(size: usize) -> Self {
        SeenMap {
            size,
            cells: vec![Seen::Unknown; size * size],
        }
    }

    pub fn for_world(world: &MazeWorld) -> Self {
        SeenMap::new(canvas_size(world.size()))
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, r: usize, c: usize) -> Seen {
        self.cells[r * self.size + c]
    }

    pub fn cells(&self) -> &[Seen] {
        &self.cells
    }

    /// Records the `m × m` patch around `pos`; cells beyond the world are
    /// recorded as walls, cells beyond the canvas are dropped.
    pub fn record(&mut self, world: &MazeWorld, pos: Pos, m: usize) {
        let h = (m / 2) as isize;
        let n = world.size() as isize;
        let (sr, sc) = (world.start().0 as isize, world.start().1 as isize);
        for dr in -h..=h {
            for dc in -h..=h {
                let (r, c) = (pos.0 as isize + dr, pos.1 as isize + dc);
                let (cr, cc) = (r - sr + n - 1, c - sc + n - 1);
                if cr < 0 || cc < 0 || cr >= self.size as isize || cc >= self.size as isize {
                    continue;
                }
                self.cells[cr as usize * self.size + cc as usize] = if world.is_wall(r, c) {
                    Seen::Wall
                } else {
                    Seen::Free
                };
            }
        }
    }

    /// `k × k` window centred at `(r, c)`, if it lies on the canvas and is
    /// fully seen.
    pub fn window(&self, r: usize, c: usize, k: usize) -> Option<Vec<Seen>> {
        let h = k / 2;
        if r < h || c < h || r + h >= self.size || c + h >= self.size {
            return None;
        }
        let mut out = Vec::with_capacity(k * k);
        for i in r - h..=r + h {
            for j in c - h..=c + h {
                let s = self.get(i, j);
                if s == Seen::Unknown {
                    return None;
                }
                out.push(s);
            }
        }
        Some(out)
    }

    pub fn eligible_centres(&self, k: usize) -> Vec<Pos> {
        let mut out = Vec::new();
        for r in 0..self.size {
            for c in 0..self.size {
                if self.window(r, c, k).is_some() {
                    out.push((r, c));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LocalizationQuery {
    pub k: usize,
    /// Canvas position the patch was taken from.
    pub centre: Pos,
    /// `k × k`, row-major, `true` = wall.
    pub patch: Vec<bool>,
    /// Canvas-sized, row-major: every fully seen position with the same
    /// `k × k` content.
    pub mask: Vec<bool>,
}

/// Query for the patch at `centre`, which must be fully seen.
pub fn query_at(seen: &SeenMap, centre: Pos, k: usize) -> Result<LocalizationQuery> {
    let content = seen
        .window(centre.0, centre.1, k)
        .ok_or_else(|| Error::Invalid(format!("patch at {centre:?} is not fully seen")))?;
    let size = seen.size();
    let mut mask = vec![false; size * size];
    for (r, c) in seen.eligible_centres(k) {
        if seen.window(r, c, k).as_deref() == Some(&content[..]) {
            mask[r * size + c] = true;
        }
    }
    Ok(LocalizationQuery {
        k,
        centre,
        patch: content.iter().map(|s| *s == Seen::Wall).collect(),
        mask,
    })
}

/// Query at a centre drawn uniformly among fully seen `k × k` windows.
pub fn sample_query(seen: &SeenMap, k: usize, rng: &mut impl Rng) -> Result<LocalizationQuery> {
    if k.is_multiple_of(2) {
        return Err(Error::Invalid(format!("query size {k} must be odd")));
    }
    let centres = seen.eligible_centres(k);
    let centre = *centres
        .choose(rng)
        .ok_or_else(|| Error::Invalid("no fully seen query patch yet".into()))?;
    query_at(seen, centre, k)
}
