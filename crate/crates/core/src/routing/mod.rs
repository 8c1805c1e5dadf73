//! Information flow through a multigrid stack, ignoring weights.
//!
//! A node is `(layer, level, row, col)`, all 1-indexed, with level 1 the
//! coarsest grid. Between consecutive layers information moves through a
//! 3×3 convolution on the same level, through 2× nearest-neighbour
//! upsampling plus convolution to the next finer level, and through 2×2
//! pooling plus convolution to the next coarser level. [`reachable`] does
//! an exhaustive search over that graph; [`verify_prop1`] checks that a
//! source in the corner of the coarsest grid reaches at least the box
//! `[1, (m − n + 2)·2^{n−1} − 1]²` of level `n` at layer `m`.

use std::collections::VecDeque;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeKinds {
    pub same: bool,
    pub up: bool,
    pub down: bool,
}

impl Default for EdgeKinds {
    fn default() -> Self {
        EdgeKinds {
            same: true,
            up: true,
            down: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologySpec {
    pub layers: usize,
    pub levels: usize,
    /// Side of the coarsest grid; level `n` has side `base·2^{n−1}`.
    pub base: usize,
    #[serde(default)]
    pub edges: EdgeKinds,
}

impl TopologySpec {
    pub fn new(layers: usize, levels: usize, base: usize) -> Result<Self> {
        let s = TopologySpec {
            layers,
            levels,
            base,
            edges: EdgeKinds::default(),
        };
        s.validate()?;
        Ok(s)
    }

    /// Single-level stack of plain 3×3 convolutions.
    pub fn single_grid(layers: usize, side: usize) -> Result<Self> {
        TopologySpec::new(layers, 1, side)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.levels == 0 || self.base == 0 {
            return Err(Error::Invalid("topology needs at least one layer, level and cell".into()));
        }
        if self.levels > 16 || self.base.checked_shl(self.levels as u32 - 1).is_none() {
            return Err(Error::Invalid("too many levels".into()));
        }
        Ok(())
    }

    pub fn resolution(&self, level: usize) -> usize {
        self.base << (level - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Node {
    pub layer: usize,
    pub level: usize,
    pub row: usize,
    pub col: usize,
}

impl Node {
    pub fn new(layer: usize, level: usize, row: usize, col: usize) -> Self {
        Node {
            layer,
            level,
            row,
            col,
        }
    }
}

fn in_spec(spec: &TopologySpec, n: &Node) -> bool {
    (1..=spec.layers).contains(&n.layer)
        && (1..=spec.levels).contains(&n.level)
        && (1..=spec.resolution(n.level)).contains(&n.row)
        && (1..=spec.resolution(n.level)).contains(&n.col)
}

/// Indices `lo..=hi` widened by one and clipped to `1..=res`.
fn halo(lo: usize, hi: usize, res: usize) -> std::ops::RangeInclusive<usize> {
    lo.saturating_sub(1).max(1)..=(hi + 1).min(res)
}

/// Successors of `node` in the next layer.
pub fn neighbors(node: &Node, spec: &TopologySpec) -> Vec<Node> {
    let mut out = Vec::new();
    if node.layer >= spec.layers || !in_spec(spec, node) {
        return out;
    }
    let next = node.layer + 1;
    let mut push_box = |level: usize, rows: std::ops::RangeInclusive<usize>, cols: std::ops::RangeInclusive<usize>| {
        for r in rows {
            for c in cols.clone() {
                out.push(Node::new(next, level, r, c));
            }
        }
    };
    let n = node.level;
    if spec.edges.same {
        let res = spec.resolution(n);
        push_box(n, halo(node.row, node.row, res), halo(node.col, node.col, res));
    }
    if spec.edges.up && n < spec.levels {
        let res = spec.resolution(n + 1);
        push_box(
            n + 1,
            halo(2 * node.row - 1, 2 * node.row, res),
            halo(2 * node.col - 1, 2 * node.col, res),
        );
    }
    if spec.edges.down && n > 1 {
        let res = spec.resolution(n - 1);
        let (pr, pc) = (node.row.div_ceil(2), node.col.div_ceil(2));
        push_box(n - 1, halo(pr, pr, res), halo(pc, pc, res));
    }
    out
}

/// Per-grid bitmaps of reached nodes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReachSet {
    spec: TopologySpec,
    /// `[layer-1][level-1]`, row-major over the level's grid.
    grids: Vec<Vec<Vec<bool>>>,
}

impl ReachSet {
    fn empty(spec: &TopologySpec) -> Self {
        ReachSet {
            spec: *spec,
            grids: (0..spec.layers)
                .map(|_| {
                    (1..=spec.levels)
                        .map(|n| vec![false; spec.resolution(n).pow(2)])
                        .collect()
                })
                .collect(),
        }
    }

    fn slot(&mut self, n: &Node) -> &mut bool {
        let res = self.spec.resolution(n.level);
        &mut self.grids[n.layer - 1][n.level - 1][(n.row - 1) * res + n.col - 1]
    }

    pub fn contains(&self, n: &Node) -> bool {
        in_spec(&self.spec, n) && {
            let res = self.spec.resolution(n.level);
            self.grids[n.layer - 1][n.level - 1][(n.row - 1) * res + n.col - 1]
        }
    }

    pub fn grid(&self, layer: usize, level: usize) -> &[bool] {
        &self.grids[layer - 1][level - 1]
    }

    pub fn count(&self, layer: usize, level: usize) -> usize {
        self.grid(layer, level).iter().filter(|b| **b).count()
    }

    /// Bounding box `(row_min, row_max, col_min, col_max)` of the reached
    /// nodes of one grid.
    pub fn bounding_box(&self, layer: usize, level: usize) -> Option<(usize, usize, usize, usize)> {
        let res = self.spec.resolution(level);
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for (i, _) in self.grid(layer, level).iter().enumerate().filter(|(_, b)| **b) {
            let (r, c) = (i / res + 1, i % res + 1);
            bb = Some(match bb {
                None => (r, r, c, c),
                Some((a, b, x, y)) => (a.min(r), b.max(r), x.min(c), y.max(c)),
            });
        }
        bb
    }

    /// Largest row or column index reached in a grid (0 if none).
    pub fn max_extent(&self, layer: usize, level: usize) -> usize {
        self.bounding_box(layer, level)
            .map_or(0, |(_, r, _, c)| r.max(c))
    }

    /// Whether `[1, side]²` of the grid is entirely reached.
    pub fn contains_box(&self, layer: usize, level: usize, side: usize) -> bool {
        self.first_missing(layer, level, side).is_none()
    }

    fn first_missing(&self, layer: usize, level: usize, side: usize) -> Option<Node> {
        let side = side.min(self.spec.resolution(level));
        for r in 1..=side {
            for c in 1..=side {
                let n = Node::new(layer, level, r, c);
                if !self.contains(&n) {
                    return Some(n);
                }
            }
        }
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Discipline {
    /// Breadth-first (queue).
    Fifo,
    /// Depth-first (stack).
    Lifo,
}

/// Every node reachable from `source` through layers `source.layer..=M`.
pub fn reachable(spec: &TopologySpec, source: Node) -> Result<ReachSet> {
    reachable_with(spec, source, Discipline::Fifo)
}

pub fn reachable_with(spec: &TopologySpec, source: Node, order: Discipline) -> Result<ReachSet> {
    spec.validate()?;
    if !in_spec(spec, &source) {
        return Err(Error::Invalid(format!("source {source:?} outside the topology")));
    }
    let mut reach = ReachSet::empty(spec);
    let mut work = VecDeque::new();
    *reach.slot(&source) = true;
    work.push_back(source);
    while let Some(n) = match order {
        Discipline::Fifo => work.pop_front(),
        Discipline::Lifo => work.pop_back(),
    } {
        for s in neighbors(&n, spec) {
            let slot = reach.slot(&s);
            if !*slot {
                *slot = true;
                work.push_back(s);
            }
        }
    }
    Ok(reach)
}

/// Side of the box guaranteed at layer `m`, level `n`.
pub fn prop1_bound(m: usize, n: usize) -> usize {
    (m + 2 - n) * (1 << (n - 1)) - 1
}

/// Reach extent of a plain single-grid 3×3 stack from a corner after `m`
/// layers.
pub fn baseline_extent(m: usize) -> usize {
    m
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Prop1Row {
    pub m: usize,
    pub n: usize,
    pub bound: usize,
    pub actual_max_extent: usize,
    pub contains_bound: bool,
}

/// Bound against observed reach for every `n ≤ m`, `m ≤ m_max`,
/// `n ≤ n_max`, from `(1, 1)` on the coarsest grid of layer 1.
pub fn prop1_report(spec: &TopologySpec, m_max: usize, n_max: usize) -> Result<Vec<Prop1Row>> {
    if n_max == 0 || m_max < n_max {
        return Err(Error::Invalid(format!("need m_max ≥ n_max ≥ 1, got {m_max}, {n_max}")));
    }
    if spec.layers < m_max || spec.levels < n_max {
        return Err(Error::Invalid(format!(
            "topology of {} layers × {} levels is smaller than {m_max} × {n_max}",
            spec.layers, spec.levels
        )));
    }
    for n in 1..=n_max {
        let need = (n..=m_max).map(|m| prop1_bound(m, n)).max().unwrap_or(0);
        if spec.resolution(n) < need {
            return Err(Error::Invalid(format!(
                "level {n} has side {}, the bound needs {need}",
                spec.resolution(n)
            )));
        }
    }
    let reach = reachable(spec, Node::new(1, 1, 1, 1))?;
    let mut rows = Vec::new();
    for m in 1..=m_max {
        for n in 1..=n_max.min(m) {
            let bound = prop1_bound(m, n);
            rows.push(Prop1Row {
                m,
                n,
                bound,
                actual_max_extent: reach.max_extent(m, n),
                contains_bound: reach.contains_box(m, n, bound),
            });
        }
    }
    Ok(rows)
}

/// Like [`prop1_report`] but fails at the first violated bound, naming the
/// first missing node.
pub fn verify_prop1(spec: &TopologySpec, m_max: usize, n_max: usize) -> Result<Vec<Prop1Row>> {
    let rows = prop1_report(spec, m_max, n_max)?;
    if let Some(bad) = rows.iter().find(|r| !r.contains_bound) {
        let reach = reachable(spec, Node::new(1, 1, 1, 1))?;
        let missing = reach.first_missing(bad.m, bad.n, bad.bound);
        return Err(Error::Routing(format!(
            "layer {} level {}: box of side {} not reached, first missing {:?}",
            bad.m, bad.n, bad.bound, missing
        )));
    }
    Ok(rows)
}

/// Shallowest layer at which the whole grid of `level` is reached, if any.
pub fn full_coverage_depth(reach: &ReachSet, level: usize) -> Option<usize> {
    (1..=reach.spec.layers).find(|&m| reach.grid(m, level).iter().all(|b| *b))
}

pub fn report_csv(rows: &[Prop1Row]) -> String {
    let mut s = String::from("m,n,bound,actual_max_extent,contains_bound\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.m, r.n, r.bound, r.actual_max_extent, r.contains_bound
        );
    }
    s
}

/// Binary PPM (P6) of one grid: reached cells blue, others white, the
/// source corner marked red, each cell drawn as `scale × scale` pixels.
pub fn reach_ppm(reach: &ReachSet, layer: usize, level: usize, scale: usize) -> Vec<u8> {
    let res = reach.spec.resolution(level);
    let scale = scale.max(1);
    let side = res * scale;
    let mut out = format!("P6\n{side} {side}\n255\n").into_bytes();
    let grid = reach.grid(layer, level);
    for y in 0..side {
        for x in 0..side {
            let (r, c) = (y / scale, x / scale);
            let px: [u8; 3] = if r == 0 && c == 0 && level == 1 && layer == 1 {
                [220, 40, 40]
            } else if grid[r * res + c] {
                [60, 90, 220]
            } else {
                [255, 255, 255]
            };
            out.extend_from_slice(&px);
        }
    }
    out
}
