use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensorcore::{Graph, Scalar, Shape, Tensor, Var};

/// One grid of a pyramid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LevelSpec {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
}

impl LevelSpec {
    pub const fn new(rows: usize, cols: usize, channels: usize) -> Self {
        LevelSpec {
            rows,
            cols,
            channels,
        }
    }

    pub fn shape(&self, batch: usize) -> Shape {
        Shape::new(batch, self.rows, self.cols, self.channels)
    }

    pub fn same_grid(&self, rows: usize, cols: usize) -> bool {
        self.rows == rows && self.cols == cols
    }
}

/// Levels of a pyramid ordered coarse to fine; adjacent levels differ by a
/// factor of two per side.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<LevelSpec>", into = "Vec<LevelSpec>")]
pub struct PyramidSpec {
    levels: Vec<LevelSpec>,
}

impl TryFrom<Vec<LevelSpec>> for PyramidSpec {
    type Error = Error;

    fn try_from(levels: Vec<LevelSpec>) -> Result<Self> {
        PyramidSpec::new(levels)
    }
}

impl From<PyramidSpec> for Vec<LevelSpec> {
    fn from(p: PyramidSpec) -> Self {
        p.levels
    }
}

impl PyramidSpec {
    pub fn new(levels: Vec<LevelSpec>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Invalid("a pyramid needs at least one level".into()));
        }
        for l in &levels {
            if l.rows == 0 || l.cols == 0 || l.channels == 0 {
                return Err(Error::Invalid(format!("empty pyramid level {l:?}")));
            }
        }
        for w in levels.windows(2) {
            if w[1].rows != 2 * w[0].rows || w[1].cols != 2 * w[0].cols {
                return Err(Error::Invalid(format!(
                    "adjacent levels {}x{} and {}x{} do not differ by a factor of two",
                    w[0].rows, w[0].cols, w[1].rows, w[1].cols
                )));
            }
        }
        Ok(PyramidSpec { levels })
    }

    /// Uniform channel count over grids `coarsest·2^k` for `k in 0..count`.
    pub fn geometric(rows: usize, cols: usize, count: usize, channels: usize) -> Result<Self> {
        PyramidSpec::new(
            (0..count)
                .map(|k| LevelSpec::new(rows << k, cols << k, channels))
                .collect(),
        )
    }

    pub fn levels(&self) -> &[LevelSpec] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn level(&self, j: usize) -> &LevelSpec {
        &self.levels[j]
    }

    pub fn finest(&self) -> &LevelSpec {
        self.levels.last().expect("non-empty pyramid")
    }

    pub fn find(&self, rows: usize, cols: usize) -> Option<usize> {
        self.levels.iter().position(|l| l.same_grid(rows, cols))
    }

    /// Same channel layout with every spatial extent multiplied by `factor`.
    pub fn scaled(&self, factor: usize) -> Self {
        PyramidSpec {
            levels: self
                .levels
                .iter()
                .map(|l| LevelSpec::new(l.rows * factor, l.cols * factor, l.channels))
                .collect(),
        }
    }

    /// Channel count of the multigrid input assembled for a `rows × cols`
    /// output grid: the sum over present coarser, same and finer neighbours.
    pub fn assembled_channels(&self, rows: usize, cols: usize) -> usize {
        self.neighbours(rows, cols)
            .into_iter()
            .flatten()
            .map(|j| self.levels[j].channels)
            .sum()
    }

    /// Indices of the `[coarser, same, finer]` neighbours of a grid size.
    pub fn neighbours(&self, rows: usize, cols: usize) -> [Option<usize>; 3] {
        let coarser = if rows.is_multiple_of(2) && cols.is_multiple_of(2) {
            self.find(rows / 2, cols / 2)
        } else {
            None
        };
        [coarser, self.find(rows, cols), self.find(rows * 2, cols * 2)]
    }

    /// Channel-wise union with another pyramid: grids present in both get
    /// `self` channels followed by `other` channels.
    pub fn merged(&self, other: &PyramidSpec) -> Result<PyramidSpec> {
        let mut grids: Vec<(usize, usize)> = self
            .levels
            .iter()
            .chain(&other.levels)
            .map(|l| (l.rows, l.cols))
            .collect();
        grids.sort_unstable();
        grids.dedup();
        let levels = grids
            .into_iter()
            .map(|(r, c)| {
                let ch = self.find(r, c).map_or(0, |j| self.levels[j].channels)
                    + other.find(r, c).map_or(0, |j| other.levels[j].channels);
                LevelSpec::new(r, c, ch)
            })
            .collect();
        PyramidSpec::new(levels)
    }

    /// Scalar count of `(h, c)` over all levels.
    pub fn state_values(&self, batch: usize) -> usize {
        self.levels
            .iter()
            .map(|l| 2 * batch * l.rows * l.cols * l.channels)
            .sum()
    }
}

/// Per-level activations recorded in a graph, coarse to fine.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pyramid {
    pub levels: Vec<Var>,
}

impl Pyramid {
    pub fn new(levels: Vec<Var>) -> Self {
        Pyramid { levels }
    }

    pub fn single(v: Var) -> Self {
        Pyramid { levels: vec![v] }
    }

    /// Checks the recorded shapes against `spec` and returns the batch size.
    pub fn check<T: Scalar>(&self, g: &Graph<T>, spec: &PyramidSpec) -> Result<usize> {
        if self.levels.len() != spec.len() {
            return shape_err(format!(
                "pyramid has {} levels, spec {}",
                self.levels.len(),
                spec.len()
            ));
        }
        let batch = g.shape(self.levels[0]).batch;
        for (v, l) in self.levels.iter().zip(spec.levels()) {
            let s = g.shape(*v);
            if s != l.shape(batch) {
                return shape_err(format!("pyramid level {s} does not match {:?}", l));
            }
        }
        Ok(batch)
    }

    /// Merges channel-wise with `other` following [`PyramidSpec::merged`].
    pub fn merged<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        own: &PyramidSpec,
        other: &Pyramid,
        other_spec: &PyramidSpec,
    ) -> Result<Pyramid> {
        let spec = own.merged(other_spec)?;
        let mut levels = Vec::with_capacity(spec.len());
        for l in spec.levels() {
            let mut parts = Vec::with_capacity(2);
            if let Some(j) = own.find(l.rows, l.cols) {
                parts.push(self.levels[j]);
            }
            if let Some(j) = other_spec.find(l.rows, l.cols) {
                parts.push(other.levels[j]);
            }
            levels.push(g.concat_channels(&parts)?);
        }
        Ok(Pyramid { levels })
    }

    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> Vec<Tensor<T>> {
        self.levels.iter().map(|v| g.value(*v).clone()).collect()
    }
}

/// Builds the multigrid input for an output grid of `rows × cols`:
/// `[↑ coarser] ⊕ [same] ⊕ [↓ finer]`, skipping absent neighbours.
pub fn assemble_for<T: Scalar>(
    g: &mut Graph<T>,
    p: &Pyramid,
    spec: &PyramidSpec,
    rows: usize,
    cols: usize,
) -> Result<Var> {
    let [coarser, same, finer] = spec.neighbours(rows, cols);
    let mut parts = Vec::with_capacity(3);
    if let Some(j) = coarser {
        parts.push(g.upsample2(p.levels[j])?);
    }
    if let Some(j) = same {
        parts.push(p.levels[j]);
    }
    if let Some(j) = finer {
        parts.push(g.maxpool2(p.levels[j])?);
    }
    if parts.is_empty() {
        return shape_err(format!(
            "no level of the input pyramid neighbours a {rows}x{cols} grid"
        ));
    }
    g.concat_channels(&parts)
}

/// Multigrid input for level `j` of `p` itself.
pub fn assemble_input<T: Scalar>(
    g: &mut Graph<T>,
    p: &Pyramid,
    spec: &PyramidSpec,
    j: usize,
) -> Result<Var> {
    let l = spec
        .levels()
        .get(j)
        .ok_or_else(|| Error::Invalid(format!("level {j} not in pyramid")))?;
    assemble_for(g, p, spec, l.rows, l.cols)
}
