use std::collections::HashSet;

use rand::Rng;

use crate::error::{Error, Result};

/// Binary vector, one byte (0 or 1) per element.
pub type BitVec = Vec<u8>;

#[derive(Clone, Debug, PartialEq)]
pub struct SortInstance {
    pub vectors: Vec<BitVec>,
    pub priorities: Vec<f32>,
    /// `vectors` in ascending priority order.
    pub target: Vec<BitVec>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecallInstance {
    pub vectors: Vec<BitVec>,
    /// 0-based index of the queried vector; never the last one.
    pub query: usize,
}

impl RecallInstance {
    pub fn query_vector(&self) -> &BitVec {
        &self.vectors[self.query]
    }

    pub fn target(&self) -> &BitVec {
        &self.vectors[self.query + 1]
    }
}

fn bits(d: usize, rng: &mut impl Rng) -> BitVec {
    (0..d).map(|_| rng.gen_range(0..2u8)).collect()
}

fn check(l: usize, d: usize) -> Result<()> {
    if l < 2 || d < 1 {
        return Err(Error::Invalid(format!(
            "sequence length {l} / vector size {d}: need at least 2 vectors of 1 bit"
        )));
    }
    Ok(())
}

/// Sorted target from vectors and priorities.
pub fn sort_by_priority(vectors: &[BitVec], priorities: &[f32]) -> Vec<BitVec> {
    let mut idx: Vec<usize> = (0..vectors.len()).collect();
    idx.sort_by(|a, b| priorities[*a].total_cmp(&priorities[*b]));
    idx.into_iter().map(|i| vectors[i].clone()).collect()
}

pub fn sort_instance(vectors: Vec<BitVec>, priorities: Vec<f32>) -> Result<SortInstance> {
    if vectors.len() != priorities.len() {
        return Err(Error::Invalid("one priority per vector".into()));
    }
    let distinct: HashSet<u32> = priorities.iter().map(|p| p.to_bits()).collect();
    if distinct.len() != priorities.len() || priorities.iter().any(|p| !p.is_finite()) {
        return Err(Error::Invalid("priorities must be finite and distinct".into()));
    }
    let target = sort_by_priority(&vectors, &priorities);
    Ok(SortInstance {
        vectors,
        priorities,
        target,
    })
}

pub fn gen_sort(l: usize, d: usize, rng: &mut impl Rng) -> Result<SortInstance> {
    check(l, d)?;
    let vectors: Vec<BitVec> = (0..l).map(|_| bits(d, rng)).collect();
    let mut priorities: Vec<f32> = Vec::with_capacity(l);
    while priorities.len() < l {
        let p: f32 = rng.gen();
        if !priorities.contains(&p) {
            priorities.push(p);
        }
    }
    sort_instance(vectors, priorities)
}

pub fn gen_recall(l: usize, d: usize, rng: &mut impl Rng) -> Result<RecallInstance> {
    check(l, d)?;
    if d < usize::BITS as usize && (1usize << d) <= l {
        return Err(Error::Invalid(format!(
            "{l} distinct vectors do not fit in {d} bits"
        )));
    }
    let mut vectors: Vec<BitVec> = Vec::with_capacity(l);
    while vectors.len() < l {
        let v = bits(d, rng);
        if !vectors.contains(&v) {
            vectors.push(v);
        }
    }
    let query = rng.gen_range(0..l - 1);
    Ok(RecallInstance { vectors, query })
}
