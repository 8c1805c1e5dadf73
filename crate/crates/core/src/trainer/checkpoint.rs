//! Binary checkpoint, little-endian throughout:
//!
//! ```text
//! "MGMC" | u32 version
//! u32 len | network spec JSON
//! u32 count | count × tensor           parameters, then batch-norm statistics
//! u64 lr bits | u64 decay bits | u64 eps bits | u32 count | count × tensor
//! 32 bytes RNG seed | u64 stream | u64 word_pos low | u64 word_pos high
//! u64 step
//! tensor = u32 name len | name | u32 rank | rank × u32 dims | f32 values
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::assemblies::{build_network, Network, NetworkSpec};
use crate::codec::{put_blob, put_f32, put_u32, put_u64, Reader};
use crate::error::{Error, Result};
use crate::tensorcore::{Shape, Tensor};

use super::optim::{RMSPropState, RmsPropConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MGMC";
pub const CHECKPOINT_VERSION: u32 = 1;

const WHAT: &str = "checkpoint";
const MAX_NAME: usize = 4096;
const MAX_TENSORS: usize = 1 << 20;
const MAX_SPEC: usize = 1 << 24;
const MEAN_SUFFIX: &str = ".running_mean";
const VAR_SUFFIX: &str = ".running_var";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor<f32>,
}

/// Position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    /// Parameters in store order followed by batch-norm running statistics.
    pub tensors: Vec<NamedTensor>,
    pub optimizer: RmsPropConfig,
    /// Squared-gradient accumulators, named after their parameters.
    pub accumulators: Vec<NamedTensor>,
    pub rng: RngState,
    pub step: u64,
}

impl Checkpoint {
    pub fn capture(net: &Network<f32>, opt: &RMSPropState<f32>, rng: &ChaCha8Rng, step: u64) -> Self {
        let mut tensors: Vec<NamedTensor> = net
            .store()
            .iter()
            .map(|(_, name, t)| NamedTensor { name: name.to_string(), value: t.clone() })
            .collect();
        for (site, st) in net.norm_states() {
            let sh = Shape::new(1, 1, 1, st.channels());
            for (suffix, v) in [(MEAN_SUFFIX, &st.running_mean), (VAR_SUFFIX, &st.running_var)] {
                tensors.push(NamedTensor {
                    name: format!("{site}{suffix}"),
                    value: Tensor::from_vec(sh, v.clone()).expect("channel vector"),
                });
            }
        }
        let accumulators = net
            .store()
            .iter()
            .zip(&opt.v)
            .map(|((_, name, _), v)| NamedTensor { name: name.to_string(), value: v.clone() })
            .collect();
        Checkpoint {
            spec: net.spec().clone(),
            tensors,
            optimizer: opt.config,
            accumulators,
            rng: RngState::capture(rng),
            step,
        }
    }

    /// Rebuilds the network, optimizer and generator; every tensor must be
    /// present with the shape the spec implies, and nothing else.
    pub fn restore(&self) -> Result<(Network<f32>, RMSPropState<f32>, ChaCha8Rng)> {
        let mut net: Network<f32> = build_network(&self.spec, &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.tensors {
            if !seen.insert(t.name.as_str()) {
                return corrupt(format!("tensor {} appears twice", t.name));
            }
        }
        let expected = net.store().len() + 2 * net.norm_states().len();
        if self.tensors.len() != expected {
            return Err(Error::Shape(format!(
                "checkpoint holds {} tensors, the network spec needs {expected}",
                self.tensors.len()
            )));
        }
        let find = |name: &str| -> Result<&Tensor<f32>> {
            self.tensors
                .iter()
                .find(|t| t.name == name)
                .map(|t| &t.value)
                .ok_or_else(|| Error::Shape(format!("checkpoint lacks tensor {name}")))
        };
        let ids: Vec<_> = net.store().ids().collect();
        for id in ids {
            let name = net.store().name(id).to_string();
            let v = find(&name)?.clone();
            net.store_mut().set(id, v)?;
        }
        for (site, st) in net.norm_states_mut() {
            let sh = Shape::new(1, 1, 1, st.channels());
            let mean = find(&format!("{site}{MEAN_SUFFIX}"))?;
            let var = find(&format!("{site}{VAR_SUFFIX}"))?;
            if mean.shape() != sh || var.shape() != sh {
                return Err(Error::Shape(format!("running statistics of {site} are not {sh}")));
            }
            st.running_mean = mean.data().to_vec();
            st.running_var = var.data().to_vec();
            st.validate()?;
        }
        let mut opt = RMSPropState::new(net.store(), self.optimizer)?;
        if self.accumulators.len() != net.store().len() {
            return Err(Error::Shape(format!(
                "{} optimizer accumulators for {} parameters",
                self.accumulators.len(),
                net.store().len()
            )));
        }
        for ((_, name, _), (slot, a)) in net.store().iter().zip(opt.v.iter_mut().zip(&self.accumulators)) {
            if a.name != name {
                return Err(Error::Shape(format!("accumulator {} where {name} was expected", a.name)));
            }
            *slot = a.value.clone();
        }
        opt.check(net.store())?;
        Ok((net, opt, self.rng.restore()))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_blob(&mut out, serde_json::to_string(&self.spec).expect("spec serializes").as_bytes());
        put_tensors(&mut out, &self.tensors);
        for v in [self.optimizer.lr, self.optimizer.decay, self.optimizer.eps] {
            put_u64(&mut out, v.to_bits());
        }
        put_tensors(&mut out, &self.accumulators);
        out.extend_from_slice(&self.rng.seed);
        put_u64(&mut out, self.rng.stream);
        put_u64(&mut out, self.rng.word_pos as u64);
        put_u64(&mut out, (self.rng.word_pos >> 64) as u64);
        put_u64(&mut out, self.step);
        out
    }

    /// Parses and validates the container; shapes are checked against the
    /// spec by [`restore`](Self::restore).
    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, WHAT);
        if r.bytes(4)? != CHECKPOINT_MAGIC {
            return r.corrupt("bad magic");
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { what: WHAT, found: version, expected: CHECKPOINT_VERSION });
        }
        let n = r.len(MAX_SPEC, "spec length")?;
        let text = std::str::from_utf8(r.bytes(n)?).or_else(|_| r.corrupt("spec is not UTF-8"))?;
        let spec: NetworkSpec = serde_json::from_str(text).or_else(|e| r.corrupt(format!("spec: {e}")))?;
        spec.validate()?;
        let tensors = read_tensors(&mut r)?;
        let mut hyper = [0.0; 3];
        for h in &mut hyper {
            *h = f64::from_bits(r.u64()?);
        }
        let optimizer = RmsPropConfig { lr: hyper[0], decay: hyper[1], eps: hyper[2] };
        optimizer.validate()?;
        let accumulators = read_tensors(&mut r)?;
        let seed: [u8; 32] = r.bytes(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = r.u64()? as u128 | (r.u64()? as u128) << 64;
        let step = r.u64()?;
        r.finish()?;
        Ok(Checkpoint {
            spec,
            tensors,
            optimizer,
            accumulators,
            rng: RngState { seed, stream, word_pos },
            step,
        })
    }
}

fn corrupt<T>(detail: impl Into<String>) -> Result<T> {
    Err(Error::Corrupt { what: WHAT, detail: detail.into() })
}

fn put_tensors(out: &mut Vec<u8>, ts: &[NamedTensor]) {
    put_u32(out, ts.len() as u32);
    for t in ts {
        put_blob(out, t.name.as_bytes());
        let dims = t.value.shape().dims();
        put_u32(out, dims.len() as u32);
        for d in dims {
            put_u32(out, d as u32);
        }
        for &v in t.value.data() {
            put_f32(out, v);
        }
    }
}

fn read_tensors(r: &mut Reader) -> Result<Vec<NamedTensor>> {
    let count = r.len(MAX_TENSORS, "tensor count")?;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let n = r.len(MAX_NAME, "name length")?;
        let name = std::str::from_utf8(r.bytes(n)?)
            .or_else(|_| r.corrupt("tensor name is not UTF-8"))?
            .to_string();
        let rank = r.len(4, "rank")?;
        if rank == 0 {
            return r.corrupt(format!("tensor {name} has rank 0"));
        }
        let mut dims = [1usize; 4];
        for d in &mut dims[4 - rank..] {
            *d = r.u32()? as usize;
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= r.remaining() / 4)
            .map_or_else(|| r.corrupt(format!("tensor {name} is larger than the file")), Ok)?;
        let values = r.f32s(numel)?;
        let value = Tensor::from_vec(Shape::new(dims[0], dims[1], dims[2], dims[3]), values)?;
        out.push(NamedTensor { name, value });
    }
    Ok(out)
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, ckpt.encode())?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::decode(&std::fs::read(path)?)
}
