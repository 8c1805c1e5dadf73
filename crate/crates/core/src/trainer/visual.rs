use crate::assemblies::NetState;
use crate::error::{Error, Result};

/// Which hidden channel to draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelSel {
    Index(usize),
    /// Largest magnitude over channels at each cell.
    MaxAbs,
}

/// One grid of hidden-state values, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryImage {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
}

impl MemoryImage {
    /// Min-max normalized to 0..=255; a constant grid is mid-gray.
    pub fn pixels(&self) -> Vec<u8> {
        let lo = self.values.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = self.values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let span = hi as f64 - lo as f64;
        self.values
            .iter()
            .map(|&v| {
                if !(span > 0.0) {
                    128
                } else {
                    ((v as f64 - lo as f64) / span * 255.0).round().clamp(0.0, 255.0) as u8
                }
            })
            .collect()
    }

    /// Binary PGM (P5).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.cols, self.rows).into_bytes();
        out.extend(self.pixels());
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for r in self.values.chunks(self.cols) {
            let row: Vec<String> = r.iter().map(|v| v.to_string()).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

/// Hidden state of `layer`/`level` for batch item `item`.
pub fn export_memory_visual(
    state: &NetState<f32>,
    layer: usize,
    level: usize,
    channel: ChannelSel,
    item: usize,
) -> Result<MemoryImage> {
    let l = state
        .layers
        .get(layer)
        .ok_or_else(|| Error::Invalid(format!("layer {layer} outside {} memory layers", state.layers.len())))?;
    let h = l
        .h
        .get(level)
        .ok_or_else(|| Error::Invalid(format!("level {level} outside {} levels", l.h.len())))?;
    let sh = h.shape();
    if sh.rows == 0 || sh.cols == 0 || sh.channels == 0 {
        return Err(Error::Invalid("empty grid".into()));
    }
    if item >= sh.batch {
        return Err(Error::Invalid(format!("batch item {item} outside {}", sh.batch)));
    }
    if let ChannelSel::Index(c) = channel {
        if c >= sh.channels {
            return Err(Error::Invalid(format!("channel {c} outside {}", sh.channels)));
        }
    }
    let mut values = Vec::with_capacity(sh.rows * sh.cols);
    for i in 0..sh.rows {
        for j in 0..sh.cols {
            values.push(match channel {
                ChannelSel::Index(c) => h.get(item, i, j, c),
                ChannelSel::MaxAbs => (0..sh.channels)
                    .map(|c| h.get(item, i, j, c))
                    .fold(0.0f32, |a, v| if v.abs() > a.abs() { v } else { a }),
            });
        }
    }
    Ok(MemoryImage { rows: sh.rows, cols: sh.cols, values })
}

/// Pearson correlation; `None` when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len(), "series lengths differ");
    let n = a.len() as f64;
    if a.is_empty() {
        return None;
    }
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

/// Channel of `layer`/`level` whose values, cropped to a `side × side`
/// window centred in the grid, correlate best (in magnitude) with `target`.
pub fn best_channel_pearson(
    state: &NetState<f32>,
    layer: usize,
    level: usize,
    item: usize,
    target: &[f64],
    side: usize,
) -> Result<(usize, f64)> {
    if target.len() != side * side {
        return Err(Error::Invalid("target is not side × side".into()));
    }
    let probe = export_memory_visual(state, layer, level, ChannelSel::Index(0), item)?;
    if probe.rows < side || probe.cols < side {
        return Err(Error::Invalid(format!("{}x{} grid is smaller than {side}", probe.rows, probe.cols)));
    }
    let (r0, c0) = ((probe.rows - side) / 2, (probe.cols - side) / 2);
    let channels = state.layers[layer].h[level].shape().channels;
    let mut best = (0, 0.0f64);
    for c in 0..channels {
        let img = export_memory_visual(state, layer, level, ChannelSel::Index(c), item)?;
        let crop: Vec<f64> = (0..side * side)
            .map(|x| img.values[(r0 + x / side) * img.cols + c0 + x % side] as f64)
            .collect();
        if let Some(r) = pearson(&crop, target) {
            if r.abs() > best.1.abs() {
                best = (c, r);
            }
        }
    }
    Ok(best)
}
