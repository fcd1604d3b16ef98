//! Fixed sinusoidal encodings: 2-D spatial over the feature grid and 1-D
//! temporal over frame index.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

const BASE: f64 = 10_000.0;

/// Sinusoidal code of a scalar position into `width` channels
/// (`sin` on even channels, `cos` on odd).
fn encode_1d(pos: f64, width: usize, out: &mut [f64]) {
    for (j, slot) in out.iter_mut().enumerate().take(width) {
        let i = j / 2;
        let angle = pos / BASE.powf((2 * i) as f64 / width as f64);
        *slot = if j % 2 == 0 { angle.sin() } else { angle.cos() };
    }
}

/// Spatial positional encoding over an `h × w` grid, `[h·w × d]`.
///
/// The first `d/2` channels encode the row index, the last `d/2` the column
/// index. Rows are indexed `p = row·w + col`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialPe {
    pub height: usize,
    pub width: usize,
    pub table: Tensor,
}

/// Temporal positional encoding, one `d`-vector per time step, `[T × d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalPe {
    pub table: Tensor,
}

pub fn build_spatial_pe(height: usize, width: usize, d: usize) -> Result<SpatialPe> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::Config(format!(
            "spatial encoding width {d} must be a positive multiple of 4"
        )));
    }
    let half = d / 2;
    let mut data = vec![0.0; height * width * d];
    for r in 0..height {
        for c in 0..width {
            let row = &mut data[(r * width + c) * d..(r * width + c + 1) * d];
            let (row_part, col_part) = row.split_at_mut(half);
            encode_1d(r as f64, half, row_part);
            encode_1d(c as f64, half, col_part);
        }
    }
    Ok(SpatialPe {
        height,
        width,
        table: Tensor::new(&[height * width, d], data)?,
    })
}

pub fn build_temporal_pe(steps: usize, d: usize) -> Result<TemporalPe> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::Config(format!(
            "temporal encoding width {d} must be a positive even number"
        )));
    }
    let mut data = vec![0.0; steps * d];
    for t in 0..steps {
        encode_1d(t as f64, d, &mut data[t * d..(t + 1) * d]);
    }
    Ok(TemporalPe {
        table: Tensor::new(&[steps, d], data)?,
    })
}

impl TemporalPe {
    pub fn steps(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn row(&self, t: usize) -> Tensor {
        let d = self.table.shape()[1];
        Tensor::new(&[d], self.table.row(t).to_vec()).expect("row length matches width")
    }
}

/// `features + SPE + TPE[t]`, the temporal row broadcast over all positions.
pub fn apply_pe(g: &mut Graph, features: Var, spe: &SpatialPe, tpe_row: &Tensor) -> Result<Var> {
    if g.shape(features) != spe.table.shape() {
        return Err(Error::dim("apply_pe", g.shape(features), spe.table.shape()));
    }
    let s = g.constant(&spe.table);
    let t = g.constant(tpe_row);
    let x = g.add(features, s)?;
    g.add(x, t)
}
