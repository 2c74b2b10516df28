use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Fixed sinusoidal absolute position table `[t_max, d]`.
///
/// `table[pos, 2i] = sin(pos / 10000^(2i/d))` and
/// `table[pos, 2i+1] = cos(pos / 10000^(2i/d))`.
#[derive(Clone, Debug)]
pub struct ApeTable {
    table: Tensor,
}

impl ApeTable {
    pub fn new(t_max: usize, d: usize) -> Self {
        let table = Tensor::from_fn(&[t_max, d], |idx| {
            let (pos, c) = (idx / d, idx % d);
            let i = (c / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
            if c % 2 == 0 {
                angle.sin() as f32
            } else {
                angle.cos() as f32
            }
        });
        Self { table }
    }

    pub fn max_len(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.table
    }

    pub fn row(&self, pos: usize) -> &[f32] {
        self.table.row(pos)
    }
}

/// `x · scale + table[0..T]` for `x[T, D]`.
pub fn ape_add<R: Real>(tape: &mut Tape<'_, R>, x: Var, table: &ApeTable, scale: f64) -> Result<Var> {
    ape_add_at(tape, x, table, scale, 0)
}

/// Same as [`ape_add`] with rows taken from `table[start..start+T]`.
pub fn ape_add_at<R: Real>(
    tape: &mut Tape<'_, R>,
    x: Var,
    table: &ApeTable,
    scale: f64,
    start: usize,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[1] != table.dim() {
        return Err(Error::Shape {
            op: "ape_add",
            lhs: shape,
            rhs: vec![table.max_len(), table.dim()],
        });
    }
    let (t, d) = (shape[0], shape[1]);
    if start + t > table.max_len() {
        return Err(Error::Length {
            len: start + t,
            max: table.max_len(),
        });
    }
    let rows = &table.tensor().data()[start * d..(start + t) * d];
    let pe = tape.constant_f32(&[t, d], rows)?;
    let scaled = if scale == 1.0 { x } else { tape.scale(x, scale)? };
    tape.add(scaled, pe)
}
