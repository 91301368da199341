use std::path::Path;

use super::write_atomic;
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// `round(255·clamp(v, 0, 1))` with halves rounded up.
pub fn pixel_byte(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (255.0 * v + 0.5).floor() as u8
}

/// Binary PGM for one channel, binary PPM for three.
pub fn encode_pnm(x: &Tensor) -> Result<Vec<u8>> {
    let [c, h, w] = x.shape() else {
        return Err(shape_err!("image export needs C×H×W, got {:?}", x.shape()));
    };
    let (c, h, w) = (*c, *h, *w);
    let tag = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(shape_err!("image export supports 1 or 3 channels, got {c}")),
    };
    let mut out = format!("{tag}\n{w} {h}\n255\n").into_bytes();
    out.reserve(c * h * w);
    let d = x.data();
    for p in 0..h * w {
        for ch in 0..c {
            out.push(pixel_byte(d[ch * h * w + p]));
        }
    }
    Ok(out)
}

pub fn export_image(x: &Tensor, path: &Path) -> Result<()> {
    write_atomic(path, &encode_pnm(x)?)
}

/// Tiles a batch N×C×H×W into one C×(rows·H)×(cols·W) image, row-major,
/// with blank cells after the last item.
pub fn tile(batch: &Tensor, cols: usize) -> Result<Tensor> {
    let (n, c, h, w) = batch.dims4()?;
    if cols == 0 {
        return Err(shape_err!("grid needs at least one column"));
    }
    let cols = cols.min(n);
    let rows = n.div_ceil(cols);
    let (gh, gw) = (rows * h, cols * w);
    let d = batch.data();
    Ok(Tensor::from_fn(&[c, gh, gw], |i| {
        let (ch, y, x) = (i / (gh * gw), (i / gw) % gh, i % gw);
        let item = (y / h) * cols + x / w;
        if item >= n {
            0.0
        } else {
            d[((item * c + ch) * h + y % h) * w + x % w]
        }
    }))
}
