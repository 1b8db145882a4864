use crate::error::{validation, Result};
use crate::tensor::Matrix;

/// Square RGB image resampled to the model side, values in `[0, 1]`, row-major HWC.
/// `native_width`/`native_height` keep the original extent for box coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    side: usize,
    data: Vec<f64>,
    pub native_width: u32,
    pub native_height: u32,
}

impl ImageTensor {
    pub fn new(side: usize, data: Vec<f64>, native_width: u32, native_height: u32) -> Result<Self> {
        if data.len() != side * side * 3 {
            return Err(validation(format!("image data has {} values, expected {}", data.len(), side * side * 3)));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(validation("pixel intensities must lie in [0, 1]"));
        }
        Ok(ImageTensor { side, data, native_width, native_height })
    }

    pub fn filled(side: usize, value: f64) -> Self {
        ImageTensor { side, data: vec![value; side * side * 3], native_width: side as u32, native_height: side as u32 }
    }

    /// Nearest-neighbour resample of an 8-bit RGB buffer of size `w x h` onto a `side x side` grid.
    pub fn from_rgb8(rgb: &[u8], w: u32, h: u32, side: usize) -> Result<Self> {
        if rgb.len() != (w * h * 3) as usize || w == 0 || h == 0 {
            return Err(validation("RGB buffer does not match its dimensions"));
        }
        let mut data = Vec::with_capacity(side * side * 3);
        for y in 0..side {
            let sy = ((y as u64 * h as u64) / side as u64) as usize;
            for x in 0..side {
                let sx = ((x as u64 * w as u64) / side as u64) as usize;
                let o = (sy * w as usize + sx) * 3;
                data.extend(rgb[o..o + 3].iter().map(|&c| c as f64 / 255.0));
            }
        }
        Ok(ImageTensor { side, data, native_width: w, native_height: h })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Non-overlapping `p x p` patches flattened to rows of `p*p*3` values, in raster order.
    pub fn patches(&self, p: usize) -> Matrix {
        let g = self.side / p;
        let mut out = Matrix::zeros(g * g, p * p * 3);
        for py in 0..g {
            for px in 0..g {
                let row = out.row_mut(py * g + px);
                let mut i = 0;
                for y in 0..p {
                    let base = ((py * p + y) * self.side + px * p) * 3;
                    row[i..i + 3 * p].copy_from_slice(&self.data[base..base + 3 * p]);
                    i += 3 * p;
                }
            }
        }
        out
    }
}
