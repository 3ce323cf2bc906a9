use crate::{ops, Error, Result, Tensor};

/// Backward sampling displacement field in pixels.
///
/// Stored channel-first as `2×H×W`: channel 0 is the horizontal and channel 1
/// the vertical displacement. Output pixel `(x, y)` reads its source at
/// `(x + dx, y + dy)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    tensor: Tensor,
}

impl FlowField {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            tensor: Tensor::zeros(&[2, h, w]),
        }
    }

    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        match *tensor.shape() {
            [2, _, _] => Ok(Self { tensor }),
            ref s => Err(Error::Shape(format!("flow must be 2×H×W, got {s:?}"))),
        }
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> (f64, f64)) -> Self {
        let mut tensor = Tensor::zeros(&[2, h, w]);
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = f(x, y);
                tensor.set(&[0, y, x], dx);
                tensor.set(&[1, y, x], dy);
            }
        }
        Self { tensor }
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    /// Displacement `(dx, dy)` at pixel `(x, y)`.
    pub fn at(&self, x: usize, y: usize) -> (f64, f64) {
        (self.tensor.get(&[0, y, x]), self.tensor.get(&[1, y, x]))
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    /// Warps a `C×H×W` frame of the same spatial size.
    pub fn apply(&self, frame: &Tensor) -> Result<Tensor> {
        ops::warp(frame, &self.tensor)
    }
}
