//! Sobel edge maps for the decoder skip connection.

use ndarray::{s, Array2, Array4, ArrayView2, Axis};

use crate::data::ImageTensor;
use crate::{Error, Result};

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// `[batch, 1, H, W]` gradient magnitudes, max-normalised per image to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMap {
    data: Array4<f32>,
}

impl EdgeMap {
    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn batch(&self) -> usize {
        self.data.dim().0
    }

    pub fn zeros_like(&self) -> EdgeMap {
        EdgeMap {
            data: Array4::zeros(self.data.raw_dim()),
        }
    }

    pub fn from_array(data: Array4<f32>) -> Result<Self> {
        if data.dim().1 != 1 {
            return Err(Error::Shape("edge map must have one channel".into()));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Shape("edge map values must lie in [0, 1]".into()));
        }
        Ok(Self { data })
    }

    pub fn select(&self, indices: &[usize]) -> EdgeMap {
        EdgeMap {
            data: self.data.select(Axis(0), indices),
        }
    }
}

fn grayscale(image: &ImageTensor, b: usize) -> Array2<f32> {
    let x = image.data();
    let (_, c, h, w) = x.dim();
    if c == 1 {
        return x.slice(s![b, 0, .., ..]).to_owned();
    }
    let mut g = Array2::<f32>::zeros((h, w));
    for (ch, weight) in LUMA.iter().enumerate() {
        g.scaled_add(*weight, &x.slice(s![b, ch, .., ..]));
    }
    g
}

/// Raw Sobel magnitude of a single-channel plane with replicate padding.
pub fn sobel_magnitude(plane: ArrayView2<f32>) -> Array2<f32> {
    let (h, w) = plane.dim();
    let at = |y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        plane[[yy, xx]]
    };
    let mut out = Array2::<f32>::zeros((h, w));
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            out[[y as usize, x as usize]] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Luminance Sobel edge map of a unit- or signed-range batch.
///
/// Signed inputs are mapped to unit range first. A constant image yields an
/// all-zero map.
pub fn sobel_edge_map(image: &ImageTensor) -> EdgeMap {
    let image = image.to_unit();
    let (n, _, h, w) = image.data().dim();
    let mut data = Array4::<f32>::zeros((n, 1, h, w));
    for b in 0..n {
        let mut mag = sobel_magnitude(grayscale(&image, b).view());
        let max = mag.fold(0.0f32, |m, v| m.max(*v));
        // float noise from the luma weights on a flat image stays far below this
        if max > 1e-6 {
            mag.mapv_inplace(|v| v / max);
        } else {
            mag.fill(0.0);
        }
        data.slice_mut(s![b, 0, .., ..]).assign(&mag);
    }
    EdgeMap { data }
}
