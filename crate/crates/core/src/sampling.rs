// SPDX-License-Identifier: Apache-2.0

//! Four-neighbour bilinear sampling and its adjoint.

use crate::scalar::Real;
use crate::tensor::{FeatureMap, Shape};

/// How the horizontal axis is treated at the image edge. The vertical axis
/// always clamps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HorizontalEdge {
    /// Column `W` is column `0` (equirectangular panoramas).
    #[default]
    Cyclic,
    /// Coordinates clamp to `[0, W-1]` (ordinary images).
    Clamp,
}

/// The four pixels touched by one bilinear query and their weights.
///
/// Pixels are flat `y·W + x` offsets within a channel plane. Weights are
/// nonnegative and sum to one up to rounding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilinearTaps<T> {
    pub pixels: [usize; 4],
    pub weights: [T; 4],
    /// Fractional offsets towards the second column and second row.
    pub frac: [T; 2],
}

impl<T: Real> BilinearTaps<T> {
    /// Taps for continuous `(u, v)` on an `height × width` plane.
    pub fn new(height: usize, width: usize, u: T, v: T, edge: HorizontalEdge) -> Self {
        debug_assert!(height > 0 && width > 0);
        let w_t = T::from_usize_lossy(width);
        let max_x = T::from_usize_lossy(width - 1);
        let max_y = T::from_usize_lossy(height - 1);

        let u = match edge {
            HorizontalEdge::Cyclic => {
                let r = u - w_t * (u / w_t).floor();
                // `r` can round up to exactly `w_t` for tiny negative `u`.
                if r >= w_t {
                    T::zero()
                } else {
                    r
                }
            }
            HorizontalEdge::Clamp => u.max(T::zero()).min(max_x),
        };
        let v = v.max(T::zero()).min(max_y);

        let x0f = u.floor();
        let y0f = v.floor();
        let fx = u - x0f;
        let fy = v - y0f;
        let x0 = x0f.to_usize().unwrap_or(0).min(width - 1);
        let y0 = y0f.to_usize().unwrap_or(0).min(height - 1);
        let x1 = match edge {
            HorizontalEdge::Cyclic => (x0 + 1) % width,
            HorizontalEdge::Clamp => (x0 + 1).min(width - 1),
        };
        let y1 = (y0 + 1).min(height - 1);

        let one = T::one();
        let (wx0, wx1) = (one - fx, fx);
        let (wy0, wy1) = (one - fy, fy);
        Self {
            pixels: [y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1],
            weights: [wy0 * wx0, wy0 * wx1, wy1 * wx0, wy1 * wx1],
            frac: [fx, fy],
        }
    }

    /// Blends one channel plane.
    ///
    /// Evaluated as nested lerps, which reproduce constant planes and lattice
    /// points exactly; mathematically identical to `Σ weights·values`.
    #[inline]
    pub fn gather(&self, plane: &[T]) -> T {
        let [fx, fy] = self.frac;
        let (a, b) = (plane[self.pixels[0]], plane[self.pixels[1]]);
        let (c, d) = (plane[self.pixels[2]], plane[self.pixels[3]]);
        let top = a + fx * (b - a);
        let bottom = c + fx * (d - c);
        top + fy * (bottom - top)
    }

    /// Adds `g · weight` into each tapped pixel of one channel plane.
    #[inline]
    pub fn scatter(&self, plane: &mut [T], g: T) {
        for k in 0..4 {
            plane[self.pixels[k]] = plane[self.pixels[k]] + g * self.weights[k];
        }
    }
}

/// Samples every channel of `f` at continuous `(u, v)`, horizontally cyclic.
pub fn bilinear_sample<T: Real>(f: &FeatureMap<T>, u: T, v: T) -> Vec<T> {
    bilinear_sample_with(f, u, v, HorizontalEdge::Cyclic)
}

pub fn bilinear_sample_with<T: Real>(f: &FeatureMap<T>, u: T, v: T, edge: HorizontalEdge) -> Vec<T> {
    let taps = BilinearTaps::new(f.height(), f.width(), u, v, edge);
    (0..f.channels()).map(|c| taps.gather(f.channel(c))).collect()
}

/// Gradient of [`bilinear_sample`] with respect to the feature map, kept
/// sparse: the same four taps for every channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGrad<T> {
    pub shape: Shape,
    pub taps: BilinearTaps<T>,
    pub grad_out: Vec<T>,
}

impl<T: Real> SparseGrad<T> {
    /// `(channel, pixel, value)` triples with nonzero weight; duplicated
    /// pixels (clamped edges) are merged.
    pub fn entries(&self) -> Vec<(usize, usize, T)> {
        let mut merged: Vec<(usize, T)> = Vec::with_capacity(4);
        for k in 0..4 {
            let (p, w) = (self.taps.pixels[k], self.taps.weights[k]);
            if w == T::zero() {
                continue;
            }
            match merged.iter_mut().find(|(q, _)| *q == p) {
                Some((_, acc)) => *acc = *acc + w,
                None => merged.push((p, w)),
            }
        }
        let mut out = Vec::with_capacity(merged.len() * self.grad_out.len());
        for (c, &g) in self.grad_out.iter().enumerate() {
            for &(p, w) in &merged {
                out.push((c, p, g * w));
            }
        }
        out
    }

    pub fn scatter_into(&self, target: &mut FeatureMap<T>) {
        debug_assert_eq!(target.shape(), self.shape);
        for (c, &g) in self.grad_out.iter().enumerate() {
            self.taps.scatter(target.channel_mut(c), g);
        }
    }

    pub fn to_dense(&self) -> FeatureMap<T> {
        let mut m = FeatureMap::zeros(self.shape);
        self.scatter_into(&mut m);
        m
    }
}

/// Adjoint of [`bilinear_sample`]: scatters `grad_out` (one value per
/// channel) with the forward weights.
pub fn bilinear_sample_backward<T: Real>(shape: Shape, u: T, v: T, grad_out: &[T]) -> SparseGrad<T> {
    debug_assert_eq!(grad_out.len(), shape.channels);
    SparseGrad {
        shape,
        taps: BilinearTaps::new(shape.height, shape.width, u, v, HorizontalEdge::Cyclic),
        grad_out: grad_out.to_vec(),
    }
}
