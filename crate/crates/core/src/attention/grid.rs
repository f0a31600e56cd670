//! Reference grids, offset fields and the bilinear sampling kernel.

use crate::error::{Error, Result};
use crate::tensor::kernels::{cell_center, denormalize};
use crate::tensor::Tensor;

/// Uniform grid of reference points, one per `g×g` cell of the input,
/// stored as normalised `(y, x)` coordinates in `[-1, 1]²`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceGrid {
    pub h_g: usize,
    pub w_g: usize,
    points: Vec<(f64, f64)>,
    pub normalized: bool,
}

impl ReferenceGrid {
    /// Points in row-major order over the `h_g×w_g` lattice.
    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn point(&self, r: usize, c: usize) -> (f64, f64) {
        self.points[r * self.w_g + c]
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Builds the `(h/g)×(w/g)` reference grid. Lattice point `(r, c)` maps to
/// the normalised cell center `((2r+1)/H_g − 1, (2c+1)/W_g − 1)`.
pub fn init_reference_grid(h: usize, w: usize, g: usize) -> Result<ReferenceGrid> {
    if g == 0 || h == 0 || w == 0 || !h.is_multiple_of(g) || !w.is_multiple_of(g) {
        return Err(Error::config(format!("grid factor {g} must divide {h}×{w}")));
    }
    let (h_g, w_g) = (h / g, w / g);
    let points = (0..h_g)
        .flat_map(|r| (0..w_g).map(move |c| (cell_center(r, h_g), cell_center(c, w_g))))
        .collect();
    Ok(ReferenceGrid {
        h_g,
        w_g,
        points,
        normalized: true,
    })
}

/// Maps a normalised coordinate onto the pixel lattice of an `h×w` map.
pub fn to_pixel(point: (f64, f64), h: usize, w: usize) -> (f64, f64) {
    (denormalize(point.0, h), denormalize(point.1, w))
}

/// Product of 1-D triangle kernels between two pixel-space points.
pub fn bilinear_kernel(p: (f64, f64), q: (f64, f64)) -> f64 {
    (1.0 - (p.0 - q.0).abs()).max(0.0) * (1.0 - (p.1 - q.1).abs()).max(0.0)
}

/// Per-group 2-D displacements laid out as `2 × S × H_g × W_g`
/// (axis 0 = `dy`, axis 1 = `dx`).
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetField {
    pub groups: usize,
    pub h_g: usize,
    pub w_g: usize,
    data: Vec<f64>,
}

impl OffsetField {
    /// Converts the `H_g×W_g×2S` map emitted by the offset network.
    pub fn from_map(map: &Tensor) -> Result<Self> {
        let &[h_g, w_g, c] = map.shape() else {
            return Err(Error::shape("offset map", map.shape(), &[0, 0, 0]));
        };
        if c % 2 != 0 {
            return Err(Error::shape("offset map", map.shape(), &[h_g, w_g, c + 1]));
        }
        let groups = c / 2;
        let mut data = vec![0.0; c * h_g * w_g];
        for r in 0..h_g {
            for q in 0..w_g {
                for g in 0..groups {
                    for axis in 0..2 {
                        let src = (r * w_g + q) * c + 2 * g + axis;
                        let dst = ((axis * groups + g) * h_g + r) * w_g + q;
                        data[dst] = map.data()[src];
                    }
                }
            }
        }
        Ok(OffsetField { groups, h_g, w_g, data })
    }

    /// Inverse of [`OffsetField::from_map`].
    pub fn to_map(&self) -> Tensor {
        let c = 2 * self.groups;
        let mut out = vec![0.0; self.h_g * self.w_g * c];
        for r in 0..self.h_g {
            for q in 0..self.w_g {
                for g in 0..self.groups {
                    for axis in 0..2 {
                        out[(r * self.w_g + q) * c + 2 * g + axis] = self.get(axis, g, r, q);
                    }
                }
            }
        }
        Tensor::new(vec![self.h_g, self.w_g, c], out).expect("offset map shape")
    }

    pub fn get(&self, axis: usize, group: usize, r: usize, c: usize) -> f64 {
        self.data[((axis * self.groups + group) * self.h_g + r) * self.w_g + c]
    }

    pub fn shape(&self) -> [usize; 4] {
        [2, self.groups, self.h_g, self.w_g]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_grid() {
        let g = init_reference_grid(2, 2, 1).unwrap();
        assert_eq!(g.points(), &[(-0.5, -0.5), (-0.5, 0.5), (0.5, -0.5), (0.5, 0.5)]);
    }

    #[test]
    fn degenerate_grid_is_origin() {
        let g = init_reference_grid(4, 4, 4).unwrap();
        assert_eq!(g.points(), &[(0.0, 0.0)]);
    }

    #[test]
    fn rectangular_grid_corner() {
        let g = init_reference_grid(6, 4, 2).unwrap();
        assert_eq!((g.h_g, g.w_g), (3, 2));
        let (y, x) = g.point(0, 0);
        assert!((y + 2.0 / 3.0).abs() < 1e-15 && (x + 0.5).abs() < 1e-15);
    }

    #[test]
    fn non_divisible_factor_rejected() {
        assert!(matches!(init_reference_grid(6, 4, 4), Err(Error::Config(_))));
    }

    #[test]
    fn identity_grid_lands_on_pixel_centers() {
        let g = init_reference_grid(5, 3, 1).unwrap();
        for r in 0..5 {
            for c in 0..3 {
                let (py, px) = to_pixel(g.point(r, c), 5, 3);
                assert!((py - r as f64).abs() < 1e-12 && (px - c as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kernel_examples() {
        assert_eq!(bilinear_kernel((1.0, 2.0), (1.0, 2.0)), 1.0);
        assert_eq!(bilinear_kernel((0.5, 0.0), (0.0, 0.0)), 0.5);
        let p = (0.3, 0.4);
        let total: f64 = [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)]
            .iter()
            .map(|&q| bilinear_kernel(p, q))
            .sum();
        assert!((total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn offset_field_layout_round_trips() {
        let map = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        let f = OffsetField::from_map(&map).unwrap();
        assert_eq!(f.shape(), [2, 2, 2, 3]);
        // (r=1, c=2, group=1, dx) sits at channel 3 of cell 5
        assert_eq!(f.get(1, 1, 1, 2), map.at(&[1, 2, 3]));
        assert_eq!(f.to_map(), map);
    }
}
