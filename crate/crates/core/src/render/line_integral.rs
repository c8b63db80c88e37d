use std::sync::Arc;

use crate::dataio::VoxelGrid;
use crate::error::{dim_err, invalid, Result};
use crate::tensor::{Activation, Graph, Real, Tensor, Var};

pub const AXIS_VIEWS: usize = 6;

/// Source offsets mapping the stacked axis sums `[3, D, D]` of one sample to
/// six images `[6, D, D]` ordered +x, -x, +y, -y, +z, -z.
///
/// The sum along axis `a` is indexed by the remaining axes in increasing
/// order. Taking `(u, v)` as the axes after `a` in cyclic order, the `+a`
/// image has columns along `+u` and rows along `-v`; the `-a` image is its
/// left-right mirror.
fn view_map(d: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(AXIS_VIEWS * d * d);
    for axis in 0..3 {
        for mirrored in [false, true] {
            for r in 0..d {
                for c in 0..d {
                    let u = if mirrored { d - 1 - c } else { c };
                    let v = d - 1 - r;
                    // Sum over y is stored [x][z] = [v][u]; the others [u][v].
                    let (i, j) = if axis == 1 { (v, u) } else { (u, v) };
                    out.push((axis * d + i) * d + j);
                }
            }
        }
    }
    out
}

/// Differentiable six-view shading `1 - exp(-sum along the ray)` of a batch
/// of grids `[B, D, D, D]`, giving `[B, 6, D, D]`.
pub fn line_integral_render<F: Real>(g: &mut Graph<F>, voxels: Var) -> Result<Var> {
    let shape = g.shape(voxels).to_vec();
    if shape.len() != 4 || shape[1] != shape[2] || shape[2] != shape[3] {
        return Err(dim_err!("line integral needs [B, D, D, D] grids, got {shape:?}"));
    }
    let (b, d) = (shape[0], shape[1]);
    let mut sums = Vec::with_capacity(3);
    for axis in 1..=3 {
        let s = g.sum_axis(voxels, axis)?;
        sums.push(g.reshape(s, &[b, 1, d * d])?);
    }
    let stacked = g.concat(&sums, 1)?;
    let per_sample = view_map(d);
    let plane = 3 * d * d;
    let source: Vec<usize> = (0..b)
        .flat_map(|n| per_sample.iter().map(move |&s| n * plane + s))
        .collect();
    let views = g.gather(stacked, &[b, AXIS_VIEWS, d, d], Arc::new(source))?;
    g.activation(views, Activation::NegateExpComplement)
}

pub fn check_occupancy<F: Real>(values: &[F]) -> Result<()> {
    match values
        .iter()
        .find(|v| !(**v >= F::zero() && **v <= F::one()))
    {
        Some(v) => Err(invalid!("occupancy value {} outside [0, 1]", v.as_f64())),
        None => Ok(()),
    }
}

/// Six shaded views `[6, D, D]` of one grid.
pub fn line_integral_views<F: Real>(grid: &VoxelGrid) -> Result<Tensor<F>> {
    check_occupancy(&grid.occupancy)?;
    let d = grid.resolution;
    let data: Vec<F> = grid.occupancy.iter().map(|&v| F::of(v as f64)).collect();
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, d, d, d], data)?);
    let out = line_integral_render(&mut g, x)?;
    g.value(out).reshape(&[AXIS_VIEWS, d, d])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_gradient;

    fn grid_with(d: usize, cells: &[((usize, usize, usize), f32)]) -> VoxelGrid {
        let mut g = VoxelGrid::empty(d);
        for &((x, y, z), v) in cells {
            let i = g.index(x, y, z);
            g.occupancy[i] = v;
        }
        g
    }

    #[test]
    fn empty_grid_gives_black_views() {
        let v = line_integral_views::<f64>(&VoxelGrid::empty(5)).unwrap();
        assert_eq!(v.shape(), &[6, 5, 5]);
        assert!(v.data().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn full_grid_saturates_every_pixel() {
        let mut g = VoxelGrid::empty(30);
        g.occupancy.fill(1.0);
        let v = line_integral_views::<f64>(&g).unwrap();
        let want = 1.0 - (-30.0f64).exp();
        assert!(v.data().iter().all(|&p| (p - want).abs() < 1e-15));
    }

    #[test]
    fn single_ray_of_unit_mass() {
        // Two half-filled cells on the z ray through (x=1, y=3).
        let d = 5;
        let g = grid_with(d, &[((1, 3, 0), 0.5), ((1, 3, 4), 0.5)]);
        let v = line_integral_views::<f64>(&g).unwrap();
        let z_plus = &v.data()[4 * d * d..5 * d * d];
        let want = 1.0 - (-1.0f64).exp();
        // +z view: column = x, row = D-1-y.
        let (r, c) = (d - 1 - 3, 1);
        assert!((z_plus[r * d + c] - 0.632_120_558_828_557_7).abs() < 1e-12);
        assert!((z_plus[r * d + c] - want).abs() < 1e-15);
        assert_eq!(z_plus.iter().filter(|&&p| p > 0.0).count(), 1);
    }

    #[test]
    fn opposite_views_are_mirrors() {
        let d = 6;
        let cells: Vec<_> = (0..20)
            .map(|i| (((i * 7) % d, (i * 5 + 1) % d, (i * 3 + 2) % d), ((i % 4) as f32 + 1.0) / 4.0))
            .collect();
        let v = line_integral_views::<f64>(&grid_with(d, &cells)).unwrap();
        let img = |k: usize| &v.data()[k * d * d..(k + 1) * d * d];
        for axis in 0..3 {
            let (p, m) = (img(2 * axis), img(2 * axis + 1));
            for r in 0..d {
                for c in 0..d {
                    assert_eq!(p[r * d + c], m[r * d + (d - 1 - c)]);
                }
            }
        }
    }

    #[test]
    fn axis_orientation_of_each_view() {
        // A single cell at (x, y, z) = (1, 2, 3) on a 5-grid.
        let d = 5;
        let v = line_integral_views::<f64>(&grid_with(d, &[((1, 2, 3), 1.0)])).unwrap();
        let lit = |k: usize| {
            let img = &v.data()[k * d * d..(k + 1) * d * d];
            let i = img.iter().position(|&p| p > 0.0).unwrap();
            (i / d, i % d)
        };
        // +x: (u, v) = (y, z); +y: (z, x); +z: (x, y).
        assert_eq!(lit(0), (d - 1 - 3, 2));
        assert_eq!(lit(1), (d - 1 - 3, d - 1 - 2));
        assert_eq!(lit(2), (d - 1 - 1, 3));
        assert_eq!(lit(4), (d - 1 - 2, 1));
        assert_eq!(lit(5), (d - 1 - 2, d - 1 - 1));
    }

    #[test]
    fn gradient_is_transmittance_along_the_ray() {
        let d = 4;
        let data: Vec<f64> = (0..d * d * d).map(|i| ((i * 13) % 10) as f64 / 10.0).collect();
        let x = Tensor::new(vec![1, d, d, d], data.clone()).unwrap();
        // d(+z pixel at x=2, y=1)/dV equals exp(-ray sum) on the ray only.
        let pixel = 4 * d * d + (d - 1 - 1) * d + 2;
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let out = line_integral_render(&mut g, v).unwrap();
        let mut mask = vec![0.0; 6 * d * d];
        mask[pixel] = 1.0;
        let picked = g.mul_const(out, Tensor::new(vec![1, 6, d, d], mask).unwrap()).unwrap();
        let s = g.sum(picked).unwrap();
        g.backward(s).unwrap();
        let grad = g.grad(v).unwrap();
        let ray: f64 = (0..d).map(|z| data[(2 * d + 1) * d + z]).sum();
        for (i, &gv) in grad.data().iter().enumerate() {
            let (xx, yy) = (i / (d * d), (i / d) % d);
            let want = if (xx, yy) == (2, 1) { (-ray).exp() } else { 0.0 };
            assert!((gv - want).abs() < 1e-15, "cell {i}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let d = 3;
        let data: Vec<f64> = (0..2 * d * d * d).map(|i| ((i * 7) % 11) as f64 / 11.0).collect();
        let x = Tensor::new(vec![2, d, d, d], data).unwrap();
        let weights: Vec<f64> = (0..2 * 6 * d * d).map(|i| ((i * 5) % 9) as f64 - 4.0).collect();
        let w = Tensor::new(vec![2, 6, d, d], weights).unwrap();
        let f = |g: &mut Graph<f64>, v: Var| {
            let out = line_integral_render(g, v)?;
            let m = g.mul_const(out, w.clone())?;
            g.sum(m)
        };
        assert!(check_gradient(f, &x, 1e-6).unwrap() < 1e-4);
    }

    #[test]
    fn rejects_out_of_range_occupancy() {
        let mut g = VoxelGrid::empty(3);
        g.occupancy[0] = 1.5;
        assert!(line_integral_views::<f32>(&g).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn grid(d: usize, values: &[f32]) -> VoxelGrid {
            VoxelGrid::new(d, values.to_vec(), None).unwrap()
        }

        proptest! {
            #[test]
            fn pixels_stay_below_one_and_grow_with_occupancy(
                values in prop::collection::vec(0.0f32..=1.0, 64),
                cell in 0usize..64,
                bump in 0.0f32..=1.0,
            ) {
                let before = line_integral_views::<f64>(&grid(4, &values)).unwrap();
                prop_assert!(before.data().iter().all(|&p| (0.0..1.0).contains(&p)));
                let mut raised = values.clone();
                raised[cell] = raised[cell].max(bump);
                let after = line_integral_views::<f64>(&grid(4, &raised)).unwrap();
                prop_assert!(before.data().iter().zip(after.data()).all(|(a, b)| b >= a));
            }
        }
    }
}
