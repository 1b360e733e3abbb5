//! Dense 3D cross-correlation with zero padding, plus executable checks of
//! translation equivariance and non-expansivity.
//!
//! Output voxel `v` aggregates `Σ_k K[k] · φ[v + k − a]` where the anchor `a`
//! is `(k − 1) / 2` per axis (the window center for odd extents, the floor of
//! it for even ones). Kernels are applied as stored, never flipped.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Grid3, Shape3};
use crate::kernels::KernelTensor;
use crate::pointcloud::VoxelGrid;

/// Real-valued operator output over a voxel grid.
pub type ResponseGrid = Grid3<f64>;

/// Fraction of nonzero input voxels above which [`conv3d`] takes the direct
/// path instead of scattering.
const SPARSE_DENSITY: f64 = 0.2;

pub fn anchor(kshape: Shape3) -> [usize; 3] {
    [(kshape[0] - 1) / 2, (kshape[1] - 1) / 2, (kshape[2] - 1) / 2]
}

fn check_fits(grid: Shape3, kernel: Shape3) -> Result<()> {
    if (0..3).any(|a| kernel[a] > grid[a]) {
        return Err(Error::KernelTooLarge { kernel, grid });
    }
    Ok(())
}

/// Reference implementation: one gather per output voxel.
pub fn conv3d_direct(input: &Grid3<f64>, kernel: &Grid3<f64>) -> Result<ResponseGrid> {
    let gs = input.shape();
    let ks = kernel.shape();
    check_fits(gs, ks)?;
    let a = anchor(ks);
    let inp = input.as_slice();
    let ker = kernel.as_slice();
    let slab = gs[1] * gs[2];
    let mut out = Grid3::<f64>::zeros(gs);
    // valid kernel offsets along one axis for output coordinate `v`
    let range = |v: usize, axis: usize| {
        let lo = a[axis].saturating_sub(v);
        let hi = (gs[axis] + a[axis] - v).min(ks[axis]);
        (lo, hi)
    };
    out.as_mut_slice()
        .par_chunks_mut(slab)
        .enumerate()
        .for_each(|(z, plane)| {
            let (kz0, kz1) = range(z, 0);
            for y in 0..gs[1] {
                let (ky0, ky1) = range(y, 1);
                for x in 0..gs[2] {
                    let (kx0, kx1) = range(x, 2);
                    let mut acc = 0.0;
                    for kz in kz0..kz1 {
                        let iz = z + kz - a[0];
                        for ky in ky0..ky1 {
                            let iy = y + ky - a[1];
                            let krow = (kz * ks[1] + ky) * ks[2];
                            let irow = (iz * gs[1] + iy) * gs[2] + x;
                            for kx in kx0..kx1 {
                                acc += ker[krow + kx] * inp[irow + kx - a[2]];
                            }
                        }
                    }
                    plane[y * gs[2] + x] = acc;
                }
            }
        });
    Ok(out)
}

/// Nonzero input voxels bucketed by z slice: `(y, x, value)`.
fn nonzeros_by_slice(input: &Grid3<f64>) -> Vec<Vec<(usize, usize, f64)>> {
    let [nz, ny, nx] = input.shape();
    let data = input.as_slice();
    (0..nz)
        .map(|z| {
            let mut v = Vec::new();
            for y in 0..ny {
                for x in 0..nx {
                    let val = data[(z * ny + y) * nx + x];
                    if val != 0.0 {
                        v.push((y, x, val));
                    }
                }
            }
            v
        })
        .collect()
}

/// Scatter implementation; cost scales with the number of nonzero inputs.
pub fn conv3d_sparse(input: &Grid3<f64>, kernel: &Grid3<f64>) -> Result<ResponseGrid> {
    let gs = input.shape();
    let ks = kernel.shape();
    check_fits(gs, ks)?;
    let a = anchor(ks);
    let buckets = nonzeros_by_slice(input);
    let ker = kernel.as_slice();
    let mut out = Grid3::<f64>::zeros(gs);
    out.as_mut_slice()
        .par_chunks_mut(gs[1] * gs[2])
        .enumerate()
        .for_each(|(z, plane)| {
            for kz in 0..ks[0] {
                // input slice feeding output slice z through kernel slice kz
                let iz = z + kz;
                if iz < a[0] || iz - a[0] >= gs[0] {
                    continue;
                }
                for &(iy, ix, val) in &buckets[iz - a[0]] {
                    for ky in 0..ks[1] {
                        let oy = iy + a[1];
                        if oy < ky || oy - ky >= gs[1] {
                            continue;
                        }
                        let oy = oy - ky;
                        let krow = (kz * ks[1] + ky) * ks[2];
                        for kx in 0..ks[2] {
                            let ox = ix + a[2];
                            if ox < kx || ox - kx >= gs[2] {
                                continue;
                            }
                            plane[oy * gs[2] + ox - kx] += ker[krow + kx] * val;
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Correlate a raw field, picking the scatter path for sparse inputs.
pub fn correlate(input: &Grid3<f64>, kernel: &Grid3<f64>) -> Result<ResponseGrid> {
    let nnz = input.as_slice().iter().filter(|&&v| v != 0.0).count();
    if (nnz as f64) < SPARSE_DENSITY * input.len() as f64 {
        conv3d_sparse(input, kernel)
    } else {
        conv3d_direct(input, kernel)
    }
}

pub fn conv3d(grid: &VoxelGrid, kernel: &KernelTensor) -> Result<ResponseGrid> {
    correlate(&grid.values, &kernel.weights)
}

/// Adjoint of the correlation with respect to the kernel:
/// `G[k] = Σ_v upstream[v] · φ[v + k − a]`.
pub fn kernel_adjoint(input: &Grid3<f64>, upstream: &Grid3<f64>, kshape: Shape3) -> Result<Grid3<f64>> {
    let gs = input.shape();
    upstream.ensure_shape(gs)?;
    check_fits(gs, kshape)?;
    let a = anchor(kshape);
    let buckets = nonzeros_by_slice(input);
    let up = upstream.as_slice();
    let mut out = Grid3::<f64>::zeros(kshape);
    out.as_mut_slice()
        .par_chunks_mut(kshape[1] * kshape[2])
        .enumerate()
        .for_each(|(kz, plane)| {
            // input voxel u contributes to output voxel v = u − k + a
            for (iz, bucket) in buckets.iter().enumerate() {
                let vz = iz + a[0];
                if vz < kz || vz - kz >= gs[0] {
                    continue;
                }
                let vz = vz - kz;
                for &(iy, ix, val) in bucket {
                    for ky in 0..kshape[1] {
                        let vy = iy + a[1];
                        if vy < ky || vy - ky >= gs[1] {
                            continue;
                        }
                        let row = (vz * gs[1] + vy - ky) * gs[2];
                        for kx in 0..kshape[2] {
                            let vx = ix + a[2];
                            if vx < kx || vx - kx >= gs[2] {
                                continue;
                            }
                            plane[ky * kshape[2] + kx] += val * up[row + vx - kx];
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Shift contents by `offset` voxels; vacated voxels become 0.
pub fn translate_grid(grid: &Grid3<f64>, offset: [i64; 3]) -> Result<Grid3<f64>> {
    let s = grid.shape();
    if (0..3).any(|a| offset[a].unsigned_abs() as usize >= s[a]) {
        return Err(Error::OffsetOutOfRange { offset, shape: s });
    }
    let mut out = Grid3::<f64>::zeros(s);
    for z in 0..s[0] {
        for y in 0..s[1] {
            for x in 0..s[2] {
                let src = [z as i64 - offset[0], y as i64 - offset[1], x as i64 - offset[2]];
                if let Some(&v) = grid.get_signed(src) {
                    *out.get_mut([z, y, x]) = v;
                }
            }
        }
    }
    Ok(out)
}

/// Largest `|conv(translate(φ)) − translate(conv(φ))|` over voxels at least
/// `kernel extent + |offset|` away from every face.
pub fn check_equivariance(kernel: &Grid3<f64>, grid: &Grid3<f64>, offset: [i64; 3]) -> Result<f64> {
    let s = grid.shape();
    let ks = kernel.shape();
    let margin = [
        ks[0] + offset[0].unsigned_abs() as usize,
        ks[1] + offset[1].unsigned_abs() as usize,
        ks[2] + offset[2].unsigned_abs() as usize,
    ];
    if (0..3).any(|a| 2 * margin[a] >= s[a]) {
        return Err(Error::NoInteriorRegion { grid: s, margin });
    }
    let lhs = correlate(&translate_grid(grid, offset)?, kernel)?;
    let rhs = translate_grid(&correlate(grid, kernel)?, offset)?;
    let mut worst: f64 = 0.0;
    for z in margin[0]..s[0] - margin[0] {
        for y in margin[1]..s[1] - margin[1] {
            for x in margin[2]..s[2] - margin[2] {
                worst = worst.max((lhs.get([z, y, x]) - rhs.get([z, y, x])).abs());
            }
        }
    }
    Ok(worst)
}

/// `(‖K⋆a − K⋆b‖_∞, ‖a − b‖_∞)`; non-expansive kernels keep `lhs ≤ rhs`.
pub fn check_nonexpansivity(
    kernel: &Grid3<f64>,
    grid_a: &Grid3<f64>,
    grid_b: &Grid3<f64>,
) -> Result<(f64, f64)> {
    grid_b.ensure_shape(grid_a.shape())?;
    let rhs = grid_a.sup_distance(grid_b)?;
    let lhs = correlate(grid_a, kernel)?.sup_distance(&correlate(grid_b, kernel)?)?;
    Ok((lhs, rhs))
}
