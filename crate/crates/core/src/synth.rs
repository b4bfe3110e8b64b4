//! Synthetic voxelized scenes: sphere shells, planar patches and random
//! fills. Surfaces are sampled at half-voxel spacing, so they come out
//! closed and one to two voxels thick like scanned geometry.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{Voxel, VoxelSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64 },
    /// Parallelogram `origin + s * u + t * v`, `s, t in [0, 1]`.
    Patch { origin: [f64; 3], u: [f64; 3], v: [f64; 3] },
}

impl Shape {
    fn sample(&self, mut emit: impl FnMut([f64; 3])) {
        match *self {
            Shape::Sphere { center, radius } => {
                let n_theta = (PI * radius * 2.0).ceil().max(1.0) as usize;
                for i in 0..=n_theta {
                    let theta = PI * i as f64 / n_theta as f64;
                    let ring = radius * theta.sin();
                    let n_phi = (2.0 * PI * ring * 2.0).ceil().max(1.0) as usize;
                    for j in 0..n_phi {
                        let phi = 2.0 * PI * j as f64 / n_phi as f64;
                        emit([
                            center[0] + ring * phi.cos(),
                            center[1] + ring * phi.sin(),
                            center[2] + radius * theta.cos(),
                        ]);
                    }
                }
            }
            Shape::Patch { origin, u, v } => {
                let len = |a: [f64; 3]| (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
                let ns = (len(u) * 2.0).ceil().max(1.0) as usize;
                let nt = (len(v) * 2.0).ceil().max(1.0) as usize;
                for i in 0..=ns {
                    let s = i as f64 / ns as f64;
                    for j in 0..=nt {
                        let t = j as f64 / nt as f64;
                        emit([
                            origin[0] + s * u[0] + t * v[0],
                            origin[1] + s * u[1] + t * v[1],
                            origin[2] + s * u[2] + t * v[2],
                        ]);
                    }
                }
            }
        }
    }
}

/// Voxelizes `shapes` on the `2^bitdepth` grid, dropping samples outside it.
pub fn rasterize(shapes: &[Shape], bitdepth: u8) -> VoxelSet {
    let side = (1u32 << bitdepth) as f64;
    let mut voxels = Vec::new();
    for shape in shapes {
        shape.sample(|p| {
            if p.iter().all(|&c| c >= 0.0 && c < side) {
                voxels.push(Voxel::new(p[0] as u32, p[1] as u32, p[2] as u32));
            }
        });
    }
    VoxelSet::from_voxels(voxels, bitdepth).expect("samples are inside the grid")
}

/// One to three spheres and patches with random placement.
pub fn structured_scene(bitdepth: u8, seed: u64) -> VoxelSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = (1u32 << bitdepth) as f64;
    let n = rng.gen_range(1..=3);
    let mut shapes = Vec::with_capacity(n);
    for _ in 0..n {
        let point = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
            [
                rng.gen_range(lo..hi) * side,
                rng.gen_range(lo..hi) * side,
                rng.gen_range(lo..hi) * side,
            ]
        };
        let shape = if rng.gen_bool(0.5) {
            let center = point(&mut rng, 0.3, 0.7);
            Shape::Sphere {
                center,
                radius: rng.gen_range(0.1..0.3) * side,
            }
        } else {
            let origin = point(&mut rng, 0.05, 0.5);
            let u = point(&mut rng, -0.1, 0.5);
            let v = point(&mut rng, -0.1, 0.5);
            Shape::Patch { origin, u, v }
        };
        shapes.push(shape);
    }
    let vs = rasterize(&shapes, bitdepth);
    if vs.is_empty() {
        return structured_scene(bitdepth, seed.wrapping_add(0x9E37_79B9));
    }
    vs
}

/// `count` uniform random draws (duplicates merged).
pub fn random_scene(bitdepth: u8, count: usize, seed: u64) -> VoxelSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = 1u32 << bitdepth;
    let voxels = (0..count).map(|_| {
        Voxel::new(rng.gen_range(0..side), rng.gen_range(0..side), rng.gen_range(0..side))
    });
    VoxelSet::from_voxels(voxels, bitdepth).expect("draws are inside the grid")
}

/// Each voxel of the grid occupied independently with probability `density`.
pub fn random_fill(bitdepth: u8, density: f64, seed: u64) -> VoxelSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = 1u32 << bitdepth;
    let mut voxels = Vec::new();
    for z in 0..side {
        for x in 0..side {
            for y in 0..side {
                if rng.gen_bool(density) {
                    voxels.push(Voxel::new(x, y, z));
                }
            }
        }
    }
    VoxelSet::from_voxels(voxels, bitdepth).expect("grid cells are in range")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_shell_is_thin_and_closed() {
        let vs = rasterize(
            &[Shape::Sphere {
                center: [32.0, 32.0, 32.0],
                radius: 20.0,
            }],
            6,
        );
        for v in vs.iter() {
            let d = [v.x, v.y, v.z].map(|c| c as f64 + 0.5 - 32.0);
            let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            assert!((r - 20.0).abs() < 1.5);
        }
        // Surface area 4 pi r^2 ~ 5027 voxels, give or take thickness.
        assert!((4000..12000).contains(&vs.len()), "{}", vs.len());
    }

    #[test]
    fn generators_are_seeded() {
        assert_eq!(structured_scene(6, 1), structured_scene(6, 1));
        assert_ne!(structured_scene(6, 1), structured_scene(6, 2));
        assert_eq!(random_scene(5, 100, 3), random_scene(5, 100, 3));
        let half = random_fill(4, 0.5, 9);
        assert!((1500..2600).contains(&half.len()));
        assert!(random_fill(3, 0.0, 1).is_empty());
    }
}
