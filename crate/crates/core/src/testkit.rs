//! Deterministic synthetic volumes: 3D Voronoi tessellations, gap and
//! tilted-split injection, and geometric phantoms. These power the
//! oracle-based tests and the training-set synthesis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{LabelVolume, Mask2D};

#[derive(Debug, Error)]
pub enum TestkitError {
    #[error("label {0} not present in volume")]
    LabelAbsent(u32),
    #[error("layer {layer} is not strictly interior to cell {label}'s z-range [{top}, {bottom}]")]
    BoundaryLayer {
        label: u32,
        layer: usize,
        top: usize,
        bottom: usize,
    },
    #[error("plane does not intersect cell {0}")]
    PlaneMissesCell(u32),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub dims: (usize, usize, usize),
    pub n_cells: usize,
    pub seed: u64,
    pub anisotropy: [f64; 3],
    pub min_cell_height: usize,
}

impl SynthSpec {
    pub fn new(dims: (usize, usize, usize), n_cells: usize, seed: u64) -> Self {
        Self {
            dims,
            n_cells,
            seed,
            anisotropy: [1.0, 1.0, 1.0],
            min_cell_height: 4,
        }
    }
}

/// Voronoi tessellation: seeds sampled uniformly in physical coordinates,
/// every voxel labeled by its nearest seed under anisotropy-scaled
/// distance. Deterministic per seed.
pub fn generate_voronoi_volume(spec: &SynthSpec) -> LabelVolume {
    assert!(spec.n_cells >= 1);
    let (nz, ny, nx) = spec.dims;
    let [az, ay, ax] = spec.anisotropy;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sites: Vec<[f64; 3]> = (0..spec.n_cells)
        .map(|_| {
            [
                rng.gen_range(0.0..nz as f64 * az),
                rng.gen_range(0.0..ny as f64 * ay),
                rng.gen_range(0.0..nx as f64 * ax),
            ]
        })
        .collect();
    let mut v = LabelVolume::new(spec.dims, spec.anisotropy).expect("valid anisotropy");
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [z as f64 * az, y as f64 * ay, x as f64 * ax];
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for (i, s) in sites.iter().enumerate() {
                    let d = (p[0] - s[0]).powi(2) + (p[1] - s[1]).powi(2) + (p[2] - s[2]).powi(2);
                    if d < best_d {
                        best_d = d;
                        best = i;
                    }
                }
                v.set(z, y, x, (best + 1) as u32);
            }
        }
    }
    v
}

/// Record of an injected axis-aligned gap, kept for round-trip scoring.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GapRecord {
    pub label_upper: u32,
    pub label_lower: u32,
    pub layer: usize,
    /// (y, x) pixels of the deleted mask
    pub deleted_pixels: Vec<(u32, u32)>,
}

impl GapRecord {
    pub fn deleted_mask(&self) -> Mask2D {
        Mask2D::new(self.layer, self.label_upper, self.deleted_pixels.clone())
    }
}

/// Delete one interior layer of a cell and relabel the lower fragment,
/// simulating an oversegmentation.
pub fn inject_axis_gap(
    volume: &mut LabelVolume,
    cell: u32,
    layer: usize,
    fresh_label: u32,
) -> Result<GapRecord, TestkitError> {
    let (nz, ny, nx) = volume.dims;
    let mut top = usize::MAX;
    let mut bottom = 0usize;
    let mut seen = false;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if volume.get(z, y, x) == cell {
                    seen = true;
                    top = top.min(z);
                    bottom = bottom.max(z);
                }
            }
        }
    }
    if !seen {
        return Err(TestkitError::LabelAbsent(cell));
    }
    if layer <= top || layer >= bottom {
        return Err(TestkitError::BoundaryLayer {
            label: cell,
            layer,
            top,
            bottom,
        });
    }
    let mut deleted = Vec::new();
    for y in 0..ny {
        for x in 0..nx {
            if volume.get(layer, y, x) == cell {
                deleted.push((y as u32, x as u32));
                volume.set(layer, y, x, 0);
            }
        }
    }
    for z in layer + 1..nz {
        for y in 0..ny {
            for x in 0..nx {
                if volume.get(z, y, x) == cell {
                    volume.set(z, y, x, fresh_label);
                }
            }
        }
    }
    Ok(GapRecord {
        label_upper: cell,
        label_lower: fresh_label,
        layer,
        deleted_pixels: deleted,
    })
}

/// Oriented plane in physical (anisotropy-scaled) coordinates.
#[derive(Debug, Clone, Copy)]
pub struct SplitPlane {
    pub point: [f64; 3],
    pub normal: [f64; 3],
}

impl SplitPlane {
    pub fn signed_distance(&self, p: [f64; 3]) -> f64 {
        (p[0] - self.point[0]) * self.normal[0]
            + (p[1] - self.point[1]) * self.normal[1]
            + (p[2] - self.point[2]) * self.normal[2]
    }
}

/// Relabel the positive-side voxels of a cell, simulating a tilted split.
/// No voxels are deleted.
pub fn inject_tilted_split(
    volume: &mut LabelVolume,
    cell: u32,
    plane: &SplitPlane,
    fresh_label: u32,
) -> Result<(), TestkitError> {
    let (nz, ny, nx) = volume.dims;
    let mut positive = Vec::new();
    let mut negative = 0usize;
    let mut seen = false;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if volume.get(z, y, x) == cell {
                    seen = true;
                    if plane.signed_distance(volume.physical(z, y, x)) > 0.0 {
                        positive.push((z, y, x));
                    } else {
                        negative += 1;
                    }
                }
            }
        }
    }
    if !seen {
        return Err(TestkitError::LabelAbsent(cell));
    }
    if positive.is_empty() || negative == 0 {
        return Err(TestkitError::PlaneMissesCell(cell));
    }
    for (z, y, x) in positive {
        volume.set(z, y, x, fresh_label);
    }
    Ok(())
}

/// Solid ellipsoid phantom with physical-coordinate semi-axes (rz, ry, rx).
pub fn ellipsoid_phantom(
    dims: (usize, usize, usize),
    anisotropy: [f64; 3],
    center: [f64; 3],
    radii: [f64; 3],
    label: u32,
) -> LabelVolume {
    let (nz, ny, nx) = dims;
    let mut v = LabelVolume::new(dims, anisotropy).expect("valid anisotropy");
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = v.physical(z, y, x);
                let q = ((p[0] - center[0]) / radii[0]).powi(2)
                    + ((p[1] - center[1]) / radii[1]).powi(2)
                    + ((p[2] - center[2]) / radii[2]).powi(2);
                if q <= 1.0 {
                    v.set(z, y, x, label);
                }
            }
        }
    }
    v
}

pub fn sphere_phantom(
    dims: (usize, usize, usize),
    anisotropy: [f64; 3],
    center: [f64; 3],
    radius: f64,
    label: u32,
) -> LabelVolume {
    ellipsoid_phantom(dims, anisotropy, center, [radius, radius, radius], label)
}

/// Two spheres touching near a point, carried as distinct labels.
pub fn tangent_spheres_phantom(
    dims: (usize, usize, usize),
    anisotropy: [f64; 3],
    center_a: [f64; 3],
    center_b: [f64; 3],
    radius: f64,
) -> LabelVolume {
    let (nz, ny, nx) = dims;
    let mut v = LabelVolume::new(dims, anisotropy).expect("valid anisotropy");
    let d2 = |p: [f64; 3], c: [f64; 3]| {
        (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)
    };
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = v.physical(z, y, x);
                let da = d2(p, center_a);
                let db = d2(p, center_b);
                let r2 = radius * radius;
                if da <= r2 && da <= db {
                    v.set(z, y, x, 1);
                } else if db <= r2 {
                    v.set(z, y, x, 2);
                }
            }
        }
    }
    v
}
