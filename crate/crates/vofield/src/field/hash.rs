//! Multi-resolution hash-grid encoding with trilinear interpolation.
//!
//! Each level interpolates eight table entries per query. Levels whose dense
//! grid fits in the table are indexed directly; finer levels use the
//! standard xor-of-primes spatial hash with unmitigated collisions. The
//! forward pass optionally carries positional tangents (jets) so density
//! gradients (surface normals) are forward values with an exact backward.

use super::Jet;

const PRIME_Y: u64 = 2_654_435_761;
const PRIME_Z: u64 = 805_459_861;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HashConfig {
    pub levels: usize,
    pub features_per_level: usize,
    pub table_size_log2: usize,
    pub base_resolution: usize,
    pub growth_factor: f64,
}

impl HashConfig {
    pub fn table_size(&self) -> usize {
        1 << self.table_size_log2
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.features_per_level
    }

    pub fn param_count(&self) -> usize {
        self.levels * self.table_size() * self.features_per_level
    }

    pub fn resolution(&self, level: usize) -> usize {
        ((self.base_resolution as f64) * self.growth_factor.powi(level as i32)).floor() as usize
    }
}

/// Per-level cache of one encoded position.
#[derive(Clone, Debug)]
pub struct LevelCache {
    /// Table slot of each of the 8 cell corners.
    corners: [usize; 8],
    /// Interpolation fractions inside the cell.
    frac: [f64; 3],
    resolution: f64,
}

#[derive(Clone, Debug)]
pub struct HashCache {
    levels: Vec<LevelCache>,
    /// True when the query position had to be clamped into the unit cube.
    pub clamped: bool,
}

fn corner_index(cfg: &HashConfig, resolution: usize, cell: [usize; 3]) -> usize {
    let verts = resolution + 1;
    if verts * verts * verts <= cfg.table_size() {
        (cell[2] * verts + cell[1]) * verts + cell[0]
    } else {
        let h = (cell[0] as u64)
            ^ (cell[1] as u64).wrapping_mul(PRIME_Y)
            ^ (cell[2] as u64).wrapping_mul(PRIME_Z);
        (h & (cfg.table_size() as u64 - 1)) as usize
    }
}

/// Corner offsets in binary order: bit k of the corner id selects axis k.
#[inline]
fn corner_offset(corner: usize, axis: usize) -> usize {
    (corner >> axis) & 1
}

/// Trilinear weight of a corner and its first derivatives w.r.t. the
/// in-cell fraction.
#[inline]
fn weight_and_dweight(frac: &[f64; 3], corner: usize) -> (f64, [f64; 3]) {
    let mut axis_w = [0.0; 3];
    let mut axis_s = [0.0; 3];
    for k in 0..3 {
        if corner_offset(corner, k) == 1 {
            axis_w[k] = frac[k];
            axis_s[k] = 1.0;
        } else {
            axis_w[k] = 1.0 - frac[k];
            axis_s[k] = -1.0;
        }
    }
    let w = axis_w[0] * axis_w[1] * axis_w[2];
    let dw = [
        axis_s[0] * axis_w[1] * axis_w[2],
        axis_w[0] * axis_s[1] * axis_w[2],
        axis_w[0] * axis_w[1] * axis_s[2],
    ];
    (w, dw)
}

/// Encodes a position in the unit cube. `out` receives `levels * features`
/// jets whose tangents are derivatives w.r.t. the (unit-cube) position.
/// Positions outside the cube are clamped and flagged.
pub fn encode(
    cfg: &HashConfig,
    table: &[f64],
    position: &[f64; 3],
    out: &mut [Jet],
) -> HashCache {
    debug_assert_eq!(out.len(), cfg.output_dim());
    debug_assert_eq!(table.len(), cfg.param_count());
    let mut clamped = false;
    let mut pos = *position;
    for p in &mut pos {
        if *p < 0.0 || *p > 1.0 {
            clamped = true;
            *p = p.clamp(0.0, 1.0);
        }
    }

    let nf = cfg.features_per_level;
    let table_stride = cfg.table_size() * nf;
    let mut levels = Vec::with_capacity(cfg.levels);

    for level in 0..cfg.levels {
        let res = cfg.resolution(level);
        let scale = res as f64;
        let mut cell = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for k in 0..3 {
            let scaled = pos[k] * scale;
            let c = (scaled.floor() as usize).min(res.saturating_sub(1));
            cell[k] = c;
            frac[k] = scaled - c as f64;
        }
        let mut corners = [0usize; 8];
        for (corner, slot) in corners.iter_mut().enumerate() {
            let idx = corner_index(
                cfg,
                res,
                [
                    cell[0] + corner_offset(corner, 0),
                    cell[1] + corner_offset(corner, 1),
                    cell[2] + corner_offset(corner, 2),
                ],
            );
            *slot = idx;
        }

        let base = level * nf;
        for f in 0..nf {
            out[base + f] = Jet::default();
        }
        for corner in 0..8 {
            let (w, dw) = weight_and_dweight(&frac, corner);
            let entry = level * table_stride + corners[corner] * nf;
            for f in 0..nf {
                let e = table[entry + f];
                let jet = &mut out[base + f];
                jet.v += w * e;
                // Tangents are w.r.t. the unit-cube position: chain the
                // cell-resolution scale.
                for k in 0..3 {
                    jet.t[k] += dw[k] * scale * e;
                }
            }
        }
        levels.push(LevelCache {
            corners,
            frac,
            resolution: scale,
        });
    }

    HashCache { levels, clamped }
}

/// Reverse pass. `cot` carries cotangents on the output jets (value and
/// tangent components). Accumulates table-entry gradients into `grad_table`
/// and returns the position cotangent (including the second-order trilinear
/// terms required because tangents are forward values).
pub fn backward(
    cfg: &HashConfig,
    table: &[f64],
    cache: &HashCache,
    cot: &[Jet],
    grad_table: &mut [f64],
) -> [f64; 3] {
    debug_assert_eq!(cot.len(), cfg.output_dim());
    let nf = cfg.features_per_level;
    let table_stride = cfg.table_size() * nf;
    let mut pos_cot = [0.0f64; 3];

    for (level, lc) in cache.levels.iter().enumerate() {
        let scale = lc.resolution;
        let base = level * nf;
        for corner in 0..8 {
            let (w, dw) = weight_and_dweight(&lc.frac, corner);
            let entry = level * table_stride + lc.corners[corner] * nf;
            for f in 0..nf {
                let c = &cot[base + f];
                let e = table[entry + f];
                // d out.v / d e = w ; d out.t[k] / d e = dw[k] * scale.
                let mut g = w * c.v;
                for k in 0..3 {
                    g += dw[k] * scale * c.t[k];
                }
                grad_table[entry + f] += g;

                // d out.v / d pos[j] = dw[j] * scale * e.
                for j in 0..3 {
                    pos_cot[j] += dw[j] * scale * e * c.v;
                }
                // d out.t[k] / d pos[j]: second derivative of the trilinear
                // weight (zero for j == k, mixed terms otherwise).
                for k in 0..3 {
                    if c.t[k] == 0.0 {
                        continue;
                    }
                    for j in 0..3 {
                        if j == k {
                            continue;
                        }
                        let m = 3 - j - k; // remaining axis
                        let sign_j = if corner_offset(corner, j) == 1 { 1.0 } else { -1.0 };
                        let sign_k = if corner_offset(corner, k) == 1 { 1.0 } else { -1.0 };
                        let base_m = if corner_offset(corner, m) == 1 {
                            lc.frac[m]
                        } else {
                            1.0 - lc.frac[m]
                        };
                        let d2 = sign_j * sign_k * base_m * scale * scale;
                        pos_cot[j] += d2 * e * c.t[k];
                    }
                }
            }
        }
    }
    pos_cot
}
