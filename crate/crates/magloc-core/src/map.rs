//! Hash-indexed magnetic field map: offline construction from world-frame
//! samples via local Gaussian-process regression, O(1) online queries, and a
//! versioned binary file format.
//!
//! The map is a fixed-resolution 3D grid stored sparsely in a hash table.
//! Each stored cell holds the GP posterior mean of the field at the cell
//! center, regressed per component over the samples within `support_radius`
//! of the center. Cells without enough nearby samples stay absent, so the
//! map never extrapolates.

use crate::numeric::pairwise_sum;
use nalgebra::{DMatrix, Vector3};
use rayon::prelude::*;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

/// Upper bound on a plausible indoor field magnitude, µT.
const MAX_FIELD_MAGNITUDE: f64 = 1000.0;

const MAGIC: &[u8; 6] = b"MFMAP\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug)]
pub enum MapError {
    /// Bad arguments: empty sample list, non-finite values, invalid
    /// hyperparameters.
    InvalidInput(String),
    Io(std::io::Error),
    /// File does not start with the `MFMAP\0` magic bytes.
    BadMagic,
    UnsupportedVersion { found: u32 },
    /// File ended before the declared cell records.
    Truncated { expected_cells: u64, read_cells: u64 },
    /// Extra bytes after the last declared record.
    TrailingBytes,
    /// Structurally valid file with values violating map invariants.
    Corrupt(String),
}

impl std::fmt::Display for MapError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MapError::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            MapError::Io(e) => write!(f, "i/o error: {e}"),
            MapError::BadMagic => write!(f, "not a map file (bad magic bytes)"),
            MapError::UnsupportedVersion { found } => {
                write!(f, "unsupported map format version {found} (expected {FORMAT_VERSION})")
            }
            MapError::Truncated { expected_cells, read_cells } => write!(
                f,
                "truncated map file: expected {expected_cells} cells, could read {read_cells}"
            ),
            MapError::TrailingBytes => write!(f, "trailing bytes after last cell record"),
            MapError::Corrupt(msg) => write!(f, "corrupt map file: {msg}"),
        }
    }
}

impl std::error::Error for MapError {}

impl From<std::io::Error> for MapError {
    fn from(e: std::io::Error) -> Self {
        MapError::Io(e)
    }
}

/// Signed integer grid indices of one map cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MapCellKey {
    pub ix: i32,
    pub iy: i32,
    pub iz: i32,
}

/// Floor-quantized cell key of a world position.
pub fn cell_key(p: &Vector3<f64>, resolution: f64) -> Result<MapCellKey, MapError> {
    if !(resolution > 0.0) {
        return Err(MapError::InvalidInput(format!("resolution must be > 0, got {resolution}")));
    }
    let mut idx = [0i32; 3];
    for (i, slot) in idx.iter_mut().enumerate() {
        let q = (p[i] / resolution).floor();
        if !q.is_finite() || q < i32::MIN as f64 || q > i32::MAX as f64 {
            return Err(MapError::InvalidInput(format!(
                "coordinate {} not representable on the grid",
                p[i]
            )));
        }
        *slot = q as i32;
    }
    Ok(MapCellKey { ix: idx[0], iy: idx[1], iz: idx[2] })
}

/// Axis-aligned bounding box in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

/// One raw world-frame field sample from the offline mapping run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawMagSample {
    /// World-frame position, meters.
    pub position: Vector3<f64>,
    /// World-frame field, µT (sensor reading already rotated by the mapping
    /// odometry pose).
    pub field: Vector3<f64>,
}

/// Hyperparameters of the local squared-exponential GP used by [`build_map`].
#[derive(Debug, Clone, Copy)]
pub struct GpHyperparams {
    /// Kernel length scale, meters.
    pub length_scale: f64,
    /// Signal standard deviation, µT.
    pub sigma_f: f64,
    /// Observation noise standard deviation, µT. Must be > 0.
    pub sigma_n: f64,
    /// Samples beyond this distance from a cell center do not contribute to
    /// it; cells with too few samples inside stay unmapped.
    pub support_radius: f64,
    /// Minimum in-radius sample count for a cell to be mapped.
    pub min_neighbors: usize,
    /// Cap on the regression set per cell (nearest samples win). Keeps the
    /// per-cell solve bounded on dense mapping runs.
    pub max_neighbors: usize,
}

impl Default for GpHyperparams {
    fn default() -> Self {
        GpHyperparams {
            length_scale: 0.3,
            sigma_f: 5.0,
            sigma_n: 0.5,
            support_radius: 0.5,
            min_neighbors: 3,
            max_neighbors: 64,
        }
    }
}

impl GpHyperparams {
    fn validate(&self) -> Result<(), MapError> {
        let ok = self.length_scale > 0.0
            && self.sigma_f > 0.0
            && self.sigma_n > 0.0
            && self.support_radius > 0.0
            && self.min_neighbors >= 1
            && self.max_neighbors >= self.min_neighbors;
        if ok {
            Ok(())
        } else {
            Err(MapError::InvalidInput(format!("bad GP hyperparameters: {self:?}")))
        }
    }
}

/// Immutable hash-indexed magnetic map. Queries are O(1) expected time and
/// safe to issue concurrently from many threads.
#[derive(Debug, Clone, PartialEq)]
pub struct MagneticMap {
    resolution: f64,
    cells: HashMap<MapCellKey, Vector3<f64>>,
    bounds: Aabb,
    base_field: Vector3<f64>,
}

impl MagneticMap {
    /// Assembles a map directly from cell values, computing bounds.
    pub fn from_cells(
        resolution: f64,
        cells: HashMap<MapCellKey, Vector3<f64>>,
        base_field: Vector3<f64>,
    ) -> Result<Self, MapError> {
        if !(resolution > 0.0) || !resolution.is_finite() {
            return Err(MapError::InvalidInput(format!("resolution must be > 0, got {resolution}")));
        }
        let mut bounds = Aabb { min: Vector3::zeros(), max: Vector3::zeros() };
        let mut first = true;
        for (key, value) in &cells {
            if !value.iter().all(|x| x.is_finite()) || value.norm() >= MAX_FIELD_MAGNITUDE {
                return Err(MapError::InvalidInput(format!(
                    "cell {key:?} holds implausible field {value:?}"
                )));
            }
            let lo = Vector3::new(
                key.ix as f64 * resolution,
                key.iy as f64 * resolution,
                key.iz as f64 * resolution,
            );
            let hi = lo.add_scalar(resolution);
            if first {
                bounds = Aabb { min: lo, max: hi };
                first = false;
            } else {
                for i in 0..3 {
                    bounds.min[i] = bounds.min[i].min(lo[i]);
                    bounds.max[i] = bounds.max[i].max(hi[i]);
                }
            }
        }
        Ok(MagneticMap { resolution, cells, bounds, base_field })
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn bounds(&self) -> &Aabb {
        &self.bounds
    }

    pub fn base_field(&self) -> &Vector3<f64> {
        &self.base_field
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Field of the cell containing `p`, or `None` when that cell is
    /// unmapped. No sub-cell interpolation happens here; the stored value is
    /// the posterior at the cell center.
    #[inline]
    pub fn query(&self, p: &Vector3<f64>) -> Option<Vector3<f64>> {
        let key = cell_key(p, self.resolution).ok()?;
        self.cells.get(&key).copied()
    }

    pub fn get_cell(&self, key: &MapCellKey) -> Option<Vector3<f64>> {
        self.cells.get(key).copied()
    }

    /// World position of a cell center.
    pub fn cell_center(&self, key: &MapCellKey) -> Vector3<f64> {
        Vector3::new(
            (key.ix as f64 + 0.5) * self.resolution,
            (key.iy as f64 + 0.5) * self.resolution,
            (key.iz as f64 + 0.5) * self.resolution,
        )
    }

    /// Cell keys in canonical (lexicographic) order.
    pub fn sorted_keys(&self) -> Vec<MapCellKey> {
        let mut keys: Vec<MapCellKey> = self.cells.keys().copied().collect();
        keys.sort();
        keys
    }

    /// Bit-exact equality: every f64 compared by its bit pattern.
    pub fn bit_eq(&self, other: &MagneticMap) -> bool {
        if self.resolution.to_bits() != other.resolution.to_bits()
            || self.cells.len() != other.cells.len()
        {
            return false;
        }
        let vec_bits_eq = |a: &Vector3<f64>, b: &Vector3<f64>| {
            (0..3).all(|i| a[i].to_bits() == b[i].to_bits())
        };
        if !vec_bits_eq(&self.base_field, &other.base_field)
            || !vec_bits_eq(&self.bounds.min, &other.bounds.min)
            || !vec_bits_eq(&self.bounds.max, &other.bounds.max)
        {
            return false;
        }
        self.cells.iter().all(|(k, v)| match other.cells.get(k) {
            Some(w) => vec_bits_eq(v, w),
            None => false,
        })
    }
}

/// Builds a map by densifying raw samples onto the grid with a local GP.
///
/// For every grid cell whose center has at least `min_neighbors` samples
/// within `support_radius`, stores the per-component GP posterior mean at the
/// cell center. The result is independent of the order of `samples`,
/// bit-for-bit.
pub fn build_map(
    samples: &[RawMagSample],
    resolution: f64,
    gp: &GpHyperparams,
    base_field: Vector3<f64>,
) -> Result<MagneticMap, MapError> {
    if samples.is_empty() {
        return Err(MapError::InvalidInput("sample list is empty".into()));
    }
    if !(resolution > 0.0) || !resolution.is_finite() {
        return Err(MapError::InvalidInput(format!("resolution must be > 0, got {resolution}")));
    }
    gp.validate()?;
    for s in samples {
        let finite =
            s.position.iter().all(|x| x.is_finite()) && s.field.iter().all(|x| x.is_finite());
        if !finite {
            return Err(MapError::InvalidInput(format!("non-finite sample {s:?}")));
        }
    }

    // Canonical sample order makes every downstream step order-insensitive.
    let mut sorted: Vec<RawMagSample> = samples.to_vec();
    sorted.sort_by(|a, b| {
        let ka = [a.position.x, a.position.y, a.position.z, a.field.x, a.field.y, a.field.z];
        let kb = [b.position.x, b.position.y, b.position.z, b.field.x, b.field.y, b.field.z];
        ka.iter().zip(&kb).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
    });

    // Bucket the samples at support_radius granularity; anything relevant to
    // a cell lies in the 3×3×3 bucket neighborhood of that cell.
    let bucket = gp.support_radius;
    let bucket_of = |p: &Vector3<f64>| -> (i64, i64, i64) {
        ((p.x / bucket).floor() as i64, (p.y / bucket).floor() as i64, (p.z / bucket).floor() as i64)
    };
    let mut buckets: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (i, s) in sorted.iter().enumerate() {
        buckets.entry(bucket_of(&s.position)).or_default().push(i);
    }

    // Candidate buckets: any bucket adjacent to an occupied one can contain
    // supported cell centers.
    let mut candidate_buckets: Vec<(i64, i64, i64)> = buckets
        .keys()
        .flat_map(|&(bx, by, bz)| {
            (-1..=1).flat_map(move |dx| {
                (-1..=1).flat_map(move |dy| (-1..=1).map(move |dz| (bx + dx, by + dy, bz + dz)))
            })
        })
        .collect();
    candidate_buckets.sort_unstable();
    candidate_buckets.dedup();

    let cells_per_bucket = (bucket / resolution).ceil() as i64;
    let radius_sq = gp.support_radius * gp.support_radius;

    let cell_vecs: Vec<Vec<(MapCellKey, Vector3<f64>)>> = candidate_buckets
        .par_iter()
        .map(|&(bx, by, bz)| {
            let mut out = Vec::new();
            let mut neighbor_idx: Vec<usize> = Vec::new();
            for nx in -1..=1i64 {
                for ny in -1..=1i64 {
                    for nz in -1..=1i64 {
                        if let Some(ids) = buckets.get(&(bx + nx, by + ny, bz + nz)) {
                            neighbor_idx.extend_from_slice(ids);
                        }
                    }
                }
            }
            if neighbor_idx.len() < gp.min_neighbors {
                return out;
            }
            // Cell index ranges covered by this bucket.
            let cell_range = |b: i64| -> (i64, i64) {
                let lo = (b as f64 * bucket / resolution).floor() as i64;
                (lo, lo + cells_per_bucket)
            };
            let (x0, x1) = cell_range(bx);
            let (y0, y1) = cell_range(by);
            let (z0, z1) = cell_range(bz);
            let mut in_radius: Vec<(f64, usize)> = Vec::new();
            for ix in x0..x1 {
                for iy in y0..y1 {
                    for iz in z0..z1 {
                        // Guard against overlap at bucket seams when
                        // bucket/resolution is not integral.
                        let center = Vector3::new(
                            (ix as f64 + 0.5) * resolution,
                            (iy as f64 + 0.5) * resolution,
                            (iz as f64 + 0.5) * resolution,
                        );
                        if bucket_of(&center) != (bx, by, bz) {
                            continue;
                        }
                        in_radius.clear();
                        for &si in &neighbor_idx {
                            let d2 = (sorted[si].position - center).norm_squared();
                            if d2 <= radius_sq {
                                in_radius.push((d2, si));
                            }
                        }
                        if in_radius.len() < gp.min_neighbors {
                            continue;
                        }
                        in_radius.sort_by(|a, b| {
                            a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
                        });
                        in_radius.truncate(gp.max_neighbors);
                        let value =
                            gp_posterior_mean(&sorted, &in_radius, &center, gp);
                        let (ix32, iy32, iz32) = (ix as i32, iy as i32, iz as i32);
                        out.push((MapCellKey { ix: ix32, iy: iy32, iz: iz32 }, value));
                    }
                }
            }
            out
        })
        .collect();

    let mut cells = HashMap::new();
    for v in cell_vecs {
        for (k, val) in v {
            cells.insert(k, val);
        }
    }
    MagneticMap::from_cells(resolution, cells, base_field)
}

/// Zero-mean GP posterior mean at `center` over the selected neighbors,
/// squared-exponential kernel, independent per field component.
fn gp_posterior_mean(
    samples: &[RawMagSample],
    selected: &[(f64, usize)],
    center: &Vector3<f64>,
    gp: &GpHyperparams,
) -> Vector3<f64> {
    let n = selected.len();
    let sf2 = gp.sigma_f * gp.sigma_f;
    let inv_2l2 = 1.0 / (2.0 * gp.length_scale * gp.length_scale);

    let mut k = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        let pi = samples[selected[i].1].position;
        k[(i, i)] = sf2 + gp.sigma_n * gp.sigma_n;
        for j in (i + 1)..n {
            let pj = samples[selected[j].1].position;
            let v = sf2 * (-(pi - pj).norm_squared() * inv_2l2).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    let mut y = DMatrix::<f64>::zeros(n, 3);
    let mut kstar = DMatrix::<f64>::zeros(1, n);
    for i in 0..n {
        let s = &samples[selected[i].1];
        y[(i, 0)] = s.field.x;
        y[(i, 1)] = s.field.y;
        y[(i, 2)] = s.field.z;
        kstar[(0, i)] = sf2 * (-(s.position - *center).norm_squared() * inv_2l2).exp();
    }
    // K + σ_n²I is positive definite for σ_n > 0, so this cannot fail.
    let chol = k.cholesky().expect("kernel matrix not positive definite");
    let alpha = chol.solve(&y);
    let mean = kstar * alpha;
    Vector3::new(mean[(0, 0)], mean[(0, 1)], mean[(0, 2)])
}

/// Writes the map with the versioned little-endian binary layout:
/// magic `MFMAP\0`, u32 version, f64 resolution, f64×6 bounds
/// (min x,y,z then max x,y,z), f64×3 base field, u64 cell count, then one
/// `(i32 ix, i32 iy, i32 iz, f64 bx, f64 by, f64 bz)` record per cell.
pub fn save_map(map: &MagneticMap, path: &Path) -> Result<(), MapError> {
    let mut buf: Vec<u8> = Vec::with_capacity(64 + map.cell_count() * 36);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&map.resolution.to_le_bytes());
    for v in [&map.bounds.min, &map.bounds.max] {
        for i in 0..3 {
            buf.extend_from_slice(&v[i].to_le_bytes());
        }
    }
    for i in 0..3 {
        buf.extend_from_slice(&map.base_field[i].to_le_bytes());
    }
    buf.extend_from_slice(&(map.cell_count() as u64).to_le_bytes());
    for key in map.sorted_keys() {
        let value = map.cells[&key];
        buf.extend_from_slice(&key.ix.to_le_bytes());
        buf.extend_from_slice(&key.iy.to_le_bytes());
        buf.extend_from_slice(&key.iz.to_le_bytes());
        for i in 0..3 {
            buf.extend_from_slice(&value[i].to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    cursor: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.cursor + n > self.bytes.len() {
            return None;
        }
        let slice = &self.bytes[self.cursor..self.cursor + n];
        self.cursor += n;
        Some(slice)
    }

    fn f64_le(&mut self) -> Option<f64> {
        Some(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_map(path: &Path) -> Result<MagneticMap, MapError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = ByteReader { bytes: &bytes, cursor: 0 };

    let header_err = || MapError::Truncated { expected_cells: 0, read_cells: 0 };
    let magic = r.take(6).ok_or(MapError::BadMagic)?;
    if magic != MAGIC {
        return Err(MapError::BadMagic);
    }
    let version = u32::from_le_bytes(r.take(4).ok_or(MapError::BadMagic)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(MapError::UnsupportedVersion { found: version });
    }
    let resolution = r.f64_le().ok_or_else(header_err)?;
    let mut bounds_raw = [0.0f64; 6];
    for slot in &mut bounds_raw {
        *slot = r.f64_le().ok_or_else(header_err)?;
    }
    let mut base = Vector3::zeros();
    for i in 0..3 {
        base[i] = r.f64_le().ok_or_else(header_err)?;
    }
    let cell_count =
        u64::from_le_bytes(r.take(8).ok_or_else(header_err)?.try_into().unwrap());

    let mut cells = HashMap::with_capacity(cell_count as usize);
    for read in 0..cell_count {
        let record = match r.take(36) {
            Some(rec) => rec,
            None => {
                return Err(MapError::Truncated { expected_cells: cell_count, read_cells: read })
            }
        };
        let ix = i32::from_le_bytes(record[0..4].try_into().unwrap());
        let iy = i32::from_le_bytes(record[4..8].try_into().unwrap());
        let iz = i32::from_le_bytes(record[8..12].try_into().unwrap());
        let bx = f64::from_le_bytes(record[12..20].try_into().unwrap());
        let by = f64::from_le_bytes(record[20..28].try_into().unwrap());
        let bz = f64::from_le_bytes(record[28..36].try_into().unwrap());
        cells.insert(MapCellKey { ix, iy, iz }, Vector3::new(bx, by, bz));
    }
    if r.cursor != bytes.len() {
        return Err(MapError::TrailingBytes);
    }

    let map = MagneticMap::from_cells(resolution, cells, base)
        .map_err(|e| MapError::Corrupt(e.to_string()))?;
    let stored_bounds = Aabb {
        min: Vector3::new(bounds_raw[0], bounds_raw[1], bounds_raw[2]),
        max: Vector3::new(bounds_raw[3], bounds_raw[4], bounds_raw[5]),
    };
    if map.cell_count() > 0 && stored_bounds != map.bounds {
        return Err(MapError::Corrupt("stored bounds disagree with cell extents".into()));
    }
    Ok(map)
}

/// Mean world-frame field over a sample set, summed pairwise in canonical
/// order so the result is order-insensitive.
pub fn mean_sample_field(samples: &[RawMagSample]) -> Vector3<f64> {
    let mut comps = Vector3::zeros();
    for axis in 0..3 {
        let mut vals: Vec<f64> = samples.iter().map(|s| s.field[axis]).collect();
        vals.sort_by(f64::total_cmp);
        comps[axis] = pairwise_sum(&vals) / samples.len() as f64;
    }
    comps
}
