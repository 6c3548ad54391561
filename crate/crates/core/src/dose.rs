//! Simplified pencil-beam dose engine on a water phantom.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arcdata::{cell, ApertureRaster, Arc, BeamWeights, CHANNEL_CELLS, N_CONTROL_POINTS, N_LEAVES};
use crate::error::{dim_mismatch, Error, Result};
use crate::linalg::SparseMatrix;

pub const MAGIC: &[u8; 4] = b"ARCD";

type Vec3 = [f64; 3];

fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn unit(a: Vec3) -> Vec3 {
    scale(a, 1.0 / dot3(a, a).sqrt())
}

/// Uniform water phantom on a regular voxel grid centred on the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Phantom {
    pub extents: [usize; 3],
    /// Voxel edge length (mm).
    pub voxel_size: f64,
    /// Isocenter relative to the grid centre (mm).
    pub isocenter: Vec3,
    /// Linear attenuation coefficient (1/mm).
    pub mu: f64,
}

impl Default for Phantom {
    fn default() -> Self {
        Self {
            extents: [20, 20, 20],
            voxel_size: 3.3,
            isocenter: [0.0; 3],
            mu: 0.0049,
        }
    }
}

impl Phantom {
    pub fn validate(&self) -> Result<()> {
        if self.extents.iter().any(|&e| e == 0) {
            return Err(Error::EmptyGrid);
        }
        if !(self.voxel_size > 0.0) || !self.voxel_size.is_finite() {
            return Err(Error::Config(format!("voxel size must be > 0, got {}", self.voxel_size)));
        }
        if !(self.mu >= 0.0) || !self.mu.is_finite() {
            return Err(Error::Config(format!("attenuation must be >= 0, got {}", self.mu)));
        }
        Ok(())
    }

    pub fn n_voxels(&self) -> usize {
        self.extents.iter().product()
    }

    /// Flat voxel index, x fastest.
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iz * self.extents[1] + iy) * self.extents[0] + ix
    }

    pub fn coords(&self, k: usize) -> [usize; 3] {
        let [nx, ny, _] = self.extents;
        [k % nx, (k / nx) % ny, k / (nx * ny)]
    }

    pub fn voxel_center(&self, k: usize) -> Vec3 {
        let c = self.coords(k);
        let mut p = [0.0; 3];
        for a in 0..3 {
            p[a] = (c[a] as f64 + 0.5 - self.extents[a] as f64 / 2.0) * self.voxel_size;
        }
        p
    }

    fn half_extent(&self) -> Vec3 {
        let mut h = [0.0; 3];
        for a in 0..3 {
            h[a] = self.extents[a] as f64 * self.voxel_size / 2.0;
        }
        h
    }

    /// Distance of each voxel centre from the isocenter.
    pub fn radii(&self) -> Vec<f64> {
        (0..self.n_voxels())
            .map(|k| {
                let d = sub(self.voxel_center(k), self.isocenter);
                dot3(d, d).sqrt()
            })
            .collect()
    }

    /// Slab intersection of a ray with the phantom box: entry and exit
    /// distances, if the ray crosses it.
    fn clip(&self, origin: Vec3, dir: Vec3) -> Option<(f64, f64)> {
        let h = self.half_extent();
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        for a in 0..3 {
            if dir[a] == 0.0 {
                if origin[a] < -h[a] || origin[a] > h[a] {
                    return None;
                }
                continue;
            }
            let (ta, tb) = ((-h[a] - origin[a]) / dir[a], (h[a] - origin[a]) / dir[a]);
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
        (t1 > t0 && t1 > 0.0).then_some((t0.max(0.0), t1))
    }

    fn containing_voxel(&self, p: Vec3) -> Option<usize> {
        let h = self.half_extent();
        let mut c = [0usize; 3];
        for a in 0..3 {
            let i = ((p[a] + h[a]) / self.voxel_size).floor();
            if i < 0.0 || i >= self.extents[a] as f64 {
                return None;
            }
            c[a] = i as usize;
        }
        Some(self.index(c[0], c[1], c[2]))
    }
}

/// Gantry arc and collimator beamlet grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamGeometry {
    pub control_points: usize,
    pub start_angle_deg: f64,
    pub arc_span_deg: f64,
    /// Source-axis distance (mm).
    pub sad: f64,
    /// Beamlet rows (leaf pairs) per control point.
    pub rows: usize,
    /// Beamlet columns along the leaf travel direction.
    pub columns: usize,
    /// Beamlet edge at the isocenter plane (mm).
    pub beamlet_width: f64,
}

impl Default for BeamGeometry {
    fn default() -> Self {
        Self {
            control_points: 16,
            start_angle_deg: -160.0,
            arc_span_deg: 320.0,
            sad: 1000.0,
            rows: 16,
            columns: 16,
            beamlet_width: 5.0,
        }
    }
}

impl BeamGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.control_points == 0 || self.rows == 0 || self.columns == 0 {
            return Err(Error::Config("beam geometry needs control points, rows and columns".into()));
        }
        if self.control_points > N_CONTROL_POINTS || self.rows > N_LEAVES {
            return Err(Error::Config(format!(
                "at most {N_CONTROL_POINTS} control points and {N_LEAVES} rows can be read from an arc"
            )));
        }
        if !(self.arc_span_deg >= 300.0) || self.arc_span_deg > 360.0 {
            return Err(Error::Config(format!("arc span must be in [300, 360] degrees, got {}", self.arc_span_deg)));
        }
        if !(self.sad > 0.0) || !(self.beamlet_width > 0.0) {
            return Err(Error::Config("source distance and beamlet width must be > 0".into()));
        }
        Ok(())
    }

    pub fn n_beamlets(&self) -> usize {
        self.rows * self.columns
    }

    /// Evenly spaced gantry angles (degrees), strictly increasing.
    pub fn angles(&self) -> Vec<f64> {
        let n = self.control_points;
        if n == 1 {
            return vec![self.start_angle_deg];
        }
        (0..n)
            .map(|j| self.start_angle_deg + self.arc_span_deg * j as f64 / (n - 1) as f64)
            .collect()
    }

    /// Arc control point read by dose control point `j`.
    pub fn arc_control_point(&self, j: usize) -> usize {
        (2 * j + 1) * N_CONTROL_POINTS / (2 * self.control_points)
    }

    /// Arc leaf read by beamlet row `r`.
    pub fn arc_leaf(&self, r: usize) -> usize {
        (2 * r + 1) * N_LEAVES / (2 * self.rows)
    }

    /// Flat arc indices (both channels) that determine the apertures.
    pub fn dose_cells(&self) -> Vec<usize> {
        let mut cells = Vec::with_capacity(2 * self.control_points * self.rows);
        for ch in 0..2 {
            for j in 0..self.control_points {
                for r in 0..self.rows {
                    cells.push(ch * CHANNEL_CELLS + cell(self.arc_control_point(j), self.arc_leaf(r)));
                }
            }
        }
        cells
    }

    /// Beamlet columns `[l, r)` whose centres fall between the leaf ends.
    pub fn leaf_indices(&self, bank_a: f64, bank_b: f64) -> (usize, usize) {
        let w = self.columns;
        let count = |x: f64| {
            let c = (x / self.beamlet_width + w as f64 / 2.0 - 0.5).ceil();
            c.clamp(0.0, w as f64) as usize
        };
        let (l, r) = (count(bank_a), count(bank_b));
        (l, r.max(l))
    }
}

/// Pencil-beam kernel switches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    /// Diverging rays with inverse-square falloff; parallel rays otherwise.
    pub inverse_square: bool,
    /// Lateral Gaussian spread (mm); 0 deposits only along the ray.
    pub lateral_sigma: f64,
    /// Entries below this fraction of the beamlet maximum are dropped.
    pub drop_below: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            inverse_square: true,
            lateral_sigma: 3.0,
            drop_below: 1e-6,
        }
    }
}

/// One beamlet central ray.
#[derive(Debug, Clone, Copy)]
struct Ray {
    origin: Vec3,
    dir: Vec3,
    /// Distance from the origin to the isocenter plane along the ray.
    t_iso: f64,
}

impl Ray {
    /// Primary attenuation times inverse square at distance `t`, with the
    /// ray entering water at `t_in`.
    fn primary(&self, t: f64, t_in: f64, sad: f64, mu: f64, kernel: &KernelConfig) -> f64 {
        let depth = (t - t_in).max(0.0);
        let mut v = (-mu * depth).exp();
        if kernel.inverse_square {
            let r = sad / (sad + depth - (self.t_iso - t_in));
            v *= r * r;
        }
        v
    }
}

fn beam_frame(angle_deg: f64) -> (Vec3, Vec3, Vec3) {
    let phi = angle_deg.to_radians();
    let (s, c) = phi.sin_cos();
    let toward_source = [s, c, 0.0];
    let columns = [c, -s, 0.0];
    let rows = [0.0, 0.0, 1.0];
    (toward_source, columns, rows)
}

fn beamlet_rays(geom: &BeamGeometry, kernel: &KernelConfig, iso: Vec3, angle_deg: f64) -> Vec<Ray> {
    let (up, e_c, e_r) = beam_frame(angle_deg);
    let source = add(iso, scale(up, geom.sad));
    let w = geom.beamlet_width;
    let mut rays = Vec::with_capacity(geom.n_beamlets());
    for r in 0..geom.rows {
        for c in 0..geom.columns {
            let a = (c as f64 + 0.5 - geom.columns as f64 / 2.0) * w;
            let b = (r as f64 + 0.5 - geom.rows as f64 / 2.0) * w;
            let at_iso = add(iso, add(scale(e_c, a), scale(e_r, b)));
            let origin = if kernel.inverse_square { source } else { add(at_iso, scale(up, geom.sad)) };
            let to_iso = sub(at_iso, origin);
            rays.push(Ray {
                origin,
                dir: unit(to_iso),
                t_iso: dot3(to_iso, to_iso).sqrt(),
            });
        }
    }
    rays
}

/// Gaussian falloff of `exp(-ρ²/2σ²)` below 1e-6 of its peak.
const SPREAD_CUTOFF: f64 = 5.2565;

fn deposit(phantom: &Phantom, geom: &BeamGeometry, kernel: &KernelConfig, ray: &Ray) -> Vec<(usize, f64)> {
    let Some((t_in, t_out)) = phantom.clip(ray.origin, ray.dir) else {
        return Vec::new();
    };
    let w2 = geom.beamlet_width * geom.beamlet_width;
    let mut out = Vec::new();
    let sigma = kernel.lateral_sigma;
    if sigma > 0.0 {
        let norm = w2 / (std::f64::consts::TAU * sigma * sigma);
        let reach = SPREAD_CUTOFF * sigma;
        for k in 0..phantom.n_voxels() {
            let v = sub(phantom.voxel_center(k), ray.origin);
            // Every voxel centre is in water; shallow off-axis points clamp to the surface.
            let t = dot3(v, ray.dir);
            let perp = sub(v, scale(ray.dir, t));
            let rho2 = dot3(perp, perp);
            if rho2 > reach * reach {
                continue;
            }
            let g = (-rho2 / (2.0 * sigma * sigma)).exp();
            out.push((k, norm * g * ray.primary(t, t_in, geom.sad, phantom.mu, kernel)));
        }
    } else {
        // Pencil of zero width: march the ray, crediting path length.
        let h = phantom.voxel_size / 4.0;
        let per_step = w2 * h / phantom.voxel_size.powi(3);
        let steps = ((t_out - t_in) / h).ceil() as usize;
        let mut acc: Vec<(usize, f64)> = Vec::new();
        for s in 0..steps {
            let t = t_in + (s as f64 + 0.5) * h;
            if t > t_out {
                break;
            }
            if let Some(k) = phantom.containing_voxel(add(ray.origin, scale(ray.dir, t))) {
                let v = per_step * ray.primary(t, t_in, geom.sad, phantom.mu, kernel);
                match acc.last_mut() {
                    Some((last, sum)) if *last == k => *sum += v,
                    _ => acc.push((k, v)),
                }
            }
        }
        out = acc;
    }
    let max = out.iter().map(|e| e.1).fold(0.0, f64::max);
    out.retain(|e| e.1 >= kernel.drop_below * max && e.1 > 0.0);
    // Stored at the file precision so saved and in-memory matrices agree.
    out.iter_mut().for_each(|e| e.1 = e.1 as f32 as f64);
    out
}

/// Influence of every beamlet of one gantry angle: beamlets × voxels.
pub fn beam_influence(phantom: &Phantom, geom: &BeamGeometry, kernel: &KernelConfig, angle_deg: f64) -> SparseMatrix {
    let rays = beamlet_rays(geom, kernel, phantom.isocenter, angle_deg);
    let mut triplets = Vec::new();
    for (b, ray) in rays.iter().enumerate() {
        triplets.extend(deposit(phantom, geom, kernel, ray).into_iter().map(|(k, v)| (b, k, v)));
    }
    SparseMatrix::from_triplets(geom.n_beamlets(), phantom.n_voxels(), &triplets)
}

/// Per-control-point dose influence matrices (beamlets × voxels, dose per MU).
#[derive(Debug, Clone, PartialEq)]
pub struct DoseInfluence {
    pub phantom: Phantom,
    pub geometry: BeamGeometry,
    pub kernel: KernelConfig,
    pub matrices: Vec<SparseMatrix>,
}

#[derive(Serialize, Deserialize)]
struct InfluenceHeader {
    phantom: Phantom,
    geometry: BeamGeometry,
    kernel: KernelConfig,
}

pub fn build_influence(phantom: &Phantom, geometry: &BeamGeometry, kernel: &KernelConfig) -> Result<DoseInfluence> {
    phantom.validate()?;
    geometry.validate()?;
    let matrices = geometry
        .angles()
        .par_iter()
        .map(|&a| beam_influence(phantom, geometry, kernel, a))
        .collect();
    Ok(DoseInfluence {
        phantom: phantom.clone(),
        geometry: geometry.clone(),
        kernel: *kernel,
        matrices,
    })
}

impl DoseInfluence {
    pub fn n_voxels(&self) -> usize {
        self.phantom.n_voxels()
    }

    pub fn control_points(&self) -> usize {
        self.matrices.len()
    }

    pub fn nnz(&self) -> usize {
        self.matrices.iter().map(SparseMatrix::nnz).sum()
    }

    fn check(&self, apertures: &[ApertureRaster]) -> Result<()> {
        if apertures.len() != self.control_points() {
            return Err(dim_mismatch(format!("{} apertures", self.control_points()), apertures.len()));
        }
        for a in apertures {
            if a.rows != self.geometry.rows || a.width != self.geometry.columns {
                return Err(Error::ShapeMismatch(format!(
                    "aperture {}x{}, geometry {}x{}",
                    a.rows, a.width, self.geometry.rows, self.geometry.columns
                )));
            }
        }
        Ok(())
    }

    /// Dose of each aperture at unit beam weight.
    pub fn unit_doses(&self, apertures: &[ApertureRaster]) -> Result<Vec<Vec<f64>>> {
        self.check(apertures)?;
        Ok(self
            .matrices
            .par_iter()
            .zip(apertures)
            .map(|(m, a)| m.matvec_t(&a.beamlets))
            .collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&InfluenceHeader {
            phantom: self.phantom.clone(),
            geometry: self.geometry.clone(),
            kernel: self.kernel,
        })?;
        let mut out = Vec::with_capacity(8 + header.len() + 12 * self.nnz() + 4 * self.control_points());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for m in &self.matrices {
            out.extend_from_slice(&(m.nnz() as u32).to_le_bytes());
            for (r, c, v) in m.triplets() {
                out.extend_from_slice(&(r as u32).to_le_bytes());
                out.extend_from_slice(&(c as u32).to_le_bytes());
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |what: &str| Error::MalformedRecord {
            line: 0,
            reason: format!("influence file: {what}"),
        };
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(bad("missing ARCD magic"));
        }
        let mut pos = 4;
        let u32_at = |pos: &mut usize| -> Result<u32> {
            let b = bytes.get(*pos..*pos + 4).ok_or_else(|| bad("truncated"))?;
            *pos += 4;
            Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
        };
        let len = u32_at(&mut pos)? as usize;
        let json = bytes.get(pos..pos + len).ok_or_else(|| bad("truncated header"))?;
        pos += len;
        let header: InfluenceHeader = serde_json::from_slice(json)?;
        header.phantom.validate()?;
        header.geometry.validate()?;
        let (rows, cols) = (header.geometry.n_beamlets(), header.phantom.n_voxels());
        let mut matrices = Vec::with_capacity(header.geometry.control_points);
        for _ in 0..header.geometry.control_points {
            let nnz = u32_at(&mut pos)? as usize;
            let mut triplets = Vec::with_capacity(nnz);
            for _ in 0..nnz {
                let r = u32_at(&mut pos)? as usize;
                let c = u32_at(&mut pos)? as usize;
                let v = f32::from_bits(u32_at(&mut pos)?) as f64;
                if r >= rows || c >= cols || !(v >= 0.0) || !v.is_finite() {
                    return Err(bad("entry out of range"));
                }
                triplets.push((r, c, v));
            }
            matrices.push(SparseMatrix::from_triplets(rows, cols, &triplets));
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            phantom: header.phantom,
            geometry: header.geometry,
            kernel: header.kernel,
            matrices,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Unit-intensity apertures of an arc at the dose control points.
pub fn arc_apertures(arc: &Arc, geom: &BeamGeometry) -> Result<Vec<ApertureRaster>> {
    geom.validate()?;
    (0..geom.control_points)
        .map(|j| {
            let c = geom.arc_control_point(j);
            let bounds: Vec<(usize, usize)> = (0..geom.rows)
                .map(|r| {
                    let l = geom.arc_leaf(r);
                    let a = arc.position(c, l);
                    geom.leaf_indices(a, a + arc.gap(c, l))
                })
                .collect();
            ApertureRaster::from_leaf_indices(&bounds, 1.0, geom.columns)
        })
        .collect()
}

/// `d_k = Σ_φ Σ_ij D^φ_ijk · y^φ · x^φ_ij`.
pub fn compute_dose(d: &DoseInfluence, apertures: &[ApertureRaster], weights: &BeamWeights) -> Result<Vec<f64>> {
    if weights.len() != d.control_points() {
        return Err(dim_mismatch(format!("{} beam weights", d.control_points()), weights.len()));
    }
    let unit = d.unit_doses(apertures)?;
    Ok(combine(&unit, weights.as_slice()))
}

/// `Σ_φ y_φ a_φ`, summed in control-point order.
pub fn combine(unit_doses: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let mut dose = vec![0.0; unit_doses.first().map_or(0, Vec::len)];
    for (a, &y) in unit_doses.iter().zip(weights) {
        if y != 0.0 {
            crate::linalg::axpy(y, a, &mut dose);
        }
    }
    dose
}

/// Per-voxel quadratic penalties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseObjective {
    pub target: Vec<f64>,
    pub weight: Vec<f64>,
    /// Penalize only dose above target.
    pub one_sided: Vec<bool>,
}

impl DoseObjective {
    pub fn new(target: Vec<f64>, weight: Vec<f64>, one_sided: Vec<bool>) -> Result<Self> {
        if weight.len() != target.len() || one_sided.len() != target.len() {
            return Err(dim_mismatch(target.len(), format!("{} / {}", weight.len(), one_sided.len())));
        }
        if weight.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("objective weights must be >= 0".into()));
        }
        Ok(Self {
            target,
            weight,
            one_sided,
        })
    }

    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    /// Value and gradient with respect to dose.
    pub fn evaluate(&self, dose: &[f64]) -> Result<(f64, Vec<f64>)> {
        evaluate_objective(dose, self)
    }
}

pub fn evaluate_objective(dose: &[f64], obj: &DoseObjective) -> Result<(f64, Vec<f64>)> {
    if dose.len() != obj.len() {
        return Err(dim_mismatch(obj.len(), dose.len()));
    }
    let mut value = 0.0;
    let grad = dose
        .iter()
        .zip(&obj.target)
        .zip(obj.weight.iter().zip(&obj.one_sided))
        .map(|((&d, &t), (&w, &one))| {
            let e = if one { (d - t).max(0.0) } else { d - t };
            value += w * e * e;
            2.0 * w * e
        })
        .collect();
    Ok((value, grad))
}

/// Demo case: spherical target at the isocenter inside a concentric organ
/// at risk, with the remaining body penalized lightly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomCase {
    pub target_radius: f64,
    pub oar_outer_radius: f64,
    pub target_dose: f64,
    pub oar_limit: f64,
    pub body_limit: f64,
    pub target_weight: f64,
    pub oar_weight: f64,
    pub body_weight: f64,
}

impl Default for PhantomCase {
    fn default() -> Self {
        Self {
            target_radius: 20.0,
            oar_outer_radius: 28.0,
            target_dose: 2.0,
            oar_limit: 1.0,
            body_limit: 0.5,
            target_weight: 1.0,
            oar_weight: 0.5,
            body_weight: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Structure {
    Target,
    Oar,
    Body,
}

impl PhantomCase {
    pub fn structures(&self, phantom: &Phantom) -> Vec<Structure> {
        phantom
            .radii()
            .into_iter()
            .map(|r| {
                if r <= self.target_radius {
                    Structure::Target
                } else if r <= self.oar_outer_radius {
                    Structure::Oar
                } else {
                    Structure::Body
                }
            })
            .collect()
    }

    pub fn objective(&self, phantom: &Phantom) -> Result<DoseObjective> {
        let s = self.structures(phantom);
        let pick = |t: f64, o: f64, b: f64| -> Vec<f64> {
            s.iter()
                .map(|st| match st {
                    Structure::Target => t,
                    Structure::Oar => o,
                    Structure::Body => b,
                })
                .collect()
        };
        DoseObjective::new(
            pick(self.target_dose, self.oar_limit, self.body_limit),
            pick(self.target_weight, self.oar_weight, self.body_weight),
            s.iter().map(|st| *st != Structure::Target).collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub weights: BeamWeights,
    /// Objective after each accepted step, starting from the initial weights.
    pub trace: Vec<f64>,
}

/// Projected gradient descent on the beam weights for fixed apertures, with
/// backtracking and projection onto `y >= 0`.
pub fn refine_beam_weights(
    d: &DoseInfluence,
    apertures: &[ApertureRaster],
    obj: &DoseObjective,
    y0: &BeamWeights,
) -> Result<Refinement> {
    let unit = d.unit_doses(apertures)?;
    refine_with_unit_doses(&unit, obj, y0)
}

pub const REFINE_MAX_ITERATIONS: usize = 500;
pub const REFINE_TOLERANCE: f64 = 1e-6;

pub fn refine_with_unit_doses(unit: &[Vec<f64>], obj: &DoseObjective, y0: &BeamWeights) -> Result<Refinement> {
    if unit.len() != y0.len() {
        return Err(dim_mismatch(unit.len(), y0.len()));
    }
    let eval = |y: &[f64]| evaluate_objective(&combine(unit, y), obj);
    let mut y = y0.as_slice().to_vec();
    let (mut f, mut g_dose) = eval(&y)?;
    let mut trace = vec![f];
    let mut step = 1.0;
    for _ in 0..REFINE_MAX_ITERATIONS {
        let g: Vec<f64> = unit.iter().map(|a| crate::linalg::dot(a, &g_dose)).collect();
        // Projected gradient; zero means a stationary point of the constrained problem.
        let pg: Vec<f64> = y.iter().zip(&g).map(|(&yi, &gi)| if yi <= 0.0 && gi > 0.0 { 0.0 } else { gi }).collect();
        if pg.iter().all(|v| *v == 0.0) {
            break;
        }
        let mut accepted = None;
        for _ in 0..60 {
            let cand: Vec<f64> = y.iter().zip(&g).map(|(&yi, &gi)| (yi - step * gi).max(0.0)).collect();
            let (fc, gc) = eval(&cand)?;
            if fc < f {
                accepted = Some((cand, fc, gc));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, fc, gc)) = accepted else {
            break;
        };
        let rel = (f - fc) / f.abs().max(f64::MIN_POSITIVE);
        y = cand;
        f = fc;
        g_dose = gc;
        trace.push(f);
        step *= 2.0;
        if rel < REFINE_TOLERANCE {
            break;
        }
    }
    Ok(Refinement {
        weights: BeamWeights::new(y)?,
        trace,
    })
}

/// Square open field in a semi-infinite water tank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpenField {
    /// Field edge at the surface (mm).
    pub size: f64,
    /// Source-surface distance (mm).
    pub ssd: f64,
    pub beamlet_width: f64,
    /// Depths of the PDD samples (mm).
    pub depths: Vec<f64>,
    /// Depths at which lateral profiles are taken (mm).
    pub profile_depths: Vec<f64>,
    /// Off-axis positions of the profile samples (mm).
    pub offsets: Vec<f64>,
}

impl Default for OpenField {
    fn default() -> Self {
        Self {
            size: 100.0,
            ssd: 1000.0,
            beamlet_width: 5.0,
            depths: (0..=300).map(|d| d as f64).collect(),
            profile_depths: vec![50.0, 100.0, 200.0],
            offsets: (-100..=100).map(|x| x as f64).collect(),
        }
    }
}

/// Central-axis depth dose and lateral profiles of an open field.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldCurves {
    pub depths: Vec<f64>,
    /// Normalized to the dose at 100 mm depth.
    pub pdd: Vec<f64>,
    /// `(depth, values)`, each normalized to the central axis.
    pub profiles: Vec<(f64, Vec<f64>)>,
}

pub const PDD_REFERENCE_DEPTH: f64 = 100.0;

/// Evaluate the kernel of [`beam_influence`] continuously in a water tank
/// whose surface is perpendicular to the central axis.
pub fn pdd_and_profile(phantom: &Phantom, kernel: &KernelConfig, field: &OpenField) -> Result<FieldCurves> {
    phantom.validate()?;
    let n = (field.size / field.beamlet_width).round() as usize;
    if n == 0 {
        return Err(Error::Config("field smaller than one beamlet".into()));
    }
    let geom = BeamGeometry {
        sad: field.ssd,
        rows: n,
        columns: n,
        beamlet_width: field.beamlet_width,
        ..BeamGeometry::default()
    };
    // Source above the origin; water occupies y <= 0.
    let rays = beamlet_rays(&geom, kernel, [0.0; 3], 0.0);
    let sigma = kernel.lateral_sigma.max(1e-9);
    let norm = field.beamlet_width.powi(2) / (std::f64::consts::TAU * sigma * sigma);
    let dose_at = |p: Vec3| -> f64 {
        rays.iter()
            .map(|ray| {
                let t_in = -ray.origin[1] / ray.dir[1];
                let v = sub(p, ray.origin);
                let t = dot3(v, ray.dir);
                let perp = sub(v, scale(ray.dir, t));
                let g = (-dot3(perp, perp) / (2.0 * sigma * sigma)).exp();
                norm * g * ray.primary(t, t_in, geom.sad, phantom.mu, kernel)
            })
            .sum()
    };
    let axis = |depth: f64| dose_at([0.0, -depth, 0.0]);
    let reference = axis(PDD_REFERENCE_DEPTH);
    let pdd = field.depths.iter().map(|&z| axis(z) / reference).collect();
    let profiles = field
        .profile_depths
        .iter()
        .map(|&z| {
            let centre = axis(z);
            (z, field.offsets.iter().map(|&x| dose_at([x, -z, 0.0]) / centre).collect())
        })
        .collect();
    Ok(FieldCurves {
        depths: field.depths.clone(),
        pdd,
        profiles,
    })
}
