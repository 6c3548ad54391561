//! Arc plan data model.
//!
//! An arc is a two-channel 80×80 image: channel 0 holds the bank-A leaf-end
//! position (signed mm from the field centerline), channel 1 holds the gap
//! between opposing leaf ends (mm, never negative). Rows are control points,
//! columns are leaves.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Error, Result};

pub const N_CONTROL_POINTS: usize = 80;
pub const N_LEAVES: usize = 80;
/// Cells in one channel.
pub const CHANNEL_CELLS: usize = N_CONTROL_POINTS * N_LEAVES;
/// Cells in a full two-channel arc.
pub const ARC_CELLS: usize = 2 * CHANNEL_CELLS;

#[inline]
pub fn cell(control_point: usize, leaf: usize) -> usize {
    control_point * N_LEAVES + leaf
}

fn first_negative(gaps: &[f64]) -> Option<usize> {
    gaps.iter().position(|&g| !(g >= 0.0))
}

fn negative_gap_at(idx: usize) -> Error {
    Error::NegativeGap {
        control_point: idx / N_LEAVES,
        leaf: idx % N_LEAVES,
    }
}

/// One arc plan in the position/gap parameterization.
#[derive(Debug, Clone, PartialEq)]
pub struct Arc {
    id: String,
    positions: Vec<f64>,
    gaps: Vec<f64>,
}

impl Arc {
    /// Build from flat control-point-major channels.
    pub fn new(id: impl Into<String>, positions: Vec<f64>, gaps: Vec<f64>) -> Result<Self> {
        if positions.len() != CHANNEL_CELLS {
            return Err(dim_mismatch(CHANNEL_CELLS, positions.len()));
        }
        if gaps.len() != CHANNEL_CELLS {
            return Err(dim_mismatch(CHANNEL_CELLS, gaps.len()));
        }
        if let Some(i) = first_negative(&gaps) {
            return Err(negative_gap_at(i));
        }
        Ok(Self {
            id: id.into(),
            positions,
            gaps,
        })
    }

    /// Build from the two leaf-bank coordinate grids.
    pub fn from_banks(id: impl Into<String>, bank_a: &[f64], bank_b: &[f64]) -> Result<Self> {
        if bank_a.len() != CHANNEL_CELLS || bank_b.len() != CHANNEL_CELLS {
            return Err(dim_mismatch(
                CHANNEL_CELLS,
                format!("{}/{}", bank_a.len(), bank_b.len()),
            ));
        }
        let gaps: Vec<f64> = bank_a.iter().zip(bank_b).map(|(a, b)| b - a).collect();
        if let Some(i) = first_negative(&gaps) {
            return Err(negative_gap_at(i));
        }
        Ok(Self {
            id: id.into(),
            positions: bank_a.to_vec(),
            gaps,
        })
    }

    /// Returns `(bank_a, bank_b)`.
    pub fn to_banks(&self) -> (Vec<f64>, Vec<f64>) {
        let bank_b = self.positions.iter().zip(&self.gaps).map(|(p, g)| p + g).collect();
        (self.positions.clone(), bank_b)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn gaps(&self) -> &[f64] {
        &self.gaps
    }

    pub fn position(&self, control_point: usize, leaf: usize) -> f64 {
        self.positions[cell(control_point, leaf)]
    }

    pub fn gap(&self, control_point: usize, leaf: usize) -> f64 {
        self.gaps[cell(control_point, leaf)]
    }

    /// Both channels concatenated (positions first), in mm.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(ARC_CELLS);
        v.extend_from_slice(&self.positions);
        v.extend_from_slice(&self.gaps);
        v
    }

    /// Inverse of [`Arc::to_vec`].
    pub fn from_vec(id: impl Into<String>, v: &[f64]) -> Result<Self> {
        if v.len() != ARC_CELLS {
            return Err(dim_mismatch(ARC_CELLS, v.len()));
        }
        Self::new(id, v[..CHANNEL_CELLS].to_vec(), v[CHANNEL_CELLS..].to_vec())
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn normalize(&self, spec: &NormalizationSpec) -> NormalizedArc {
        let mut data = Vec::with_capacity(ARC_CELLS);
        data.extend(self.positions.iter().map(|p| p / spec.position_scale));
        data.extend(self.gaps.iter().map(|g| g / spec.gap_scale));
        NormalizedArc { data }
    }
}

/// Per-channel scale factors, in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub position_scale: f64,
    pub gap_scale: f64,
}

impl Default for NormalizationSpec {
    fn default() -> Self {
        // Eight times the clinical channel medians.
        Self {
            position_scale: 84.0,
            gap_scale: 132.8,
        }
    }
}

impl NormalizationSpec {
    pub fn new(position_scale: f64, gap_scale: f64) -> Result<Self> {
        if !(position_scale > 0.0 && gap_scale > 0.0) {
            return Err(Error::Config(format!(
                "normalization scales must be positive, got {position_scale}/{gap_scale}"
            )));
        }
        Ok(Self {
            position_scale,
            gap_scale,
        })
    }

    /// Scale for the given flat cell index of a two-channel image.
    #[inline]
    pub fn scale_of(&self, flat_index: usize) -> f64 {
        if flat_index < CHANNEL_CELLS {
            self.position_scale
        } else {
            self.gap_scale
        }
    }

    /// Per-cell scale vector (length [`ARC_CELLS`]).
    pub fn scale_vector(&self) -> Vec<f64> {
        (0..ARC_CELLS).map(|i| self.scale_of(i)).collect()
    }
}

/// An arc in normalized units laid out as a (2, 80, 80) image.
///
/// Compressor outputs live here too, so the gap channel is not checked until
/// the arc is denormalized.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedArc {
    data: Vec<f64>,
}

impl NormalizedArc {
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        if data.len() != ARC_CELLS {
            return Err(dim_mismatch(ARC_CELLS, data.len()));
        }
        Ok(Self { data })
    }

    pub fn zeros() -> Self {
        Self {
            data: vec![0.0; ARC_CELLS],
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn positions(&self) -> &[f64] {
        &self.data[..CHANNEL_CELLS]
    }

    pub fn gaps(&self) -> &[f64] {
        &self.data[CHANNEL_CELLS..]
    }

    /// Clamp the gap channel at zero.
    pub fn clamp_gaps(mut self) -> Self {
        for g in &mut self.data[CHANNEL_CELLS..] {
            if *g < 0.0 {
                *g = 0.0;
            }
        }
        self
    }

    /// Back to mm. Fails on any negative gap.
    pub fn denormalize(&self, spec: &NormalizationSpec, id: impl Into<String>) -> Result<Arc> {
        let positions = self.positions().iter().map(|p| p * spec.position_scale).collect();
        let gaps = self.gaps().iter().map(|g| g * spec.gap_scale).collect();
        Arc::new(id, positions, gaps)
    }

    /// Denormalized flat vector in mm, without the gap check.
    pub fn to_mm(&self, spec: &NormalizationSpec) -> Vec<f64> {
        self.data
            .iter()
            .enumerate()
            .map(|(i, v)| v * spec.scale_of(i))
            .collect()
    }
}

/// Transmission values for one control point: `rows` leaf pairs × `width`
/// beamlets.
#[derive(Debug, Clone, PartialEq)]
pub struct ApertureRaster {
    pub rows: usize,
    pub width: usize,
    pub beamlets: Vec<f64>,
}

impl ApertureRaster {
    pub fn zeros(rows: usize, width: usize) -> Self {
        Self {
            rows,
            width,
            beamlets: vec![0.0; rows * width],
        }
    }

    /// Build from per-row `(left, right)` beamlet indices with intensity `y`.
    pub fn from_leaf_indices(bounds: &[(usize, usize)], y: f64, width: usize) -> Result<Self> {
        let mut beamlets = Vec::with_capacity(bounds.len() * width);
        for &(l, r) in bounds {
            beamlets.extend(rasterize_aperture(l, r, y, width)?);
        }
        Ok(Self {
            rows: bounds.len(),
            width,
            beamlets,
        })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.beamlets[r * self.width..(r + 1) * self.width]
    }
}

/// One aperture row: beamlet `i` receives `y` iff `left <= i < right`.
pub fn rasterize_aperture(left: usize, right: usize, y: f64, width: usize) -> Result<Vec<f64>> {
    if left > right {
        return Err(Error::LeafOrderViolation { left, right });
    }
    if right > width {
        return Err(dim_mismatch(format!("right <= {width}"), right));
    }
    if !(y >= 0.0) {
        return Err(Error::Config(format!("aperture intensity must be >= 0, got {y}")));
    }
    let mut row = vec![0.0; width];
    row[left..right].iter_mut().for_each(|v| *v = y);
    Ok(row)
}

/// Monitor units per control point.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamWeights(Vec<f64>);

impl BeamWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if let Some(i) = weights.iter().position(|w| !(*w >= 0.0)) {
            return Err(Error::Config(format!(
                "beam weight {i} is negative or not finite: {}",
                weights[i]
            )));
        }
        Ok(Self(weights))
    }

    pub fn uniform(n: usize, value: f64) -> Self {
        Self(vec![value.max(0.0); n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArcDataset {
    pub arcs: Vec<Arc>,
    pub provenance: Option<Provenance>,
}

impl ArcDataset {
    pub fn new(arcs: Vec<Arc>, provenance: Option<Provenance>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(arcs.len());
        for a in &arcs {
            if !seen.insert(a.id()) {
                return Err(Error::Config(format!("duplicate arc id {:?}", a.id())));
            }
        }
        Ok(Self { arcs, provenance })
    }

    pub fn len(&self) -> usize {
        self.arcs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arcs.is_empty()
    }

    pub fn normalized(&self, spec: &NormalizationSpec) -> Vec<NormalizedArc> {
        self.arcs.iter().map(|a| a.normalize(spec)).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct ArcRecord {
    id: String,
    positions: Vec<Vec<f64>>,
    gaps: Vec<Vec<f64>>,
}

fn to_grid(flat: &[f64]) -> Vec<Vec<f64>> {
    flat.chunks(N_LEAVES).map(<[f64]>::to_vec).collect()
}

fn from_grid(grid: Vec<Vec<f64>>) -> Result<Vec<f64>> {
    if grid.len() != N_CONTROL_POINTS {
        return Err(dim_mismatch(
            format!("{N_CONTROL_POINTS} control points"),
            grid.len(),
        ));
    }
    let mut flat = Vec::with_capacity(CHANNEL_CELLS);
    for row in grid {
        if row.len() != N_LEAVES {
            return Err(dim_mismatch(format!("{N_LEAVES} leaves"), row.len()));
        }
        flat.extend(row);
    }
    Ok(flat)
}

/// Serialize one arc as a JSON object (one line of the dataset format).
pub fn arc_to_json(arc: &Arc) -> Result<String> {
    let rec = ArcRecord {
        id: arc.id.clone(),
        positions: to_grid(&arc.positions),
        gaps: to_grid(&arc.gaps),
    };
    Ok(serde_json::to_string(&rec)?)
}

/// Parse one dataset line. `line_no` is only used for error messages.
pub fn arc_from_json(line: &str, line_no: usize) -> Result<Arc> {
    let rec: ArcRecord = serde_json::from_str(line).map_err(|e| Error::MalformedRecord {
        line: line_no,
        reason: e.to_string(),
    })?;
    Arc::new(rec.id, from_grid(rec.positions)?, from_grid(rec.gaps)?)
}

pub fn save_dataset(ds: &ArcDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for arc in &ds.arcs {
        writeln!(w, "{}", arc_to_json(arc)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<ArcDataset> {
    let r = BufReader::new(File::open(path)?);
    let mut arcs = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        arcs.push(arc_from_json(&line, i + 1)?);
    }
    ArcDataset::new(arcs, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn constant_arc(pos: f64, gap: f64) -> Arc {
        Arc::new("c", vec![pos; CHANNEL_CELLS], vec![gap; CHANNEL_CELLS]).unwrap()
    }

    #[test]
    fn from_banks_cell() {
        let mut a = vec![0.0; CHANNEL_CELLS];
        let mut b = vec![0.0; CHANNEL_CELLS];
        a[cell(3, 7)] = -10.0;
        b[cell(3, 7)] = 15.0;
        let arc = Arc::from_banks("x", &a, &b).unwrap();
        assert_eq!(arc.position(3, 7), -10.0);
        assert_eq!(arc.gap(3, 7), 25.0);
        let (ra, rb) = arc.to_banks();
        assert_eq!(ra[cell(3, 7)], -10.0);
        assert_eq!(rb[cell(3, 7)], 15.0);
    }

    #[test]
    fn closed_banks_give_zero_gaps() {
        let a: Vec<f64> = (0..CHANNEL_CELLS).map(|i| (i % 13) as f64 - 6.0).collect();
        let arc = Arc::from_banks("x", &a, &a).unwrap();
        assert!(arc.gaps().iter().all(|&g| g == 0.0));
        let (ra, rb) = arc.to_banks();
        assert_eq!(ra, rb);
    }

    #[test]
    fn crossed_banks_rejected() {
        let a = vec![0.0; CHANNEL_CELLS];
        let mut b = vec![1.0; CHANNEL_CELLS];
        b[cell(5, 9)] = -0.5;
        match Arc::from_banks("x", &a, &b) {
            Err(Error::NegativeGap {
                control_point: 5,
                leaf: 9,
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn normalize_reference_scales() {
        let spec = NormalizationSpec::default();
        let n = constant_arc(84.0, 132.8).normalize(&spec);
        assert!(n.positions().iter().all(|&v| v == 1.0));
        assert!(n.gaps().iter().all(|&v| v == 1.0));
        let z = constant_arc(0.0, 0.0).normalize(&spec);
        assert!(z.gaps().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bad_normalization_rejected() {
        assert!(NormalizationSpec::new(0.0, 1.0).is_err());
        assert!(NormalizationSpec::new(1.0, -2.0).is_err());
    }

    #[test]
    fn rasterize_examples() {
        assert_eq!(
            rasterize_aperture(2, 5, 2.0, 8).unwrap(),
            vec![0.0, 0.0, 2.0, 2.0, 2.0, 0.0, 0.0, 0.0]
        );
        assert!(rasterize_aperture(4, 4, 3.0, 8).unwrap().iter().all(|&v| v == 0.0));
        assert!(rasterize_aperture(1, 7, 0.0, 8).unwrap().iter().all(|&v| v == 0.0));
        assert!(matches!(
            rasterize_aperture(5, 2, 1.0, 8),
            Err(Error::LeafOrderViolation { left: 5, right: 2 })
        ));
    }

    #[test]
    fn negative_weights_rejected() {
        assert!(BeamWeights::new(vec![1.0, -0.1]).is_err());
        assert!(BeamWeights::new(vec![0.0, 2.0]).is_ok());
    }

    #[test]
    fn dataset_roundtrip_and_rejections() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        let arcs: Vec<Arc> = (0..3)
            .map(|k| {
                let p = (0..CHANNEL_CELLS).map(|i| (i as f64 * 0.37 + k as f64).sin() * 20.0).collect();
                let g = (0..CHANNEL_CELLS).map(|i| ((i * 7 + k) % 31) as f64 * 0.1 + 1e-3 / 3.0).collect();
                Arc::new(format!("arc-{k}"), p, g).unwrap()
            })
            .collect();
        let ds = ArcDataset::new(arcs, None).unwrap();
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.arcs, ds.arcs);

        // 79 leaves in one row
        let mut rec: serde_json::Value = serde_json::from_str(&arc_to_json(&ds.arcs[0]).unwrap()).unwrap();
        rec["positions"][0].as_array_mut().unwrap().pop();
        assert!(matches!(
            arc_from_json(&rec.to_string(), 1),
            Err(Error::DimensionMismatch { .. })
        ));

        let mut rec: serde_json::Value = serde_json::from_str(&arc_to_json(&ds.arcs[0]).unwrap()).unwrap();
        rec["gaps"][2][4] = serde_json::json!(-1.0);
        assert!(matches!(
            arc_from_json(&rec.to_string(), 1),
            Err(Error::NegativeGap { control_point: 2, leaf: 4 })
        ));

        assert!(matches!(
            arc_from_json("{\"id\": 3}", 7),
            Err(Error::MalformedRecord { line: 7, .. })
        ));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let a = constant_arc(1.0, 1.0);
        assert!(ArcDataset::new(vec![a.clone(), a], None).is_err());
    }

    proptest! {
        #[test]
        fn banks_and_normalization_roundtrip(
            seed in any::<u64>(),
            pscale in 1.0f64..200.0,
            gscale in 1.0f64..200.0,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f64> = (0..CHANNEL_CELLS).map(|_| rng.gen_range(-60.0..60.0)).collect();
            let b: Vec<f64> = a.iter().map(|x| x + rng.gen_range(0.0..40.0)).collect();
            let arc = Arc::from_banks("p", &a, &b).unwrap();
            let (ra, rb) = arc.to_banks();
            for i in 0..CHANNEL_CELLS {
                prop_assert!((ra[i] - a[i]).abs() <= 1e-9 * a[i].abs().max(1.0));
                prop_assert!((rb[i] - b[i]).abs() <= 1e-9 * b[i].abs().max(1.0));
            }
            let again = Arc::from_banks("p", &ra, &rb).unwrap();
            for i in 0..CHANNEL_CELLS {
                prop_assert!((again.gaps()[i] - arc.gaps()[i]).abs() <= 1e-9 * arc.gaps()[i].max(1.0));
            }
            let spec = NormalizationSpec::new(pscale, gscale).unwrap();
            let back = arc.normalize(&spec).denormalize(&spec, "p").unwrap();
            for (x, y) in back.to_vec().iter().zip(arc.to_vec()) {
                prop_assert!((x - y).abs() <= 1e-9 * y.abs().max(1e-12));
            }
        }

        #[test]
        fn raster_row_sum(l in 0usize..32, len in 0usize..32, quarter_mu in 0u32..40) {
            let y = f64::from(quarter_mu) * 0.25;
            let r = (l + len).min(32);
            let row = rasterize_aperture(l, r, y, 32).unwrap();
            prop_assert_eq!(row.iter().filter(|&&v| v != 0.0).count(), if y > 0.0 { r - l } else { 0 });
            prop_assert_eq!(row.iter().sum::<f64>(), y * (r - l) as f64);
        }
    }
}
