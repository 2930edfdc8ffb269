//! Dense spatial-transformer decoder: front-view feature maps to a
//! bird's-eye-view occupancy grid.
//!
//! Each pyramid level owns one depth interval of the BEV grid. Its image
//! columns are collapsed over height into a bottleneck, expanded into depth
//! bins (a polar depth × column map), and resampled onto Cartesian cells by
//! projecting every cell center through the camera intrinsics. The five
//! slices are stacked by depth and classified per cell.

use serde::{Deserialize, Serialize};

use crate::encoder::HOOK_COUNT;
use crate::error::{Error, Result};
use crate::layers;
use crate::tensor::{ConvGeometry, ParameterSet, SeededRng, Tape, Tensor, Var};

/// Sampling coordinate that lands outside any grid, yielding zero.
const OUTSIDE: f64 = -2.0;

const ALIGN_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cu: f64,
    pub cv: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    /// 128×128 camera with a 90° horizontal field of view and the horizon
    /// placed in the upper third so most rows see the ground.
    pub fn desk() -> Self {
        CameraIntrinsics {
            fx: 64.0,
            fy: 64.0,
            cu: 64.0,
            cv: 40.0,
            width: 128,
            height: 128,
        }
    }

    /// The desk camera rescaled to a `width × height` image.
    pub fn scaled_to(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        CameraIntrinsics {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cu: self.cu * sx,
            cv: self.cv * sy,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::config("focal lengths must be positive"));
        }
        if !(0.0..=self.width as f64).contains(&self.cu) || !(0.0..=self.height as f64).contains(&self.cv) {
            return Err(Error::config("principal point outside the image"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("image extents must be positive"));
        }
        Ok(())
    }

    /// Image column of a camera-frame ground point at lateral `x`, depth `z`.
    pub fn column(&self, x: f64, z: f64) -> f64 {
        self.fx * x / z + self.cu
    }

    /// Image row of a point `y` below the camera (downward positive) at depth `z`.
    pub fn row(&self, y: f64, z: f64) -> f64 {
        self.fy * y / z + self.cv
    }

    pub fn column_in_image(&self, u: f64) -> bool {
        u >= 0.0 && u < self.width as f64
    }
}

/// Metric extent and resolution of the BEV grid. Row 0 is the nearest depth
/// bin; column `X/2` is straight ahead.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BevGridSpec {
    pub z_min: f64,
    pub z_max: f64,
    pub x_max: f64,
    pub cell: f64,
}

impl Default for BevGridSpec {
    fn default() -> Self {
        BevGridSpec {
            z_min: 1.0,
            z_max: 40.0,
            x_max: 20.0,
            cell: 0.5,
        }
    }
}

fn integral_ratio(span: f64, cell: f64) -> Option<usize> {
    let r = span / cell;
    let n = r.round();
    ((r - n).abs() < ALIGN_TOL && n >= 0.0).then_some(n as usize)
}

impl BevGridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.cell > 0.0 && self.z_min > 0.0 && self.z_max > self.z_min && self.x_max > 0.0) {
            return Err(Error::config(format!("invalid BEV grid {self:?}")));
        }
        if integral_ratio(self.z_max - self.z_min, self.cell).is_none()
            || integral_ratio(2.0 * self.x_max, self.cell).is_none()
        {
            return Err(Error::config(format!(
                "BEV extents are not a whole number of {} m cells",
                self.cell
            )));
        }
        Ok(())
    }

    pub fn depth_bins(&self) -> usize {
        integral_ratio(self.z_max - self.z_min, self.cell).unwrap_or(0)
    }

    pub fn lateral_bins(&self) -> usize {
        integral_ratio(2.0 * self.x_max, self.cell).unwrap_or(0)
    }

    pub fn z_center(&self, row: usize) -> f64 {
        self.z_min + (row as f64 + 0.5) * self.cell
    }

    pub fn x_center(&self, col: usize) -> f64 {
        -self.x_max + (col as f64 + 0.5) * self.cell
    }

    /// Cell containing metric point `(x, z)`, if inside the grid.
    pub fn cell_of(&self, x: f64, z: f64) -> Option<(usize, usize)> {
        let r = ((z - self.z_min) / self.cell).floor();
        let c = ((x + self.x_max) / self.cell).floor();
        (r >= 0.0 && c >= 0.0 && (r as usize) < self.depth_bins() && (c as usize) < self.lateral_bins())
            .then(|| (r as usize, c as usize))
    }
}

/// One contiguous depth interval of the BEV grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthInterval {
    pub z_near: f64,
    pub z_far: f64,
    /// First BEV row of the interval.
    pub row_start: usize,
    pub rows: usize,
}

/// Five contiguous depth intervals covering the grid, nearest first. The
/// finest pyramid level is assigned the farthest interval.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthPartition {
    intervals: Vec<DepthInterval>,
}

impl DepthPartition {
    /// Boundaries `{z_min, z_max/16, z_max/8, z_max/4, z_max/2, z_max}`.
    pub fn halving(spec: &BevGridSpec) -> Result<Self> {
        let z = spec.z_max;
        Self::from_bounds(spec, &[spec.z_min, z / 16.0, z / 8.0, z / 4.0, z / 2.0, z])
    }

    /// Builds a partition from six ascending boundaries aligned to the cell size.
    pub fn from_bounds(spec: &BevGridSpec, bounds: &[f64]) -> Result<Self> {
        spec.validate()?;
        if bounds.len() != HOOK_COUNT + 1 {
            return Err(Error::config("depth partition needs six boundaries"));
        }
        if bounds[0] != spec.z_min || bounds[HOOK_COUNT] != spec.z_max {
            return Err(Error::config("depth partition must span [z_min, z_max] exactly"));
        }
        let mut intervals = Vec::with_capacity(HOOK_COUNT);
        let mut row = 0;
        for w in bounds.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::config(format!(
                    "depth boundaries must strictly increase, got {bounds:?}"
                )));
            }
            let start = integral_ratio(w[0] - spec.z_min, spec.cell);
            let rows = integral_ratio(w[1] - w[0], spec.cell);
            match (start, rows) {
                (Some(s), Some(n)) if s == row && n > 0 => {
                    intervals.push(DepthInterval {
                        z_near: w[0],
                        z_far: w[1],
                        row_start: s,
                        rows: n,
                    });
                    row += n;
                }
                _ => {
                    return Err(Error::config(format!(
                        "depth boundaries {bounds:?} are not aligned to {} m cells",
                        spec.cell
                    )))
                }
            }
        }
        Ok(DepthPartition { intervals })
    }

    /// Intervals in ascending depth.
    pub fn intervals(&self) -> &[DepthInterval] {
        &self.intervals
    }

    /// Interval handled by pyramid level `level` (0 = finest).
    pub fn for_level(&self, level: usize) -> DepthInterval {
        self.intervals[HOOK_COUNT - 1 - level]
    }
}

/// Per-class occupancy probabilities over the BEV grid.
#[derive(Clone, Debug, PartialEq)]
pub struct BevGrid {
    pub probs: Tensor,
    pub spec: BevGridSpec,
}

impl BevGrid {
    pub fn classes(&self) -> usize {
        self.probs.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub spec: BevGridSpec,
    pub intrinsics: CameraIntrinsics,
    pub bottleneck: usize,
    pub head_hidden: usize,
    pub classes: usize,
}

pub fn init_params(
    cfg: &DecoderConfig,
    projected_dim: usize,
    level_heights: &[usize],
    rng: &mut SeededRng,
    params: &mut ParameterSet,
) -> Result<()> {
    let partition = DepthPartition::halving(&cfg.spec)?;
    let dh = projected_dim;
    let b = cfg.bottleneck;
    for (i, &h) in level_heights.iter().enumerate() {
        let rows = partition.for_level(i).rows;
        let p = format!("decoder.{i}");
        let std_c = layers::GELU_GAIN / ((dh * h) as f64).sqrt();
        params.init_normal(format!("{p}.collapse.weight"), &[dh * h, b], std_c, rng)?;
        let std_e = 1.0 / (b as f64).sqrt();
        params.init_normal(format!("{p}.expand.weight"), &[b, dh * rows], std_e, rng)?;
        params.init_zeros(format!("{p}.expand.bias"), &[dh * rows])?;
    }
    let g = layers::GELU_GAIN;
    layers::init_conv_gain(params, "decoder.head.conv1", dh, cfg.head_hidden, 3, g, rng)?;
    layers::init_conv_gain(params, "decoder.head.conv2", cfg.head_hidden, cfg.head_hidden, 3, g, rng)?;
    layers::init_conv(params, "decoder.head.classify", cfg.head_hidden, cfg.classes, 1, rng)?;
    Ok(())
}

/// Collapses each column of `feature[D̂×h×w]` to a bottleneck (shared
/// weights, no bias, GELU) and expands it to `D̂ × rows` polar depth bins.
pub fn collapse_expand_polar(
    tape: &mut Tape,
    params: &ParameterSet,
    prefix: &str,
    feature: Var,
    rows: usize,
) -> Result<Var> {
    let s = tape.shape(feature).to_vec();
    if s.len() != 3 {
        return Err(Error::config(format!("expected a C×H×W feature map, got {s:?}")));
    }
    let (dh, h, w) = (s[0], s[1], s[2]);
    let flat = tape.reshape(feature, &[dh * h, w])?;
    let columns = tape.transpose(flat)?;
    let cw = tape.param(params, &format!("{prefix}.collapse.weight"))?;
    let bottleneck = tape.matmul(columns, cw)?;
    let bottleneck = tape.gelu(bottleneck);
    let expanded = layers::linear(tape, params, &format!("{prefix}.expand"), bottleneck)?;
    let polar = tape.transpose(expanded)?;
    tape.reshape(polar, &[dh, rows, w])
}

/// Sampling coordinates `[rows × X × 2]` that map each Cartesian cell of
/// `interval` to (depth bin, polar column). Cells outside the image frustum
/// get a coordinate that samples zero.
pub fn polar_sample_coords(
    intr: &CameraIntrinsics,
    spec: &BevGridSpec,
    interval: &DepthInterval,
    polar_width: usize,
) -> Tensor {
    let x_bins = spec.lateral_bins();
    let col_scale = polar_width as f64 / intr.width as f64;
    let mut data = Vec::with_capacity(interval.rows * x_bins * 2);
    for r in 0..interval.rows {
        let z = spec.z_center(interval.row_start + r);
        for c in 0..x_bins {
            let u = intr.column(spec.x_center(c), z);
            if intr.column_in_image(u) {
                data.push(r as f64);
                data.push(u * col_scale);
            } else {
                data.push(OUTSIDE);
                data.push(OUTSIDE);
            }
        }
    }
    Tensor::from_parts(vec![interval.rows, x_bins, 2], data)
}

/// Resamples `polar[D̂ × rows × w]` onto the interval's Cartesian cells.
pub fn polar_to_cartesian(
    tape: &mut Tape,
    polar: Var,
    intr: &CameraIntrinsics,
    spec: &BevGridSpec,
    interval: &DepthInterval,
) -> Result<Var> {
    let s = tape.shape(polar).to_vec();
    if s.len() != 3 || s[1] != interval.rows {
        return Err(Error::config(format!(
            "polar map {s:?} does not match a {}-row interval",
            interval.rows
        )));
    }
    if interval.z_near < spec.z_min || interval.z_far > spec.z_max {
        return Err(Error::config("depth interval outside the grid"));
    }
    let coords = polar_sample_coords(intr, spec, interval, s[2]);
    tape.resample_bilinear(polar, &coords)
}

/// Stacks per-level slices (given in level order, finest first) along depth,
/// nearest interval first.
pub fn assemble_bev(
    tape: &mut Tape,
    slices: &[Var],
    partition: &DepthPartition,
    spec: &BevGridSpec,
) -> Result<Var> {
    if slices.len() != HOOK_COUNT {
        return Err(Error::config(format!("expected {HOOK_COUNT} depth slices")));
    }
    let x_bins = spec.lateral_bins();
    let mut covered = 0;
    let mut ordered = Vec::with_capacity(HOOK_COUNT);
    for (k, interval) in partition.intervals().iter().enumerate() {
        let slice = slices[HOOK_COUNT - 1 - k];
        let s = tape.shape(slice);
        if s.len() != 3 || s[1] != interval.rows || s[2] != x_bins || interval.row_start != covered {
            return Err(Error::config(format!(
                "slice {s:?} leaves a gap or overlap at depth row {covered}"
            )));
        }
        covered += interval.rows;
        ordered.push(slice);
    }
    if covered != spec.depth_bins() {
        return Err(Error::config(format!(
            "slices cover {covered} of {} depth rows",
            spec.depth_bins()
        )));
    }
    tape.concat(&ordered, 1)
}

/// Two 3×3 convolutions with GELU, a 1×1 classifier and a logistic, giving
/// per-class probabilities `[c × Z × X]`.
pub fn segmentation_head(tape: &mut Tape, params: &ParameterSet, bev: Var) -> Result<Var> {
    let g3 = ConvGeometry::new(1, 1);
    let x = layers::conv(tape, params, "decoder.head.conv1", bev, g3)?;
    let x = tape.gelu(x);
    let x = layers::conv(tape, params, "decoder.head.conv2", x, g3)?;
    let x = tape.gelu(x);
    let logits = layers::conv(tape, params, "decoder.head.classify", x, ConvGeometry::new(1, 0))?;
    Ok(tape.sigmoid(logits))
}

/// Sampling coordinates `[Z × X × 2]` (image row, image column, in array
/// index units) of each BEV cell center on a flat ground `cam_height` below a
/// level camera. Pixel centers sit at half-integer continuous coordinates.
pub fn ipm_coords(intr: &CameraIntrinsics, spec: &BevGridSpec, cam_height: f64) -> Tensor {
    let (zb, xb) = (spec.depth_bins(), spec.lateral_bins());
    let mut data = Vec::with_capacity(zb * xb * 2);
    for r in 0..zb {
        let z = spec.z_center(r);
        let v = intr.row(cam_height, z);
        for c in 0..xb {
            let u = intr.column(spec.x_center(c), z);
            if intr.column_in_image(u) && v >= 0.0 && v < intr.height as f64 {
                data.push(v - 0.5);
                data.push(u - 0.5);
            } else {
                data.push(OUTSIDE);
                data.push(OUTSIDE);
            }
        }
    }
    Tensor::from_parts(vec![zb, xb, 2], data)
}

/// Inverse-perspective mapping: warps a front-view `image[C×H×W]` onto the
/// BEV grid through the flat-ground homography.
pub fn ipm_baseline(
    image: &Tensor,
    intr: &CameraIntrinsics,
    spec: &BevGridSpec,
    cam_height: f64,
) -> Result<Tensor> {
    if cam_height <= 0.0 {
        return Err(Error::config("camera height must be positive"));
    }
    intr.validate()?;
    spec.validate()?;
    let s = image.shape();
    if s.len() != 3 || s[1] != intr.height || s[2] != intr.width {
        return Err(Error::config(format!(
            "image {s:?} does not match intrinsics {}x{}",
            intr.height, intr.width
        )));
    }
    let mut tape = Tape::new();
    let img = tape.constant(image.clone());
    let out = tape.resample_bilinear(img, &ipm_coords(intr, spec, cam_height))?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_grid_extents() {
        let spec = BevGridSpec::default();
        spec.validate().unwrap();
        assert_eq!(spec.depth_bins(), 78);
        assert_eq!(spec.lateral_bins(), 80);
        assert_eq!(spec.cell_of(0.1, 1.2), Some((0, 40)));
        assert_eq!(spec.cell_of(0.0, 45.0), None);
    }

    #[test]
    fn halving_partition() {
        let spec = BevGridSpec::default();
        let p = DepthPartition::halving(&spec).unwrap();
        let rows: Vec<_> = p.intervals().iter().map(|i| i.rows).collect();
        assert_eq!(rows, [3, 5, 10, 20, 40]);
        assert_eq!(rows.iter().sum::<usize>(), 78);
        assert_eq!(p.for_level(0).z_near, 20.0);
        assert_eq!(p.for_level(4).z_near, 1.0);
    }

    #[test]
    fn misaligned_partition_rejected() {
        let spec = BevGridSpec {
            cell: 0.3,
            z_min: 1.0,
            z_max: 40.0 - 0.1,
            x_max: 20.1,
        };
        assert!(DepthPartition::halving(&spec).is_err());
        let spec = BevGridSpec::default();
        assert!(DepthPartition::from_bounds(&spec, &[1.0, 2.25, 5.0, 10.0, 20.0, 40.0]).is_err());
    }

    #[test]
    fn on_axis_cells_sample_principal_column() {
        let intr = CameraIntrinsics::desk();
        let spec = BevGridSpec {
            x_max: 20.25,
            ..BevGridSpec::default()
        };
        spec.validate().unwrap();
        // 81 lateral bins: column 40 is centered on x = 0.
        assert_eq!(spec.x_center(40), 0.0);
        let interval = DepthPartition::halving(&spec).unwrap().for_level(0);
        let coords = polar_sample_coords(&intr, &spec, &interval, 64);
        for r in 0..interval.rows {
            assert_eq!(coords.at(&[r, 40, 1]), intr.cu * 64.0 / 128.0);
            assert_eq!(coords.at(&[r, 40, 0]), r as f64);
        }
    }

    #[test]
    fn ipm_rows_lie_below_horizon() {
        let intr = CameraIntrinsics::desk();
        let spec = BevGridSpec::default();
        let coords = ipm_coords(&intr, &spec, 1.5);
        for r in 0..spec.depth_bins() {
            let v = intr.row(1.5, spec.z_center(r));
            assert!(v > intr.cv);
            for c in 0..spec.lateral_bins() {
                let row = coords.at(&[r, c, 0]);
                assert!(row == OUTSIDE || row + 0.5 > intr.cv);
            }
        }
    }

    #[test]
    fn zero_feature_gives_expansion_bias() {
        let mut rng = SeededRng::new(8);
        let mut params = ParameterSet::new();
        params.insert("d.collapse.weight", Tensor::randn(&[3 * 4, 6], 1.0, &mut rng)).unwrap();
        params.insert("d.expand.weight", Tensor::randn(&[6, 3 * 5], 1.0, &mut rng)).unwrap();
        let bias = Tensor::randn(&[15], 1.0, &mut rng);
        params.insert("d.expand.bias", bias.clone()).unwrap();
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::zeros(&[3, 4, 7]));
        let polar = collapse_expand_polar(&mut tape, &params, "d", f, 5).unwrap();
        let out = tape.value(polar);
        assert_eq!(out.shape(), &[3, 5, 7]);
        for c in 0..3 {
            for r in 0..5 {
                for col in 0..7 {
                    assert_eq!(out.at(&[c, r, col]), bias.data()[c * 5 + r]);
                }
            }
        }
    }
}
