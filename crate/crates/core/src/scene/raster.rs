use crate::decoder::BevGridSpec;
use crate::tensor::Tensor;

use super::{ClassPalette, Scene};

/// Binary per-class masks `[c × Z × X]` aligned to a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct BevLabel {
    pub masks: Tensor,
    pub spec: BevGridSpec,
}

impl BevLabel {
    pub fn classes(&self) -> usize {
        self.masks.shape()[0]
    }

    pub fn count(&self, class: usize) -> usize {
        let cells = self.spec.depth_bins() * self.spec.lateral_bins();
        self.masks.data()[class * cells..(class + 1) * cells]
            .iter()
            .filter(|v| **v > 0.5)
            .count()
    }
}

/// Even-odd rule test of `(x, z)` against a closed polygon.
pub fn point_in_polygon(poly: &[[f64; 2]], x: f64, z: f64) -> bool {
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let [xi, zi] = poly[i];
        let [xj, zj] = poly[(i + n - 1) % n];
        if (zi > z) != (zj > z) && x < (xj - xi) * (z - zi) / (zj - zi) + xi {
            inside = !inside;
        }
    }
    inside
}

/// Marks every cell whose center lies inside a box footprint (or, for the
/// surface class, inside the ground polygon). Footprints beyond the grid
/// are clipped.
pub fn rasterize_bev(scene: &Scene, palette: &ClassPalette, spec: &BevGridSpec) -> BevLabel {
    let (zb, xb) = (spec.depth_bins(), spec.lateral_bins());
    let cells = zb * xb;
    let mut masks = vec![0.0; palette.len() * cells];
    let surface = palette.surface_class();
    for r in 0..zb {
        let z = spec.z_center(r);
        for c in 0..xb {
            let x = spec.x_center(c);
            let k = r * xb + c;
            if scene.ground.len() >= 3 && point_in_polygon(&scene.ground, x, z) {
                masks[surface * cells + k] = 1.0;
            }
            for b in &scene.boxes {
                if b.contains_ground_point(x, z) {
                    masks[b.cls * cells + k] = 1.0;
                }
            }
        }
    }
    BevLabel {
        masks: Tensor::from_parts(vec![palette.len(), zb, xb], masks),
        spec: *spec,
    }
}

/// `[Z × X]` mask, 1 where the line of sight from the camera to the cell
/// center crosses a cell covered by a non-flat box footprint before reaching
/// the cell itself. Rays are marched at a quarter-cell step.
pub fn visibility_mask(scene: &Scene, palette: &ClassPalette, spec: &BevGridSpec) -> Tensor {
    let (zb, xb) = (spec.depth_bins(), spec.lateral_bins());
    let mut blocked = vec![false; zb * xb];
    for r in 0..zb {
        for c in 0..xb {
            let (x, z) = (spec.x_center(c), spec.z_center(r));
            blocked[r * xb + c] = scene
                .boxes
                .iter()
                .any(|b| !palette.get(b.cls).flat && b.contains_ground_point(x, z));
        }
    }
    let step = spec.cell / 4.0;
    let mut mask = vec![0.0; zb * xb];
    for r in 0..zb {
        for c in 0..xb {
            let (x, z) = (spec.x_center(c), spec.z_center(r));
            let len = x.hypot(z);
            let n = (len / step).floor() as usize;
            let hidden = (1..n).any(|i| {
                let t = i as f64 * step / len;
                match spec.cell_of(t * x, t * z) {
                    Some((rr, cc)) => (rr, cc) != (r, c) && blocked[rr * xb + cc],
                    None => false,
                }
            });
            if hidden {
                mask[r * xb + c] = 1.0;
            }
        }
    }
    Tensor::from_parts(vec![zb, xb], mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::CameraIntrinsics;
    use crate::scene::Box3D;

    fn scene(boxes: Vec<Box3D>) -> Scene {
        Scene {
            id: "r".into(),
            seed: 1,
            intrinsics: CameraIntrinsics::desk(),
            cam_height: 1.5,
            boxes,
            ground: vec![],
        }
    }

    #[test]
    fn aligned_car_covers_thirty_two_cells() {
        let s = scene(vec![Box3D::on_ground(2, 0.0, 10.0, (2.0, 4.0, 1.5), 0.0, 1.5)]);
        let label = rasterize_bev(&s, &ClassPalette::default(), &BevGridSpec::default());
        assert_eq!(label.count(2), 32);
        assert_eq!(label.count(0), 0);
    }

    #[test]
    fn far_box_is_clipped() {
        let spec = BevGridSpec::default();
        let s = scene(vec![Box3D::on_ground(3, 0.0, 41.0, (2.0, 4.0, 3.0), 0.0, 1.5)]);
        let label = rasterize_bev(&s, &ClassPalette::default(), &spec);
        // z from 39 to 43; rows covering 39..40 remain: 2 rows × 4 columns.
        assert_eq!(label.count(3), 8);
    }

    #[test]
    fn polygon_even_odd() {
        let square = [[0.0, 0.0], [2.0, 0.0], [2.0, 2.0], [0.0, 2.0]];
        assert!(point_in_polygon(&square, 1.0, 1.0));
        assert!(!point_in_polygon(&square, 3.0, 1.0));
        assert!(!point_in_polygon(&square, 1.0, -0.1));
    }

    #[test]
    fn car_hides_cells_behind_it() {
        let spec = BevGridSpec::default();
        let s = scene(vec![Box3D::on_ground(2, 0.0, 10.0, (2.0, 4.0, 1.5), 0.0, 1.5)]);
        let m = visibility_mask(&s, &ClassPalette::default(), &spec);
        let (r, c) = spec.cell_of(0.1, 20.0).unwrap();
        assert_eq!(m.at(&[r, c]), 1.0);
        let (r, c) = spec.cell_of(0.1, 5.0).unwrap();
        assert_eq!(m.at(&[r, c]), 0.0);
        let (r, c) = spec.cell_of(10.0, 20.0).unwrap();
        assert_eq!(m.at(&[r, c]), 0.0);
        // walkways do not occlude
        let flat = scene(vec![Box3D::on_ground(1, 0.0, 10.0, (2.0, 4.0, 0.15), 0.0, 1.5)]);
        assert_eq!(visibility_mask(&flat, &ClassPalette::default(), &spec).sum(), 0.0);
    }
}
