use crate::tensor::Tensor;

use super::{point_in_polygon, ClassPalette, Scene};

pub type Rgb = [u8; 3];

pub const SKY_COLOR: Rgb = [150, 200, 235];
pub const GROUND_COLOR: Rgb = [96, 112, 80];

/// Corners closer than this depth are not projected.
const NEAR_PLANE: f64 = 0.1;

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Counter-clockwise convex hull (monotone chain), collinear points dropped.
fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite projections"));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(pts.len() * 2);
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn inside_hull(hull: &[(f64, f64)], p: (f64, f64)) -> bool {
    (0..hull.len()).all(|i| cross(hull[i], hull[(i + 1) % hull.len()], p) >= 0.0)
}

fn put(data: &mut [f64], plane: usize, idx: usize, color: Rgb) {
    for (ch, value) in color.iter().enumerate() {
        data[ch * plane + idx] = f64::from(*value) / 255.0;
    }
}

/// Renders the scene as seen by its camera, rescaled to `width × height`:
/// `[3 × H × W]` with channel values in `[0, 1]`. Pixel `(v, u)` samples the
/// ray through its center `(u + ½, v + ½)`.
pub fn render_front_view(scene: &Scene, palette: &ClassPalette, width: usize, height: usize) -> Tensor {
    let intr = scene.intrinsics.scaled_to(width, height);
    let plane = width * height;
    let mut data = vec![0.0; 3 * plane];
    let drivable = palette.get(palette.surface_class()).color;
    for v in 0..height {
        let dy = (v as f64 + 0.5 - intr.cv) / intr.fy;
        for u in 0..width {
            let color = if dy <= 0.0 {
                SKY_COLOR
            } else {
                let z = scene.cam_height / dy;
                let x = (u as f64 + 0.5 - intr.cu) * z / intr.fx;
                if scene.ground.len() >= 3 && point_in_polygon(&scene.ground, x, z) {
                    drivable
                } else {
                    GROUND_COLOR
                }
            };
            put(&mut data, plane, v * width + u, color);
        }
    }

    let mut order: Vec<usize> = (0..scene.boxes.len()).collect();
    let dist = |i: usize| scene.boxes[i].x.hypot(scene.boxes[i].z);
    order.sort_by(|&a, &b| dist(b).partial_cmp(&dist(a)).expect("finite box positions"));
    for i in order {
        let b = &scene.boxes[i];
        let corners = b.corners();
        if corners.iter().any(|c| c[2] < NEAR_PLANE) {
            continue;
        }
        let projected: Vec<(f64, f64)> = corners
            .iter()
            .map(|c| (intr.fx * c[0] / c[2] + intr.cu, intr.fy * c[1] / c[2] + intr.cv))
            .collect();
        let hull = convex_hull(projected);
        if hull.len() < 3 {
            continue;
        }
        let lo_u = hull.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let hi_u = hull.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let lo_v = hull.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let hi_v = hull.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let u0 = (lo_u - 0.5).ceil().max(0.0) as usize;
        let v0 = (lo_v - 0.5).ceil().max(0.0) as usize;
        let u1 = ((hi_u - 0.5).floor().min(width as f64 - 1.0)).max(-1.0);
        let v1 = ((hi_v - 0.5).floor().min(height as f64 - 1.0)).max(-1.0);
        if u1 < 0.0 || v1 < 0.0 {
            continue;
        }
        let color = palette.get(b.cls).color;
        for v in v0..=v1 as usize {
            for u in u0..=u1 as usize {
                if inside_hull(&hull, (u as f64 + 0.5, v as f64 + 0.5)) {
                    put(&mut data, plane, v * width + u, color);
                }
            }
        }
    }
    Tensor::from_parts(vec![3, height, width], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::CameraIntrinsics;
    use crate::scene::Box3D;

    fn pixel(img: &Tensor, v: usize, u: usize) -> Rgb {
        [0, 1, 2].map(|c| (img.at(&[c, v, u]) * 255.0).round() as u8)
    }

    fn empty() -> Scene {
        Scene {
            id: "e".into(),
            seed: 0,
            intrinsics: CameraIntrinsics::desk(),
            cam_height: 1.5,
            boxes: vec![],
            ground: vec![],
        }
    }

    #[test]
    fn empty_scene_splits_at_horizon() {
        let img = render_front_view(&empty(), &ClassPalette::default(), 128, 128);
        for u in [0, 64, 127] {
            assert_eq!(pixel(&img, 39, u), SKY_COLOR);
            assert_eq!(pixel(&img, 40, u), GROUND_COLOR);
            assert_eq!(pixel(&img, 127, u), GROUND_COLOR);
        }
    }

    #[test]
    fn hull_of_square_with_interior_point() {
        let h = convex_hull(vec![(0.0, 0.0), (1.0, 1.0), (2.0, 0.0), (2.0, 2.0), (0.0, 2.0)]);
        assert_eq!(h.len(), 4);
        assert!(inside_hull(&h, (1.0, 1.5)));
        assert!(!inside_hull(&h, (2.5, 1.0)));
    }

    #[test]
    fn on_axis_box_is_symmetric() {
        let mut s = empty();
        s.boxes.push(Box3D::on_ground(2, 0.0, 10.0, (2.0, 4.0, 1.5), 0.0, 1.5));
        let img = render_front_view(&s, &ClassPalette::default(), 128, 128);
        let car = ClassPalette::default().get(2).color;
        for v in 0..128 {
            for u in 0..64 {
                assert_eq!(pixel(&img, v, u) == car, pixel(&img, v, 127 - u) == car);
            }
        }
        assert_eq!(pixel(&img, 45, 64), car);
    }
}
