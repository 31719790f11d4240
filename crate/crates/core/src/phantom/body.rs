//! Analytic body model.
//!
//! Anatomy is described in body coordinates: lateral `x` (+ = subject's
//! left), antero-posterior `y` (+ = posterior) and depth `d` below the vertex,
//! all in millimetres for a 1750 mm tall subject. World z is obtained by
//! scaling depth with the subject's height.

use serde::{Deserialize, Serialize};

use crate::landmarks::Joint;

/// Water and fat signal of a tissue, in arbitrary units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tissue {
    pub water: f32,
    pub fat: f32,
}

pub const BACKGROUND: Tissue = Tissue { water: 0.0, fat: 0.0 };
pub const FAT_SHELL: Tissue = Tissue { water: 50.0, fat: 700.0 };
pub const LEAN: Tissue = Tissue { water: 700.0, fat: 50.0 };
pub const BONE: Tissue = Tissue { water: 1000.0, fat: 100.0 };
pub const LIVER: Tissue = Tissue { water: 760.0, fat: 40.0 };
pub const PANCREAS: Tissue = Tissue { water: 740.0, fat: 60.0 };
pub const BRAIN: Tissue = Tissue { water: 800.0, fat: 30.0 };
pub const CYLINDER: Tissue = Tissue { water: 600.0, fat: 300.0 };

/// Subcutaneous fat thickness.
pub const SHELL_MM: f64 = 15.0;
pub const REFERENCE_HEIGHT_MM: f64 = 1750.0;
/// Depth of the nominal top of the Dixon field of view.
pub const NOMINAL_FOV_TOP_DEPTH: f64 = 230.0;
pub const BONE_RADIUS_MM: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Shape {
    Anatomical,
    /// Uniform infinite cylinder along z.
    Cylinder { radius_mm: f64 },
}

/// Ellipsoid in body coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub axes: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.axes[a]).powi(2)).sum::<f64>() <= 1.0
    }
}

pub const LIVER_SHAPE: Ellipsoid = Ellipsoid { center: [-60.0, 0.0, 560.0], axes: [75.0, 70.0, 75.0] };
pub const PANCREAS_SHAPE: Ellipsoid = Ellipsoid { center: [25.0, 10.0, 640.0], axes: [60.0, 15.0, 15.0] };

fn lerp_knots(knots: &[(f64, f64)], d: f64) -> f64 {
    if d <= knots[0].0 {
        return knots[0].1;
    }
    for w in knots.windows(2) {
        if d <= w[1].0 {
            let t = (d - w[0].0) / (w[1].0 - w[0].0);
            return w[0].1 + t * (w[1].1 - w[0].1);
        }
    }
    knots[knots.len() - 1].1
}

const TORSO_HALF_WIDTH: [(f64, f64); 8] =
    [(250.0, 180.0), (300.0, 200.0), (360.0, 195.0), (450.0, 165.0), (600.0, 160.0), (720.0, 150.0), (850.0, 170.0), (950.0, 165.0)];
const TORSO_HALF_DEPTH: [(f64, f64); 5] = [(250.0, 90.0), (350.0, 110.0), (600.0, 120.0), (850.0, 115.0), (950.0, 110.0)];

const NECK_TOP: f64 = 190.0;
const NECK_BOTTOM: f64 = 300.0;
const NECK_AXES: [f64; 2] = [45.0, 50.0];
const SHOULDER_ROOF: f64 = 250.0;
const ROOF_SLOPE: f64 = 0.35;
const ROOF_SLOPE_AP: f64 = 0.6;
const CROTCH: f64 = 930.0;
const CROTCH_SLOPE: f64 = 0.8;
const LEG_TOP: f64 = 780.0;

pub fn torso_half_width(d: f64) -> f64 {
    lerp_knots(&TORSO_HALF_WIDTH, d)
}

pub fn torso_half_depth(d: f64) -> f64 {
    lerp_knots(&TORSO_HALF_DEPTH, d)
}

/// Lateral offset of a leg axis.
pub fn leg_center_x(d: f64) -> f64 {
    90.0 - 15.0 * ((d - 870.0) / 350.0).clamp(0.0, 1.0)
}

pub fn leg_radius(d: f64) -> f64 {
    lerp_knots(&[(900.0, 85.0), (1220.0, 60.0), (1500.0, 52.0)], d)
}

/// Joint centres in body coordinates.
pub fn joint_body_position(joint: Joint) -> [f64; 3] {
    let side = if joint.is_left() { 1.0 } else { -1.0 };
    match joint {
        Joint::ShoulderLeft | Joint::ShoulderRight => [side * 165.0, 0.0, 325.0],
        Joint::HipLeft | Joint::HipRight => [side * 90.0, 0.0, 870.0],
        Joint::KneeLeft | Joint::KneeRight => [side * leg_center_x(1220.0), 0.0, 1220.0],
    }
}

/// Body placed in world space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyModel {
    pub shape: Shape,
    /// World z of the vertex.
    pub z_vertex: f64,
    /// Height relative to the reference subject; scales depth only.
    pub scale: f64,
    /// Lateral build relative to the reference subject; scales x only.
    pub lateral_scale: f64,
    /// World x of the mid-sagittal plane.
    pub x_center: f64,
    /// World y of the body axis.
    pub y_center: f64,
}

impl BodyModel {
    /// Reference subject with the vertex at the world origin.
    pub fn reference() -> Self {
        Self { shape: Shape::Anatomical, z_vertex: 0.0, scale: 1.0, lateral_scale: 1.0, x_center: 0.0, y_center: 0.0 }
    }

    pub fn depth(&self, z: f64) -> f64 {
        (self.z_vertex - z) / self.scale
    }

    pub fn world_z(&self, d: f64) -> f64 {
        self.z_vertex - d * self.scale
    }

    pub fn to_body(&self, p: [f64; 3]) -> [f64; 3] {
        [(p[0] - self.x_center) / self.lateral_scale, p[1] - self.y_center, self.depth(p[2])]
    }

    pub fn to_world(&self, b: [f64; 3]) -> [f64; 3] {
        [b[0] * self.lateral_scale + self.x_center, b[1] + self.y_center, self.world_z(b[2])]
    }

    pub fn joint_world(&self, joint: Joint) -> [f64; 3] {
        self.to_world(joint_body_position(joint))
    }

    /// Inside test for the body shrunk by `inset` mm; body coordinates.
    pub fn inside_body(&self, b: [f64; 3], inset: f64) -> bool {
        let [x, y, d] = b;
        match self.shape {
            Shape::Cylinder { radius_mm } => x * x + y * y <= (radius_mm - inset).powi(2),
            Shape::Anatomical => {
                let t = inset;
                let head = Ellipsoid { center: [0.0, 0.0, 110.0], axes: [80.0 - t, 95.0 - t, 110.0 - t] };
                if head.contains(b) {
                    return true;
                }
                if (NECK_TOP..=NECK_BOTTOM).contains(&d)
                    && (x / (NECK_AXES[0] - t)).powi(2) + (y / (NECK_AXES[1] - t)).powi(2) <= 1.0
                {
                    return true;
                }
                let roof = SHOULDER_ROOF
                    + ROOF_SLOPE * (x.abs() - NECK_AXES[0]).max(0.0)
                    + ROOF_SLOPE_AP * (y.abs() - NECK_AXES[1]).max(0.0)
                    + 1.2 * t;
                let floor = CROTCH - CROTCH_SLOPE * (x * x + y * y).sqrt() - 1.28 * t;
                if d >= roof && d <= floor {
                    let a = torso_half_width(d) - t;
                    let bb = torso_half_depth(d) - t;
                    if (x / a).powi(2) + (y / bb).powi(2) <= 1.0 {
                        return true;
                    }
                }
                if d >= LEG_TOP + t {
                    let r = leg_radius(d) - t;
                    let cx = leg_center_x(d);
                    if (x.abs() - cx).powi(2) + y * y <= r * r {
                        return true;
                    }
                }
                false
            }
        }
    }

    /// Cheap bounding-box test; false means certainly outside.
    pub fn may_contain(&self, p: [f64; 3]) -> bool {
        let (x, y) = ((p[0] - self.x_center).abs(), (p[1] - self.y_center).abs());
        match self.shape {
            Shape::Cylinder { radius_mm } => x <= radius_mm && y <= radius_mm,
            Shape::Anatomical => x <= 205.0 * self.lateral_scale && y <= 125.0,
        }
    }

    pub fn tissue(&self, p: [f64; 3]) -> Tissue {
        let b = self.to_body(p);
        if !self.inside_body(b, 0.0) {
            return BACKGROUND;
        }
        if let Shape::Cylinder { .. } = self.shape {
            return CYLINDER;
        }
        if Joint::ALL.iter().any(|&j| {
            let c = joint_body_position(j);
            ((b[0] - c[0]) * self.lateral_scale).powi(2) + (b[1] - c[1]).powi(2) + ((b[2] - c[2]) * self.scale).powi(2)
                <= BONE_RADIUS_MM * BONE_RADIUS_MM
        }) {
            return BONE;
        }
        if LIVER_SHAPE.contains(b) {
            return LIVER;
        }
        if PANCREAS_SHAPE.contains(b) {
            return PANCREAS;
        }
        if !self.inside_body(b, SHELL_MM) {
            return FAT_SHELL;
        }
        if b[2] < NECK_TOP {
            return BRAIN;
        }
        LEAN
    }

    pub fn in_body(&self, p: [f64; 3]) -> bool {
        self.inside_body(self.to_body(p), 0.0)
    }

    pub fn in_liver(&self, p: [f64; 3]) -> bool {
        matches!(self.shape, Shape::Anatomical) && LIVER_SHAPE.contains(self.to_body(p))
    }

    pub fn in_pancreas(&self, p: [f64; 3]) -> bool {
        matches!(self.shape, Shape::Anatomical) && PANCREAS_SHAPE.contains(self.to_body(p))
    }

    /// World z range (top, bottom) of the liver.
    pub fn liver_z_range(&self) -> (f64, f64) {
        let c = LIVER_SHAPE.center[2];
        let h = LIVER_SHAPE.axes[2];
        (self.world_z(c - h), self.world_z(c + h))
    }

    /// Lateral skin position on the subject's left at body (y, d), if the
    /// torso or cylinder is present there.
    pub fn lateral_surface(&self, y: f64, d: f64) -> Option<f64> {
        match self.shape {
            Shape::Cylinder { radius_mm } => (y.abs() < radius_mm).then(|| (radius_mm * radius_mm - y * y).sqrt()),
            Shape::Anatomical => {
                let a = torso_half_width(d);
                let b = torso_half_depth(d);
                (y.abs() < b).then(|| a * (1.0 - (y / b).powi(2)).sqrt())
            }
        }
    }

    /// Anterior skin position (most negative y) at body (x, d).
    pub fn anterior_surface(&self, x: f64, d: f64) -> Option<f64> {
        match self.shape {
            Shape::Cylinder { radius_mm } => (x.abs() < radius_mm).then(|| -(radius_mm * radius_mm - x * x).sqrt()),
            Shape::Anatomical => {
                let a = torso_half_width(d);
                let b = torso_half_depth(d);
                (x.abs() < a).then(|| -b * (1.0 - (x / a).powi(2)).sqrt())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> BodyModel {
        BodyModel::reference()
    }

    #[test]
    fn joints_sit_in_bone() {
        let m = model();
        for j in Joint::ALL {
            assert_eq!(m.tissue(m.joint_world(j)), BONE, "{j:?}");
        }
    }

    #[test]
    fn left_joints_have_positive_x() {
        for j in Joint::ALL {
            let p = joint_body_position(j);
            assert_eq!(p[0] > 0.0, j.is_left());
        }
    }

    #[test]
    fn shell_is_fat_and_interior_lean() {
        let m = model();
        let d = 700.0;
        let a = torso_half_width(d);
        assert_eq!(m.tissue(m.to_world([a - 5.0, 0.0, d])), FAT_SHELL);
        assert_eq!(m.tissue(m.to_world([40.0, 60.0, d])), LEAN);
        assert_eq!(m.tissue(m.to_world([a + 5.0, 0.0, d])), BACKGROUND);
    }

    #[test]
    fn organs_are_inside_the_lean_core() {
        let m = model();
        for e in [LIVER_SHAPE, PANCREAS_SHAPE] {
            for s in [-1.0, 1.0] {
                for a in 0..3 {
                    let mut p = e.center;
                    p[a] += s * e.axes[a];
                    assert!(m.inside_body(p, SHELL_MM), "{p:?}");
                }
            }
        }
    }
}
