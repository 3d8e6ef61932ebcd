//! Pinhole cameras, look-at poses and orbit view schedules.
//!
//! Conventions: right-handed world, the camera looks down its local −z
//! axis with +y up; image x grows to the right and image y grows downward.
//! Depth is the camera-space distance along the optical axis (−z).

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::Rng;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// `fx = fy = 0.9 · width`, principal point at the image center.
    pub fn default_for(width: usize, height: usize) -> Self {
        let f = 0.9 * width as f64;
        Self {
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.fx.is_finite()
            && self.fy.is_finite()
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid intrinsics {self:?}")))
        }
    }

    pub fn in_bounds(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0 && pixel.y >= 0.0 && pixel.x <= (self.width - 1) as f64 && pixel.y <= (self.height - 1) as f64
    }
}

/// World-to-camera rigid transform: `x_cam = rotation · x_world + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let pose = Self { rotation, translation };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<()> {
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity())
            .abs()
            .max();
        let det = self.rotation.determinant();
        if err > 1e-9 || (det - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "rotation is not proper orthonormal (|RᵀR−I|∞ = {err:e}, det = {det})"
            )));
        }
        Ok(())
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn camera_to_world(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    pub label: String,
}

impl View {
    pub fn new(intrinsics: Intrinsics, pose: Pose, label: impl Into<String>) -> Self {
        Self {
            intrinsics,
            pose,
            label: label.into(),
        }
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    /// World-space ray through a pixel, with the direction scaled so that
    /// one unit of ray parameter equals one unit of depth.
    pub fn ray(&self, px: f64, py: f64) -> (Vec3, Vec3) {
        let k = &self.intrinsics;
        let dir_cam = Vec3::new((px - k.cx) / k.fx, -(py - k.cy) / k.fy, -1.0);
        (self.pose.center(), self.pose.rotation.transpose() * dir_cam)
    }
}

/// Position on a viewing sphere around `target`. Azimuth 0 sits on +z,
/// azimuth 90 on +x; positive elevation is above the target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrbitSpec {
    pub radius: f64,
    pub elevation: f64,
    pub azimuth: f64,
    pub target: Vec3,
}

impl Default for OrbitSpec {
    fn default() -> Self {
        Self {
            radius: 2.5,
            elevation: 15.0,
            azimuth: 0.0,
            target: Vec3::zeros(),
        }
    }
}

impl OrbitSpec {
    pub fn new(radius: f64, elevation: f64, azimuth: f64) -> Result<Self> {
        let orbit = Self {
            radius,
            elevation,
            azimuth: wrap_degrees(azimuth),
            target: Vec3::zeros(),
        };
        orbit.validate()?;
        Ok(orbit)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) || !(-89.0..=89.0).contains(&self.elevation) {
            return Err(Error::InvalidArgument(format!(
                "orbit needs radius > 0 and elevation in [-89, 89], got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn with_azimuth(&self, azimuth: f64) -> Self {
        Self {
            azimuth: wrap_degrees(azimuth),
            ..*self
        }
    }

    pub fn eye(&self) -> Vec3 {
        let (el, az) = (self.elevation.to_radians(), self.azimuth.to_radians());
        self.target + self.radius * Vec3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos())
    }

    pub fn pose(&self) -> Result<Pose> {
        look_at(&self.eye(), &self.target, &Vec3::y())
    }

    pub fn view(&self, intrinsics: Intrinsics) -> Result<View> {
        let label = format!("az{:.1}_el{:.1}", self.azimuth, self.elevation);
        Ok(View::new(intrinsics, self.pose()?, label))
    }
}

/// Wraps an angle in degrees into `[0, 360)`.
pub fn wrap_degrees(deg: f64) -> f64 {
    let w = deg.rem_euclid(360.0);
    // rem_euclid can return 360.0 for tiny negative inputs
    if w >= 360.0 {
        0.0
    } else {
        w
    }
}

/// Pose of a camera at `eye` looking at `target`.
pub fn look_at(eye: &Vec3, target: &Vec3, up: &Vec3) -> Result<Pose> {
    let forward = target - eye;
    if forward.norm() < 1e-12 {
        return Err(Error::DegenerateCamera("eye coincides with target"));
    }
    let forward = forward.normalize();
    let right = forward.cross(up);
    if right.norm() < 1e-9 * up.norm().max(1.0) {
        return Err(Error::DegenerateCamera("up vector is parallel to the view direction"));
    }
    let right = right.normalize();
    let true_up = right.cross(&forward);
    let rotation = Matrix3::from_rows(&[right.transpose(), true_up.transpose(), (-forward).transpose()]);
    Ok(Pose {
        rotation,
        translation: -(rotation * eye),
    })
}

/// Projects a world point to continuous pixel coordinates plus depth.
pub fn project(point: &Vec3, view: &View) -> Result<(Vector2<f64>, f64)> {
    let cam = view.pose.world_to_camera(point);
    let depth = -cam.z;
    if !(depth > 0.0) {
        return Err(Error::BehindCamera { depth });
    }
    let k = &view.intrinsics;
    let pixel = Vector2::new(k.cx + k.fx * cam.x / depth, k.cy - k.fy * cam.y / depth);
    Ok((pixel, depth))
}

pub fn unproject(pixel: &Vector2<f64>, depth: f64, view: &View) -> Result<Vec3> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(Error::NonPositiveDepth(depth));
    }
    let k = &view.intrinsics;
    let cam = Vec3::new(
        (pixel.x - k.cx) / k.fx * depth,
        -(pixel.y - k.cy) / k.fy * depth,
        -depth,
    );
    Ok(view.pose.camera_to_world(&cam))
}

/// Parameters of the neighbor-then-sweep view schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewSchedule {
    pub azimuth_step: f64,
    /// Probability of stepping in the positive azimuth direction.
    pub forward_prob: f64,
    pub elevation_jitter: f64,
    pub reference_elevation: f64,
}

impl Default for ViewSchedule {
    fn default() -> Self {
        Self {
            azimuth_step: 15.0,
            forward_prob: 0.75,
            elevation_jitter: 5.0,
            reference_elevation: 15.0,
        }
    }
}

/// Deterministic neighbor: azimuth moved by `sign · step`, elevation set to
/// `reference + elevation_offset` (clamped to the valid range).
pub fn neighbor_view(current: &OrbitSpec, step: f64, positive: bool, elevation: f64) -> OrbitSpec {
    let delta = if positive { step } else { -step };
    OrbitSpec {
        azimuth: wrap_degrees(current.azimuth + delta),
        elevation: elevation.clamp(-89.0, 89.0),
        ..*current
    }
}

/// Random neighbor of `current`: ±step in azimuth, positive with
/// probability `forward_prob`, and an elevation drawn uniformly within the
/// jitter band around the reference. A forward bias makes the walk circle
/// the object instead of diffusing around the start.
pub fn sample_neighbor<R: Rng + ?Sized>(
    current: &OrbitSpec,
    schedule: &ViewSchedule,
    rng: &mut R,
) -> Result<OrbitSpec> {
    if schedule.azimuth_step.abs() > 45.0 {
        return Err(Error::InvalidArgument(format!(
            "neighbor step must be at most 45 degrees, got {}",
            schedule.azimuth_step
        )));
    }
    let positive = rng.gen_bool(schedule.forward_prob.clamp(0.0, 1.0));
    let jitter = if schedule.elevation_jitter > 0.0 {
        rng.gen_range(-schedule.elevation_jitter..=schedule.elevation_jitter)
    } else {
        0.0
    };
    Ok(neighbor_view(
        current,
        schedule.azimuth_step,
        positive,
        schedule.reference_elevation + jitter,
    ))
}

/// Consecutive neighbor pairs walking a full circle of azimuth from `start`.
/// Elevation and radius stay at the start's values.
pub fn sweep_sequence(start: &OrbitSpec, step: f64) -> Result<Vec<(OrbitSpec, OrbitSpec)>> {
    let count = 360.0 / step;
    if !(step > 0.0) || (count - count.round()).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("sweep step {step} does not divide 360")));
    }
    let count = count.round() as usize;
    Ok((0..count)
        .map(|i| {
            let a = start.with_azimuth(start.azimuth + step * i as f64);
            let b = start.with_azimuth(start.azimuth + step * (i + 1) as f64);
            (a, b)
        })
        .collect())
}

/// `n` views evenly spaced in azimuth starting at `start`.
pub fn orbit_ring(start: &OrbitSpec, n: usize) -> Vec<OrbitSpec> {
    (0..n)
        .map(|i| start.with_azimuth(start.azimuth + 360.0 * i as f64 / n as f64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn axis_view() -> View {
        let k = Intrinsics::new(100.0, 100.0, 32.0, 32.0, 64, 64).unwrap();
        let pose = look_at(&Vec3::new(0.0, 0.0, 2.0), &Vec3::zeros(), &Vec3::y()).unwrap();
        View::new(k, pose, "axis")
    }

    #[test]
    fn axis_aligned_look_at_projects_origin_to_principal_point() {
        let v = axis_view();
        assert!(close((v.pose.center() - Vec3::new(0.0, 0.0, 2.0)).norm(), 0.0, 1e-12));
        let (px, d) = project(&Vec3::zeros(), &v).unwrap();
        assert!(close(px.x, 32.0, 1e-12) && close(px.y, 32.0, 1e-12));
        assert!(close(d, 2.0, 1e-12));
    }

    #[test]
    fn off_axis_point_shifts_by_focal_ratio() {
        let (px, d) = project(&Vec3::new(0.02, 0.0, 0.0), &axis_view()).unwrap();
        assert!(close(px.x, 33.0, 1e-12) && close(px.y, 32.0, 1e-12));
        assert!(close(d, 2.0, 1e-12));
        // +y world is up, which is toward smaller image rows
        let (px, _) = project(&Vec3::new(0.0, 0.02, 0.0), &axis_view()).unwrap();
        assert!(close(px.y, 31.0, 1e-12));
    }

    #[test]
    fn degenerate_look_at_is_rejected() {
        let e = Vec3::new(1.0, 2.0, 3.0);
        assert!(matches!(look_at(&e, &e, &Vec3::y()), Err(Error::DegenerateCamera(_))));
        assert!(matches!(
            look_at(&Vec3::new(0.0, 3.0, 0.0), &Vec3::zeros(), &Vec3::y()),
            Err(Error::DegenerateCamera(_))
        ));
    }

    #[test]
    fn side_view_equals_rotated_axis_view() {
        // Rotating the axis-aligned camera by +90° about y moves it to +x.
        let side = look_at(&Vec3::new(2.0, 0.0, 0.0), &Vec3::zeros(), &Vec3::y()).unwrap();
        let ry = Matrix3::new(0.0, 0.0, 1.0, 0.0, 1.0, 0.0, -1.0, 0.0, 0.0);
        // world-to-camera of a rotated camera is R_axis · Ryᵀ, with R_axis = I
        let expected = ry.transpose();
        assert!((side.rotation - expected).abs().max() < 1e-12);
        assert!((side.translation - Vec3::new(0.0, 0.0, -2.0)).norm() < 1e-12);
    }

    #[test]
    fn behind_camera_and_zero_depth_are_signaled() {
        let v = axis_view();
        assert!(matches!(
            project(&Vec3::new(0.0, 0.0, 3.0), &v),
            Err(Error::BehindCamera { .. })
        ));
        assert!(matches!(
            unproject(&Vector2::new(32.0, 32.0), 0.0, &v),
            Err(Error::NonPositiveDepth(_))
        ));
    }

    #[test]
    fn unproject_inverts_principal_ray() {
        let p = unproject(&Vector2::new(32.0, 32.0), 2.0, &axis_view()).unwrap();
        assert!(p.norm() < 1e-9);
    }

    #[test]
    fn forced_neighbor_wraps() {
        let o = OrbitSpec::default();
        assert_eq!(neighbor_view(&o, 15.0, true, 15.0).azimuth, 15.0);
        let o = o.with_azimuth(350.0);
        assert!(close(neighbor_view(&o, 15.0, true, 15.0).azimuth, 5.0, 1e-12));
        assert!(close(
            neighbor_view(&o.with_azimuth(5.0), 15.0, false, 15.0).azimuth,
            350.0,
            1e-12
        ));
    }

    #[test]
    fn neighbor_step_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = ViewSchedule {
            azimuth_step: 50.0,
            ..Default::default()
        };
        assert!(sample_neighbor(&OrbitSpec::default(), &s, &mut rng).is_err());
    }

    #[test]
    fn random_walk_covers_all_bins() {
        // Simulate the walk and record which 15° bins it visits.
        let s = ViewSchedule::default();
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut cur = OrbitSpec::default();
            let mut seen = [false; 24];
            seen[0] = true;
            for _ in 0..500 {
                cur = sample_neighbor(&cur, &s, &mut rng).unwrap();
                assert_eq!(cur.radius, 2.5);
                assert!((10.0..=20.0).contains(&cur.elevation));
                seen[(cur.azimuth / 15.0).round() as usize % 24] = true;
            }
            assert!(seen.iter().all(|&b| b), "seed {seed} left bins unvisited");
        }
    }

    #[test]
    fn sweep_enumerates_quarter_turns() {
        let pairs = sweep_sequence(&OrbitSpec::default(), 90.0).unwrap();
        let az: Vec<_> = pairs.iter().map(|(a, b)| (a.azimuth, b.azimuth)).collect();
        assert_eq!(az, vec![(0.0, 90.0), (90.0, 180.0), (180.0, 270.0), (270.0, 0.0)]);
        let single = sweep_sequence(&OrbitSpec::default(), 360.0).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!((single[0].0.azimuth, single[0].1.azimuth), (0.0, 0.0));
        assert!(sweep_sequence(&OrbitSpec::default(), 7.0).is_err());
        assert!(sweep_sequence(&OrbitSpec::default(), 0.0).is_err());
    }

    #[test]
    fn fifteen_degree_sweep_has_uniform_spacing() {
        let pairs = sweep_sequence(&OrbitSpec::default().with_azimuth(10.0), 15.0).unwrap();
        assert_eq!(pairs.len(), 24);
        assert_eq!(pairs.len() as f64 * 15.0, 360.0);
        for (i, (a, b)) in pairs.iter().enumerate() {
            assert!(close(a.azimuth, wrap_degrees(10.0 + 15.0 * i as f64), 1e-9));
            let d = wrap_degrees(b.azimuth - a.azimuth);
            assert!(close(d, 15.0, 1e-9));
            if i + 1 < pairs.len() {
                assert_eq!(b.azimuth, pairs[i + 1].0.azimuth);
            }
        }
        assert!(close(pairs[23].1.azimuth, 10.0, 1e-9));
    }

    #[test]
    fn orbit_views_look_at_the_target() {
        let k = Intrinsics::default_for(64, 64);
        for az in [0.0, 45.0, 130.0, 275.0] {
            let v = OrbitSpec::default().with_azimuth(az).view(k).unwrap();
            v.pose.validate().unwrap();
            let (px, d) = project(&Vec3::zeros(), &v).unwrap();
            assert!(close(px.x, k.cx, 1e-9) && close(px.y, k.cy, 1e-9));
            assert!(close(d, 2.5, 1e-9));
        }
    }

    proptest::proptest! {
        #[test]
        fn look_at_is_proper_rotation(
            ex in -5.0..5.0f64, ey in -5.0..5.0f64, ez in -5.0..5.0f64,
            tx in -1.0..1.0f64, ty in -1.0..1.0f64, tz in -1.0..1.0f64,
        ) {
            let eye = Vec3::new(ex, ey, ez);
            let target = Vec3::new(tx, ty, tz);
            if let Ok(pose) = look_at(&eye, &target, &Vec3::y()) {
                let r = pose.rotation;
                proptest::prop_assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-9);
                proptest::prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
                // target lies on the optical axis, in front of the camera
                let cam = pose.world_to_camera(&target);
                proptest::prop_assert!(cam.x.abs() < 1e-9 && cam.y.abs() < 1e-9 && cam.z < 0.0);
            }
        }

        #[test]
        fn project_unproject_round_trip(
            px in 0.0..63.0f64, py in 0.0..63.0f64, depth in 0.1..20.0f64,
            az in 0.0..360.0f64, el in -60.0..60.0f64,
        ) {
            let v = OrbitSpec::new(2.5, el, az).unwrap().view(Intrinsics::default_for(64, 64)).unwrap();
            let w = unproject(&Vector2::new(px, py), depth, &v).unwrap();
            let (p2, d2) = project(&w, &v).unwrap();
            proptest::prop_assert!((p2.x - px).abs() < 1e-6 && (p2.y - py).abs() < 1e-6);
            proptest::prop_assert!((d2 - depth).abs() < 1e-6);
        }
    }
}
