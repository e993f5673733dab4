//! Scene geometry, vehicle motion, and image-method multipath generation.
//!
//! The scene is an urban intersection: a roadside unit (RSU) on a mast, a
//! connected road user (CRU) driving along a lane, and axis-aligned box
//! buildings. Propagation paths are produced by the image method: the direct
//! line-of-sight path, one ground-reflection path, and one single-bounce path
//! per building wall that faces the RSU, each visibility-checked by
//! segment-box intersection.
//!
//! Angle convention (fixed for the whole crate): azimuth is measured from the
//! local x-axis counter-clockwise in the xy-plane, elevation from the xy-plane
//! toward +z. A unit direction is `[cos(el)cos(az), cos(el)sin(az), sin(el)]`.
//! Angles of arrival are expressed in the RSU local frame, i.e. after undoing
//! the RSU orientation (roll, pitch, yaw applied in that order).

use nalgebra::{Matrix2, Rotation3, SMatrix, Vector2, Vector3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

use crate::SPEED_OF_LIGHT;

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error("CRU position {0:?} lies inside a building")]
    CruInsideBuilding([f64; 3]),
    #[error("wavelength must be positive, got {0}")]
    NonPositiveWavelength(f64),
    #[error("RSU and CRU positions coincide")]
    CoincidentPoints,
    #[error("reflection coefficient magnitude {0} outside (0, 1]")]
    InvalidReflectionCoefficient(f64),
}

/// Fixed pose of the roadside unit: array phase center and orientation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RsuState {
    /// Array phase-center position in the global frame (m).
    pub position: Vector3<f64>,
    /// Euler angles (roll, pitch, yaw), each wrapped into (-pi, pi].
    pub orientation: Vector3<f64>,
}

impl RsuState {
    pub fn new(position: Vector3<f64>, orientation: Vector3<f64>) -> Self {
        Self {
            position,
            orientation: orientation.map(wrap_angle),
        }
    }

    /// Rotation taking local-frame vectors to the global frame.
    pub fn rotation(&self) -> Rotation3<f64> {
        Rotation3::from_euler_angles(self.orientation.x, self.orientation.y, self.orientation.z)
    }
}

/// Kinematic state of the connected road user.
///
/// The simulation operates in a 2D context: the z position stays at the
/// antenna height and the z velocity is zero for the whole run.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CruState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
}

impl CruState {
    /// Planar state at a fixed antenna height.
    pub fn planar(x: f64, y: f64, height: f64, vx: f64, vy: f64) -> Self {
        Self {
            position: Vector3::new(x, y, height),
            velocity: Vector3::new(vx, vy, 0.0),
        }
    }

    /// Stacked 6-vector [x, y, z, vx, vy, vz].
    pub fn as_state_vector(&self) -> SMatrix<f64, 6, 1> {
        SMatrix::<f64, 6, 1>::from_column_slice(&[
            self.position.x,
            self.position.y,
            self.position.z,
            self.velocity.x,
            self.velocity.y,
            self.velocity.z,
        ])
    }

    pub fn from_state_vector(s: &SMatrix<f64, 6, 1>) -> Self {
        Self {
            position: Vector3::new(s[0], s[1], s[2]),
            velocity: Vector3::new(s[3], s[4], s[5]),
        }
    }
}

/// Discrete constant-velocity motion model with 2D acceleration noise.
///
/// `F` advances positions by `T * velocity`; `G` maps a 2-vector of x/y
/// acceleration noise into the state (position rows `T^2/2`, velocity rows
/// `T`, z rows zero) so the state noise covariance is `G Q G^T` with
/// `Q = sigma_a^2 I_2`.
#[derive(Debug, Clone, Copy)]
pub struct MotionModel {
    pub f: SMatrix<f64, 6, 6>,
    pub g: SMatrix<f64, 6, 2>,
    pub q: Matrix2<f64>,
    /// Step period (s).
    pub t: f64,
    /// Acceleration noise standard deviation (m/s^2).
    pub sigma_a: f64,
}

impl MotionModel {
    pub fn new(t: f64, sigma_a: f64) -> Self {
        let mut f = SMatrix::<f64, 6, 6>::identity();
        for i in 0..3 {
            f[(i, i + 3)] = t;
        }
        let mut g = SMatrix::<f64, 6, 2>::zeros();
        g[(0, 0)] = t * t / 2.0;
        g[(1, 1)] = t * t / 2.0;
        g[(3, 0)] = t;
        g[(4, 1)] = t;
        let q = Matrix2::identity() * sigma_a * sigma_a;
        Self { f, g, q, t, sigma_a }
    }

    /// State noise covariance `G Q G^T`.
    pub fn state_noise_cov(&self) -> SMatrix<f64, 6, 6> {
        self.g * self.q * self.g.transpose()
    }
}

/// Advances the CRU state one step: `F s + G n`.
///
/// With `noise_draw = None` this is the noiseless mean propagation. The z
/// position and z velocity are untouched by construction (zero z rows in `G`,
/// zero z velocity in the 2D contract).
pub fn propagate(state: &CruState, model: &MotionModel, noise_draw: Option<Vector2<f64>>) -> CruState {
    let mut s = model.f * state.as_state_vector();
    if let Some(n) = noise_draw {
        s += model.g * n;
    }
    CruState::from_state_vector(&s)
}

/// Axis-aligned box building.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Building {
    /// Box center (m).
    pub center: Vector3<f64>,
    /// Full side lengths (m).
    pub extents: Vector3<f64>,
}

impl Building {
    pub fn new(center: Vector3<f64>, extents: Vector3<f64>) -> Self {
        Self { center, extents }
    }

    pub fn min(&self) -> Vector3<f64> {
        self.center - self.extents / 2.0
    }

    pub fn max(&self) -> Vector3<f64> {
        self.center + self.extents / 2.0
    }

    /// Closed-box membership (surface counts as inside).
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let lo = self.min();
        let hi = self.max();
        (0..3).all(|i| p[i] >= lo[i] && p[i] <= hi[i])
    }

    /// Parametric interval [t0, t1] where the segment `a + t (b - a)`,
    /// t in [0, 1], lies inside the box. Returns `None` when the segment
    /// misses the box entirely.
    fn segment_overlap(&self, a: &Vector3<f64>, b: &Vector3<f64>) -> Option<(f64, f64)> {
        let lo = self.min();
        let hi = self.max();
        let d = b - a;
        let mut t0 = 0.0f64;
        let mut t1 = 1.0f64;
        for i in 0..3 {
            if d[i].abs() < 1e-15 {
                if a[i] < lo[i] || a[i] > hi[i] {
                    return None;
                }
            } else {
                let mut ta = (lo[i] - a[i]) / d[i];
                let mut tb = (hi[i] - a[i]) / d[i];
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                t0 = t0.max(ta);
                t1 = t1.min(tb);
                if t0 > t1 {
                    return None;
                }
            }
        }
        Some((t0, t1))
    }
}

/// A segment is blocked when it traverses a box interior for a non-degenerate
/// parameter interval; endpoint or edge grazes do not count, so a reflected
/// leg ending on its own wall is not self-blocked.
fn segment_blocked(a: &Vector3<f64>, b: &Vector3<f64>, buildings: &[Building]) -> bool {
    const MIN_OVERLAP: f64 = 1e-9;
    buildings
        .iter()
        .filter_map(|bld| bld.segment_overlap(a, b))
        .any(|(t0, t1)| t1 - t0 > MIN_OVERLAP)
}

/// Static scene: buildings, ground plane z = 0, and frequency-flat complex
/// reflection coefficients per surface class.
#[derive(Debug, Clone)]
pub struct SceneGeometry {
    pub buildings: Vec<Building>,
    pub wall_reflection: Complex64,
    pub ground_reflection: Complex64,
}

impl SceneGeometry {
    pub fn new(
        buildings: Vec<Building>,
        wall_reflection: Complex64,
        ground_reflection: Complex64,
    ) -> Result<Self, SceneError> {
        for g in [wall_reflection, ground_reflection] {
            let m = g.norm();
            if !(m > 0.0 && m <= 1.0) {
                return Err(SceneError::InvalidReflectionCoefficient(m));
            }
        }
        Ok(Self {
            buildings,
            wall_reflection,
            ground_reflection,
        })
    }

    /// The four-building intersection used by the default scenario:
    /// buildings centered at [±45, ±45, 15] m with 50 x 50 x 30 m extents,
    /// wall reflection 0.6 exp(j pi), ground reflection 0.7 exp(j pi).
    pub fn intersection_default() -> Self {
        let buildings = [-45.0, 45.0]
            .iter()
            .flat_map(|&x| {
                [-45.0, 45.0].map(|y| {
                    Building::new(Vector3::new(x, y, 15.0), Vector3::new(50.0, 50.0, 30.0))
                })
            })
            .collect();
        Self::new(
            buildings,
            Complex64::new(-0.6, 0.0),
            Complex64::new(-0.7, 0.0),
        )
        .expect("default coefficients are valid")
    }
}

/// One propagation path as seen from the RSU.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PathParams {
    /// Complex amplitude gain (free-space loss times reflection losses).
    pub gain: Complex64,
    /// One-way time of arrival (s), strictly positive.
    pub toa: f64,
    /// Azimuth of arrival in the RSU local frame, (-pi, pi].
    pub aoa_az: f64,
    /// Elevation of arrival in the RSU local frame, [-pi/2, pi/2].
    pub aoa_el: f64,
    /// Number of reflections along the path.
    pub bounce_count: u8,
    pub is_los: bool,
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut x = a.rem_euclid(2.0 * PI);
    if x > PI {
        x -= 2.0 * PI;
    }
    x
}

/// Azimuth/elevation of a (not necessarily unit) direction vector.
pub fn direction_to_angles(v: &Vector3<f64>) -> (f64, f64) {
    let az = v.y.atan2(v.x);
    let el = v.z.atan2(v.x.hypot(v.y));
    (az, el)
}

/// Unit direction for an azimuth/elevation pair.
pub fn angles_to_direction(az: f64, el: f64) -> Vector3<f64> {
    Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
}

/// Deterministic LoS parameter triple (toa without clock bias, azimuth,
/// elevation in the RSU local frame) for a hypothetical CRU position. Used
/// for gate centering and Jacobians.
pub fn los_geometry(rsu: &RsuState, cru_position: &Vector3<f64>) -> Result<(f64, f64, f64), SceneError> {
    let v = cru_position - rsu.position;
    let d = v.norm();
    if d < 1e-12 {
        return Err(SceneError::CoincidentPoints);
    }
    let v_local = rsu.rotation().inverse() * v;
    let (az, el) = direction_to_angles(&v_local);
    Ok((d / SPEED_OF_LIGHT, az, el))
}

/// Inverse of [`los_geometry`]: the global position at one-way range
/// `range_m` along the local-frame direction (az, el) from the RSU.
pub fn back_project(rsu: &RsuState, range_m: f64, az: f64, el: f64) -> Vector3<f64> {
    rsu.position + rsu.rotation() * (angles_to_direction(az, el) * range_m)
}

struct WallSpec {
    /// A point on the wall plane (face center).
    point: Vector3<f64>,
    /// Outward unit normal.
    normal: Vector3<f64>,
    /// Indices of the two in-plane axes and their bounds.
    bounds: [(usize, f64, f64); 2],
}

fn side_walls(b: &Building) -> Vec<WallSpec> {
    let lo = b.min();
    let hi = b.max();
    let mut walls = Vec::with_capacity(4);
    for (axis, other) in [(0usize, 1usize), (1, 0)] {
        for (coord, sign) in [(lo[axis], -1.0), (hi[axis], 1.0)] {
            let mut point = b.center;
            point[axis] = coord;
            let mut normal = Vector3::zeros();
            normal[axis] = sign;
            walls.push(WallSpec {
                point,
                normal,
                bounds: [(other, lo[other], hi[other]), (2, lo[2], hi[2])],
            });
        }
    }
    walls
}

/// Generates the multipath set for one RSU/CRU placement by the image method:
/// LoS (when unblocked), one ground bounce, and one single bounce per
/// RSU-facing building wall, all visibility-checked. Gains follow
/// `(lambda / (4 pi d)) * Gamma^bounces * exp(-j 2 pi d / lambda)` with `d`
/// the total path length; ToA is `d / c`. Paths are sorted by ToA ascending,
/// with the LoS first when present.
pub fn generate_paths(
    geometry: &SceneGeometry,
    rsu: &RsuState,
    cru: &CruState,
    wavelength: f64,
) -> Result<Vec<PathParams>, SceneError> {
    if wavelength <= 0.0 {
        return Err(SceneError::NonPositiveWavelength(wavelength));
    }
    if geometry.buildings.iter().any(|b| b.contains(&cru.position)) {
        return Err(SceneError::CruInsideBuilding(cru.position.into()));
    }
    let rot_inv = rsu.rotation().inverse();
    let mut paths = Vec::new();

    let mut push_path = |first_leg_dir: Vector3<f64>, d: f64, gamma: Complex64, bounces: u8| {
        let v_local = rot_inv * first_leg_dir;
        let (az, el) = direction_to_angles(&v_local);
        let amplitude = wavelength / (4.0 * PI * d);
        let phase = Complex64::from_polar(1.0, -2.0 * PI * d / wavelength);
        let gamma_total = match bounces {
            0 => Complex64::new(1.0, 0.0),
            _ => gamma.powu(bounces as u32),
        };
        paths.push(PathParams {
            gain: amplitude * gamma_total * phase,
            toa: d / SPEED_OF_LIGHT,
            aoa_az: az,
            aoa_el: el,
            bounce_count: bounces,
            is_los: bounces == 0,
        });
    };

    // LoS
    if !segment_blocked(&rsu.position, &cru.position, &geometry.buildings) {
        let v = cru.position - rsu.position;
        push_path(v, v.norm(), Complex64::new(1.0, 0.0), 0);
    }

    // Ground bounce: mirror the CRU in the plane z = 0.
    if rsu.position.z > 0.0 && cru.position.z > 0.0 {
        let mirror = Vector3::new(cru.position.x, cru.position.y, -cru.position.z);
        let t = rsu.position.z / (rsu.position.z + cru.position.z);
        let p = rsu.position + (mirror - rsu.position) * t;
        let on_street = !geometry
            .buildings
            .iter()
            .any(|b| p.x >= b.min().x && p.x <= b.max().x && p.y >= b.min().y && p.y <= b.max().y);
        if on_street
            && !segment_blocked(&rsu.position, &p, &geometry.buildings)
            && !segment_blocked(&p, &cru.position, &geometry.buildings)
        {
            let d = (p - rsu.position).norm() + (cru.position - p).norm();
            push_path(p - rsu.position, d, geometry.ground_reflection, 1);
        }
    }

    // Single wall bounces.
    for b in &geometry.buildings {
        for wall in side_walls(b) {
            let rsu_side = (rsu.position - wall.point).dot(&wall.normal);
            let cru_side = (cru.position - wall.point).dot(&wall.normal);
            if rsu_side <= 0.0 || cru_side <= 0.0 {
                continue;
            }
            let mirror = cru.position - wall.normal * (2.0 * cru_side);
            let denom = (mirror - rsu.position).dot(&wall.normal);
            if denom.abs() < 1e-15 {
                continue;
            }
            let t = (wall.point - rsu.position).dot(&wall.normal) / denom;
            if !(t > 0.0 && t < 1.0) {
                continue;
            }
            let p = rsu.position + (mirror - rsu.position) * t;
            let inside_face = wall
                .bounds
                .iter()
                .all(|&(axis, lo, hi)| p[axis] >= lo && p[axis] <= hi);
            if !inside_face {
                continue;
            }
            if segment_blocked(&rsu.position, &p, &geometry.buildings)
                || segment_blocked(&p, &cru.position, &geometry.buildings)
            {
                continue;
            }
            let d = (p - rsu.position).norm() + (cru.position - p).norm();
            push_path(p - rsu.position, d, geometry.wall_reflection, 1);
        }
    }

    paths.sort_by(|a, b| {
        b.is_los
            .cmp(&a.is_los)
            .then(a.toa.partial_cmp(&b.toa).expect("finite toa"))
    });
    Ok(paths)
}
