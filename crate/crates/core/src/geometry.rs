//! Pose and gaze representations, training losses and angular metrics.
//!
//! Gaze convention: camera frame, frontal axis `(0, 0, -1)`. Pitch/yaw map to
//! a direction via `v = (-cos p * sin y, -sin p, -cos p * cos y)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norm threshold below which a vector is degenerate for direction math.
pub const MIN_NORM: f64 = 1e-12;

/// Camera-facing frontal axis.
pub const FRONTAL_AXIS: [f64; 3] = [0.0, 0.0, -1.0];

/// 6-D head pose: axis-angle rotation plus translation in normalized
/// camera-frame units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadPose6D {
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
}

impl HeadPose6D {
    pub fn new(rotation: [f64; 3], translation: [f64; 3]) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Flatten to the 6-vector (rotation, then translation) used by losses
    /// and label normalization.
    pub fn to_vec6(&self) -> [f64; 6] {
        [
            self.rotation[0],
            self.rotation[1],
            self.rotation[2],
            self.translation[0],
            self.translation[1],
            self.translation[2],
        ]
    }

    pub fn from_vec6(v: [f64; 6]) -> Self {
        Self {
            rotation: [v[0], v[1], v[2]],
            translation: [v[3], v[4], v[5]],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec6().iter().all(|x| x.is_finite())
    }

    /// Wrap the axis-angle rotation so its magnitude is at most pi.
    pub fn canonicalize(mut self) -> Self {
        let theta = norm3(&self.rotation);
        if theta > std::f64::consts::PI && theta > MIN_NORM {
            // theta about k equals 2*pi - theta about -k
            let wrapped = theta % (2.0 * std::f64::consts::PI);
            let (angle, sign) = if wrapped > std::f64::consts::PI {
                (2.0 * std::f64::consts::PI - wrapped, -1.0)
            } else {
                (wrapped, 1.0)
            };
            let scale = sign * angle / theta;
            for c in &mut self.rotation {
                *c *= scale;
            }
        }
        self
    }

    /// Direction the head is facing: the rotation applied to the frontal axis.
    pub fn orientation_vector(&self) -> GazeVector {
        GazeVector::new(axis_angle_apply(&self.rotation, &FRONTAL_AXIS))
    }
}

/// 3-D gaze direction (not necessarily unit length).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeVector {
    pub direction: [f64; 3],
}

impl GazeVector {
    pub fn new(direction: [f64; 3]) -> Self {
        Self { direction }
    }

    pub fn norm(&self) -> f64 {
        norm3(&self.direction)
    }

    pub fn is_finite(&self) -> bool {
        self.direction.iter().all(|x| x.is_finite())
    }

    pub fn normalized(&self) -> Result<GazeVector> {
        let n = self.norm();
        if n <= MIN_NORM {
            return Err(Error::DegenerateVector {
                norm: n,
                min: MIN_NORM,
            });
        }
        Ok(GazeVector::new([
            self.direction[0] / n,
            self.direction[1] / n,
            self.direction[2] / n,
        ]))
    }
}

/// Pitch/yaw pair in radians, the interchange format of benchmark label files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PitchYaw {
    pub pitch: f64,
    pub yaw: f64,
}

fn norm3(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross3(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Cosine similarity of two gaze directions, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &GazeVector, b: &GazeVector) -> Result<f64> {
    let na = a.norm();
    let nb = b.norm();
    if na <= MIN_NORM {
        return Err(Error::DegenerateVector {
            norm: na,
            min: MIN_NORM,
        });
    }
    if nb <= MIN_NORM {
        return Err(Error::DegenerateVector {
            norm: nb,
            min: MIN_NORM,
        });
    }
    let c = dot3(&a.direction, &b.direction) / (na * nb);
    Ok(c.clamp(-1.0, 1.0))
}

/// Gaze direction loss `1 - cos(pred, target)`, in `[0, 2]`.
pub fn gaze_loss(pred: &GazeVector, target: &GazeVector) -> Result<f64> {
    Ok(1.0 - cosine_similarity(pred, target)?)
}

/// Analytic gradient of [`gaze_loss`] with respect to `pred`.
pub fn gaze_loss_grad(pred: &GazeVector, target: &GazeVector) -> Result<[f64; 3]> {
    let np = pred.norm();
    let nt = target.norm();
    if np <= MIN_NORM || nt <= MIN_NORM {
        return Err(Error::DegenerateVector {
            norm: np.min(nt),
            min: MIN_NORM,
        });
    }
    let u = [
        pred.direction[0] / np,
        pred.direction[1] / np,
        pred.direction[2] / np,
    ];
    let v = [
        target.direction[0] / nt,
        target.direction[1] / nt,
        target.direction[2] / nt,
    ];
    let c = dot3(&u, &v);
    // d(1 - u.v)/dpred = -(v - (u.v) u) / |pred|
    Ok([
        -(v[0] - c * u[0]) / np,
        -(v[1] - c * u[1]) / np,
        -(v[2] - c * u[2]) / np,
    ])
}

/// Head-pose loss: mean of squared componentwise differences over the 6
/// components.
pub fn headpose_loss(pred: &HeadPose6D, target: &HeadPose6D) -> f64 {
    let p = pred.to_vec6();
    let t = target.to_vec6();
    p.iter()
        .zip(t.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / 6.0
}

/// Analytic gradient of [`headpose_loss`] with respect to `pred`.
pub fn headpose_loss_grad(pred: &HeadPose6D, target: &HeadPose6D) -> [f64; 6] {
    let p = pred.to_vec6();
    let t = target.to_vec6();
    let mut g = [0.0; 6];
    for i in 0..6 {
        g[i] = 2.0 * (p[i] - t[i]) / 6.0;
    }
    g
}

/// Combined objective: unweighted sum of the two losses.
pub fn total_loss(l_hp: f64, l_pg: f64) -> f64 {
    l_hp + l_pg
}

/// Angular error between two directions, in degrees, in `[0, 180]`.
pub fn angular_error_deg(pred: &GazeVector, target: &GazeVector) -> Result<f64> {
    let c = cosine_similarity(pred, target)?;
    Ok(c.acos().to_degrees())
}

/// Map pitch/yaw to a unit gaze direction.
pub fn pitchyaw_to_vector(p: &PitchYaw) -> GazeVector {
    GazeVector::new([
        -p.pitch.cos() * p.yaw.sin(),
        -p.pitch.sin(),
        -p.pitch.cos() * p.yaw.cos(),
    ])
}

/// Recover pitch/yaw from a gaze direction.
pub fn vector_to_pitchyaw(g: &GazeVector) -> Result<PitchYaw> {
    let u = g.normalized()?;
    let [x, y, z] = u.direction;
    Ok(PitchYaw {
        pitch: (-y).asin(),
        yaw: (-x).atan2(-z),
    })
}

/// Boolean mask: true where the gaze lies within `threshold_deg` of the
/// frontal axis (inclusive).
pub fn frontal_mask(gazes: &[GazeVector], threshold_deg: f64) -> Result<Vec<bool>> {
    if !(threshold_deg > 0.0 && threshold_deg <= 180.0) {
        return Err(Error::InvalidInput(format!(
            "frontal threshold must be in (0, 180], got {threshold_deg}"
        )));
    }
    let axis = GazeVector::new(FRONTAL_AXIS);
    gazes
        .iter()
        .map(|g| Ok(angular_error_deg(g, &axis)? <= threshold_deg))
        .collect()
}

/// Rotate a vector by an axis-angle rotation (Rodrigues formula).
pub fn axis_angle_apply(rotation: &[f64; 3], v: &[f64; 3]) -> [f64; 3] {
    let theta = norm3(rotation);
    if theta <= MIN_NORM {
        return *v;
    }
    let k = [
        rotation[0] / theta,
        rotation[1] / theta,
        rotation[2] / theta,
    ];
    let (s, c) = theta.sin_cos();
    let kxv = cross3(&k, v);
    let kdv = dot3(&k, v);
    [
        v[0] * c + kxv[0] * s + k[0] * kdv * (1.0 - c),
        v[1] * c + kxv[1] * s + k[1] * kdv * (1.0 - c),
        v[2] * c + kxv[2] * s + k[2] * kdv * (1.0 - c),
    ]
}

/// Axis-angle vector for the rotation `Ry(yaw) * Rx(-pitch) * Rz(roll)`.
///
/// With this composition the rotated frontal axis reproduces
/// [`pitchyaw_to_vector`] exactly, so yaw/pitch read back from labels match
/// the angles that generated them.
pub fn euler_to_axis_angle(yaw: f64, pitch: f64, roll: f64) -> [f64; 3] {
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = (-pitch).sin_cos();
    let (sr, cr) = roll.sin_cos();
    // R = Ry(yaw) * Rx(-pitch) * Rz(roll), row-major
    let r = [
        [cy * cr + sy * sp * sr, -cy * sr + sy * sp * cr, sy * cp],
        [cp * sr, cp * cr, -sp],
        [-sy * cr + cy * sp * sr, sy * sr + cy * sp * cr, cy * cp],
    ];
    matrix_to_axis_angle(&r)
}

/// Axis-angle vector of a rotation matrix.
pub fn matrix_to_axis_angle(r: &[[f64; 3]; 3]) -> [f64; 3] {
    let trace = r[0][0] + r[1][1] + r[2][2];
    let cos_theta = ((trace - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    if theta <= MIN_NORM {
        return [0.0, 0.0, 0.0];
    }
    if theta < std::f64::consts::PI - 1e-6 {
        let scale = theta / (2.0 * theta.sin());
        [
            (r[2][1] - r[1][2]) * scale,
            (r[0][2] - r[2][0]) * scale,
            (r[1][0] - r[0][1]) * scale,
        ]
    } else {
        // Near pi the off-diagonal difference vanishes; use the diagonal.
        let xx = ((r[0][0] + 1.0) / 2.0).max(0.0).sqrt();
        let yy = ((r[1][1] + 1.0) / 2.0).max(0.0).sqrt();
        let zz = ((r[2][2] + 1.0) / 2.0).max(0.0).sqrt();
        // Fix signs from the largest component.
        let (x, y, z) = if xx >= yy && xx >= zz {
            (
                xx,
                (r[0][1] + r[1][0]) / (4.0 * xx),
                (r[0][2] + r[2][0]) / (4.0 * xx),
            )
        } else if yy >= zz {
            (
                (r[0][1] + r[1][0]) / (4.0 * yy),
                yy,
                (r[1][2] + r[2][1]) / (4.0 * yy),
            )
        } else {
            (
                (r[0][2] + r[2][0]) / (4.0 * zz),
                (r[1][2] + r[2][1]) / (4.0 * zz),
                zz,
            )
        };
        let n = (x * x + y * y + z * z).sqrt().max(MIN_NORM);
        [theta * x / n, theta * y / n, theta * z / n]
    }
}

/// Read a pitch/yaw label file: CSV rows of `frame_id, pitch_rad, yaw_rad`.
pub fn read_pitchyaw_csv(path: &Path) -> Result<Vec<(String, PitchYaw)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        if record.len() < 3 {
            return Err(Error::InvalidInput(format!(
                "pitch/yaw row needs 3 fields, got {}",
                record.len()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::InvalidInput(format!("bad float '{s}': {e}")))
        };
        out.push((
            record[0].to_string(),
            PitchYaw {
                pitch: parse(&record[1])?,
                yaw: parse(&record[2])?,
            },
        ));
    }
    Ok(out)
}
