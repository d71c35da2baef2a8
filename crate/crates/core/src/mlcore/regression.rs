//! Speed/distance line fitting for the pitcher.

use serde::{Deserialize, Serialize};

use super::MlError;

/// Slopes flatter than this cannot be inverted into a motor speed.
pub const INVERT_SLOPE_TOLERANCE: f64 = 1e-9;

/// One launch: motor speed in percent and the measured distance in cm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaunchPoint {
    pub speed: f64,
    pub distance: f64,
}

impl LaunchPoint {
    pub fn new(speed: f64, distance: f64) -> Result<Self, MlError> {
        if !speed.is_finite() || !(0.0..=100.0).contains(&speed) {
            return Err(MlError::OutOfRange {
                field: "speed",
                value: speed,
            });
        }
        if !distance.is_finite() || distance < 0.0 {
            return Err(MlError::OutOfRange {
                field: "distance",
                value: distance,
            });
        }
        Ok(Self { speed, distance })
    }
}

/// `distance = slope * speed + intercept`
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LineModel {
    pub slope: f64,
    pub intercept: f64,
}

impl LineModel {
    pub fn new(slope: f64, intercept: f64) -> Result<Self, MlError> {
        if !slope.is_finite() {
            return Err(MlError::OutOfRange {
                field: "slope",
                value: slope,
            });
        }
        if !intercept.is_finite() {
            return Err(MlError::OutOfRange {
                field: "intercept",
                value: intercept,
            });
        }
        Ok(Self { slope, intercept })
    }

    pub fn predict(&self, speed: f64) -> f64 {
        self.slope * speed + self.intercept
    }
}

/// Least-squares line through `points`.
///
/// The sums are accumulated relative to the first point, which keeps them
/// small (and exact for integer-valued data) so that exactly collinear
/// measurements reproduce their line without rounding.
pub fn fit_line(points: &[LaunchPoint]) -> Result<LineModel, MlError> {
    if points.len() < 2 {
        return Err(MlError::InsufficientData {
            needed: 2,
            have: points.len(),
        });
    }
    let origin = points[0];
    if points.iter().all(|p| p.speed == origin.speed) {
        return Err(MlError::DegenerateX);
    }

    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for p in points {
        let dx = p.speed - origin.speed;
        let dy = p.distance - origin.distance;
        sx += dx;
        sy += dy;
        sxx += dx * dx;
        sxy += dx * dy;
    }
    let denom = n * sxx - sx * sx;
    if denom <= 0.0 {
        return Err(MlError::DegenerateX);
    }
    let slope = (n * sxy - sx * sy) / denom;
    let shifted_intercept = (sy - slope * sx) / n;
    let intercept = origin.distance + shifted_intercept - slope * origin.speed;
    LineModel::new(slope, intercept)
}

/// Mean squared vertical error, in cm².
pub fn loss(points: &[LaunchPoint], line: &LineModel) -> Result<f64, MlError> {
    if points.is_empty() {
        return Err(MlError::InsufficientData { needed: 1, have: 0 });
    }
    let sum: f64 = points
        .iter()
        .map(|p| {
            let r = p.distance - line.predict(p.speed);
            r * r
        })
        .sum();
    Ok(sum / points.len() as f64)
}

/// Motor speed predicted to land the ball at a target distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Inversion {
    pub speed: f64,
    /// The raw solution fell outside `[0, 100]` and was clamped.
    pub clamped: bool,
}

pub fn invert_line(line: &LineModel, target_distance: f64) -> Result<Inversion, MlError> {
    if line.slope.abs() <= INVERT_SLOPE_TOLERANCE || !line.slope.is_finite() {
        return Err(MlError::UninvertibleLine(line.slope));
    }
    if !target_distance.is_finite() {
        return Err(MlError::OutOfRange {
            field: "target_distance",
            value: target_distance,
        });
    }
    let raw = (target_distance - line.intercept) / line.slope;
    let speed = raw.clamp(0.0, 100.0);
    Ok(Inversion {
        speed,
        clamped: speed != raw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(raw: &[(f64, f64)]) -> Vec<LaunchPoint> {
        raw.iter()
            .map(|&(s, d)| LaunchPoint::new(s, d).unwrap())
            .collect()
    }

    /// Normal equations on raw sums, used as an independent check.
    fn normal_equations(points: &[LaunchPoint]) -> (f64, f64) {
        let n = points.len() as f64;
        let sx: f64 = points.iter().map(|p| p.speed).sum();
        let sy: f64 = points.iter().map(|p| p.distance).sum();
        let sxx: f64 = points.iter().map(|p| p.speed * p.speed).sum();
        let sxy: f64 = points.iter().map(|p| p.speed * p.distance).sum();
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        (slope, (sy - slope * sx) / n)
    }

    #[test]
    fn collinear_points_are_exact() {
        let line = fit_line(&pts(&[(0.0, 1.0), (1.0, 3.0), (2.0, 5.0)])).unwrap();
        assert_eq!(line, LineModel::new(2.0, 1.0).unwrap());
    }

    #[test]
    fn three_point_vee() {
        let data = pts(&[(0.0, 0.0), (1.0, 1.0), (2.0, 0.0)]);
        let (slope, intercept) = normal_equations(&data);
        assert_eq!(slope, 0.0);
        assert!((intercept - 1.0 / 3.0).abs() < 1e-15);

        let line = fit_line(&data).unwrap();
        assert!(line.slope.abs() < 1e-15);
        assert!((line.intercept - 1.0 / 3.0).abs() < 1e-15);

        let l = loss(&data, &LineModel::new(0.0, 1.0 / 3.0).unwrap()).unwrap();
        assert!((l - 2.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn fit_errors() {
        assert_eq!(
            fit_line(&pts(&[(5.0, 40.0), (5.0, 60.0)])),
            Err(MlError::DegenerateX)
        );
        assert_eq!(
            fit_line(&pts(&[(5.0, 40.0)])),
            Err(MlError::InsufficientData { needed: 2, have: 1 })
        );
        assert_eq!(
            loss(&[], &LineModel::default()),
            Err(MlError::InsufficientData { needed: 1, have: 0 })
        );
    }

    #[test]
    fn loss_zero_on_line() {
        let l = loss(&pts(&[(1.0, 3.0)]), &LineModel::new(2.0, 1.0).unwrap()).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn inversion() {
        let line = LineModel::new(2.0, -30.0).unwrap();
        assert_eq!(
            invert_line(&line, 100.0).unwrap(),
            Inversion {
                speed: 65.0,
                clamped: false
            }
        );
        assert_eq!(
            invert_line(&line, 300.0).unwrap(),
            Inversion {
                speed: 100.0,
                clamped: true
            }
        );
        assert_eq!(
            invert_line(&line, -100.0).unwrap(),
            Inversion {
                speed: 0.0,
                clamped: true
            }
        );
        assert_eq!(
            invert_line(&LineModel::new(0.0, 5.0).unwrap(), 10.0),
            Err(MlError::UninvertibleLine(0.0))
        );
    }

    #[test]
    fn launch_point_ranges() {
        assert!(LaunchPoint::new(101.0, 1.0).is_err());
        assert!(LaunchPoint::new(50.0, -1.0).is_err());
        assert!(LaunchPoint::new(50.0, f64::INFINITY).is_err());
    }
}
