//! k-nearest-neighbour classification of fruit readings.
//!
//! Distances are Euclidean on features scaled by the fixed plot ranges
//! (`color / 255`, `length / 250`), so adding a sample never rescales the
//! space for the others.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::MlError;

pub const MAX_COLOR: f64 = 255.0;
pub const MAX_LENGTH_MM: f64 = 250.0;
pub const DEFAULT_BOUNDARY_RESOLUTION: usize = 100;

/// One fruit reading: green-channel intensity and caliper length in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeaturePoint {
    pub color: f64,
    pub length: f64,
}

impl FeaturePoint {
    pub fn new(color: f64, length: f64) -> Result<Self, MlError> {
        if !color.is_finite() || !(0.0..=MAX_COLOR).contains(&color) {
            return Err(MlError::OutOfRange {
                field: "color",
                value: color,
            });
        }
        if !length.is_finite() || !(0.0..=MAX_LENGTH_MM).contains(&length) {
            return Err(MlError::OutOfRange {
                field: "length",
                value: length,
            });
        }
        Ok(Self { color, length })
    }

    /// Squared distance in normalized feature space.
    pub fn normalized_distance_sq(&self, other: &FeaturePoint) -> f64 {
        let dc = (self.color - other.color) / MAX_COLOR;
        let dl = (self.length - other.length) / MAX_LENGTH_MM;
        dc * dc + dl * dl
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FruitLabel {
    Apple,
    Banana,
}

impl fmt::Display for FruitLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FruitLabel::Apple => f.write_str("Apple"),
            FruitLabel::Banana => f.write_str("Banana"),
        }
    }
}

impl std::str::FromStr for FruitLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "apple" => Ok(FruitLabel::Apple),
            "banana" => Ok(FruitLabel::Banana),
            other => Err(format!("unknown fruit label `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SampleId(pub u64);

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: SampleId,
    pub point: FeaturePoint,
    pub label: FruitLabel,
}

/// Result of a query: the voted label and the neighbours that voted,
/// nearest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub label: FruitLabel,
    pub neighbors: Vec<SampleId>,
}

fn check_k(dataset: &[Sample], k: usize) -> Result<(), MlError> {
    if dataset.is_empty() {
        return Err(MlError::NoTrainingData);
    }
    if k == 0 || k > dataset.len() {
        return Err(MlError::InvalidK {
            k,
            max: dataset.len(),
        });
    }
    Ok(())
}

/// Classifies `query` by majority vote among its `k` nearest samples.
///
/// Distance ties go to the lower sample id; vote ties go to the label of the
/// single nearest neighbour.
pub fn knn_classify(
    dataset: &[Sample],
    query: FeaturePoint,
    k: usize,
) -> Result<Classification, MlError> {
    check_k(dataset, k)?;

    let mut keyed: Vec<(f64, SampleId, FruitLabel)> = dataset
        .iter()
        .map(|s| (s.point.normalized_distance_sq(&query), s.id, s.label))
        .collect();
    let by_distance_then_id = |a: &(f64, SampleId, FruitLabel),
                               b: &(f64, SampleId, FruitLabel)|
     -> Ordering { a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)) };
    if k < keyed.len() {
        keyed.select_nth_unstable_by(k - 1, by_distance_then_id);
        keyed.truncate(k);
    }
    keyed.sort_unstable_by(by_distance_then_id);

    let apples = keyed
        .iter()
        .filter(|(_, _, l)| *l == FruitLabel::Apple)
        .count();
    let bananas = keyed.len() - apples;
    let label = match apples.cmp(&bananas) {
        Ordering::Greater => FruitLabel::Apple,
        Ordering::Less => FruitLabel::Banana,
        Ordering::Equal => keyed[0].2,
    };

    Ok(Classification {
        label,
        neighbors: keyed.into_iter().map(|(_, id, _)| id).collect(),
    })
}

/// Predicted labels over the plot area `[0,255] x [0,250]`.
///
/// `labels[i][j]` is the prediction at the centre of the cell with colour
/// index `i` and length index `j`, both ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryGrid {
    pub resolution: usize,
    pub labels: Vec<Vec<FruitLabel>>,
}

impl BoundaryGrid {
    pub fn cell_center(resolution: usize, i: usize, j: usize) -> FeaturePoint {
        let res = resolution as f64;
        FeaturePoint {
            color: (i as f64 + 0.5) * MAX_COLOR / res,
            length: (j as f64 + 0.5) * MAX_LENGTH_MM / res,
        }
    }

    /// Number of cells whose label differs from `other`. Grids of different
    /// resolution count as entirely different.
    pub fn changed_cells(&self, other: &BoundaryGrid) -> usize {
        if self.resolution != other.resolution {
            return self.resolution * self.resolution;
        }
        self.labels
            .iter()
            .zip(&other.labels)
            .map(|(a, b)| a.iter().zip(b).filter(|(x, y)| x != y).count())
            .sum()
    }

    pub fn changed_fraction(&self, other: &BoundaryGrid) -> f64 {
        self.changed_cells(other) as f64 / (self.resolution * self.resolution) as f64
    }
}

pub fn decision_boundary(
    dataset: &[Sample],
    k: usize,
    resolution: usize,
) -> Result<BoundaryGrid, MlError> {
    check_k(dataset, k)?;
    if resolution < 2 {
        return Err(MlError::InvalidResolution(resolution));
    }
    let labels = (0..resolution)
        .map(|i| {
            (0..resolution)
                .map(|j| {
                    let center = BoundaryGrid::cell_center(resolution, i, j);
                    knn_classify(dataset, center, k).map(|c| c.label)
                })
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(BoundaryGrid { resolution, labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: u64, color: f64, length: f64, label: FruitLabel) -> Sample {
        Sample {
            id: SampleId(id),
            point: FeaturePoint { color, length },
            label,
        }
    }

    fn three() -> Vec<Sample> {
        vec![
            sample(0, 100.0, 75.0, FruitLabel::Apple),
            sample(1, 200.0, 180.0, FruitLabel::Banana),
            sample(2, 95.0, 70.0, FruitLabel::Apple),
        ]
    }

    #[test]
    fn nearest_single_neighbor() {
        // Scaled squared distances to (98, 72):
        //   id0: (2/255)^2 + (3/250)^2 = 2.055e-4
        //   id1: (102/255)^2 + (108/250)^2 = 0.3466
        //   id2: (3/255)^2 + (2/250)^2 = 2.024e-4  <- nearest
        let c = knn_classify(&three(), FeaturePoint::new(98.0, 72.0).unwrap(), 1).unwrap();
        assert_eq!(c.label, FruitLabel::Apple);
        assert_eq!(c.neighbors, vec![SampleId(2)]);
    }

    #[test]
    fn k_equal_to_dataset_size_is_global_majority() {
        for q in [(0.0, 0.0), (255.0, 250.0), (200.0, 180.0)] {
            let c = knn_classify(&three(), FeaturePoint::new(q.0, q.1).unwrap(), 3).unwrap();
            assert_eq!(c.label, FruitLabel::Apple);
            assert_eq!(c.neighbors.len(), 3);
        }
    }

    #[test]
    fn empty_and_bad_k() {
        let q = FeaturePoint::new(1.0, 1.0).unwrap();
        assert_eq!(knn_classify(&[], q, 1), Err(MlError::NoTrainingData));
        assert_eq!(
            knn_classify(&three(), q, 0),
            Err(MlError::InvalidK { k: 0, max: 3 })
        );
        assert_eq!(
            knn_classify(&three(), q, 4),
            Err(MlError::InvalidK { k: 4, max: 3 })
        );
    }

    #[test]
    fn vote_tie_goes_to_nearest() {
        let data = vec![
            sample(0, 10.0, 10.0, FruitLabel::Banana),
            sample(1, 30.0, 30.0, FruitLabel::Apple),
        ];
        let c = knn_classify(&data, FeaturePoint::new(12.0, 12.0).unwrap(), 2).unwrap();
        assert_eq!(c.label, FruitLabel::Banana);
        let c = knn_classify(&data, FeaturePoint::new(29.0, 29.0).unwrap(), 2).unwrap();
        assert_eq!(c.label, FruitLabel::Apple);
    }

    #[test]
    fn distance_tie_goes_to_lower_id() {
        let data = vec![
            sample(5, 20.0, 20.0, FruitLabel::Banana),
            sample(3, 20.0, 20.0, FruitLabel::Apple),
        ];
        let c = knn_classify(&data, FeaturePoint::new(0.0, 0.0).unwrap(), 1).unwrap();
        assert_eq!(c.neighbors, vec![SampleId(3)]);
        assert_eq!(c.label, FruitLabel::Apple);
    }

    #[test]
    fn feature_point_range_checks() {
        assert!(FeaturePoint::new(256.0, 10.0).is_err());
        assert!(FeaturePoint::new(10.0, -0.1).is_err());
        assert!(FeaturePoint::new(f64::NAN, 10.0).is_err());
        assert!(FeaturePoint::new(255.0, 250.0).is_ok());
    }

    #[test]
    fn single_sample_boundary_is_uniform() {
        let data = vec![sample(0, 30.0, 40.0, FruitLabel::Banana)];
        for res in [2, 7, 10] {
            let grid = decision_boundary(&data, 1, res).unwrap();
            assert!(grid
                .labels
                .iter()
                .flatten()
                .all(|l| *l == FruitLabel::Banana));
            assert_eq!(grid.labels.len(), res);
        }
    }

    #[test]
    fn two_corner_samples_split_by_nearer() {
        let data = vec![
            sample(0, 0.0, 0.0, FruitLabel::Apple),
            sample(1, 255.0, 250.0, FruitLabel::Banana),
        ];
        let grid = decision_boundary(&data, 1, 10).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                // In scaled units the centre is ((i+.5)/10, (j+.5)/10); the
                // corners are (0,0) and (1,1).
                let (u, v) = ((i as f64 + 0.5) / 10.0, (j as f64 + 0.5) / 10.0);
                let to_apple = u * u + v * v;
                let to_banana = (1.0 - u).powi(2) + (1.0 - v).powi(2);
                if (to_apple - to_banana).abs() < 1e-9 {
                    // anti-diagonal: equidistant up to rounding
                    continue;
                }
                let expected = if to_banana < to_apple {
                    FruitLabel::Banana
                } else {
                    FruitLabel::Apple
                };
                assert_eq!(grid.labels[i][j], expected, "cell ({i},{j})");
            }
        }
    }

    #[test]
    fn boundary_matches_pointwise_classification() {
        let grid = decision_boundary(&three(), 1, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let c = knn_classify(&three(), BoundaryGrid::cell_center(4, i, j), 1).unwrap();
                assert_eq!(grid.labels[i][j], c.label);
            }
        }
    }

    #[test]
    fn boundary_rejects_tiny_resolution() {
        assert_eq!(
            decision_boundary(&three(), 1, 1),
            Err(MlError::InvalidResolution(1))
        );
        assert_eq!(decision_boundary(&[], 1, 10), Err(MlError::NoTrainingData));
    }
}
