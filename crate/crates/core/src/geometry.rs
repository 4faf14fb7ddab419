//! Coordinate types, scenario descriptions, and measurement containers.
//!
//! All lengths and times are in meters. Times are converted with the speed of
//! light before they reach this crate.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A position in 2D or 3D Cartesian space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Point(pub Vec<f64>);

impl Point {
    pub fn new(coords: impl Into<Vec<f64>>) -> Self {
        Point(coords.into())
    }

    pub fn zeros(dim: usize) -> Self {
        Point(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|c| c.is_finite())
    }

    pub fn add(&self, other: &Point) -> Result<Point> {
        check_dim(self.dim(), other.dim())?;
        Ok(Point(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect()))
    }

    pub fn sub(&self, other: &Point) -> Result<Point> {
        check_dim(self.dim(), other.dim())?;
        Ok(Point(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect()))
    }
}

impl From<Vec<f64>> for Point {
    fn from(v: Vec<f64>) -> Self {
        Point(v)
    }
}

impl<const N: usize> From<[f64; N]> for Point {
    fn from(v: [f64; N]) -> Self {
        Point(v.to_vec())
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Euclidean distance between two points of equal dimension.
pub fn distance(a: &Point, b: &Point) -> Result<f64> {
    check_dim(a.dim(), b.dim())?;
    Ok(dist_slice(&a.0, &b.0))
}

/// Unchecked distance over raw coordinate slices; callers guarantee equal length.
#[inline]
pub(crate) fn dist_slice(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccessPoint {
    pub id: u32,
    pub position: Point,
    /// Ground-truth antenna position error, used only by the simulator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_position_offset: Option<Point>,
    /// Ground-truth calibration delay in meters, used only by the simulator.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub true_cal_delay: f64,
}

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

impl AccessPoint {
    pub fn new(id: u32, position: impl Into<Point>) -> Self {
        AccessPoint {
            id,
            position: position.into(),
            true_position_offset: None,
            true_cal_delay: 0.0,
        }
    }

    /// Position the signal actually leaves from: nominal plus ground-truth offset.
    pub fn true_position(&self) -> Point {
        match &self.true_position_offset {
            Some(off) if off.dim() == self.position.dim() => {
                Point(self.position.0.iter().zip(&off.0).map(|(a, b)| a + b).collect())
            }
            _ => self.position.clone(),
        }
    }
}

/// Axis-aligned box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: Point,
    pub max: Point,
}

impl BoundingBox {
    pub fn new(min: impl Into<Point>, max: impl Into<Point>) -> Result<Self> {
        let (min, max) = (min.into(), max.into());
        check_dim(min.dim(), max.dim())?;
        if !min.is_finite() || !max.is_finite() || min.0.iter().zip(&max.0).any(|(lo, hi)| lo > hi) {
            return Err(Error::InvalidParameter {
                name: "bounding_box",
                reason: format!("need finite min ≤ max, got {:?} .. {:?}", min.0, max.0),
            });
        }
        Ok(BoundingBox { min, max })
    }

    /// Smallest box enclosing `points`. `None` when `points` is empty.
    pub fn enclosing<'a>(points: impl IntoIterator<Item = &'a Point>) -> Option<Self> {
        let mut iter = points.into_iter();
        let first = iter.next()?;
        let mut min = first.clone();
        let mut max = first.clone();
        for p in iter {
            for (i, &c) in p.0.iter().enumerate().take(min.dim()) {
                min.0[i] = min.0[i].min(c);
                max.0[i] = max.0[i].max(c);
            }
        }
        Some(BoundingBox { min, max })
    }

    /// Box of side `side` centered on `center`.
    pub fn centered(center: &Point, side: f64) -> Self {
        let h = 0.5 * side;
        BoundingBox {
            min: Point(center.0.iter().map(|c| c - h).collect()),
            max: Point(center.0.iter().map(|c| c + h).collect()),
        }
    }

    pub fn dim(&self) -> usize {
        self.min.dim()
    }

    pub fn center(&self) -> Point {
        Point(self.min.0.iter().zip(&self.max.0).map(|(a, b)| 0.5 * (a + b)).collect())
    }

    pub fn extent(&self) -> Vec<f64> {
        self.min.0.iter().zip(&self.max.0).map(|(a, b)| b - a).collect()
    }

    pub fn corners(&self) -> Vec<Point> {
        let d = self.dim();
        (0..(1usize << d))
            .map(|mask| {
                Point(
                    (0..d)
                        .map(|i| {
                            if mask & (1 << i) == 0 {
                                self.min.0[i]
                            } else {
                                self.max.0[i]
                            }
                        })
                        .collect(),
                )
            })
            .collect()
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.dim() == self.dim()
            && p.0
                .iter()
                .zip(self.min.0.iter().zip(&self.max.0))
                .all(|(c, (lo, hi))| *lo <= *c && *c <= *hi)
    }
}

/// AP geography plus the device trajectory for a simulation run.
///
/// The first AP is the reference AP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub dimension: usize,
    pub aps: Vec<AccessPoint>,
    #[serde(default)]
    pub device_positions: Vec<Point>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounding_box: Option<BoundingBox>,
}

impl Scenario {
    pub fn new(dimension: usize, aps: Vec<AccessPoint>, device_positions: Vec<Point>) -> Self {
        Scenario {
            dimension,
            aps,
            device_positions,
            bounding_box: None,
        }
    }

    pub fn reference_ap(&self) -> Option<&AccessPoint> {
        self.aps.first()
    }

    pub fn ap(&self, id: u32) -> Option<&AccessPoint> {
        self.aps.iter().find(|a| a.id == id)
    }

    /// The explicit bounding box if set, otherwise the box enclosing all APs.
    pub fn bounding_box(&self) -> BoundingBox {
        self.bounding_box.clone().unwrap_or_else(|| {
            BoundingBox::enclosing(self.aps.iter().map(|a| &a.position)).unwrap_or_else(|| BoundingBox {
                min: Point::zeros(self.dimension),
                max: Point::zeros(self.dimension),
            })
        })
    }
}

/// A broken [`Scenario`] invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    UnsupportedDimension(usize),
    InsufficientAps { needed: usize, have: usize },
    DuplicateId(u32),
    ApDimension { id: u32, dim: usize },
    ApNotFinite(u32),
    DeviceDimension { index: usize, dim: usize },
    DeviceNotFinite(usize),
    DegenerateBox { axis: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnsupportedDimension(d) => write!(f, "unsupported dimension {d}: must be 2 or 3"),
            Violation::InsufficientAps { needed, .. } => write!(f, "insufficient APs: need ≥ {needed}"),
            Violation::DuplicateId(id) => write!(f, "duplicate id {id}"),
            Violation::ApDimension { id, dim } => write!(f, "AP {id} has dimension {dim}"),
            Violation::ApNotFinite(id) => write!(f, "AP {id} has non-finite coordinates"),
            Violation::DeviceDimension { index, dim } => {
                write!(f, "device position {index} has dimension {dim}")
            }
            Violation::DeviceNotFinite(i) => write!(f, "device position {i} has non-finite coordinates"),
            Violation::DegenerateBox { axis } => {
                write!(f, "bounding box has zero extent along axis {axis}")
            }
        }
    }
}

/// Checks every [`Scenario`] invariant. An empty list means the scenario is valid.
pub fn validate_scenario(s: &Scenario) -> Vec<Violation> {
    let mut out = Vec::new();
    let d = s.dimension;
    if d != 2 && d != 3 {
        out.push(Violation::UnsupportedDimension(d));
    }
    if s.aps.len() < d + 1 {
        out.push(Violation::InsufficientAps {
            needed: d + 1,
            have: s.aps.len(),
        });
    }
    let mut seen = HashSet::new();
    let mut reported = HashSet::new();
    for ap in &s.aps {
        if !seen.insert(ap.id) && reported.insert(ap.id) {
            out.push(Violation::DuplicateId(ap.id));
        }
        let offset_dim_ok = ap.true_position_offset.as_ref().is_none_or(|o| o.dim() == d);
        if ap.position.dim() != d || !offset_dim_ok {
            out.push(Violation::ApDimension {
                id: ap.id,
                dim: ap.position.dim(),
            });
        } else if !ap.position.is_finite()
            || !ap.true_cal_delay.is_finite()
            || ap.true_position_offset.as_ref().is_some_and(|o| !o.is_finite())
        {
            out.push(Violation::ApNotFinite(ap.id));
        }
    }
    for (i, p) in s.device_positions.iter().enumerate() {
        if p.dim() != d {
            out.push(Violation::DeviceDimension { index: i, dim: p.dim() });
        } else if !p.is_finite() {
            out.push(Violation::DeviceNotFinite(i));
        }
    }
    if s.aps.len() >= 2 && s.aps.iter().all(|a| a.position.dim() == d) {
        let bb = s.bounding_box();
        for (axis, e) in bb.extent().iter().enumerate() {
            if !(*e > 0.0) {
                out.push(Violation::DegenerateBox { axis });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub ap_id: u32,
    pub toa: f64,
}

/// One transmission's ToA measurements, relative to the reference AP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToaEpoch {
    pub epoch_id: u64,
    pub reference_ap: u32,
    pub observations: Vec<Observation>,
}

impl ToaEpoch {
    pub fn new(epoch_id: u64, reference_ap: u32, observations: Vec<Observation>) -> Self {
        ToaEpoch {
            epoch_id,
            reference_ap,
            observations,
        }
    }

    /// Number of heard APs.
    pub fn heard_count(&self) -> usize {
        self.observations.len()
    }

    pub fn toa(&self, ap_id: u32) -> Option<f64> {
        self.observations.iter().find(|o| o.ap_id == ap_id).map(|o| o.toa)
    }

    pub fn validate(&self) -> Result<()> {
        if self.observations.len() < 2 {
            return Err(Error::InvalidParameter {
                name: "observations",
                reason: format!(
                    "epoch {} has {} observations, need ≥ 2",
                    self.epoch_id,
                    self.observations.len()
                ),
            });
        }
        let mut seen = HashSet::new();
        for o in &self.observations {
            if !seen.insert(o.ap_id) {
                return Err(Error::InvalidParameter {
                    name: "observations",
                    reason: format!("epoch {} repeats AP {}", self.epoch_id, o.ap_id),
                });
            }
            if !o.toa.is_finite() {
                return Err(Error::InvalidParameter {
                    name: "toa",
                    reason: format!("epoch {} AP {} has non-finite ToA", self.epoch_id, o.ap_id),
                });
            }
            if o.ap_id == self.reference_ap && o.toa != 0.0 {
                return Err(Error::InvalidParameter {
                    name: "toa",
                    reason: format!("epoch {} reference ToA is {} (must be 0)", self.epoch_id, o.toa),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn box_rejects_inverted_or_nonfinite_bounds() {
        assert!(BoundingBox::new([0.0, 0.0], [1.0, 1.0]).is_ok());
        assert!(BoundingBox::new([2.0, 0.0], [1.0, 1.0]).is_err());
        assert!(BoundingBox::new([0.0, f64::NAN], [1.0, 1.0]).is_err());
        assert!(BoundingBox::new([0.0, 0.0], [1.0, 1.0, 1.0]).is_err());
    }

    fn square_scenario() -> Scenario {
        Scenario::new(
            2,
            vec![
                AccessPoint::new(1, [0.0, 0.0]),
                AccessPoint::new(2, [100.0, 0.0]),
                AccessPoint::new(3, [0.0, 100.0]),
                AccessPoint::new(4, [100.0, 100.0]),
            ],
            vec![Point::from([30.0, 40.0])],
        )
    }

    #[test]
    fn distance_examples() {
        let d = |a: [f64; 2], b: [f64; 2]| distance(&a.into(), &b.into()).unwrap();
        assert_eq!(d([0.0, 0.0], [3.0, 4.0]), 5.0);
        assert_eq!(d([30.0, 40.0], [0.0, 0.0]), 50.0);
        assert!((d([30.0, 40.0], [100.0, 0.0]) - 80.62258).abs() < 1e-5);
    }

    #[test]
    fn distance_dimension_mismatch() {
        let r = distance(&Point::from([0.0, 0.0]), &Point::from([0.0, 0.0, 1.0]));
        assert!(matches!(r, Err(Error::DimensionMismatch { expected: 2, got: 3 })));
    }

    #[test]
    fn valid_scenario_has_no_violations() {
        assert!(validate_scenario(&square_scenario()).is_empty());
    }

    #[test]
    fn too_few_aps() {
        let mut s = square_scenario();
        s.aps.swap(1, 3);
        s.aps.truncate(2);
        let v = validate_scenario(&s);
        assert_eq!(v, vec![Violation::InsufficientAps { needed: 3, have: 2 }]);
        assert_eq!(v[0].to_string(), "insufficient APs: need ≥ 3");
    }

    #[test]
    fn duplicate_ids() {
        let mut s = square_scenario();
        s.aps[2].id = 7;
        s.aps[3].id = 7;
        let v = validate_scenario(&s);
        assert_eq!(v, vec![Violation::DuplicateId(7)]);
        assert_eq!(v[0].to_string(), "duplicate id 7");
    }

    #[test]
    fn degenerate_box_and_bad_device() {
        let s = Scenario::new(
            2,
            vec![
                AccessPoint::new(1, [0.0, 0.0]),
                AccessPoint::new(2, [10.0, 0.0]),
                AccessPoint::new(3, [20.0, 0.0]),
            ],
            vec![Point::from([1.0, f64::NAN])],
        );
        let v = validate_scenario(&s);
        assert!(v.contains(&Violation::DegenerateBox { axis: 1 }));
        assert!(v.contains(&Violation::DeviceNotFinite(0)));
    }

    #[test]
    fn epoch_validation() {
        let ok = ToaEpoch::new(
            0,
            1,
            vec![Observation { ap_id: 1, toa: 0.0 }, Observation { ap_id: 2, toa: 3.0 }],
        );
        assert!(ok.validate().is_ok());
        let mut bad = ok.clone();
        bad.observations[0].toa = 1.0;
        assert!(bad.validate().is_err());
        let mut dup = ok.clone();
        dup.observations[1].ap_id = 1;
        assert!(dup.validate().is_err());
    }

    #[test]
    fn box_helpers() {
        let bb = square_scenario().bounding_box();
        assert_eq!(bb.center(), Point::from([50.0, 50.0]));
        assert_eq!(bb.corners().len(), 4);
        assert!(bb.contains(&Point::from([30.0, 40.0])));
    }

    fn pt() -> impl Strategy<Value = Point> {
        prop::collection::vec(-1e3..1e3f64, 2).prop_map(Point)
    }

    proptest! {
        #[test]
        fn distance_is_a_metric(a in pt(), b in pt(), c in pt()) {
            let ab = distance(&a, &b).unwrap();
            let bc = distance(&b, &c).unwrap();
            let ac = distance(&a, &c).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, distance(&b, &a).unwrap());
            prop_assert!(ac <= ab + bc + 1e-9);
            prop_assert_eq!(distance(&a, &a).unwrap(), 0.0);
        }

        #[test]
        fn scenario_json_round_trip(
            aps in prop::collection::vec((pt(), -50.0..50.0f64), 3..8),
            dev in prop::collection::vec(pt(), 0..5),
        ) {
            let aps = aps
                .into_iter()
                .enumerate()
                .map(|(i, (p, delay))| AccessPoint {
                    id: i as u32,
                    position: p.clone(),
                    true_position_offset: Some(Point(vec![delay * 0.01, -delay])),
                    true_cal_delay: delay,
                })
                .collect();
            let s = Scenario::new(2, aps, dev);
            let text = serde_json::to_string(&s).unwrap();
            let back: Scenario = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(back, s);
        }
    }
}
