//! Synthetic scenario generators.
//!
//! These are analogues of the kinds of deployments the engine targets (an
//! indoor track ringed by anchors, a metropolitan cell layout); they are not
//! reproductions of any measured dataset.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{AccessPoint, BoundingBox, Point, Scenario};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Generator {
    /// 15 anchors around a 120 m × 80 m hall, device circling an oval track.
    GoKart {
        #[serde(default = "default_laps_epochs")]
        epochs: usize,
        #[serde(default = "default_speed")]
        speed: f64,
        #[serde(default = "default_dt")]
        dt: f64,
    },
    /// Jittered grid of cell sites; the device visits random outdoor spots.
    Metro {
        #[serde(default = "default_metro_aps")]
        n_aps: usize,
        #[serde(default = "default_spacing")]
        spacing: f64,
        #[serde(default = "default_locations")]
        locations: usize,
    },
    /// Uniformly random anchors and locations in a square.
    Random {
        n_aps: usize,
        side: f64,
        #[serde(default = "default_locations")]
        locations: usize,
    },
}

fn default_laps_epochs() -> usize {
    600
}
fn default_speed() -> f64 {
    8.0
}
fn default_dt() -> f64 {
    0.1
}
fn default_metro_aps() -> usize {
    16
}
fn default_spacing() -> f64 {
    400.0
}
fn default_locations() -> usize {
    14
}

impl Generator {
    pub fn generate(&self, seed: u64) -> Scenario {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match *self {
            Generator::GoKart { epochs, speed, dt } => go_kart(epochs, speed, dt),
            Generator::Metro {
                n_aps,
                spacing,
                locations,
            } => metro(n_aps, spacing, locations, &mut rng),
            Generator::Random { n_aps, side, locations } => random_scenario(n_aps, side, locations, &mut rng),
        }
    }
}

/// Anchors every 20 m along the hall walls; one lap of the oval is about 280 m.
pub fn go_kart(epochs: usize, speed: f64, dt: f64) -> Scenario {
    let mut aps = Vec::new();
    let wall = [
        [0.0, 0.0],
        [30.0, 0.0],
        [60.0, 0.0],
        [90.0, 0.0],
        [120.0, 0.0],
        [120.0, 27.0],
        [120.0, 54.0],
        [120.0, 80.0],
        [90.0, 80.0],
        [60.0, 80.0],
        [30.0, 80.0],
        [0.0, 80.0],
        [0.0, 54.0],
        [0.0, 27.0],
        [60.0, 40.0],
    ];
    for (i, p) in wall.iter().enumerate() {
        aps.push(AccessPoint::new(i as u32 + 1, *p));
    }
    let track = oval_track([60.0, 40.0], 45.0, 28.0, speed, dt, epochs);
    let mut s = Scenario::new(2, aps, track);
    s.bounding_box = Some(BoundingBox::new([0.0, 0.0], [120.0, 80.0]).expect("2D"));
    s
}

/// Points along an ellipse traversed at constant speed (arc length), one per `dt`.
pub fn oval_track(center: [f64; 2], rx: f64, ry: f64, speed: f64, dt: f64, n: usize) -> Vec<Point> {
    // Tabulate arc length over the parameter, then invert.
    let samples = 4096;
    let mut arc = Vec::with_capacity(samples + 1);
    let mut acc = 0.0;
    arc.push(0.0);
    let at = |t: f64| [center[0] + rx * t.cos(), center[1] + ry * t.sin()];
    for k in 1..=samples {
        let a = at(2.0 * std::f64::consts::PI * (k - 1) as f64 / samples as f64);
        let b = at(2.0 * std::f64::consts::PI * k as f64 / samples as f64);
        acc += ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        arc.push(acc);
    }
    let lap = acc;
    (0..n)
        .map(|i| {
            let s = (i as f64 * speed * dt) % lap;
            let k = arc.partition_point(|&v| v <= s).clamp(1, samples);
            let frac = (s - arc[k - 1]) / (arc[k] - arc[k - 1]);
            let t = 2.0 * std::f64::consts::PI * ((k - 1) as f64 + frac) / samples as f64;
            Point::from(at(t))
        })
        .collect()
}

pub fn metro<R: Rng + ?Sized>(n_aps: usize, spacing: f64, locations: usize, rng: &mut R) -> Scenario {
    let cols = (n_aps as f64).sqrt().ceil() as usize;
    let aps: Vec<AccessPoint> = (0..n_aps)
        .map(|i| {
            let (r, c) = (i / cols, i % cols);
            let jitter = |rng: &mut R| (rng.random::<f64>() - 0.5) * 0.4 * spacing;
            let x = c as f64 * spacing + jitter(rng);
            let y = r as f64 * spacing + jitter(rng);
            AccessPoint::new(i as u32 + 1, [x, y])
        })
        .collect();
    let rows = n_aps.div_ceil(cols);
    let w = (cols - 1) as f64 * spacing;
    let h = (rows.max(2) - 1) as f64 * spacing;
    let device_positions = (0..locations)
        .map(|_| {
            Point::from([
                0.15 * w + 0.7 * w * rng.random::<f64>(),
                0.15 * h + 0.7 * h * rng.random::<f64>(),
            ])
        })
        .collect();
    // reference AP: the site nearest the middle of the layout
    let mut aps = aps;
    let mid = [0.5 * w, 0.5 * h];
    let best = (0..aps.len())
        .min_by(|&a, &b| {
            let da = crate::geometry::dist_slice(&aps[a].position.0, &mid);
            let db = crate::geometry::dist_slice(&aps[b].position.0, &mid);
            da.total_cmp(&db)
        })
        .unwrap_or(0);
    aps.swap(0, best);
    Scenario::new(2, aps, device_positions)
}

pub fn random_scenario<R: Rng + ?Sized>(n_aps: usize, side: f64, locations: usize, rng: &mut R) -> Scenario {
    let aps = (0..n_aps)
        .map(|i| AccessPoint::new(i as u32 + 1, [rng.random::<f64>() * side, rng.random::<f64>() * side]))
        .collect();
    let device_positions = (0..locations)
        .map(|_| Point::from([rng.random::<f64>() * side, rng.random::<f64>() * side]))
        .collect();
    Scenario::new(2, aps, device_positions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{distance, validate_scenario};

    #[test]
    fn go_kart_layout() {
        let s = go_kart(50, 8.0, 0.1);
        assert_eq!(s.aps.len(), 15);
        assert!(validate_scenario(&s).is_empty());
        let bb = s.bounding_box();
        assert!(s.device_positions.iter().all(|p| bb.contains(p)));
        for w in s.device_positions.windows(2) {
            let step = distance(&w[0], &w[1]).unwrap();
            assert!((step - 0.8).abs() < 0.01, "{step}");
        }
    }

    #[test]
    fn metro_and_random_are_valid_and_seeded() {
        let g = Generator::Metro {
            n_aps: 12,
            spacing: 300.0,
            locations: 14,
        };
        let a = g.generate(3);
        assert_eq!(a, g.generate(3));
        assert!(validate_scenario(&a).is_empty());
        assert_eq!(a.device_positions.len(), 14);
        let r = Generator::Random {
            n_aps: 6,
            side: 100.0,
            locations: 3,
        }
        .generate(1);
        assert!(validate_scenario(&r).is_empty());
    }
}
