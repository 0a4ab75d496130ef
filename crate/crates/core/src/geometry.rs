//! Scene geometry: sensor and source positions, the search area and the
//! propagation delays every other module is built on.

use crate::error::{Error, Result};

/// Speed of light in vacuum, meters per second.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// A point in the plane, meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance_to(&self, other: &Position) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// Axis-aligned search rectangle. The upper edges are open, so a lattice of
/// spacing `d` anchored at the origin covers a `W x H` area with exactly
/// `(W/d) * (H/d)` points when the edges are multiples of `d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchArea {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl SearchArea {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self { x_min, y_min, x_max, y_max }
    }

    /// Square of side `side` centered at the origin.
    pub fn centered_square(side: f64) -> Self {
        let h = side / 2.0;
        Self::new(-h, -h, h, h)
    }

    pub fn contains(&self, p: &Position) -> bool {
        p.x >= self.x_min && p.x < self.x_max && p.y >= self.y_min && p.y < self.y_max
    }

    pub fn corners(&self) -> [Position; 4] {
        [
            Position::new(self.x_min, self.y_min),
            Position::new(self.x_max, self.y_min),
            Position::new(self.x_min, self.y_max),
            Position::new(self.x_max, self.y_max),
        ]
    }

    pub fn diagonal(&self) -> f64 {
        (self.x_max - self.x_min).hypot(self.y_max - self.y_min)
    }

    /// Nearest point of the area; the open upper edges map to the largest
    /// representable coordinate below them.
    pub fn clamp(&self, p: &Position) -> Position {
        Position::new(p.x.clamp(self.x_min, self.x_max.next_down()), p.y.clamp(self.y_min, self.y_max.next_down()))
    }

    /// Largest distance from `p` to any point of the rectangle.
    pub fn max_distance_from(&self, p: &Position) -> f64 {
        self.corners().iter().map(|c| c.distance_to(p)).fold(0.0, f64::max)
    }
}

/// Sensors, sources and the delay horizon of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub sensors: Vec<Position>,
    pub sources: Vec<Position>,
    pub search_area: SearchArea,
    pub tau_max: f64,
    pub speed_of_light: f64,
}

impl Scenario {
    /// Builds a scenario with the default delay horizon for sampling rate `fs`.
    pub fn new(sensors: Vec<Position>, sources: Vec<Position>, search_area: SearchArea, fs: f64) -> Self {
        let tau_max = default_tau_max(&sensors, &search_area, SPEED_OF_LIGHT, fs);
        Self { sensors, sources, search_area, tau_max, speed_of_light: SPEED_OF_LIGHT }
    }

    pub fn num_sensors(&self) -> usize {
        self.sensors.len()
    }

    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }

    /// Delay from `p` to sensor `l`.
    pub fn delay(&self, p: &Position, l: usize) -> f64 {
        propagation_delay(p, &self.sensors[l], self.speed_of_light)
    }

    /// Largest delay between any sensor and any point of the search area.
    pub fn max_in_area_delay(&self) -> f64 {
        self.sensors
            .iter()
            .map(|s| self.search_area.max_distance_from(s) / self.speed_of_light)
            .fold(0.0, f64::max)
    }
}

/// `‖p − sensor‖₂ / c`.
pub fn propagation_delay(p: &Position, sensor: &Position, c: f64) -> f64 {
    p.distance_to(sensor) / c
}

/// Delay horizon covering every in-area arrival: (area diagonal + largest
/// sensor-to-area distance) / c, rounded up to a whole sample period.
pub fn default_tau_max(sensors: &[Position], area: &SearchArea, c: f64, fs: f64) -> f64 {
    let reach = sensors.iter().map(|s| area.max_distance_from(s)).fold(0.0, f64::max);
    let raw = (area.diagonal() + reach) / c;
    (raw * fs - 1e-9).ceil().max(1.0) / fs
}

pub fn validate_scenario(s: &Scenario) -> Result<()> {
    if s.sensors.is_empty() || s.sources.is_empty() {
        return Err(Error::InvalidParameter("scenario needs at least one sensor and one source".into()));
    }
    if !(s.speed_of_light > 0.0) {
        return Err(Error::InvalidParameter("speed of light must be positive".into()));
    }
    if let Some(p) = s.sensors.iter().chain(&s.sources).find(|p| !p.is_finite()) {
        return Err(Error::InvalidParameter(format!("non-finite position ({}, {})", p.x, p.y)));
    }
    for (index, p) in s.sources.iter().enumerate() {
        if !s.search_area.contains(p) {
            return Err(Error::SourceOutsideSearchArea { index, x: p.x, y: p.y });
        }
    }
    let required = s.max_in_area_delay();
    if s.tau_max < required {
        return Err(Error::TauMaxTooSmall { tau_max: s.tau_max, required });
    }
    Ok(())
}

/// Source and sensors of the default single-source scene.
pub fn reference_scene(fs: f64) -> Scenario {
    Scenario::new(
        vec![
            Position::new(40.0, -55.0),
            Position::new(-45.0, -40.0),
            Position::new(-50.0, 55.0),
            Position::new(60.0, 60.0),
            Position::new(5.0, 0.0),
        ],
        vec![Position::new(20.0, 30.0)],
        SearchArea::centered_square(200.0),
        fs,
    )
}

/// The square-array scene used for the recovery-window experiment.
pub fn recovery_window_scene(fs: f64) -> Scenario {
    Scenario::new(
        vec![
            Position::new(40.0, -40.0),
            Position::new(-40.0, -40.0),
            Position::new(-40.0, 40.0),
            Position::new(40.0, 40.0),
            Position::new(0.0, 0.0),
        ],
        vec![Position::new(20.0, 30.0)],
        SearchArea::centered_square(200.0),
        fs,
    )
}
