//! Configuration-change events issued by the network-hosted controller.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MealSize {
    Small,
    Medium,
    Large,
}

impl MealSize {
    pub const ALL: [MealSize; 3] = [MealSize::Small, MealSize::Medium, MealSize::Large];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    /// Default carbohydrate content (grams).
    pub fn default_grams(self) -> f64 {
        match self {
            MealSize::Small => 30.0,
            MealSize::Medium => 60.0,
            MealSize::Large => 90.0,
        }
    }
}

/// One configuration record `Y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConfigRecord {
    Setpoint { value: f64 },
    PidGains { kp: f64, ki: f64, kd: f64 },
    MpcWeights { q: f64, r: f64 },
    MealAnnouncement { size: MealSize, grams: f64 },
    Noop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WmnEvent {
    pub time: f64,
    pub record: ConfigRecord,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WmnEventSchedule {
    events: Vec<WmnEvent>,
}

impl WmnEventSchedule {
    pub fn new(events: Vec<WmnEvent>) -> Result<Self> {
        if let Some(w) = events.windows(2).find(|w| w[1].time < w[0].time) {
            return Err(SimError::Config(format!(
                "event times not ascending: {} after {}",
                w[1].time, w[0].time
            )));
        }
        if events.iter().any(|e| !e.time.is_finite()) {
            return Err(SimError::Config("non-finite event time".into()));
        }
        Ok(Self { events })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn events(&self) -> &[WmnEvent] {
        &self.events
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self.events.iter().map(|e| e.time).collect();
        t.dedup();
        t
    }

    pub fn check_within(&self, span: (f64, f64)) -> Result<()> {
        match self.events.iter().find(|e| e.time < span.0 || e.time > span.1) {
            Some(e) => Err(SimError::Config(format!(
                "event at t = {} outside span [{}, {}]",
                e.time, span.0, span.1
            ))),
            None => Ok(()),
        }
    }

    pub fn at(&self, t: f64) -> impl Iterator<Item = &WmnEvent> {
        self.events.iter().filter(move |e| (e.time - t).abs() < 1e-9)
    }
}
