use chrono::{Datelike, NaiveDateTime, Timelike};

use crate::error::{Result, StnasError};

/// Maps step indices of a regularly sampled series to (time-of-day, day-of-week) slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimeAxis {
    pub interval_minutes: u32,
    /// Slots elapsed since Monday 00:00 at step 0.
    pub origin_slot: usize,
}

impl TimeAxis {
    pub fn new(interval_minutes: u32, start: Option<NaiveDateTime>) -> Result<Self> {
        if interval_minutes == 0 || 1440 % interval_minutes != 0 {
            return Err(StnasError::Data(format!(
                "interval of {interval_minutes} minutes does not divide a day"
            )));
        }
        let origin_slot = start.map_or(0, |s| {
            let minutes = s.weekday().num_days_from_monday() * 1440 + s.hour() * 60 + s.minute();
            (minutes / interval_minutes) as usize
        });
        Ok(Self {
            interval_minutes,
            origin_slot,
        })
    }

    /// N_d, the number of slots per day.
    pub fn steps_per_day(&self) -> usize {
        (1440 / self.interval_minutes) as usize
    }

    pub fn features(&self, step: usize) -> (usize, usize) {
        let per_day = self.steps_per_day();
        let slot = step + self.origin_slot;
        (slot % per_day, (slot / per_day) % 7)
    }
}

/// `(tod, dow)` for `step` with no start timestamp.
pub fn time_features(step: usize, interval_minutes: u32) -> Result<(usize, usize)> {
    Ok(TimeAxis::new(interval_minutes, None)?.features(step))
}
