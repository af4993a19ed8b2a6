use serde::{Deserialize, Serialize};

use super::ProtocolError;

/// Step budget `T`, round length `E` and the aggregation slots
/// `H = { t in 1..=T : t mod E == 0 }`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundSchedule {
    pub steps: usize,
    pub epochs: usize,
}

impl RoundSchedule {
    pub fn contains(&self, t: usize) -> bool {
        t > 0 && t <= self.steps && t.is_multiple_of(self.epochs)
    }

    pub fn slots(&self) -> impl Iterator<Item = usize> + '_ {
        (1..=self.steps / self.epochs).map(move |r| r * self.epochs)
    }

    /// `|H| = floor(T / E)`
    pub fn num_slots(&self) -> usize {
        self.steps / self.epochs
    }
}

pub fn schedule_aggregations(steps: usize, epochs: usize) -> Result<RoundSchedule, ProtocolError> {
    if epochs == 0 || steps < epochs {
        return Err(ProtocolError::Schedule { steps, epochs });
    }
    Ok(RoundSchedule { steps, epochs })
}
