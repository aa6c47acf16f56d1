use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One experience tuple `(x, a, r, x')`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
}

impl Transition {
    pub fn new(state: Vec<f64>, action: usize, reward: f64, next_state: Vec<f64>) -> Self {
        Transition {
            state,
            action,
            reward,
            next_state,
        }
    }

    pub fn validate(&self, num_actions: usize) -> Result<()> {
        if self.action >= num_actions {
            return Err(Error::input(format!(
                "action index {} out of range for {num_actions} actions",
                self.action
            )));
        }
        if self.state.len() != self.next_state.len() {
            return Err(Error::input("state and next state dimensions differ"));
        }
        if !self.reward.is_finite() || self.state.iter().chain(&self.next_state).any(|v| !v.is_finite()) {
            return Err(Error::input("transition contains a non-finite entry"));
        }
        Ok(())
    }
}
