//! Call-budget accounting. Remote model calls cost money, so every network
//! attempt that receives a response is counted against an optional hard cap.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("call budget exhausted: {made} of {max} calls used")]
pub struct BudgetExhausted {
    pub max: u64,
    pub made: u64,
}

/// Per-backend call counters with an optional cap on their sum.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallBudget {
    pub max_calls: Option<u64>,
    pub calls_made: BTreeMap<String, u64>,
}

impl CallBudget {
    pub fn new(max_calls: Option<u64>) -> Self {
        Self {
            max_calls,
            calls_made: BTreeMap::new(),
        }
    }

    pub fn total(&self) -> u64 {
        self.calls_made.values().sum()
    }

    pub fn calls(&self, backend_id: &str) -> u64 {
        self.calls_made.get(backend_id).copied().unwrap_or(0)
    }

    /// Increments the counter for `backend_id`, failing once the cap is hit.
    pub fn record_call(&mut self, backend_id: &str) -> Result<(), BudgetExhausted> {
        let made = self.total();
        if let Some(max) = self.max_calls {
            if made >= max {
                return Err(BudgetExhausted { max, made });
            }
        }
        *self.calls_made.entry(backend_id.to_owned()).or_default() += 1;
        Ok(())
    }

    fn release(&mut self, backend_id: &str) {
        if let Some(c) = self.calls_made.get_mut(backend_id) {
            *c = c.saturating_sub(1);
        }
    }
}

/// Thread-safe budget shared by every client of a run. Check-and-increment
/// happens under one lock.
#[derive(Debug, Clone, Default)]
pub struct SharedBudget(Arc<Mutex<CallBudget>>);

impl SharedBudget {
    pub fn new(max_calls: Option<u64>) -> Self {
        Self(Arc::new(Mutex::new(CallBudget::new(max_calls))))
    }

    pub fn snapshot(&self) -> CallBudget {
        self.0.lock().expect("budget lock poisoned").clone()
    }

    pub fn calls(&self, backend_id: &str) -> u64 {
        self.0.lock().expect("budget lock poisoned").calls(backend_id)
    }

    pub fn total(&self) -> u64 {
        self.0.lock().expect("budget lock poisoned").total()
    }

    /// Claims one call ahead of sending. The claim is returned to the budget
    /// unless [`Reservation::commit`] is called, i.e. unless a response came back.
    pub fn reserve(&self, backend_id: &str) -> Result<Reservation, BudgetExhausted> {
        self.0
            .lock()
            .expect("budget lock poisoned")
            .record_call(backend_id)?;
        Ok(Reservation {
            budget: self.clone(),
            backend_id: backend_id.to_owned(),
            committed: false,
        })
    }
}

#[must_use]
pub struct Reservation {
    budget: SharedBudget,
    backend_id: String,
    committed: bool,
}

impl Reservation {
    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Reservation {
    fn drop(&mut self) {
        if !self.committed {
            self.budget
                .0
                .lock()
                .expect("budget lock poisoned")
                .release(&self.backend_id);
        }
    }
}
