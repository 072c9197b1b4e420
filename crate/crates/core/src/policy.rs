//! Named policy registries. Registries are filled before the engine starts
//! and only read afterwards.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::allocation::{self, SpotCheckPolicy, TaAssignmentPolicy};
use crate::error::{Error, Result};
use crate::grading::{self, AggregationPolicy};

pub struct Registry<P: ?Sized> {
    entries: BTreeMap<String, Arc<P>>,
}

impl<P: ?Sized> Default for Registry<P> {
    fn default() -> Self {
        Self { entries: BTreeMap::new() }
    }
}

impl<P: ?Sized> Registry<P> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, policy: Arc<P>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::invalid(format!("policy {name:?} is already registered")));
        }
        self.entries.insert(name, policy);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<Arc<P>> {
        self.entries
            .get(name)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("unknown policy {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arc<P>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }
}

/// All pluggable policies the engine consults.
pub struct PolicySet {
    pub aggregation: Registry<dyn AggregationPolicy>,
    pub spot_check: Registry<dyn SpotCheckPolicy>,
    pub ta_assignment: Registry<dyn TaAssignmentPolicy>,
}

impl Default for PolicySet {
    fn default() -> Self {
        Self {
            aggregation: grading::builtin_aggregation(),
            spot_check: allocation::builtin_spot_check(),
            ta_assignment: allocation::builtin_ta_assignment(),
        }
    }
}

impl PolicySet {
    pub fn check(&self, selection: &crate::domain::Policies) -> Result<()> {
        self.aggregation.get(&selection.aggregation)?;
        self.spot_check.get(&selection.spot_check_selection)?;
        self.ta_assignment.get(&selection.ta_assignment)?;
        Ok(())
    }
}
