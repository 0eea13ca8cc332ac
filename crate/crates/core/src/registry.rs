//! Component registry.
//!
//! Components are named, versioned bundles of optional lifecycle callbacks.
//! Every known component is registered; only those with
//! `<name>_enabled=.true.` contribute callbacks. Per-stage call order follows
//! `init_ordering`, `timestep_ordering` and `finalise_ordering` when set,
//! registration order otherwise.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::options::OptionsDatabase;
use crate::state::ModelState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Init,
    Timestep,
    Finalise,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Init, Stage::Timestep, Stage::Finalise];

    pub fn ordering_key(self) -> &'static str {
        match self {
            Stage::Init => "init_ordering",
            Stage::Timestep => "timestep_ordering",
            Stage::Finalise => "finalise_ordering",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Init => "initialisation",
            Stage::Timestep => "timestep",
            Stage::Finalise => "finalisation",
        })
    }
}

pub type Callback = Arc<dyn Fn(&mut ModelState) -> Result<()> + Send + Sync>;

#[derive(Clone)]
pub struct ComponentDescriptor {
    pub name: String,
    /// Stored and reported, never interpreted.
    pub version: String,
    pub init: Option<Callback>,
    pub timestep: Option<Callback>,
    pub finalise: Option<Callback>,
}

impl ComponentDescriptor {
    pub fn new(name: impl Into<String>, version: impl Into<String>) -> Self {
        ComponentDescriptor {
            name: name.into(),
            version: version.into(),
            init: None,
            timestep: None,
            finalise: None,
        }
    }

    pub fn on_init(mut self, f: impl Fn(&mut ModelState) -> Result<()> + Send + Sync + 'static) -> Self {
        self.init = Some(Arc::new(f));
        self
    }

    pub fn on_timestep(
        mut self,
        f: impl Fn(&mut ModelState) -> Result<()> + Send + Sync + 'static,
    ) -> Self {
        self.timestep = Some(Arc::new(f));
        self
    }

    pub fn on_finalise(
        mut self,
        f: impl Fn(&mut ModelState) -> Result<()> + Send + Sync + 'static,
    ) -> Self {
        self.finalise = Some(Arc::new(f));
        self
    }

    pub fn callback(&self, stage: Stage) -> Option<&Callback> {
        match stage {
            Stage::Init => self.init.as_ref(),
            Stage::Timestep => self.timestep.as_ref(),
            Stage::Finalise => self.finalise.as_ref(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::Registration("component name must not be empty".into()));
        }
        if Stage::ALL.iter().all(|&s| self.callback(s).is_none()) {
            return Err(Error::Registration(format!(
                "component `{}` supplies no callbacks",
                self.name
            )));
        }
        Ok(())
    }
}

impl fmt::Debug for ComponentDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ComponentDescriptor")
            .field("name", &self.name)
            .field("version", &self.version)
            .field("init", &self.init.is_some())
            .field("timestep", &self.timestep.is_some())
            .field("finalise", &self.finalise.is_some())
            .finish()
    }
}

/// Summary row for listings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentInfo {
    pub name: String,
    pub version: String,
    pub enabled: bool,
    pub stages: Vec<Stage>,
}

#[derive(Default)]
pub struct Registry {
    components: Vec<(ComponentDescriptor, bool)>,
    orders: [Vec<usize>; 3],
    finalised: bool,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, descriptor: ComponentDescriptor, options: &OptionsDatabase) -> Result<()> {
        if self.finalised {
            return Err(Error::Registration(format!(
                "cannot register `{}`: registry already finalised",
                descriptor.name
            )));
        }
        descriptor.validate()?;
        if self.components.iter().any(|(d, _)| d.name == descriptor.name) {
            return Err(Error::Registration(format!(
                "component `{}` is already registered",
                descriptor.name
            )));
        }
        let enabled = options.is_enabled(&descriptor.name);
        self.components.push((descriptor, enabled));
        for stage in Stage::ALL {
            self.orders[stage.slot()] = self.resolve(stage, options)?;
        }
        Ok(())
    }

    fn resolve(&self, stage: Stage, options: &OptionsDatabase) -> Result<Vec<usize>> {
        let explicit = options.names(stage.ordering_key())?.unwrap_or_default();
        let rank_of = |name: &str| explicit.iter().position(|n| n == name).unwrap_or(usize::MAX);
        let mut order: Vec<usize> = self
            .components
            .iter()
            .enumerate()
            .filter(|(_, (d, enabled))| *enabled && d.callback(stage).is_some())
            .map(|(n, _)| n)
            .collect();
        // stable: unlisted components keep registration order after listed ones
        order.sort_by_key(|&n| rank_of(&self.components[n].0.name));
        Ok(order)
    }

    /// Checks the ordering options against the registered set and freezes
    /// the registry.
    pub fn finalise(&mut self, options: &OptionsDatabase) -> Result<()> {
        for stage in Stage::ALL {
            if let Some(names) = options.names(stage.ordering_key())? {
                for name in names {
                    if !self.components.iter().any(|(d, _)| d.name == name) {
                        return Err(Error::config(format!(
                            "`{}` names unknown component `{name}`",
                            stage.ordering_key()
                        )));
                    }
                }
            }
        }
        self.finalised = true;
        Ok(())
    }

    pub fn is_finalised(&self) -> bool {
        self.finalised
    }

    pub fn is_enabled(&self, name: &str) -> bool {
        self.components.iter().any(|(d, e)| *e && d.name == name)
    }

    /// Resolved callback order for `stage` as (component name, callback).
    pub fn order(&self, stage: Stage) -> impl Iterator<Item = (&str, &Callback)> {
        self.orders[stage.slot()].iter().map(move |&n| {
            let d = &self.components[n].0;
            (d.name.as_str(), d.callback(stage).expect("ordered component lacks callback"))
        })
    }

    pub fn order_names(&self, stage: Stage) -> Vec<String> {
        self.order(stage).map(|(n, _)| n.to_owned()).collect()
    }

    pub fn components(&self) -> Vec<ComponentInfo> {
        self.components
            .iter()
            .map(|(d, enabled)| ComponentInfo {
                name: d.name.clone(),
                version: d.version.clone(),
                enabled: *enabled,
                stages: Stage::ALL
                    .into_iter()
                    .filter(|&s| d.callback(s).is_some())
                    .collect(),
            })
            .collect()
    }
}
