use std::any::Any;
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::decomp::{halo_exchange, Comm, Field3D, GlobalGrid, PencilLayout};
use crate::error::{Error, Result};
use crate::io::IoBridge;
use crate::options::OptionsDatabase;

/// Fields every model state carries (and every checkpoint must contain).
pub const MODEL_FIELDS: [&str; 6] = ["u", "v", "w", "theta", "p", "rhs"];

/// A named field at its native precision.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelField {
    Single(Field3D<f32>),
    Double(Field3D<f64>),
}

impl ModelField {
    pub fn precision(&self) -> crate::Precision {
        match self {
            ModelField::Single(_) => crate::Precision::Single,
            ModelField::Double(_) => crate::Precision::Double,
        }
    }
}

/// The single point of truth handed to every callback.
///
/// Components keep no private copies of fields; anything a component must
/// carry between callbacks (solver factors, plans) lives in `scratch` under
/// the component's name.
pub struct ModelState {
    pub layout: PencilLayout,
    pub fields: BTreeMap<String, ModelField>,
    pub timestep: u64,
    pub time: f64,
    pub dtm: f64,
    pub options: Arc<OptionsDatabase>,
    pub comm: Comm,
    pub io: Option<IoBridge>,
    pub continue_run: bool,
    /// Set when the state was restored from a checkpoint.
    pub restarted: bool,
    pub scratch: HashMap<String, Box<dyn Any + Send>>,
    /// Wall-clock seconds spent in the timestep loop of the last run.
    pub loop_seconds: f64,
}

impl ModelState {
    /// Fresh state with all model fields zeroed. `dtm` is read from options
    /// when present.
    pub fn new(layout: PencilLayout, options: Arc<OptionsDatabase>, comm: Comm) -> Result<Self> {
        let dtm = options.real_or("dtm", 0.0)?;
        let fields = MODEL_FIELDS
            .iter()
            .map(|&n| (n.to_owned(), ModelField::Double(Field3D::for_layout(&layout))))
            .collect();
        Ok(ModelState {
            layout,
            fields,
            timestep: 0,
            time: 0.0,
            dtm,
            options,
            comm,
            io: None,
            continue_run: true,
            restarted: false,
            scratch: HashMap::new(),
            loop_seconds: 0.0,
        })
    }

    pub fn grid(&self) -> GlobalGrid {
        self.layout.grid
    }

    pub fn field(&self, name: &str) -> Result<&Field3D<f64>> {
        match self.fields.get(name) {
            Some(ModelField::Double(f)) => Ok(f),
            Some(ModelField::Single(_)) => Err(Error::config(format!(
                "field `{name}` is single precision, expected double"
            ))),
            None => Err(Error::config(format!("no field named `{name}`"))),
        }
    }

    pub fn field_mut(&mut self, name: &str) -> Result<&mut Field3D<f64>> {
        match self.fields.get_mut(name) {
            Some(ModelField::Double(f)) => Ok(f),
            Some(ModelField::Single(_)) => Err(Error::config(format!(
                "field `{name}` is single precision, expected double"
            ))),
            None => Err(Error::config(format!("no field named `{name}`"))),
        }
    }

    pub fn set_field(&mut self, name: &str, field: Field3D<f64>) {
        self.fields.insert(name.to_owned(), ModelField::Double(field));
    }

    /// Refreshes the halos of the named double-precision fields.
    pub fn exchange_halos(&mut self, names: &[&str]) -> Result<()> {
        for &name in names {
            let f = match self.fields.get_mut(name) {
                Some(ModelField::Double(f)) => f,
                _ => return Err(Error::config(format!("no double field named `{name}`"))),
            };
            halo_exchange(f, &self.layout, &mut self.comm)?;
        }
        Ok(())
    }

    pub fn scratch_mut<T: Any + Send>(&mut self, key: &str) -> Option<&mut T> {
        self.scratch.get_mut(key).and_then(|b| b.downcast_mut::<T>())
    }
}
