use std::time::Instant;

use log::warn;

use crate::error::{Error, Result};
use crate::registry::{Registry, Stage};
use crate::state::ModelState;

/// Drives the component lifecycle on one worker.
///
/// Init callbacks run once, then timestep sweeps repeat until a component
/// clears `continue_run` or `timestep` reaches `nn_timesteps`, then finalise
/// callbacks run once. `timestep` is incremented before each sweep, so
/// callbacks see the number of the step being computed and a restored state
/// at step `n` resumes at `n + 1`. Finalise callbacks also run after a failed
/// init or timestep callback; that original failure is what gets reported.
pub fn run_model(state: &mut ModelState, registry: &Registry) -> Result<()> {
    if !registry.is_finalised() {
        return Err(Error::Registration("registry has not been finalised".into()));
    }
    let limit = state.options.int_opt("nn_timesteps")?.map(|n| n.max(0) as u64);
    if limit.is_none() && registry.order(Stage::Timestep).next().is_none() {
        return Err(Error::config(
            "`nn_timesteps` is unset and no timestep component can end the run",
        ));
    }

    let outcome = sweep_all(state, registry, limit);

    let mut finalise_error = None;
    for (name, cb) in registry.order(Stage::Finalise) {
        if let Err(e) = cb(state) {
            let e = wrap(name, Stage::Finalise, e);
            if outcome.is_err() {
                warn!("ignoring finalise failure after aborted run: {e}");
            } else if finalise_error.is_none() {
                finalise_error = Some(e);
            }
        }
    }
    outcome?;
    finalise_error.map_or(Ok(()), Err)
}

fn sweep_all(state: &mut ModelState, registry: &Registry, limit: Option<u64>) -> Result<()> {
    for (name, cb) in registry.order(Stage::Init) {
        cb(state).map_err(|e| wrap(name, Stage::Init, e))?;
    }
    let start = Instant::now();
    let result = (|| {
        while state.continue_run && limit.is_none_or(|n| state.timestep < n) {
            state.timestep += 1;
            for (name, cb) in registry.order(Stage::Timestep) {
                cb(state).map_err(|e| wrap(name, Stage::Timestep, e))?;
            }
            state.time += state.dtm;
        }
        Ok(())
    })();
    state.loop_seconds = start.elapsed().as_secs_f64();
    result
}

fn wrap(component: &str, stage: Stage, e: Error) -> Error {
    Error::Component {
        component: component.to_owned(),
        stage,
        source: Box::new(e),
    }
}
