//! The static component manifest.
//!
//! Every component the model knows about is listed here in registration
//! order. Options decide at run time which are enabled (`<name>_enabled`)
//! and in what order their callbacks run (`<stage>_ordering`).

use log::debug;

use crate::decomp::Field3D;
use crate::dycore;
use crate::error::{Error, Result};
use crate::fft::FftSolver;
use crate::io::DiagnosticMessage;
use crate::krylov::{KrylovSolver, SolveReport};
use crate::options::OptionsDatabase;
use crate::precision::Precision;
use crate::registry::{ComponentDescriptor, Registry};
use crate::solver::SolverConfig;
use crate::state::ModelState;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Component names in registration order.
pub const MANIFEST: [&str; 8] = [
    "dry_boundary_layer",
    "dynamics",
    "pressure_source",
    "fftsolver",
    "iterativesolver",
    "projection",
    "io_bridge",
    "termination_check",
];

/// Running totals the iterative solver keeps in scratch.
#[derive(Debug, Clone, Default)]
pub struct KrylovTotals {
    pub solves: u64,
    pub iterations: u64,
    pub last: SolveReport,
}

enum FftAny {
    Single(FftSolver<f32>),
    Double(FftSolver<f64>),
}

enum KrylovAny {
    Single(KrylovSolver<f32>),
    Double(KrylovSolver<f64>),
}

/// Scratch key under which the iterative solver keeps [`KrylovTotals`].
pub const KRYLOV_TOTALS: &str = "iterativesolver.totals";

fn descriptor(name: &str) -> ComponentDescriptor {
    ComponentDescriptor::new(name, VERSION)
}

fn fft_init(state: &mut ModelState) -> Result<()> {
    let cfg = SolverConfig::from_options(&state.options)?;
    let solver = match cfg.precision {
        Precision::Single => FftAny::Single(FftSolver::new(&state.layout, cfg.kernel)?),
        Precision::Double => FftAny::Double(FftSolver::new(&state.layout, cfg.kernel)?),
    };
    state.scratch.insert("fftsolver".into(), Box::new(solver));
    Ok(())
}

fn fft_timestep(state: &mut ModelState) -> Result<()> {
    let solver = state
        .scratch
        .remove("fftsolver")
        .and_then(|b| b.downcast::<FftAny>().ok())
        .ok_or_else(|| Error::config("fftsolver used before initialisation"))?;
    let rhs = state.field("rhs")?.clone();
    let result = match solver.as_ref() {
        FftAny::Double(s) => s.solve(&rhs, &mut state.comm),
        FftAny::Single(s) => s.solve(&rhs.cast(), &mut state.comm).map(|p| p.cast()),
    };
    state.scratch.insert("fftsolver".into(), solver);
    state.set_field("p", result?);
    Ok(())
}

fn krylov_init(state: &mut ModelState) -> Result<()> {
    let cfg = SolverConfig::from_options(&state.options)?;
    let solver = match cfg.precision {
        Precision::Single => KrylovAny::Single(KrylovSolver::new(&state.layout, cfg)?),
        Precision::Double => KrylovAny::Double(KrylovSolver::new(&state.layout, cfg)?),
    };
    state.scratch.insert("iterativesolver".into(), Box::new(solver));
    state.scratch.insert(KRYLOV_TOTALS.into(), Box::new(KrylovTotals::default()));
    Ok(())
}

fn krylov_timestep(state: &mut ModelState) -> Result<()> {
    let mut solver = state
        .scratch
        .remove("iterativesolver")
        .and_then(|b| b.downcast::<KrylovAny>().ok())
        .ok_or_else(|| Error::config("iterativesolver used before initialisation"))?;
    let rhs = state.field("rhs")?.clone();
    let result: Result<(Field3D<f64>, SolveReport)> = match solver.as_mut() {
        KrylovAny::Double(s) => s.solve(&rhs, &mut state.comm),
        KrylovAny::Single(s) => s.solve(&rhs.cast(), &mut state.comm).map(|(p, r)| (p.cast(), r)),
    };
    state.scratch.insert("iterativesolver".into(), solver);
    let (p, report) = result?;
    if let Some(t) = state.scratch_mut::<KrylovTotals>(KRYLOV_TOTALS) {
        t.solves += 1;
        t.iterations += report.iterations as u64;
        t.last = report;
    }
    state.set_field("p", p);
    Ok(())
}

fn io_submit(state: &mut ModelState) -> Result<()> {
    let Some(mut bridge) = state.io.take() else {
        debug!("io_bridge enabled without an I/O server; nothing to send");
        return Ok(());
    };
    let t = state.timestep;
    let due: Vec<String> = bridge
        .config()
        .fields
        .iter()
        .filter(|f| f.due(t))
        .map(|f| f.name.clone())
        .collect();
    let mut result = Ok(());
    for name in due {
        match state.field(&name) {
            Ok(f) => {
                let msg = DiagnosticMessage::from_field(&state.layout, t, &name, f);
                if let Err(e) = bridge.submit_field(msg) {
                    result = Err(e);
                    break;
                }
            }
            Err(e) => {
                result = Err(e);
                break;
            }
        }
    }
    state.io = Some(bridge);
    result
}

fn io_close(state: &mut ModelState) -> Result<()> {
    match state.io.as_mut() {
        Some(b) => b.close(),
        None => Ok(()),
    }
}

fn termination(state: &mut ModelState) -> Result<()> {
    if let Some(end) = state.options.real_opt("termination_time")? {
        if state.time + state.dtm >= end {
            state.continue_run = false;
        }
    }
    Ok(())
}

/// Descriptors for every manifest component, in registration order.
pub fn manifest() -> Vec<ComponentDescriptor> {
    vec![
        descriptor("dry_boundary_layer").on_init(|s| {
            if s.restarted {
                Ok(())
            } else {
                dycore::init_dry_boundary_layer(s)
            }
        }),
        descriptor("dynamics").on_timestep(dycore::timestep_dynamics),
        descriptor("pressure_source").on_timestep(|s| {
            let rhs = dycore::compute_divergence(s)?;
            s.set_field("rhs", rhs);
            Ok(())
        }),
        descriptor("fftsolver").on_init(fft_init).on_timestep(fft_timestep),
        descriptor("iterativesolver").on_init(krylov_init).on_timestep(krylov_timestep),
        descriptor("projection").on_timestep(dycore::pressure_projection),
        descriptor("io_bridge").on_timestep(io_submit).on_finalise(io_close),
        descriptor("termination_check").on_timestep(termination),
    ]
}

/// Registers every manifest component and finalises the registry.
pub fn build_registry(options: &OptionsDatabase) -> Result<Registry> {
    build_registry_with(options, Vec::new())
}

/// Like [`build_registry`], registering `extra` after the manifest.
pub fn build_registry_with(options: &OptionsDatabase, extra: Vec<ComponentDescriptor>) -> Result<Registry> {
    if options.is_enabled("fftsolver") && options.is_enabled("iterativesolver") {
        return Err(Error::config(
            "fftsolver and iterativesolver are mutually exclusive; enable only one",
        ));
    }
    let mut r = Registry::new();
    for d in manifest().into_iter().chain(extra) {
        r.register(d, options)?;
    }
    r.finalise(options)?;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::Stage;

    #[test]
    fn both_solvers_rejected() {
        let opts = OptionsDatabase::load_config("fftsolver_enabled=.true.\niterativesolver_enabled=.true.").unwrap();
        let Err(err) = build_registry(&opts) else { panic!("accepted both solvers") };
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("mutually exclusive"));
    }

    #[test]
    fn manifest_matches_names() {
        let names: Vec<String> = manifest().into_iter().map(|d| d.name).collect();
        assert_eq!(names, MANIFEST);
    }

    #[test]
    fn default_order_is_manifest_order() {
        let text: String = MANIFEST
            .iter()
            .filter(|n| **n != "iterativesolver")
            .map(|n| format!("{n}_enabled=.true.\n"))
            .collect();
        let r = build_registry(&OptionsDatabase::load_config(&text).unwrap()).unwrap();
        assert_eq!(
            r.order_names(Stage::Timestep),
            ["dynamics", "pressure_source", "fftsolver", "projection", "io_bridge", "termination_check"]
        );
        assert_eq!(r.order_names(Stage::Init), ["dry_boundary_layer", "fftsolver"]);
        assert_eq!(r.order_names(Stage::Finalise), ["io_bridge"]);
    }
}
