//! The service driven over HTTP by the client crate.

use monc_client::Client;
use monc_core::api::{BenchMode, BenchRequest, RunRequest, SolverKind, TransportKind};
use monc_core::components::MANIFEST;
use monc_core::simulation::{default_config, RunEnv};
use monc_core::{ErrorCategory, Precision};

async fn start() -> Client {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let env = RunEnv {
        worker_exe: Some(env!("CARGO_BIN_EXE_monc-server").into()),
    };
    tokio::spawn(monc_service::serve(listener, env));
    Client::new(format!("http://{addr}"))
}

#[tokio::test]
async fn health_and_components() {
    let client = start().await;
    assert_eq!(client.health().await.unwrap(), monc_core::components::VERSION);
    let names: Vec<String> = client.components().await.unwrap().into_iter().map(|c| c.name).collect();
    assert_eq!(names, MANIFEST);
}

#[tokio::test]
async fn process_transport_run() {
    let client = start().await;
    let dir = tempfile::tempdir().unwrap();
    let req = RunRequest {
        config: Some(default_config(8, 8, 8)),
        workers: 2,
        steps: Some(3),
        transport: TransportKind::Process,
        checkpoint: Some(dir.path().join("end.bin")),
        ..RunRequest::default()
    };
    let s = client.run(&req).await.unwrap();
    assert_eq!((s.workers, s.timestep, s.grid), (2, 3, [8, 8, 8]));
    assert_eq!(s.ranks.len(), 2);
    assert!(dir.path().join("end.bin").exists());
}

#[tokio::test]
async fn errors_keep_their_category() {
    let client = start().await;
    let missing = client.run(&RunRequest::default()).await.unwrap_err();
    assert_eq!(missing.category(), ErrorCategory::Config);

    let mut req = RunRequest {
        config: Some(default_config(8, 8, 8)),
        ..RunRequest::default()
    };
    req.overrides.insert("iterativesolver_enabled".into(), ".true.".into());
    let both = client.run(&req).await.unwrap_err();
    assert_eq!(both.category(), ErrorCategory::Config);
    assert!(both.to_string().contains("mutually exclusive"));
}

#[tokio::test]
async fn strong_bench_over_threads() {
    let client = start().await;
    let report = client
        .bench(&BenchRequest {
            mode: BenchMode::Strong,
            workers: vec![1, 2],
            base: [4, 8, 8],
            solvers: vec![SolverKind::Fft],
            precisions: vec![Precision::Single],
            reps: 1,
            steps: 1,
            transport: TransportKind::Threads,
            config: None,
        })
        .await
        .unwrap();
    assert_eq!(report.rows.len(), 2);
    assert!(report.rows.iter().all(|r| r.seconds > 0.0 && [r.gz, r.gy, r.gx] == [4, 8, 8]));
}
