mod common;

use std::time::{Duration, Instant};

use common::*;
use plughub::rpc::{CallError, WireValue};
use plughub::server::HubError;
use plughub::supervisor::HandleState;

fn native_calc() -> String {
    plugin("calculator", "native", "", "fn calc_exp(x) = exp(x)")
}

fn sigkill(pid: u32) {
    let status = std::process::Command::new("kill").args(["-9", &pid.to_string()]).status().unwrap();
    assert!(status.success());
}

#[tokio::test]
async fn native_plugins_launch_on_first_call() {
    let dir = tempfile::tempdir().unwrap();
    let (hub, addr) = start(config(dir.path())).await;
    install(&hub, "w1", &native_calc());
    let c = client(&addr, None).await;
    let v = c.call_wire("w1/calculator", "calc_exp", vec![WireValue::Float(1.0)]).await.unwrap();
    assert!(v.bit_eq(&WireValue::Float(1f64.exp())));
    let h = hub.supervisor().handle("w1", "calculator").unwrap();
    assert_eq!(h.state(), HandleState::Ready);
    assert!(h.pid().is_some());
    assert!(eventually(Duration::from_secs(5), || h.logs().iter().any(|l| l.contains("serving 1 method(s)"))).await);
    let status = c.call_wire("__hub__", "status", vec![]).await.unwrap().to_plain_json();
    assert_eq!(status[0]["state"], "ready");
    hub.shutdown().await;
    assert_eq!(h.state(), HandleState::Terminated);
}

#[tokio::test]
async fn sigkill_mid_call_is_contained() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.supervisor.extra_env.push(("HUB_SHIM_FAULT".into(), "slow=hang".into()));
    let grace = cfg.supervisor.kill_grace;
    let (hub, addr) = start(cfg).await;
    install(&hub, "w1", &plugin("slow", "native", "", "fn work(x) = x"));
    install(&hub, "w1", &native_calc());
    install(&hub, "w1", &plugin("local", "worker", "", "fn f(x) = x + 1"));
    hub.start_plugin("w1", "slow").await.unwrap();
    hub.start_plugin("w1", "calculator").await.unwrap();

    let c = client(&addr, None).await;
    let pending = tokio::spawn({
        let c = c.clone();
        async move { c.call_wire("w1/slow", "work", vec![WireValue::Float(1.0)]).await }
    });
    tokio::time::sleep(Duration::from_millis(200)).await;
    let h = hub.supervisor().handle("w1", "slow").unwrap();
    let killed = Instant::now();
    sigkill(h.pid().unwrap());
    let r = pending.await.unwrap();
    assert!(matches!(r, Err(CallError::SessionClosed)), "{r:?}");
    assert!(killed.elapsed() < grace + Duration::from_secs(1), "{:?}", killed.elapsed());
    assert!(eventually(Duration::from_secs(5), || h.state() == HandleState::Failed).await);

    let v = c.call_wire("w1/calculator", "calc_exp", vec![WireValue::Float(0.0)]).await.unwrap();
    assert_eq!(v, WireValue::Float(1.0));
    let v = c.call_wire("w1/local", "f", vec![WireValue::Float(1.0)]).await.unwrap();
    assert_eq!(v, WireValue::Float(2.0));
    hub.shutdown().await;
}

#[tokio::test]
async fn garbage_on_the_wire_kills_only_that_plugin() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.supervisor.extra_env.push(("HUB_SHIM_FAULT".into(), "noisy=garbage".into()));
    let (hub, addr) = start(cfg).await;
    install(&hub, "w1", &plugin("noisy", "native", "", "fn work(x) = x"));
    install(&hub, "w1", &native_calc());
    let c = client(&addr, None).await;
    c.call_wire("w1/calculator", "calc_exp", vec![WireValue::Float(0.0)]).await.unwrap();
    let r = c.call_wire("w1/noisy", "work", vec![WireValue::Float(1.0)]).await;
    assert!(matches!(r, Err(CallError::SessionClosed)), "{r:?}");
    let h = hub.supervisor().handle("w1", "noisy").unwrap();
    assert!(eventually(Duration::from_secs(5), || h.logs().iter().any(|l| l.contains("process exited"))).await);
    assert!(!hub.router().is_registered("w1", "noisy"));
    let v = c.call_wire("w1/calculator", "calc_exp", vec![WireValue::Float(0.0)]).await.unwrap();
    assert_eq!(v, WireValue::Float(1.0));
    hub.shutdown().await;
}

#[tokio::test]
async fn crash_restarts_up_to_the_limit() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.supervisor.restart_limit = 1;
    let (hub, addr) = start(cfg).await;
    install(&hub, "w1", &native_calc());
    hub.start_plugin("w1", "calculator").await.unwrap();
    let h = hub.supervisor().handle("w1", "calculator").unwrap();
    let first = h.pid().unwrap();
    sigkill(first);
    assert!(eventually(Duration::from_secs(20), || h.restart_count() == 1 && h.state() == HandleState::Ready).await);
    assert_ne!(h.pid(), Some(first));
    let c = client(&addr, None).await;
    let v = c.call_wire("w1/calculator", "calc_exp", vec![WireValue::Float(0.0)]).await.unwrap();
    assert_eq!(v, WireValue::Float(1.0));

    sigkill(h.pid().unwrap());
    assert!(eventually(Duration::from_secs(5), || h.state() == HandleState::Failed).await);
    tokio::time::sleep(Duration::from_millis(300)).await;
    assert_eq!(h.restart_count(), 1);
    assert_eq!(h.state(), HandleState::Failed);
    hub.shutdown().await;
}

#[tokio::test]
async fn crash_on_call_surfaces_as_session_closed() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.supervisor.extra_env.push(("HUB_SHIM_FAULT".into(), "boom=crash-on-call".into()));
    let (hub, addr) = start(cfg).await;
    install(&hub, "w1", &plugin("boom", "native", "", "fn work(x) = x"));
    let c = client(&addr, None).await;
    let r = c.call_wire("w1/boom", "work", vec![]).await;
    assert!(matches!(r, Err(CallError::SessionClosed)), "{r:?}");
    let h = hub.supervisor().handle("w1", "boom").unwrap();
    assert!(eventually(Duration::from_secs(5), || h.logs().iter().any(|l| l.contains("exit status: 101"))).await, "{:?}", h.logs());
    hub.shutdown().await;
}

#[tokio::test]
async fn wrong_child_token_is_auth_failed() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.token = Some("right".into());
    cfg.supervisor.extra_env.push(("HUB_TOKEN".into(), "wrong".into()));
    let (hub, _addr) = start(cfg).await;
    install(&hub, "w1", &native_calc());
    let err = hub.start_plugin("w1", "calculator").await.unwrap_err();
    assert_eq!(err.into_call_error().code(), "AuthFailed");
    hub.shutdown().await;
}

#[tokio::test]
async fn exit_before_iface_fails_fast() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.supervisor.extra_env.push(("HUB_SHIM_FAULT".into(), "exit-before-iface".into()));
    let (hub, _addr) = start(cfg).await;
    install(&hub, "w1", &native_calc());
    let t = Instant::now();
    let err = hub.start_plugin("w1", "calculator").await.unwrap_err();
    assert_eq!(err.into_call_error().code(), "ReadyTimeout");
    assert!(t.elapsed() < Duration::from_secs(10));
    hub.shutdown().await;
}

#[tokio::test]
async fn terminate_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let (hub, _addr) = start(config(dir.path())).await;
    install(&hub, "w1", &native_calc());
    hub.start_plugin("w1", "calculator").await.unwrap();
    let h = hub.supervisor().handle("w1", "calculator").unwrap();
    assert!(hub.stop_plugin("w1", "calculator").await);
    assert!(!hub.stop_plugin("w1", "calculator").await);
    hub.supervisor().terminate("w1", "calculator").await;
    assert_eq!(h.state(), HandleState::Terminated);
    assert!(!hub.router().is_registered("w1", "calculator"));
    hub.shutdown().await;
}

#[tokio::test]
async fn tags_choose_requirements_and_env_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let (hub, addr) = start(config(dir.path())).await;
    let source = fixture_file("oeway/DPNUnet-Segmentation/master/DPNUnet.imjoy.html");
    install_tagged(&hub, "w1", &source, "gpu");
    let c = client(&addr, None).await;
    let v = c.call_wire("w1/DPNUnet", "predict", vec![WireValue::Float(3.0)]).await.unwrap();
    assert_eq!(v, WireValue::Float(3.0));
    let gpu = hub.supervisor().handle("w1", "DPNUnet").unwrap();
    assert!(gpu.logs().iter().any(|l| l.starts_with("[env] none:stub-gpu")));
    assert!(!gpu.logs().iter().any(|l| l.contains("stub-cpu")));

    install_tagged(&hub, "w2", &source, "cpu");
    c.call_wire("w2/DPNUnet", "predict", vec![WireValue::Float(3.0)]).await.unwrap();
    let cpu = hub.supervisor().handle("w2", "DPNUnet").unwrap();
    assert!(cpu.logs().iter().any(|l| l.starts_with("[env] none:stub-cpu")));
    assert_ne!(gpu.env_dir().file_name(), cpu.env_dir().file_name());
    hub.shutdown().await;
}

#[tokio::test]
async fn remote_engine_hosts_assigned_plugins() {
    let edir = tempfile::tempdir().unwrap();
    let mut ecfg = config(edir.path());
    ecfg.engine_mode = true;
    ecfg.token = Some("etok".into());
    let (engine, eaddr) = start(ecfg).await;

    let dir = tempfile::tempdir().unwrap();
    let (hub, addr) = start(config(dir.path())).await;
    install(&hub, "w1", &native_calc());
    install(&hub, "w1", &plugin("helper", "worker", "", "fn twice(x) = 2 * x"));
    install(&hub, "w1", &plugin("caller", "native", "", "fn run(x) = call(\"helper\", \"twice\", x)"));

    assert!(matches!(hub.attach_engine(&format!("ws://{eaddr}/ws"), Some("bad")).await, Err(HubError::AuthFailed)));
    assert!(matches!(hub.attach_engine(&addr, None).await, Err(HubError::NotAnEngine(_))));
    let id = hub.attach_engine(&format!("ws://{eaddr}/ws"), Some("etok")).await.unwrap();
    assert_eq!(id, "engine-1");
    assert_eq!(hub.engines()[0].providers, ["cmd", "none"]);
    assert!(matches!(hub.assign_engine("w1", "calculator", "engine-9").await, Err(HubError::NoSuchEngine(_))));
    hub.assign_engine("w1", "calculator", &id).await.unwrap();
    hub.assign_engine("w1", "caller", &id).await.unwrap();

    let c = client(&addr, None).await;
    let v = c.call_wire("w1/calculator", "calc_exp", vec![WireValue::Float(1.0)]).await.unwrap();
    assert!(v.bit_eq(&WireValue::Float(1f64.exp())));
    assert!(engine.supervisor().handle("w1", "calculator").is_some());
    assert!(hub.supervisor().handle("w1", "calculator").is_none());

    // The engine's plugin reaches back into the hub's workspace.
    let v = c.call_wire("w1/caller", "run", vec![WireValue::Float(21.0)]).await.unwrap();
    assert_eq!(v, WireValue::Float(42.0));
    assert!(
        eventually(Duration::from_secs(5), || hub.events().logs("w1", "calculator").iter().any(|l| l.contains("serving")))
            .await
    );

    engine.shutdown().await;
    assert!(eventually(Duration::from_secs(5), || hub.engines().is_empty()).await);
    assert!(!hub.router().is_registered("w1", "calculator"));
    hub.shutdown().await;
}
