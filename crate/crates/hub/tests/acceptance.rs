//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! fails if any criterion does.

mod common;

use std::collections::BTreeMap;
use std::future::Future;
use std::pin::Pin;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, ensure, Context, Result};
use async_trait::async_trait;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::Value as Json;
use sha2::{Digest, Sha256};

use common::*;
use plughub::plugin::resolve_tag;
use plughub::rpc::{
    decode_exact, decode_frame, encode_frame, AuthStep, CallError, CallbackRef, DType, HostValue, NdArray, Role,
    RpcMessage, Session, SessionConfig, SessionHandler, Transport, WireValue, PROTOCOL_VERSION,
};
use plughub::supervisor::{provision_env, EnvSpec, ProviderRegistry};
use plughub::workflow::{encode_workflow_url, parse_workflow_url, run_workflow, Step, WorkflowDef};

type Check = fn() -> Pin<Box<dyn Future<Output = Result<String>>>>;

fn main() {
    let criteria: [(&str, Check); 8] = [
        ("calc_exp transparency (worker, native, remote engine)", || Box::pin(calc_exp_transparency())),
        ("link install with start, fullscreen and helper dependency", || Box::pin(link_install())),
        ("pinned installs are deterministic", || Box::pin(pin_determinism())),
        ("1000 interleaved calls without cross-talk", || Box::pin(no_cross_talk())),
        ("codec round trip, fuzz and golden vectors", || Box::pin(codec())),
        ("crash containment (SIGKILL and garbage frames)", || Box::pin(crash_containment())),
        ("two-step workflow and workflow links", || Box::pin(workflow())),
        ("tag resolution and disjoint environments", || Box::pin(tags())),
    ];
    let rt = tokio::runtime::Runtime::new().unwrap();
    let mut failed = 0;
    for (i, (title, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = rt.block_on(check());
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS [{}] {title} ({detail}; {secs:.2}s)", i + 1),
            Err(e) => {
                failed += 1;
                println!("FAIL [{}] {title}: {e:#} ({secs:.2}s)", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn as_f64(v: &WireValue) -> Result<f64> {
    v.as_f64().ok_or_else(|| anyhow!("expected a number, got {v:?}"))
}

async fn calc_exp_transparency() -> Result<String> {
    let t0 = Instant::now();
    let inputs = [0.0, 1.0, -1.0, 10.0];
    let demo = plugin("demo", "worker", "", "fn run(x) = call(\"calculator\", \"calc_exp\", x)");
    let worker_calc = fixture_file("oeway/ImJoy-Plugins/master/repository/calculator.imjoy.html");
    let native_calc = plugin("calculator", "native", "", "fn calc_exp(x) = exp(x)");

    let edir = tempfile::tempdir()?;
    let mut ecfg = config(edir.path());
    ecfg.engine_mode = true;
    let (engine, eaddr) = start(ecfg).await;
    let dir = tempfile::tempdir()?;
    let (hub, addr) = start(config(dir.path())).await;
    install(&hub, "worker", &worker_calc);
    install(&hub, "native", &native_calc);
    install(&hub, "remote", &native_calc);
    for ws in ["worker", "native", "remote"] {
        install(&hub, ws, &demo);
    }
    let id = hub.attach_engine(&format!("ws://{eaddr}/ws"), None).await?;
    hub.assign_engine("remote", "calculator", &id).await?;

    let c = client(&addr, None).await;
    let mut worst: f64 = 0.0;
    for ws in ["worker", "native", "remote"] {
        for x in inputs {
            let v = c.call_wire(&format!("{ws}/demo"), "run", vec![WireValue::Float(x)]).await?;
            let err = rel_err(as_f64(&v)?, exp_oracle(x));
            ensure!(err <= 1e-12, "{ws}: calc_exp({x}) = {v:?}, relative error {err:e}");
            worst = worst.max(err);
        }
    }
    ensure!(engine.supervisor().handle("remote", "calculator").is_some(), "remote calculator did not run on the engine");
    ensure!(hub.supervisor().handle("native", "calculator").is_some(), "native calculator did not run locally");
    let elapsed = t0.elapsed();
    hub.shutdown().await;
    engine.shutdown().await;
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("12 calls, max relative error {worst:.1e}, {:.2}s", elapsed.as_secs_f64()))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn hub_cli(args: &[&str], data: &std::path::Path) -> Result<(i32, String)> {
    let out = Command::new(HUB_BIN).args(args).env("HUB_DATA_DIR", data).env_remove("HUB_TOKEN").output()?;
    let code = out.status.code().unwrap_or(-1);
    Ok((code, String::from_utf8_lossy(&out.stdout).into_owned()))
}

async fn link_install() -> Result<String> {
    let data = tempfile::tempdir()?;
    let fx = fixtures();
    let fx = fx.to_str().unwrap();
    let url = "https://imjoy.io/#/app?w=imjoy-examples&plugin=oeway/ImJoy-Plugins:ImageAnnotator&start=ImageAnnotator&fullscreen=1";
    let (code, out) = hub_cli(&["install", url, "--fixture", fx, "--json"], data.path())?;
    ensure!(code == 0, "hub install exited {code}");
    let report: Json = serde_json::from_str(&out).context("install report")?;
    ensure!(report["workspace"] == "imjoy-examples", "workspace {}", report["workspace"]);
    let plugins = report["plugins"].as_array().context("plugins")?;
    ensure!(plugins.len() == 1, "{} plugins installed", plugins.len());
    let want = sha256_hex(fixture_file("oeway/ImJoy-Plugins/master/repository/ImageAnnotator.imjoy.html").as_bytes());
    ensure!(plugins[0]["content_hash"] == want.as_str(), "hash {} != {want}", plugins[0]["content_hash"]);
    let start = &report["start"];
    ensure!(
        start["kind"] == "open_window" && start["plugin"] == "ImageAnnotator" && start["fullscreen"] == true,
        "start outcome {start}"
    );
    let progress = report["progress"].as_array().map_or(0, Vec::len);
    ensure!(progress >= 1, "no progress events");

    let (_, ls) = hub_cli(&["ls", "-w", "imjoy-examples", "--json"], data.path())?;
    let ls: Json = serde_json::from_str(&ls)?;
    ensure!(ls[0]["plugins"][0]["content_hash"] == want.as_str(), "store disagrees with report");

    let dep_url = "https://imjoy.io/#/app?w=seg&plugin=oeway/ImJoy-Plugins:Segmenter";
    let (code, out) = hub_cli(&["install", dep_url, "--fixture", fx, "--json"], data.path())?;
    ensure!(code == 0, "dependency install exited {code}");
    let report: Json = serde_json::from_str(&out)?;
    let helpers: BTreeMap<String, bool> = report["plugins"]
        .as_array()
        .context("plugins")?
        .iter()
        .map(|p| (p["name"].as_str().unwrap_or_default().to_string(), p["helper"] == true))
        .collect();
    let want_helpers = BTreeMap::from([("ImageUtils".to_string(), true), ("Segmenter".to_string(), false)]);
    ensure!(helpers == want_helpers, "records {helpers:?}");
    Ok(format!("hash {}..., {progress} progress events, dependency flagged helper", &want[..12]))
}

const PIN_A_HASH: &str = "de8f0994bb9afd86c813e21d7c2a239b5526e9388c1651095071b8d4e857e726";
const PIN_B_HASH: &str = "a7008177d3a3e29b0855bb7af5ba55671056eb765a4d1808aafc01ead515424b";

async fn pin_determinism() -> Result<String> {
    let fx = fixtures();
    let fx = fx.to_str().unwrap();
    let derived_a = sha256_hex(fixture_file("lab/pinned-tools/3f2c9a1/Scaler.imjoy.html").as_bytes());
    let derived_b = sha256_hex(fixture_file("lab/pinned-tools/8b7e4d0/Scaler.imjoy.html").as_bytes());
    ensure!(derived_a == PIN_A_HASH && derived_b == PIN_B_HASH, "fixture files changed");
    let mut hashes = Vec::new();
    for rev in ["3f2c9a1", "3f2c9a1", "8b7e4d0"] {
        let data = tempfile::tempdir()?;
        let url = format!("https://imjoy.io/#/app?w=pins&plugin=lab/pinned-tools:Scaler@{rev}");
        let (code, out) = hub_cli(&["install", &url, "--fixture", fx, "--json"], data.path())?;
        ensure!(code == 0, "install @{rev} exited {code}");
        let report: Json = serde_json::from_str(&out)?;
        ensure!(report["plugins"][0]["pin"] == rev, "pin not recorded: {}", report["plugins"][0]["pin"]);
        hashes.push(report["plugins"][0]["content_hash"].as_str().unwrap_or_default().to_string());
    }
    ensure!(hashes[0] == hashes[1], "same pin, different hashes: {hashes:?}");
    ensure!(hashes[0] == PIN_A_HASH, "@3f2c9a1 gave {}", hashes[0]);
    ensure!(hashes[2] == PIN_B_HASH, "@8b7e4d0 gave {}", hashes[2]);
    Ok(format!("A={}..., B={}...", &hashes[0][..12], &hashes[2][..12]))
}

/// Echoes its argument after a random pause.
struct SlowEcho {
    id: String,
}

#[async_trait]
impl SessionHandler for SlowEcho {
    async fn on_call(&self, _s: &Session, target: &str, method: &str, args: Vec<HostValue>) -> Result<HostValue, CallError> {
        if target != self.id || method != "echo" {
            return Err(CallError::NoSuchMethod { plugin: target.into(), method: method.into() });
        }
        let pause = rand::thread_rng().gen_range(0..3000u64);
        tokio::time::sleep(Duration::from_micros(pause)).await;
        Ok(args.into_iter().next().unwrap_or(HostValue::Null))
    }
}

async fn no_cross_talk() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let (hub, addr) = start(config(dir.path())).await;
    install(&hub, "x", &plugin("wecho", "worker", "", "fn echo(v) = v"));
    let mut plugins = vec!["x/wecho".to_string()];
    let mut externals = Vec::new();
    for (i, transport) in [addr.clone(), addr.clone(), format!("ws://{addr}/ws")].into_iter().enumerate() {
        let id = format!("x/echo{i}");
        let t = Transport::connect(&transport).await?;
        let s = Session::open(t, Role::Plugin, None, Arc::new(SlowEcho { id: id.clone() }), SessionConfig::default()).await?;
        s.send(RpcMessage::Iface { plugin_id: id.clone(), methods: vec!["echo".into()] })?;
        plugins.push(id);
        externals.push(s);
    }
    let registered = eventually(Duration::from_secs(5), || hub.router().list("x").len() == 3).await;
    ensure!(registered, "external plugins did not register");

    let clients = [client(&addr, None).await, client(&addr, None).await, client(&format!("ws://{addr}/ws"), None).await];
    let t0 = Instant::now();
    let mut tasks = Vec::new();
    for i in 0..1000i64 {
        let c = clients[i as usize % clients.len()].clone();
        let target = plugins[(i as usize * 7 + 3) % plugins.len()].clone();
        tasks.push(tokio::spawn(async move {
            let arg = WireValue::List(vec![WireValue::Int(i), WireValue::Str(format!("call-{i}"))]);
            let v = c.call_wire(&target, "echo", vec![arg.clone()]).await;
            (i, target, arg, v)
        }));
    }
    let mut wrong = 0;
    for t in tasks {
        let (i, target, arg, v) = t.await?;
        match v {
            Ok(v) if v == arg => {}
            other => {
                wrong += 1;
                if wrong < 4 {
                    eprintln!("call {i} to {target}: {other:?}");
                }
            }
        }
    }
    let elapsed = t0.elapsed();
    let leaked: usize = clients.iter().map(Session::pending_len).sum::<usize>()
        + externals.iter().map(Session::pending_len).sum::<usize>()
        + hub.pending_calls();
    hub.shutdown().await;
    ensure!(wrong == 0, "{wrong} of 1000 callers got someone else's value or an error");
    ensure!(leaked == 0, "{leaked} pending entries leaked");
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    Ok(format!("4 plugins, 3 clients, 0 leaked, {:.2}s", elapsed.as_secs_f64()))
}

fn random_string(rng: &mut StdRng) -> String {
    let len = rng.gen_range(0..8);
    (0..len)
        .map(|_| match rng.gen_range(0..4) {
            0 => rng.gen_range('a'..='z'),
            1 => rng.gen_range('\u{0}'..='\u{7f}'),
            2 => rng.gen_range('\u{80}'..='\u{d7ff}'),
            _ => rng.gen_range('\u{10000}'..='\u{10ffff}'),
        })
        .collect()
}

fn random_value(rng: &mut StdRng, depth: u32) -> WireValue {
    let kinds = if depth == 0 { 7 } else { 9 };
    match rng.gen_range(0..kinds) {
        0 => WireValue::Null,
        1 => WireValue::Bool(rng.gen()),
        2 => WireValue::Int(rng.gen()),
        3 => WireValue::Float(f64::from_bits(rng.gen())),
        4 => WireValue::Str(random_string(rng)),
        5 => {
            let dtype = DType::ALL[rng.gen_range(0..DType::ALL.len())];
            let shape: Vec<u64> = (0..rng.gen_range(0..3)).map(|_| rng.gen_range(0..5)).collect();
            let len = NdArray::byte_len(dtype, &shape).unwrap() as usize;
            let data: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            WireValue::NdArray(NdArray::new(dtype, shape, data).unwrap())
        }
        6 => WireValue::Callback(CallbackRef { cb_id: rng.gen(), persistent: rng.gen() }),
        7 => WireValue::List((0..rng.gen_range(0..4)).map(|_| random_value(rng, depth - 1)).collect()),
        _ => WireValue::Map((0..rng.gen_range(0..4)).map(|_| (random_string(rng), random_value(rng, depth - 1))).collect()),
    }
}

fn random_message(rng: &mut StdRng) -> RpcMessage {
    let role = [Role::Hub, Role::Plugin, Role::Engine, Role::Client][rng.gen_range(0..4)];
    match rng.gen_range(0..12) {
        0 => RpcMessage::Hello { protocol_version: PROTOCOL_VERSION.into(), role, auth_required: rng.gen() },
        1 => RpcMessage::Auth(AuthStep::Token(random_string(rng))),
        2 => RpcMessage::Auth(AuthStep::Accepted),
        3 => RpcMessage::Iface { plugin_id: "p".into(), methods: (0..rng.gen_range(0..4)).map(|i| format!("m{i}")).collect() },
        4 => RpcMessage::Call {
            id: rng.gen(),
            target: random_string(rng),
            method: random_string(rng),
            args: (0..rng.gen_range(0..4)).map(|_| random_value(rng, 3)).collect(),
        },
        5 => RpcMessage::Result { id: rng.gen(), value: random_value(rng, 3) },
        6 => RpcMessage::Err { id: rng.gen(), code: random_string(rng), message: random_string(rng) },
        7 => RpcMessage::ReleaseCb { cb_id: rng.gen() },
        8 => RpcMessage::Log { plugin_id: random_string(rng), level: "info".into(), text: random_string(rng) },
        9 => RpcMessage::Progress { plugin_id: random_string(rng), fraction: rng.gen_range(0.0..=1.0) },
        10 => RpcMessage::Ping,
        _ => RpcMessage::Pong,
    }
}

fn frame(header: &str, attachments: &[u8]) -> Vec<u8> {
    let mut f = (header.len() as u32).to_be_bytes().to_vec();
    f.extend_from_slice(header.as_bytes());
    f.extend_from_slice(attachments);
    f
}

async fn codec() -> Result<String> {
    let mut rng = StdRng::seed_from_u64(0x5eed);
    for n in 0..10_000 {
        let msg = random_message(&mut rng);
        let f = encode_frame(&msg).with_context(|| format!("encode #{n}"))?;
        let back = decode_exact(&f).with_context(|| format!("decode #{n}"))?;
        ensure!(back.bit_eq(&msg), "message #{n} changed: {msg:?} -> {back:?}");
    }
    let mut rejected = 0;
    let outcome = std::panic::catch_unwind(move || {
        for n in 0..10_000 {
            let len = rng.gen_range(0..256);
            let mut bytes: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            if n % 2 == 0 && bytes.len() >= 4 {
                // Keep the header length plausible so the JSON parser is reached.
                let h = rng.gen_range(0..(bytes.len() as u32));
                bytes[..4].copy_from_slice(&h.to_be_bytes());
            }
            if decode_frame(&bytes).is_err() {
                rejected += 1;
            }
        }
        rejected
    });
    let rejected = outcome.map_err(|_| anyhow!("decoder panicked on arbitrary input"))?;

    let nd = NdArray::from_f64(vec![2], &[1.0, 2.0])?;
    let mut nd_bytes = 1.0f64.to_le_bytes().to_vec();
    nd_bytes.extend_from_slice(&2.0f64.to_le_bytes());
    let golden = [
        (RpcMessage::Ping, frame(r#"{"t":"ping"}"#, &[])),
        (
            RpcMessage::Call { id: 7, target: "calculator".into(), method: "calc_exp".into(), args: vec![WireValue::Float(1.0)] },
            frame(r#"{"args":[1.0],"id":7,"method":"calc_exp","t":"call","target":"calculator"}"#, &[]),
        ),
        (
            RpcMessage::Result { id: 3, value: nd.into() },
            frame(r#"{"att":[16],"id":3,"t":"result","value":{"nd":{"att":0,"dtype":"f64","shape":[2]}}}"#, &nd_bytes),
        ),
        (
            RpcMessage::hello(Role::Client),
            frame(r#"{"protocol_version":"1","role":"client","t":"hello"}"#, &[]),
        ),
    ];
    for (msg, want) in &golden {
        for _ in 0..2 {
            let got = encode_frame(msg)?;
            if &got != want {
                bail!("golden vector for {} differs: {:?}", msg.kind(), String::from_utf8_lossy(&got));
            }
        }
        ensure!(decode_exact(want)? == *msg, "golden {} does not decode back", msg.kind());
    }
    Ok(format!("10000 round trips, 10000 fuzz inputs ({rejected} rejected), {} golden frames", golden.len()))
}

fn sigkill(pid: u32) -> Result<()> {
    let ok = Command::new("kill").args(["-9", &pid.to_string()]).status()?.success();
    ensure!(ok, "kill -9 {pid} failed");
    Ok(())
}

async fn others_answer(addr: &str) -> Result<()> {
    let c = client(addr, None).await;
    let v = c.call_wire("w/calculator", "calc_exp", vec![WireValue::Float(0.0)]).await?;
    ensure!(v == WireValue::Float(1.0), "calculator answered {v:?}");
    let v = c.call_wire("w/local", "f", vec![WireValue::Float(1.0)]).await?;
    ensure!(v == WireValue::Float(2.0), "worker answered {v:?}");
    c.call_wire("__hub__", "list_workspaces", vec![]).await?;
    Ok(())
}

async fn crash_containment() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let mut cfg = config(dir.path());
    cfg.supervisor.kill_grace = Duration::from_secs(5);
    cfg.supervisor.extra_env.push(("HUB_SHIM_FAULT".into(), "slow=hang,noisy=garbage".into()));
    let grace = cfg.supervisor.kill_grace;
    let (hub, addr) = start(cfg).await;
    install(&hub, "w", &plugin("slow", "native", "", "fn work(x) = x"));
    install(&hub, "w", &plugin("noisy", "native", "", "fn work(x) = x"));
    install(&hub, "w", &plugin("calculator", "native", "", "fn calc_exp(x) = exp(x)"));
    install(&hub, "w", &plugin("local", "worker", "", "fn f(x) = x + 1"));
    for p in ["slow", "noisy", "calculator"] {
        hub.start_plugin("w", p).await.map_err(|e| anyhow!("start {p}: {e}"))?;
    }
    others_answer(&addr).await?;

    let c = client(&addr, None).await;
    let call = tokio::spawn({
        let c = c.clone();
        async move { c.call_wire("w/slow", "work", vec![WireValue::Float(1.0)]).await }
    });
    tokio::time::sleep(Duration::from_millis(200)).await;
    let pid = hub.supervisor().handle("w", "slow").and_then(|h| h.pid()).context("slow has no pid")?;
    let killed = Instant::now();
    sigkill(pid)?;
    let r = tokio::time::timeout(grace, call).await.map_err(|_| anyhow!("no answer within {grace:?}"))??;
    let kill_latency = killed.elapsed();
    ensure!(matches!(r, Err(CallError::SessionClosed)), "SIGKILL: caller got {r:?}");
    others_answer(&addr).await.context("after SIGKILL")?;

    let sent = Instant::now();
    let r = tokio::time::timeout(grace, c.call_wire("w/noisy", "work", vec![WireValue::Float(1.0)]))
        .await
        .map_err(|_| anyhow!("garbage: no answer within {grace:?}"))?;
    let garbage_latency = sent.elapsed();
    ensure!(matches!(r, Err(CallError::SessionClosed)), "garbage: caller got {r:?}");
    let h = hub.supervisor().handle("w", "noisy").context("noisy handle")?;
    let reaped = eventually(grace, || h.logs().iter().any(|l| l.contains("process exited"))).await;
    ensure!(reaped, "garbage-emitting process was not stopped");
    others_answer(&addr).await.context("after garbage")?;
    hub.shutdown().await;
    Ok(format!(
        "SessionClosed after {}ms (kill) and {}ms (garbage), grace {}s",
        kill_latency.as_millis(),
        garbage_latency.as_millis(),
        grace.as_secs()
    ))
}

async fn workflow() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let (hub, _addr) = start(config(dir.path())).await;
    install(&hub, "wf", &plugin("affine", "worker", "", "fn apply(x) = 3 * x + 1"));
    install(&hub, "wf", &plugin("square", "worker", "", "fn apply(x) = x ^ 2 - x"));
    let def = WorkflowDef::new("chain", "wf", vec![Step::new("affine", "apply"), Step::new("square", "apply")]);
    let router = hub.router().clone();
    let mut rng = StdRng::seed_from_u64(7);
    for _ in 0..100 {
        let x: f64 = rng.gen_range(-1e3..1e3);
        let chained = run_workflow(&router, &def, WireValue::Float(x)).await?;
        let a = router.call("wf", "affine", "apply", vec![HostValue::Float(x)]).await?;
        let direct = router.call("wf", "square", "apply", vec![a]).await?.into_data()?;
        ensure!(chained.bit_eq(&direct), "x={x}: chain {chained:?} vs composition {direct:?}");
        let y = 3.0 * x + 1.0;
        let expected = y.powf(2.0) - y;
        ensure!(chained.bit_eq(&WireValue::Float(expected)), "x={x}: {chained:?} vs {expected}");
    }
    let url = encode_workflow_url("https://hub.example", &def)?;
    ensure!(parse_workflow_url(&url)? == def, "url did not round-trip");
    let (head, payload) = url.split_once("def=").context("no def parameter")?;
    let mut bytes = payload.as_bytes().to_vec();
    let mid = bytes.len() / 2;
    bytes[mid] = if bytes[mid] == b'A' { b'B' } else { b'A' };
    let tampered = format!("{head}def={}", String::from_utf8(bytes)?);
    ensure!(parse_workflow_url(&tampered).is_err(), "tampered url accepted");
    let truncated = &url[..url.len() - 3];
    ensure!(parse_workflow_url(truncated).is_err(), "truncated url accepted");
    hub.shutdown().await;
    Ok("100 random inputs, url round-trips, tampered and truncated urls rejected".into())
}

async fn tags() -> Result<String> {
    let source = fixture_file("oeway/DPNUnet-Segmentation/master/DPNUnet.imjoy.html");
    let spec = plughub::plugin::parse_plugin_file(&source)?;
    for (tag, want) in [("gpu", "none:stub-gpu"), ("cpu", "none:stub-cpu")] {
        let got = resolve_tag(&spec, Some(tag))?.effective_requirements;
        ensure!(got == [want], "{tag} resolved to {got:?}");
    }
    ensure!(resolve_tag(&spec, Some("tpu")).is_err(), "unknown tag accepted");

    let dir = tempfile::tempdir()?;
    let (hub, addr) = start(config(dir.path())).await;
    install_tagged(&hub, "g", &source, "gpu");
    install_tagged(&hub, "c", &source, "cpu");
    let c = client(&addr, None).await;
    for ws in ["g", "c"] {
        c.call_wire(&format!("{ws}/DPNUnet"), "predict", vec![WireValue::Float(1.0)]).await?;
    }
    let g = hub.supervisor().handle("g", "DPNUnet").context("gpu handle")?;
    ensure!(g.logs().iter().any(|l| l.starts_with("[env] none:stub-gpu")), "gpu env not provisioned");
    ensure!(!g.logs().iter().any(|l| l.contains("stub-cpu")), "gpu env saw cpu requirements");
    let err = hub.supervisor().launch("g", &spec, Some("tpu")).await.err().context("unknown tag launched")?;
    ensure!(err.code() == "UnknownTag", "unknown tag gave {}", err.code());
    hub.shutdown().await;

    let root = tempfile::tempdir()?;
    let providers = ProviderRegistry::default();
    let env = |req: &str| EnvSpec { requirements: vec![req.to_string()], workspace: "w".into() };
    let a = provision_env(root.path(), &env("cmd:echo 1.0 > pinned"), &providers).await?;
    let b = provision_env(root.path(), &env("cmd:echo 2.0 > pinned"), &providers).await?;
    ensure!(a.dir != b.dir, "conflicting requirements share {}", a.dir.display());
    ensure!(!a.dir.starts_with(&b.dir) && !b.dir.starts_with(&a.dir), "nested env dirs");
    let va = std::fs::read_to_string(a.dir.join("pinned"))?;
    let vb = std::fs::read_to_string(b.dir.join("pinned"))?;
    ensure!(va == "1.0\n" && vb == "2.0\n", "env contents {va:?} {vb:?}");
    Ok("gpu/cpu resolve exactly, unknown tag rejected, cmd envs disjoint".into())
}
