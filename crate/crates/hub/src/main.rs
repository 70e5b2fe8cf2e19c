use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::{json, Value as Json};

use plughub::host::compile_plugin;
use plughub::plugin::{parse_plugin_file, validate_spec, RuntimeKind};
use plughub::registry::{InstallError, RegistryError};
use plughub::rpc::{CallError, NoHandler, Role, Session, SessionConfig, SessionError, Transport, WireValue};
use plughub::server::{Hub, HubConfig, DEFAULT_LISTEN};
use plughub::shim::{run_shim, FaultPlan, ShimError, ShimOptions, FAULT_ENV};
use plughub::supervisor::{CommandProvider, ProviderRegistry};

const TOKEN_ENV: &str = "HUB_TOKEN";

#[derive(Parser)]
#[command(name = "hub", version, about = "Plugin hub: serve, install from links, run plugin methods")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the hub server.
    Serve(ServeArgs),
    /// Install a plugin (and its dependencies) from an app link.
    Install(InstallArgs),
    /// Call a plugin method and print the result.
    Run(RunArgs),
    /// List workspaces and installed plugins.
    Ls(LsArgs),
    /// Validate a plugin file.
    Check(CheckArgs),
    /// Serve one native plugin over a connection back to the hub.
    #[command(hide = true)]
    Shim(ShimArgs),
}

#[derive(Args)]
struct DataDir {
    /// Store root.
    #[arg(long, env = "HUB_DATA_DIR", default_value_os_t = default_data_dir())]
    data_dir: PathBuf,
}

fn default_data_dir() -> PathBuf {
    std::env::var_os("HOME").map_or_else(|| PathBuf::from(".plughub"), |h| PathBuf::from(h).join(".plughub"))
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    listen: Option<String>,
    #[arg(long)]
    token: Option<String>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Accept plugin launches from other hubs.
    #[arg(long)]
    engine_mode: bool,
    /// Serve the workbench at `/`.
    #[arg(long)]
    ui: bool,
    /// Directory holding a built workbench.
    #[arg(long)]
    ui_dir: Option<PathBuf>,
    /// Serve installs from a local repository tree.
    #[arg(long)]
    fixture: Option<PathBuf>,
    /// TOML file with defaults for the flags above.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct InstallArgs {
    url: String,
    #[command(flatten)]
    data: DataDir,
    #[arg(long)]
    fixture: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct RunArgs {
    #[arg(short = 'w', long = "workspace")]
    workspace: String,
    #[arg(short = 'p', long = "plugin")]
    plugin: String,
    #[arg(short = 'm', long = "method")]
    method: String,
    /// JSON array of arguments.
    #[arg(long, default_value = "[]")]
    args: String,
    /// Hub address (`host:port` or `ws://...`).
    #[arg(long, conflicts_with = "embedded")]
    connect: Option<String>,
    /// Run against an in-process hub over the store.
    #[arg(long)]
    embedded: bool,
    #[arg(long)]
    token: Option<String>,
    #[command(flatten)]
    data: DataDir,
}

#[derive(Args)]
struct LsArgs {
    #[arg(short = 'w', long = "workspace")]
    workspace: Option<String>,
    #[command(flatten)]
    data: DataDir,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct CheckArgs {
    file: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ShimArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    connect: String,
    #[arg(long)]
    token: Option<String>,
}

/// Failure with its exit code: 1 usage, 2 validation, 3 network or I/O,
/// 4 plugin runtime.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl std::fmt::Display) -> Self {
        Failure { code, message: message.to_string() }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let default_level = if matches!(cli.command, Command::Serve(_)) { "info" } else { "warn" };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default_level)),
        )
        .init();
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    };
    let outcome = rt.block_on(async {
        match cli.command {
            Command::Serve(a) => serve(a).await,
            Command::Install(a) => install(a).await,
            Command::Run(a) => run(a).await,
            Command::Ls(a) => ls(a),
            Command::Check(a) => check(a),
            Command::Shim(a) => shim(a).await,
        }
    });
    // Native plugins and open sessions must not keep the process alive.
    rt.shutdown_timeout(Duration::from_secs(1));
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn token_from(flag: Option<String>) -> Option<String> {
    std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty()).or(flag)
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    listen: Option<String>,
    token: Option<String>,
    data_dir: Option<PathBuf>,
    engine_mode: Option<bool>,
    ui: Option<bool>,
    ui_dir: Option<PathBuf>,
    fixture: Option<PathBuf>,
    content_base: Option<String>,
    ready_timeout_secs: Option<u64>,
    restart_limit: Option<u32>,
    /// Extra requirement providers: prefix to command template.
    #[serde(default)]
    providers: BTreeMap<String, Vec<String>>,
}

fn load_config(path: Option<&Path>) -> Result<FileConfig, Failure> {
    let Some(path) = path else { return Ok(FileConfig::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| Failure::new(3, format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Failure::new(2, format!("{}: {e}", path.display())))
}

async fn serve(a: ServeArgs) -> CmdResult {
    let file = load_config(a.config.as_deref())?;
    let data_dir = a.data_dir.or(file.data_dir).unwrap_or_else(default_data_dir);
    let mut cfg = HubConfig::new(&data_dir);
    cfg.listen = a.listen.or(file.listen).unwrap_or_else(|| DEFAULT_LISTEN.to_string());
    cfg.token = token_from(a.token.or(file.token));
    cfg.engine_mode = a.engine_mode || file.engine_mode.unwrap_or(false);
    cfg.ui = a.ui || file.ui.unwrap_or(false);
    cfg.ui_dir = a.ui_dir.or(file.ui_dir);
    cfg.fixture = a.fixture.or(file.fixture);
    if let Some(base) = file.content_base {
        cfg.content_host.base = base;
    }
    if let Some(secs) = file.ready_timeout_secs {
        cfg.supervisor.ready_timeout = Duration::from_secs(secs);
    }
    if let Some(n) = file.restart_limit {
        cfg.supervisor.restart_limit = n;
    }
    let mut providers = ProviderRegistry::default();
    for (prefix, template) in file.providers {
        if template.is_empty() {
            return Err(Failure::new(2, format!("provider {prefix:?} has an empty command template")));
        }
        providers = providers.with(&prefix, Arc::new(CommandProvider::new(template)));
    }
    cfg.providers = providers;

    let hub = Hub::new(cfg).map_err(|e| Failure::new(3, e))?;
    let addr = hub.serve().await.map_err(|e| Failure::new(3, e))?;
    let stop = shutdown_signal();
    let mode = if hub.config().engine_mode { "engine" } else { "hub" };
    // Whoever launched us may stop reading stdout once it has the address.
    let mut out = std::io::stdout();
    let _ = writeln!(out, "{mode} listening on {addr} (data dir {})", data_dir.display());
    if hub.config().ui {
        let _ = writeln!(out, "workbench at http://{addr}/");
    }
    stop.await;
    hub.shutdown().await;
    Ok(())
}

/// Installs the SIGINT/SIGTERM handlers right away and resolves once either fires.
fn shutdown_signal() -> impl std::future::Future<Output = ()> {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let int = signal(SignalKind::interrupt());
        let term = signal(SignalKind::terminate());
        async move {
            match (int, term) {
                (Ok(mut int), Ok(mut term)) => {
                    tokio::select! {
                        _ = int.recv() => {}
                        _ = term.recv() => {}
                    }
                }
                _ => {
                    let _ = tokio::signal::ctrl_c().await;
                }
            }
        }
    }
    #[cfg(not(unix))]
    async {
        let _ = tokio::signal::ctrl_c().await;
    }
}

/// Exit code for a failed install step.
fn install_code(e: &InstallError) -> u8 {
    match &e.source {
        RegistryError::NotAnAppUrl(_)
        | RegistryError::MissingPluginParam
        | RegistryError::BadRef(_)
        | RegistryError::IllegalName(_) => 1,
        RegistryError::Fetch(_) | RegistryError::Store(_) => 3,
        RegistryError::Start(_) => 4,
        _ => 2,
    }
}

/// A hub that lives for one command, with native plugins connecting back
/// over loopback.
async fn embedded_hub(data_dir: &Path, fixture: Option<PathBuf>) -> Result<Hub, Failure> {
    let mut cfg = HubConfig::new(data_dir);
    cfg.listen = "127.0.0.1:0".into();
    cfg.fixture = fixture;
    let hub = Hub::new(cfg).map_err(|e| Failure::new(3, e))?;
    hub.serve().await.map_err(|e| Failure::new(3, e))?;
    Ok(hub)
}

async fn install(a: InstallArgs) -> CmdResult {
    let hub = embedded_hub(&a.data.data_dir, a.fixture).await?;
    let human = !a.json;
    let installer = hub.installer().on_progress(move |ev| {
        if human {
            println!("[{:>3.0}%] {}: {}", ev.fraction * 100.0, ev.step, ev.message);
        }
    });
    let result = installer.install_from_url(&a.url).await;
    hub.shutdown().await;
    let report = result.map_err(|e| {
        let code = install_code(&e);
        let hint = if code == 1 { "\nusage: hub install '<base>/#/app?w=<workspace>&plugin=<ref>'" } else { "" };
        Failure::new(code, format!("install failed at {e}{hint}"))
    })?;
    if a.json {
        println!("{}", serde_json::to_string(&report).map_err(|e| Failure::new(3, e))?);
        return Ok(());
    }
    println!("workspace {}", report.workspace);
    for p in &report.plugins {
        let helper = if p.helper { " (helper)" } else { "" };
        println!("  {}{helper} {}", p.name, p.content_hash);
    }
    if let Some(start) = &report.start {
        println!("start: {}", serde_json::to_string(start).unwrap_or_default());
    }
    Ok(())
}

/// Prints a value in its JSON notation, with integral floats as integers.
fn value_text(v: &WireValue) -> String {
    fn plain(v: &WireValue) -> Json {
        match v {
            WireValue::Float(f) if f.fract() == 0.0 && f.abs() < 9.007_199_254_740_992e15 => json!(*f as i64),
            WireValue::List(items) => Json::Array(items.iter().map(plain).collect()),
            WireValue::Map(m) => Json::Object(m.iter().map(|(k, v)| (k.clone(), plain(v))).collect()),
            other => other.to_plain_json(),
        }
    }
    plain(v).to_string()
}

fn call_failure(e: CallError) -> Failure {
    match e {
        CallError::SessionClosed => Failure::new(3, e),
        other => Failure::new(4, format!("{}: {}", other.code(), other.wire_message())),
    }
}

async fn run(a: RunArgs) -> CmdResult {
    let parsed: Json = serde_json::from_str(&a.args).map_err(|e| Failure::new(1, format!("--args: {e}")))?;
    let Json::Array(items) = parsed else {
        return Err(Failure::new(1, "--args must be a JSON array"));
    };
    let args: Vec<WireValue> = items.iter().map(WireValue::from_plain_json).collect();
    let value = if a.embedded {
        let hub = embedded_hub(&a.data.data_dir, None).await?;
        let r = hub.call(&a.workspace, &a.plugin, &a.method, args).await;
        hub.shutdown().await;
        r.map_err(call_failure)?
    } else {
        let addr = a.connect.unwrap_or_else(|| DEFAULT_LISTEN.to_string());
        let t = Transport::connect(&addr).await.map_err(|e| Failure::new(3, format!("{addr}: {e}")))?;
        let token = token_from(a.token);
        let session = Session::open(t, Role::Client, token.as_deref(), Arc::new(NoHandler), SessionConfig::default())
            .await
            .map_err(|e| match e {
                SessionError::AuthFailed => Failure::new(3, "AuthFailed: the hub rejected the token"),
                other => Failure::new(3, format!("{addr}: {other}")),
            })?;
        let target = format!("{}/{}", a.workspace, a.plugin);
        let r = session.call_wire(&target, &a.method, args).await;
        session.close();
        r.map_err(call_failure)?
    };
    println!("{}", value_text(&value));
    Ok(())
}

fn ls(a: LsArgs) -> CmdResult {
    let store = plughub::store::open_store(&a.data.data_dir).map_err(|e| Failure::new(3, e))?;
    let names = match &a.workspace {
        Some(ws) => {
            if store.workspace(ws).is_none() {
                return Err(Failure::new(2, format!("no such workspace {ws:?}")));
            }
            vec![ws.clone()]
        }
        None => store.list_workspaces(),
    };
    let mut out = Vec::new();
    for ws in names {
        let plugins = store.list_plugins(&ws).map_err(|e| Failure::new(3, e))?;
        let rows: Vec<Json> = plugins
            .iter()
            .map(|p| {
                json!({
                    "name": p.spec.name,
                    "type": p.spec.runtime_kind.as_str(),
                    "version": p.spec.version,
                    "tag": p.chosen_tag,
                    "helper": p.helper,
                    "origin": p.origin,
                    "content_hash": p.content_hash,
                })
            })
            .collect();
        out.push(json!({ "workspace": ws, "plugins": rows }));
    }
    if a.json {
        println!("{}", Json::Array(out));
        return Ok(());
    }
    for ws in &out {
        println!("{}", ws["workspace"].as_str().unwrap_or_default());
        for p in ws["plugins"].as_array().into_iter().flatten() {
            let helper = if p["helper"].as_bool().unwrap_or(false) { " helper" } else { "" };
            println!(
                "  {:<24} {:<7} {}{helper}",
                p["name"].as_str().unwrap_or_default(),
                p["type"].as_str().unwrap_or_default(),
                p["version"].as_str().unwrap_or_default()
            );
        }
    }
    Ok(())
}

fn check(a: CheckArgs) -> CmdResult {
    let text = std::fs::read_to_string(&a.file).map_err(|e| Failure::new(3, format!("{}: {e}", a.file.display())))?;
    let mut problems: Vec<String> = Vec::new();
    let mut summary = None;
    match parse_plugin_file(&text) {
        Err(e) => problems.push(format!("{e:?}: {e}")),
        Ok(spec) => {
            problems.extend(validate_spec(&spec).iter().map(|v| format!("{:?}: {}", v.code, v.message)));
            if spec.runtime_kind != RuntimeKind::Window && spec.script().is_some() {
                if let Err(e) = compile_plugin(&spec) {
                    problems.push(format!("ScriptError: {e}"));
                }
            }
            summary = Some(json!({ "name": spec.name, "type": spec.runtime_kind.as_str(), "version": spec.version }));
        }
    }
    if a.json {
        println!("{}", json!({ "ok": problems.is_empty(), "plugin": summary, "violations": problems }));
    } else if problems.is_empty() {
        if let Some(s) = &summary {
            println!("ok: {} ({} {})", s["name"].as_str().unwrap_or_default(), s["type"].as_str().unwrap_or_default(), s["version"].as_str().unwrap_or_default());
        }
    } else {
        for p in &problems {
            println!("{p}");
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Failure::new(2, format!("{} problem(s) in {}", problems.len(), a.file.display())))
    }
}

async fn shim(a: ShimArgs) -> CmdResult {
    let faults = match std::env::var(FAULT_ENV) {
        Ok(s) => s.parse::<FaultPlan>().map_err(|e| Failure::new(1, e))?,
        Err(_) => FaultPlan::default(),
    };
    let opts = ShimOptions { spec: a.spec, connect: a.connect, token: token_from(a.token), faults };
    run_shim(opts).await.map_err(|e| {
        let code = match e {
            ShimError::Parse(_) | ShimError::Load(_) => 2,
            ShimError::Read { .. } | ShimError::Connect { .. } | ShimError::AuthFailed => 3,
            ShimError::Session(_) => 4,
        };
        Failure::new(code, e)
    })
}
