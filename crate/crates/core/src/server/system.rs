//! Methods of the `__hub__` and `__engine__` system interfaces. Arguments
//! and results are plain data.

use serde::Serialize;
use serde_json::json;

use super::Hub;
use crate::plugin::parse_plugin_file;
use crate::rpc::{CallError, Session, WireValue};
use crate::supervisor::EnvSpec;
use crate::workflow::{run_workflow, WorkflowDef};

fn bad_args(method: &str, why: impl std::fmt::Display) -> CallError {
    CallError::remote("BadArguments", format!("{method}: {why}"))
}

fn arg<'a>(args: &'a [WireValue], i: usize, method: &str) -> Result<&'a WireValue, CallError> {
    args.get(i).ok_or_else(|| bad_args(method, format!("missing argument {i}")))
}

fn str_arg<'a>(args: &'a [WireValue], i: usize, method: &str) -> Result<&'a str, CallError> {
    arg(args, i, method)?.as_str().ok_or_else(|| bad_args(method, format!("argument {i} must be a string")))
}

fn opt_str_arg<'a>(args: &'a [WireValue], i: usize, method: &str) -> Result<Option<&'a str>, CallError> {
    match args.get(i) {
        None | Some(WireValue::Null) => Ok(None),
        Some(v) => v.as_str().map(Some).ok_or_else(|| bad_args(method, format!("argument {i} must be a string"))),
    }
}

pub(super) fn string_list(v: &WireValue) -> Result<Vec<String>, CallError> {
    match v {
        WireValue::List(items) => items
            .iter()
            .map(|i| i.as_str().map(str::to_string).ok_or_else(|| bad_args("list", "expected strings")))
            .collect(),
        _ => Err(bad_args("list", "expected a list")),
    }
}

fn to_wire(v: &impl Serialize) -> Result<WireValue, CallError> {
    let j = serde_json::to_value(v).map_err(|e| CallError::remote("Internal", e))?;
    Ok(WireValue::from_plain_json(&j))
}

fn strings(items: impl IntoIterator<Item = String>) -> WireValue {
    WireValue::List(items.into_iter().map(WireValue::Str).collect())
}

pub(super) async fn hub_call(hub: &Hub, method: &str, args: Vec<WireValue>) -> Result<WireValue, CallError> {
    let store = hub.store();
    match method {
        "list_workspaces" => Ok(strings(store.list_workspaces())),
        "list_plugins" => {
            let ws = str_arg(&args, 0, method)?;
            let plugins = store.list_plugins(ws).map_err(|e| CallError::remote("NoSuchWorkspace", e))?;
            let running = hub.router().list(ws);
            let rows: Vec<_> = plugins
                .iter()
                .map(|p| {
                    json!({
                        "name": p.spec.name,
                        "type": p.spec.runtime_kind.as_str(),
                        "version": p.spec.version,
                        "tag": p.chosen_tag,
                        "helper": p.helper,
                        "origin": p.origin,
                        "running": running.contains_key(&p.spec.name),
                    })
                })
                .collect();
            to_wire(&rows)
        }
        "install" => {
            let url = str_arg(&args, 0, method)?;
            let report = hub.installer().install_from_url(url).await.map_err(|e| CallError::remote("InstallFailed", e))?;
            to_wire(&report)
        }
        "remove" => {
            let (ws, name) = (str_arg(&args, 0, method)?, str_arg(&args, 1, method)?);
            hub.stop_plugin(ws, name).await;
            store.remove_plugin(ws, name).map_err(|e| CallError::remote("NoSuchPlugin", e))?;
            Ok(WireValue::Bool(true))
        }
        "launch" => {
            let (ws, name) = (str_arg(&args, 0, method)?, str_arg(&args, 1, method)?);
            let methods = hub.start_plugin(ws, name).await.map_err(|e| e.into_call_error())?;
            Ok(strings(methods))
        }
        "terminate" => {
            let (ws, name) = (str_arg(&args, 0, method)?, str_arg(&args, 1, method)?);
            Ok(WireValue::Bool(hub.stop_plugin(ws, name).await))
        }
        "status" => {
            let handles: Vec<_> = hub.supervisor().handles().iter().map(|h| h.status()).collect();
            to_wire(&handles)
        }
        "logs" => {
            let (ws, name) = (str_arg(&args, 0, method)?, str_arg(&args, 1, method)?);
            let lines = match hub.supervisor().handle(ws, name) {
                Some(h) => h.logs(),
                None => hub.events().logs(ws, name),
            };
            Ok(strings(lines))
        }
        "attach_engine" => {
            let url = str_arg(&args, 0, method)?;
            let token = opt_str_arg(&args, 1, method)?;
            let id = hub.attach_engine(url, token).await.map_err(|e| CallError::remote("EngineUnavailable", e))?;
            Ok(WireValue::Str(id))
        }
        "assign_engine" => {
            let (ws, name, engine) = (str_arg(&args, 0, method)?, str_arg(&args, 1, method)?, str_arg(&args, 2, method)?);
            hub.assign_engine(ws, name, engine).await.map_err(|e| CallError::remote("NoSuchEngine", e))?;
            Ok(WireValue::Bool(true))
        }
        "list_engines" => to_wire(&hub.engines()),
        "run_workflow" => {
            let def: WorkflowDef = serde_json::from_value(arg(&args, 0, method)?.to_plain_json())
                .map_err(|e| bad_args(method, e))?;
            let input = args.get(1).cloned().unwrap_or(WireValue::Null);
            run_workflow(hub.router(), &def, input).await.map_err(|e| CallError::remote("WorkflowFailed", e))
        }
        "list_registered" => {
            let ws = str_arg(&args, 0, method)?;
            to_wire(&hub.router().list(ws))
        }
        other => Err(CallError::NoSuchMethod { plugin: super::HUB_INTERFACE.to_string(), method: other.to_string() }),
    }
}

pub(super) async fn engine_call(hub: &Hub, session: &Session, method: &str, args: Vec<WireValue>) -> Result<WireValue, CallError> {
    let sup = hub.supervisor();
    match method {
        "provision" => {
            let ws = str_arg(&args, 0, method)?;
            let requirements = string_list(arg(&args, 1, method)?)?;
            let env = sup
                .provision(&EnvSpec { requirements, workspace: ws.to_string() })
                .await
                .map_err(|e| CallError::remote("ProvisionFailed", e))?;
            to_wire(&env)
        }
        "launch" => {
            let ws = str_arg(&args, 0, method)?;
            let spec = parse_plugin_file(str_arg(&args, 1, method)?).map_err(|e| bad_args(method, e))?;
            let tag = opt_str_arg(&args, 2, method)?;
            hub.set_upstream_session(ws, session);
            sup.launch(ws, &spec, tag).await.map_err(|e| CallError::remote(e.code(), e))?;
            Ok(strings(hub.router().list(ws).remove(&spec.name).unwrap_or_default()))
        }
        "terminate" => {
            let (ws, name) = (str_arg(&args, 0, method)?, str_arg(&args, 1, method)?);
            Ok(WireValue::Bool(sup.terminate(ws, name).await))
        }
        "status" => {
            let plugins: Vec<_> = sup.handles().iter().map(|h| h.status()).collect();
            to_wire(&json!({ "providers": sup.providers().prefixes(), "plugins": plugins }))
        }
        other => Err(CallError::NoSuchMethod { plugin: super::ENGINE_INTERFACE.to_string(), method: other.to_string() }),
    }
}
