mod common;

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

use common::{fixtures, HUB_BIN};
use plughub::rpc::{NoHandler, Role, Session, SessionConfig, Transport};
use serde_json::Value as Json;

const CALC_URL: &str = "https://imjoy.io/#/app?w=w1&plugin=oeway/ImJoy-Plugins:calculator";

fn hub(args: &[&str], data: &Path) -> Output {
    Command::new(HUB_BIN)
        .args(args)
        .env("HUB_DATA_DIR", data)
        .env_remove("HUB_TOKEN")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).trim().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).to_string()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn exit_codes() {
    let data = tempfile::tempdir().unwrap();
    let files = tempfile::tempdir().unwrap();
    let fx = fixtures();
    let fx = fx.to_str().unwrap();
    let calc = common::fixture_file("oeway/ImJoy-Plugins/master/repository/calculator.imjoy.html");
    let good = write(files.path(), "calc.imjoy.html", &calc);
    let no_config = write(files.path(), "bare.imjoy.html", "<script>\nfn f(x) = x\n</script>\n");
    let bad_script = write(files.path(), "bad.imjoy.html", &common::plugin("bad", "worker", "", "fn f(x) =\nx +"));
    let cycle = "https://imjoy.io/#/app?w=w1&plugin=lab/graphs:Ping";
    let missing_repo = "https://imjoy.io/#/app?w=w1&plugin=nobody/nothing:Thing";

    let table: Vec<(Vec<&str>, u8)> = vec![
        (vec!["install", CALC_URL, "--fixture", fx], 0),
        (vec!["install", "not a link", "--fixture", fx], 1),
        (vec!["install", "https://imjoy.io/#/app?w=w1", "--fixture", fx], 1),
        (vec!["install", missing_repo, "--fixture", fx], 3),
        (vec!["install", cycle, "--fixture", fx], 2),
        (vec!["run", "-w", "w1", "-p", "calculator", "-m", "calc_exp", "--args", "[1]", "--embedded"], 0),
        (vec!["run", "-w", "w1", "-p", "calculator", "-m", "nope", "--args", "[1]", "--embedded"], 4),
        (vec!["run", "-w", "w1", "-p", "ghost", "-m", "f", "--embedded"], 4),
        (vec!["run", "-w", "w1", "-p", "calculator", "-m", "calc_exp", "--args", "[1", "--embedded"], 1),
        (vec!["run", "-w", "w1", "-p", "calculator", "-m", "calc_exp", "--args", "{}", "--embedded"], 1),
        (vec!["run", "-w", "w1", "-p", "calculator", "-m", "calc_exp", "--connect", "127.0.0.1:1"], 3),
        (vec!["check", &good], 0),
        (vec!["check", &no_config], 2),
        (vec!["check", &bad_script], 2),
        (vec!["check", "/no/such/file.imjoy.html"], 3),
        (vec!["ls"], 0),
        (vec!["ls", "-w", "nope"], 2),
        (vec!["ls", "--frobnicate"], 1),
        (vec!["teleport"], 1),
        (vec![], 1),
        (vec!["--help"], 0),
    ];
    for (args, want) in table {
        let o = hub(&args, data.path());
        assert_eq!(o.status.code(), Some(want as i32), "hub {args:?}\nstdout: {}\nstderr: {}", stdout(&o), stderr(&o));
    }
}

#[test]
fn run_prints_values_in_wire_notation() {
    let data = tempfile::tempdir().unwrap();
    let fx = fixtures();
    assert!(hub(&["install", CALC_URL, "--fixture", fx.to_str().unwrap()], data.path()).status.success());
    let run = |arg: &str| stdout(&hub(&["run", "-w", "w1", "-p", "calculator", "-m", "calc_exp", "--args", arg, "--embedded"], data.path()));
    assert_eq!(run("[0]"), "1");
    assert_eq!(run("[1]"), "2.718281828459045");
    assert_eq!(run("[-1]"), "0.36787944117144233");
}

#[test]
fn check_reports_what_is_wrong() {
    let files = tempfile::tempdir().unwrap();
    let no_config = write(files.path(), "bare.imjoy.html", "<script>\nfn f(x) = x\n</script>\n");
    let o = hub(&["check", &no_config], files.path());
    assert!(stdout(&o).contains("MissingConfig"), "{}", stdout(&o));
    let bad = write(files.path(), "bad.imjoy.html", &common::plugin("bad", "worker", "", "fn f(x) = (x"));
    let o = hub(&["check", &bad, "--json"], files.path());
    let j: Json = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(j["ok"], false);
    assert!(j["violations"][0].as_str().unwrap().contains("syntax error at 1:"), "{j}");
    let good = write(files.path(), "calc.imjoy.html", &common::fixture_file("oeway/ImJoy-Plugins/master/repository/calculator.imjoy.html"));
    let o = hub(&["check", &good], files.path());
    assert_eq!(stdout(&o), "ok: calculator (worker 0.1.0)");
}

#[test]
fn json_output_is_stable() {
    let fx = fixtures();
    let url = "https://imjoy.io/#/app?w=seg&plugin=oeway/ImJoy-Plugins:Segmenter";
    let mut reports = Vec::new();
    for _ in 0..2 {
        let data = tempfile::tempdir().unwrap();
        let o = hub(&["install", url, "--fixture", fx.to_str().unwrap(), "--json"], data.path());
        assert!(o.status.success(), "{}", stderr(&o));
        let report: Json = serde_json::from_str(&stdout(&o)).unwrap();
        let ls: Json = serde_json::from_str(&stdout(&hub(&["ls", "--json"], data.path()))).unwrap();
        reports.push((report, ls));
    }
    assert_eq!(reports[0], reports[1]);
    let (report, ls) = &reports[0];
    assert_eq!(report["plugins"].as_array().unwrap().len(), 2);
    assert_eq!(report["plugins"][1]["helper"], true);
    assert_eq!(ls[0]["workspace"], "seg");
    assert_eq!(ls[0]["plugins"].as_array().unwrap().len(), 2);
}

/// Spawns `hub serve` and returns the child and the address it printed.
fn serve(args: &[&str], env: &[(&str, &str)]) -> (std::process::Child, String) {
    let mut child = Command::new(HUB_BIN)
        .arg("serve")
        .args(args)
        .env_remove("HUB_TOKEN")
        .envs(env.iter().copied())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.split_whitespace().nth(3).unwrap_or_else(|| panic!("no address in {line:?}")).to_string();
    (child, addr)
}

fn stop(mut child: std::process::Child) {
    let pid = child.id().to_string();
    Command::new("kill").args(["-TERM", &pid]).status().unwrap();
    let status = child.wait().unwrap();
    assert!(status.success(), "{status:?}");
}

async fn try_client(addr: &str, token: &str) -> bool {
    let t = Transport::connect(addr).await.unwrap();
    Session::open(t, Role::Client, Some(token), std::sync::Arc::new(NoHandler), SessionConfig::default()).await.is_ok()
}

#[tokio::test]
async fn serve_honours_env_token_and_config_file() {
    let data = tempfile::tempdir().unwrap();
    let d = data.path().to_str().unwrap();
    let (child, addr) = serve(&["--listen", "127.0.0.1:0", "--token", "flag", "--data-dir", d], &[("HUB_TOKEN", "env")]);
    assert!(!try_client(&addr, "flag").await);
    assert!(try_client(&addr, "env").await);
    stop(child);

    let cfg = data.path().join("hub.toml");
    std::fs::write(&cfg, format!("listen = \"127.0.0.1:0\"\ntoken = \"fromfile\"\nui = true\ndata_dir = {d:?}\n")).unwrap();
    let (child, addr) = serve(&["--config", cfg.to_str().unwrap()], &[]);
    assert!(try_client(&addr, "fromfile").await);
    let body = http_root(&addr).await;
    assert!(body.starts_with("HTTP/1.1 200"), "{body}");
    stop(child);
}

async fn http_root(addr: &str) -> String {
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    let mut s = tokio::net::TcpStream::connect(addr).await.unwrap();
    s.write_all(b"GET / HTTP/1.1\r\nHost: x\r\n\r\n").await.unwrap();
    let mut out = String::new();
    s.read_to_string(&mut out).await.unwrap();
    out
}

#[tokio::test]
async fn run_connects_to_a_served_hub() {
    let data = tempfile::tempdir().unwrap();
    let fx = fixtures();
    assert!(hub(&["install", CALC_URL, "--fixture", fx.to_str().unwrap()], data.path()).status.success());
    let d = data.path().to_str().unwrap();
    let (child, addr) = serve(&["--listen", "127.0.0.1:0", "--token", "t", "--data-dir", d], &[]);
    let run = |extra: &[&str], token: Option<&str>| {
        let mut c = Command::new(HUB_BIN);
        c.args(["run", "-w", "w1", "-p", "calculator", "-m", "calc_exp", "--args", "[1]"]).args(extra).env_remove("HUB_TOKEN");
        if let Some(t) = token {
            c.env("HUB_TOKEN", t);
        }
        c.output().unwrap()
    };
    let ws = format!("ws://{addr}/ws");
    let o = run(&["--connect", &addr, "--token", "t"], None);
    assert_eq!(stdout(&o), "2.718281828459045", "{}", stderr(&o));
    let o = run(&["--connect", &ws], Some("t"));
    assert_eq!(stdout(&o), "2.718281828459045", "{}", stderr(&o));
    let o = run(&["--connect", &addr, "--token", "x"], None);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("AuthFailed"));
    stop(child);
}

#[tokio::test]
async fn shim_with_a_bad_token_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::config(dir.path());
    cfg.token = Some("right".into());
    let (hub, addr) = common::start(cfg).await;
    let spec = write(dir.path(), "p.imjoy.html", &common::plugin("p", "native", "", "fn f(x) = x"));
    let o = tokio::process::Command::new(HUB_BIN)
        .args(["shim", "--spec", &spec, "--connect", &addr, "--token", "wrong"])
        .env_remove("HUB_TOKEN")
        .output()
        .await
        .unwrap();
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("AuthFailed"));
    hub.shutdown().await;
}
