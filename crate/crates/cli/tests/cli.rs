use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

fn xtribe(data_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xtribe"))
        .args(args)
        .env("XTRIBE_DATA_DIR", data_dir)
        .env_remove("XTRIBE_LISTEN")
        .output()
        .expect("runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_game(dir: &Path, gm_url: &str) -> std::path::PathBuf {
    std::fs::create_dir_all(dir.join("ui")).unwrap();
    std::fs::write(dir.join("ui/index.html"), "<!doctype html>").unwrap();
    let manifest = dir.join("game.toml");
    std::fs::write(
        &manifest,
        format!("id = \"demo\"\nname = \"Demo\"\ndescription = \"demo game\"\nplayers = 2\ngm_url = \"{gm_url}\"\n"),
    )
    .unwrap();
    manifest
}

#[test]
fn missing_data_dir_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let out = xtribe(&tmp.path().join("nope"), &["serve", "--listen", "127.0.0.1:1"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("does not exist"), "{}", stderr(&out));
}

#[test]
fn corrupt_store_is_refused_with_location() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("accounts.jsonl"), "{not json\n").unwrap();
    let out = xtribe(tmp.path(), &["user", "list"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("accounts.jsonl:1"), "{}", stderr(&out));
}

#[test]
fn bad_config_reports_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.toml");
    std::fs::write(&cfg, "listen = \"127.0.0.1:8080\"\nbogus = 1\n").unwrap();
    let out = xtribe(tmp.path(), &["--config", cfg.to_str().unwrap(), "user", "list"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));
}

#[test]
fn admin_commands_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    std::fs::create_dir(&data).unwrap();
    let manifest = write_game(tmp.path(), "http://127.0.0.1:9/");

    let out = xtribe(&data, &["game", "register", "--manifest", manifest.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("registered draft `demo`"));

    // nothing listens on the discard port, so the health check fails
    let out = xtribe(&data, &["game", "publish", "demo"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("health check failed"), "{}", stderr(&out));

    let out = xtribe(&data, &["user", "add", "--username", "zoe", "--password", "secret1", "--age", "30"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let out = xtribe(&data, &["user", "list"]);
    let users: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(users[0]["username"], "zoe");
    assert_eq!(users[0]["profile"]["age_band"], "25-34");
    assert!(!stdout(&out).contains("argon2"), "no verifier in listings");

    let out = xtribe(&data, &["game", "suspend", "demo"]);
    assert!(out.status.success());
    let out = xtribe(&data, &["game", "list"]);
    assert!(stdout(&out).contains("Suspended"));

    let out = xtribe(&data, &["stats", "export", "demo"]);
    assert!(out.status.success());
    assert!(stdout(&out).is_empty());
    let out = xtribe(&data, &["leaderboard", "demo"]);
    assert_eq!(stdout(&out).trim(), "[]");
}

#[test]
fn serve_answers_health_and_starts_clean() {
    let tmp = tempfile::tempdir().unwrap();
    let port = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let mut child = Command::new(env!("CARGO_BIN_EXE_xtribe"))
        .args(["serve", "--listen", &format!("127.0.0.1:{port}")])
        .env("XTRIBE_DATA_DIR", tmp.path())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stderr.take().unwrap()).lines();
    let deadline = Instant::now() + Duration::from_secs(20);
    loop {
        let line = lines.next().expect("server log").unwrap();
        if line.contains("platform listening") {
            break;
        }
        assert!(Instant::now() < deadline, "server did not start");
    }
    let get = |path: &str| http_get(&format!("http://127.0.0.1:{port}{path}"));
    assert_eq!(get("/health"), "ok");
    assert_eq!(get("/api/catalog"), "[]");
    child.kill().unwrap();
    child.wait().unwrap();
}

fn http_get(url: &str) -> String {
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
    rt.block_on(async { reqwest::get(url).await.unwrap().text().await.unwrap() })
}
