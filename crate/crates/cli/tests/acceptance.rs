//! End-to-end acceptance checks, one PASS/FAIL line each. Runs with
//! headless clients against in-process platforms and GMs.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::future::Future;
use std::net::SocketAddr;
use std::process::ExitCode;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, ensure, Context};
use axum::extract::Form;
use axum::routing::post;
use axum::Router;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use url::Url;
use xtribe_core::client::HeadlessClient;
use xtribe_core::events::Event;
use xtribe_core::matchmaking::{find_group, GroupingConstraint, Predicate, ProfileSnapshot, WaitingRoom};
use xtribe_core::protocol::{
    decode_gm_response, decode_message, decode_message_bytes, encode_message, ClientId, Endpoint, InstanceId, Message,
};
use xtribe_core::testkit::{TestGm, TestPlatform};
use xtribe_core::users::ScoreUpdate;
use xtribe_core::{GameId, InstanceState, PlatformConfig, SessionRef};
use xtribe_gms::{BroadcastGm, GmHandler, MinorityGm};
use xtribe_gms::minority::ValueGenerator;

const WAIT: Duration = Duration::from_secs(5);
/// Upper bound on any single criterion.
const CRITERION_LIMIT: Duration = Duration::from_secs(120);
/// Allowance for scheduling and HTTP on top of protocol deadlines.
const SLACK: Duration = Duration::from_millis(700);

const PROTOCOL_CASES: usize = 10_000;
const PROTOCOL_BUDGET: Duration = Duration::from_secs(10);
const MINORITY_BUDGET: Duration = Duration::from_secs(30);
const ORDERING_ACTIONS: usize = 1_000;
const MATCHMAKING_TRIALS: usize = 100;

fn fast_config() -> PlatformConfig {
    PlatformConfig {
        liveness_window: Duration::from_millis(800),
        loading_timeout: Duration::from_secs(2),
        gm_request_timeout: Duration::from_millis(800),
        poll_linger: Duration::from_millis(300),
        ..PlatformConfig::default()
    }
}

fn manifest(id: &str, players: usize) -> String {
    format!("id = \"{id}\"\nname = \"{id}\"\ndescription = \"acceptance game\"\nplayers = {players}\n")
}

/// Joins `clients` in order, waits for the load message and marks each ready.
async fn seat(clients: &mut [HeadlessClient], game: &str) -> anyhow::Result<(InstanceId, Vec<ClientId>)> {
    for c in clients.iter() {
        c.join(game).await?;
    }
    let mut instance = None;
    let mut ids = Vec::new();
    for c in clients.iter_mut() {
        let (load, _) = c.wait_for("instance", WAIT).await?;
        ensure!(instance.is_none() || instance == load.instance_id, "members loaded into different instances");
        instance = load.instance_id;
        ids.push(load.client_id.context("load without clientId")?);
        c.ready().await?;
    }
    Ok((instance.context("no instance")?, ids))
}

async fn guests(tp: &TestPlatform, game: &str, n: usize) -> anyhow::Result<Vec<HeadlessClient>> {
    let mut out = Vec::new();
    for _ in 0..n {
        let mut c = tp.client();
        c.open_session(game, None).await?;
        out.push(c);
    }
    Ok(out)
}

async fn members(tp: &TestPlatform, game: &str, names: &[&str]) -> anyhow::Result<Vec<HeadlessClient>> {
    let mut out = Vec::new();
    for name in names {
        tp.client().register(name, "acceptance-pw", json!({"language": "en"})).await?;
        let mut c = tp.client();
        c.open_session(game, Some((name, "acceptance-pw"))).await?;
        out.push(c);
    }
    Ok(out)
}

async fn gm_push(tp: &TestPlatform, token: &str, messages: &Value) -> anyhow::Result<reqwest::StatusCode> {
    let resp = reqwest::Client::new()
        .post(tp.base.join("/gm/push")?)
        .header("x-gm-token", token)
        .form(&[("message", messages.to_string())])
        .send()
        .await?;
    Ok(resp.status())
}

fn over_message(instance: &InstanceId, scores: &BTreeMap<ClientId, f64>) -> Value {
    json!({"recipient": "system", "topic": "over", "instanceId": instance, "params": scores})
}

// ---------------------------------------------------------------- protocol

fn random_string(rng: &mut StdRng, max: usize) -> String {
    const ALPHABET: &[char] = &['a', 'Z', '0', '_', '-', ' ', '"', '\\', '/', 'é', 'ß', '中', '😀', '\n', '\u{0}'];
    let len = rng.random_range(1..=max);
    (0..len).map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())]).collect()
}

fn random_json(rng: &mut StdRng, depth: u32) -> Value {
    let leaf = depth == 0 || rng.random_bool(0.4);
    match rng.random_range(0..if leaf { 5 } else { 7 }) {
        0 => Value::Null,
        1 => Value::Bool(rng.random()),
        2 => json!(rng.random::<i64>()),
        3 => json!(rng.random_range(-1e9..1e9)),
        4 => Value::String(random_string(rng, 8)),
        5 => Value::Array((0..rng.random_range(0..4)).map(|_| random_json(rng, depth - 1)).collect()),
        _ => Value::Object(
            (0..rng.random_range(0..4))
                .map(|_| (random_string(rng, 6), random_json(rng, depth - 1)))
                .collect(),
        ),
    }
}

fn random_message(rng: &mut StdRng) -> Message {
    let endpoint = |rng: &mut StdRng| {
        rng.random_bool(0.8)
            .then(|| Endpoint::ALL[rng.random_range(0..Endpoint::ALL.len())])
    };
    let mut m = Message::new(random_string(rng, 12));
    m.sender = endpoint(rng);
    m.recipient = endpoint(rng);
    if rng.random_bool(0.7) {
        m.params = Some(random_json(rng, 3));
    }
    if rng.random_bool(0.7) {
        m.instance_id = Some(InstanceId::new(random_string(rng, 10)));
    }
    m.broadcast = rng.random_bool(0.3);
    if !m.broadcast && (rng.random_bool(0.5) || m.recipient == Some(Endpoint::Client)) {
        m.client_id = Some(ClientId::new(random_string(rng, 10)));
    }
    for i in 0..rng.random_range(0..3) {
        m.extensions.insert(format!("ext{i}"), random_json(rng, 1));
    }
    m
}

fn mutate(rng: &mut StdRng, mut bytes: Vec<u8>) -> Vec<u8> {
    for _ in 0..rng.random_range(1..6) {
        match rng.random_range(0..4) {
            0 if !bytes.is_empty() => {
                let at = rng.random_range(0..bytes.len());
                bytes[at] = rng.random();
            }
            1 if !bytes.is_empty() => bytes.truncate(rng.random_range(0..bytes.len())),
            2 => {
                let at = rng.random_range(0..=bytes.len());
                bytes.insert(at, *b"{}[]\",:\\0-e".get(rng.random_range(0..11)).unwrap());
            }
            _ => bytes.extend((0..rng.random_range(0..8)).map(|_| rng.random::<u8>())),
        }
    }
    bytes
}

async fn protocol_round_trip() -> anyhow::Result<String> {
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(0x5eed);
    let mut samples = Vec::with_capacity(PROTOCOL_CASES);
    for i in 0..PROTOCOL_CASES {
        let m = random_message(&mut rng);
        m.validate().map_err(|v| anyhow!("generator produced an invalid message: {v}"))?;
        let text = encode_message(&m)?;
        let back = decode_message(&text).with_context(|| format!("case {i}: {text}"))?;
        ensure!(back == m, "case {i} changed in transit: {text}");
        samples.push(text.into_bytes());
    }
    let mut rejected = 0;
    for i in 0..PROTOCOL_CASES {
        let bytes = if i % 2 == 0 {
            (0..rng.random_range(0..64)).map(|_| rng.random::<u8>()).collect()
        } else {
            let seed = samples[rng.random_range(0..samples.len())].clone();
            mutate(&mut rng, seed)
        };
        let decoded = decode_message_bytes(&bytes);
        if let Ok(text) = std::str::from_utf8(&bytes) {
            let _ = decode_gm_response(text);
        }
        match decoded {
            Ok(m) => m.validate().map_err(|v| anyhow!("decoder accepted an invalid message: {v}"))?,
            Err(_) => rejected += 1,
        }
    }
    let elapsed = started.elapsed();
    ensure!(elapsed < PROTOCOL_BUDGET, "took {elapsed:?}");
    Ok(format!(
        "{PROTOCOL_CASES} round trips, {PROTOCOL_CASES} fuzz inputs ({rejected} rejected, 0 panics) in {elapsed:.2?} (limit {PROTOCOL_BUDGET:?})"
    ))
}

// ---------------------------------------------------------------- flow

fn label(e: &Event, names: &HashMap<SessionRef, &str>) -> String {
    let who = |s: &SessionRef| names.get(s).copied().unwrap_or("?").to_owned();
    match e {
        Event::Joined { session, .. } => format!("join {}", who(session)),
        Event::Queued { session, position, .. } => format!("queued {} #{position}", who(session)),
        Event::InstanceFormed { members, .. } => format!("formed {members}"),
        Event::ToGm { sender, topic, .. } => format!("gm <- {sender} {topic}"),
        Event::LoadSent { session, .. } => format!("load {}", who(session)),
        Event::Ready { .. } => "ready".into(),
        Event::Started { .. } => "started".into(),
        Event::Delivered { session, topic, broadcast, .. } => {
            format!("deliver {} {topic}{}", who(session), if *broadcast { " (broadcast)" } else { "" })
        }
        Event::OverReceived { .. } => "over".into(),
        Event::Closed { scored, .. } => format!("closed scored={scored}"),
        other => format!("{other:?}"),
    }
}

async fn two_player_flow() -> anyhow::Result<String> {
    const RELAYED: usize = 4;
    let gm = TestGm::spawn(|m| BroadcastGm.handle(m)).await;
    let tp = TestPlatform::start(fast_config()).await;
    let game = tp.add_game(&manifest("duo", 2), &gm.url).await;
    let mut clients = guests(&tp, "duo", 2).await?;

    let mut names = HashMap::new();
    for (e, name) in tp
        .platform
        .events()
        .iter()
        .filter_map(|l| match l.event {
            Event::SessionOpened { session, .. } => Some(session),
            _ => None,
        })
        .zip(["a", "b"])
    {
        names.insert(e, name);
    }
    let cut = tp.platform.events().last().map_or(0, |l| l.seq);

    let (iid, ids) = seat(&mut clients, "duo").await?;
    for i in 0..RELAYED {
        clients[i % 2].send("chat", Some(json!({"n": i}))).await?;
    }
    for c in clients.iter_mut() {
        for i in 0..RELAYED {
            let (m, _) = c.wait_for("chat", WAIT).await?;
            ensure!(m.params == Some(json!({"n": i})), "relay out of order");
        }
    }
    let scores: BTreeMap<_, _> = ids.iter().map(|c| (c.clone(), 1.0)).collect();
    let status = gm_push(&tp, game.gm_auth_token(), &over_message(&iid, &scores)).await?;
    ensure!(status.is_success(), "over push refused: {status}");
    for c in clients.iter_mut() {
        c.wait_for("over", WAIT).await?;
    }

    let got: Vec<String> = tp
        .platform
        .events()
        .iter()
        .filter(|l| l.seq > cut)
        .map(|l| label(&l.event, &names))
        .collect();
    let mut want: Vec<String> = [
        "join a",
        "queued a #1",
        "join b",
        "formed 2",
        "gm <- system instance",
        "load a",
        "load b",
        "ready",
        "gm <- system ready",
        "ready",
        "started",
        "gm <- system ready",
    ]
    .map(String::from)
    .into();
    for _ in 0..RELAYED {
        want.push("gm <- client chat".into());
        want.push("deliver a chat (broadcast)".into());
        want.push("deliver b chat (broadcast)".into());
    }
    want.push("over".into());
    want.push("closed scored=true".into());
    ensure!(got == want, "event sequence differs\n  got:  {got:?}\n  want: {want:?}");
    ensure!(tp.platform.instance_state(&iid) == Some(InstanceState::Over), "instance not over");
    Ok(format!("{} events in the expected order, {RELAYED} relayed broadcasts", want.len()))
}

// ---------------------------------------------------------------- minority

/// Brute force over one assignment: the unique holder of the value picked
/// by exactly one player wins that value.
fn minority_oracle(choices: &[f64; 3]) -> Option<(usize, f64)> {
    let mut winner = None;
    for (i, v) in choices.iter().enumerate() {
        if choices.iter().filter(|w| *w == v).count() == 1 {
            winner = Some((i, *v));
        }
    }
    winner
}

async fn minority_exhaustive() -> anyhow::Result<String> {
    let started = Instant::now();
    let (v1, v2) = (5.0, 10.0);
    let handler = Arc::new(MinorityGm::new(ValueGenerator::new(vec![v1], v2 / v1, None)?, Duration::from_secs(3600)));
    let gm = TestGm::spawn(move |m| handler.minority_handle(&m)).await;
    let tp = TestPlatform::start(fast_config()).await;
    tp.add_game(&manifest("minority", 3), &gm.url).await;
    let names = ["player0", "player1", "player2"];
    let mut clients = members(&tp, "minority", &names).await?;
    let mut accounts = Vec::new();
    for n in names {
        accounts.push(tp.platform.users().authenticate(n, "acceptance-pw")?);
    }

    let (mut no_winner, mut winners) = (0, 0);
    for mask in 0..8u32 {
        let choices: [f64; 3] = std::array::from_fn(|i| if mask >> i & 1 == 1 { v2 } else { v1 });
        let (iid, ids) = seat(&mut clients, "minority").await?;
        for (c, choice) in clients.iter_mut().zip(choices) {
            let (offer, _) = c.wait_for("mgChoices", WAIT).await?;
            ensure!(offer.params == Some(json!([v1, v2])), "offered {:?}", offer.params);
            c.send("mgUChoice", Some(json!(choice))).await?;
        }
        let mut results = Vec::new();
        for c in clients.iter_mut() {
            results.push(c.wait_for("mgResult", WAIT).await?.0);
            c.wait_for("over", WAIT).await?;
        }
        let params = results[0].params.clone().context("result without params")?;
        ensure!(results.iter().all(|r| r.params.as_ref() == Some(&params)), "players saw different results");

        let ledger = tp.platform.users().ledger(&GameId::new("minority"));
        let batch = ledger.iter().find(|b| b.instance_id == iid).context("match not credited")?;
        let credited = |i: usize| {
            batch
                .entries
                .iter()
                .find(|e| e.account_id == accounts[i])
                .map(|e| e.score)
        };
        match minority_oracle(&choices) {
            None => {
                no_winner += 1;
                ensure!(params["winner"].is_null(), "{choices:?}: expected no winner, got {params}");
                ensure!((0..3).all(|i| credited(i) == Some(0.0)), "{choices:?}: nobody should score");
            }
            Some((w, amount)) => {
                winners += 1;
                ensure!(params["winner"] == json!(ids[w]), "{choices:?}: expected player {w} to win, got {params}");
                ensure!(params["amount"].as_f64() == Some(amount), "{choices:?}: amount {}", params["amount"]);
                ensure!(credited(w) == Some(amount), "{choices:?}: winner credited {:?}", credited(w));
                ensure!(
                    (0..3).filter(|&i| i != w).all(|i| credited(i) == Some(0.0)),
                    "{choices:?}: losers credited"
                );
            }
        }
    }
    let elapsed = started.elapsed();
    ensure!(no_winner == 2 && winners == 6, "{no_winner} without winner, {winners} with");
    ensure!(elapsed < MINORITY_BUDGET, "took {elapsed:?}");
    Ok(format!("8 assignments: 2 without winner, 6 winners credited their amount, in {elapsed:.2?} (limit {MINORITY_BUDGET:?})"))
}

// ---------------------------------------------------------------- disconnect

async fn disconnect_drop() -> anyhow::Result<String> {
    let config = fast_config();
    let bound = config.liveness_window + config.reap_interval() + SLACK;
    let gm = TestGm::spawn(|m| BroadcastGm.handle(m)).await;
    let tp = TestPlatform::start(config).await;
    tp.add_game(&manifest("trio", 3), &gm.url).await;
    let mut clients = guests(&tp, "trio", 3).await?;
    let (iid, ids) = seat(&mut clients, "trio").await?;
    let beats: Vec<_> = clients[..2]
        .iter()
        .map(|c| c.spawn_heartbeat(Duration::from_millis(150)))
        .collect::<Result<_, _>>()?;

    let killed = clients.pop().context("three clients")?;
    let killed_at = Instant::now();
    drop(killed);

    let mut latest = Duration::ZERO;
    for c in clients.iter_mut() {
        let (m, _) = c
            .wait_for("drop", bound)
            .await
            .with_context(|| format!("no drop within {bound:?}"))?;
        latest = latest.max(killed_at.elapsed());
        ensure!(m.sender == Some(Endpoint::System) && m.broadcast, "drop is not a system broadcast");
        ensure!(m.params == Some(json!({"clientId": ids[2]})), "drop names {:?}", m.params);
    }
    ensure!(latest <= bound, "last drop after {latest:?}");
    for c in clients.iter_mut() {
        let extra = c.drain(Duration::from_millis(500)).await?;
        ensure!(extra.is_empty(), "deliveries after abort: {:?}", extra.iter().map(|m| &m.topic).collect::<Vec<_>>());
        let err = c.send("chat", None).await.err().context("send after abort accepted")?;
        ensure!(err.code() == Some("instance_closed"), "send after abort: {err}");
    }
    let gm_drops = gm.messages().iter().filter(|m| m.topic == "drop").count();
    ensure!(gm_drops == 1, "GM received {gm_drops} drops");
    ensure!(tp.platform.instance_state(&iid) == Some(InstanceState::Aborted), "instance not aborted");
    let events = tp.platform.instance_events(&iid);
    let aborted = events.iter().position(|e| matches!(e, Event::Aborted { .. })).context("no abort event")?;
    ensure!(
        !events[aborted..].iter().any(|e| matches!(e, Event::Delivered { .. })),
        "delivery logged after abort"
    );
    beats.into_iter().for_each(|b| b.abort());
    Ok(format!("2/2 survivors got one drop, GM got one, last after {latest:.2?} (limit {bound:?})"))
}

// ---------------------------------------------------------------- anonymity

struct Capture {
    url: Url,
    bytes: Arc<Mutex<Vec<u8>>>,
    task: tokio::task::JoinHandle<()>,
}

impl Drop for Capture {
    fn drop(&mut self) {
        self.task.abort();
    }
}

async fn pump(mut from: tokio::net::tcp::OwnedReadHalf, mut to: tokio::net::tcp::OwnedWriteHalf, log: Arc<Mutex<Vec<u8>>>) {
    let mut buf = [0u8; 8192];
    loop {
        match from.read(&mut buf).await {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                log.lock().unwrap().extend_from_slice(&buf[..n]);
                if to.write_all(&buf[..n]).await.is_err() {
                    break;
                }
            }
        }
    }
    let _ = to.shutdown().await;
}

/// A TCP relay that records every byte in both directions.
async fn capture_proxy(target: SocketAddr) -> anyhow::Result<Capture> {
    let listener = TcpListener::bind("127.0.0.1:0").await?;
    let url = Url::parse(&format!("http://{}/", listener.local_addr()?))?;
    let bytes = Arc::new(Mutex::new(Vec::new()));
    let log = bytes.clone();
    let task = tokio::spawn(async move {
        while let Ok((inbound, _)) = listener.accept().await {
            let log = log.clone();
            tokio::spawn(async move {
                let Ok(outbound) = TcpStream::connect(target).await else { return };
                let (ri, wi) = inbound.into_split();
                let (ro, wo) = outbound.into_split();
                tokio::join!(pump(ri, wo, log.clone()), pump(ro, wi, log));
            });
        }
    });
    Ok(Capture { url, bytes, task })
}

fn contains(haystack: &[u8], needle: &str) -> bool {
    haystack.windows(needle.len()).any(|w| w == needle.as_bytes())
}

async fn anonymization() -> anyhow::Result<String> {
    let handler = Arc::new(MinorityGm::new(ValueGenerator::default(), Duration::from_secs(3600)));
    let gm = TestGm::spawn(move |m| handler.minority_handle(&m)).await;
    let target = SocketAddr::from(([127, 0, 0, 1], gm.url.port().context("port")?));
    let proxy = capture_proxy(target).await?;
    let tp = TestPlatform::start(fast_config()).await;
    tp.add_game(&manifest("hidden", 3), &proxy.url).await;
    let names = ["alice.secret", "bob.secret", "carol.secret"];
    let mut clients = members(&tp, "hidden", &names).await?;
    let (iid, ids) = seat(&mut clients, "hidden").await?;
    for c in clients.iter_mut() {
        let (offer, _) = c.wait_for("mgChoices", WAIT).await?;
        let first = offer.params.as_ref().and_then(|p| p[0].as_f64()).context("offer")?;
        c.send("mgUChoice", Some(json!(first))).await?;
    }
    for c in clients.iter_mut() {
        c.wait_for("over", WAIT).await?;
    }

    let captured = proxy.bytes.lock().unwrap().clone();
    ensure!(contains(&captured, iid.as_str()), "capture does not contain the instanceId; proxy not in path?");
    for id in &ids {
        ensure!(contains(&captured, id.as_str()), "capture misses clientId {id}");
    }
    let mut secrets: Vec<String> = Vec::new();
    for (c, name) in clients.iter().zip(names) {
        secrets.push(c.session_token().context("session")?.to_owned());
        secrets.push(tp.platform.users().authenticate(name, "acceptance-pw")?.as_str().to_owned());
        secrets.push(name.to_owned());
    }
    for s in &secrets {
        ensure!(!contains(&captured, s), "captured GM traffic contains {s:?}");
    }
    Ok(format!(
        "{} bytes captured, none of {} tokens/account ids/usernames present",
        captured.len(),
        secrets.len()
    ))
}

// ---------------------------------------------------------------- ordering

async fn ordering() -> anyhow::Result<String> {
    let counter = Arc::new(AtomicU64::new(0));
    let gm = TestGm::spawn(move |m: Message| {
        if m.sender != Some(Endpoint::Client) {
            return Vec::new();
        }
        let n = counter.fetch_add(1, Ordering::SeqCst) + 1;
        vec![Message::new("echo")
            .addressed_to(Endpoint::Client)
            .broadcast()
            .in_instance(m.instance_id.expect("client messages carry an instance"))
            .with_params(json!({"seq": n}))]
    })
    .await;
    let tp = TestPlatform::start(PlatformConfig {
        max_queued_messages: 4 * ORDERING_ACTIONS,
        ..fast_config()
    })
    .await;
    tp.add_game(&manifest("order", 3), &gm.url).await;
    let mut clients = guests(&tp, "order", 3).await?;
    seat(&mut clients, "order").await?;

    let started = Instant::now();
    let mut tasks = Vec::new();
    for (i, mut c) in clients.into_iter().enumerate() {
        let share = ORDERING_ACTIONS / 3 + usize::from(i < ORDERING_ACTIONS % 3);
        tasks.push(tokio::spawn(async move {
            for k in 0..share {
                c.send("act", Some(json!(k))).await?;
            }
            let mut seen = Vec::new();
            let deadline = Instant::now() + Duration::from_secs(30);
            while seen.len() < ORDERING_ACTIONS && Instant::now() < deadline {
                for m in c.poll(Duration::from_millis(200)).await? {
                    if m.topic == "echo" {
                        seen.push(m.params.as_ref().and_then(|p| p["seq"].as_u64()).context("seq")?);
                    }
                }
            }
            anyhow::Ok(seen)
        }));
    }
    for (i, t) in tasks.into_iter().enumerate() {
        let seen = t.await??;
        ensure!(seen.len() == ORDERING_ACTIONS, "client {i} saw {} echoes", seen.len());
        if let Some(w) = seen.windows(2).find(|w| w[0] >= w[1]) {
            bail!("client {i} saw {} then {}", w[0], w[1]);
        }
    }
    Ok(format!(
        "{ORDERING_ACTIONS} actions from 3 clients, each saw {ORDERING_ACTIONS} strictly increasing echoes in {:.2?}",
        started.elapsed()
    ))
}

// ---------------------------------------------------------------- matchmaking

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            go(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, k, &mut Vec::new(), &mut out);
    out
}

fn group_ok(pred: &Predicate, group: &[&ProfileSnapshot]) -> bool {
    match pred {
        Predicate::SimilarScore { band } => {
            let max = group.iter().map(|p| p.score).fold(f64::MIN, f64::max);
            let min = group.iter().map(|p| p.score).fold(f64::MAX, f64::min);
            max - min <= *band
        }
        Predicate::DistinctLocation => {
            let locs: Option<HashSet<_>> = group.iter().map(|p| p.location.as_ref()).collect();
            locs.is_some_and(|s| s.len() == group.len())
        }
        Predicate::SameLanguage => {
            let langs: Option<HashSet<_>> = group.iter().map(|p| p.language.as_ref()).collect();
            langs.is_some_and(|s| s.len() == 1)
        }
    }
}

/// First index combination in lexicographic order, so the most senior
/// player who can be grouped at all is always in the group.
fn matchmaking_oracle(c: &GroupingConstraint, queue: &[ProfileSnapshot]) -> Option<Vec<usize>> {
    combinations(queue.len(), c.required_players).into_iter().find(|idx| {
        let group: Vec<_> = idx.iter().map(|&i| &queue[i]).collect();
        c.predicates.iter().all(|p| group_ok(p, &group))
    })
}

fn random_snapshot(rng: &mut StdRng) -> ProfileSnapshot {
    const LANGS: [&str; 3] = ["en", "it", "fr"];
    const PLACES: [&str; 5] = ["rome", "paris", "turin", "lyon", "oslo"];
    ProfileSnapshot {
        language: rng.random_bool(0.9).then(|| LANGS[rng.random_range(0..3)].to_owned()),
        location: rng.random_bool(0.9).then(|| PLACES[rng.random_range(0..5)].to_owned()),
        score: f64::from(rng.random_range(0u32..200)),
    }
}

fn random_constraint(rng: &mut StdRng) -> anyhow::Result<GroupingConstraint> {
    let predicates = (0..rng.random_range(0..=2))
        .map(|_| match rng.random_range(0..3) {
            0 => Predicate::SimilarScore {
                band: f64::from(rng.random_range(0u32..80)),
            },
            1 => Predicate::DistinctLocation,
            _ => Predicate::SameLanguage,
        })
        .collect();
    GroupingConstraint::new(rng.random_range(1..=5), predicates).map_err(|e| anyhow!("{e:?}"))
}

async fn matchmaking() -> anyhow::Result<String> {
    let mut rng = StdRng::seed_from_u64(0xfeed);
    let mut agreed = 0;
    let mut formed = 0;
    for trial in 0..MATCHMAKING_TRIALS {
        let c = random_constraint(&mut rng)?;
        let joins: Vec<_> = (0..rng.random_range(0..=12)).map(|_| random_snapshot(&mut rng)).collect();

        let refs: Vec<_> = joins.iter().collect();
        let mut ok = find_group(&c, &refs) == matchmaking_oracle(&c, &joins);

        // arrival-order replay through a waiting room
        let mut room = WaitingRoom::new(c.clone());
        let mut model: Vec<(usize, ProfileSnapshot)> = Vec::new();
        let now = Instant::now();
        for (key, snap) in joins.iter().enumerate() {
            room.enqueue(key, now, snap.clone()).map_err(|e| anyhow!("{e:?}"))?;
            model.push((key, snap.clone()));
            let got = room.try_form().map(|g| g.into_iter().map(|e| e.key).collect::<Vec<_>>());
            let queue: Vec<_> = model.iter().map(|(_, s)| s.clone()).collect();
            let want = matchmaking_oracle(&c, &queue).map(|idx| idx.iter().map(|&i| model[i].0).collect::<Vec<_>>());
            ok &= got == want;
            if let Some(group) = want {
                formed += 1;
                model.retain(|(k, _)| !group.contains(k));
            }
            ok &= room.len() == model.len();
        }
        if ok {
            agreed += 1;
        } else {
            eprintln!("matchmaking trial {trial} disagrees: {c:?} {joins:?}");
        }
    }
    ensure!(agreed == MATCHMAKING_TRIALS, "{agreed}/{MATCHMAKING_TRIALS} trials agree");
    Ok(format!("{agreed}/{MATCHMAKING_TRIALS} trials agree with the oracle ({formed} groups formed)"))
}

// ---------------------------------------------------------------- faults

#[derive(Clone, Copy, Debug)]
enum Fault {
    Garbage,
    Timeout,
    Oversize,
}

/// A GM that behaves until a client sends `move`.
async fn fault_gm(fault: Fault, max_bytes: usize) -> anyhow::Result<(Url, tokio::task::JoinHandle<()>)> {
    let app = Router::new().route(
        "/",
        post(move |Form(form): Form<HashMap<String, String>>| async move {
            let is_move = form
                .get("message")
                .and_then(|t| decode_message(t).ok())
                .is_some_and(|m| m.topic == "move");
            if !is_move {
                return String::new();
            }
            match fault {
                Fault::Garbage => "{\"topic\": \"x\", \"recipient\": ".to_owned(),
                Fault::Timeout => {
                    tokio::time::sleep(Duration::from_secs(30)).await;
                    String::new()
                }
                Fault::Oversize => {
                    let one = r#"{"recipient":"client","topic":"x","broadcast":true}"#;
                    format!("[{}]", vec![one; max_bytes / one.len() + 2].join(","))
                }
            }
        }),
    );
    let listener = TcpListener::bind("127.0.0.1:0").await?;
    let url = Url::parse(&format!("http://{}/", listener.local_addr()?))?;
    let task = tokio::spawn(async move {
        let _ = axum::serve(listener, app).await;
    });
    Ok((url, task))
}

async fn gm_faults() -> anyhow::Result<String> {
    let config = PlatformConfig {
        max_response_bytes: 4096,
        ..fast_config()
    };
    let bound = config.gm_request_timeout + SLACK;
    let mut report = Vec::new();
    for (fault, class) in [
        (Fault::Garbage, "gm_protocol_fault"),
        (Fault::Timeout, "gm_unreachable"),
        (Fault::Oversize, "gm_protocol_fault"),
    ] {
        let (url, task) = fault_gm(fault, config.max_response_bytes).await?;
        let tp = TestPlatform::start(config.clone()).await;
        tp.add_game(&manifest("faulty", 2), &url).await;
        let mut clients = guests(&tp, "faulty", 2).await?;
        let (iid, _) = seat(&mut clients, "faulty").await?;

        let t0 = Instant::now();
        let sent = tokio::time::timeout(bound, clients[0].send("move", None))
            .await
            .map_err(|_| anyhow!("{fault:?}: send hung past {bound:?}"))?;
        let err = sent.err().with_context(|| format!("{fault:?}: send succeeded"))?;
        ensure!(err.code() == Some(class), "{fault:?}: send failed with {err}");
        for c in clients.iter_mut() {
            let left = bound.saturating_sub(t0.elapsed());
            let (m, _) = c
                .wait_for("error", left)
                .await
                .with_context(|| format!("{fault:?}: no error within {bound:?}"))?;
            ensure!(m.params == Some(json!({"reason": class})), "{fault:?}: error {:?}", m.params);
        }
        let elapsed = t0.elapsed();
        ensure!(elapsed <= bound, "{fault:?}: took {elapsed:?}");
        ensure!(
            tp.platform.instance_state(&iid) == Some(InstanceState::Aborted),
            "{fault:?}: instance not aborted"
        );
        report.push(format!("{fault:?} {elapsed:.2?}"));
        task.abort();
    }
    Ok(format!("aborted with error to all members: {} (limit {bound:?})", report.join(", ")))
}

// ---------------------------------------------------------------- leaderboard

async fn leaderboard() -> anyhow::Result<String> {
    let gm = TestGm::spawn(|_| Vec::new()).await;
    let tp = TestPlatform::start(fast_config()).await;
    let game = tp.add_game(&manifest("ranked", 2), &gm.url).await;
    let game_id = GameId::new("ranked");
    let names = ["ranked0", "ranked1", "ranked2", "ranked3"];
    let mut clients: Vec<_> = members(&tp, "ranked", &names).await?.into_iter().map(Some).collect();

    let script: [((usize, f64), (usize, f64)); 5] = [
        ((0, 3.0), (1, 1.5)),
        ((2, 0.0), (3, 7.0)),
        ((0, 2.0), (2, 2.0)),
        ((1, 4.25), (3, 1.0)),
        ((3, 0.5), (0, 10.0)),
    ];
    let mut expected = [0.0f64; 4];
    let mut first_over = None;
    for ((a, sa), (b, sb)) in script {
        let mut pair = vec![clients[a].take().context("seat a")?, clients[b].take().context("seat b")?];
        let (iid, ids) = seat(&mut pair, "ranked").await?;
        let scores: BTreeMap<_, _> = [(ids[0].clone(), sa), (ids[1].clone(), sb)].into();
        let over = over_message(&iid, &scores);
        ensure!(gm_push(&tp, game.gm_auth_token(), &over).await?.is_success(), "over refused");
        for c in pair.iter_mut() {
            c.wait_for("over", WAIT).await?;
        }
        expected[a] += sa;
        expected[b] += sb;
        first_over.get_or_insert((iid, scores, over));
        clients[b] = pair.pop();
        clients[a] = pair.pop();
    }

    let before = tp.platform.users().ledger(&game_id);
    let (iid, scores, over) = first_over.context("script is not empty")?;
    let status = gm_push(&tp, game.gm_auth_token(), &over).await?;
    ensure!(status.is_client_error(), "replayed over accepted with {status}");
    let direct = tp.platform.users().update_scores(&game_id, &iid, &scores)?;
    ensure!(matches!(direct, ScoreUpdate::Replay), "direct replay was applied");
    let ledger = tp.platform.users().ledger(&game_id);
    ensure!(ledger == before, "replay changed the ledger");
    ensure!(ledger.len() == script.len(), "{} ledger batches", ledger.len());

    let board = tp.client().leaderboard("ranked").await?;
    let board = board.as_array().context("leaderboard is a list")?;
    ensure!(board.len() == names.len(), "{} leaderboard rows", board.len());
    for (i, name) in names.iter().enumerate() {
        let account = tp.platform.users().authenticate(name, "acceptance-pw")?;
        let ledger_sum: f64 = ledger
            .iter()
            .flat_map(|b| &b.entries)
            .filter(|e| e.account_id == account)
            .map(|e| e.score)
            .sum();
        let row = board
            .iter()
            .find(|r| r["display_name"] == *name)
            .with_context(|| format!("{name} missing from leaderboard"))?;
        let total = row["total_score"].as_f64().context("total")?;
        ensure!(total == ledger_sum, "{name}: leaderboard {total} vs ledger {ledger_sum}");
        ensure!(total == expected[i], "{name}: leaderboard {total} vs scripted {}", expected[i]);
    }
    let totals: Vec<f64> = board.iter().filter_map(|r| r["total_score"].as_f64()).collect();
    ensure!(totals.windows(2).all(|w| w[0] >= w[1]), "leaderboard not sorted: {totals:?}");
    Ok(format!(
        "{} matches, totals {:?} equal ledger sums, replay rejected ({status}) and credited nothing",
        script.len(),
        expected
    ))
}

// ---------------------------------------------------------------- runner

async fn run<F>(name: &str, check: F) -> bool
where
    F: Future<Output = anyhow::Result<String>> + Send + 'static,
{
    let outcome = match tokio::time::timeout(CRITERION_LIMIT, tokio::spawn(check)).await {
        Err(_) => Err(anyhow!("did not finish within {CRITERION_LIMIT:?}")),
        Ok(Err(join)) => Err(anyhow!("panicked: {join}")),
        Ok(Ok(result)) => result,
    };
    match outcome {
        Ok(detail) => {
            println!("PASS {name}: {detail}");
            true
        }
        Err(e) => {
            println!("FAIL {name}: {e:#}");
            false
        }
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    let mut ok = true;
    ok &= run("protocol round-trip and fuzzing", protocol_round_trip()).await;
    ok &= run("two-player communication flow", two_player_flow()).await;
    ok &= run("minority game exhaustive oracle", minority_exhaustive()).await;
    ok &= run("disconnect handling", disconnect_drop()).await;
    ok &= run("anonymization boundary", anonymization()).await;
    ok &= run("per-instance ordering", ordering()).await;
    ok &= run("matchmaking against oracle", matchmaking()).await;
    ok &= run("GM fault injection", gm_faults()).await;
    ok &= run("leaderboard and replay", leaderboard()).await;
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
