//! The three-player Minority Game.
//!
//! Players are offered two amounts and each picks one. If all three agree
//! nobody wins; otherwise the lone dissenter wins the amount they picked.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use xtribe_core::store::{read_snapshot, write_snapshot, Journal, StoreError};
use xtribe_protocol::{ClientId, Endpoint, InstanceId, Message, SystemTopic};

use crate::GmHandler;

pub const PLAYERS: usize = 3;
pub const CHOICES_TOPIC: &str = "mgChoices";
pub const CHOICE_TOPIC: &str = "mgUChoice";
pub const RESULT_TOPIC: &str = "mgResult";

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    NoWinner,
    Winner { client: ClientId, amount: f64 },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WinnerError {
    #[error("need exactly {PLAYERS} choices, got {0}")]
    WrongCount(usize),
    #[error("choice {0} is not one of the offered values")]
    NotOffered(f64),
}

pub fn compute_winner(choices: &BTreeMap<ClientId, f64>, v1: f64, v2: f64) -> Result<Outcome, WinnerError> {
    if choices.len() != PLAYERS {
        return Err(WinnerError::WrongCount(choices.len()));
    }
    if let Some(&bad) = choices.values().find(|&&v| v != v1 && v != v2) {
        return Err(WinnerError::NotOffered(bad));
    }
    let picked_v1 = choices.values().filter(|&&v| v == v1).count();
    let minority = match picked_v1 {
        0 | PLAYERS => return Ok(Outcome::NoWinner),
        1 => v1,
        _ => v2,
    };
    let (client, &amount) = choices
        .iter()
        .find(|(_, &v)| v == minority)
        .expect("2-1 split has a minority");
    Ok(Outcome::Winner {
        client: client.clone(),
        amount,
    })
}

/// Winner gets the amount, everyone else zero.
pub fn scores(outcome: &Outcome, choices: &BTreeMap<ClientId, f64>) -> BTreeMap<ClientId, f64> {
    choices
        .keys()
        .map(|c| {
            let s = match outcome {
                Outcome::Winner { client, amount } if client == c => *amount,
                _ => 0.0,
            };
            (c.clone(), s)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeneratorError {
    #[error("the value set is empty")]
    NoValues,
    #[error("values must be positive and finite")]
    BadValue,
    #[error("ratio must be positive, finite and different from 1")]
    BadRatio,
}

/// Draws `v1` from a configured set and sets `v2 = ratio * v1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueGenerator {
    values: Vec<f64>,
    ratio: f64,
    /// Shown next to the amounts; presentation only.
    currency: Option<String>,
}

impl ValueGenerator {
    pub fn new(values: Vec<f64>, ratio: f64, currency: Option<String>) -> Result<Self, GeneratorError> {
        if values.is_empty() {
            return Err(GeneratorError::NoValues);
        }
        if values.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(GeneratorError::BadValue);
        }
        if !ratio.is_finite() || ratio <= 0.0 || ratio == 1.0 {
            return Err(GeneratorError::BadRatio);
        }
        Ok(ValueGenerator { values, ratio, currency })
    }

    pub fn draw(&self) -> (f64, f64) {
        let v1 = *self.values.choose(&mut rand::rng()).expect("non-empty");
        (v1, v1 * self.ratio)
    }
}

impl Default for ValueGenerator {
    fn default() -> Self {
        ValueGenerator::new(vec![1.0, 5.0, 10.0, 50.0, 100.0], 2.0, None).expect("valid defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinorityInstanceState {
    pub instance_id: InstanceId,
    pub values: (f64, f64),
    #[serde(default)]
    pub currency: Option<String>,
    pub choices: BTreeMap<ClientId, f64>,
    pub ready: BTreeSet<ClientId>,
    /// Unix seconds of the last change, for expiry.
    pub updated_at: u64,
}

impl MinorityInstanceState {
    fn choices_params(&self) -> Value {
        let (v1, v2) = self.values;
        match &self.currency {
            Some(c) => json!([v1, v2, c]),
            None => json!([v1, v2]),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ChoiceRecord {
    instance_id: InstanceId,
    client_id: ClientId,
    value: f64,
    values: (f64, f64),
    at: u64,
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Per-instance state, one JSON file per instance when backed by a directory.
struct StateStore {
    dir: Option<PathBuf>,
    ttl: Duration,
    states: HashMap<InstanceId, MinorityInstanceState>,
}

impl StateStore {
    fn file(&self, id: &InstanceId) -> Option<PathBuf> {
        // hex keeps arbitrary ids filesystem-safe
        self.dir
            .as_ref()
            .map(|d| d.join(format!("{}.json", hex::encode(id.as_str()))))
    }

    fn open(dir: Option<PathBuf>, ttl: Duration) -> Result<Self, StoreError> {
        let mut store = StateStore {
            dir,
            ttl,
            states: HashMap::new(),
        };
        if let Some(dir) = store.dir.clone() {
            fs::create_dir_all(&dir).map_err(|source| StoreError::Io { path: dir.clone(), source })?;
            let entries = fs::read_dir(&dir).map_err(|source| StoreError::Io { path: dir.clone(), source })?;
            for entry in entries.flatten() {
                let path = entry.path();
                if path.extension().is_some_and(|e| e == "json") {
                    if let Some(state) = read_snapshot::<MinorityInstanceState>(&path)? {
                        store.states.insert(state.instance_id.clone(), state);
                    }
                }
            }
            store.sweep(now_unix());
        }
        Ok(store)
    }

    fn put(&mut self, mut state: MinorityInstanceState) {
        state.updated_at = now_unix();
        if let Some(path) = self.file(&state.instance_id) {
            if let Err(e) = write_snapshot(&path, &state) {
                tracing::error!(error = %e, "could not persist instance state");
            }
        }
        self.states.insert(state.instance_id.clone(), state);
    }

    fn remove(&mut self, id: &InstanceId) {
        self.states.remove(id);
        if let Some(path) = self.file(id) {
            let _ = fs::remove_file(path);
        }
    }

    fn sweep(&mut self, now: u64) {
        let ttl = self.ttl.as_secs();
        let stale: Vec<_> = self
            .states
            .values()
            .filter(|s| now.saturating_sub(s.updated_at) > ttl)
            .map(|s| s.instance_id.clone())
            .collect();
        for id in stale {
            tracing::info!(instance = %id, "expiring stale instance state");
            self.remove(&id);
        }
    }
}

struct Inner {
    store: StateStore,
    log: Option<Journal<ChoiceRecord>>,
}

pub struct MinorityGm {
    generator: ValueGenerator,
    inner: Mutex<Inner>,
}

impl MinorityGm {
    /// A GM that keeps its state in memory only.
    pub fn new(generator: ValueGenerator, ttl: Duration) -> Self {
        MinorityGm {
            generator,
            inner: Mutex::new(Inner {
                store: StateStore::open(None, ttl).expect("in-memory store"),
                log: None,
            }),
        }
    }

    /// A GM persisting instance state under `dir/instances` and appending
    /// every accepted choice to `dir/choices.jsonl`.
    pub fn open(generator: ValueGenerator, ttl: Duration, dir: &Path) -> Result<Self, StoreError> {
        let store = StateStore::open(Some(dir.join("instances")), ttl)?;
        let (log, _) = Journal::open(dir.join("choices.jsonl"))?;
        Ok(MinorityGm {
            generator,
            inner: Mutex::new(Inner { store, log: Some(log) }),
        })
    }

    pub fn state(&self, id: &InstanceId) -> Option<MinorityInstanceState> {
        self.inner.lock().unwrap().store.states.get(id).cloned()
    }

    pub fn live_instances(&self) -> usize {
        self.inner.lock().unwrap().store.states.len()
    }

    pub fn sweep(&self) {
        self.inner.lock().unwrap().store.sweep(now_unix());
    }

    pub fn minority_handle(&self, m: &Message) -> Vec<Message> {
        let Some(instance) = m.instance_id.clone() else {
            return Vec::new();
        };
        let mut inner = self.inner.lock().unwrap();
        match (m.sender, m.topic.as_str()) {
            (Some(Endpoint::System), "instance") => {
                if !inner.store.states.contains_key(&instance) {
                    let state = MinorityInstanceState {
                        instance_id: instance,
                        values: self.generator.draw(),
                        currency: self.generator.currency.clone(),
                        choices: BTreeMap::new(),
                        ready: BTreeSet::new(),
                        updated_at: 0,
                    };
                    inner.store.put(state);
                }
                Vec::new()
            }
            (Some(Endpoint::System), "ready") => {
                let Some(client) = m.client_id.clone() else {
                    return Vec::new();
                };
                let Some(mut state) = inner.store.states.get(&instance).cloned() else {
                    return vec![audit(&instance, "ready for unknown instance")];
                };
                let params = state.choices_params();
                if state.ready.insert(client.clone()) {
                    inner.store.put(state);
                }
                vec![Message::new(CHOICES_TOPIC)
                    .addressed_to(Endpoint::Client)
                    .for_client(client)
                    .in_instance(instance)
                    .with_params(params)]
            }
            (Some(Endpoint::System), "drop") => {
                inner.store.remove(&instance);
                Vec::new()
            }
            (Some(Endpoint::Client), CHOICE_TOPIC) => self.record_choice(&mut inner, instance, m),
            _ => Vec::new(),
        }
    }

    fn record_choice(&self, inner: &mut Inner, instance: InstanceId, m: &Message) -> Vec<Message> {
        let Some(mut state) = inner.store.states.get(&instance).cloned() else {
            return vec![audit(&instance, "choice for unknown instance")];
        };
        let Some(client) = m.client_id.clone() else {
            return vec![audit(&instance, "choice without clientId")];
        };
        let (v1, v2) = state.values;
        let Some(value) = m.params.as_ref().and_then(Value::as_f64).filter(|v| *v == v1 || *v == v2) else {
            return vec![audit(&instance, "choice is not one of the offered values")];
        };
        if state.choices.contains_key(&client) {
            tracing::info!(instance = %instance, client = %client, "duplicate choice ignored");
            return Vec::new();
        }
        if state.choices.len() >= PLAYERS {
            return Vec::new();
        }
        state.choices.insert(client.clone(), value);
        if let Some(log) = inner.log.as_mut() {
            let rec = ChoiceRecord {
                instance_id: instance.clone(),
                client_id: client,
                value,
                values: state.values,
                at: now_unix(),
            };
            if let Err(e) = log.append(&rec) {
                tracing::error!(error = %e, "could not log choice");
            }
        }
        if state.choices.len() < PLAYERS {
            inner.store.put(state);
            return Vec::new();
        }

        let outcome = compute_winner(&state.choices, v1, v2).expect("validated choices");
        let scores = scores(&outcome, &state.choices);
        inner.store.remove(&instance);
        let result = match &outcome {
            Outcome::NoWinner => json!({"winner": null, "amount": 0, "choices": state.choices}),
            Outcome::Winner { client, amount } => json!({"winner": client, "amount": amount, "choices": state.choices}),
        };
        vec![
            Message::new(RESULT_TOPIC)
                .addressed_to(Endpoint::Client)
                .broadcast()
                .in_instance(instance.clone())
                .with_params(result),
            Message::new(SystemTopic::Over.as_str())
                .addressed_to(Endpoint::System)
                .in_instance(instance)
                .with_params(json!(scores)),
        ]
    }
}

fn audit(instance: &InstanceId, reason: &str) -> Message {
    tracing::warn!(instance = %instance, reason, "rejected message");
    Message::new(SystemTopic::Error.as_str())
        .addressed_to(Endpoint::System)
        .in_instance(instance.clone())
        .with_params(json!({"reason": reason}))
}

impl GmHandler for MinorityGm {
    fn handle(&self, message: Message) -> Vec<Message> {
        self.minority_handle(&message)
    }
}
