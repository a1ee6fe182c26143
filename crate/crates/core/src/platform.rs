//! The orchestrator: sessions, waiting rooms, live instances and the GM
//! exchanges that drive them.
//!
//! All bookkeeping sits behind one mutex that is never held across an await.
//! Each instance additionally owns an async dispatch lock, taken for every GM
//! exchange and every inbound push for that instance, so a GM sees one
//! request at a time per instance while distinct instances proceed in
//! parallel.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use serde::Serialize;
use serde_json::{json, Value};
use xtribe_protocol::{decode_gm_response, Endpoint, Message, SystemTopic};

use crate::config::PlatformConfig;
use crate::events::{Event, EventLog, LoggedEvent, SessionRef};
use crate::games::{CatalogEntry, GameDescriptor, GameError, GameRegistry};
use crate::gm::{plan_routes, GmClient, GmEndpoint, GmError, Route};
use crate::ids::{new_client_id, new_instance_id, AccountId, ClientId, GameId, InstanceId, SessionToken};
use crate::instance::{GameInstance, InstanceState, Member};
use crate::matchmaking::{ProfileSnapshot, WaitingRoom};
use crate::session::{ClientSession, Seat};
use crate::store::StoreError;
use crate::users::{Access, DenyReason, Identity, LeaderboardEntry, ProfileInput, RegistryError, UserRegistry};

/// Terminal instances are kept this long so late requests get a precise
/// refusal instead of "unknown instance".
const TERMINAL_RETENTION: Duration = Duration::from_secs(300);
const EVENT_LOG_CAPACITY: usize = 100_000;
const PUBLISH_PROBE_ATTEMPTS: u32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum PlatformError {
    #[error("unknown game `{0}`")]
    UnknownGame(GameId),
    #[error("bad credentials")]
    BadCredentials,
    #[error("access denied: {0:?}")]
    AccessDenied(DenyReason),
    #[error("invalid or expired session")]
    InvalidSession,
    #[error("session is bound to a different game")]
    WrongGame,
    #[error("already waiting for this game")]
    AlreadyQueued,
    #[error("already playing this game")]
    AlreadyPlaying,
    #[error("no live instance")]
    NoInstance,
    #[error("instance is {}", .0.as_str())]
    InstanceClosed(InstanceState),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("GM token not recognized")]
    Unauthorized,
    #[error("{}", .0.class())]
    Gm(GmError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Game(#[from] GameError),
    #[error("platform is shutting down")]
    ShuttingDown,
}

#[derive(Debug, thiserror::Error)]
pub enum StartupError {
    #[error("data directory {0} does not exist")]
    MissingDataDir(PathBuf),
    #[error("data directory {path} is not writable: {source}")]
    ReadOnlyDataDir {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("user store: {0}")]
    Users(#[from] StoreError),
    #[error("game store: {0}")]
    Games(#[from] GameError),
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
}

#[derive(Debug, thiserror::Error)]
pub enum PublishError {
    #[error(transparent)]
    Game(#[from] GameError),
    #[error("invalid GM URL: {0}")]
    GmUrl(#[from] crate::gm::InvalidGmUrl),
    #[error("GM health check failed: {0}")]
    Probe(GmError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum JoinOutcome {
    Queued { position: usize, required: usize },
    Matched { instance_id: InstanceId },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionInfo {
    pub game_id: Option<GameId>,
    pub username: Option<String>,
    pub queued: bool,
    pub instance_id: Option<InstanceId>,
    pub instance_state: Option<InstanceState>,
    /// In-session score tally for guests.
    pub local_score: f64,
}

struct LiveInstance {
    inner: GameInstance<SessionRef>,
    endpoint: GmEndpoint,
    dispatch: Arc<tokio::sync::Mutex<()>>,
}

#[derive(Default)]
struct State {
    sessions: HashMap<SessionRef, ClientSession>,
    tokens: HashMap<SessionToken, SessionRef>,
    rooms: HashMap<GameId, WaitingRoom<SessionRef>>,
    instances: HashMap<InstanceId, LiveInstance>,
    next_session: u64,
}

impl State {
    fn resolve(&mut self, token: &SessionToken, now: Instant) -> Result<SessionRef, PlatformError> {
        let sref = *self.tokens.get(token).ok_or(PlatformError::InvalidSession)?;
        self.sessions
            .get_mut(&sref)
            .ok_or(PlatformError::InvalidSession)?
            .touch(now);
        Ok(sref)
    }

    fn seat_of(&self, sref: SessionRef) -> Result<Seat, PlatformError> {
        self.sessions[&sref]
            .current_instance
            .clone()
            .ok_or(PlatformError::NoInstance)
    }
}

enum Enqueued {
    Waiting(JoinOutcome),
    Formed {
        instance_id: InstanceId,
        guard: tokio::sync::OwnedMutexGuard<()>,
    },
}

/// Handles needed to talk to a GM outside the state lock.
struct DispatchHandle {
    endpoint: GmEndpoint,
    lock: Arc<tokio::sync::Mutex<()>>,
}

pub struct Platform {
    config: PlatformConfig,
    users: Arc<UserRegistry>,
    games: Arc<GameRegistry>,
    gm: GmClient,
    state: Mutex<State>,
    events: EventLog,
    shutting_down: AtomicBool,
}

impl Platform {
    pub fn new(config: PlatformConfig, users: Arc<UserRegistry>, games: Arc<GameRegistry>) -> Arc<Self> {
        Arc::new(Platform {
            config,
            users,
            games,
            gm: GmClient::new(),
            state: Mutex::new(State::default()),
            events: EventLog::new(EVENT_LOG_CAPACITY),
            shutting_down: AtomicBool::new(false),
        })
    }

    /// Opens the stores under `config.data_dir`, or in-memory ones when no
    /// data directory is configured. A missing or corrupt store is fatal.
    pub fn open(config: PlatformConfig) -> Result<Arc<Self>, StartupError> {
        config.validate()?;
        let (users, games) = match &config.data_dir {
            Some(dir) => {
                let (users, games) = open_stores(dir)?;
                (Arc::new(users), Arc::new(games))
            }
            None => (Arc::new(UserRegistry::in_memory()), Arc::new(GameRegistry::in_memory())),
        };
        Ok(Self::new(config, users, games))
    }

    pub fn config(&self) -> &PlatformConfig {
        &self.config
    }

    pub fn users(&self) -> &Arc<UserRegistry> {
        &self.users
    }

    pub fn games(&self) -> &Arc<GameRegistry> {
        &self.games
    }

    pub fn events(&self) -> Vec<LoggedEvent> {
        self.events.snapshot()
    }

    pub fn instance_events(&self, id: &InstanceId) -> Vec<Event> {
        self.events.for_instance(id)
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap()
    }

    pub fn instance_state(&self, id: &InstanceId) -> Option<InstanceState> {
        self.lock().instances.get(id).map(|i| i.inner.state())
    }

    pub fn live_instances(&self) -> usize {
        self.lock().instances.values().filter(|i| i.inner.is_live()).count()
    }

    pub fn session_count(&self) -> usize {
        self.lock().sessions.len()
    }

    pub fn queue_len(&self, game: &GameId) -> usize {
        self.lock().rooms.get(game).map_or(0, WaitingRoom::len)
    }

    pub async fn register_user(&self, username: String, password: String, profile: ProfileInput) -> Result<AccountId, PlatformError> {
        let users = self.users.clone();
        let id = tokio::task::spawn_blocking(move || users.register_user(&username, &password, &profile))
            .await
            .expect("registration task")?;
        Ok(id)
    }

    fn visible_game(&self, id: &GameId, identity: &Identity) -> Result<GameDescriptor, PlatformError> {
        let game = self.games.get(id).ok_or_else(|| PlatformError::UnknownGame(id.clone()))?;
        let viewer = identity.account().and_then(|a| self.users.username(a));
        if !game.available_to(viewer.as_deref()) {
            return Err(PlatformError::UnknownGame(id.clone()));
        }
        Ok(game)
    }

    /// Opens a session for `game_id`, as a guest when no credentials are
    /// given. Access filters are checked here and again on join.
    pub async fn open_session(
        &self,
        credentials: Option<(String, String)>,
        game_id: &GameId,
    ) -> Result<SessionToken, PlatformError> {
        if self.shutting_down.load(Ordering::SeqCst) {
            return Err(PlatformError::ShuttingDown);
        }
        let identity = match credentials {
            None => Identity::Guest,
            Some((user, pass)) => {
                let users = self.users.clone();
                let id = tokio::task::spawn_blocking(move || users.authenticate(&user, &pass))
                    .await
                    .expect("authentication task")
                    .map_err(|_| PlatformError::BadCredentials)?;
                Identity::Account(id)
            }
        };
        let game = self.visible_game(game_id, &identity)?;
        if let Access::Deny(reason) = self.users.check_access(&game.access_filter, &identity) {
            return Err(PlatformError::AccessDenied(reason));
        }
        let token = SessionToken::generate();
        let mut st = self.lock();
        st.next_session += 1;
        let sref = SessionRef(st.next_session);
        let guest = identity == Identity::Guest;
        let session = ClientSession::new(
            token.clone(),
            identity,
            game_id.clone(),
            self.config.max_queued_messages,
            Instant::now(),
        );
        st.sessions.insert(sref, session);
        st.tokens.insert(token.clone(), sref);
        drop(st);
        self.events.record(Event::SessionOpened {
            session: sref,
            game: game_id.clone(),
            guest,
        });
        Ok(token)
    }

    pub fn heartbeat(&self, token: &SessionToken) -> Result<(), PlatformError> {
        self.lock().resolve(token, Instant::now()).map(drop)
    }

    pub fn session_info(&self, token: &SessionToken) -> Result<SessionInfo, PlatformError> {
        let mut st = self.lock();
        let sref = st.resolve(token, Instant::now())?;
        let s = &st.sessions[&sref];
        let instance_id = s.current_instance.as_ref().map(|seat| seat.instance_id.clone());
        let instance_state = instance_id
            .as_ref()
            .and_then(|i| st.instances.get(i))
            .map(|i| i.inner.state());
        let local_score = s
            .current_game
            .as_ref()
            .and_then(|g| s.local_scores.get(g))
            .copied()
            .unwrap_or(0.0);
        Ok(SessionInfo {
            game_id: s.current_game.clone(),
            username: s.identity.account().and_then(|a| self.users.username(a)),
            queued: s.queued,
            instance_id,
            instance_state,
            local_score,
        })
    }

    /// Enqueues the session in its game's waiting room and forms an instance
    /// if the room now holds a qualifying group.
    pub async fn join(&self, token: &SessionToken, game_id: &GameId) -> Result<JoinOutcome, PlatformError> {
        if self.shutting_down.load(Ordering::SeqCst) {
            return Err(PlatformError::ShuttingDown);
        }
        let now = Instant::now();
        let identity = {
            let mut st = self.lock();
            let sref = st.resolve(token, now)?;
            st.sessions[&sref].identity.clone()
        };
        let game = self.visible_game(game_id, &identity)?;
        if let Access::Deny(reason) = self.users.check_access(&game.access_filter, &identity) {
            return Err(PlatformError::AccessDenied(reason));
        }
        let snapshot = match identity.account() {
            Some(account) => {
                let profile = self.users.profile(account);
                ProfileSnapshot {
                    language: profile.as_ref().and_then(|p| p.language.clone()),
                    location: profile.as_ref().and_then(|p| p.location.clone()),
                    score: self.users.total_score(game_id, account),
                }
            }
            None => ProfileSnapshot::default(),
        };

        let endpoint = GmEndpoint::new(&game.gm_url, self.config.gm_request_timeout, self.config.max_response_bytes)
            .map_err(|e| {
                tracing::error!(game = %game_id, error = %e, "game has an unusable GM URL");
                PlatformError::BadRequest("game is misconfigured".into())
            })?;
        let (instance_id, guard) = match self.enqueue(token, &game, snapshot, &endpoint, now)? {
            Enqueued::Waiting(outcome) => return Ok(outcome),
            Enqueued::Formed { instance_id, guard } => (instance_id, guard),
        };

        let notice = Message::system(SystemTopic::Instance).in_instance(instance_id.clone());
        match self.exchange(&endpoint, notice).await {
            Ok(replies) => {
                let _ = self.route(&instance_id, replies);
                self.send_load(&instance_id, &game);
            }
            Err(e) => self.fault(&instance_id, &e),
        }
        drop(guard);
        Ok(JoinOutcome::Matched { instance_id })
    }

    fn enqueue(
        &self,
        token: &SessionToken,
        game: &GameDescriptor,
        snapshot: ProfileSnapshot,
        endpoint: &GmEndpoint,
        now: Instant,
    ) -> Result<Enqueued, PlatformError> {
        let game_id = &game.id;
        let mut st = self.lock();
        let sref = st.resolve(token, now)?;
        self.check_joinable(&st, sref, game_id)?;
        let room = st
            .rooms
            .entry(game_id.clone())
            .or_insert_with(|| WaitingRoom::new(game.constraint()));
        room.enqueue(sref, now, snapshot)
            .map_err(|_| PlatformError::AlreadyQueued)?;
        st.sessions.get_mut(&sref).expect("resolved").queued = true;
        self.events.record(Event::Joined {
            session: sref,
            game: game_id.clone(),
        });

        let room = st.rooms.get_mut(game_id).expect("inserted");
        let Some(group) = room.try_form() else {
            let position = room.position(&sref).expect("just queued");
            let required = room.constraint().required_players;
            let waiting = room.entries().iter().map(|e| e.key).collect::<Vec<_>>();
            // everyone still waiting learns their updated place
            for (idx, key) in waiting.into_iter().enumerate() {
                let msg = Message::system(SystemTopic::Queued).with_params(json!({
                    "gameId": game_id,
                    "position": idx + 1,
                    "required": required,
                }));
                if let Some(s) = st.sessions.get_mut(&key) {
                    s.deliver(msg);
                }
            }
            self.events.record(Event::Queued {
                session: sref,
                game: game_id.clone(),
                position,
            });
            return Ok(Enqueued::Waiting(JoinOutcome::Queued { position, required }));
        };

        let instance_id = new_instance_id();
        let members: Vec<Member<SessionRef>> = group
            .iter()
            .map(|e| Member {
                client_id: new_client_id(),
                key: e.key,
            })
            .collect();
        let mapping = members
            .iter()
            .map(|m| (m.client_id.clone(), st.sessions[&m.key].identity.account().cloned()))
            .collect();
        if let Err(e) = self.users.record_instance(game_id, &instance_id, mapping) {
            tracing::error!(instance = %instance_id, error = %e, "could not record instance membership; scores will not be credited");
        }
        for m in &members {
            let s = st.sessions.get_mut(&m.key).expect("queued session exists");
            s.queued = false;
            s.current_instance = Some(Seat {
                instance_id: instance_id.clone(),
                client_id: m.client_id.clone(),
            });
        }
        let lock = Arc::new(tokio::sync::Mutex::new(()));
        let guard = lock.clone().try_lock_owned().expect("fresh lock");
        let member_count = members.len();
        st.instances.insert(
            instance_id.clone(),
            LiveInstance {
                inner: GameInstance::new(instance_id.clone(), game_id.clone(), members, now),
                endpoint: endpoint.clone(),
                dispatch: lock,
            },
        );
        self.events.record(Event::InstanceFormed {
            instance: instance_id.clone(),
            game: game_id.clone(),
            members: member_count,
        });
        Ok(Enqueued::Formed { instance_id, guard })

    }

    fn check_joinable(&self, st: &State, sref: SessionRef, game_id: &GameId) -> Result<(), PlatformError> {
        let s = &st.sessions[&sref];
        if s.current_game.as_ref() != Some(game_id) {
            return Err(PlatformError::WrongGame);
        }
        if s.queued {
            return Err(PlatformError::AlreadyQueued);
        }
        let in_live = |s: &ClientSession| {
            s.current_instance
                .as_ref()
                .and_then(|seat| st.instances.get(&seat.instance_id))
                .is_some_and(|i| i.inner.is_live())
        };
        if in_live(s) {
            return Err(PlatformError::AlreadyPlaying);
        }
        // one seat per account per game, across sessions
        if let Some(account) = s.identity.account() {
            for (other_ref, other) in &st.sessions {
                if *other_ref == sref || other.identity.account() != Some(account) || other.current_game.as_ref() != Some(game_id) {
                    continue;
                }
                if other.queued {
                    return Err(PlatformError::AlreadyQueued);
                }
                if in_live(other) {
                    return Err(PlatformError::AlreadyPlaying);
                }
            }
        }
        Ok(())
    }

    fn send_load(&self, instance_id: &InstanceId, game: &GameDescriptor) {
        let mut st = self.lock();
        let Some(live) = st.instances.get(instance_id) else { return };
        if !live.inner.is_live() {
            return;
        }
        let members: Vec<_> = live.inner.members().to_vec();
        for m in &members {
            let msg = Message::system(SystemTopic::Instance)
                .addressed_to(Endpoint::Client)
                .in_instance(instance_id.clone())
                .for_client(m.client_id.clone())
                .with_params(json!({
                    "gameId": game.id,
                    "url": game.entry_url(),
                    "players": members.len(),
                }));
            if let Some(s) = st.sessions.get_mut(&m.key) {
                s.deliver(msg);
                self.events.record(Event::LoadSent {
                    instance: instance_id.clone(),
                    session: m.key,
                });
            }
        }
    }

    async fn exchange(&self, endpoint: &GmEndpoint, message: Message) -> Result<Vec<Message>, GmError> {
        self.events.record(Event::ToGm {
            instance: message.instance_id.clone(),
            sender: message.sender.map_or("?", Endpoint::as_str),
            topic: message.topic.clone(),
        });
        self.gm.dispatch(endpoint, &message).await
    }

    fn dispatch_handle(&self, st: &State, id: &InstanceId) -> Option<DispatchHandle> {
        st.instances.get(id).map(|i| DispatchHandle {
            endpoint: i.endpoint.clone(),
            lock: i.dispatch.clone(),
        })
    }

    /// Marks the caller's seat ready and notifies the GM.
    pub async fn ready(&self, token: &SessionToken) -> Result<(), PlatformError> {
        let (seat, handle) = {
            let mut st = self.lock();
            let sref = st.resolve(token, Instant::now())?;
            let seat = st.seat_of(sref)?;
            let handle = self.dispatch_handle(&st, &seat.instance_id).ok_or(PlatformError::NoInstance)?;
            let live = st.instances.get_mut(&seat.instance_id).expect("handle implies instance");
            let outcome = live
                .inner
                .mark_ready(&seat.client_id)
                .map_err(|_| PlatformError::InstanceClosed(live.inner.state()))?;
            if !outcome.newly_ready {
                return Ok(());
            }
            self.events.record(Event::Ready {
                instance: seat.instance_id.clone(),
                client: seat.client_id.clone(),
            });
            if outcome.started {
                self.events.record(Event::Started {
                    instance: seat.instance_id.clone(),
                });
            }
            (seat, handle)
        };
        let _guard = handle.lock.lock().await;
        if !self.is_live(&seat.instance_id) {
            return Ok(());
        }
        let msg = Message::system(SystemTopic::Ready)
            .addressed_to(Endpoint::Manager)
            .in_instance(seat.instance_id.clone())
            .for_client(seat.client_id);
        match self.exchange(&handle.endpoint, msg).await {
            Ok(replies) => {
                let _ = self.route(&seat.instance_id, replies);
            }
            Err(e) => self.fault(&seat.instance_id, &e),
        }
        Ok(())
    }

    fn is_live(&self, id: &InstanceId) -> bool {
        self.lock().instances.get(id).is_some_and(|i| i.inner.is_live())
    }

    fn refusal(&self, id: &InstanceId) -> PlatformError {
        match self.lock().instances.get(id) {
            Some(i) => PlatformError::InstanceClosed(i.inner.state()),
            None => PlatformError::NoInstance,
        }
    }

    /// Relays a player's action to the GM under its anonymous clientId. The
    /// GM's replies are routed before this returns.
    pub async fn client_send(
        &self,
        token: &SessionToken,
        recipient: Endpoint,
        topic: &str,
        params: Option<Value>,
    ) -> Result<(), PlatformError> {
        match recipient {
            Endpoint::Manager => {}
            Endpoint::System if topic == SystemTopic::Ready.as_str() => return self.ready(token).await,
            _ => {
                return Err(PlatformError::BadRequest(format!(
                    "clients may only address the manager, not {recipient}"
                )))
            }
        }
        if topic.is_empty() {
            return Err(PlatformError::BadRequest("empty topic".into()));
        }
        let (seat, handle) = {
            let mut st = self.lock();
            let sref = st.resolve(token, Instant::now())?;
            let seat = st.seat_of(sref)?;
            let handle = self.dispatch_handle(&st, &seat.instance_id).ok_or(PlatformError::NoInstance)?;
            (seat, handle)
        };
        let _guard = handle.lock.lock().await;
        if !self.is_live(&seat.instance_id) {
            return Err(self.refusal(&seat.instance_id));
        }
        let mut msg = Message::new(topic)
            .sent_by(Endpoint::Client)
            .addressed_to(Endpoint::Manager)
            .in_instance(seat.instance_id.clone())
            .for_client(seat.client_id);
        msg.params = params;
        match self.exchange(&handle.endpoint, msg).await {
            Ok(replies) => self.route(&seat.instance_id, replies).map_err(PlatformError::Gm),
            Err(e) => {
                self.fault(&seat.instance_id, &e);
                Err(PlatformError::Gm(e))
            }
        }
    }

    /// Handles a GM-initiated push authenticated by the game's token.
    /// Returns how many messages were accepted for routing.
    pub async fn gm_push(&self, gm_token: &str, body: &str) -> Result<usize, PlatformError> {
        let game = self.games.by_token(gm_token).ok_or(PlatformError::Unauthorized)?;
        let messages = decode_gm_response(body).map_err(|e| PlatformError::BadRequest(e.to_string()))?;
        let Some(first) = messages.first() else { return Ok(0) };
        let instance_id = first
            .instance_id
            .clone()
            .ok_or_else(|| PlatformError::BadRequest("message without instanceId".into()))?;
        if messages.iter().any(|m| m.instance_id.as_ref() != Some(&instance_id)) {
            return Err(PlatformError::BadRequest("batch spans several instances".into()));
        }
        let handle = {
            let st = self.lock();
            match st.instances.get(&instance_id) {
                Some(i) if *i.inner.game_id() == game.id => self.dispatch_handle(&st, &instance_id).expect("present"),
                _ => return Err(PlatformError::NoInstance),
            }
        };
        let _guard = handle.lock.lock().await;
        if !self.is_live(&instance_id) {
            return Err(self.refusal(&instance_id));
        }
        let n = messages.len();
        self.route(&instance_id, messages).map_err(PlatformError::Gm)?;
        Ok(n)
    }

    /// Delivers a GM batch. Must be called with the instance's dispatch lock
    /// held. A batch-level fault aborts the instance and is returned.
    fn route(&self, instance_id: &InstanceId, messages: Vec<Message>) -> Result<(), GmError> {
        if messages.is_empty() {
            return Ok(());
        }
        let mut st = self.lock();
        let Some(live) = st.instances.get(instance_id) else { return Ok(()) };
        if !live.inner.is_live() {
            for m in messages {
                self.discard(instance_id, &m.topic, "instance is sealed");
            }
            return Ok(());
        }
        let routes = match plan_routes(&live.inner, messages) {
            Ok(r) => r,
            Err(e) => {
                self.fault_locked(&mut st, instance_id, &e);
                return Err(e);
            }
        };
        for route in routes {
            match route {
                Route::Deliver { to, message } => {
                    let live = st.instances.get(instance_id).expect("checked");
                    if !live.inner.is_live() {
                        self.discard(instance_id, &message.topic, "instance is sealed");
                        continue;
                    }
                    match st.sessions.get_mut(&to) {
                        Some(s) if s.current_instance.as_ref().is_some_and(|seat| seat.instance_id == *instance_id) => {
                            self.events.record(Event::Delivered {
                                instance: instance_id.clone(),
                                session: to,
                                topic: message.topic.clone(),
                                broadcast: message.broadcast,
                            });
                            s.deliver(message);
                        }
                        _ => self.discard(instance_id, &message.topic, "member session is gone"),
                    }
                }
                Route::Close { scores } => self.close_locked(&mut st, instance_id, scores),
                Route::Discard { message, reason } => {
                    tracing::warn!(instance = %instance_id, topic = %message.topic, reason, "GM message dropped");
                    self.discard(instance_id, &message.topic, reason);
                }
            }
        }
        Ok(())
    }

    fn discard(&self, instance_id: &InstanceId, topic: &str, reason: &str) {
        self.events.record(Event::Discarded {
            instance: instance_id.clone(),
            topic: topic.to_owned(),
            reason: reason.to_owned(),
        });
    }

    fn close_locked(&self, st: &mut State, instance_id: &InstanceId, scores: Option<BTreeMap<ClientId, f64>>) {
        self.events.record(Event::OverReceived {
            instance: instance_id.clone(),
        });
        let live = st.instances.get_mut(instance_id).expect("caller checked");
        if let Err(e) = live.inner.close(Instant::now()) {
            tracing::warn!(instance = %instance_id, error = %e, "over ignored");
            self.discard(instance_id, "over", "instance not running");
            return;
        }
        let game_id = live.inner.game_id().clone();
        let members = live.inner.members().to_vec();
        if let Some(scores) = &scores {
            if let Err(e) = self.users.update_scores(&game_id, instance_id, scores) {
                tracing::error!(instance = %instance_id, error = %e, "crediting scores failed");
            }
            for m in &members {
                let Some(score) = scores.get(&m.client_id) else { continue };
                if let Some(s) = st.sessions.get_mut(&m.key) {
                    if s.identity == Identity::Guest {
                        *s.local_scores.entry(game_id.clone()).or_default() += score;
                    }
                }
            }
        }
        self.events.record(Event::Closed {
            instance: instance_id.clone(),
            scored: scores.is_some(),
        });
        let mut notice = Message::system(SystemTopic::Over)
            .addressed_to(Endpoint::Client)
            .in_instance(instance_id.clone())
            .broadcast();
        if let Some(scores) = scores {
            notice.params = Some(json!(scores));
        }
        deliver_to_members(st, &members, instance_id, &notice);
    }

    fn fault(&self, instance_id: &InstanceId, error: &GmError) {
        let mut st = self.lock();
        self.fault_locked(&mut st, instance_id, error);
    }

    /// Aborts the instance and tells every member. The detailed reason stays
    /// in the server log; players only see the fault class.
    fn fault_locked(&self, st: &mut State, instance_id: &InstanceId, error: &GmError) {
        tracing::warn!(instance = %instance_id, error = %error, "GM fault");
        self.events.record(Event::GmFault {
            instance: instance_id.clone(),
            class: error.class(),
        });
        self.abort_locked(st, instance_id, error.class());
    }

    fn abort_locked(&self, st: &mut State, instance_id: &InstanceId, reason: &str) -> bool {
        let Some(live) = st.instances.get_mut(instance_id) else { return false };
        if !live.inner.abort(Instant::now()) {
            return false;
        }
        self.events.record(Event::Aborted {
            instance: instance_id.clone(),
            reason: reason.to_owned(),
        });
        let members = live.inner.members().to_vec();
        let notice = Message::system(SystemTopic::Error)
            .addressed_to(Endpoint::Client)
            .in_instance(instance_id.clone())
            .broadcast()
            .with_params(json!({ "reason": reason }));
        deliver_to_members(st, &members, instance_id, &notice);
        true
    }

    /// A member is gone: the others get `drop`, the GM gets `drop`, and the
    /// instance is aborted. Repeated calls for one instance are no-ops.
    pub async fn handle_disconnect(&self, instance_id: &InstanceId, client_id: &ClientId) {
        let handle = {
            let mut st = self.lock();
            let Some(live) = st.instances.get_mut(instance_id) else { return };
            if live.inner.member_key(client_id).is_none() || !live.inner.abort(Instant::now()) {
                return;
            }
            self.events.record(Event::Dropped {
                instance: instance_id.clone(),
                client: client_id.clone(),
            });
            self.events.record(Event::Aborted {
                instance: instance_id.clone(),
                reason: "drop".into(),
            });
            let others: Vec<_> = live
                .inner
                .members()
                .iter()
                .filter(|m| m.client_id != *client_id)
                .cloned()
                .collect();
            let notice = Message::system(SystemTopic::Drop)
                .addressed_to(Endpoint::Client)
                .in_instance(instance_id.clone())
                .broadcast()
                .with_params(json!({ "clientId": client_id }));
            deliver_to_members(&mut st, &others, instance_id, &notice);
            self.dispatch_handle(&st, instance_id).expect("present")
        };
        let _guard = handle.lock.lock().await;
        let msg = Message::system(SystemTopic::Drop)
            .addressed_to(Endpoint::Manager)
            .in_instance(instance_id.clone())
            .for_client(client_id.clone());
        match self.exchange(&handle.endpoint, msg).await {
            Ok(replies) => {
                for m in replies {
                    self.discard(instance_id, &m.topic, "instance is sealed");
                }
            }
            Err(e) => tracing::warn!(instance = %instance_id, error = %e, "GM did not take the drop notice"),
        }
    }

    /// Waits for messages after `cursor`, up to `linger` (capped by the
    /// configured poll linger). Returns the batch and the next cursor.
    pub async fn poll(
        &self,
        token: &SessionToken,
        cursor: Option<u64>,
        linger: Option<Duration>,
    ) -> Result<(Vec<Message>, u64), PlatformError> {
        let linger = linger.map_or(self.config.poll_linger, |l| l.min(self.config.poll_linger));
        let deadline = tokio::time::Instant::now() + linger;
        loop {
            let wake = {
                let mut st = self.lock();
                let sref = st.resolve(token, Instant::now())?;
                let s = st.sessions.get_mut(&sref).expect("resolved");
                let (batch, next) = s.outbox.take_from(cursor);
                if !batch.is_empty() || self.shutting_down.load(Ordering::SeqCst) || tokio::time::Instant::now() >= deadline {
                    return Ok((batch, next));
                }
                s.wake.clone()
            };
            let _ = tokio::time::timeout_at(deadline, wake.notified()).await;
        }
    }

    /// One reaper pass: dead sessions, waiting-room and loading timeouts,
    /// and pruning of long-finished instances.
    pub async fn expire(&self, now: Instant) {
        let mut disconnects = Vec::new();
        {
            let mut st = self.lock();
            let liveness = self.config.liveness_window;
            let dead: Vec<SessionRef> = st
                .sessions
                .iter()
                .filter(|(_, s)| now.saturating_duration_since(s.last_seen) > liveness)
                .map(|(k, _)| *k)
                .collect();
            for sref in dead {
                let s = st.sessions.remove(&sref).expect("listed");
                st.tokens.remove(&s.token);
                if s.queued {
                    if let Some(game) = &s.current_game {
                        if let Some(room) = st.rooms.get_mut(game) {
                            room.remove(&sref);
                        }
                    }
                }
                if let Some(seat) = s.current_instance {
                    if st.instances.get(&seat.instance_id).is_some_and(|i| i.inner.is_live()) {
                        disconnects.push((seat.instance_id, seat.client_id));
                    }
                }
                self.events.record(Event::SessionExpired { session: sref });
            }

            let timeout = self.config.waiting_room_timeout;
            let mut timed_out = Vec::new();
            for (game, room) in st.rooms.iter_mut() {
                for sref in room.expire(now, timeout) {
                    timed_out.push((game.clone(), sref));
                }
            }
            for (game, sref) in timed_out {
                if let Some(s) = st.sessions.get_mut(&sref) {
                    s.queued = false;
                    s.deliver(
                        Message::system(SystemTopic::Error)
                            .with_params(json!({ "reason": "waiting_room_timeout", "gameId": game })),
                    );
                }
                self.events.record(Event::WaitTimedOut { session: sref, game });
            }

            let loading = self.config.loading_timeout;
            for live in st.instances.values() {
                if live.inner.state() == InstanceState::Loading
                    && now.saturating_duration_since(live.inner.created_at()) > loading
                {
                    if let Some(first) = live.inner.unready().into_iter().next() {
                        disconnects.push((live.inner.id().clone(), first));
                    }
                }
            }

            st.instances.retain(|_, i| {
                i.inner.is_live() || i.inner.closed_at().is_none_or(|t| now.saturating_duration_since(t) < TERMINAL_RETENTION)
            });
            st.rooms.retain(|_, r| !r.is_empty());
        }
        for (instance, client) in disconnects {
            self.handle_disconnect(&instance, &client).await;
        }
    }

    /// Aborts every live instance, tells its members why, and releases
    /// pending polls.
    pub async fn shutdown(&self) {
        self.shutting_down.store(true, Ordering::SeqCst);
        let mut st = self.lock();
        let live: Vec<InstanceId> = st
            .instances
            .iter()
            .filter(|(_, i)| i.inner.is_live())
            .map(|(k, _)| k.clone())
            .collect();
        for id in live {
            self.abort_locked(&mut st, &id, "shutdown");
        }
        for s in st.sessions.values() {
            s.wake.notify_one();
        }
    }

    pub fn catalog(&self, token: Option<&SessionToken>) -> Vec<CatalogEntry> {
        let identity = token
            .and_then(|t| {
                let st = self.lock();
                st.tokens.get(t).map(|r| st.sessions[r].identity.clone())
            })
            .unwrap_or(Identity::Guest);
        let viewer = identity.account().and_then(|a| self.users.username(a));
        self.games
            .catalog(viewer.as_deref(), |f| self.users.check_access(f, &identity))
    }

    pub fn leaderboard(&self, game_id: &GameId, top_n: usize) -> Result<Vec<LeaderboardEntry>, PlatformError> {
        let game = self.visible_game(game_id, &Identity::Guest)?;
        Ok(self.users.leaderboard(&game.id, top_n))
    }

    pub async fn publish_game(&self, id: &GameId) -> Result<GameDescriptor, PublishError> {
        publish_game(&self.games, &self.gm, id, self.config.gm_request_timeout).await
    }
}

fn deliver_to_members(st: &mut State, members: &[Member<SessionRef>], instance_id: &InstanceId, message: &Message) {
    for m in members {
        if let Some(s) = st.sessions.get_mut(&m.key) {
            if s.current_instance.as_ref().is_some_and(|seat| seat.instance_id == *instance_id) {
                s.deliver(message.clone());
            }
        }
    }
}

/// Opens both registries under `dir`, which must already exist and be
/// writable.
pub fn open_stores(dir: &std::path::Path) -> Result<(UserRegistry, GameRegistry), StartupError> {
    if !dir.is_dir() {
        return Err(StartupError::MissingDataDir(dir.to_owned()));
    }
    let probe = dir.join(".write-probe");
    std::fs::write(&probe, b"")
        .and_then(|()| std::fs::remove_file(&probe))
        .map_err(|source| StartupError::ReadOnlyDataDir {
            path: dir.to_owned(),
            source,
        })?;
    Ok((UserRegistry::open(dir)?, GameRegistry::open(dir)?))
}

/// Probes the game's GM and, if it answers, publishes the game.
pub async fn publish_game(
    games: &GameRegistry,
    gm: &GmClient,
    id: &GameId,
    timeout: Duration,
) -> Result<GameDescriptor, PublishError> {
    let game = games.get(id).ok_or_else(|| GameError::Unknown(id.clone()))?;
    let endpoint = GmEndpoint::new(&game.gm_url, timeout, crate::gm::DEFAULT_MAX_RESPONSE_BYTES)?;
    gm.probe(&endpoint, PUBLISH_PROBE_ATTEMPTS)
        .await
        .map_err(PublishError::Probe)?;
    Ok(games.mark_published(id)?)
}
