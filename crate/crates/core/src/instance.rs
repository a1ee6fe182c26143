//! Lifecycle of one running match.
//!
//! ```text
//! Loading ──all ready──▶ Running ──over──▶ Over
//!    │                      │
//!    └──────drop/fault──────┴──────────▶ Aborted
//! ```

use std::collections::HashSet;
use std::time::Instant;

use serde::Serialize;

use crate::ids::{ClientId, GameId, InstanceId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum InstanceState {
    Loading,
    Running,
    Over,
    Aborted,
}

impl InstanceState {
    pub fn is_live(self) -> bool {
        matches!(self, InstanceState::Loading | InstanceState::Running)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InstanceState::Loading => "loading",
            InstanceState::Running => "running",
            InstanceState::Over => "over",
            InstanceState::Aborted => "aborted",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum InstanceError {
    #[error("client is not a member of this instance")]
    UnknownClient,
    #[error("instance is {}", .0.as_str())]
    NotLive(InstanceState),
    #[error("instance is {}, not running", .0.as_str())]
    NotRunning(InstanceState),
}

#[derive(Debug, Clone)]
pub struct Member<K> {
    pub client_id: ClientId,
    pub key: K,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReadyOutcome {
    /// False when the client had already reported ready.
    pub newly_ready: bool,
    /// True when this report completed the set and the instance started.
    pub started: bool,
}

#[derive(Debug, Clone)]
pub struct GameInstance<K> {
    id: InstanceId,
    game_id: GameId,
    members: Vec<Member<K>>,
    state: InstanceState,
    ready: HashSet<ClientId>,
    created_at: Instant,
    closed_at: Option<Instant>,
}

impl<K: PartialEq + Clone> GameInstance<K> {
    /// Creates an instance in `Loading`. Client ids must be pairwise distinct.
    pub fn new(id: InstanceId, game_id: GameId, members: Vec<Member<K>>, created_at: Instant) -> Self {
        let distinct: HashSet<_> = members.iter().map(|m| &m.client_id).collect();
        assert_eq!(distinct.len(), members.len(), "client ids must be distinct");
        GameInstance {
            id,
            game_id,
            members,
            state: InstanceState::Loading,
            ready: HashSet::new(),
            created_at,
            closed_at: None,
        }
    }

    pub fn id(&self) -> &InstanceId {
        &self.id
    }

    pub fn game_id(&self) -> &GameId {
        &self.game_id
    }

    pub fn state(&self) -> InstanceState {
        self.state
    }

    pub fn members(&self) -> &[Member<K>] {
        &self.members
    }

    pub fn created_at(&self) -> Instant {
        self.created_at
    }

    pub fn closed_at(&self) -> Option<Instant> {
        self.closed_at
    }

    pub fn is_live(&self) -> bool {
        self.state.is_live()
    }

    pub fn is_ready(&self, client: &ClientId) -> bool {
        self.ready.contains(client)
    }

    pub fn member_key(&self, client: &ClientId) -> Option<&K> {
        self.members.iter().find(|m| m.client_id == *client).map(|m| &m.key)
    }

    pub fn client_of(&self, key: &K) -> Option<&ClientId> {
        self.members.iter().find(|m| m.key == *key).map(|m| &m.client_id)
    }

    /// Members who have not reported ready yet, in member order.
    pub fn unready(&self) -> Vec<ClientId> {
        self.members
            .iter()
            .filter(|m| !self.ready.contains(&m.client_id))
            .map(|m| m.client_id.clone())
            .collect()
    }

    pub fn mark_ready(&mut self, client: &ClientId) -> Result<ReadyOutcome, InstanceError> {
        if !self.is_live() {
            return Err(InstanceError::NotLive(self.state));
        }
        if self.member_key(client).is_none() {
            return Err(InstanceError::UnknownClient);
        }
        if !self.ready.insert(client.clone()) {
            return Ok(ReadyOutcome {
                newly_ready: false,
                started: false,
            });
        }
        let started = self.ready.len() == self.members.len();
        if started {
            self.state = InstanceState::Running;
        }
        Ok(ReadyOutcome {
            newly_ready: true,
            started,
        })
    }

    /// Moves a live instance to `Aborted`. Returns false if it was already
    /// finished, so concurrent aborts transition exactly once.
    pub fn abort(&mut self, now: Instant) -> bool {
        if !self.is_live() {
            return false;
        }
        self.state = InstanceState::Aborted;
        self.closed_at = Some(now);
        true
    }

    pub fn close(&mut self, now: Instant) -> Result<(), InstanceError> {
        if self.state != InstanceState::Running {
            return Err(InstanceError::NotRunning(self.state));
        }
        self.state = InstanceState::Over;
        self.closed_at = Some(now);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three() -> (GameInstance<u32>, Vec<ClientId>) {
        let clients: Vec<ClientId> = ["c1", "c2", "c3"].iter().map(|&c| c.into()).collect();
        let members = clients
            .iter()
            .enumerate()
            .map(|(i, c)| Member {
                client_id: c.clone(),
                key: i as u32,
            })
            .collect();
        (
            GameInstance::new("i".into(), "g".into(), members, Instant::now()),
            clients,
        )
    }

    #[test]
    fn readiness_drives_loading_to_running() {
        let (mut inst, c) = three();
        let first = inst.mark_ready(&c[0]).unwrap();
        assert_eq!(first, ReadyOutcome { newly_ready: true, started: false });
        assert_eq!(inst.state(), InstanceState::Loading);
        inst.mark_ready(&c[1]).unwrap();
        let last = inst.mark_ready(&c[2]).unwrap();
        assert!(last.started);
        assert_eq!(inst.state(), InstanceState::Running);
        assert!(inst.unready().is_empty());
    }

    #[test]
    fn duplicate_ready_is_a_no_op() {
        let (mut inst, c) = three();
        inst.mark_ready(&c[0]).unwrap();
        assert_eq!(inst.mark_ready(&c[0]).unwrap(), ReadyOutcome { newly_ready: false, started: false });
        assert_eq!(inst.unready(), vec![c[1].clone(), c[2].clone()]);
    }

    #[test]
    fn ready_on_aborted_or_unknown_is_rejected() {
        let (mut inst, c) = three();
        assert_eq!(inst.mark_ready(&"zz".into()), Err(InstanceError::UnknownClient));
        assert!(inst.abort(Instant::now()));
        assert_eq!(inst.mark_ready(&c[0]), Err(InstanceError::NotLive(InstanceState::Aborted)));
    }

    #[test]
    fn abort_happens_once() {
        let (mut inst, _) = three();
        assert!(inst.abort(Instant::now()));
        assert!(!inst.abort(Instant::now()));
        assert_eq!(inst.state(), InstanceState::Aborted);
        assert!(inst.closed_at().is_some());
    }

    #[test]
    fn close_requires_running_and_is_terminal() {
        let (mut inst, c) = three();
        assert_eq!(inst.close(Instant::now()), Err(InstanceError::NotRunning(InstanceState::Loading)));
        for client in &c {
            inst.mark_ready(client).unwrap();
        }
        inst.close(Instant::now()).unwrap();
        assert_eq!(inst.state(), InstanceState::Over);
        assert!(inst.close(Instant::now()).is_err());
        assert!(!inst.abort(Instant::now()));
    }
}
