//! User registry: accounts and profiles, per-game access filters, the score
//! ledger behind leaderboards, and the private clientId to account mapping.
//!
//! The mapping from anonymous client identifiers back to accounts lives only
//! here and is never serialized onto any network interface.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::sync::RwLock;
use std::time::{SystemTime, UNIX_EPOCH};

use argon2::password_hash::{PasswordHash, PasswordHasher, PasswordVerifier, SaltString};
use argon2::Argon2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ids::{AccountId, ClientId, GameId, InstanceId};
use crate::store::{Journal, StoreError};

const AGE_BANDS: [(u8, u8); 8] = [
    (0, 12),
    (13, 17),
    (18, 24),
    (25, 34),
    (35, 44),
    (45, 54),
    (55, 64),
    (65, 130),
];

/// Age is kept as a coarse band, never as a birthdate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AgeBand {
    pub min: u8,
    pub max: u8,
}

impl AgeBand {
    pub fn for_age(age: u32) -> Option<Self> {
        AGE_BANDS
            .iter()
            .find(|(lo, hi)| age >= u32::from(*lo) && age <= u32::from(*hi))
            .map(|&(min, max)| AgeBand { min, max })
    }

    /// Parses one of the canonical bands, e.g. `"18-24"`.
    pub fn parse(s: &str) -> Option<Self> {
        let (lo, hi) = s.split_once('-')?;
        let band = AgeBand {
            min: lo.trim().parse().ok()?,
            max: hi.trim().parse().ok()?,
        };
        AGE_BANDS
            .contains(&(band.min, band.max))
            .then_some(band)
    }
}

impl fmt::Display for AgeBand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.min, self.max)
    }
}

impl Serialize for AgeBand {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AgeBand {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        AgeBand::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("unknown age band `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Female,
    Male,
    Other,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Profile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age_band: Option<AgeBand>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender: Option<Gender>,
    /// Two-letter lowercase language code.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<String>,
    /// Lowercased free-form region name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<String>,
}

/// Profile values as supplied by a registering user, before validation.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileInput {
    pub age: Option<u32>,
    pub age_band: Option<String>,
    pub gender: Option<String>,
    pub language: Option<String>,
    pub location: Option<String>,
}

impl ProfileInput {
    pub fn validate(&self) -> Result<Profile, RegistryError> {
        let bad = |field: &'static str, why: &str| RegistryError::InvalidProfile {
            field,
            reason: why.to_owned(),
        };
        let age_band = match (self.age, &self.age_band) {
            (Some(_), Some(_)) => return Err(bad("age", "give either age or age_band")),
            (Some(age), None) => Some(AgeBand::for_age(age).ok_or_else(|| bad("age", "out of range"))?),
            (None, Some(s)) => Some(AgeBand::parse(s).ok_or_else(|| bad("age_band", "unknown band"))?),
            (None, None) => None,
        };
        let gender = match self.gender.as_deref().map(str::to_ascii_lowercase).as_deref() {
            None => None,
            Some("female") => Some(Gender::Female),
            Some("male") => Some(Gender::Male),
            Some("other") => Some(Gender::Other),
            Some(_) => return Err(bad("gender", "expected female, male or other")),
        };
        let language = match &self.language {
            None => None,
            Some(l) if l.len() == 2 && l.bytes().all(|b| b.is_ascii_alphabetic()) => {
                Some(l.to_ascii_lowercase())
            }
            Some(_) => return Err(bad("language", "expected a two-letter code")),
        };
        let location = match &self.location {
            None => None,
            Some(l) => {
                let l = l.trim();
                if l.is_empty() || l.chars().count() > 64 {
                    return Err(bad("location", "expected 1 to 64 characters"));
                }
                Some(l.to_lowercase())
            }
        };
        Ok(Profile {
            age_band,
            gender,
            language,
            location,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Account {
    pub id: AccountId,
    pub username: String,
    /// PHC-format salted argon2 verifier.
    verifier: String,
    pub profile: Profile,
    /// Unix seconds.
    pub created_at: u64,
}

/// Who is behind a session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Identity {
    Account(AccountId),
    Guest,
}

impl Identity {
    pub fn account(&self) -> Option<&AccountId> {
        match self {
            Identity::Account(id) => Some(id),
            Identity::Guest => None,
        }
    }
}

/// Per-game restriction on who may play. The default filter admits everyone.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccessFilter {
    #[serde(default)]
    pub requires_registration: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub languages: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub genders: Option<Vec<Gender>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age_min: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age_max: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub locations: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DenyReason {
    RegistrationRequired,
    ProfileMismatch,
    NotAvailable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Allow,
    Deny(DenyReason),
}

impl AccessFilter {
    pub fn is_profile_dependent(&self) -> bool {
        self.languages.is_some()
            || self.genders.is_some()
            || self.age_min.is_some()
            || self.age_max.is_some()
            || self.locations.is_some()
    }

    /// Pure predicate over a profile snapshot; `None` is a guest.
    pub fn check(&self, profile: Option<&Profile>) -> Access {
        let Some(profile) = profile else {
            return if self.requires_registration || self.is_profile_dependent() {
                Access::Deny(DenyReason::RegistrationRequired)
            } else {
                Access::Allow
            };
        };
        let mismatch = Access::Deny(DenyReason::ProfileMismatch);
        if let Some(langs) = &self.languages {
            match &profile.language {
                Some(l) if langs.iter().any(|x| x.eq_ignore_ascii_case(l)) => {}
                _ => return mismatch,
            }
        }
        if let Some(genders) = &self.genders {
            match profile.gender {
                Some(g) if genders.contains(&g) => {}
                _ => return mismatch,
            }
        }
        if self.age_min.is_some() || self.age_max.is_some() {
            let Some(band) = profile.age_band else {
                return mismatch;
            };
            if band.min < self.age_min.unwrap_or(0) || band.max > self.age_max.unwrap_or(u8::MAX) {
                return mismatch;
            }
        }
        if let Some(locs) = &self.locations {
            match &profile.location {
                Some(l) if locs.iter().any(|x| x.to_lowercase() == *l) => {}
                _ => return mismatch,
            }
        }
        Access::Allow
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("username `{0}` is already taken")]
    DuplicateUsername(String),
    #[error("username must be 3 to 32 characters of letters, digits, `_`, `-` or `.`")]
    InvalidUsername,
    #[error("password must be at least 6 characters")]
    WeakPassword,
    #[error("profile field `{field}`: {reason}")]
    InvalidProfile { field: &'static str, reason: String },
    #[error("invalid username or password")]
    BadCredentials,
    #[error("instance {0} is not known to the registry")]
    UnknownInstance(InstanceId),
    #[error("an account appears twice in instance {0}")]
    DuplicateMember(InstanceId),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Accumulated result of one account in one game.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GameStats {
    pub account_id: AccountId,
    pub game_id: GameId,
    pub total_score: f64,
    pub matches_played: u64,
    #[serde(skip)]
    first_credit: (u64, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeaderboardEntry {
    pub display_name: String,
    pub total_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreditEntry {
    pub account_id: AccountId,
    pub score: f64,
}

/// One `over` worth of credits. Appended atomically as a single journal line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreditBatch {
    pub seq: u64,
    pub game_id: GameId,
    pub instance_id: InstanceId,
    pub entries: Vec<CreditEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct InstanceMembers {
    instance_id: InstanceId,
    game_id: GameId,
    members: Vec<(ClientId, Option<AccountId>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScoreUpdate {
    Applied {
        stats: Vec<GameStats>,
        /// Score entries for clientIds outside the instance.
        unknown: Vec<ClientId>,
        /// Guest members; their scores are not persisted.
        guests: Vec<ClientId>,
    },
    /// Credits for this instance were already applied.
    Replay,
}

#[derive(Debug, Clone, Serialize)]
pub struct UserSummary {
    pub username: String,
    pub profile: Profile,
    pub created_at: u64,
}

struct Journals {
    accounts: Journal<Account>,
    instances: Journal<InstanceMembers>,
    credits: Journal<CreditBatch>,
}

#[derive(Default)]
struct Inner {
    accounts: HashMap<AccountId, Account>,
    by_name: HashMap<String, AccountId>,
    instances: HashMap<InstanceId, InstanceMembers>,
    ledger: Vec<CreditBatch>,
    credited: HashSet<InstanceId>,
    stats: HashMap<(GameId, AccountId), GameStats>,
    journals: Option<Journals>,
}

impl Inner {
    fn apply_batch(&mut self, batch: CreditBatch) {
        for (idx, entry) in batch.entries.iter().enumerate() {
            let stats = self
                .stats
                .entry((batch.game_id.clone(), entry.account_id.clone()))
                .or_insert_with(|| GameStats {
                    account_id: entry.account_id.clone(),
                    game_id: batch.game_id.clone(),
                    total_score: 0.0,
                    matches_played: 0,
                    first_credit: (batch.seq, idx),
                });
            stats.total_score += entry.score;
            stats.matches_played += 1;
        }
        self.credited.insert(batch.instance_id.clone());
        self.ledger.push(batch);
    }
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn valid_username(name: &str) -> bool {
    (3..=32).contains(&name.len())
        && name
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.'))
}

pub struct UserRegistry {
    inner: RwLock<Inner>,
}

impl UserRegistry {
    /// A registry that keeps nothing on disk.
    pub fn in_memory() -> Self {
        UserRegistry {
            inner: RwLock::new(Inner::default()),
        }
    }

    /// Opens the registry tables under `dir`, replaying their journals.
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        let (accounts, account_recs) = Journal::<Account>::open(dir.join("accounts.jsonl"))?;
        let (instances, instance_recs) = Journal::<InstanceMembers>::open(dir.join("instances.jsonl"))?;
        let (credits, credit_recs) = Journal::<CreditBatch>::open(dir.join("credits.jsonl"))?;
        let mut inner = Inner::default();
        for a in account_recs {
            inner.by_name.insert(a.username.to_lowercase(), a.id.clone());
            inner.accounts.insert(a.id.clone(), a);
        }
        for m in instance_recs {
            inner.instances.insert(m.instance_id.clone(), m);
        }
        for b in credit_recs {
            inner.apply_batch(b);
        }
        inner.journals = Some(Journals {
            accounts,
            instances,
            credits,
        });
        Ok(UserRegistry {
            inner: RwLock::new(inner),
        })
    }

    pub fn register_user(
        &self,
        username: &str,
        password: &str,
        profile: &ProfileInput,
    ) -> Result<AccountId, RegistryError> {
        if !valid_username(username) {
            return Err(RegistryError::InvalidUsername);
        }
        if password.chars().count() < 6 {
            return Err(RegistryError::WeakPassword);
        }
        let profile = profile.validate()?;
        let key = username.to_lowercase();
        if self.inner.read().unwrap().by_name.contains_key(&key) {
            return Err(RegistryError::DuplicateUsername(username.to_owned()));
        }
        // hash outside the lock, then re-check
        let verifier = hash_password(password);
        let mut inner = self.inner.write().unwrap();
        if inner.by_name.contains_key(&key) {
            return Err(RegistryError::DuplicateUsername(username.to_owned()));
        }
        let account = Account {
            id: AccountId::generate(),
            username: username.to_owned(),
            verifier,
            profile,
            created_at: now_unix(),
        };
        if let Some(j) = inner.journals.as_mut() {
            j.accounts.append(&account)?;
        }
        let id = account.id.clone();
        inner.by_name.insert(key, id.clone());
        inner.accounts.insert(id.clone(), account);
        Ok(id)
    }

    pub fn authenticate(&self, username: &str, password: &str) -> Result<AccountId, RegistryError> {
        let (id, verifier) = {
            let inner = self.inner.read().unwrap();
            let id = inner
                .by_name
                .get(&username.to_lowercase())
                .ok_or(RegistryError::BadCredentials)?;
            (id.clone(), inner.accounts[id].verifier.clone())
        };
        let parsed = PasswordHash::new(&verifier).map_err(|_| RegistryError::BadCredentials)?;
        Argon2::default()
            .verify_password(password.as_bytes(), &parsed)
            .map_err(|_| RegistryError::BadCredentials)?;
        Ok(id)
    }

    pub fn profile(&self, id: &AccountId) -> Option<Profile> {
        self.inner.read().unwrap().accounts.get(id).map(|a| a.profile.clone())
    }

    pub fn username(&self, id: &AccountId) -> Option<String> {
        self.inner.read().unwrap().accounts.get(id).map(|a| a.username.clone())
    }

    pub fn find_username(&self, username: &str) -> Option<AccountId> {
        self.inner.read().unwrap().by_name.get(&username.to_lowercase()).cloned()
    }

    pub fn list_users(&self) -> Vec<UserSummary> {
        let inner = self.inner.read().unwrap();
        let mut users: Vec<_> = inner
            .accounts
            .values()
            .map(|a| UserSummary {
                username: a.username.clone(),
                profile: a.profile.clone(),
                created_at: a.created_at,
            })
            .collect();
        users.sort_by(|a, b| a.username.cmp(&b.username));
        users
    }

    /// Evaluates a game's filter against an identity (guests have no profile).
    pub fn check_access(&self, filter: &AccessFilter, identity: &Identity) -> Access {
        match identity {
            Identity::Guest => filter.check(None),
            Identity::Account(id) => match self.profile(id) {
                Some(p) => filter.check(Some(&p)),
                None => Access::Deny(DenyReason::NotAvailable),
            },
        }
    }

    /// Records the private mapping for a freshly formed instance.
    pub fn record_instance(
        &self,
        game_id: &GameId,
        instance_id: &InstanceId,
        members: Vec<(ClientId, Option<AccountId>)>,
    ) -> Result<(), RegistryError> {
        let mut seen = HashSet::new();
        if members
            .iter()
            .filter_map(|(_, a)| a.as_ref())
            .any(|a| !seen.insert(a))
        {
            return Err(RegistryError::DuplicateMember(instance_id.clone()));
        }
        let rec = InstanceMembers {
            instance_id: instance_id.clone(),
            game_id: game_id.clone(),
            members,
        };
        let mut inner = self.inner.write().unwrap();
        if let Some(j) = inner.journals.as_mut() {
            j.instances.append(&rec)?;
        }
        inner.instances.insert(instance_id.clone(), rec);
        Ok(())
    }

    /// Private: maps an anonymous member back to its account. Guests and
    /// unknown pairs resolve to `None`.
    pub fn resolve_client(&self, instance_id: &InstanceId, client_id: &ClientId) -> Option<AccountId> {
        let inner = self.inner.read().unwrap();
        inner
            .instances
            .get(instance_id)?
            .members
            .iter()
            .find(|(c, _)| c == client_id)
            .and_then(|(_, a)| a.clone())
    }

    /// Credits one finished instance. Every registered member gets a match
    /// played and their score (zero when absent from `scores`); replays of
    /// the same instance credit nothing.
    pub fn update_scores(
        &self,
        game_id: &GameId,
        instance_id: &InstanceId,
        scores: &BTreeMap<ClientId, f64>,
    ) -> Result<ScoreUpdate, RegistryError> {
        let mut inner = self.inner.write().unwrap();
        if inner.credited.contains(instance_id) {
            return Ok(ScoreUpdate::Replay);
        }
        let members = inner
            .instances
            .get(instance_id)
            .filter(|m| m.game_id == *game_id)
            .ok_or_else(|| RegistryError::UnknownInstance(instance_id.clone()))?
            .members
            .clone();

        let unknown: Vec<ClientId> = scores
            .keys()
            .filter(|c| !members.iter().any(|(m, _)| m == *c))
            .cloned()
            .collect();
        for c in &unknown {
            tracing::warn!(instance = %instance_id, client = %c, "score for a client outside the instance skipped");
        }
        let mut guests = Vec::new();
        let mut entries = Vec::new();
        for (client, account) in &members {
            match account {
                Some(account_id) => entries.push(CreditEntry {
                    account_id: account_id.clone(),
                    score: scores.get(client).copied().unwrap_or(0.0),
                }),
                None => guests.push(client.clone()),
            }
        }

        let batch = CreditBatch {
            seq: inner.ledger.len() as u64 + 1,
            game_id: game_id.clone(),
            instance_id: instance_id.clone(),
            entries,
        };
        if let Some(j) = inner.journals.as_mut() {
            j.credits.append(&batch)?;
        }
        let accounts: Vec<_> = batch.entries.iter().map(|e| e.account_id.clone()).collect();
        inner.apply_batch(batch);
        let stats = accounts
            .into_iter()
            .map(|a| inner.stats[&(game_id.clone(), a)].clone())
            .collect();
        Ok(ScoreUpdate::Applied {
            stats,
            unknown,
            guests,
        })
    }

    pub fn total_score(&self, game_id: &GameId, account: &AccountId) -> f64 {
        self.inner
            .read()
            .unwrap()
            .stats
            .get(&(game_id.clone(), account.clone()))
            .map_or(0.0, |s| s.total_score)
    }

    pub fn stats(&self, game_id: &GameId) -> Vec<GameStats> {
        let inner = self.inner.read().unwrap();
        let mut stats: Vec<_> = inner
            .stats
            .values()
            .filter(|s| s.game_id == *game_id)
            .cloned()
            .collect();
        stats.sort_by(leaderboard_order);
        stats
    }

    /// Descending by total score; ties go to whoever was credited first.
    pub fn leaderboard(&self, game_id: &GameId, top_n: usize) -> Vec<LeaderboardEntry> {
        let stats = self.stats(game_id);
        let inner = self.inner.read().unwrap();
        stats
            .into_iter()
            .take(top_n)
            .map(|s| LeaderboardEntry {
                display_name: inner.accounts[&s.account_id].username.clone(),
                total_score: s.total_score,
            })
            .collect()
    }

    /// The append-only credit ledger for one game.
    pub fn ledger(&self, game_id: &GameId) -> Vec<CreditBatch> {
        self.inner
            .read()
            .unwrap()
            .ledger
            .iter()
            .filter(|b| b.game_id == *game_id)
            .cloned()
            .collect()
    }
}

fn leaderboard_order(a: &GameStats, b: &GameStats) -> std::cmp::Ordering {
    b.total_score
        .total_cmp(&a.total_score)
        .then(a.first_credit.cmp(&b.first_credit))
}

fn hash_password(password: &str) -> String {
    let mut salt = [0u8; 16];
    rand::rng().fill(&mut salt);
    let salt = SaltString::encode_b64(&salt).expect("16-byte salt encodes");
    Argon2::default()
        .hash_password(password.as_bytes(), &salt)
        .expect("argon2 hashing with default params")
        .to_string()
}
