//! Game registry: deployed experiments, their hosted UI bundles and the
//! public catalog.
//!
//! UI files are stored content-addressed (SHA-256). A bundle is a map from
//! relative path to content hash, so re-uploading a draft swaps the map while
//! every `/assets/{hash}` URL keeps returning the same bytes forever.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::gm::{parse_gm_url, InvalidGmUrl};
use crate::ids::{random_token, GameId};
use crate::matchmaking::{ConstraintError, GroupingConstraint, Predicate};
use crate::store::{read_snapshot, write_atomic, write_snapshot, StoreError};
use crate::users::{Access, AccessFilter};

pub const DEFAULT_ENTRY: &str = "index.html";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GameStatus {
    Draft,
    Published,
    Suspended,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UiBundle {
    pub entry: String,
    /// Relative path to SHA-256 hex of the file contents.
    pub files: BTreeMap<String, String>,
}

impl UiBundle {
    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    pub fn has_entry(&self) -> bool {
        self.files.contains_key(&self.entry)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameDescriptor {
    pub id: GameId,
    pub name: String,
    pub description: String,
    #[serde(default)]
    pub icon: Option<String>,
    #[serde(default)]
    pub screenshots: Vec<String>,
    pub required_players: usize,
    #[serde(default)]
    pub grouping: Vec<Predicate>,
    pub gm_url: String,
    pub ui_bundle: UiBundle,
    #[serde(default)]
    pub access_filter: AccessFilter,
    pub status: GameStatus,
    gm_auth_token: String,
    #[serde(default)]
    pub owner: Option<String>,
}

impl GameDescriptor {
    /// Token a GM presents when pushing messages unprompted.
    pub fn gm_auth_token(&self) -> &str {
        &self.gm_auth_token
    }

    pub fn constraint(&self) -> GroupingConstraint {
        GroupingConstraint {
            required_players: self.required_players,
            predicates: self.grouping.clone(),
        }
    }

    pub fn entry_url(&self) -> String {
        format!("/games/{}/{}", self.id, self.ui_bundle.entry)
    }

    fn asset_url(&self, path: &str) -> String {
        match self.ui_bundle.files.get(path) {
            Some(hash) => format!("/assets/{hash}"),
            None => format!("/games/{}/{}", self.id, path),
        }
    }

    /// Whether `viewer` may see and play this game at all, before filters.
    pub fn available_to(&self, viewer: Option<&str>) -> bool {
        match self.status {
            GameStatus::Published => true,
            GameStatus::Draft => self.is_owner(viewer),
            GameStatus::Suspended => false,
        }
    }

    pub fn is_owner(&self, viewer: Option<&str>) -> bool {
        matches!((&self.owner, viewer), (Some(o), Some(v)) if o.eq_ignore_ascii_case(v))
    }
}

/// The researcher-supplied description of a game, as read from a manifest.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameManifest {
    pub id: String,
    pub name: String,
    pub description: String,
    #[serde(default)]
    pub icon: Option<String>,
    #[serde(default)]
    pub screenshots: Vec<String>,
    pub players: usize,
    pub gm_url: String,
    /// Directory holding the UI files, relative to the manifest.
    #[serde(default = "default_ui_dir")]
    pub ui_dir: PathBuf,
    #[serde(default = "default_entry")]
    pub entry: String,
    #[serde(default)]
    pub owner: Option<String>,
    #[serde(default)]
    pub filter: AccessFilter,
    #[serde(default)]
    pub grouping: Vec<Predicate>,
}

fn default_ui_dir() -> PathBuf {
    PathBuf::from("ui")
}

fn default_entry() -> String {
    DEFAULT_ENTRY.to_owned()
}

impl GameManifest {
    pub fn parse(text: &str) -> Result<Self, GameError> {
        toml::from_str(text).map_err(|e| GameError::Manifest(e.to_string()))
    }
}

/// Public catalog projection. Holds neither the GM URL nor its token.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CatalogEntry {
    pub id: GameId,
    pub name: String,
    pub description: String,
    pub icon: Option<String>,
    pub screenshots: Vec<String>,
    pub players: usize,
    pub status: GameStatus,
    pub url: String,
    pub playable: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum GameError {
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("game id `{0}` must be 1-64 lowercase letters, digits or `-`")]
    InvalidId(String),
    #[error("missing or empty field `{0}`")]
    MissingField(&'static str),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    GmUrl(#[from] InvalidGmUrl),
    #[error("UI bundle has no entry page `{0}`")]
    MissingEntry(String),
    #[error("UI bundle path `{0}` is not a safe relative path")]
    BadPath(String),
    #[error("unknown game `{0}`")]
    Unknown(GameId),
    #[error("game `{id}` is {status:?}; only drafts can be re-uploaded or published")]
    WrongStatus { id: GameId, status: GameStatus },
    #[error("reading {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone)]
pub struct Asset {
    pub hash: String,
    pub bytes: Arc<Vec<u8>>,
    pub content_type: &'static str,
}

pub fn content_type_for(path: &str) -> &'static str {
    let ext = path.rsplit('.').next().unwrap_or("").to_ascii_lowercase();
    match ext.as_str() {
        "html" | "htm" => "text/html; charset=utf-8",
        "js" | "mjs" => "text/javascript; charset=utf-8",
        "css" => "text/css; charset=utf-8",
        "json" => "application/json",
        "png" => "image/png",
        "jpg" | "jpeg" => "image/jpeg",
        "gif" => "image/gif",
        "svg" => "image/svg+xml",
        "webp" => "image/webp",
        "ico" => "image/x-icon",
        "txt" => "text/plain; charset=utf-8",
        "wasm" => "application/wasm",
        _ => "application/octet-stream",
    }
}

fn normalize_path(raw: &str) -> Result<String, GameError> {
    let p = raw.replace('\\', "/");
    let bad = || GameError::BadPath(raw.to_owned());
    if p.is_empty() || p.starts_with('/') {
        return Err(bad());
    }
    let parts: Vec<_> = p.split('/').filter(|s| !s.is_empty() && *s != ".").collect();
    if parts.is_empty() || parts.contains(&"..") {
        return Err(bad());
    }
    Ok(parts.join("/"))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Blobs {
    dir: Option<PathBuf>,
    cache: HashMap<String, Arc<Vec<u8>>>,
}

impl Blobs {
    fn put(&mut self, bytes: Vec<u8>) -> Result<String, StoreError> {
        let hash = sha256_hex(&bytes);
        if let Some(dir) = &self.dir {
            let path = dir.join(&hash);
            if !path.exists() {
                write_atomic(&path, &bytes)?;
            }
        }
        self.cache.entry(hash.clone()).or_insert_with(|| Arc::new(bytes));
        Ok(hash)
    }

    fn get(&mut self, hash: &str) -> Option<Arc<Vec<u8>>> {
        if let Some(b) = self.cache.get(hash) {
            return Some(b.clone());
        }
        if hash.len() != 64 || !hash.bytes().all(|b| b.is_ascii_hexdigit()) {
            return None;
        }
        let bytes = fs::read(self.dir.as_ref()?.join(hash)).ok()?;
        let bytes = Arc::new(bytes);
        self.cache.insert(hash.to_owned(), bytes.clone());
        Some(bytes)
    }
}

pub struct GameRegistry {
    games: RwLock<BTreeMap<GameId, GameDescriptor>>,
    blobs: RwLock<Blobs>,
    snapshot: Option<PathBuf>,
}

impl GameRegistry {
    pub fn in_memory() -> Self {
        GameRegistry {
            games: RwLock::new(BTreeMap::new()),
            blobs: RwLock::new(Blobs {
                dir: None,
                cache: HashMap::new(),
            }),
            snapshot: None,
        }
    }

    /// Opens `games.json` and the `blobs/` directory under `dir`.
    pub fn open(dir: &Path) -> Result<Self, GameError> {
        let blob_dir = dir.join("blobs");
        fs::create_dir_all(&blob_dir).map_err(|source| GameError::Read {
            path: blob_dir.clone(),
            source,
        })?;
        let snapshot = dir.join("games.json");
        let games: Vec<GameDescriptor> = read_snapshot(&snapshot)?.unwrap_or_default();
        Ok(GameRegistry {
            games: RwLock::new(games.into_iter().map(|g| (g.id.clone(), g)).collect()),
            blobs: RwLock::new(Blobs {
                dir: Some(blob_dir),
                cache: HashMap::new(),
            }),
            snapshot: Some(snapshot),
        })
    }

    fn persist(&self, games: &BTreeMap<GameId, GameDescriptor>) -> Result<(), GameError> {
        if let Some(path) = &self.snapshot {
            let all: Vec<_> = games.values().collect();
            write_snapshot(path, &all)?;
        }
        Ok(())
    }

    /// Stores a new draft, or replaces metadata and bundle of an existing
    /// draft with the same id. The GM token survives re-uploads.
    pub fn register_game(
        &self,
        manifest: &GameManifest,
        files: Vec<(String, Vec<u8>)>,
    ) -> Result<GameDescriptor, GameError> {
        if !GameId::is_valid_slug(&manifest.id) {
            return Err(GameError::InvalidId(manifest.id.clone()));
        }
        if manifest.name.trim().is_empty() {
            return Err(GameError::MissingField("name"));
        }
        if manifest.description.trim().is_empty() {
            return Err(GameError::MissingField("description"));
        }
        GroupingConstraint::new(manifest.players, manifest.grouping.clone())?;
        let gm_url = parse_gm_url(&manifest.gm_url)?;
        let entry = normalize_path(&manifest.entry)?;

        let mut normalized = Vec::with_capacity(files.len());
        for (path, bytes) in files {
            normalized.push((normalize_path(&path)?, bytes));
        }
        if !normalized.iter().any(|(p, _)| *p == entry) {
            return Err(GameError::MissingEntry(entry));
        }

        let id = GameId::new(manifest.id.clone());
        let mut games = self.games.write().unwrap();
        let token = match games.get(&id) {
            Some(existing) if existing.status != GameStatus::Draft => {
                return Err(GameError::WrongStatus {
                    id,
                    status: existing.status,
                })
            }
            Some(existing) => existing.gm_auth_token.clone(),
            None => random_token(24),
        };

        let mut bundle = UiBundle {
            entry,
            files: BTreeMap::new(),
        };
        {
            let mut blobs = self.blobs.write().unwrap();
            for (path, bytes) in normalized {
                let hash = blobs.put(bytes)?;
                bundle.files.insert(path, hash);
            }
        }

        let descriptor = GameDescriptor {
            id: id.clone(),
            name: manifest.name.trim().to_owned(),
            description: manifest.description.trim().to_owned(),
            icon: manifest.icon.clone(),
            screenshots: manifest.screenshots.clone(),
            required_players: manifest.players,
            grouping: manifest.grouping.clone(),
            gm_url: gm_url.to_string(),
            ui_bundle: bundle,
            access_filter: manifest.filter.clone(),
            status: GameStatus::Draft,
            gm_auth_token: token,
            owner: manifest.owner.clone(),
        };
        let previous = games.insert(id.clone(), descriptor.clone());
        if let Err(e) = self.persist(&games) {
            match previous {
                Some(p) => games.insert(id, p),
                None => games.remove(&id),
            };
            return Err(e);
        }
        Ok(descriptor)
    }

    /// Reads a manifest file and every file under its UI directory.
    pub fn register_manifest(&self, manifest_path: &Path) -> Result<GameDescriptor, GameError> {
        let read_err = |path: &Path| {
            let path = path.to_owned();
            move |source| GameError::Read { path, source }
        };
        let text = fs::read_to_string(manifest_path).map_err(read_err(manifest_path))?;
        let manifest = GameManifest::parse(&text)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let ui_dir = base.join(&manifest.ui_dir);
        let mut files = Vec::new();
        let mut stack = vec![ui_dir.clone()];
        while let Some(dir) = stack.pop() {
            for entry in fs::read_dir(&dir).map_err(read_err(&dir))? {
                let entry = entry.map_err(read_err(&dir))?;
                let path = entry.path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    let rel = path
                        .strip_prefix(&ui_dir)
                        .expect("walked below ui_dir")
                        .to_string_lossy()
                        .into_owned();
                    let bytes = fs::read(&path).map_err(read_err(&path))?;
                    files.push((rel, bytes));
                }
            }
        }
        self.register_game(&manifest, files)
    }

    pub fn get(&self, id: &GameId) -> Option<GameDescriptor> {
        self.games.read().unwrap().get(id).cloned()
    }

    pub fn list(&self) -> Vec<GameDescriptor> {
        self.games.read().unwrap().values().cloned().collect()
    }

    fn set_status(&self, id: &GameId, allowed_from: &[GameStatus], to: GameStatus) -> Result<GameDescriptor, GameError> {
        let mut games = self.games.write().unwrap();
        let game = games.get_mut(id).ok_or_else(|| GameError::Unknown(id.clone()))?;
        if game.status == to {
            return Ok(game.clone());
        }
        if !allowed_from.contains(&game.status) {
            return Err(GameError::WrongStatus {
                id: id.clone(),
                status: game.status,
            });
        }
        let before = game.status;
        game.status = to;
        let out = game.clone();
        if let Err(e) = self.persist(&games) {
            games.get_mut(id).expect("present").status = before;
            return Err(e);
        }
        Ok(out)
    }

    /// Marks a draft published. Callers probe the GM first; see
    /// `Platform::publish_game`.
    pub fn mark_published(&self, id: &GameId) -> Result<GameDescriptor, GameError> {
        let game = self.get(id).ok_or_else(|| GameError::Unknown(id.clone()))?;
        if !game.ui_bundle.has_entry() {
            return Err(GameError::MissingEntry(game.ui_bundle.entry));
        }
        self.set_status(id, &[GameStatus::Draft], GameStatus::Published)
    }

    pub fn suspend(&self, id: &GameId) -> Result<GameDescriptor, GameError> {
        self.set_status(id, &[GameStatus::Draft, GameStatus::Published], GameStatus::Suspended)
    }

    /// Returns a suspended game to draft so it can be fixed and republished.
    pub fn unsuspend(&self, id: &GameId) -> Result<GameDescriptor, GameError> {
        self.set_status(id, &[GameStatus::Suspended], GameStatus::Draft)
    }

    pub fn by_token(&self, token: &str) -> Option<GameDescriptor> {
        if token.is_empty() {
            return None;
        }
        self.games
            .read()
            .unwrap()
            .values()
            .find(|g| constant_time_eq(g.gm_auth_token.as_bytes(), token.as_bytes()))
            .cloned()
    }

    /// Resolves `/games/{id}/{path}` against the game's current bundle.
    pub fn asset(&self, id: &GameId, path: &str) -> Option<Asset> {
        let path = normalize_path(path).ok()?;
        let hash = self.games.read().unwrap().get(id)?.ui_bundle.files.get(&path)?.clone();
        let bytes = self.blobs.write().unwrap().get(&hash)?;
        Some(Asset {
            hash,
            bytes,
            content_type: content_type_for(&path),
        })
    }

    /// Immutable content-addressed lookup.
    pub fn blob(&self, hash: &str) -> Option<Arc<Vec<u8>>> {
        self.blobs.write().unwrap().get(hash)
    }

    /// Games visible to `viewer` (a username, or `None` for guests). Drafts
    /// appear only to their owner; `access` decides `playable`.
    pub fn catalog(&self, viewer: Option<&str>, access: impl Fn(&AccessFilter) -> Access) -> Vec<CatalogEntry> {
        self.games
            .read()
            .unwrap()
            .values()
            .filter(|g| g.available_to(viewer))
            .map(|g| CatalogEntry {
                id: g.id.clone(),
                name: g.name.clone(),
                description: g.description.clone(),
                icon: g.icon.as_deref().map(|p| g.asset_url(p)),
                screenshots: g.screenshots.iter().map(|p| g.asset_url(p)).collect(),
                players: g.required_players,
                status: g.status,
                url: g.entry_url(),
                playable: access(&g.access_filter) == Access::Allow,
            })
            .collect()
    }
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}
