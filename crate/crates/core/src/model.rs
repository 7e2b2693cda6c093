//! Typed views of archive objects and their JSON wire encoding.
//!
//! The raw JSON documents are what the metadata cache stores; the typed
//! structs below are decoded from them on demand.

use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use chrono::{DateTime, FixedOffset};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::swhid::{ObjectType, Swhid};

/// Alias chains longer than this are treated as dangling.
pub const DEFAULT_ALIAS_DEPTH: usize = 16;

#[derive(Debug, thiserror::Error)]
#[error("malformed {what} document: {reason}")]
pub struct DecodeError {
    pub what: &'static str,
    pub reason: String,
}

impl DecodeError {
    fn new(what: &'static str, reason: impl Into<String>) -> Self {
        DecodeError {
            what,
            reason: reason.into(),
        }
    }
}

/// Permission class of a directory entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EntryPerm {
    File,
    ExecutableFile,
    Symlink,
    Subdirectory,
    SubmoduleRevision,
}

impl EntryPerm {
    /// Git-style mode bits as carried by the `perms` field.
    pub fn mode(self) -> u32 {
        match self {
            EntryPerm::File => 0o100644,
            EntryPerm::ExecutableFile => 0o100755,
            EntryPerm::Symlink => 0o120000,
            EntryPerm::Subdirectory => 0o040000,
            EntryPerm::SubmoduleRevision => 0o160000,
        }
    }

    pub fn from_mode(mode: u32) -> Option<Self> {
        Some(match mode & 0o170000 {
            0o100000 if mode & 0o111 != 0 => EntryPerm::ExecutableFile,
            0o100000 => EntryPerm::File,
            0o120000 => EntryPerm::Symlink,
            0o040000 => EntryPerm::Subdirectory,
            0o160000 => EntryPerm::SubmoduleRevision,
            _ => return None,
        })
    }

    /// Object type every target of this permission class must have.
    pub fn target_type(self) -> ObjectType {
        match self {
            EntryPerm::Subdirectory => ObjectType::Directory,
            EntryPerm::SubmoduleRevision => ObjectType::Revision,
            _ => ObjectType::Content,
        }
    }

    fn wire_type(self) -> &'static str {
        match self {
            EntryPerm::Subdirectory => "dir",
            EntryPerm::SubmoduleRevision => "rev",
            _ => "file",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirEntry {
    pub name: Vec<u8>,
    pub target: Swhid,
    pub perm: EntryPerm,
    /// Blob length for content targets when the server knows it.
    pub length: Option<u64>,
}

impl DirEntry {
    /// Whether the name can be used as a single path component.
    pub fn has_valid_name(&self) -> bool {
        valid_component(&self.name)
    }
}

pub(crate) fn valid_component(name: &[u8]) -> bool {
    !name.is_empty() && name != b"." && name != b".." && !name.contains(&b'/') && !name.contains(&0)
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Person {
    pub name: String,
    pub email: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RevisionMeta {
    pub id: Swhid,
    pub tree: Swhid,
    pub parents: Vec<Swhid>,
    pub author: Person,
    pub committer: Person,
    pub author_date: DateTime<FixedOffset>,
    pub committer_date: DateTime<FixedOffset>,
    pub message: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReleaseMeta {
    pub id: Swhid,
    pub name: String,
    pub target: Swhid,
    pub message: Vec<u8>,
    pub date: Option<DateTime<FixedOffset>>,
}

/// Where a snapshot branch points.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BranchTarget {
    Object(Swhid),
    Alias(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnapshotBranches {
    pub id: Swhid,
    pub branches: BTreeMap<Vec<u8>, Swhid>,
    pub aliases: BTreeMap<Vec<u8>, Vec<u8>>,
}

impl SnapshotBranches {
    /// Follows an alias chain to an object, giving up after `max_depth` hops
    /// or on a cycle.
    pub fn resolve_alias(&self, name: &[u8], max_depth: usize) -> Option<Swhid> {
        let mut current = name;
        for _ in 0..=max_depth {
            if let Some(target) = self.branches.get(current) {
                return Some(*target);
            }
            current = self.aliases.get(current)?;
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OriginVisit {
    pub origin_url: String,
    pub visit: u64,
    pub date: DateTime<FixedOffset>,
    pub snapshot: Option<Swhid>,
    /// The visit's JSON document, exposed verbatim as `meta.json`.
    pub raw: Value,
}

/// Content object metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContentMeta {
    pub id: Swhid,
    pub length: u64,
}

fn field<'a>(v: &'a Value, what: &'static str, key: &str) -> Result<&'a Value, DecodeError> {
    v.get(key)
        .ok_or_else(|| DecodeError::new(what, format!("missing field {key:?}")))
}

fn str_field<'a>(v: &'a Value, what: &'static str, key: &str) -> Result<&'a str, DecodeError> {
    field(v, what, key)?
        .as_str()
        .ok_or_else(|| DecodeError::new(what, format!("field {key:?} is not a string")))
}

fn hash_field(
    v: &Value,
    what: &'static str,
    key: &str,
    ty: ObjectType,
) -> Result<Swhid, DecodeError> {
    let s = str_field(v, what, key)?;
    Swhid::new(ty, s).map_err(|e| DecodeError::new(what, e.to_string()))
}

fn date_field(
    v: &Value,
    what: &'static str,
    key: &str,
) -> Result<Option<DateTime<FixedOffset>>, DecodeError> {
    match v.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => DateTime::parse_from_rfc3339(s)
            .map(Some)
            .map_err(|e| DecodeError::new(what, format!("{key}: {e}"))),
        Some(_) => Err(DecodeError::new(what, format!("{key} is not a string"))),
    }
}

/// Byte-string field: `<key>_b64` wins over the plain `<key>` string when the
/// underlying bytes are not valid UTF-8.
fn bytes_field(v: &Value, what: &'static str, key: &str) -> Result<Vec<u8>, DecodeError> {
    if let Some(Value::String(b)) = v.get(format!("{key}_b64").as_str()) {
        return B64
            .decode(b)
            .map_err(|e| DecodeError::new(what, format!("{key}_b64: {e}")));
    }
    match v.get(key) {
        None | Some(Value::Null) => Ok(Vec::new()),
        Some(Value::String(s)) => Ok(s.as_bytes().to_vec()),
        Some(_) => Err(DecodeError::new(what, format!("{key} is not a string"))),
    }
}

/// Puts a byte string into `obj` under `key`, adding `<key>_b64` when needed.
pub fn put_bytes(obj: &mut serde_json::Map<String, Value>, key: &str, bytes: &[u8]) {
    obj.insert(
        key.to_owned(),
        Value::String(String::from_utf8_lossy(bytes).into_owned()),
    );
    if std::str::from_utf8(bytes).is_err() {
        obj.insert(format!("{key}_b64"), Value::String(B64.encode(bytes)));
    }
}

fn person(v: &Value) -> Person {
    let get = |k: &str| {
        v.get(k)
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_owned()
    };
    Person {
        name: get("name"),
        email: get("email"),
    }
}

pub fn decode_content(id: Swhid, doc: &Value) -> Result<ContentMeta, DecodeError> {
    let length = field(doc, "content", "length")?
        .as_u64()
        .ok_or_else(|| DecodeError::new("content", "length is not an integer"))?;
    Ok(ContentMeta { id, length })
}

pub fn decode_dir_entry(v: &Value) -> Result<DirEntry, DecodeError> {
    const W: &str = "directory entry";
    let name = bytes_field(v, W, "name")?;
    let mode = field(v, W, "perms")?
        .as_u64()
        .ok_or_else(|| DecodeError::new(W, "perms is not an integer"))?;
    let perm = EntryPerm::from_mode(mode as u32)
        .ok_or_else(|| DecodeError::new(W, format!("unknown mode {mode:o}")))?;
    let wire_type = str_field(v, W, "type")?;
    if wire_type != perm.wire_type() {
        return Err(DecodeError::new(
            W,
            format!("type {wire_type:?} disagrees with mode {mode:o}"),
        ));
    }
    let target = hash_field(v, W, "target", perm.target_type())?;
    let length = v.get("length").and_then(Value::as_u64);
    Ok(DirEntry {
        name,
        target,
        perm,
        length,
    })
}

pub fn encode_dir_entry(dir: &Swhid, e: &DirEntry) -> Value {
    let mut obj = serde_json::Map::new();
    obj.insert("dir_id".into(), Value::String(dir.hash().to_owned()));
    put_bytes(&mut obj, "name", &e.name);
    obj.insert("type".into(), Value::String(e.perm.wire_type().into()));
    obj.insert("target".into(), Value::String(e.target.hash().to_owned()));
    obj.insert("perms".into(), Value::from(e.perm.mode()));
    obj.insert(
        "length".into(),
        e.length.map(Value::from).unwrap_or(Value::Null),
    );
    Value::Object(obj)
}

/// Decodes a full directory listing (a JSON array of entries).
pub fn decode_directory(doc: &Value) -> Result<Vec<DirEntry>, DecodeError> {
    doc.as_array()
        .ok_or_else(|| DecodeError::new("directory", "not an array"))?
        .iter()
        .map(decode_dir_entry)
        .collect()
}

pub fn decode_revision(doc: &Value) -> Result<RevisionMeta, DecodeError> {
    const W: &str = "revision";
    let id = hash_field(doc, W, "id", ObjectType::Revision)?;
    let tree = hash_field(doc, W, "directory", ObjectType::Directory)?;
    let parents = field(doc, W, "parents")?
        .as_array()
        .ok_or_else(|| DecodeError::new(W, "parents is not an array"))?
        .iter()
        .map(|p| hash_field(p, W, "id", ObjectType::Revision))
        .collect::<Result<Vec<_>, _>>()?;
    let author_date =
        date_field(doc, W, "date")?.ok_or_else(|| DecodeError::new(W, "missing date"))?;
    let committer_date = date_field(doc, W, "committer_date")?
        .ok_or_else(|| DecodeError::new(W, "missing committer_date"))?;
    Ok(RevisionMeta {
        id,
        tree,
        parents,
        author: doc.get("author").map(person).unwrap_or_default(),
        committer: doc.get("committer").map(person).unwrap_or_default(),
        author_date,
        committer_date,
        message: bytes_field(doc, W, "message")?,
    })
}

pub fn encode_revision(r: &RevisionMeta) -> Value {
    let mut obj = serde_json::Map::new();
    obj.insert("id".into(), r.id.hash().into());
    obj.insert("directory".into(), r.tree.hash().into());
    obj.insert(
        "parents".into(),
        Value::Array(
            r.parents
                .iter()
                .map(|p| serde_json::json!({ "id": p.hash() }))
                .collect(),
        ),
    );
    obj.insert(
        "author".into(),
        serde_json::to_value(&r.author).expect("person"),
    );
    obj.insert(
        "committer".into(),
        serde_json::to_value(&r.committer).expect("person"),
    );
    obj.insert("date".into(), r.author_date.to_rfc3339().into());
    obj.insert("committer_date".into(), r.committer_date.to_rfc3339().into());
    put_bytes(&mut obj, "message", &r.message);
    obj.insert("type".into(), "git".into());
    Value::Object(obj)
}

pub fn decode_release(doc: &Value) -> Result<ReleaseMeta, DecodeError> {
    const W: &str = "release";
    let id = hash_field(doc, W, "id", ObjectType::Release)?;
    let tt = str_field(doc, W, "target_type")?;
    let ty = ObjectType::from_api_name(tt)
        .ok_or_else(|| DecodeError::new(W, format!("unknown target_type {tt:?}")))?;
    Ok(ReleaseMeta {
        id,
        name: str_field(doc, W, "name")?.to_owned(),
        target: hash_field(doc, W, "target", ty)?,
        message: bytes_field(doc, W, "message")?,
        date: date_field(doc, W, "date")?,
    })
}

pub fn encode_release(r: &ReleaseMeta) -> Value {
    let mut obj = serde_json::Map::new();
    obj.insert("id".into(), r.id.hash().into());
    obj.insert("name".into(), r.name.clone().into());
    obj.insert("target".into(), r.target.hash().into());
    obj.insert(
        "target_type".into(),
        r.target.object_type().api_name().into(),
    );
    put_bytes(&mut obj, "message", &r.message);
    obj.insert(
        "date".into(),
        r.date
            .map(|d| Value::String(d.to_rfc3339()))
            .unwrap_or(Value::Null),
    );
    Value::Object(obj)
}

/// Decodes a snapshot document. Pages are merged by the caller into one
/// `branches` object before decoding.
pub fn decode_snapshot(doc: &Value) -> Result<SnapshotBranches, DecodeError> {
    const W: &str = "snapshot";
    let id = hash_field(doc, W, "id", ObjectType::Snapshot)?;
    let mut branches = BTreeMap::new();
    let mut aliases = BTreeMap::new();
    let map = field(doc, W, "branches")?
        .as_object()
        .ok_or_else(|| DecodeError::new(W, "branches is not an object"))?;
    for (name, target) in map {
        let name = name.as_bytes().to_vec();
        if target.is_null() {
            // dangling branch
            continue;
        }
        match decode_branch_target(target)? {
            BranchTarget::Object(id) => {
                branches.insert(name, id);
            }
            BranchTarget::Alias(to) => {
                aliases.insert(name, to);
            }
        }
    }
    Ok(SnapshotBranches {
        id,
        branches,
        aliases,
    })
}

fn decode_branch_target(v: &Value) -> Result<BranchTarget, DecodeError> {
    const W: &str = "snapshot branch";
    let tt = str_field(v, W, "target_type")?;
    if tt == "alias" {
        return Ok(BranchTarget::Alias(
            str_field(v, W, "target")?.as_bytes().to_vec(),
        ));
    }
    let ty = ObjectType::from_api_name(tt)
        .ok_or_else(|| DecodeError::new(W, format!("unknown target_type {tt:?}")))?;
    Ok(BranchTarget::Object(hash_field(v, W, "target", ty)?))
}

pub fn encode_branch_target(t: &BranchTarget) -> Value {
    match t {
        BranchTarget::Object(id) => serde_json::json!({
            "target": id.hash(),
            "target_type": id.object_type().api_name(),
        }),
        BranchTarget::Alias(name) => serde_json::json!({
            "target": String::from_utf8_lossy(name),
            "target_type": "alias",
        }),
    }
}

pub fn decode_visit(v: &Value) -> Result<OriginVisit, DecodeError> {
    const W: &str = "origin visit";
    let snapshot = match v.get("snapshot") {
        None | Some(Value::Null) => None,
        Some(_) => Some(hash_field(v, W, "snapshot", ObjectType::Snapshot)?),
    };
    Ok(OriginVisit {
        origin_url: str_field(v, W, "origin")?.to_owned(),
        visit: v.get("visit").and_then(Value::as_u64).unwrap_or(0),
        date: date_field(v, W, "date")?.ok_or_else(|| DecodeError::new(W, "missing date"))?,
        snapshot,
        raw: v.clone(),
    })
}

/// Decodes a visit list and sorts it ascending by date, then visit number.
pub fn decode_visits(doc: &Value) -> Result<Vec<OriginVisit>, DecodeError> {
    let mut visits = doc
        .as_array()
        .ok_or_else(|| DecodeError::new("origin visits", "not an array"))?
        .iter()
        .map(decode_visit)
        .collect::<Result<Vec<_>, _>>()?;
    visits.sort_by(|a, b| a.date.cmp(&b.date).then(a.visit.cmp(&b.visit)));
    Ok(visits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::swhid::parse_swhid;
    use serde_json::json;

    fn h(c: char) -> String {
        std::iter::repeat_n(c, 40).collect()
    }

    #[test]
    fn dir_entry_round_trip_with_binary_name() {
        let dir = Swhid::new(ObjectType::Directory, &h('1')).unwrap();
        let e = DirEntry {
            name: vec![b'a', 0xff, b'b'],
            target: Swhid::new(ObjectType::Content, &h('2')).unwrap(),
            perm: EntryPerm::ExecutableFile,
            length: Some(12),
        };
        let v = encode_dir_entry(&dir, &e);
        assert!(v.get("name_b64").is_some());
        assert_eq!(decode_dir_entry(&v).unwrap(), e);
    }

    #[test]
    fn dir_entry_type_must_match_mode() {
        let v = json!({"name": "x", "type": "dir", "target": h('3'), "perms": 0o100644});
        assert!(decode_dir_entry(&v).is_err());
        let v = json!({"name": "x", "type": "rev", "target": h('3'), "perms": 0o160000});
        let e = decode_dir_entry(&v).unwrap();
        assert_eq!(e.perm, EntryPerm::SubmoduleRevision);
        assert_eq!(e.target.object_type(), ObjectType::Revision);
        assert_eq!(e.length, None);
    }

    #[test]
    fn revision_round_trip() {
        let r = RevisionMeta {
            id: Swhid::new(ObjectType::Revision, &h('a')).unwrap(),
            tree: Swhid::new(ObjectType::Directory, &h('b')).unwrap(),
            parents: vec![
                Swhid::new(ObjectType::Revision, &h('c')).unwrap(),
                Swhid::new(ObjectType::Revision, &h('d')).unwrap(),
            ],
            author: Person {
                name: "Ada".into(),
                email: "ada@example.org".into(),
            },
            committer: Person::default(),
            author_date: DateTime::parse_from_rfc3339("2020-03-02T23:02:42+01:00").unwrap(),
            committer_date: DateTime::parse_from_rfc3339("2020-03-02T23:02:42+01:00").unwrap(),
            message: b"Prevent collision\n".to_vec(),
        };
        assert_eq!(decode_revision(&encode_revision(&r)).unwrap(), r);
    }

    #[test]
    fn snapshot_aliases_resolve() {
        let doc = json!({
            "id": h('5'),
            "branches": {
                "HEAD": {"target": "refs/heads/main", "target_type": "alias"},
                "loop1": {"target": "loop2", "target_type": "alias"},
                "loop2": {"target": "loop1", "target_type": "alias"},
                "refs/heads/main": {"target": h('6'), "target_type": "revision"},
                "refs/heads/gone": null,
            }
        });
        let snp = decode_snapshot(&doc).unwrap();
        assert_eq!(snp.branches.len(), 1);
        let main = parse_swhid(&format!("swh:1:rev:{}", h('6'))).unwrap();
        assert_eq!(snp.resolve_alias(b"HEAD", DEFAULT_ALIAS_DEPTH), Some(main));
        assert_eq!(snp.resolve_alias(b"loop1", DEFAULT_ALIAS_DEPTH), None);
        assert_eq!(snp.resolve_alias(b"missing", DEFAULT_ALIAS_DEPTH), None);
    }

    #[test]
    fn visits_sorted_and_snapshot_optional() {
        let doc = json!([
            {"origin": "https://x", "visit": 2, "date": "2024-01-02T00:00:00+00:00", "snapshot": h('7')},
            {"origin": "https://x", "visit": 1, "date": "2024-01-01T00:00:00+00:00", "snapshot": null},
        ]);
        let v = decode_visits(&doc).unwrap();
        assert_eq!(v[0].visit, 1);
        assert!(v[0].snapshot.is_none());
        assert!(v[1].snapshot.is_some());
    }

    #[test]
    fn modes() {
        for p in [
            EntryPerm::File,
            EntryPerm::ExecutableFile,
            EntryPerm::Symlink,
            EntryPerm::Subdirectory,
            EntryPerm::SubmoduleRevision,
        ] {
            assert_eq!(EntryPerm::from_mode(p.mode()), Some(p));
        }
        assert_eq!(EntryPerm::from_mode(0o100664), Some(EntryPerm::File));
        assert_eq!(EntryPerm::from_mode(0o010000), None);
    }
}
