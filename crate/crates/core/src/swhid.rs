//! Persistent identifiers for archived objects.
//!
//! Only the canonical core form `swh:1:<type>:<40 lowercase hex>` is
//! accepted. Qualifiers, uppercase digits and surrounding whitespace are
//! rejected so that identifiers can be used verbatim as path components and
//! cache keys.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Number of hex digits in an object hash.
pub const HASH_HEX_LEN: usize = 40;

/// Kind of archived object a SWHID points to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ObjectType {
    Content,
    Directory,
    Revision,
    Release,
    Snapshot,
}

impl ObjectType {
    pub const ALL: [ObjectType; 5] = [
        ObjectType::Content,
        ObjectType::Directory,
        ObjectType::Revision,
        ObjectType::Release,
        ObjectType::Snapshot,
    ];

    /// Three-letter tag used in the serialized form.
    pub fn tag(self) -> &'static str {
        match self {
            ObjectType::Content => "cnt",
            ObjectType::Directory => "dir",
            ObjectType::Revision => "rev",
            ObjectType::Release => "rel",
            ObjectType::Snapshot => "snp",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Some(match tag {
            "cnt" => ObjectType::Content,
            "dir" => ObjectType::Directory,
            "rev" => ObjectType::Revision,
            "rel" => ObjectType::Release,
            "snp" => ObjectType::Snapshot,
            _ => return None,
        })
    }

    /// Name used by the REST API for `target_type` fields.
    pub fn api_name(self) -> &'static str {
        match self {
            ObjectType::Content => "content",
            ObjectType::Directory => "directory",
            ObjectType::Revision => "revision",
            ObjectType::Release => "release",
            ObjectType::Snapshot => "snapshot",
        }
    }

    pub fn from_api_name(name: &str) -> Option<Self> {
        Some(match name {
            "content" | "file" => ObjectType::Content,
            "directory" | "dir" => ObjectType::Directory,
            "revision" | "rev" => ObjectType::Revision,
            "release" => ObjectType::Release,
            "snapshot" => ObjectType::Snapshot,
            _ => return None,
        })
    }
}

impl fmt::Display for ObjectType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SwhidError {
    #[error("bad namespace {0:?}, expected \"swh\"")]
    BadNamespace(String),
    #[error("unsupported scheme version {0:?}")]
    BadVersion(String),
    #[error("unknown object type {0:?}")]
    BadType(String),
    #[error("bad object hash {0:?}")]
    BadHash(String),
    #[error("qualified identifiers are not supported")]
    Qualified,
    #[error("expected 4 colon-separated fields, found {0}")]
    BadShape(usize),
}

/// A validated core SWHID.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Swhid {
    object_type: ObjectType,
    hash: [u8; HASH_HEX_LEN],
}

impl Swhid {
    /// Builds an identifier from a type and a 40-digit lowercase hex hash.
    pub fn new(object_type: ObjectType, hash: &str) -> Result<Self, SwhidError> {
        let bytes = hash.as_bytes();
        if bytes.len() != HASH_HEX_LEN
            || !bytes.iter().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
        {
            return Err(SwhidError::BadHash(hash.to_owned()));
        }
        let mut buf = [0u8; HASH_HEX_LEN];
        buf.copy_from_slice(bytes);
        Ok(Swhid {
            object_type,
            hash: buf,
        })
    }

    /// Builds an identifier from a raw 20-byte digest.
    pub fn from_digest(object_type: ObjectType, digest: &[u8; 20]) -> Self {
        const HEX: &[u8; 16] = b"0123456789abcdef";
        let mut hash = [0u8; HASH_HEX_LEN];
        for (i, b) in digest.iter().enumerate() {
            hash[2 * i] = HEX[(b >> 4) as usize];
            hash[2 * i + 1] = HEX[(b & 0xf) as usize];
        }
        Swhid { object_type, hash }
    }

    pub fn object_type(&self) -> ObjectType {
        self.object_type
    }

    pub fn hash(&self) -> &str {
        // only ASCII hex digits are ever stored
        std::str::from_utf8(&self.hash).expect("hex digits")
    }

    /// First `n` hex digits of the hash, used for shard directory names.
    pub fn shard_prefix(&self, n: usize) -> &str {
        assert!(
            (1..=HASH_HEX_LEN).contains(&n),
            "shard width {n} out of range"
        );
        &self.hash()[..n]
    }
}

/// Parses a canonical core SWHID.
pub fn parse_swhid(s: &str) -> Result<Swhid, SwhidError> {
    if s.contains(';') {
        return Err(SwhidError::Qualified);
    }
    let fields: Vec<&str> = s.split(':').collect();
    if fields.len() != 4 {
        // report the most specific field we can
        if let Some(ns) = fields.first() {
            if *ns != "swh" {
                return Err(SwhidError::BadNamespace((*ns).to_owned()));
            }
        }
        return Err(SwhidError::BadShape(fields.len()));
    }
    if fields[0] != "swh" {
        return Err(SwhidError::BadNamespace(fields[0].to_owned()));
    }
    if fields[1] != "1" {
        return Err(SwhidError::BadVersion(fields[1].to_owned()));
    }
    let object_type =
        ObjectType::from_tag(fields[2]).ok_or_else(|| SwhidError::BadType(fields[2].to_owned()))?;
    Swhid::new(object_type, fields[3])
}

/// Canonical serialization of an identifier.
pub fn format_swhid(id: &Swhid) -> String {
    id.to_string()
}

impl fmt::Display for Swhid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "swh:1:{}:{}", self.object_type.tag(), self.hash())
    }
}

impl fmt::Debug for Swhid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Swhid({self})")
    }
}

impl FromStr for Swhid {
    type Err = SwhidError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_swhid(s)
    }
}

impl Serialize for Swhid {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Swhid {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        parse_swhid(&s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const HELLO: &str = "swh:1:cnt:c839dea9e8e6f0528b468214348fee8669b305b2";
    const JQUERY: &str = "swh:1:rev:9d76c0b163675505d1a901e5fe5249a2c55609bc";

    #[test]
    fn parses_walkthrough_identifiers() {
        let id = parse_swhid(HELLO).unwrap();
        assert_eq!(id.object_type(), ObjectType::Content);
        assert_eq!(id.hash(), "c839dea9e8e6f0528b468214348fee8669b305b2");

        let id = parse_swhid(JQUERY).unwrap();
        assert_eq!(id.object_type(), ObjectType::Revision);
        assert_eq!(id.hash(), "9d76c0b163675505d1a901e5fe5249a2c55609bc");
    }

    #[test]
    fn formats_canonically() {
        let id = Swhid::new(
            ObjectType::Snapshot,
            "2ca5d6eff8f04a671c0d5b13646cede522c64b7d",
        )
        .unwrap();
        assert_eq!(
            format_swhid(&id),
            "swh:1:snp:2ca5d6eff8f04a671c0d5b13646cede522c64b7d"
        );
        assert_eq!(format_swhid(&parse_swhid(HELLO).unwrap()), HELLO);
    }

    #[test]
    fn rejects_each_field() {
        let zeros = "0".repeat(40);
        assert_eq!(
            parse_swhid(&format!("swh:2:cnt:{zeros}")),
            Err(SwhidError::BadVersion("2".into()))
        );
        assert_eq!(
            parse_swhid(&format!("sw:1:cnt:{zeros}")),
            Err(SwhidError::BadNamespace("sw".into()))
        );
        assert!(matches!(
            parse_swhid(&format!("swh:1:xxx:{zeros}")),
            Err(SwhidError::BadType(_))
        ));
        assert!(matches!(
            parse_swhid("swh:1:cnt:C839DEA9E8E6F0528B468214348FEE8669B305B2"),
            Err(SwhidError::BadHash(_))
        ));
        assert!(matches!(
            parse_swhid(&format!(" {HELLO}")),
            Err(SwhidError::BadNamespace(_))
        ));
        assert!(matches!(
            parse_swhid(&format!("{HELLO}\n")),
            Err(SwhidError::BadHash(_))
        ));
        assert_eq!(
            parse_swhid(&format!("{HELLO};origin=https://example.org")),
            Err(SwhidError::Qualified)
        );
        assert!(parse_swhid("").is_err());
        assert!(parse_swhid("swh:1:xxx:junk").is_err());
    }

    #[test]
    fn shard_prefixes() {
        let id = parse_swhid("swh:1:rev:0018f7700bf8004d0000000000000000000000ff").unwrap();
        assert_eq!(id.shard_prefix(2), "00");
        let id = parse_swhid(JQUERY).unwrap();
        assert_eq!(id.shard_prefix(2), "9d");
        assert_eq!(id.shard_prefix(40), id.hash());
    }

    #[test]
    fn serde_uses_string_form() {
        let id = parse_swhid(HELLO).unwrap();
        let json = serde_json::to_string(&id).unwrap();
        assert_eq!(json, format!("\"{HELLO}\""));
        assert_eq!(serde_json::from_str::<Swhid>(&json).unwrap(), id);
    }

    proptest! {
        #[test]
        fn never_panics(s in "\\PC{0,64}") {
            let _ = parse_swhid(&s);
        }

        #[test]
        fn digest_matches_hex(bytes in proptest::array::uniform20(any::<u8>())) {
            let id = Swhid::from_digest(ObjectType::Directory, &bytes);
            let expected: String = bytes.iter().map(|b| format!("{b:02x}")).collect();
            prop_assert_eq!(id.hash(), expected.as_str());
        }
    }
}
