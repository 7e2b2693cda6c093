//! Path arithmetic for relative symlinks and origin-URL path components.

use percent_encoding::{utf8_percent_encode, AsciiSet, NON_ALPHANUMERIC};

use crate::swhid::Swhid;

/// Everything outside the RFC 3986 unreserved set is escaped.
const ORIGIN_COMPONENT: &AsciiSet = &NON_ALPHANUMERIC
    .remove(b'-')
    .remove(b'.')
    .remove(b'_')
    .remove(b'~');

/// Percent-encodes an origin URL into a single path component.
pub fn encode_origin(url: &str) -> String {
    utf8_percent_encode(url, ORIGIN_COMPONENT).to_string()
}

fn is_unreserved(b: u8) -> bool {
    b.is_ascii_alphanumeric() || matches!(b, b'-' | b'.' | b'_' | b'~')
}

/// Inverse of [`encode_origin`]. Only unreserved characters and `%XX`
/// escapes are accepted, so a name carrying a literal reserved character is
/// rejected instead of guessed at.
pub fn decode_origin(name: &[u8]) -> Option<String> {
    let mut out = Vec::with_capacity(name.len());
    let mut i = 0;
    while i < name.len() {
        match name[i] {
            b'%' => {
                let hex = name.get(i + 1..i + 3)?;
                let hex = std::str::from_utf8(hex).ok()?;
                out.push(u8::from_str_radix(hex, 16).ok()?);
                i += 3;
            }
            b if is_unreserved(b) => {
                out.push(b);
                i += 1;
            }
            _ => return None,
        }
    }
    if out.is_empty() {
        return None;
    }
    String::from_utf8(out).ok()
}

/// Relative path from directory `from_dir` to `to`, both given as
/// components below the mount root.
pub fn relative_path<A: AsRef<[u8]>, B: AsRef<[u8]>>(from_dir: &[A], to: &[B]) -> Vec<u8> {
    let common = from_dir
        .iter()
        .zip(to)
        .take_while(|(a, b)| a.as_ref() == b.as_ref())
        .count();
    let mut parts: Vec<&[u8]> = Vec::new();
    parts.extend(std::iter::repeat_n(&b".."[..], from_dir.len() - common));
    parts.extend(to[common..].iter().map(AsRef::as_ref));
    if parts.is_empty() {
        return b".".to_vec();
    }
    parts.join(&b'/')
}

/// Symlink target reaching `archive/<id>` from directory `from_dir`.
pub fn archive_link<A: AsRef<[u8]>>(from_dir: &[A], id: &Swhid) -> Vec<u8> {
    let target = id.to_string();
    relative_path(from_dir, &[b"archive".as_slice(), target.as_bytes()])
}

/// Resolves `target` lexically from directory `from_dir`, as the kernel
/// would for a symlink there. Returns `None` when it escapes the root.
pub fn resolve_lexically<A: AsRef<[u8]>>(from_dir: &[A], target: &[u8]) -> Option<Vec<Vec<u8>>> {
    let mut out: Vec<Vec<u8>> = if target.starts_with(b"/") {
        Vec::new()
    } else {
        from_dir.iter().map(|c| c.as_ref().to_vec()).collect()
    };
    for part in target.split(|b| *b == b'/') {
        match part {
            b"" | b"." => {}
            b".." => {
                out.pop()?;
            }
            p => out.push(p.to_vec()),
        }
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::swhid::ObjectType;
    use proptest::prelude::*;

    fn id(ty: ObjectType, n: u8) -> Swhid {
        Swhid::new(ty, &format!("{n:02x}").repeat(20)).unwrap()
    }

    #[test]
    fn links_from_known_directories() {
        let rev = id(ObjectType::Revision, 1);
        let dir = id(ObjectType::Directory, 2);
        let from_rev = ["archive".to_owned(), rev.to_string()];
        assert_eq!(
            archive_link(&from_rev, &dir),
            format!("../{dir}").into_bytes()
        );
        let parent = id(ObjectType::Revision, 3);
        let from_parents = ["archive".to_owned(), rev.to_string(), "parents".to_owned()];
        assert_eq!(
            archive_link(&from_parents, &parent),
            format!("../../{parent}").into_bytes()
        );
        assert_eq!(archive_link(&["archive"], &dir), dir.to_string().into_bytes());
        let from_visit = ["origin", "x", "2024-01-01"];
        assert_eq!(
            archive_link(&from_visit, &dir),
            format!("../../../archive/{dir}").into_bytes()
        );
    }

    #[test]
    fn origin_encoding_examples() {
        assert_eq!(
            encode_origin("https://github.com/torvalds/linux"),
            "https%3A%2F%2Fgithub.com%2Ftorvalds%2Flinux"
        );
        assert_eq!(
            decode_origin(b"https%3A%2F%2Fgithub.com%2Ftorvalds%2Flinux").as_deref(),
            Some("https://github.com/torvalds/linux")
        );
        assert_eq!(decode_origin(b"https:%2F%2Fx"), None);
        assert_eq!(decode_origin(b"abc%2"), None);
        assert_eq!(decode_origin(b"abc%zz"), None);
        assert_eq!(decode_origin(b""), None);
    }

    proptest! {
        #[test]
        fn origin_encoding_round_trips(url in "\\PC{1,60}") {
            let enc = encode_origin(&url);
            prop_assert!(enc.bytes().all(|b| is_unreserved(b) || b == b'%'));
            prop_assert_eq!(decode_origin(enc.as_bytes()), Some(url));
        }

        // Resolving the computed link from its directory lands on the target.
        #[test]
        fn relative_links_resolve(
            from in proptest::collection::vec("[a-c]{1,2}", 0..6),
            to in proptest::collection::vec("[a-c]{1,2}", 1..6),
        ) {
            let link = relative_path(&from, &to);
            let resolved = resolve_lexically(&from, &link).unwrap();
            let expected: Vec<Vec<u8>> = to.iter().map(|s| s.as_bytes().to_vec()).collect();
            prop_assert_eq!(resolved, expected);
        }
    }
}
