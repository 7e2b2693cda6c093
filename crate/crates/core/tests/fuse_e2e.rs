mod common;

use std::collections::BTreeSet;
use std::io::{Read, Seek, SeekFrom};
use std::os::unix::fs::PermissionsExt;

use archivefs::layout::encode_origin;
use archivefs::mount::{is_mounted, mount, MountConfig, MountError};
use archivefs_mock::{generate_fixture, golden, FixtureSpec, GOLDEN_ORIGIN};
use common::{expected_tree, walk, Harness, Seen};
use rand::{Rng, SeedableRng};

fn names(dir: &std::path::Path) -> BTreeSet<String> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect()
}

#[test]
fn root_shows_four_entry_points() {
    let h = Harness::new(golden());
    let Some(m) = h.mount() else { return };
    assert_eq!(
        names(m.root()),
        BTreeSet::from(["README", "archive", "cache", "origin"].map(String::from))
    );
    let readme = std::fs::read_to_string(m.root().join("README")).unwrap();
    assert!(readme.contains("archive/"));
    assert!(names(&m.root().join("archive")).is_empty());
    assert!(std::fs::metadata(m.root().join("archive/not-an-id")).is_err());
}

#[test]
fn golden_revision_tree_and_links() {
    let h = Harness::new(golden());
    let Some(m) = h.mount() else { return };
    let head = h.manifest().head();
    let rev_dir = m.archive(&head);
    let tree = h.manifest().revisions[&head].tree;
    let parent = h.manifest().revisions[&head].parents[0];

    assert_eq!(
        std::fs::read_link(rev_dir.join("root")).unwrap(),
        std::path::PathBuf::from(format!("../{tree}"))
    );
    assert_eq!(
        std::fs::read_link(rev_dir.join("parent")).unwrap(),
        std::path::PathBuf::from("parents/1")
    );
    let via_parent = std::fs::canonicalize(rev_dir.join("parent")).unwrap();
    assert_eq!(via_parent, std::fs::canonicalize(m.archive(&parent)).unwrap());

    let hello = std::fs::read(rev_dir.join("root/hello.c")).unwrap();
    assert!(hello.starts_with(b"#include <stdio.h>"));
    let meta = std::fs::metadata(rev_dir.join("root/build.sh")).unwrap();
    assert_eq!(meta.permissions().mode() & 0o777, 0o555);
    let meta = std::fs::metadata(rev_dir.join("root/README")).unwrap();
    assert_eq!(meta.permissions().mode() & 0o777, 0o444);
    let meta = std::fs::metadata(&rev_dir).unwrap();
    use std::os::unix::fs::MetadataExt;
    assert_eq!(
        meta.mtime(),
        h.manifest().revisions[&head].committer_date.timestamp()
    );

    let doc: serde_json::Value =
        serde_json::from_slice(&std::fs::read(rev_dir.join("meta.json")).unwrap()).unwrap();
    assert_eq!(doc["directory"], tree.hash());

    assert_eq!(walk(&m.archive(&tree)), expected_tree(h.manifest(), &tree));
}

#[test]
fn origin_visits_reach_the_archive() {
    let h = Harness::new(golden());
    let Some(m) = h.mount() else { return };
    let origin = m.root().join("origin").join(encode_origin(GOLDEN_ORIGIN));
    let visits = names(&origin);
    assert_eq!(visits.len(), 2);
    let latest = visits.iter().max().unwrap();
    let snapshot = std::fs::canonicalize(origin.join(latest).join("snapshot")).unwrap();
    let expected = h.manifest().snapshot.unwrap();
    assert_eq!(
        snapshot,
        std::fs::canonicalize(m.archive(&expected)).unwrap()
    );
    let main = std::fs::canonicalize(snapshot.join("refs/heads/main")).unwrap();
    assert_eq!(main, std::fs::canonicalize(m.archive(&h.manifest().head())).unwrap());
    let head = std::fs::canonicalize(snapshot.join("HEAD")).unwrap();
    assert_eq!(head, main);
    assert!(names(&snapshot.join("refs/heads")).contains("feature"));
}

#[test]
fn mutations_are_refused() {
    let h = Harness::new(golden());
    let Some(m) = h.mount() else { return };
    let head = m.archive(&h.manifest().head());
    let err = |r: std::io::Result<()>| r.unwrap_err().raw_os_error();
    assert_eq!(err(std::fs::write(head.join("root/new"), b"x")), Some(libc::EROFS));
    assert_eq!(err(std::fs::create_dir(m.root().join("x"))), Some(libc::EROFS));
    assert_eq!(
        std::fs::OpenOptions::new()
            .write(true)
            .open(head.join("root/README"))
            .unwrap_err()
            .raw_os_error(),
        Some(libc::EROFS)
    );
    assert_eq!(err(std::fs::remove_file(head.join("root/README"))), Some(libc::EROFS));
}

#[test]
fn random_slices_match_the_blob() {
    let mut spec = FixtureSpec::chain(7, 3);
    spec.blob_size = (150_000, 400_000);
    let h = Harness::new(generate_fixture(&spec));
    let Some(m) = h.mount() else { return };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    for (id, data) in h.manifest().blobs.iter().take(4) {
        let mut f = std::fs::File::open(m.archive(id)).unwrap();
        for _ in 0..50 {
            let offset = rng.random_range(0..data.len() + 10);
            let size = rng.random_range(0..70_000);
            f.seek(SeekFrom::Start(offset as u64)).unwrap();
            let mut buf = vec![0; size];
            let mut got = 0;
            loop {
                let n = f.read(&mut buf[got..]).unwrap();
                if n == 0 {
                    break;
                }
                got += n;
                if got == size {
                    break;
                }
            }
            let lo = offset.min(data.len());
            let hi = (offset + size).min(data.len());
            assert_eq!(&buf[..got], &data[lo..hi]);
        }
    }
}

#[test]
fn cache_entries_can_be_purged() {
    let h = Harness::new(golden());
    let Some(m) = h.mount() else { return };
    let head = h.manifest().head();
    std::fs::read_dir(m.archive(&head)).unwrap().count();
    let shard = m.root().join("cache").join(head.shard_prefix(2));
    let entry = shard.join(head.to_string());
    assert_eq!(
        std::fs::canonicalize(&entry).unwrap(),
        std::fs::canonicalize(m.archive(&head)).unwrap()
    );
    assert!(names(&m.root().join("archive")).contains(&head.to_string()));
    std::fs::remove_file(&entry).unwrap();
    assert!(std::fs::symlink_metadata(&entry).is_err());
    assert!(!names(&m.root().join("archive")).contains(&head.to_string()));
    // still reachable from the network
    assert!(std::fs::metadata(m.archive(&head)).unwrap().is_dir());
}

#[test]
fn mounting_twice_is_refused_and_unmount_cleans_up() {
    let h = Harness::new(golden());
    let Some(m) = h.mount() else { return };
    assert!(is_mounted(m.root()));
    match mount(m.root(), h.layout.clone(), &MountConfig::default()) {
        Err(MountError::MountpointBusy(_)) => {}
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("second mount succeeded"),
    }
    let dir = m.root().to_owned();
    drop(m);
    assert!(!is_mounted(&dir));
}

#[test]
fn exec_bits_and_links_of_a_generated_tree() {
    let h = Harness::new(generate_fixture(&FixtureSpec::new(11)));
    let Some(m) = h.mount() else { return };
    let head = h.manifest().head();
    let tree = h.manifest().revisions[&head].tree;
    let seen = walk(&m.archive(&tree));
    assert_eq!(seen, expected_tree(h.manifest(), &tree));
    assert!(seen
        .values()
        .any(|s| matches!(s, Seen::File { exec: true, .. })));
    assert!(seen.values().any(|s| matches!(s, Seen::Link(_))));
}
