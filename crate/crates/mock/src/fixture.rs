//! Seeded generation of archive fixtures.
//!
//! A fixture is built from an in-memory model of working trees, commits and
//! branches. Every object is hashed the way git hashes it, stored in an
//! [`Archive`] for the server, and recorded in a [`Manifest`] describing
//! what a correct client should see.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};

use archivefs::model::{BranchTarget, DirEntry, EntryPerm, Person, ReleaseMeta, RevisionMeta};
use archivefs::{ObjectType, Swhid};
use chrono::{DateTime, FixedOffset, TimeZone};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use sha1::{Digest, Sha1};

pub type Name = Vec<u8>;

/// Shape parameters of a generated fixture.
#[derive(Debug, Clone)]
pub struct FixtureSpec {
    pub seed: u64,
    /// Number of commits, at least one.
    pub commits: usize,
    /// Chance that a commit starts a new branch.
    pub branch_probability: f64,
    /// Chance that a commit merges another branch.
    pub merge_probability: f64,
    /// Files in the root commit.
    pub initial_files: usize,
    /// Upper bound of tree edits per later commit.
    pub edits_per_commit: usize,
    pub max_depth: usize,
    /// Inclusive range of blob sizes in bytes.
    pub blob_size: (usize, usize),
    /// Entries of an extra flat directory in the root commit; 0 for none.
    pub large_dir_entries: usize,
    /// Adds executables, symlinks, submodules, odd names and releases.
    pub extras: bool,
}

impl FixtureSpec {
    pub fn new(seed: u64) -> Self {
        FixtureSpec {
            seed,
            commits: 40,
            branch_probability: 0.15,
            merge_probability: 0.2,
            initial_files: 20,
            edits_per_commit: 4,
            max_depth: 3,
            blob_size: (0, 2048),
            large_dir_entries: 0,
            extras: true,
        }
    }

    /// A linear history of `commits` commits.
    pub fn chain(seed: u64, commits: usize) -> Self {
        FixtureSpec {
            commits,
            branch_probability: 0.0,
            merge_probability: 0.0,
            ..FixtureSpec::new(seed)
        }
    }

    /// One commit of an empty tree.
    pub fn empty(seed: u64) -> Self {
        FixtureSpec {
            commits: 1,
            branch_probability: 0.0,
            merge_probability: 0.0,
            initial_files: 0,
            edits_per_commit: 0,
            extras: false,
            ..FixtureSpec::new(seed)
        }
    }
}

/// A working-tree node before hashing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TreeNode {
    File { data: Vec<u8>, exec: bool },
    Symlink { target: Vec<u8> },
    Dir(BTreeMap<Name, TreeNode>),
    Submodule(Swhid),
}

/// What a client must show for one directory entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ManifestEntry {
    File { content: Swhid, size: u64, exec: bool },
    Symlink { content: Swhid, target: Vec<u8> },
    Dir(Swhid),
    Submodule(Swhid),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRevision {
    pub tree: Swhid,
    pub parents: Vec<Swhid>,
    pub author_date: DateTime<FixedOffset>,
    pub committer_date: DateTime<FixedOffset>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRelease {
    pub name: String,
    pub target: Swhid,
    pub date: DateTime<FixedOffset>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestVisit {
    pub visit: u64,
    pub date: DateTime<FixedOffset>,
    pub snapshot: Option<Swhid>,
}

/// Expected view of a fixture, recorded while it is generated.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub blobs: BTreeMap<Swhid, Vec<u8>>,
    pub directories: BTreeMap<Swhid, BTreeMap<Name, ManifestEntry>>,
    pub revisions: BTreeMap<Swhid, ManifestRevision>,
    /// Revisions in creation order.
    pub commit_order: Vec<Swhid>,
    pub releases: BTreeMap<Swhid, ManifestRelease>,
    pub snapshots: BTreeMap<Swhid, BTreeMap<String, BranchTarget>>,
    pub origins: BTreeMap<String, Vec<ManifestVisit>>,
    /// Tip of the main branch.
    pub head: Option<Swhid>,
    /// Most recent complete snapshot.
    pub snapshot: Option<Swhid>,
    pub origin: Option<String>,
    pub large_dir: Option<Swhid>,
}

impl Manifest {
    pub fn object_count(&self) -> usize {
        self.blobs.len()
            + self.directories.len()
            + self.revisions.len()
            + self.releases.len()
            + self.snapshots.len()
    }

    pub fn head(&self) -> Swhid {
        self.head.expect("fixture has a head")
    }

    /// Revisions reachable from `rev` through parent edges, excluding it.
    pub fn ancestors(&self, rev: &Swhid) -> BTreeSet<Swhid> {
        let mut seen = BTreeSet::new();
        let mut queue: VecDeque<Swhid> = self.revisions[rev].parents.iter().copied().collect();
        while let Some(r) = queue.pop_front() {
            if seen.insert(r) {
                queue.extend(self.revisions[&r].parents.iter().copied());
            }
        }
        seen
    }

    /// Ancestors sorted newest committer date first, equal dates by
    /// ascending identifier.
    pub fn log_order(&self, rev: &Swhid) -> Vec<Swhid> {
        let mut out: Vec<Swhid> = self.ancestors(rev).into_iter().collect();
        out.sort_by(|a, b| {
            let da = self.revisions[a].committer_date;
            let db = self.revisions[b].committer_date;
            db.cmp(&da).then_with(|| a.hash().cmp(b.hash()))
        });
        out
    }

    /// Ancestors grouped by the UTC day of their committer date.
    pub fn by_day(&self, rev: &Swhid) -> BTreeMap<String, BTreeSet<Swhid>> {
        let mut out: BTreeMap<String, BTreeSet<Swhid>> = BTreeMap::new();
        for a in self.ancestors(rev) {
            let day = self.revisions[&a]
                .committer_date
                .with_timezone(&chrono::Utc)
                .format("%Y/%m/%d")
                .to_string();
            out.entry(day).or_default().insert(a);
        }
        out
    }

    /// Directories whose entries may be spread over several pages.
    pub fn directories_larger_than(&self, n: usize) -> Vec<Swhid> {
        self.directories
            .iter()
            .filter(|(_, e)| e.len() > n)
            .map(|(id, _)| *id)
            .collect()
    }
}

/// Objects served by the mock API.
#[derive(Debug, Clone, Default)]
pub struct Archive {
    pub contents: BTreeMap<Swhid, Vec<u8>>,
    pub directories: BTreeMap<Swhid, Vec<DirEntry>>,
    pub revisions: BTreeMap<Swhid, RevisionMeta>,
    pub releases: BTreeMap<Swhid, ReleaseMeta>,
    pub snapshots: BTreeMap<Swhid, BTreeMap<String, BranchTarget>>,
    /// Visit documents per origin URL.
    pub origins: BTreeMap<String, Vec<Value>>,
}

impl Archive {
    pub fn object_count(&self) -> usize {
        self.contents.len()
            + self.directories.len()
            + self.revisions.len()
            + self.releases.len()
            + self.snapshots.len()
    }

    pub fn contains(&self, id: &Swhid) -> bool {
        match id.object_type() {
            ObjectType::Content => self.contents.contains_key(id),
            ObjectType::Directory => self.directories.contains_key(id),
            ObjectType::Revision => self.revisions.contains_key(id),
            ObjectType::Release => self.releases.contains_key(id),
            ObjectType::Snapshot => self.snapshots.contains_key(id),
        }
    }

    /// Adds every object of `other`; shared objects are identical by
    /// construction.
    pub fn merge(&mut self, other: &Archive) {
        self.contents.extend(other.contents.clone());
        self.directories.extend(other.directories.clone());
        self.revisions.extend(other.revisions.clone());
        self.releases.extend(other.releases.clone());
        self.snapshots.extend(other.snapshots.clone());
        self.origins.extend(other.origins.clone());
    }
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub spec: Option<FixtureSpec>,
    pub archive: Archive,
    pub manifest: Manifest,
}

/// Git object identifier: SHA-1 over `"<kind> <len>\0" + body`.
pub fn git_object_id(kind: &str, body: &[u8]) -> [u8; 20] {
    let mut h = Sha1::new();
    h.update(format!("{kind} {}\0", body.len()).as_bytes());
    h.update(body);
    h.finalize().into()
}

fn git_tz(date: &DateTime<FixedOffset>) -> String {
    let secs = date.offset().local_minus_utc();
    let sign = if secs < 0 { '-' } else { '+' };
    let m = secs.abs() / 60;
    format!("{sign}{:02}{:02}", m / 60, m % 60)
}

fn git_signature(p: &Person, date: &DateTime<FixedOffset>) -> String {
    format!("{} <{}> {} {}", p.name, p.email, date.timestamp(), git_tz(date))
}

/// Builds archive objects and their manifest records together.
#[derive(Default)]
pub struct Builder {
    pub archive: Archive,
    pub manifest: Manifest,
}

impl Builder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn blob(&mut self, data: &[u8]) -> Swhid {
        let id = Swhid::from_digest(ObjectType::Content, &git_object_id("blob", data));
        self.archive.contents.insert(id, data.to_vec());
        self.manifest.blobs.insert(id, data.to_vec());
        id
    }

    /// Hashes a directory tree bottom-up and returns the root identifier.
    pub fn tree(&mut self, dir: &BTreeMap<Name, TreeNode>) -> Swhid {
        let mut entries = Vec::with_capacity(dir.len());
        let mut expected = BTreeMap::new();
        for (name, node) in dir {
            let (perm, target, length, entry) = match node {
                TreeNode::File { data, exec } => {
                    let id = self.blob(data);
                    let perm = if *exec {
                        EntryPerm::ExecutableFile
                    } else {
                        EntryPerm::File
                    };
                    let entry = ManifestEntry::File {
                        content: id,
                        size: data.len() as u64,
                        exec: *exec,
                    };
                    (perm, id, Some(data.len() as u64), entry)
                }
                TreeNode::Symlink { target } => {
                    let id = self.blob(target);
                    let entry = ManifestEntry::Symlink {
                        content: id,
                        target: target.clone(),
                    };
                    (EntryPerm::Symlink, id, Some(target.len() as u64), entry)
                }
                TreeNode::Dir(sub) => {
                    let id = self.tree(sub);
                    (EntryPerm::Subdirectory, id, None, ManifestEntry::Dir(id))
                }
                TreeNode::Submodule(rev) => (
                    EntryPerm::SubmoduleRevision,
                    *rev,
                    None,
                    ManifestEntry::Submodule(*rev),
                ),
            };
            entries.push(DirEntry {
                name: name.clone(),
                target,
                perm,
                length,
            });
            expected.insert(name.clone(), entry);
        }
        // git orders tree entries as if directory names ended with '/'
        let sort_key = |e: &DirEntry| {
            let mut k = e.name.clone();
            if e.perm == EntryPerm::Subdirectory {
                k.push(b'/');
            }
            k
        };
        entries.sort_by_key(sort_key);
        let mut body = Vec::new();
        for e in &entries {
            body.extend_from_slice(format!("{:o} ", e.perm.mode()).as_bytes());
            body.extend_from_slice(&e.name);
            body.push(0);
            body.extend_from_slice(&hex_digest(&e.target));
        }
        let id = Swhid::from_digest(ObjectType::Directory, &git_object_id("tree", &body));
        self.archive.directories.insert(id, entries);
        self.manifest.directories.insert(id, expected);
        id
    }

    pub fn commit(
        &mut self,
        tree: Swhid,
        parents: Vec<Swhid>,
        author_date: DateTime<FixedOffset>,
        committer_date: DateTime<FixedOffset>,
        message: &[u8],
    ) -> Swhid {
        let author = Person {
            name: "Ada Author".into(),
            email: "ada@example.org".into(),
        };
        let committer = Person {
            name: "Cy Committer".into(),
            email: "cy@example.org".into(),
        };
        let mut body = format!("tree {}\n", tree.hash());
        for p in &parents {
            body.push_str(&format!("parent {}\n", p.hash()));
        }
        body.push_str(&format!("author {}\n", git_signature(&author, &author_date)));
        body.push_str(&format!(
            "committer {}\n\n",
            git_signature(&committer, &committer_date)
        ));
        let mut body = body.into_bytes();
        body.extend_from_slice(message);
        let id = Swhid::from_digest(ObjectType::Revision, &git_object_id("commit", &body));
        self.archive.revisions.insert(
            id,
            RevisionMeta {
                id,
                tree,
                parents: parents.clone(),
                author,
                committer,
                author_date,
                committer_date,
                message: message.to_vec(),
            },
        );
        self.manifest.revisions.insert(
            id,
            ManifestRevision {
                tree,
                parents,
                author_date,
                committer_date,
            },
        );
        self.manifest.commit_order.push(id);
        id
    }

    pub fn release(
        &mut self,
        name: &str,
        target: Swhid,
        date: DateTime<FixedOffset>,
        message: &[u8],
    ) -> Swhid {
        let kind = match target.object_type() {
            ObjectType::Revision => "commit",
            ObjectType::Directory => "tree",
            ObjectType::Content => "blob",
            _ => "tag",
        };
        let tagger = Person {
            name: "Rae Releaser".into(),
            email: "rae@example.org".into(),
        };
        let mut body = format!(
            "object {}\ntype {kind}\ntag {name}\ntagger {}\n\n",
            target.hash(),
            git_signature(&tagger, &date)
        )
        .into_bytes();
        body.extend_from_slice(message);
        let id = Swhid::from_digest(ObjectType::Release, &git_object_id("tag", &body));
        self.archive.releases.insert(
            id,
            ReleaseMeta {
                id,
                name: name.to_owned(),
                target,
                message: message.to_vec(),
                date: Some(date),
            },
        );
        self.manifest.releases.insert(
            id,
            ManifestRelease {
                name: name.to_owned(),
                target,
                date,
            },
        );
        id
    }

    /// Snapshot identifiers hash the sorted branch list, one
    /// `<type> <name>\0<len>:<target>` record per branch.
    pub fn snapshot(&mut self, branches: BTreeMap<String, BranchTarget>) -> Swhid {
        let mut body = Vec::new();
        for (name, target) in &branches {
            let (kind, bytes) = match target {
                BranchTarget::Object(id) => (id.object_type().api_name(), hex_digest(id).to_vec()),
                BranchTarget::Alias(to) => ("alias", to.clone()),
            };
            body.extend_from_slice(format!("{kind} {name}\0{}:", bytes.len()).as_bytes());
            body.extend_from_slice(&bytes);
        }
        let id = Swhid::from_digest(ObjectType::Snapshot, &git_object_id("snapshot", &body));
        self.archive.snapshots.insert(id, branches.clone());
        self.manifest.snapshots.insert(id, branches);
        id
    }

    /// Registers an origin with visits `(date, snapshot)`, numbered from 1
    /// in the given order.
    pub fn origin(&mut self, url: &str, visits: &[(DateTime<FixedOffset>, Option<Swhid>)]) {
        let mut docs = Vec::new();
        let mut expected = Vec::new();
        for (i, (date, snapshot)) in visits.iter().enumerate() {
            let visit = i as u64 + 1;
            docs.push(json!({
                "origin": url,
                "visit": visit,
                "date": date.to_rfc3339(),
                "status": if snapshot.is_some() { "full" } else { "failed" },
                "snapshot": snapshot.map(|s| s.hash().to_owned()),
                "type": "git",
            }));
            expected.push(ManifestVisit {
                visit,
                date: *date,
                snapshot: *snapshot,
            });
        }
        self.archive.origins.insert(url.to_owned(), docs);
        self.manifest.origins.insert(url.to_owned(), expected);
    }

    pub fn finish(self, spec: Option<FixtureSpec>) -> Fixture {
        Fixture {
            spec,
            archive: self.archive,
            manifest: self.manifest,
        }
    }
}

/// Directory at `path` below `root`, created as needed. Stops early at a
/// component that names a non-directory.
fn dir_at<'a>(root: &'a mut BTreeMap<Name, TreeNode>, path: &[Name]) -> &'a mut BTreeMap<Name, TreeNode> {
    let Some((first, rest)) = path.split_first() else {
        return root;
    };
    if !matches!(root.get(first), None | Some(TreeNode::Dir(_))) {
        return root;
    }
    match root
        .entry(first.clone())
        .or_insert_with(|| TreeNode::Dir(BTreeMap::new()))
    {
        TreeNode::Dir(d) => dir_at(d, rest),
        _ => unreachable!("checked above"),
    }
}

fn hex_digest(id: &Swhid) -> [u8; 20] {
    let mut out = [0u8; 20];
    for (i, chunk) in id.hash().as_bytes().chunks(2).enumerate() {
        let s = std::str::from_utf8(chunk).expect("hex");
        out[i] = u8::from_str_radix(s, 16).expect("hex");
    }
    out
}

const OFFSETS: [i32; 6] = [0, 2 * 3600, -5 * 3600, 19800, -8 * 3600, 3600];
const EPOCH_2020: i64 = 1_577_836_800;

struct Generator {
    rng: ChaCha8Rng,
    spec: FixtureSpec,
    b: Builder,
    counter: usize,
    clock: i64,
    last_committer: Option<DateTime<FixedOffset>>,
}

struct Branch {
    name: String,
    head: Swhid,
    tree: BTreeMap<Name, TreeNode>,
}

impl Generator {
    fn fresh_name(&mut self, stem: &str, ext: &str) -> Name {
        self.counter += 1;
        let n = self.counter;
        if self.spec.extras && self.rng.random_bool(0.05) {
            let odd: [&str; 3] = ["with space", "ünïcödé", "dash-and.dots"];
            let pick = odd[self.rng.random_range(0..odd.len())];
            return format!("{pick} {n}{ext}").into_bytes();
        }
        format!("{stem}{n}{ext}").into_bytes()
    }

    fn blob_bytes(&mut self) -> Vec<u8> {
        let (lo, hi) = self.spec.blob_size;
        let len = self.rng.random_range(lo..=hi.max(lo));
        (0..len)
            .map(|i| {
                if i % 61 == 60 {
                    b'\n'
                } else {
                    self.rng.random_range(b' '..=b'~')
                }
            })
            .collect()
    }

    fn date(&mut self) -> (DateTime<FixedOffset>, DateTime<FixedOffset>) {
        // some commits share the previous committer timestamp exactly
        let committer = match self.last_committer {
            Some(prev) if self.rng.random_bool(0.15) => {
                let off = OFFSETS[self.rng.random_range(0..OFFSETS.len())];
                prev.with_timezone(&FixedOffset::east_opt(off).expect("offset"))
            }
            _ => {
                self.clock += self.rng.random_range(600..3 * 86_400);
                let off = OFFSETS[self.rng.random_range(0..OFFSETS.len())];
                FixedOffset::east_opt(off)
                    .expect("offset")
                    .timestamp_opt(self.clock, 0)
                    .single()
                    .expect("valid timestamp")
            }
        };
        self.last_committer = Some(committer);
        let lag = self.rng.random_range(0..7200);
        let author = committer - chrono::Duration::seconds(lag);
        (author, committer)
    }

    /// Picks (creating as needed) a directory below `root` and returns its
    /// component path.
    fn pick_dir(&mut self, root: &BTreeMap<Name, TreeNode>) -> Vec<Name> {
        let mut path = Vec::new();
        let mut cur = root;
        while path.len() < self.spec.max_depth && self.rng.random_bool(0.55) {
            let subdirs: Vec<&Name> = cur
                .iter()
                .filter(|(_, n)| matches!(n, TreeNode::Dir(_)))
                .map(|(k, _)| k)
                .collect();
            if !subdirs.is_empty() && self.rng.random_bool(0.7) {
                let pick = subdirs[self.rng.random_range(0..subdirs.len())].clone();
                cur = match &cur[&pick] {
                    TreeNode::Dir(d) => d,
                    _ => unreachable!(),
                };
                path.push(pick);
            } else {
                path.push(self.fresh_name("dir", ""));
                break;
            }
        }
        path
    }

    fn edit(&mut self, root: &mut BTreeMap<Name, TreeNode>, earlier: &[Swhid]) {
        let path = self.pick_dir(root);
        let dir = dir_at(root, &path);
        let files: Vec<Name> = dir
            .iter()
            .filter(|(_, n)| matches!(n, TreeNode::File { .. }))
            .map(|(k, _)| k.clone())
            .collect();
        let roll: f64 = self.rng.random();
        let extras = self.spec.extras;
        if roll < 0.15 && !files.is_empty() {
            let victim = &files[self.rng.random_range(0..files.len())];
            let data = self.blob_bytes();
            if let Some(TreeNode::File { data: d, .. }) = dir.get_mut(victim) {
                *d = data;
            }
        } else if roll < 0.22 && files.len() > 1 {
            let victim = files[self.rng.random_range(0..files.len())].clone();
            dir.remove(&victim);
        } else if extras && roll < 0.32 && !files.is_empty() {
            let target = files[self.rng.random_range(0..files.len())].clone();
            let name = self.fresh_name("link", "");
            dir.insert(name, TreeNode::Symlink { target });
        } else if extras && roll < 0.36 && !earlier.is_empty() {
            let rev = earlier[self.rng.random_range(0..earlier.len())];
            let name = self.fresh_name("module", "");
            dir.insert(name, TreeNode::Submodule(rev));
        } else {
            let exec = extras && self.rng.random_bool(0.15);
            let name = if exec {
                self.fresh_name("run", ".sh")
            } else {
                self.fresh_name("file", ".txt")
            };
            let data = self.blob_bytes();
            dir.insert(name, TreeNode::File { data, exec });
        }
    }

    fn run(mut self) -> Fixture {
        let spec = self.spec.clone();
        let mut root: BTreeMap<Name, TreeNode> = BTreeMap::new();
        for _ in 0..spec.initial_files {
            self.edit(&mut root, &[]);
        }
        if spec.extras {
            // a name that is not valid UTF-8
            root.insert(
                b"latin1-\xe9.txt".to_vec(),
                TreeNode::File {
                    data: b"caf\xe9\n".to_vec(),
                    exec: false,
                },
            );
        }
        if spec.large_dir_entries > 0 {
            let big = (0..spec.large_dir_entries)
                .map(|i| {
                    let node = TreeNode::File {
                        data: format!("entry {i}\n").into_bytes(),
                        exec: false,
                    };
                    (format!("e{i:05}").into_bytes(), node)
                })
                .collect();
            root.insert(b"large".to_vec(), TreeNode::Dir(big));
        }
        let tree = self.b.tree(&root);
        if spec.large_dir_entries > 0 {
            if let Some(ManifestEntry::Dir(id)) = self.b.manifest.directories[&tree].get(&b"large"[..]) {
                self.b.manifest.large_dir = Some(*id);
            }
        }
        let (a, c) = self.date();
        let first = self.b.commit(tree, vec![], a, c, b"initial commit\n");
        let mut branches = vec![Branch {
            name: "main".into(),
            head: first,
            tree: root,
        }];
        let mut trees_by_commit: HashMap<Swhid, BTreeMap<Name, TreeNode>> = HashMap::new();
        trees_by_commit.insert(first, branches[0].tree.clone());

        for i in 1..spec.commits.max(1) {
            if self.rng.random_bool(spec.branch_probability) {
                let order = &self.b.manifest.commit_order;
                let base = order[self.rng.random_range(0..order.len())];
                let prefix = ["feature", "fix", "release/v1"][self.rng.random_range(0..3)];
                branches.push(Branch {
                    name: format!("{prefix}/topic-{i}"),
                    head: base,
                    tree: trees_by_commit[&base].clone(),
                });
            }
            let bi = self.rng.random_range(0..branches.len());
            let mut parents = vec![branches[bi].head];
            let mut tree = branches[bi].tree.clone();
            if branches.len() > 1 && self.rng.random_bool(spec.merge_probability) {
                let oi = (bi + 1 + self.rng.random_range(0..branches.len() - 1)) % branches.len();
                if branches[oi].head != branches[bi].head {
                    parents.push(branches[oi].head);
                    for (k, v) in branches[oi].tree.clone() {
                        tree.entry(k).or_insert(v);
                    }
                }
            }
            let edits = self.rng.random_range(1..=spec.edits_per_commit.max(1));
            if spec.edits_per_commit > 0 {
                let earlier = self.b.manifest.commit_order.clone();
                for _ in 0..edits {
                    self.edit(&mut tree, &earlier);
                }
            }
            let tree_id = self.b.tree(&tree);
            let (a, c) = self.date();
            let msg = if parents.len() > 1 {
                format!("merge into {}\n", branches[bi].name)
            } else {
                format!("change {i} on {}\n", branches[bi].name)
            };
            let id = self.b.commit(tree_id, parents, a, c, msg.as_bytes());
            trees_by_commit.insert(id, tree.clone());
            branches[bi].head = id;
            branches[bi].tree = tree;
        }

        let head = branches[0].head;
        self.b.manifest.head = Some(head);
        let mut full: BTreeMap<String, BranchTarget> = BTreeMap::new();
        for br in &branches {
            full.insert(format!("refs/heads/{}", br.name), BranchTarget::Object(br.head));
        }
        full.insert("HEAD".into(), BranchTarget::Alias(b"refs/heads/main".to_vec()));
        if spec.extras {
            let order = self.b.manifest.commit_order.clone();
            for (k, rev) in order.iter().step_by(order.len().div_ceil(3).max(1)).enumerate() {
                let date = self.b.manifest.revisions[rev].committer_date;
                let name = format!("v{}.{k}", spec.seed % 10);
                let rel = self.b.release(&name, *rev, date, format!("release {name}\n").as_bytes());
                full.insert(format!("refs/tags/{name}"), BranchTarget::Object(rel));
            }
            let first_tree = self.b.manifest.revisions[&order[0]].tree;
            let date = self.b.manifest.revisions[&order[0]].committer_date;
            let rel = self.b.release("tree-snapshot", first_tree, date, b"tree release\n");
            full.insert("refs/tags/tree-snapshot".into(), BranchTarget::Object(rel));
            full.insert(
                "refs/remotes/origin/HEAD".into(),
                BranchTarget::Alias(b"HEAD".to_vec()),
            );
        }
        let early_rev = self.b.manifest.commit_order[self.b.manifest.commit_order.len() / 2];
        let early = self.b.snapshot(BTreeMap::from([
            ("refs/heads/main".to_owned(), BranchTarget::Object(early_rev)),
            (
                "HEAD".to_owned(),
                BranchTarget::Alias(b"refs/heads/main".to_vec()),
            ),
        ]));
        let latest = self.b.snapshot(full);
        self.b.manifest.snapshot = Some(latest);

        let origin = format!("https://example.org/fixtures/repo-{}.git", spec.seed);
        let utc = FixedOffset::east_opt(0).expect("offset");
        let day = (self.clock / 86_400 + 2) * 86_400;
        let at = |secs: i64| utc.timestamp_opt(day + secs, 0).single().expect("valid");
        self.b.origin(
            &origin,
            &[
                (at(10 * 3600), Some(early)),
                (at(15 * 3600), Some(latest)),
                (at(86_400 + 3600), None),
                (at(3 * 86_400), Some(latest)),
            ],
        );
        self.b.manifest.origin = Some(origin);
        self.b.finish(Some(spec))
    }
}

/// Generates the fixture described by `spec`; identical specs give
/// identical fixtures.
pub fn generate_fixture(spec: &FixtureSpec) -> Fixture {
    Generator {
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        spec: spec.clone(),
        b: Builder::new(),
        counter: 0,
        clock: EPOCH_2020,
        last_committer: None,
    }
    .run()
}

pub const GOLDEN_ORIGIN: &str = "https://example.org/golden/hello.git";

pub const HELLO_C: &[u8] = b"#include <stdio.h>\n\nint main(void)\n{\n\tprintf(\"Hello, world!\\n\");\n\treturn 0;\n}\n";

/// Small hand-written archive used in documentation examples.
pub fn golden() -> Fixture {
    let mut b = Builder::new();
    let tz = FixedOffset::east_opt(3600).expect("offset");
    let date = |d: u32, h: u32| tz.with_ymd_and_hms(2021, 3, d, h, 0, 0).single().expect("date");
    let file = |data: &[u8]| TreeNode::File {
        data: data.to_vec(),
        exec: false,
    };

    let mut tree = BTreeMap::from([(b"hello.c".to_vec(), file(HELLO_C))]);
    let t1 = b.tree(&tree);
    let c1 = b.commit(t1, vec![], date(1, 9), date(1, 9), b"Add hello world\n");

    tree.insert(b"README".to_vec(), file(b"Prints a greeting.\n"));
    tree.insert(
        b"build.sh".to_vec(),
        TreeNode::File {
            data: b"#!/bin/sh\ncc -o hello hello.c\n".to_vec(),
            exec: true,
        },
    );
    let t2 = b.tree(&tree);
    let c2 = b.commit(t2, vec![c1], date(2, 10), date(2, 10), b"Add README and build script\n");

    tree.insert(
        b"hello.c".to_vec(),
        file(b"#include <stdio.h>\n\nint main(void)\n{\n\tputs(\"Hello, world!\");\n\treturn 0;\n}\n"),
    );
    let t3 = b.tree(&tree);
    let c3 = b.commit(t3, vec![c2], date(3, 11), date(3, 11), b"Use puts\n");
    b.manifest.head = Some(c3);

    let rel = b.release("v1.0", c3, date(3, 12), b"First release\n");
    let snp = b.snapshot(BTreeMap::from([
        ("HEAD".to_owned(), BranchTarget::Alias(b"refs/heads/main".to_vec())),
        ("refs/heads/main".to_owned(), BranchTarget::Object(c3)),
        ("refs/heads/feature/greeting".to_owned(), BranchTarget::Object(c2)),
        ("refs/tags/v1.0".to_owned(), BranchTarget::Object(rel)),
    ]));
    let first = b.snapshot(BTreeMap::from([(
        "refs/heads/main".to_owned(),
        BranchTarget::Object(c1),
    )]));
    b.manifest.snapshot = Some(snp);
    b.origin(
        GOLDEN_ORIGIN,
        &[(date(1, 18), Some(first)), (date(4, 18), Some(snp))],
    );
    b.manifest.origin = Some(GOLDEN_ORIGIN.to_owned());
    b.finish(None)
}

/// Checks structural well-formedness: every reference resolves and parent
/// edges form a DAG.
pub fn check_well_formed(archive: &Archive) -> Result<(), String> {
    for (id, entries) in &archive.directories {
        for e in entries {
            if !archive.contains(&e.target) && e.perm != EntryPerm::SubmoduleRevision {
                return Err(format!("{id}: dangling entry {:?}", String::from_utf8_lossy(&e.name)));
            }
        }
    }
    for (id, rev) in &archive.revisions {
        if !archive.directories.contains_key(&rev.tree) {
            return Err(format!("{id}: missing tree"));
        }
        for p in &rev.parents {
            if !archive.revisions.contains_key(p) {
                return Err(format!("{id}: missing parent {p}"));
            }
        }
    }
    // Kahn's algorithm over parent edges
    let mut indegree: HashMap<Swhid, usize> = archive.revisions.keys().map(|k| (*k, 0)).collect();
    for rev in archive.revisions.values() {
        for p in &rev.parents {
            *indegree.get_mut(p).expect("checked above") += 1;
        }
    }
    let mut ready: Vec<Swhid> = indegree.iter().filter(|(_, d)| **d == 0).map(|(k, _)| *k).collect();
    let mut visited = HashSet::new();
    while let Some(r) = ready.pop() {
        visited.insert(r);
        for p in &archive.revisions[&r].parents {
            let d = indegree.get_mut(p).expect("present");
            *d -= 1;
            if *d == 0 {
                ready.push(*p);
            }
        }
    }
    if visited.len() != archive.revisions.len() {
        return Err("parent edges contain a cycle".into());
    }
    for branches in archive.snapshots.values() {
        for t in branches.values() {
            if let BranchTarget::Object(id) = t {
                if !archive.contains(id) {
                    return Err(format!("snapshot branch to missing {id}"));
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn git_hashes_match_known_values() {
        // `git hash-object` of "hello world\n" and of the empty tree
        assert_eq!(
            Swhid::from_digest(ObjectType::Content, &git_object_id("blob", b"hello world\n")).hash(),
            "3b18e512dba79e4c8300dd08aeb37f8e728b8dad"
        );
        assert_eq!(
            Swhid::from_digest(ObjectType::Directory, &git_object_id("tree", b"")).hash(),
            "4b825dc642cb6eb9a060e54bf8d69288fbee4904"
        );
    }

    #[test]
    fn same_seed_same_fixture() {
        let a = generate_fixture(&FixtureSpec::new(42));
        let b = generate_fixture(&FixtureSpec::new(42));
        assert_eq!(a.manifest, b.manifest);
        let c = generate_fixture(&FixtureSpec::new(43));
        assert_ne!(a.manifest, c.manifest);
    }

    #[test]
    fn chain_has_linear_parents() {
        let f = generate_fixture(&FixtureSpec::chain(7, 50));
        assert_eq!(f.manifest.revisions.len(), 50);
        let edges: usize = f.manifest.revisions.values().map(|r| r.parents.len()).sum();
        assert_eq!(edges, 49);
        check_well_formed(&f.archive).unwrap();
    }

    #[test]
    fn empty_spec_is_one_empty_commit() {
        let f = generate_fixture(&FixtureSpec::empty(1));
        assert_eq!(f.manifest.revisions.len(), 1);
        let rev = &f.manifest.revisions[&f.manifest.head()];
        assert!(rev.parents.is_empty());
        assert_eq!(rev.tree.hash(), "4b825dc642cb6eb9a060e54bf8d69288fbee4904");
        assert!(f.manifest.directories[&rev.tree].is_empty());
    }

    #[test]
    fn random_fixtures_are_well_formed() {
        for seed in 0..20 {
            let f = generate_fixture(&FixtureSpec::new(seed));
            check_well_formed(&f.archive).unwrap();
            assert_eq!(f.archive.object_count(), f.manifest.object_count());
        }
    }

    #[test]
    fn merges_and_ties_occur() {
        let f = generate_fixture(&FixtureSpec {
            commits: 200,
            ..FixtureSpec::new(3)
        });
        assert!(f.manifest.revisions.values().any(|r| r.parents.len() > 1));
        let mut dates: Vec<i64> = f
            .manifest
            .revisions
            .values()
            .map(|r| r.committer_date.timestamp())
            .collect();
        let n = dates.len();
        dates.sort();
        dates.dedup();
        assert!(dates.len() < n, "expected some equal committer dates");
    }

    #[test]
    fn large_dir_is_recorded() {
        let f = generate_fixture(&FixtureSpec {
            large_dir_entries: 2500,
            ..FixtureSpec::new(5)
        });
        let id = f.manifest.large_dir.unwrap();
        assert_eq!(f.manifest.directories[&id].len(), 2500);
    }

    #[test]
    fn golden_archive_shape() {
        let g = golden();
        assert_eq!(g.manifest.revisions.len(), 3);
        check_well_formed(&g.archive).unwrap();
        assert_eq!(g.manifest.origins[GOLDEN_ORIGIN].len(), 2);
        let snp = &g.manifest.snapshots[&g.manifest.snapshot.unwrap()];
        assert!(snp.contains_key("refs/heads/feature/greeting"));
    }
}
