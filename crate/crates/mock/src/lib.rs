//! Test double for the archive API: a seeded fixture generator and an HTTP
//! server with pagination, fault injection and a request log.

pub mod fixture;
pub mod server;

pub use fixture::{
    generate_fixture, golden, Archive, Builder, Fixture, FixtureSpec, Manifest, ManifestEntry, TreeNode,
    GOLDEN_ORIGIN, HELLO_C,
};
pub use server::{Endpoint, Fault, FaultKind, MockOptions, MockServer};
