use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::process::ExitCode;

use archivefs_mock::{generate_fixture, golden, FixtureSpec, MockServer};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "mock-archive", about = "Serve a generated archive over the archive API")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve a fixture (plus the golden mini-archive) until interrupted.
    Serve {
        #[command(flatten)]
        fixture: FixtureArgs,
        #[arg(long, default_value_t = 5080)]
        port: u16,
        #[arg(long, default_value_t = Ipv4Addr::LOCALHOST.into())]
        bind: IpAddr,
        /// Entries per page of paginated endpoints.
        #[arg(long, default_value_t = 1000)]
        page_size: usize,
    },
    /// Print the notable identifiers of a fixture.
    Describe {
        #[command(flatten)]
        fixture: FixtureArgs,
    },
}

#[derive(Args)]
struct FixtureArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 40)]
    commits: usize,
    /// Entries of an extra large directory in the first commit.
    #[arg(long, default_value_t = 0)]
    large_dir: usize,
}

impl FixtureArgs {
    fn spec(&self) -> FixtureSpec {
        FixtureSpec {
            commits: self.commits,
            large_dir_entries: self.large_dir,
            ..FixtureSpec::new(self.seed)
        }
    }
}

fn describe(spec: &FixtureSpec) {
    let f = generate_fixture(spec);
    let m = &f.manifest;
    println!("objects   {}", m.object_count());
    println!("head      {}", m.head());
    if let Some(s) = m.snapshot {
        println!("snapshot  {s}");
    }
    if let Some(o) = &m.origin {
        println!("origin    {o}");
    }
    if let Some(d) = m.large_dir {
        println!("large dir {d}");
    }
    let g = golden();
    println!("golden    {}", g.manifest.head());
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Describe { fixture } => {
            describe(&fixture.spec());
            ExitCode::SUCCESS
        }
        Command::Serve {
            fixture,
            port,
            bind,
            page_size,
        } => {
            let mut archive = generate_fixture(&fixture.spec()).archive;
            archive.merge(&golden().archive);
            let server = match MockServer::start_on(archive, SocketAddr::new(bind, port)) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("mock-archive: cannot listen on {bind}:{port}: {e}");
                    return ExitCode::FAILURE;
                }
            };
            server.set_options(|o| o.page_size = page_size);
            describe(&fixture.spec());
            println!("serving   {}", server.base_url());
            loop {
                std::thread::park();
            }
        }
    }
}
