use clap::Parser;
use eloquent_cli::{run, Cli, CliError, EXIT_USAGE};

fn main() {
    tune_allocator();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ELOQUENT_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => fail(CliError {
            exit_code: EXIT_USAGE,
            kind: "usage",
            message: e.to_string().trim_end().to_string(),
        }),
    };
    if let Err(e) = run(cli) {
        fail(e);
    }
}

fn fail(e: CliError) -> ! {
    eprintln!("{}", e.to_json());
    std::process::exit(e.exit_code)
}

/// Keeps freed memory in the heap instead of returning it to the kernel, so
/// the training loop does not pay a page fault for every fresh buffer.
fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, -1);
        libc::mallopt(libc::M_TOP_PAD, 64 << 20);
    }
}
