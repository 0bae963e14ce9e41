use clap::Parser;
use graphscan_cli::{run, Cli};

// Keeps freed buffers mapped between passes; the system allocator hands
// large ones back to the kernel and re-faults them on every call, which
// distorts the timings of `bench`.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("graphscan: {e}");
        std::process::exit(e.exit_code());
    }
}
