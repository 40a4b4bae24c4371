use wideformer_cli::alloc::TrackingAlloc;

#[global_allocator]
static ALLOC: TrackingAlloc = TrackingAlloc;

fn main() {
    std::process::exit(wideformer_cli::dispatch(std::env::args_os()));
}
