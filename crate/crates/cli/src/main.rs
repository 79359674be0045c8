// Training allocates and frees multi-megabyte activation buffers every step;
// mimalloc keeps them mapped instead of faulting fresh pages each time.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    std::process::exit(stylefield::cli::run(std::env::args_os()));
}
