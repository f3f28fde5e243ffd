fn main() { std::process::exit(slimdiff::cli::dispatch(std::env::args().collect())); }
