//! Thin binary wrapper: all behavior lives in [`liouville_flow::cli`] so it
//! can be driven and tested as a library.

fn main() {
    std::process::exit(liouville_flow::cli::run());
}
