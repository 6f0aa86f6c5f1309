fn main() {
    // CLI wiring lands once the pipeline modules are in place.
    eprintln!("deshadow: not yet wired");
    std::process::exit(2);
}
