fn main() {
    let args: Vec<std::ffi::OsString> = std::env::args_os().collect();
    env_logger::Builder::new()
        .filter_level(archscale::cli::verbosity(&args[1..]))
        .parse_env("RUST_LOG")
        .init();
    let code = archscale::cli::run(args, &mut std::io::stdout().lock());
    std::process::exit(code);
}
