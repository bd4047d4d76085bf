fn main() {
    std::process::exit(mako_cli::cli_dispatch(std::env::args_os()));
}
