fn main() {
    std::process::exit(dfkd_cli::run(std::env::args().collect()));
}
