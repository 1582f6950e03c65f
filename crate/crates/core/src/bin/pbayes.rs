fn main() {
    let code = partial_bayes::cli::run(std::env::args_os(), &mut std::io::stdout().lock());
    std::process::exit(code);
}
