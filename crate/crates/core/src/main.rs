use clap::Parser;

fn main() {
    tccml::init_thread_pool();
    let cli = tccml::cli::Cli::parse();
    if let Err(e) = tccml::cli::run(cli) {
        eprintln!("error: {}", e);
        std::process::exit(e.exit_code());
    }
}
