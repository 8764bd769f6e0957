use clap::Parser;

fn main() {
    env_logger::init();
    let cli = dewarp::cli::Cli::parse();
    match dewarp::cli::run(cli) {
        Ok(summary) => println!("{summary}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
