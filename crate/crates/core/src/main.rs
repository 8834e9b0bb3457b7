use clap::Parser;

fn main() {
    let cli = dhsl::cli::Cli::parse();
    match dhsl::cli::run(cli) {
        Ok(report) => print!("{report}"),
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(err.exit_code());
        }
    }
}
