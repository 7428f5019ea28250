use clap::error::ErrorKind;
use clap::Parser;

fn main() {
    let cli = match mind_cli::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 64,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = mind_cli::run(cli) {
        eprintln!("mind: {e}");
        std::process::exit(e.exit_code());
    }
}
