use clap::Parser;

fn main() {
    let cli = layerwise_cli::Cli::parse();
    let code = match layerwise_cli::run(cli, &mut std::io::stdout()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    };
    std::process::exit(code);
}
