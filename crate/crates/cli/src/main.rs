use clap::Parser;

fn main() {
    let cli = qrnn_cli::Cli::parse();
    if let Err(e) = qrnn_cli::run(cli) {
        let msg = e.to_string().replace('\n', " ");
        eprintln!("qrnn: error: {msg}");
        std::process::exit(1);
    }
}
