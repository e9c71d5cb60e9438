use clap::Parser;

fn main() {
    let cli = strategic_cp::cli::Cli::parse();
    match strategic_cp::cli::run(cli) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}
