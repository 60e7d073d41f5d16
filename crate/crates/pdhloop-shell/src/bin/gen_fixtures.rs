//! Regenerate the synthetic fixture files.

use std::path::PathBuf;

fn main() {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("fixtures"));
    match pdhloop_shell::fixtures::write_all(&dir) {
        Ok(names) => {
            for n in names {
                println!("{}", dir.join(n).display());
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
