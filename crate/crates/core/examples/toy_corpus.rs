//! Writes a procedurally generated dataset for trying the `mrjl` commands.
//!
//! cargo run --example toy_corpus -- OUT_DIR [TRAIN_IDS TEST_IDS PER_ID HEIGHT WIDTH SEED]

use std::path::PathBuf;
use std::process::ExitCode;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(out) = args.first().map(PathBuf::from) else {
        eprintln!("usage: toy_corpus OUT_DIR [TRAIN_IDS TEST_IDS PER_ID HEIGHT WIDTH SEED]");
        return ExitCode::from(1);
    };
    let num = |i: usize, default: u64| -> u64 { args.get(i).and_then(|s| s.parse().ok()).unwrap_or(default) };
    let (train, test, per) = (num(1, 8) as u32, num(2, 8) as u32, num(3, 4) as u32);
    let (h, w, seed) = (num(4, 256) as usize, num(5, 128) as usize, num(6, 0));
    match mrjl::data::toy::write_dataset(&out, train, test, per, h, w, seed) {
        Ok(()) => {
            println!("wrote {} train and {} test identities to {}", train, test, out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
