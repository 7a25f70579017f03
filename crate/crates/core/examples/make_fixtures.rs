//! Writes every fixture network to the directory given as the first
//! argument (default `fixtures`).

use std::path::PathBuf;

fn main() -> Result<(), cnnjit::Error> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fixtures".into()));
    std::fs::create_dir_all(&dir).map_err(|source| cnnjit::Error::Io {
        path: dir.clone(),
        source,
    })?;
    for (name, model) in cnnjit_testkit::fixtures::all() {
        model.save(&dir.join(name))?;
        println!("{}", dir.join(name).with_extension("json").display());
    }
    Ok(())
}
