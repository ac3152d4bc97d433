//! Writes the planted-semantics task to a directory so it can be run through
//! the command line:
//!
//! ```text
//! cargo run --example planted -- /tmp/planted
//! delta-embed sweep --vectors /tmp/planted/vectors.txt --train /tmp/planted/train.tsv \
//!     --dev /tmp/planted/dev.tsv --lr 4 --epochs 60 --batch-size 128 --out /tmp/planted/sweep
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use delta_embed::store::write_vectors;
use delta_embed::toy::{PlantedConfig, PlantedTask};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir: PathBuf = std::env::args_os()
        .nth(1)
        .ok_or("usage: planted DIR [SEED]")?
        .into();
    let seed = match std::env::args().nth(2) {
        Some(s) => s.parse()?,
        None => PlantedConfig::default().seed,
    };
    let task = PlantedTask::generate(&PlantedConfig {
        seed,
        ..PlantedConfig::default()
    });

    fs::create_dir_all(dir.join("sim"))?;
    write_vectors(
        &task.vocab,
        &task.base,
        BufWriter::new(File::create(dir.join("vectors.txt"))?),
    )?;
    PlantedTask::write_labeled(
        &task.train,
        BufWriter::new(File::create(dir.join("train.tsv"))?),
    )?;
    PlantedTask::write_labeled(
        &task.dev,
        BufWriter::new(File::create(dir.join("dev.tsv"))?),
    )?;

    let mut sim = BufWriter::new(File::create(dir.join("sim/fillers.txt"))?);
    for (a, b, score) in &task.filler_similarity().pairs {
        writeln!(sim, "{a} {b} {score}")?;
    }
    sim.flush()?;
    println!("planted words: {} {}", task.planted[0], task.planted[1]);
    Ok(())
}
