//! Writes a synthetic dataset to disk and reads it back.
//!
//! `cargo run --example generate_dataset -- [dir] [count] [seed]`

use std::path::PathBuf;

use iaunet::data::{generate_dataset, load_dataset, save_dataset, SceneSpec};

fn main() -> iaunet::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "synthetic_data".into()));
    let count = args.next().map_or(4, |s| s.parse().expect("count"));
    let seed = args.next().map_or(7, |s| s.parse().expect("seed"));
    let spec = SceneSpec { seed, multi_class: true, max_instances: 4, ..Default::default() };
    let samples = generate_dataset(&spec, count)?;
    save_dataset(&dir, &samples)?;
    let back = load_dataset(&dir)?;
    for (s, b) in samples.iter().zip(&back) {
        let areas: Vec<usize> = b.record.instances.iter().map(|i| i.mask.area()).collect();
        let classes: Vec<usize> = b.record.instances.iter().map(|i| i.class_id).collect();
        println!("{}: classes {classes:?} areas {areas:?}", s.record.image_id);
        assert_eq!(s.record.instances.len(), b.record.instances.len());
    }
    println!("wrote {} images to {}", back.len(), dir.display());
    Ok(())
}
