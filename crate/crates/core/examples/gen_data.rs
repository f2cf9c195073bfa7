//! Generates a small synthetic dataset and prints what the manifest lists.
//!
//! `cargo run --release --example gen_data -- [out_dir]`

use pcc::data::{gen_dataset, load_manifest, write_dataset, Primitive, MANIFEST_NAME};

fn main() -> pcc::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "synthetic-data".into());
    let dir = std::path::Path::new(&dir);
    let pairs = gen_dataset(&Primitive::NAMES, 2, 2048, 2048, 42)?;
    write_dataset(dir, &pairs)?;
    for entry in load_manifest(&dir.join(MANIFEST_NAME))? {
        let pair = entry.load()?;
        println!(
            "{:<28} {:<9} partial {:>5}  complete {:>5}",
            pair.id,
            pair.category,
            pair.partial.len(),
            pair.complete.len()
        );
    }
    Ok(())
}
