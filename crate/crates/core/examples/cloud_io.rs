//! Writes a cloud as ASCII XYZ and binary PLY, reads both back and compares bits.

use pcc::data::Primitive;
use pcc::io::{read_cloud_auto, write_cloud, CloudFormat};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> pcc::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cloud = Primitive::named("cylinder")?.sample_surface(1000, &mut rng)?;
    let dir = std::env::temp_dir().join("pcc-cloud-io");
    std::fs::create_dir_all(&dir)?;
    for format in [CloudFormat::XyzAscii, CloudFormat::PlyBinaryLe] {
        let path = dir.join(format!("cylinder.{}", format.extension()));
        write_cloud(&cloud, &path, format)?;
        let back = read_cloud_auto(&path)?;
        let same = back
            .points()
            .iter()
            .zip(cloud.points())
            .all(|(a, b)| a.map(f32::to_bits) == b.map(f32::to_bits));
        println!(
            "{:<40} {:>7} bytes  bitwise equal: {same}",
            path.display(),
            std::fs::metadata(&path)?.len()
        );
    }
    Ok(())
}
