//! Completes a partial cloud with a checkpoint and writes the dense result.
//!
//! `cargo run --release --example complete -- <ckpt> <partial.ply|xyz> <out.ply|xyz>`

use pcc::checkpoint::Checkpoint;
use pcc::io::{read_cloud_auto, write_cloud, CloudFormat};
use pcc::metrics::chamfer;

fn main() -> pcc::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let [ckpt, input, output] = args.as_slice() else {
        eprintln!("usage: complete <ckpt> <partial> <out>");
        std::process::exit(2);
    };
    let model = Checkpoint::read(ckpt.as_ref())?.model()?;
    let partial = read_cloud_auto(input.as_ref())?;
    let dense = model.complete(&partial)?;
    let format = CloudFormat::from_path(output.as_ref()).unwrap_or(CloudFormat::PlyBinaryLe);
    write_cloud(&dense, output.as_ref(), format)?;
    println!(
        "{} -> {} points; one-sided CD-l1 to the input {:.5}",
        partial.len(),
        dense.len(),
        chamfer(&partial, &dense, pcc::metrics::CdNorm::L1)?
    );
    Ok(())
}
