//! Runs one forward pass of the default network and prints the size of every stage.
//!
//! `cargo run --release --example pipeline -- [up_factor]`

use pcc::data::{gen_synthetic_pair, Difficulty, Primitive};
use pcc::model::Provenance;
use pcc::{ForwardSeeds, Model, ModelConfig};
use pcc_autograd::Tape;

fn main() -> pcc::Result<()> {
    let up_factor = std::env::args()
        .nth(1)
        .map_or(4, |s| s.parse().expect("up_factor"));
    let cfg = ModelConfig {
        up_factor,
        ..ModelConfig::default()
    };
    let model = Model::<f32>::new(cfg, 0)?;
    println!(
        "{} parameters in {} tensors",
        model.params.num_scalars(),
        model.params.len()
    );
    let pair = gen_synthetic_pair(
        Primitive::named("box")?,
        2048,
        16384,
        Some(Difficulty::Median),
        1,
    )?;
    let tape = Tape::new();
    let pred = model.forward(&tape, &pair.partial, ForwardSeeds::EVAL)?;
    let pool = pred.pool.as_ref().expect("pooling enabled");
    let from_input = |p: &[Provenance]| p.iter().filter(|&&s| s == Provenance::Input).count();
    println!("partial input      {:?}", pair.partial.len());
    println!("proxy tokens       {:?}", pred.encoded.features.shape());
    println!("coarse template    {:?}", pred.coarse.shape());
    println!(
        "pool               {:?} ({} template + {} input)",
        pool.points.shape(),
        pool.template_indices.len(),
        pool.input_indices.len()
    );
    println!(
        "fine template      {:?} ({} from the input)",
        pred.fine.shape(),
        from_input(&pred.fine_provenance)
    );
    println!("decoder proxies    {:?}", pred.proxies.shape());
    println!("dense output       {:?}", pred.dense.shape());
    println!("ground truth       {}", pair.complete.len());
    Ok(())
}
