// Cross-entropy and perplexity of the toy checkpoint on the held-out
// corpus, in full precision and after 2-bit fake quantization.
//
// cargo run --release --example eval_perplexity

use std::path::PathBuf;

use invarexplore::calib::load_sequences;
use invarexplore::checkpoint::read_checkpoint;
use invarexplore::model::cross_entropy;
use invarexplore::{ModelParams, QuantSpec};

pub fn run_example() -> invarexplore::Result<()> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let params = ModelParams::from_checkpoint(&read_checkpoint(dir.join("toy.ivq"))?)?;
    let corpus = load_sequences(dir.join("heldout.txt"), usize::MAX, 128, params.config.vocab)?;
    println!("{} sequences, {} tokens", corpus.len(), corpus.token_count());

    let ce = cross_entropy(&params, &corpus.sequences)?;
    println!("fp          ce {ce:.4} nats/token  perplexity {:.3}", ce.exp());
    for g in [128, 16] {
        let spec = QuantSpec::new(2, g)?;
        let ce = cross_entropy(&params.fake_quantized(&spec)?, &corpus.sequences)?;
        println!("2-bit g{g:<3}  ce {ce:.4} nats/token  perplexity {:.3}", ce.exp());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> invarexplore::Result<()> {
    run_example()
}
