// Round-to-nearest group quantization of the bundled toy checkpoint at
// several bit widths: mean group scale, worst reconstruction error and
// held-out perplexity of the fake-quantized model.
//
// cargo run --release --example quantize_rtn

use std::path::PathBuf;

use invarexplore::calib::load_sequences;
use invarexplore::checkpoint::read_checkpoint;
use invarexplore::model::perplexity;
use invarexplore::quant::{max_abs_error, QuantizedMatrix};
use invarexplore::{ModelParams, QuantSpec};

pub fn run_example() -> invarexplore::Result<()> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let params = ModelParams::from_checkpoint(&read_checkpoint(dir.join("toy.ivq"))?)?;
    let held = load_sequences(dir.join("heldout.txt"), 4, 128, params.config.vocab)?;

    println!("fp perplexity {:.3}", perplexity(&params, &held.sequences, None)?);
    for (bits, g) in [(8, 128), (4, 128), (3, 128), (2, 128), (2, 16)] {
        let spec = QuantSpec::new(bits, g)?;
        let (mut scale, mut groups, mut worst) = (0.0, 0, 0.0f64);
        for (_, w) in params.weights() {
            let q = QuantizedMatrix::quantize(w, &spec)?;
            scale += q.scales.iter().sum::<f64>();
            groups += q.n_groups();
            worst = worst.max(max_abs_error(w, &q.dequantize()));
        }
        println!(
            "{bits}-bit g{g:<3}  mean scale {:.5}  max |err| {worst:.5}  perplexity {:.3}",
            scale / groups as f64,
            perplexity(&params, &held.sequences, Some(&spec))?
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> invarexplore::Result<()> {
    run_example()
}
