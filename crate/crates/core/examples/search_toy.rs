// Hill-climbing search on the bundled toy checkpoint: 2-bit, group size 16,
// four 128-token calibration sequences. Prints the round-to-nearest
// objective, the searched objective and held-out perplexities.
//
// cargo run --release --example search_toy -- [steps]

use std::path::PathBuf;
use std::time::Instant;

use invarexplore::calib::load_sequences;
use invarexplore::checkpoint::read_checkpoint;
use invarexplore::model::perplexity;
use invarexplore::search::{run, SearchConfig};
use invarexplore::{ModelParams, QuantSpec};

pub fn run_example(steps: usize) -> invarexplore::Result<()> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let params = ModelParams::from_checkpoint(&read_checkpoint(dir.join("toy.ivq"))?)?;
    let vocab = params.config.vocab;
    let calib = load_sequences(dir.join("calib.txt"), 4, 128, vocab)?;
    let held = load_sequences(dir.join("heldout.txt"), 16, 128, vocab)?;
    let spec = QuantSpec::new(2, 16)?;
    let cfg = SearchConfig {
        steps,
        quant: Some(spec),
        seed: 0,
        ..SearchConfig::default()
    };

    let start = Instant::now();
    let out = run(&params, cfg, &calib.sequences)?;
    let accepted = out.curve.iter().filter(|r| r.accepted).count();
    println!(
        "{steps} steps in {:.1?}, {accepted} accepted, alpha = {:.4}",
        start.elapsed(),
        out.alpha
    );
    println!(
        "objective: rtn {:.5} (ce {:.5}) -> searched {:.5} (ce {:.5})",
        out.initial.loss, out.initial.ce, out.best.loss, out.best.ce
    );
    println!(
        "held-out perplexity: fp {:.3}, rtn {:.3}, searched {:.3}",
        perplexity(&params, &held.sequences, None)?,
        perplexity(&params, &held.sequences, Some(&spec))?,
        perplexity(&out.params, &held.sequences, Some(&spec))?,
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> invarexplore::Result<()> {
    let steps = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(2000);
    run_example(steps)
}
