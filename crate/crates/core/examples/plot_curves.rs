// Short search on the toy checkpoint, then its optimization curves as CSV
// and as loss and acceptance-rate SVG panels.
//
// cargo run --release --example plot_curves -- [out-dir]

use std::path::{Path, PathBuf};

use invarexplore::calib::load_sequences;
use invarexplore::checkpoint::read_checkpoint;
use invarexplore::curves::{read_curves, render_svg, write_curves, Panel};
use invarexplore::search::{run, SearchConfig};
use invarexplore::{Error, ModelParams, QuantSpec};

pub fn run_example(out: &Path, steps: usize) -> invarexplore::Result<()> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let params = ModelParams::from_checkpoint(&read_checkpoint(dir.join("toy.ivq"))?)?;
    let calib = load_sequences(dir.join("calib.txt"), 2, 64, params.config.vocab)?;
    let cfg = SearchConfig {
        steps,
        quant: Some(QuantSpec::new(2, 16)?),
        window: 50,
        ..SearchConfig::default()
    };
    let outcome = run(&params, cfg, &calib.sequences)?;

    std::fs::create_dir_all(out).map_err(|e| Error::Format(e.to_string()))?;
    let csv = out.join("curves.csv");
    write_curves(&csv, &outcome.curve)?;
    let records = read_curves(&csv)?;
    for panel in [Panel::Loss, Panel::Acceptance] {
        let path = out.join(panel.file_name());
        std::fs::write(&path, render_svg(&records, panel)).map_err(|e| Error::Format(e.to_string()))?;
        println!("wrote {}", path.display());
    }
    println!(
        "{} steps, objective {:.4} -> {:.4}",
        records.len(),
        outcome.initial.loss,
        outcome.best.loss
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> invarexplore::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("curves-out"));
    run_example(&out, 400)
}
