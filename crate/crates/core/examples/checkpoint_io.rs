// Writes a model as a full-precision and as a 2-bit container, with a
// transform attached to the quantized one, and reads both back.
//
// cargo run --release --example checkpoint_io

use invarexplore::checkpoint::{read_checkpoint, write_checkpoint};
use invarexplore::invariance::{read_transforms, transform_tensors};
use invarexplore::model::Init;
use invarexplore::{LayerTransform, ModelConfig, ModelParams, QuantSpec};

pub fn run_example() -> invarexplore::Result<()> {
    let config = ModelConfig {
        layers: 2,
        d_model: 64,
        d_ff: 128,
        vocab: 128,
        heads: 4,
        context: 64,
    };
    let params = ModelParams::random(config, 1, Init::FanIn)?;
    let dir = std::env::temp_dir().join(format!("invarexplore-checkpoint-io-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| invarexplore::Error::Format(e.to_string()))?;

    let fp = dir.join("fp.ivq");
    write_checkpoint(&fp, &params.to_checkpoint())?;

    let spec = QuantSpec::new(2, 64)?;
    let mut quantized = params.to_quantized_checkpoint(&spec)?;
    let mut t = LayerTransform::identity(config.d_ff);
    t.perm.swap(0, 1);
    t.scales[5] = 1.25;
    for tensor in transform_tensors(&[t.clone(), LayerTransform::identity(config.d_ff)]) {
        quantized.push(tensor);
    }
    let q = dir.join("q2.ivq");
    write_checkpoint(&q, &quantized)?;

    for path in [&fp, &q] {
        let ckpt = read_checkpoint(path)?;
        let size = std::fs::metadata(path).map(|m| m.len()).unwrap_or(0);
        println!(
            "{}: {} tensors, {size} bytes, quantization {:?}",
            path.file_name().unwrap_or_default().to_string_lossy(),
            ckpt.tensors.len(),
            ckpt.meta.quant
        );
        ModelParams::from_checkpoint(&ckpt)?;
    }
    let back = read_transforms(&read_checkpoint(&q)?)?.unwrap_or_default();
    assert_eq!(back[0].perm, t.perm);
    println!("layer 0 transform restored, identity: {}", back[0].is_identity());
    let _ = std::fs::remove_dir_all(&dir);
    Ok(())
}

#[allow(dead_code)]
fn main() -> invarexplore::Result<()> {
    run_example()
}
