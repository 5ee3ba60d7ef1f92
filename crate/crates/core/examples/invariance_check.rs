// Permuting and rescaling the hidden neurons of a ReLU FFN leaves the model
// output unchanged; rotating neuron pairs does not, except for tiny angles.
//
// cargo run --release --example invariance_check

use invarexplore::invariance::apply_transformation;
use invarexplore::model::{forward, Init};
use invarexplore::numerics::relative_difference;
use invarexplore::{LayerTransform, ModelConfig, ModelParams, RandomSource};
use rand::seq::SliceRandom;

pub fn run_example() -> invarexplore::Result<()> {
    let config = ModelConfig {
        layers: 2,
        d_model: 32,
        d_ff: 64,
        vocab: 50,
        heads: 4,
        context: 16,
    };
    let params = ModelParams::random(config, 7, Init::FanIn)?;
    let mut rng = RandomSource::new(7);
    let tokens: Vec<Vec<u32>> = (0..2)
        .map(|_| (0..16).map(|_| rng.below(50) as u32).collect())
        .collect();
    let base = forward(&params, &tokens, &[])?.logits;

    let mut permuted = LayerTransform::identity(64);
    permuted.perm.shuffle(&mut rng);
    let mut scaled = LayerTransform::identity(64);
    scaled.scales.iter_mut().for_each(|s| *s = 0.5 + 1.5 * rng.uniform());
    let mut nudged = LayerTransform::identity(64);
    nudged.angles.iter_mut().for_each(|a| *a = 1e-4 * rng.standard_normal());
    let mut rotated = LayerTransform::identity(64);
    rotated.angles.iter_mut().for_each(|a| *a = 0.5);

    for (name, t) in [
        ("permutation", permuted),
        ("scaling", scaled),
        ("rotation 1e-4", nudged),
        ("rotation 0.5", rotated),
    ] {
        let moved = forward(&apply_transformation(&params, 0, &t)?, &tokens, &[])?.logits;
        let worst = moved
            .iter()
            .zip(&base)
            .map(|(a, b)| relative_difference(a, b))
            .try_fold(0.0f64, |m, d| d.map(|d| m.max(d)))?;
        println!("{name:<14} relative logit change {worst:.3e}");
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> invarexplore::Result<()> {
    run_example()
}
