//! Function-preserving transforms of a feed-forward pair.
//!
//! For a hidden layer of width `d_ff` a [`LayerTransform`] holds a
//! permutation `π`, positive scales `s` and `d_ff / 2` rotation angles `φ`.
//! Applied to `(W_up, b_up, W_down)` it produces
//!
//! ```text
//! W_up' = P S R W_up     b_up' = P S R b_up     W_down' = W_down Rᵀ S⁻¹ Pᵀ
//! ```
//!
//! where `R` rotates adjacent hidden pairs `(2i, 2i+1)` by `φ_i`. Permutation
//! and positive scaling commute with ReLU, so they leave the full-precision
//! network unchanged. Rotation does not; small angles only perturb it.
//! None of the operators is ever materialized as a matrix.

use crate::checkpoint::{Checkpoint, Tensor, TensorData};
use crate::error::{Error, Result};
use crate::model::{cross_entropy, FfnParams, ModelParams};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTransform {
    /// Row `i` of the transformed `W_up` is row `perm[i]` of the input.
    pub perm: Vec<usize>,
    pub scales: Vec<f64>,
    pub angles: Vec<f64>,
}

impl LayerTransform {
    pub fn identity(d_ff: usize) -> Self {
        Self {
            perm: (0..d_ff).collect(),
            scales: vec![1.0; d_ff],
            angles: vec![0.0; d_ff / 2],
        }
    }

    pub fn width(&self) -> usize {
        self.perm.len()
    }

    pub fn is_identity(&self) -> bool {
        self == &Self::identity(self.width())
    }

    pub fn validate(&self, d_ff: usize) -> Result<()> {
        validate_permutation(&self.perm, d_ff)?;
        validate_scales(&self.scales, d_ff)?;
        if self.angles.len() != d_ff / 2 {
            return Err(Error::Shape(format!(
                "{} rotation angles for width {d_ff}",
                self.angles.len()
            )));
        }
        if self.angles.iter().any(|a| !a.is_finite()) {
            return Err(Error::Domain("non-finite rotation angle".into()));
        }
        Ok(())
    }
}

fn validate_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::Domain(format!(
            "permutation of length {} for width {n}",
            perm.len()
        )));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(Error::Domain(format!("not a permutation: index {p}")));
        }
    }
    Ok(())
}

fn validate_scales(scales: &[f64], n: usize) -> Result<()> {
    if scales.len() != n {
        return Err(Error::Shape(format!("{} scales for width {n}", scales.len())));
    }
    if let Some(s) = scales.iter().find(|&&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Domain(format!("scale {s} is not a positive finite value")));
    }
    Ok(())
}

fn check_width(ffn: &FfnParams, n: usize) -> Result<()> {
    if ffn.w_up.rows() != n || ffn.b_up.len() != n || ffn.w_down.cols() != n {
        return Err(Error::Shape(format!(
            "ffn hidden width {} does not match transform width {n}",
            ffn.w_up.rows()
        )));
    }
    Ok(())
}

/// Reorders hidden neurons by index gathering.
pub fn apply_permutation(ffn: &FfnParams, perm: &[usize]) -> Result<FfnParams> {
    let n = ffn.w_up.rows();
    validate_permutation(perm, n)?;
    check_width(ffn, n)?;
    let mut out = ffn.clone();
    for (i, &src) in perm.iter().enumerate() {
        out.w_up.row_mut(i).copy_from_slice(ffn.w_up.row(src));
        out.b_up[i] = ffn.b_up[src];
    }
    for r in 0..ffn.w_down.rows() {
        let src = ffn.w_down.row(r);
        let dst = out.w_down.row_mut(r);
        for (i, &p) in perm.iter().enumerate() {
            dst[i] = src[p];
        }
    }
    Ok(out)
}

/// Multiplies hidden neuron `i` by `s_i` on the way in and `1 / s_i` on the
/// way out.
pub fn apply_scaling(ffn: &FfnParams, scales: &[f64]) -> Result<FfnParams> {
    let n = ffn.w_up.rows();
    validate_scales(scales, n)?;
    check_width(ffn, n)?;
    let mut out = ffn.clone();
    for (i, &s) in scales.iter().enumerate() {
        out.w_up.row_mut(i).iter_mut().for_each(|v| *v *= s);
        out.b_up[i] *= s;
    }
    for r in 0..out.w_down.rows() {
        for (v, &s) in out.w_down.row_mut(r).iter_mut().zip(scales) {
            *v /= s;
        }
    }
    Ok(out)
}

/// Rotates hidden pairs `(2i, 2i+1)` of `W_up`/`b_up` by `angles[i]` and the
/// matching column pairs of `W_down` by the transpose.
pub fn apply_rotation(ffn: &FfnParams, angles: &[f64]) -> Result<FfnParams> {
    let n = ffn.w_up.rows();
    check_width(ffn, n)?;
    if n % 2 != 0 || angles.len() != n / 2 {
        return Err(Error::Shape(format!(
            "{} angles for hidden width {n}",
            angles.len()
        )));
    }
    let mut out = ffn.clone();
    let cols = ffn.w_up.cols();
    for (pair, &phi) in angles.iter().enumerate() {
        if phi == 0.0 {
            continue;
        }
        let (sin, cos) = phi.sin_cos();
        let (a, b) = (2 * pair, 2 * pair + 1);
        for c in 0..cols {
            let (x, y) = (ffn.w_up.get(a, c), ffn.w_up.get(b, c));
            out.w_up.set(a, c, cos * x - sin * y);
            out.w_up.set(b, c, sin * x + cos * y);
        }
        let (x, y) = (ffn.b_up[a], ffn.b_up[b]);
        out.b_up[a] = cos * x - sin * y;
        out.b_up[b] = sin * x + cos * y;
        // W_down Rᵀ: column pair mixes with the same rotation
        for r in 0..ffn.w_down.rows() {
            let (x, y) = (ffn.w_down.get(r, a), ffn.w_down.get(r, b));
            out.w_down.set(r, a, cos * x - sin * y);
            out.w_down.set(r, b, sin * x + cos * y);
        }
    }
    Ok(out)
}

/// Rotation, then scaling, then permutation.
pub fn transform_ffn(ffn: &FfnParams, t: &LayerTransform) -> Result<FfnParams> {
    t.validate(ffn.w_up.rows())?;
    let rotated = apply_rotation(ffn, &t.angles)?;
    let scaled = apply_scaling(&rotated, &t.scales)?;
    apply_permutation(&scaled, &t.perm)
}

/// Exact inverse of [`transform_ffn`].
pub fn untransform_ffn(ffn: &FfnParams, t: &LayerTransform) -> Result<FfnParams> {
    t.validate(ffn.w_up.rows())?;
    let mut inverse = vec![0; t.perm.len()];
    for (i, &p) in t.perm.iter().enumerate() {
        inverse[p] = i;
    }
    let unpermuted = apply_permutation(ffn, &inverse)?;
    let reciprocal: Vec<f64> = t.scales.iter().map(|s| 1.0 / s).collect();
    let unscaled = apply_scaling(&unpermuted, &reciprocal)?;
    let negated: Vec<f64> = t.angles.iter().map(|a| -a).collect();
    apply_rotation(&unscaled, &negated)
}

fn check_layer(params: &ModelParams, layer: usize) -> Result<()> {
    if layer >= params.layers.len() {
        return Err(Error::Range(format!(
            "layer {layer} outside 0..{}",
            params.layers.len()
        )));
    }
    Ok(())
}

/// New parameters with `t` applied to the FFN pair of `layer` (0-based).
pub fn apply_transformation(params: &ModelParams, layer: usize, t: &LayerTransform) -> Result<ModelParams> {
    check_layer(params, layer)?;
    let mut out = params.clone();
    out.layers[layer].ffn = transform_ffn(&params.layers[layer].ffn, t)?;
    Ok(out)
}

pub fn undo_transformation(params: &ModelParams, layer: usize, t: &LayerTransform) -> Result<ModelParams> {
    check_layer(params, layer)?;
    let mut out = params.clone();
    out.layers[layer].ffn = untransform_ffn(&params.layers[layer].ffn, t)?;
    Ok(out)
}

/// Applies one transform per layer.
pub fn apply_all(params: &ModelParams, transforms: &[LayerTransform]) -> Result<ModelParams> {
    if transforms.len() != params.layers.len() {
        return Err(Error::Shape(format!(
            "{} transforms for {} layers",
            transforms.len(),
            params.layers.len()
        )));
    }
    let mut out = params.clone();
    for (layer, t) in out.layers.iter_mut().zip(transforms) {
        layer.ffn = transform_ffn(&layer.ffn, t)?;
    }
    Ok(out)
}

/// Relative change of the full-precision cross-entropy on `calib` caused by
/// rotating the hidden pairs of `layer` by `angles`.
pub fn rotation_deviation(
    params: &ModelParams,
    layer: usize,
    angles: &[f64],
    calib: &[Vec<u32>],
) -> Result<f64> {
    check_layer(params, layer)?;
    if angles.iter().all(|&a| a == 0.0) {
        return Ok(0.0);
    }
    let base = cross_entropy(params, calib)?;
    let mut rotated = params.clone();
    rotated.layers[layer].ffn = apply_rotation(&params.layers[layer].ffn, angles)?;
    let ce = cross_entropy(&rotated, calib)?;
    Ok(((ce - base) / base).abs())
}

/// Container tensors `layers.{i}.transform.{pi,s,phi}`.
pub fn transform_tensors(transforms: &[LayerTransform]) -> Vec<Tensor> {
    let mut out = Vec::with_capacity(3 * transforms.len());
    for (i, t) in transforms.iter().enumerate() {
        out.push(Tensor {
            name: format!("layers.{i}.transform.pi"),
            dims: vec![t.perm.len() as u32],
            data: TensorData::Codes {
                bits: 32,
                values: t.perm.iter().map(|&p| p as u32).collect(),
            },
        });
        out.push(Tensor::from_vector(format!("layers.{i}.transform.s"), &t.scales));
        out.push(Tensor::from_vector(format!("layers.{i}.transform.phi"), &t.angles));
    }
    out
}

/// Reads the per-layer transforms back, if the checkpoint carries them.
pub fn read_transforms(ckpt: &Checkpoint) -> Result<Option<Vec<LayerTransform>>> {
    if ckpt.get("layers.0.transform.pi").is_none() {
        return Ok(None);
    }
    let c = ckpt.meta.config;
    (0..c.layers)
        .map(|i| {
            let (_, perm) = ckpt.require(&format!("layers.{i}.transform.pi"))?.codes()?;
            let t = LayerTransform {
                perm: perm.iter().map(|&p| p as usize).collect(),
                scales: ckpt.require(&format!("layers.{i}.transform.s"))?.float_values()?,
                angles: ckpt.require(&format!("layers.{i}.transform.phi"))?.float_values()?,
            };
            t.validate(c.d_ff)?;
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ffn_block, forward, Init, ModelConfig};
    use crate::numerics::{relative_difference, Matrix, RandomSource};
    use rand::seq::SliceRandom;

    fn random_ffn(seed: u64, d: usize, f: usize) -> FfnParams {
        let mut rng = RandomSource::new(seed);
        let mut m = |r, c| {
            Matrix::from_vec(r, c, (0..r * c).map(|_| rng.standard_normal()).collect()).unwrap()
        };
        let w_up = m(f, d);
        let w_down = m(d, f);
        let b = m(1, f + d).into_data();
        FfnParams {
            w_up,
            b_up: b[..f].to_vec(),
            w_down,
            b_down: b[f..].to_vec(),
        }
    }

    fn eval(ffn: &FfnParams, x: &Matrix) -> Matrix {
        ffn_block(x, &ffn.w_up, &ffn.b_up, &ffn.w_down, &ffn.b_down).unwrap()
    }

    fn input(seed: u64, d: usize) -> Matrix {
        let mut rng = RandomSource::new(seed);
        Matrix::from_vec(6, d, (0..6 * d).map(|_| rng.standard_normal()).collect()).unwrap()
    }

    fn max_diff(a: &Matrix, b: &Matrix) -> f64 {
        crate::quant::max_abs_error(a, b)
    }

    #[test]
    fn permutation_examples() {
        let ffn = random_ffn(1, 3, 6);
        assert_eq!(apply_permutation(&ffn, &[0, 1, 2, 3, 4, 5]).unwrap(), ffn);

        let two = random_ffn(2, 3, 2);
        let swapped = apply_permutation(&two, &[1, 0]).unwrap();
        assert_eq!(swapped.w_up.row(0), two.w_up.row(1));
        assert_eq!(swapped.w_up.row(1), two.w_up.row(0));
        assert_eq!(swapped.b_up, vec![two.b_up[1], two.b_up[0]]);
        assert_eq!(swapped.w_down.get(2, 0), two.w_down.get(2, 1));

        let mut rng = RandomSource::new(3);
        let x = input(4, 3);
        for _ in 0..10 {
            let mut perm: Vec<usize> = (0..6).collect();
            perm.shuffle(&mut rng);
            let p = apply_permutation(&ffn, &perm).unwrap();
            assert!(relative_difference(&eval(&p, &x), &eval(&ffn, &x)).unwrap() <= 1e-10);
        }
        assert!(matches!(
            apply_permutation(&ffn, &[0, 0, 1, 2, 3, 4]),
            Err(Error::Domain(_))
        ));
        assert!(apply_permutation(&ffn, &[0, 1]).is_err());
    }

    #[test]
    fn scaling_examples() {
        let ffn = random_ffn(5, 4, 8);
        assert_eq!(apply_scaling(&ffn, &[1.0; 8]).unwrap(), ffn);

        let doubled = apply_scaling(&ffn, &[2.0; 8]).unwrap();
        assert_eq!(doubled.w_up, ffn.w_up.scale(2.0));
        assert_eq!(doubled.w_down, ffn.w_down.scale(0.5));

        let mut rng = RandomSource::new(6);
        let x = input(7, 4);
        for _ in 0..10 {
            let s: Vec<f64> = (0..8).map(|_| 0.5 + 1.5 * rng.uniform()).collect();
            let scaled = apply_scaling(&ffn, &s).unwrap();
            assert!(relative_difference(&eval(&scaled, &x), &eval(&ffn, &x)).unwrap() <= 1e-10);
        }
        let mut bad = vec![1.0; 8];
        bad[3] = -0.5;
        assert!(matches!(apply_scaling(&ffn, &bad), Err(Error::Domain(_))));
        bad[3] = 0.0;
        assert!(matches!(apply_scaling(&ffn, &bad), Err(Error::Domain(_))));
    }

    #[test]
    fn rotation_examples() {
        let ffn = random_ffn(8, 3, 4);
        assert_eq!(apply_rotation(&ffn, &[0.0, 0.0]).unwrap(), ffn);

        let two = random_ffn(9, 3, 2);
        let r = apply_rotation(&two, &[std::f64::consts::FRAC_PI_2]).unwrap();
        for c in 0..3 {
            assert!((r.w_up.get(0, c) + two.w_up.get(1, c)).abs() < 1e-15);
            assert!((r.w_up.get(1, c) - two.w_up.get(0, c)).abs() < 1e-15);
        }

        let phi = [0.3, -1.1];
        let back = apply_rotation(&apply_rotation(&ffn, &phi).unwrap(), &[-0.3, 1.1]).unwrap();
        assert!(max_diff(&back.w_up, &ffn.w_up) < 1e-12);
        assert!(max_diff(&back.w_down, &ffn.w_down) < 1e-12);
        assert!(apply_rotation(&ffn, &[0.1]).is_err());
    }

    #[test]
    fn rotation_preserves_linear_part() {
        // without the nonlinearity W_down Rᵀ R W_up = W_down W_up
        let ffn = random_ffn(10, 3, 6);
        let r = apply_rotation(&ffn, &[0.4, -0.2, 1.3]).unwrap();
        let a = crate::numerics::matmul(&ffn.w_down, &ffn.w_up).unwrap();
        let b = crate::numerics::matmul(&r.w_down, &r.w_up).unwrap();
        assert!(max_diff(&a, &b) < 1e-12);
    }

    fn random_transform(seed: u64, d_ff: usize, angle: f64) -> LayerTransform {
        let mut rng = RandomSource::new(seed);
        let mut perm: Vec<usize> = (0..d_ff).collect();
        perm.shuffle(&mut rng);
        LayerTransform {
            perm,
            scales: (0..d_ff).map(|_| 0.5 + 1.5 * rng.uniform()).collect(),
            angles: (0..d_ff / 2).map(|_| angle * (2.0 * rng.uniform() - 1.0)).collect(),
        }
    }

    #[test]
    fn combined_equals_sequential() {
        let ffn = random_ffn(11, 4, 8);
        let t = random_transform(12, 8, 0.5);
        let combined = transform_ffn(&ffn, &t).unwrap();
        let seq = apply_permutation(
            &apply_scaling(&apply_rotation(&ffn, &t.angles).unwrap(), &t.scales).unwrap(),
            &t.perm,
        )
        .unwrap();
        assert!(max_diff(&combined.w_up, &seq.w_up) <= 1e-12);
        assert!(max_diff(&combined.w_down, &seq.w_down) <= 1e-12);
    }

    #[test]
    fn inverse_restores_parameters() {
        let ffn = random_ffn(13, 4, 8);
        for seed in 0..5 {
            let t = random_transform(seed, 8, 0.7);
            let back = untransform_ffn(&transform_ffn(&ffn, &t).unwrap(), &t).unwrap();
            assert!(max_diff(&back.w_up, &ffn.w_up) <= 1e-10);
            assert!(max_diff(&back.w_down, &ffn.w_down) <= 1e-10);
            assert!(back
                .b_up
                .iter()
                .zip(&ffn.b_up)
                .all(|(a, b)| (a - b).abs() <= 1e-10));
        }
    }

    fn toy() -> ModelParams {
        let config = ModelConfig {
            layers: 2,
            d_model: 16,
            d_ff: 32,
            vocab: 20,
            heads: 2,
            context: 32,
        };
        ModelParams::random(config, 21, Init::FanIn).unwrap()
    }

    fn seqs() -> Vec<Vec<u32>> {
        let mut rng = RandomSource::new(22);
        (0..3).map(|_| (0..20).map(|_| rng.below(20) as u32).collect()).collect()
    }

    #[test]
    fn model_level_transform() {
        let p = toy();
        let id = LayerTransform::identity(32);
        assert!(id.is_identity());
        assert_eq!(apply_transformation(&p, 1, &id).unwrap(), p);

        let t = LayerTransform {
            angles: vec![0.0; 16],
            ..random_transform(23, 32, 0.0)
        };
        let q = apply_transformation(&p, 0, &t).unwrap();
        assert_eq!(q.layers[1], p.layers[1]);
        let a = forward(&p, &seqs(), &[]).unwrap();
        let b = forward(&q, &seqs(), &[]).unwrap();
        for (x, y) in b.logits.iter().zip(&a.logits) {
            assert!(relative_difference(x, y).unwrap() <= 1e-8);
        }
        assert!(apply_transformation(&p, 2, &t).is_err());
        let restored = undo_transformation(&q, 0, &t).unwrap();
        assert!(max_diff(&restored.layers[0].ffn.w_down, &p.layers[0].ffn.w_down) < 1e-10);
    }

    #[test]
    fn rotation_deviation_behaviour() {
        let p = toy();
        let calib = seqs();
        assert_eq!(rotation_deviation(&p, 0, &[0.0; 16], &calib).unwrap(), 0.0);
        let mut rng = RandomSource::new(30);
        let base: Vec<f64> = (0..16).map(|_| 2.0 * rng.uniform() - 1.0).collect();
        let mut prev = 0.0;
        for k in [1e-4, 2e-4, 4e-4, 8e-4] {
            let phi: Vec<f64> = base.iter().map(|a| a * k).collect();
            let d = rotation_deviation(&p, 0, &phi, &calib).unwrap();
            assert!(d >= prev, "deviation not monotone at scale {k}");
            assert!(d <= 1e-3);
            prev = d;
        }
    }

    #[test]
    fn transforms_serialize() {
        let ts = vec![random_transform(1, 8, 0.1), LayerTransform::identity(8)];
        let mut ckpt = Checkpoint::new(crate::checkpoint::Metadata {
            config: ModelConfig {
                layers: 2,
                d_model: 4,
                d_ff: 8,
                vocab: 5,
                heads: 1,
                context: 4,
            },
            quant: None,
        });
        for t in transform_tensors(&ts) {
            ckpt.push(t);
        }
        let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
        let read = read_transforms(&back).unwrap().unwrap();
        assert_eq!(read[0].perm, ts[0].perm);
        assert_eq!(read[1], ts[1]);
        for (a, b) in read[0].scales.iter().zip(&ts[0].scales) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }
}
