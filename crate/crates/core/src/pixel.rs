//! Mask-weighted multiscale pooling into pixel-aware tokens.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::rng::stream;
use crate::nn::{scoped, HasParams, Linear, Mlp, MlpCache, Parameter, Real, Tensor};
use crate::raster::Mask;
use crate::vision::{FeatureGrid, FeaturePyramid};

/// Total mask weight at or below which pooling is refused.
pub const MASK_EPS: f64 = 1e-6;

/// Area-average of `mask/255` over each cell of a `height × width` grid.
pub fn downsample_mask<T: Real>(mask: &Mask, height: usize, width: usize) -> Result<Vec<T>> {
    let (mw, mh) = (mask.width(), mask.height());
    if height == 0 || width == 0 || mh % height != 0 || mw % width != 0 {
        return Err(Error::Config(format!(
            "mask {mw}×{mh} cannot be area-pooled to {width}×{height}"
        )));
    }
    let (sy, sx) = (mh / height, mw / width);
    let mut out = vec![T::zero(); height * width];
    for y in 0..mh {
        for x in 0..mw {
            if mask.get(x, y) {
                out[(y / sy) * width + x / sx] += T::one();
            }
        }
    }
    let area = T::lit((sx * sy) as f64);
    out.iter_mut().for_each(|v| *v /= area);
    Ok(out)
}

/// Weighted mean of the grid's cell features.
pub fn mask_pool<T: Real>(grid: &FeatureGrid<T>, weights: &[T]) -> Result<Vec<T>> {
    if weights.len() != grid.cells() {
        return Err(Error::Dimension(format!(
            "{} weights for a grid of {} cells",
            weights.len(),
            grid.cells()
        )));
    }
    let total: T = weights.iter().copied().sum();
    if total.as_f64() <= MASK_EPS {
        return Err(Error::EmptyMask {
            total: total.as_f64(),
            eps: MASK_EPS,
        });
    }
    let mut out = vec![T::zero(); grid.channels()];
    for (i, &w) in weights.iter().enumerate() {
        if w != T::zero() {
            for (o, &f) in out.iter_mut().zip(grid.features.row(i)) {
                *o += w * f;
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= total);
    Ok(out)
}

/// Per-level projections Γ into backbone width followed by an MLP that emits
/// `pixel_tokens · d_model` values.
#[derive(Clone, Debug)]
pub struct PixelEncoder<T: Real = f32> {
    pub gammas: Vec<Linear<T>>,
    pub mlp: Mlp<T>,
    pixel_tokens: usize,
    d_model: usize,
}

#[derive(Clone, Debug)]
pub struct PixelCache<T: Real> {
    weights: Vec<Vec<T>>,
    totals: Vec<T>,
    pooled: Vec<Tensor<T>>,
    mlp: MlpCache<T>,
}

impl<T: Real> PixelEncoder<T> {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let gammas = cfg
            .level_dims
            .iter()
            .enumerate()
            .map(|(i, &d)| Linear::new(d, cfg.d_model, &mut stream(cfg.seed, &format!("pixel.gamma.{i}"))))
            .collect();
        let mlp = Mlp::new(
            cfg.d_model,
            cfg.d_model,
            cfg.pixel_tokens * cfg.d_model,
            &mut stream(cfg.seed, "pixel.mlp"),
        );
        Ok(Self {
            gammas,
            mlp,
            pixel_tokens: cfg.pixel_tokens,
            d_model: cfg.d_model,
        })
    }

    /// Soft mask weights at every pyramid level.
    pub fn level_weights(&self, pyramid: &FeaturePyramid<T>, mask: &Mask) -> Result<Vec<Vec<T>>> {
        pyramid
            .levels
            .iter()
            .map(|l| downsample_mask(mask, l.height, l.width))
            .collect()
    }

    pub fn encode(&self, pyramid: &FeaturePyramid<T>, mask: &Mask) -> Result<(Tensor<T>, PixelCache<T>)> {
        self.encode_weighted(pyramid, self.level_weights(pyramid, mask)?)
    }

    /// Same as [`encode`](Self::encode) with precomputed per-level weights.
    pub fn encode_weighted(
        &self,
        pyramid: &FeaturePyramid<T>,
        weights: Vec<Vec<T>>,
    ) -> Result<(Tensor<T>, PixelCache<T>)> {
        if pyramid.levels.len() != self.gammas.len() || weights.len() != self.gammas.len() {
            return Err(Error::Dimension(format!(
                "encoder has {} levels, pyramid {} and weights {}",
                self.gammas.len(),
                pyramid.levels.len(),
                weights.len()
            )));
        }
        let mut sum = Tensor::zeros(&[1, self.d_model]);
        let mut pooled = Vec::with_capacity(weights.len());
        let mut totals = Vec::with_capacity(weights.len());
        for ((level, w), gamma) in pyramid.levels.iter().zip(&weights).zip(&self.gammas) {
            let p = Tensor::from_vec(&[1, level.channels()], mask_pool(level, w)?)?;
            sum.add_assign(&gamma.forward(&p)?)?;
            totals.push(w.iter().copied().sum());
            pooled.push(p);
        }
        let (out, mlp) = self.mlp.forward(&sum)?;
        let out = out.reshape(&[self.pixel_tokens, self.d_model])?;
        Ok((
            out,
            PixelCache {
                weights,
                totals,
                pooled,
                mlp,
            },
        ))
    }

    /// Accumulates parameter gradients and returns the gradient with
    /// respect to each pyramid level's features.
    pub fn backward(&mut self, cache: &PixelCache<T>, dy: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let dy = dy.clone().reshape(&[1, self.pixel_tokens * self.d_model])?;
        let dsum = self.mlp.backward(&cache.mlp, &dy);
        let mut dfeatures = Vec::with_capacity(self.gammas.len());
        for (i, gamma) in self.gammas.iter_mut().enumerate() {
            let dp = gamma.backward(&cache.pooled[i], &dsum);
            let w = &cache.weights[i];
            let d = dp.len();
            let mut df = Tensor::zeros(&[w.len(), d]);
            for (cell, &wc) in w.iter().enumerate() {
                if wc != T::zero() {
                    let s = wc / cache.totals[i];
                    for (o, &g) in df.row_mut(cell).iter_mut().zip(dp.data()) {
                        *o = s * g;
                    }
                }
            }
            dfeatures.push(df);
        }
        Ok(dfeatures)
    }
}

impl<T: Real> HasParams<T> for PixelEncoder<T> {
    fn params(&self) -> Vec<(String, &Parameter<T>)> {
        let mut out = Vec::new();
        for (i, g) in self.gammas.iter().enumerate() {
            out.extend(scoped(&format!("gamma.{i}"), g.params()));
        }
        out.extend(scoped("mlp", self.mlp.params()));
        out
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Parameter<T>)> {
        let mut out = Vec::new();
        for (i, g) in self.gammas.iter_mut().enumerate() {
            out.extend(scoped(&format!("gamma.{i}"), g.params_mut()));
        }
        out.extend(scoped("mlp", self.mlp.params_mut()));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::rng::uniform;
    use crate::raster::Image;
    use crate::vision::VisionStub;
    use proptest::prelude::*;

    fn grid(h: usize, w: usize, d: usize, data: Vec<f64>) -> FeatureGrid<f64> {
        FeatureGrid {
            height: h,
            width: w,
            features: Tensor::from_vec(&[h * w, d], data).unwrap(),
        }
    }

    #[test]
    fn full_and_empty_masks() {
        let full: Vec<f32> = downsample_mask(&Mask::full(8, 8), 4, 4).unwrap();
        assert!(full.iter().all(|&v| v == 1.0));
        let empty: Vec<f32> = downsample_mask(&Mask::empty(8, 8), 4, 4).unwrap();
        assert!(empty.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quadrant_mask_downsamples_to_one_cell() {
        let m = Mask::from_fn(4, 4, |x, y| x < 2 && y < 2);
        assert_eq!(downsample_mask::<f32>(&m, 2, 2).unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_divisible_target_is_config_error() {
        assert!(matches!(
            downsample_mask::<f32>(&Mask::full(10, 10), 3, 3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn weighted_mean_forced_value() {
        let g = grid(2, 2, 1, vec![1.0, 3.0, 5.0, 7.0]);
        let pooled = mask_pool(&g, &[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(pooled, vec![3.0]);
    }

    #[test]
    fn constant_map_and_single_cell() {
        let g = grid(2, 2, 2, vec![4.0; 8]);
        assert_eq!(mask_pool(&g, &[0.0, 0.3, 0.9, 0.0]).unwrap(), vec![4.0, 4.0]);
        let g = grid(2, 2, 2, (0..8).map(f64::from).collect());
        assert_eq!(mask_pool(&g, &[0.0, 0.0, 1.0, 0.0]).unwrap(), vec![4.0, 5.0]);
    }

    #[test]
    fn empty_weights_are_refused() {
        let g = grid(1, 2, 1, vec![1.0, 2.0]);
        assert!(matches!(mask_pool(&g, &[0.0, 0.0]), Err(Error::EmptyMask { .. })));
        assert!(matches!(mask_pool(&g, &[1e-7, 0.0]), Err(Error::EmptyMask { .. })));
    }

    #[test]
    fn default_output_shape_and_zero_features() {
        let cfg = ModelConfig::default();
        let stub = VisionStub::<f32>::new(&cfg).unwrap();
        let enc = PixelEncoder::<f32>::new(&cfg).unwrap();
        let pyr = stub.extract_pyramid(&Image::new(64, 64)).unwrap();
        let mask = Mask::from_fn(64, 64, |x, y| x > 20 && y > 30);
        let (out, _) = enc.encode(&pyr, &mask).unwrap();
        assert_eq!(out.shape(), &[4, 64]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_scaling_does_not_change_output() {
        let cfg = ModelConfig::tiny();
        let enc = PixelEncoder::<f64>::new(&cfg).unwrap();
        let mut rng = stream(5, "scale");
        let pyr = FeaturePyramid {
            levels: (0..3)
                .map(|i| {
                    let s = cfg.grid_side(i);
                    let d = cfg.level_dims[i];
                    grid(s, s, d, uniform(&[s * s * d], 1.0, &mut rng).into_vec())
                })
                .collect(),
        };
        let mask = Mask::from_fn(16, 16, |x, y| (x + y) % 3 == 0 || x < 5);
        let w = enc.level_weights(&pyr, &mask).unwrap();
        let scaled: Vec<Vec<f64>> = w.iter().map(|l| l.iter().map(|v| v * 3.7).collect()).collect();
        let (a, _) = enc.encode_weighted(&pyr, w).unwrap();
        let (b, _) = enc.encode_weighted(&pyr, scaled).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-6);
    }

    proptest! {
        #[test]
        fn pooling_matches_double_loop(
            h in 1usize..5, w in 1usize..5, d in 1usize..4,
            seed in any::<u64>(),
        ) {
            let mut rng = stream(seed, "pool");
            let feats = uniform::<f64, _>(&[h * w * d], 10.0, &mut rng).into_vec();
            let mut weights = uniform::<f64, _>(&[h * w], 1.0, &mut rng).into_vec();
            weights.iter_mut().for_each(|v| *v = v.abs());
            weights[0] += 0.01;
            let g = grid(h, w, d, feats.clone());
            let pooled = mask_pool(&g, &weights).unwrap();
            for c in 0..d {
                let (mut num, mut den) = (0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        num += weights[y * w + x] * feats[(y * w + x) * d + c];
                        den += weights[y * w + x];
                    }
                }
                prop_assert!((pooled[c] - num / den).abs() <= 1e-6);
            }
        }

        #[test]
        fn cells_outside_support_do_not_matter(seed in any::<u64>(), swap in 0usize..8) {
            let mut rng = stream(seed, "locality");
            let mut feats = uniform::<f64, _>(&[16 * 2], 1.0, &mut rng).into_vec();
            let weights: Vec<f64> = (0..16).map(|i| if i < 8 { 0.5 } else { 0.0 }).collect();
            let before = mask_pool(&grid(4, 4, 2, feats.clone()), &weights).unwrap();
            // Permute the unmasked half by rotating it.
            feats[16..].rotate_left(2 * swap);
            let after = mask_pool(&grid(4, 4, 2, feats), &weights).unwrap();
            prop_assert_eq!(before, after);
        }
    }
}
