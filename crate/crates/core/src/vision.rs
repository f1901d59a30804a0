//! Frozen multiscale feature extractor and the token projector that feeds
//! its coarsest level to the backbone.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::rng::{stream, xavier_uniform};
use crate::nn::{scoped, HasParams, Mlp, MlpCache, Parameter, Real, Tensor};
use crate::raster::Image;

/// One pyramid level: `height × width` cells of `channels` features, stored
/// row-major as a `(height·width) × channels` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid<T: Real = f32> {
    pub height: usize,
    pub width: usize,
    pub features: Tensor<T>,
}

impl<T: Real> FeatureGrid<T> {
    pub fn channels(&self) -> usize {
        self.features.cols()
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Mean feature vector over all cells.
    pub fn spatial_mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.channels()];
        for i in 0..self.cells() {
            for (acc, v) in m.iter_mut().zip(self.features.row(i)) {
                *acc += v.as_f64();
            }
        }
        m.iter_mut().for_each(|v| *v /= self.cells() as f64);
        m
    }

    pub fn cast<U: Real>(&self) -> FeatureGrid<U> {
        FeatureGrid {
            height: self.height,
            width: self.width,
            features: self.features.cast(),
        }
    }
}

/// Dyadic feature pyramid, finest level first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T: Real = f32> {
    pub levels: Vec<FeatureGrid<T>>,
}

impl<T: Real> FeaturePyramid<T> {
    pub fn coarsest(&self) -> &FeatureGrid<T> {
        self.levels.last().expect("pyramid has at least one level")
    }

    pub fn cast<U: Real>(&self) -> FeaturePyramid<U> {
        FeaturePyramid {
            levels: self.levels.iter().map(FeatureGrid::cast).collect(),
        }
    }
}

/// 2×2 average pooling of a grid.
fn avg_pool2<T: Real>(g: &FeatureGrid<T>) -> FeatureGrid<T> {
    let (h, w, d) = (g.height / 2, g.width / 2, g.channels());
    let mut out = Tensor::zeros(&[h * w, d]);
    let quarter = T::lit(0.25);
    for y in 0..h {
        for x in 0..w {
            let dst = out.row_mut(y * w + x);
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let src = g.features.row((2 * y + dy) * g.width + 2 * x + dx);
                for (o, &s) in dst.iter_mut().zip(src) {
                    *o += s * quarter;
                }
            }
        }
    }
    FeatureGrid {
        height: h,
        width: w,
        features: out,
    }
}

/// Frozen seeded projections producing the pyramid, plus the MLP mapping
/// coarsest-level cells to backbone tokens.
#[derive(Clone, Debug)]
pub struct VisionStub<T: Real = f32> {
    patch: usize,
    /// `D_1 × (patch²·3)`, bias-free.
    pub patch_proj: Parameter<T>,
    /// `D_{i+1} × D_i`, bias-free.
    pub level_projs: Vec<Parameter<T>>,
    pub projector: Mlp<T>,
}

impl<T: Real> VisionStub<T> {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let dims = &cfg.level_dims;
        let mut rng = stream(cfg.seed, "vision.patch_proj");
        let patch_proj = Parameter::frozen(xavier_uniform(dims[0], cfg.patch * cfg.patch * 3, &mut rng));
        let level_projs = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let mut rng = stream(cfg.seed, &format!("vision.level_proj.{i}"));
                Parameter::frozen(xavier_uniform(w[1], w[0], &mut rng))
            })
            .collect();
        let mut rng = stream(cfg.seed, "vision.projector");
        let mut projector = Mlp::new(dims[dims.len() - 1], cfg.d_model, cfg.d_model, &mut rng);
        projector.set_trainable(false);
        Ok(Self {
            patch: cfg.patch,
            patch_proj,
            level_projs,
            projector,
        })
    }

    pub fn levels(&self) -> usize {
        self.level_projs.len() + 1
    }

    pub fn extract_pyramid(&self, image: &Image) -> Result<FeaturePyramid<T>> {
        let unit = self.patch << (self.levels() - 1);
        let (w, h) = (image.width(), image.height());
        if w % unit != 0 || h % unit != 0 {
            return Err(Error::Config(format!(
                "image {w}×{h} is not divisible by patch·2^(L−1) = {unit}"
            )));
        }
        let p = self.patch;
        let (gh, gw) = (h / p, w / p);
        let mut patches = Tensor::zeros(&[gh * gw, p * p * 3]);
        let scale = T::lit(1.0 / 255.0);
        for gy in 0..gh {
            for gx in 0..gw {
                let row = patches.row_mut(gy * gw + gx);
                for dy in 0..p {
                    for dx in 0..p {
                        let px = image.get(gx * p + dx, gy * p + dy);
                        for c in 0..3 {
                            row[(dy * p + dx) * 3 + c] = T::lit(px[c] as f64) * scale;
                        }
                    }
                }
            }
        }
        let mut levels = vec![FeatureGrid {
            height: gh,
            width: gw,
            features: crate::nn::matmul_nt(&patches, &self.patch_proj.value)?,
        }];
        for proj in &self.level_projs {
            let pooled = avg_pool2(levels.last().unwrap());
            let features = crate::nn::matmul_nt(&pooled.features, &proj.value)?;
            levels.push(FeatureGrid { features, ..pooled });
        }
        Ok(FeaturePyramid { levels })
    }

    /// Coarsest level flattened row-major and projected to backbone width.
    pub fn visual_tokens(&self, pyramid: &FeaturePyramid<T>) -> Result<(Tensor<T>, MlpCache<T>)> {
        self.projector.forward(&pyramid.coarsest().features)
    }

    /// Returns the gradient with respect to the coarsest-level features.
    pub fn visual_tokens_backward(&mut self, cache: &MlpCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        self.projector.backward(cache, dy)
    }
}

impl<T: Real> HasParams<T> for VisionStub<T> {
    fn params(&self) -> Vec<(String, &Parameter<T>)> {
        let mut out = vec![("patch_proj".to_string(), &self.patch_proj)];
        for (i, p) in self.level_projs.iter().enumerate() {
            out.push((format!("level_proj.{i}"), p));
        }
        out.extend(scoped("projector", self.projector.params()));
        out
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Parameter<T>)> {
        let mut out = vec![("patch_proj".to_string(), &mut self.patch_proj)];
        for (i, p) in self.level_projs.iter_mut().enumerate() {
            out.push((format!("level_proj.{i}"), p));
        }
        out.extend(scoped("projector", self.projector.params_mut()));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_image(seed: u64, size: usize) -> Image {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..size * size * 3).map(|_| rng.random()).collect();
        Image::from_raw(size, size, data).unwrap()
    }

    #[test]
    fn default_pyramid_shapes() {
        let stub = VisionStub::<f32>::new(&ModelConfig::default()).unwrap();
        let pyr = stub.extract_pyramid(&random_image(1, 64)).unwrap();
        let shapes: Vec<_> = pyr.levels.iter().map(|l| (l.height, l.width, l.channels())).collect();
        assert_eq!(shapes, vec![(16, 16, 32), (8, 8, 32), (4, 4, 32)]);
        let (tokens, _) = stub.visual_tokens(&pyr).unwrap();
        assert_eq!(tokens.shape(), &[16, 64]);
    }

    #[test]
    fn zero_image_gives_zero_pyramid_and_tokens() {
        let stub = VisionStub::<f32>::new(&ModelConfig::default()).unwrap();
        let pyr = stub.extract_pyramid(&Image::new(64, 64)).unwrap();
        assert!(pyr.levels.iter().all(|l| l.features.data().iter().all(|&v| v == 0.0)));
        let (tokens, _) = stub.visual_tokens(&pyr).unwrap();
        assert!(tokens.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn extraction_is_deterministic() {
        let img = random_image(3, 64);
        let a = VisionStub::<f32>::new(&ModelConfig::default()).unwrap();
        let b = VisionStub::<f32>::new(&ModelConfig::default()).unwrap();
        assert_eq!(a.extract_pyramid(&img).unwrap(), b.extract_pyramid(&img).unwrap());
    }

    #[test]
    fn indivisible_image_is_config_error() {
        let stub = VisionStub::<f32>::new(&ModelConfig::default()).unwrap();
        assert!(matches!(stub.extract_pyramid(&Image::new(60, 64)), Err(Error::Config(_))));
    }

    #[test]
    fn pooling_conserves_projected_mean() {
        let stub = VisionStub::<f64>::new(&ModelConfig::default()).unwrap();
        let pyr = stub.extract_pyramid(&random_image(9, 64)).unwrap();
        for (i, proj) in stub.level_projs.iter().enumerate() {
            let fine = pyr.levels[i].spatial_mean();
            let coarse = pyr.levels[i + 1].spatial_mean();
            let (rows, cols) = proj.value.dims2().unwrap();
            for r in 0..rows {
                let expect: f64 = (0..cols).map(|c| proj.value.row(r)[c] * fine[c]).sum();
                assert!((coarse[r] - expect).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn stub_is_frozen() {
        let stub = VisionStub::<f32>::new(&ModelConfig::default()).unwrap();
        assert!(stub.params().iter().all(|(_, p)| !p.trainable));
    }
}
