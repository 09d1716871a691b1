use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    normalize_backward, normalize_features, Aggregator, FeatureMap, ScoreMaps,
};
use crate::raster::Raster;
use crate::scalar::Scalar;

/// Feature-grid stride of the toy featurizer (two 2× poolings).
pub const STRIDE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub classes: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub feature_dim: usize,
    pub aggregator: Aggregator,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            hidden1: 12,
            hidden2: 24,
            feature_dim: 32,
            aggregator: Aggregator::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.hidden1 == 0 || self.hidden2 == 0 || self.feature_dim == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        Ok(())
    }

    fn layout(&self) -> Layout {
        let sizes = [
            self.hidden1 * 3 * 9,
            self.hidden1,
            self.hidden2 * self.hidden1 * 9,
            self.hidden2,
            self.feature_dim * self.hidden2,
            self.feature_dim,
            (self.classes + 1) * self.feature_dim,
            self.classes + 1,
        ];
        let mut offsets = [0usize; 9];
        for (i, s) in sizes.iter().enumerate() {
            offsets[i + 1] = offsets[i] + s;
        }
        Layout { offsets }
    }

    pub fn num_params(&self) -> usize {
        self.layout().offsets[8]
    }
}

#[derive(Clone, Copy, Debug)]
struct Layout {
    offsets: [usize; 9],
}

/// Parameter tensors in their flat order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tensor {
    Conv1W,
    Conv1B,
    Conv2W,
    Conv2B,
    ProjW,
    ProjB,
    HeadW,
    HeadB,
}

impl Layout {
    fn range(&self, t: Tensor) -> std::ops::Range<usize> {
        let i = t as usize;
        self.offsets[i]..self.offsets[i + 1]
    }
}

/// conv3×3 → ReLU → avgpool2 → conv3×3 → ReLU → avgpool2 → 1×1 projection
/// → unit normalization, then a linear 1×1 head to C + 1 scores.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel<T> {
    pub config: ModelConfig,
    pub params: Vec<T>,
}

/// Intermediate activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    width: usize,
    height: usize,
    input: Vec<T>,
    z1: Vec<T>,
    p1: Vec<T>,
    z2: Vec<T>,
    p2: Vec<T>,
    pub raw: FeatureMap<T>,
    pub features: FeatureMap<T>,
    pub maps: ScoreMaps<T>,
}

impl<T: Scalar> ToyModel<T> {
    /// Filters uniform in ±sqrt(6 / fan_in), projection bias likewise, head
    /// zero so that initial class scores are uniform.
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let mut params = vec![T::zero(); config.num_params()];
        let fans = [
            (Tensor::Conv1W, 27),
            (Tensor::Conv2W, config.hidden1 * 9),
            (Tensor::ProjW, config.hidden2),
            (Tensor::ProjB, config.hidden2),
        ];
        for (t, fan_in) in fans {
            let bound = (6.0 / fan_in as f64).sqrt();
            for p in &mut params[layout.range(t)] {
                *p = T::lit(rng.gen_range(-bound..bound));
            }
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<T>) -> Result<Self> {
        config.validate()?;
        if params.len() != config.num_params() {
            return Err(Error::Dimension(format!(
                "model expects {} parameters, got {}",
                config.num_params(),
                params.len()
            )));
        }
        Ok(Self { config, params })
    }

    pub fn tensor(&self, t: Tensor) -> &[T] {
        &self.params[self.config.layout().range(t)]
    }

    pub fn tensor_mut(&mut self, t: Tensor) -> &mut [T] {
        let r = self.config.layout().range(t);
        &mut self.params[r]
    }

    pub fn grid_size(&self, width: usize, height: usize) -> (usize, usize) {
        (width / STRIDE, height / STRIDE)
    }

    /// Linear head applied to one descriptor.
    pub fn head_scores(&self, descriptor: &[T]) -> Vec<T> {
        let k = self.config.feature_dim;
        let w = self.tensor(Tensor::HeadW);
        let b = self.tensor(Tensor::HeadB);
        (0..=self.config.classes)
            .map(|c| {
                let row = &w[c * k..(c + 1) * k];
                b[c] + row.iter().zip(descriptor).map(|(&a, &d)| a * d).sum::<T>()
            })
            .collect()
    }

    pub fn forward(&self, image: &Raster<T>) -> Result<(FeatureMap<T>, ScoreMaps<T>)> {
        let cache = self.forward_cached(image)?;
        Ok((cache.features, cache.maps))
    }

    pub fn features(&self, image: &Raster<T>) -> Result<FeatureMap<T>> {
        Ok(self.forward_cached(image)?.features)
    }

    pub fn forward_cached(&self, image: &Raster<T>) -> Result<ForwardCache<T>> {
        let (w, h) = (image.width, image.height);
        if w == 0 || h == 0 || w % STRIDE != 0 || h % STRIDE != 0 {
            return Err(Error::Dimension(format!(
                "image {w}x{h} is not divisible by the grid stride {STRIDE}"
            )));
        }
        let cfg = &self.config;
        let half = T::lit(0.5);
        let input: Vec<T> = image.data.iter().map(|&v| v - half).collect();

        let z1 = conv3x3(&input, 3, w, h, self.tensor(Tensor::Conv1W), self.tensor(Tensor::Conv1B), cfg.hidden1);
        let a1: Vec<T> = z1.iter().map(|&v| v.max(T::zero())).collect();
        let p1 = avgpool2(&a1, cfg.hidden1, w, h);
        let (w2, h2) = (w / 2, h / 2);
        let z2 = conv3x3(&p1, cfg.hidden1, w2, h2, self.tensor(Tensor::Conv2W), self.tensor(Tensor::Conv2B), cfg.hidden2);
        let a2: Vec<T> = z2.iter().map(|&v| v.max(T::zero())).collect();
        let p2 = avgpool2(&a2, cfg.hidden2, w2, h2);
        let (gw, gh) = (w / STRIDE, h / STRIDE);

        // 1×1 projection straight into pixel-major layout
        let k = cfg.feature_dim;
        let pw = self.tensor(Tensor::ProjW);
        let pb = self.tensor(Tensor::ProjB);
        let npix = gw * gh;
        let mut raw = vec![T::zero(); npix * k];
        for pix in 0..npix {
            let out = &mut raw[pix * k..(pix + 1) * k];
            out.copy_from_slice(pb);
            for j in 0..cfg.hidden2 {
                let v = p2[j * npix + pix];
                if v == T::zero() {
                    continue;
                }
                for (o, row) in out.iter_mut().zip(pw.chunks_exact(cfg.hidden2)) {
                    *o += row[j] * v;
                }
            }
        }
        let raw = FeatureMap::new(k, gh, gw, raw)?;
        let features = normalize_features(&raw)?;

        let kc = cfg.classes + 1;
        let mut scores = Vec::with_capacity(npix * kc);
        for f in features.pixels() {
            scores.extend(self.head_scores(f));
        }
        let maps = ScoreMaps::from_scores(scores, cfg.classes, gh, gw, &cfg.aggregator)?;
        Ok(ForwardCache {
            width: w,
            height: h,
            input,
            z1,
            p1,
            z2,
            p2,
            raw,
            features,
            maps,
        })
    }

    /// Parameter gradient given ∂L/∂scores (pixel-major, C + 1 channels) and
    /// optionally ∂L/∂features (pixel-major, unit-normalized descriptors).
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        grad_scores: &[T],
        grad_features: Option<&[T]>,
    ) -> Vec<T> {
        let cfg = &self.config;
        let layout = cfg.layout();
        let mut grad = vec![T::zero(); self.params.len()];
        let (w, h) = (cache.width, cache.height);
        let (w2, h2) = (w / 2, h / 2);
        let (gw, gh) = (w / STRIDE, h / STRIDE);
        let npix = gw * gh;
        let k = cfg.feature_dim;
        let kc = cfg.classes + 1;

        // head
        let head_w = self.tensor(Tensor::HeadW);
        let mut df = match grad_features {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); npix * k],
        };
        {
            let r_w = layout.range(Tensor::HeadW);
            let r_b = layout.range(Tensor::HeadB);
            for pix in 0..npix {
                let f = &cache.features.data[pix * k..(pix + 1) * k];
                let gs = &grad_scores[pix * kc..(pix + 1) * kc];
                for c in 0..kc {
                    let g = gs[c];
                    if g == T::zero() {
                        continue;
                    }
                    grad[r_b.start + c] += g;
                    let gw_row = &mut grad[r_w.start + c * k..r_w.start + (c + 1) * k];
                    for (gwv, &fv) in gw_row.iter_mut().zip(f) {
                        *gwv += g * fv;
                    }
                    let hw_row = &head_w[c * k..(c + 1) * k];
                    for (d, &wv) in df[pix * k..(pix + 1) * k].iter_mut().zip(hw_row) {
                        *d += g * wv;
                    }
                }
            }
        }

        // normalization
        let dv = normalize_backward(&cache.raw, &cache.features, &df);

        // projection
        let pw = self.tensor(Tensor::ProjW);
        let mut dp2 = vec![T::zero(); cfg.hidden2 * npix];
        {
            let r_w = layout.range(Tensor::ProjW);
            let r_b = layout.range(Tensor::ProjB);
            for pix in 0..npix {
                let g = &dv[pix * k..(pix + 1) * k];
                for o in 0..k {
                    let go = g[o];
                    grad[r_b.start + o] += go;
                    let row = &pw[o * cfg.hidden2..(o + 1) * cfg.hidden2];
                    let grow = &mut grad[r_w.start + o * cfg.hidden2..r_w.start + (o + 1) * cfg.hidden2];
                    for j in 0..cfg.hidden2 {
                        grow[j] += go * cache.p2[j * npix + pix];
                        dp2[j * npix + pix] += go * row[j];
                    }
                }
            }
        }

        // pool2, relu2, conv2
        let mut dz2 = avgpool2_backward(&dp2, cfg.hidden2, w2, h2);
        for (d, &z) in dz2.iter_mut().zip(&cache.z2) {
            if z <= T::zero() {
                *d = T::zero();
            }
        }
        let (gw2, gb2) = grad.split_at_mut(layout.offsets[3]);
        let dp1 = conv3x3_backward(
            &cache.p1,
            cfg.hidden1,
            w2,
            h2,
            self.tensor(Tensor::Conv2W),
            cfg.hidden2,
            &dz2,
            &mut gw2[layout.offsets[2]..],
            &mut gb2[..cfg.hidden2],
            true,
        );

        // pool1, relu1, conv1
        let mut dz1 = avgpool2_backward(&dp1, cfg.hidden1, w, h);
        for (d, &z) in dz1.iter_mut().zip(&cache.z1) {
            if z <= T::zero() {
                *d = T::zero();
            }
        }
        let (gw1, gb1) = grad.split_at_mut(layout.offsets[1]);
        conv3x3_backward(
            &cache.input,
            3,
            w,
            h,
            self.tensor(Tensor::Conv1W),
            cfg.hidden1,
            &dz1,
            &mut gw1[layout.offsets[0]..],
            &mut gb1[..cfg.hidden1],
            false,
        );
        grad
    }
}

/// Same-size 3×3 convolution with zero padding; channel-major planes.
fn conv3x3<T: Scalar>(
    input: &[T],
    cin: usize,
    w: usize,
    h: usize,
    weight: &[T],
    bias: &[T],
    cout: usize,
) -> Vec<T> {
    let n = w * h;
    let mut out = vec![T::zero(); cout * n];
    for o in 0..cout {
        let plane = &mut out[o * n..(o + 1) * n];
        plane.iter_mut().for_each(|v| *v = bias[o]);
        for i in 0..cin {
            let src = &input[i * n..(i + 1) * n];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = weight[((o * cin + i) * 3 + ky) * 3 + kx];
                    let (x0, x1) = (kx.saturating_sub(1), (w + kx).saturating_sub(1).min(w));
                    for y in 0..h {
                        let sy = y + ky;
                        if sy < 1 || sy > h {
                            continue;
                        }
                        let srow = &src[(sy - 1) * w..sy * w];
                        let drow = &mut plane[y * w..(y + 1) * w];
                        // output x reads input x + kx − 1
                        let (ox0, ox1) = (1usize.saturating_sub(kx), w - kx.saturating_sub(1));
                        debug_assert_eq!(ox1 - ox0, x1 - x0);
                        for (d, &s) in drow[ox0..ox1].iter_mut().zip(&srow[x0..x1]) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients; returns ∂L/∂input when asked.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward<T: Scalar>(
    input: &[T],
    cin: usize,
    w: usize,
    h: usize,
    weight: &[T],
    cout: usize,
    dout: &[T],
    gweight: &mut [T],
    gbias: &mut [T],
    want_input: bool,
) -> Vec<T> {
    let n = w * h;
    let mut din = if want_input { vec![T::zero(); cin * n] } else { Vec::new() };
    for o in 0..cout {
        let dplane = &dout[o * n..(o + 1) * n];
        gbias[o] += dplane.iter().copied().sum::<T>();
        for i in 0..cin {
            let src = &input[i * n..(i + 1) * n];
            for ky in 0..3 {
                for kx in 0..3 {
                    let widx = ((o * cin + i) * 3 + ky) * 3 + kx;
                    let wv = weight[widx];
                    let (x0, x1) = (kx.saturating_sub(1), (w + kx).saturating_sub(1).min(w));
                    let (ox0, ox1) = (1usize.saturating_sub(kx), w - kx.saturating_sub(1));
                    let mut acc = T::zero();
                    for y in 0..h {
                        let sy = y + ky;
                        if sy < 1 || sy > h {
                            continue;
                        }
                        let srow = &src[(sy - 1) * w..sy * w];
                        let drow = &dplane[y * w..(y + 1) * w];
                        for (&d, &s) in drow[ox0..ox1].iter().zip(&srow[x0..x1]) {
                            acc += d * s;
                        }
                        if want_input {
                            let irow = &mut din[i * n + (sy - 1) * w..i * n + sy * w];
                            for (g, &d) in irow[x0..x1].iter_mut().zip(&drow[ox0..ox1]) {
                                *g += wv * d;
                            }
                        }
                    }
                    gweight[widx] += acc;
                }
            }
        }
    }
    din
}

fn avgpool2<T: Scalar>(input: &[T], c: usize, w: usize, h: usize) -> Vec<T> {
    let (wo, ho) = (w / 2, h / 2);
    let quarter = T::lit(0.25);
    let mut out = vec![T::zero(); c * wo * ho];
    for ch in 0..c {
        let src = &input[ch * w * h..(ch + 1) * w * h];
        for y in 0..ho {
            for x in 0..wo {
                let s = src[2 * y * w + 2 * x]
                    + src[2 * y * w + 2 * x + 1]
                    + src[(2 * y + 1) * w + 2 * x]
                    + src[(2 * y + 1) * w + 2 * x + 1];
                out[(ch * ho + y) * wo + x] = s * quarter;
            }
        }
    }
    out
}

/// `w`, `h` are the pre-pooling dimensions.
fn avgpool2_backward<T: Scalar>(dout: &[T], c: usize, w: usize, h: usize) -> Vec<T> {
    let (wo, ho) = (w / 2, h / 2);
    let quarter = T::lit(0.25);
    let mut din = vec![T::zero(); c * w * h];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                din[(ch * h + y) * w + x] = dout[(ch * ho + y / 2) * wo + x / 2] * quarter;
            }
        }
    }
    din
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use crate::rng::rng_from_seed;

    fn small_config() -> ModelConfig {
        ModelConfig {
            classes: 3,
            hidden1: 3,
            hidden2: 4,
            feature_dim: 5,
            aggregator: Aggregator::default(),
        }
    }

    fn random_raster(seed: u64, w: usize, h: usize) -> Raster<f64> {
        let mut rng = rng_from_seed(seed);
        Raster::new(w, h, (0..3 * w * h).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = rng_from_seed(1);
        let (cin, cout, w, h) = (2, 3, 5, 4);
        let input: Vec<f64> = (0..cin * w * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let weight: Vec<f64> = (0..cout * cin * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias: Vec<f64> = (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out = conv3x3(&input, cin, w, h, &weight, &bias, cout);
        for o in 0..cout {
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let mut s = bias[o];
                    for i in 0..cin {
                        for ky in 0..3i64 {
                            for kx in 0..3i64 {
                                let (sx, sy) = (x + kx - 1, y + ky - 1);
                                if sx < 0 || sy < 0 || sx >= w as i64 || sy >= h as i64 {
                                    continue;
                                }
                                s += weight[((o * cin + i) * 3 + ky as usize) * 3 + kx as usize]
                                    * input[(i * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                    let got = out[(o * h + y as usize) * w + x as usize];
                    assert!((got - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_head_gives_uniform_probabilities() {
        let model = ToyModel::<f64>::init(ModelConfig::default(), &mut rng_from_seed(3)).unwrap();
        let (feat, maps) = model.forward(&random_raster(4, 16, 16)).unwrap();
        assert!(feat.normalized);
        assert_eq!((feat.width, feat.height), (4, 4));
        for p in &maps.probs {
            assert!((p - 1.0 / 11.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let model = ToyModel::<f32>::init(ModelConfig::default(), &mut rng_from_seed(3)).unwrap();
        let img = Raster::<f32>::filled(8, 8, [0.1, 0.7, 0.3]);
        let a = model.forward(&img).unwrap();
        let b = model.forward(&img).unwrap();
        assert_eq!(a.0.data, b.0.data);
        assert_eq!(a.1.scores, b.1.scores);
    }

    #[test]
    fn bad_dimensions_are_rejected() {
        let model = ToyModel::<f32>::init(ModelConfig::default(), &mut rng_from_seed(3)).unwrap();
        assert!(model.forward(&Raster::filled(10, 8, [0.0; 3])).is_err());
    }

    #[test]
    fn permuting_head_rows_permutes_scores() {
        let mut rng = rng_from_seed(8);
        let mut model = ToyModel::<f64>::init(small_config(), &mut rng).unwrap();
        for v in model.tensor_mut(Tensor::HeadW) {
            *v = rng.gen_range(-1.0..1.0);
        }
        let img = random_raster(2, 8, 8);
        let (_, base) = model.forward(&img).unwrap();
        let k = model.config.feature_dim;
        let mut swapped = model.clone();
        {
            let w = swapped.tensor_mut(Tensor::HeadW);
            for j in 0..k {
                w.swap(j, k + j);
            }
        }
        let (_, perm) = swapped.forward(&img).unwrap();
        let kc = 4;
        for pix in 0..4 {
            assert_eq!(base.scores[pix * kc], perm.scores[pix * kc + 1]);
            assert_eq!(base.scores[pix * kc + 1], perm.scores[pix * kc]);
            assert_eq!(base.scores[pix * kc + 2], perm.scores[pix * kc + 2]);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = rng_from_seed(11);
        let mut model = ToyModel::<f64>::init(small_config(), &mut rng).unwrap();
        for v in model.tensor_mut(Tensor::HeadW) {
            *v = rng.gen_range(-1.0..1.0);
        }
        let img = random_raster(12, 8, 8);
        let npix = 4;
        let gs: Vec<f64> = (0..npix * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gf: Vec<f64> = (0..npix * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cfg = model.config.clone();
        let f = |p: &[f64]| {
            let m = ToyModel::from_params(cfg.clone(), p.to_vec())?;
            let cache = m.forward_cached(&img)?;
            let v: f64 = cache.maps.scores.iter().zip(&gs).map(|(a, b)| a * b).sum::<f64>()
                + cache.features.data.iter().zip(&gf).map(|(a, b)| a * b).sum::<f64>();
            Ok((v, m.backward(&cache, &gs, Some(&gf))))
        };
        let err = grad_check(f, &model.params, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
