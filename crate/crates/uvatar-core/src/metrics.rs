//! Reconstruction-quality metrics: masked L1, single-scale SSIM, multiscale
//! SSIM and its dissimilarity form, and a perceptual distance over a
//! pluggable feature extractor.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("image shapes differ: {a:?} vs {b:?}")]
    ShapeMismatch { a: (usize, usize), b: (usize, usize) },
    #[error("image {size:?} too small for window {window} at {scales} scales; reduce the scale count via SsimParams::scale_weights")]
    ImageTooSmall { size: (usize, usize), window: usize, scales: usize },
    #[error("invalid parameters: {reason}")]
    BadParams { reason: String },
    #[error("feature extractor produced mismatched shapes at layer {layer}")]
    LayerMismatch { layer: usize },
    #[error("mask length {mask} does not match image size {size}")]
    MaskMismatch { mask: usize, size: usize },
}

/// Single-channel image with values conventionally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl FloatImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    /// ITU-R BT.601 luminance of 8-bit RGB pixels, scaled to [0, 1].
    pub fn luminance_of_rgb8(pixels: &[[u8; 3]], width: usize, height: usize) -> Self {
        let data = pixels
            .iter()
            .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0)
            .collect();
        Self { width, height, data }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

/// SSIM / MS-SSIM parameters. The five default scale weights are the
/// standard multiscale calibration; they must sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub window_sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
    pub scale_weights: Vec<f64>,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            window_sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
            scale_weights: vec![0.0448, 0.2856, 0.3001, 0.2363, 0.1333],
        }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.window % 2 == 0 || self.window == 0 {
            return Err(MetricsError::BadParams { reason: format!("window must be odd, got {}", self.window) });
        }
        let sum: f64 = self.scale_weights.iter().sum();
        // The standard five-scale calibration sums to 1.0001, so the unit-sum
        // check carries a matching slack.
        if (sum - 1.0).abs() > 2e-4 {
            return Err(MetricsError::BadParams { reason: format!("scale weights sum to {sum}, expected 1") });
        }
        if self.scale_weights.is_empty() {
            return Err(MetricsError::BadParams { reason: "at least one scale weight required".into() });
        }
        Ok(())
    }

    fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }
}

fn check_shapes(a: &FloatImage, b: &FloatImage) -> Result<(), MetricsError> {
    if a.shape() != b.shape() {
        return Err(MetricsError::ShapeMismatch { a: a.shape(), b: b.shape() });
    }
    Ok(())
}

/// Mean absolute difference, restricted to masked texels when a mask is
/// given (true = include).
pub fn l1(a: &FloatImage, b: &FloatImage, mask: Option<&[bool]>) -> Result<f64, MetricsError> {
    check_shapes(a, b)?;
    match mask {
        None => {
            let sum: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum();
            Ok(sum / a.data.len() as f64)
        }
        Some(m) => {
            if m.len() != a.data.len() {
                return Err(MetricsError::MaskMismatch { mask: m.len(), size: a.data.len() });
            }
            let mut sum = 0.0;
            let mut n = 0usize;
            for i in 0..m.len() {
                if m[i] {
                    sum += (a.data[i] - b.data[i]).abs();
                    n += 1;
                }
            }
            Ok(if n == 0 { 0.0 } else { sum / n as f64 })
        }
    }
}

fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let half = (window / 2) as f64;
    let mut k: Vec<f64> = (0..window)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable valid-mode convolution with a symmetric 1D kernel.
fn filter_valid(img: &FloatImage, kernel: &[f64]) -> FloatImage {
    let w = kernel.len();
    let ow = img.width + 1 - w;
    let oh = img.height + 1 - w;
    // Horizontal pass.
    let mut tmp = vec![0.0; ow * img.height];
    for y in 0..img.height {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                acc += k * img.data[y * img.width + x + i];
            }
            tmp[y * ow + x] = acc;
        }
    }
    // Vertical pass.
    let mut out = FloatImage::new(ow, oh);
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                acc += k * tmp[(y + i) * ow + x];
            }
            out.data[y * ow + x] = acc;
        }
    }
    out
}

struct SsimMoments {
    luminance_mean: f64,
    cs_mean: f64,
    ssim_mean: f64,
}

fn ssim_moments(x: &FloatImage, y: &FloatImage, params: &SsimParams) -> Result<SsimMoments, MetricsError> {
    if x.width < params.window || x.height < params.window {
        return Err(MetricsError::ImageTooSmall {
            size: x.shape(),
            window: params.window,
            scales: 1,
        });
    }
    let kernel = gaussian_kernel(params.window, params.window_sigma);
    let mu_x = filter_valid(x, &kernel);
    let mu_y = filter_valid(y, &kernel);
    let xx = FloatImage { width: x.width, height: x.height, data: x.data.iter().map(|v| v * v).collect() };
    let yy = FloatImage { width: y.width, height: y.height, data: y.data.iter().map(|v| v * v).collect() };
    let xy = FloatImage {
        width: x.width,
        height: x.height,
        data: x.data.iter().zip(&y.data).map(|(a, b)| a * b).collect(),
    };
    let e_xx = filter_valid(&xx, &kernel);
    let e_yy = filter_valid(&yy, &kernel);
    let e_xy = filter_valid(&xy, &kernel);

    let c1 = params.c1();
    let c2 = params.c2();
    let n = mu_x.data.len() as f64;
    let mut lum = 0.0;
    let mut cs = 0.0;
    let mut ssim = 0.0;
    for i in 0..mu_x.data.len() {
        let mx = mu_x.data[i];
        let my = mu_y.data[i];
        let vx = e_xx.data[i] - mx * mx;
        let vy = e_yy.data[i] - my * my;
        let cov = e_xy.data[i] - mx * my;
        let l = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
        let c = (2.0 * cov + c2) / (vx + vy + c2);
        lum += l;
        cs += c;
        ssim += l * c;
    }
    Ok(SsimMoments { luminance_mean: lum / n, cs_mean: cs / n, ssim_mean: ssim / n })
}

/// Mean local structural similarity with Gaussian windows.
pub fn ssim(x: &FloatImage, y: &FloatImage, params: &SsimParams) -> Result<f64, MetricsError> {
    params.validate()?;
    check_shapes(x, y)?;
    Ok(ssim_moments(x, y, params)?.ssim_mean)
}

/// 2x2 mean-pool downsampling; odd trailing rows/columns are dropped.
pub fn mean_pool_2x2(img: &FloatImage) -> FloatImage {
    let ow = img.width / 2;
    let oh = img.height / 2;
    let mut out = FloatImage::new(ow, oh);
    for y in 0..oh {
        for x in 0..ow {
            let i = 2 * y * img.width + 2 * x;
            out.data[y * ow + x] =
                0.25 * (img.data[i] + img.data[i + 1] + img.data[i + img.width] + img.data[i + img.width + 1]);
        }
    }
    out
}

/// Multiscale SSIM: contrast/structure at every scale, luminance only at the
/// coarsest, combined with the per-scale weight exponents. Negative
/// contrast/structure means clamp to zero before exponentiation.
pub fn msssim(x: &FloatImage, y: &FloatImage, params: &SsimParams) -> Result<f64, MetricsError> {
    params.validate()?;
    check_shapes(x, y)?;
    let scales = params.scale_weights.len();
    let min_dim = x.width.min(x.height);
    if min_dim < params.window << (scales - 1) {
        return Err(MetricsError::ImageTooSmall { size: x.shape(), window: params.window, scales });
    }
    let mut cur_x = x.clone();
    let mut cur_y = y.clone();
    let mut result = 1.0;
    for (scale, &weight) in params.scale_weights.iter().enumerate() {
        let m = ssim_moments(&cur_x, &cur_y, params)?;
        result *= m.cs_mean.max(0.0).powf(weight);
        if scale + 1 == scales {
            result *= m.luminance_mean.max(0.0).powf(weight);
        } else {
            cur_x = mean_pool_2x2(&cur_x);
            cur_y = mean_pool_2x2(&cur_y);
        }
    }
    Ok(result)
}

/// Structural dissimilarity (1 - MS-SSIM) / 2.
pub fn dssim(x: &FloatImage, y: &FloatImage, params: &SsimParams) -> Result<f64, MetricsError> {
    Ok((1.0 - msssim(x, y, params)?) / 2.0)
}

/// Deterministic image->feature-grids contract standing in for a pretrained
/// convolutional backbone.
pub trait FeatureExtractor {
    fn layers(&self, img: &FloatImage) -> Vec<FloatImage>;
}

/// Default extractor: a mean-pool pyramid of the image itself.
#[derive(Debug, Clone)]
pub struct PyramidExtractor {
    pub levels: usize,
}

impl Default for PyramidExtractor {
    fn default() -> Self {
        Self { levels: 4 }
    }
}

impl FeatureExtractor for PyramidExtractor {
    fn layers(&self, img: &FloatImage) -> Vec<FloatImage> {
        let mut out = Vec::with_capacity(self.levels);
        let mut cur = img.clone();
        for level in 0..self.levels {
            out.push(cur.clone());
            if level + 1 < self.levels {
                cur = mean_pool_2x2(&cur);
            }
        }
        out
    }
}

/// Layer-averaged mean absolute feature difference.
pub fn perceptual_distance(
    x: &FloatImage,
    y: &FloatImage,
    extractor: &dyn FeatureExtractor,
) -> Result<f64, MetricsError> {
    check_shapes(x, y)?;
    let fx = extractor.layers(x);
    let fy = extractor.layers(y);
    if fx.len() != fy.len() {
        return Err(MetricsError::LayerMismatch { layer: fx.len().min(fy.len()) });
    }
    let mut total = 0.0;
    for (layer, (a, b)) in fx.iter().zip(&fy).enumerate() {
        if a.shape() != b.shape() {
            return Err(MetricsError::LayerMismatch { layer });
        }
        total += l1(a, b, None)?;
    }
    Ok(total / fx.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> FloatImage {
        FloatImage { width: w, height: h, data: (0..w * h).map(|_| rng.gen_range(0.0..1.0)).collect() }
    }

    #[test]
    fn l1_trivials() {
        let x = FloatImage::from_fn(8, 8, |a, b| (a + b) as f64 / 16.0);
        assert_eq!(l1(&x, &x, None).unwrap(), 0.0);
        let zero = FloatImage::new(8, 8);
        let one = FloatImage { width: 8, height: 8, data: vec![1.0; 64] };
        assert_eq!(l1(&zero, &one, None).unwrap(), 1.0);
    }

    #[test]
    fn l1_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let a = random_image(&mut rng, 13, 7);
        let b = random_image(&mut rng, 13, 7);
        let want: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / 91.0;
        assert!((l1(&a, &b, None).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn l1_triangle_inequality() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..20 {
            let a = random_image(&mut rng, 9, 9);
            let b = random_image(&mut rng, 9, 9);
            let c = random_image(&mut rng, 9, 9);
            let ab = l1(&a, &b, None).unwrap();
            let bc = l1(&b, &c, None).unwrap();
            let ac = l1(&a, &c, None).unwrap();
            assert!(ac <= ab + bc + 1e-12);
        }
    }

    #[test]
    fn l1_masked_mean() {
        let a = FloatImage { width: 2, height: 2, data: vec![0.0, 0.0, 0.0, 0.0] };
        let b = FloatImage { width: 2, height: 2, data: vec![1.0, 0.5, 0.25, 0.125] };
        let mask = vec![true, false, false, true];
        assert!((l1(&a, &b, Some(&mask)).unwrap() - (1.0 + 0.125) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn ssim_self_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let x = random_image(&mut rng, 32, 32);
        assert!((ssim(&x, &x, &SsimParams::default()).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_checkerboard_inverse_is_negative_and_matches_naive_oracle() {
        let x = FloatImage::from_fn(24, 24, |a, b| ((a + b) % 2) as f64);
        let y = FloatImage::from_fn(24, 24, |a, b| 1.0 - ((a + b) % 2) as f64);
        let params = SsimParams::default();
        let got = ssim(&x, &y, &params).unwrap();
        assert!(got < 0.0, "ssim {got}");

        // Naive windowed-statistics oracle: direct double loop per window.
        let k = gaussian_kernel(params.window, params.window_sigma);
        let ow = 24 - 11 + 1;
        let mut acc = 0.0;
        for wy in 0..ow {
            for wx in 0..ow {
                let mut mx = 0.0;
                let mut my = 0.0;
                let mut sxx = 0.0;
                let mut syy = 0.0;
                let mut sxy = 0.0;
                for dy in 0..11 {
                    for dx in 0..11 {
                        let w = k[dy] * k[dx];
                        let a = x.data[(wy + dy) * 24 + wx + dx];
                        let b = y.data[(wy + dy) * 24 + wx + dx];
                        mx += w * a;
                        my += w * b;
                        sxx += w * a * a;
                        syy += w * b * b;
                        sxy += w * a * b;
                    }
                }
                let vx = sxx - mx * mx;
                let vy = syy - my * my;
                let cov = sxy - mx * my;
                let c1 = params.c1();
                let c2 = params.c2();
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
        let want = acc / (ow * ow) as f64;
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn ssim_tiny_noise_stays_high() {
        let x = FloatImage { width: 16, height: 16, data: vec![0.5; 256] };
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let y = FloatImage {
            width: 16,
            height: 16,
            data: x.data.iter().map(|v| v + rng.gen_range(-1e-4..1e-4)).collect(),
        };
        assert!(ssim(&x, &y, &SsimParams::default()).unwrap() > 0.99);
    }

    #[test]
    fn msssim_self_is_one_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let x = random_image(&mut rng, 176, 176);
        let y = random_image(&mut rng, 176, 176);
        let p = SsimParams::default();
        assert!((msssim(&x, &x, &p).unwrap() - 1.0).abs() < 1e-9);
        let xy = msssim(&x, &y, &p).unwrap();
        let yx = msssim(&y, &x, &p).unwrap();
        assert!((xy - yx).abs() < 1e-9);
    }

    #[test]
    fn msssim_too_small_image_advises_fewer_scales() {
        let x = FloatImage::new(64, 64);
        let err = msssim(&x, &x, &SsimParams::default()).unwrap_err();
        assert!(err.to_string().contains("reduce the scale count"));
        // Three scales fit into 64 pixels.
        let p = SsimParams { scale_weights: vec![0.25, 0.25, 0.5], ..Default::default() };
        assert!(msssim(&x, &x, &p).is_ok());
    }

    #[test]
    fn downsample_chain_matches_direct_pooling() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let x = random_image(&mut rng, 176, 176);
        let twice = mean_pool_2x2(&mean_pool_2x2(&x));
        // Direct 4x4 mean pool.
        let mut direct = FloatImage::new(44, 44);
        for y in 0..44 {
            for x4 in 0..44 {
                let mut acc = 0.0;
                for dy in 0..4 {
                    for dx in 0..4 {
                        acc += x.data[(4 * y + dy) * 176 + 4 * x4 + dx];
                    }
                }
                direct.data[y * 44 + x4] = acc / 16.0;
            }
        }
        for i in 0..direct.data.len() {
            assert!((twice.data[i] - direct.data[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn dssim_trivials() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let x = random_image(&mut rng, 176, 176);
        let y = random_image(&mut rng, 176, 176);
        let p = SsimParams::default();
        assert_eq!(dssim(&x, &x, &p).unwrap(), 0.0);
        let ms = msssim(&x, &y, &p).unwrap();
        let ds = dssim(&x, &y, &p).unwrap();
        assert!((ds - (1.0 - ms) / 2.0).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&ds));
    }

    #[test]
    fn perceptual_zero_on_equal_and_constant_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let x = random_image(&mut rng, 32, 32);
        let ex = PyramidExtractor::default();
        assert_eq!(perceptual_distance(&x, &x, &ex).unwrap(), 0.0);
        let c = 0.125;
        let y = FloatImage { width: 32, height: 32, data: x.data.iter().map(|v| v + c).collect() };
        assert!((perceptual_distance(&x, &y, &ex).unwrap() - c).abs() < 1e-12);
    }

    #[test]
    fn perceptual_matches_per_level_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        let x = random_image(&mut rng, 40, 40);
        let y = random_image(&mut rng, 40, 40);
        let ex = PyramidExtractor::default();
        let lx = ex.layers(&x);
        let ly = ex.layers(&y);
        let mut want = 0.0;
        for (a, b) in lx.iter().zip(&ly) {
            let s: f64 = a.data.iter().zip(&b.data).map(|(p, q)| (p - q).abs()).sum();
            want += s / a.data.len() as f64;
        }
        want /= lx.len() as f64;
        assert!((perceptual_distance(&x, &y, &ex).unwrap() - want).abs() < 1e-12);
    }
}
