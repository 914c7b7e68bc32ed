//! Nucleus detection by difference of Gaussians and nucleus-centred
//! patch cropping.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NucleusDetection {
    pub row: f64,
    pub col: f64,
    /// Geometric mean of the two blur scales; the blob scale the detector
    /// is tuned to.
    pub scale: f64,
    pub response: f64,
}

/// Crops stacked as `[K, 3, size, size]`, with `kept[k]` the index of the
/// centre that produced crop `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Patches {
    pub patches: Tensor<f32>,
    pub kept: Vec<usize>,
}

/// Normalized 1-D Gaussian taps on `[-r, r]` with `r = ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidSigma(format!("sigma must be positive, got {sigma}")));
    }
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r).map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp()).collect();
    let total: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / total).collect())
}

/// Symmetric reflection `… c b a | a b c … | … c b a`, valid for any
/// offset.
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

fn blur_plane(src: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as i64;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &g)| g * src[y * w + reflect(x as i64 + k as i64 - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &g)| g * tmp[reflect(y as i64 + k as i64 - r, h) * w + x])
                .sum();
        }
    }
    out
}

fn plane_dims(image: &Tensor<f32>, op: &'static str) -> Result<(usize, usize)> {
    match image.shape() {
        &[1, h, w] if h > 0 && w > 0 => Ok((h, w)),
        s => Err(Error::ShapeMismatch { op, detail: format!("expected [1, H, W], got {s:?}") }),
    }
}

/// Separable Gaussian blur with reflected borders.
pub fn gaussian_blur(image: &Tensor<f32>, sigma: f64) -> Result<Tensor<f32>> {
    let (h, w) = plane_dims(image, "gaussian_blur")?;
    let kernel = gaussian_kernel(sigma)?;
    let src: Vec<f64> = image.data().iter().map(|&v| v as f64).collect();
    let out = blur_plane(&src, h, w, &kernel);
    Tensor::new(&[1, h, w], out.into_iter().map(|v| v as f32).collect())
}

/// Strict 8-neighbourhood maxima of `blur(σ1) − blur(σ2)` above
/// `threshold`, strongest first.
pub fn dog_detect(
    image: &Tensor<f32>,
    sigma1: f64,
    sigma2: f64,
    threshold: f64,
) -> Result<Vec<NucleusDetection>> {
    let (h, w) = plane_dims(image, "dog_detect")?;
    if !(sigma1 > 0.0 && sigma1 < sigma2) {
        return Err(Error::InvalidSigma(format!("need 0 < sigma1 < sigma2, got {sigma1} and {sigma2}")));
    }
    let src: Vec<f64> = image.data().iter().map(|&v| v as f64).collect();
    let narrow = blur_plane(&src, h, w, &gaussian_kernel(sigma1)?);
    let wide = blur_plane(&src, h, w, &gaussian_kernel(sigma2)?);
    let dog: Vec<f64> = narrow.iter().zip(&wide).map(|(a, b)| a - b).collect();

    let mut found = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = dog[y * w + x];
            if v <= threshold {
                continue;
            }
            let mut is_max = true;
            'nbr: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if (dy, dx) == (0, 0) || ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    if dog[ny as usize * w + nx as usize] >= v {
                        is_max = false;
                        break 'nbr;
                    }
                }
            }
            if is_max {
                found.push(NucleusDetection {
                    row: y as f64,
                    col: x as f64,
                    scale: (sigma1 * sigma2).sqrt(),
                    response: v,
                });
            }
        }
    }
    found.sort_by(|a, b| b.response.total_cmp(&a.response));
    Ok(found)
}

/// Square crops of side `size` centred on the rounded centres. A crop
/// covers rows `r − size/2 .. r + size/2`; centres whose window leaves the
/// image are dropped.
pub fn crop_patches(image: &Tensor<f32>, centers: &[(f64, f64)], size: usize) -> Result<Patches> {
    let (c, h, w) = match image.shape() {
        &[c, h, w] if c == 3 => (c, h, w),
        s => {
            return Err(Error::ShapeMismatch {
                op: "crop_patches",
                detail: format!("expected [3, H, W], got {s:?}"),
            })
        }
    };
    if size == 0 || size % 2 != 0 || size > h || size > w {
        return Err(Error::InvalidHyperparameter {
            op: "crop_patches",
            detail: format!("size must be even, positive and fit in {h}x{w}, got {size}"),
        });
    }
    let half = (size / 2) as i64;
    let src = image.data();
    let mut data = Vec::new();
    let mut kept = Vec::new();
    for (k, &(row, col)) in centers.iter().enumerate() {
        let (r, q) = (row.round() as i64, col.round() as i64);
        let (top, left) = (r - half, q - half);
        if top < 0 || left < 0 || r + half > h as i64 || q + half > w as i64 {
            continue;
        }
        let (top, left) = (top as usize, left as usize);
        for ch in 0..c {
            for y in top..top + size {
                let start = ch * h * w + y * w + left;
                data.extend_from_slice(&src[start..start + size]);
            }
        }
        kept.push(k);
    }
    Ok(Patches { patches: Tensor::new(&[kept.len(), c, size, size], data)?, kept })
}

/// Detection settings for [`extract_cells`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectParams {
    pub sigma1: f64,
    pub sigma2: f64,
    pub threshold: f64,
}

/// Detects nuclei on the first channel of a `[3, H, W]` field and crops a
/// patch around each.
pub fn extract_cells(field: &Tensor<f32>, params: DetectParams, size: usize) -> Result<Patches> {
    let s = field.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::ShapeMismatch {
            op: "extract_cells",
            detail: format!("expected [3, H, W], got {s:?}"),
        });
    }
    let plane = s[1] * s[2];
    let nuclei = Tensor::new(&[1, s[1], s[2]], field.data()[..plane].to_vec())?;
    let centers: Vec<(f64, f64)> = dog_detect(&nuclei, params.sigma1, params.sigma2, params.threshold)?
        .iter()
        .map(|d| (d.row, d.col))
        .collect();
    crop_patches(field, &centers, size)
}

/// Unit-peak isotropic Gaussian blob; shared by tests and the acceptance
/// harness.
pub fn render_blob(h: usize, w: usize, blobs: &[(f64, f64)], sigma: f64) -> Tensor<f32> {
    let mut data = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let v: f64 = blobs
                .iter()
                .map(|&(r, c)| {
                    let d2 = (y as f64 - r).powi(2) + (x as f64 - c).powi(2);
                    (-0.5 * d2 / (sigma * sigma)).exp()
                })
                .sum();
            data[y * w + x] = v as f32;
        }
    }
    Tensor::new(&[1, h, w], data).expect("shape product")
}
