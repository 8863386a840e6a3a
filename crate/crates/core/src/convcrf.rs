//! Windowed mean-field CRF over an upsampled probability map.
//!
//! Pairwise potentials combine an appearance kernel (position and colour)
//! with a smoothness kernel (position only); messages are restricted to a
//! square window around each pixel.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::heatmap::ProbMap;
use crate::numeric::softmax_into;
use crate::tensor_io::RasterImage;

/// Largest pixel × window weight table kept in memory (f64 entries).
const WEIGHT_CACHE_LIMIT: usize = 1 << 24;

/// Pairwise Gaussian kernel over a fixed square window.
struct PairKernel<'a> {
    height: usize,
    width: usize,
    radius: isize,
    side: usize,
    colors: &'a [[f64; 3]],
    w_app: f64,
    inv_beta: f64,
    /// Per window offset: spatial part of the appearance kernel.
    app_spatial: Vec<f64>,
    /// Per window offset: weighted smoothness kernel.
    smooth: Vec<f64>,
}

impl<'a> PairKernel<'a> {
    fn new(cfg: &CrfConfig, height: usize, width: usize, colors: &'a [[f64; 3]]) -> Self {
        let radius = (cfg.kernel_size / 2) as isize;
        let side = cfg.kernel_size;
        let inv_alpha = 1.0 / (2.0 * cfg.theta_alpha * cfg.theta_alpha);
        let inv_gamma = 1.0 / (2.0 * cfg.theta_gamma * cfg.theta_gamma);
        let mut app_spatial = Vec::with_capacity(side * side);
        let mut smooth = Vec::with_capacity(side * side);
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let d2 = (dy * dy + dx * dx) as f64;
                app_spatial.push((-d2 * inv_alpha).exp());
                smooth.push(cfg.w_smooth * (-d2 * inv_gamma).exp());
            }
        }
        Self {
            height,
            width,
            radius,
            side,
            colors,
            w_app: cfg.w_app,
            inv_beta: 1.0 / (2.0 * cfg.theta_beta * cfg.theta_beta),
            app_spatial,
            smooth,
        }
    }

    /// Pixel index of window offset `o` around pixel `i`; only valid for
    /// offsets that fall inside the image.
    fn neighbour(&self, i: usize, o: usize) -> usize {
        let y = (i / self.width) as isize + (o / self.side) as isize - self.radius;
        let x = (i % self.width) as isize + (o % self.side) as isize - self.radius;
        y as usize * self.width + x as usize
    }

    /// Writes k(i, j) for every window offset; zero for the centre and for
    /// offsets outside the image.
    fn fill_weights(&self, i: usize, row: &mut [f64]) {
        let y = (i / self.width) as isize;
        let x = (i % self.width) as isize;
        let centre = self.side * self.side / 2;
        for (o, slot) in row.iter_mut().enumerate() {
            let yy = y + (o / self.side) as isize - self.radius;
            let xx = x + (o % self.side) as isize - self.radius;
            if o == centre
                || yy < 0
                || xx < 0
                || yy >= self.height as isize
                || xx >= self.width as isize
            {
                *slot = 0.0;
                continue;
            }
            let j = yy as usize * self.width + xx as usize;
            let c2: f64 = self.colors[i]
                .iter()
                .zip(&self.colors[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            *slot = self.w_app * self.app_spatial[o] * (-c2 * self.inv_beta).exp() + self.smooth[o];
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CrfError {
    #[error("bad upsampling target {target_h}x{target_w} for a {src_h}x{src_w} map")]
    BadTarget {
        src_h: usize,
        src_w: usize,
        target_h: usize,
        target_w: usize,
    },
    #[error("dimension mismatch: probabilities {prob_h}x{prob_w}, image {image_h}x{image_w}")]
    DimMismatch {
        prob_h: usize,
        prob_w: usize,
        image_h: usize,
        image_w: usize,
    },
    #[error("invalid CRF configuration: {0}")]
    BadConfig(String),
    #[error("non-finite value in mean-field iteration {0}")]
    NonFiniteIntermediate(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrfConfig {
    pub kernel_size: usize,
    pub iterations: usize,
    pub w_app: f64,
    pub w_smooth: f64,
    pub theta_alpha: f64,
    pub theta_beta: f64,
    pub theta_gamma: f64,
    pub compat_weight: f64,
    pub normalize_kernel: bool,
}

impl Default for CrfConfig {
    fn default() -> Self {
        Self {
            kernel_size: 15,
            iterations: 20,
            w_app: 1.0,
            w_smooth: 0.5,
            theta_alpha: 7.5,
            theta_beta: 0.1,
            theta_gamma: 3.0,
            compat_weight: 1.0,
            normalize_kernel: true,
        }
    }
}

impl CrfConfig {
    pub fn validate(&self) -> Result<(), CrfError> {
        if self.kernel_size < 3 || self.kernel_size.is_multiple_of(2) {
            return Err(CrfError::BadConfig(format!(
                "kernel_size must be odd and >= 3, got {}",
                self.kernel_size
            )));
        }
        for (name, theta) in [
            ("theta_alpha", self.theta_alpha),
            ("theta_beta", self.theta_beta),
            ("theta_gamma", self.theta_gamma),
        ] {
            if !(theta > 0.0 && theta.is_finite()) {
                return Err(CrfError::BadConfig(format!(
                    "{name} must be > 0, got {theta}"
                )));
            }
        }
        for (name, w) in [
            ("w_app", self.w_app),
            ("w_smooth", self.w_smooth),
            ("compat_weight", self.compat_weight),
        ] {
            if !w.is_finite() {
                return Err(CrfError::BadConfig(format!("{name} must be finite")));
            }
        }
        Ok(())
    }
}

/// Channelwise bilinear resize with half-pixel centres (no corner
/// alignment), each pixel renormalized onto the simplex.
pub fn upsample_bilinear(
    prob: &ProbMap,
    target_h: usize,
    target_w: usize,
) -> Result<ProbMap, CrfError> {
    let (src_h, src_w) = (prob.height(), prob.width());
    if target_h < src_h || target_w < src_w {
        return Err(CrfError::BadTarget {
            src_h,
            src_w,
            target_h,
            target_w,
        });
    }
    let axis = |dst: usize, src: usize| -> Vec<(usize, usize, f64)> {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|i| {
                let x = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
                let lo = (x.floor() as usize).min(src - 1);
                let hi = (lo + 1).min(src - 1);
                (lo, hi, x - lo as f64)
            })
            .collect()
    };
    let rows = axis(target_h, src_h);
    let cols = axis(target_w, src_w);
    let n = prob.n_classes();
    let plane = target_h * target_w;
    let mut values = vec![0.0; n * plane];
    for c in 0..n {
        let src = prob.plane(c);
        let at = |r: usize, col: usize| src[r * src_w + col];
        for (y, &(r0, r1, fy)) in rows.iter().enumerate() {
            for (x, &(c0, c1, fx)) in cols.iter().enumerate() {
                let top = at(r0, c0) * (1.0 - fx) + at(r0, c1) * fx;
                let bottom = at(r1, c0) * (1.0 - fx) + at(r1, c1) * fx;
                values[c * plane + y * target_w + x] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    for i in 0..plane {
        let total: f64 = (0..n).map(|c| values[c * plane + i]).sum();
        for c in 0..n {
            values[c * plane + i] /= total;
        }
    }
    Ok(ProbMap::from_values_unchecked(
        n, target_h, target_w, values,
    ))
}

/// Mean-field refinement of `prob` guided by the colours of `image`.
pub fn crf_refine(
    prob: &ProbMap,
    image: &RasterImage,
    cfg: &CrfConfig,
) -> Result<ProbMap, CrfError> {
    refine(prob, image, cfg, WEIGHT_CACHE_LIMIT)
}

fn refine(
    prob: &ProbMap,
    image: &RasterImage,
    cfg: &CrfConfig,
    cache_limit: usize,
) -> Result<ProbMap, CrfError> {
    cfg.validate()?;
    let (h, w, n) = (prob.height(), prob.width(), prob.n_classes());
    if image.height != h || image.width != w {
        return Err(CrfError::DimMismatch {
            prob_h: h,
            prob_w: w,
            image_h: image.height,
            image_w: image.width,
        });
    }
    let plane = h * w;
    // Pixel-major unaries: unary[i * n + c].
    let mut unary = vec![0.0; plane * n];
    for c in 0..n {
        for (i, &p) in prob.plane(c).iter().enumerate() {
            unary[i * n + c] = (p + 1e-8).ln();
        }
    }
    let mut q = vec![0.0; plane * n];
    for i in 0..plane {
        softmax_into(&unary[i * n..(i + 1) * n], &mut q[i * n..(i + 1) * n]);
    }

    let colors: Vec<[f64; 3]> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .map(|(y, x)| image.unit_rgb(y, x))
        .collect();
    let kernel = PairKernel::new(cfg, h, w, &colors);
    let window = cfg.kernel_size * cfg.kernel_size;
    // Cache the pairwise weights when they fit in a modest buffer.
    let cached: Option<Vec<f64>> = (plane * window <= cache_limit).then(|| {
        let mut weights = vec![0.0; plane * window];
        weights
            .par_chunks_mut(window)
            .enumerate()
            .for_each(|(i, row)| kernel.fill_weights(i, row));
        weights
    });
    let mass: Vec<f64> = (0..plane)
        .into_par_iter()
        .map(|i| match &cached {
            Some(weights) => weights[i * window..(i + 1) * window].iter().sum(),
            None => {
                let mut row = vec![0.0; window];
                kernel.fill_weights(i, &mut row);
                row.iter().sum()
            }
        })
        .collect();

    let mut next = vec![0.0; plane * n];
    for iteration in 0..cfg.iterations {
        next.par_chunks_mut(n).enumerate().for_each_init(
            || (vec![0.0; window], vec![0.0; n], vec![0.0; n]),
            |(scratch, message, logits), (i, out)| {
                let weights = match &cached {
                    Some(all) => &all[i * window..(i + 1) * window],
                    None => {
                        kernel.fill_weights(i, scratch);
                        &scratch[..]
                    }
                };
                message.iter_mut().for_each(|m| *m = 0.0);
                for (o, &k) in weights.iter().enumerate() {
                    if k == 0.0 {
                        continue;
                    }
                    let j = kernel.neighbour(i, o);
                    for (m, &qj) in message.iter_mut().zip(&q[j * n..(j + 1) * n]) {
                        *m += k * qj;
                    }
                }
                let norm = if cfg.normalize_kernel && mass[i] > 0.0 {
                    mass[i]
                } else {
                    1.0
                };
                for c in 0..n {
                    logits[c] = unary[i * n + c] + cfg.compat_weight * message[c] / norm;
                }
                softmax_into(logits, out);
            },
        );
        if next.iter().any(|v| !v.is_finite()) {
            return Err(CrfError::NonFiniteIntermediate(iteration));
        }
        std::mem::swap(&mut q, &mut next);
    }

    let mut values = vec![0.0; plane * n];
    for i in 0..plane {
        for c in 0..n {
            values[c * plane + i] = q[i * n + c];
        }
    }
    Ok(ProbMap::from_values_unchecked(n, h, w, values))
}
