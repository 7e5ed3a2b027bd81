//! Seeded random sampling and the special functions the rest of the crate
//! leans on: normal / Laplace / multivariate-normal draws, normal and
//! Student-t quantiles, the bivariate normal CDF and the latent-correlation
//! solver used to generate correlated binary data.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const SQRT_2PI: f64 = 2.506628274631000502415765284811;
const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// A named position in the global random sequence. Equal `(seed, stream_id)`
/// pairs always produce bitwise-identical draw sequences; distinct stream ids
/// select independent ChaCha streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        RngStream { seed, stream_id }
    }

    /// Derive a child stream. Chaining salts gives every (replication,
    /// method, copy) triple its own independent stream.
    pub fn substream(&self, salt: u64) -> Self {
        RngStream {
            seed: self.seed,
            stream_id: mix64(self.stream_id ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        }
    }

    pub fn rng(&self) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

/// splitmix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Symmetric positive-definite covariance matrix (row-major, p x p).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl CovMatrix {
    /// Validate symmetry (to 1e-12) and positive definiteness.
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != dim * dim {
            return Err(Error::InvalidArgument(format!(
                "covariance data length {} != {dim}x{dim}",
                data.len()
            )));
        }
        for i in 0..dim {
            for j in 0..i {
                if (data[i * dim + j] - data[j * dim + i]).abs() > 1e-12 {
                    return Err(Error::InvalidArgument(format!(
                        "covariance not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        let m = CovMatrix { dim, data };
        cholesky(&m)?;
        Ok(m)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        let mut data = Vec::with_capacity(dim * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::InvalidArgument("covariance not square".into()));
            }
            data.extend_from_slice(r);
        }
        CovMatrix::new(dim, data)
    }

    pub fn identity(dim: usize) -> Self {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        CovMatrix { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }
}

/// Lower-triangular Cholesky factor L with L * L^T = c.
pub fn cholesky(c: &CovMatrix) -> Result<Vec<Vec<f64>>> {
    let p = c.dim;
    let mut l = vec![vec![0.0; p]; p];
    for j in 0..p {
        for i in j..p {
            let mut sum = c.get(i, j);
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::NotPositiveDefinite {
                        index: j,
                        pivot: sum,
                    });
                }
                l[j][j] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    Ok(l)
}

/// Draw n i.i.d. rows from N(mean, cov).
pub fn sample_mvn(
    rng: &mut ChaCha12Rng,
    mean: &[f64],
    cov: &CovMatrix,
    n: usize,
) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample_mvn needs n >= 1".into()));
    }
    if mean.len() != cov.dim() {
        return Err(Error::InvalidArgument(
            "mean length does not match covariance dimension".into(),
        ));
    }
    let l = cholesky(cov)?;
    let p = cov.dim();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let z: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
        let mut row = Vec::with_capacity(p);
        for i in 0..p {
            let mut v = mean[i];
            for k in 0..=i {
                v += l[i][k] * z[k];
            }
            row.push(v);
        }
        out.push(row);
    }
    Ok(out)
}

/// One draw from the Laplace distribution with density (1/2b) exp(-|x|/b).
pub fn laplace(rng: &mut impl Rng, scale: f64) -> f64 {
    assert!(
        scale > 0.0 && scale.is_finite(),
        "laplace scale must be positive and finite"
    );
    // Inverse CDF on u in (-1/2, 1/2].
    let u: f64 = rng.gen::<f64>() - 0.5;
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / SQRT_2PI
}

/// Inverse standard normal CDF. Acklam's rational approximation polished
/// with one Halley step against the erfc-based CDF.
pub fn quantile_normal(prob: f64) -> Result<f64> {
    if !(prob > 0.0 && prob < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "quantile_normal requires prob in (0,1), got {prob}"
        )));
    }
    if prob == 0.5 {
        return Ok(0.0);
    }

    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let p = prob;
    let mut x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };

    // Halley refinement.
    let e = normal_cdf(x) - p;
    let u = e * SQRT_2PI * (0.5 * x * x).exp();
    x -= u / (1.0 + x * u / 2.0);
    Ok(x)
}

fn ln_beta(a: f64, b: f64) -> f64 {
    libm::lgamma(a) + libm::lgamma(b) - libm::lgamma(a + b)
}

/// Regularized incomplete beta I_x(a, b) via the Lentz continued fraction.
fn inc_beta_reg(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    // Use the continued fraction on whichever side converges fast.
    if x < (a + 1.0) / (a + b + 2.0) {
        inc_beta_cf_side(a, b, x)
    } else {
        1.0 - inc_beta_cf_side(b, a, 1.0 - x)
    }
}

fn inc_beta_cf_side(a: f64, b: f64, x: f64) -> f64 {
    let front = (x.ln() * a + (1.0 - x).ln() * b - ln_beta(a, b)).exp();
    front * beta_cf(a, b, x) / a
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 400;
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Student-t CDF with (possibly non-integer) df degrees of freedom.
pub fn t_cdf(x: f64, df: f64) -> f64 {
    let half = 0.5 * inc_beta_reg(0.5 * df, 0.5, df / (df + x * x));
    if x > 0.0 {
        1.0 - half
    } else {
        half
    }
}

/// Student-t quantile for real df > 0. Converges to the normal quantile as
/// df grows; large df uses the Cornish-Fisher expansion directly.
pub fn quantile_t(prob: f64, df: f64) -> Result<f64> {
    if !(prob > 0.0 && prob < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "quantile_t requires prob in (0,1), got {prob}"
        )));
    }
    if !(df > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "quantile_t requires df > 0, got {df}"
        )));
    }
    if prob == 0.5 {
        return Ok(0.0);
    }
    if df > 1e6 {
        let z = quantile_normal(prob)?;
        let z3 = z * z * z;
        let z5 = z3 * z * z;
        let g1 = (z3 + z) / 4.0;
        let g2 = (5.0 * z5 + 16.0 * z3 + 3.0 * z) / 96.0;
        return Ok(z + g1 / df + g2 / (df * df));
    }

    // Solve on the upper half and mirror.
    let ph = prob.max(1.0 - prob);
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut guard = 0;
    while t_cdf(hi, df) < ph {
        hi *= 2.0;
        guard += 1;
        if guard > 2000 {
            return Err(Error::InvalidArgument(
                "quantile_t failed to bracket".into(),
            ));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if t_cdf(mid, df) < ph {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 * hi.max(1.0) {
            break;
        }
    }
    let x = 0.5 * (lo + hi);
    Ok(if prob >= 0.5 { x } else { -x })
}

/// P(X <= x, Y <= y) for standard bivariate normal with correlation rho.
///
/// Gauss-Legendre quadrature after Drezner-Wesolowsky, with the Genz
/// refinement for |rho| near 1. Strongly negative rho is reduced to the
/// positive tail branch through P(X>h, Y<=k) = phi(-h) - P(X>h, Y>-k; -rho).
pub fn bvn_cdf(x: f64, y: f64, rho: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&rho) {
        return Err(Error::InvalidArgument(format!(
            "bvn_cdf requires |rho| <= 1, got {rho}"
        )));
    }
    if rho == 1.0 {
        return Ok(normal_cdf(x.min(y)));
    }
    if rho == -1.0 {
        return Ok((normal_cdf(x) + normal_cdf(y) - 1.0).max(0.0));
    }
    // P(X <= x, Y <= y) = P(X > -x, Y > -y).
    Ok(bvn_upper(-x, -y, rho))
}

// Gauss-Legendre nodes/weights (weight, node) as used by the tvpack bvnd
// quadrature grids.
const GL_6: [(f64, f64); 3] = [
    (0.1713244923791705, -0.9324695142031522),
    (0.3607615730481384, -0.6612093864662647),
    (0.4679139345726904, -0.2386191860831970),
];
const GL_12: [(f64, f64); 6] = [
    (0.04717533638651177, -0.9815606342467191),
    (0.1069393259953183, -0.9041172563704750),
    (0.1600783285433464, -0.7699026741943050),
    (0.2031674267230659, -0.5873179542866171),
    (0.2334925365383547, -0.3678314989981802),
    (0.2491470458134029, -0.1252334085114692),
];
const GL_20: [(f64, f64); 10] = [
    (0.01761400713915212, -0.9931285991850949),
    (0.04060142980038694, -0.9639719272779138),
    (0.06267204833410906, -0.9122344282513259),
    (0.08327674157670475, -0.8391169718222188),
    (0.1019301198172404, -0.7463319064601508),
    (0.1181945319615184, -0.6360536807265150),
    (0.1316886384491766, -0.5108670019508271),
    (0.1420961093183821, -0.3737060887154196),
    (0.1491729864726037, -0.2277858511416451),
    (0.1527533871307259, -0.07652652113349733),
];

fn quadrature(rho_abs: f64) -> &'static [(f64, f64)] {
    if rho_abs < 0.3 {
        &GL_6
    } else if rho_abs < 0.75 {
        &GL_12
    } else {
        &GL_20
    }
}

/// P(X > h, Y > k) for standard bivariate normal with correlation r in (-1, 1).
fn bvn_upper(h: f64, k: f64, r: f64) -> f64 {
    if r <= -0.925 {
        // Reduce to the accurate positive branch.
        return (normal_cdf(-h) - bvn_upper(h, -k, -r)).clamp(0.0, 1.0);
    }

    let quad = quadrature(r.abs());
    let hk = h * k;
    let mut bvn = 0.0;

    if r.abs() < 0.925 {
        if r.abs() > 0.0 {
            let hs = (h * h + k * k) / 2.0;
            let asr = 0.5 * libm::asin(r);
            for &(w, xq) in quad {
                for is in [-1.0, 1.0] {
                    let sn = libm::sin(asr * (is * xq + 1.0));
                    bvn += w * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
                }
            }
            bvn *= asr / TWO_PI;
        }
        bvn += normal_cdf(-h) * normal_cdf(-k);
        return bvn.clamp(0.0, 1.0);
    }

    // r in [0.925, 1)
    let a_s = (1.0 - r) * (1.0 + r);
    if a_s > 0.0 {
        let mut a = a_s.sqrt();
        let b_s = (h - k) * (h - k);
        let c = (4.0 - hk) / 8.0;
        let d = (12.0 - hk) / 16.0;
        let asr = -(b_s / a_s + hk) / 2.0;
        if asr > -100.0 {
            bvn = a
                * asr.exp()
                * (1.0 - c * (b_s - a_s) * (1.0 - d * b_s / 5.0) / 3.0 + c * d * a_s * a_s / 5.0);
        }
        if -hk < 100.0 {
            let b = b_s.sqrt();
            bvn -= (-hk / 2.0).exp()
                * SQRT_2PI
                * normal_cdf(-b / a)
                * b
                * (1.0 - c * b_s * (1.0 - d * b_s / 5.0) / 3.0);
        }
        a /= 2.0;
        for &(w, xq) in quad {
            for is in [-1.0, 1.0] {
                let xs = (a * (is * xq + 1.0)).powi(2);
                let rs = (1.0 - xs).sqrt();
                let asr = -(b_s / xs + hk) / 2.0;
                if asr > -100.0 {
                    let sp = 1.0 + c * xs * (1.0 + d * xs);
                    let ep = (-hk * (1.0 - rs) / (2.0 * (1.0 + rs))).exp() / rs;
                    bvn += a * w * asr.exp() * (ep - sp);
                }
            }
        }
        bvn = -bvn / TWO_PI;
    }
    bvn += normal_cdf(-h.max(k));
    bvn.clamp(0.0, 1.0)
}

/// Latent Gaussian correlation that, after thresholding both coordinates at
/// their marginal quantiles, yields binary variables with Pearson correlation
/// `rho_b`. Solved by bisection on the bivariate normal CDF.
pub fn latent_corr_for_binary(p1: f64, p2: f64, rho_b: f64) -> Result<f64> {
    if !(p1 > 0.0 && p1 < 1.0 && p2 > 0.0 && p2 < 1.0) {
        return Err(Error::InvalidArgument(
            "marginal probabilities must lie in (0,1)".into(),
        ));
    }
    if rho_b == 0.0 {
        return Ok(0.0);
    }
    let t1 = quantile_normal(1.0 - p1)?;
    let t2 = quantile_normal(1.0 - p2)?;
    let denom = (p1 * (1.0 - p1) * p2 * (1.0 - p2)).sqrt();

    // Binary Pearson correlation induced by latent correlation rho.
    let binary_corr = |rho: f64| -> Result<f64> {
        let p11 = 1.0 - normal_cdf(t1) - normal_cdf(t2) + bvn_cdf(t1, t2, rho)?;
        Ok((p11 - p1 * p2) / denom)
    };

    let mut lo = -1.0 + 1e-12;
    let mut hi = 1.0 - 1e-12;
    if binary_corr(hi)? < rho_b - 1e-8 || binary_corr(lo)? > rho_b + 1e-8 {
        return Err(Error::InfeasibleCorrelation { p1, p2, rho_b });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let f = binary_corr(mid)?;
        if (f - rho_b).abs() < 1e-9 {
            return Ok(mid);
        }
        if f < rho_b {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-14 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}
