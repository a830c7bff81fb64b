//! Embedded-Gaussian non-local block over a single `C x H x W` feature map.
//!
//! With positions `i, j` ranging over the `N = H * W` spatial cells and
//! `x_i` the channel vector at `i`:
//!
//! ```text
//! theta_i = W_theta x_i,   phi_j = W_phi x_j,   g_j = W_g x_j
//! a_ij    = softmax_j(theta_i . phi_j)
//! y_i     = sum_j a_ij g_j
//! z_i     = W_z y_i + x_i
//! ```
//!
//! The 1x1 convolutions reduce to per-position channel mixing, so the fast
//! path works on the `C x N` matrix view of the map.

use nalgebra::DMatrix;

use crate::error::{PoseError, Result};
use crate::synth::SplitMix64;

/// Channel-major `C x H x W` tensor stored row-major in `(c, h, w)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(PoseError::Dimension(format!(
                "feature map extents must be positive ({channels}x{height}x{width})"
            )));
        }
        if data.len() != channels * height * width {
            return Err(PoseError::Dimension(format!(
                "{channels}x{height}x{width} feature map needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(PoseError::Validation("feature map has a non-finite value".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn random(channels: usize, height: usize, width: usize, rng: &mut SplitMix64) -> Self {
        let data = (0..channels * height * width).map(|_| rng.gaussian()).collect();
        Self::new(channels, height, width, data).expect("extents are positive")
    }

    fn from_matrix(m: &DMatrix<f64>, height: usize, width: usize) -> Self {
        // DMatrix is column-major; transposing yields (c, position) row-major order
        Self {
            channels: m.nrows(),
            height,
            width,
            data: m.transpose().as_slice().to_vec(),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn positions(&self) -> usize {
        self.height * self.width
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Value at channel `c`, flattened position `i = h * W + w`.
    pub fn at(&self, c: usize, i: usize) -> f64 {
        self.data[c * self.positions() + i]
    }

    /// `C x N` matrix view.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.channels, self.positions(), &self.data)
    }

    /// Reorders spatial positions: output position `i` takes input position `perm[i]`.
    pub fn permute_positions(&self, perm: &[usize]) -> Self {
        let n = self.positions();
        assert_eq!(perm.len(), n, "permutation length");
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.channels {
            data.extend(perm.iter().map(|&j| self.data[c * n + j]));
        }
        Self { data, ..*self }
    }
}

/// Weights of the block; `bottleneck = max(1, C / 2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NonLocalParams {
    pub w_theta: DMatrix<f64>,
    pub w_phi: DMatrix<f64>,
    pub w_g: DMatrix<f64>,
    pub w_z: DMatrix<f64>,
}

pub fn bottleneck(channels: usize) -> usize {
    (channels / 2).max(1)
}

impl NonLocalParams {
    pub fn new(
        w_theta: DMatrix<f64>,
        w_phi: DMatrix<f64>,
        w_g: DMatrix<f64>,
        w_z: DMatrix<f64>,
    ) -> Result<Self> {
        let p = Self {
            w_theta,
            w_phi,
            w_g,
            w_z,
        };
        let (cb, c) = p.w_theta.shape();
        for (name, m, shape) in [
            ("w_phi", &p.w_phi, (cb, c)),
            ("w_g", &p.w_g, (cb, c)),
            ("w_z", &p.w_z, (c, cb)),
        ] {
            if m.shape() != shape {
                return Err(PoseError::Dimension(format!(
                    "{name} is {:?}, expected {shape:?}",
                    m.shape()
                )));
            }
        }
        if p.matrices().iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(PoseError::Validation("non-finite weight".into()));
        }
        Ok(p)
    }

    pub fn zeros(channels: usize) -> Self {
        let cb = bottleneck(channels);
        Self {
            w_theta: DMatrix::zeros(cb, channels),
            w_phi: DMatrix::zeros(cb, channels),
            w_g: DMatrix::zeros(cb, channels),
            w_z: DMatrix::zeros(channels, cb),
        }
    }

    /// Gaussian weights with standard deviation `scale`.
    pub fn random(channels: usize, scale: f64, rng: &mut SplitMix64) -> Self {
        let cb = bottleneck(channels);
        let mut draw = |r, c| DMatrix::from_fn(r, c, |_, _| scale * rng.gaussian());
        Self {
            w_theta: draw(cb, channels),
            w_phi: draw(cb, channels),
            w_g: draw(cb, channels),
            w_z: draw(channels, cb),
        }
    }

    pub fn channels(&self) -> usize {
        self.w_theta.ncols()
    }

    pub fn bottleneck(&self) -> usize {
        self.w_theta.nrows()
    }

    pub fn matrices(&self) -> [&DMatrix<f64>; 4] {
        [&self.w_theta, &self.w_phi, &self.w_g, &self.w_z]
    }

    fn matrices_mut(&mut self) -> [&mut DMatrix<f64>; 4] {
        [&mut self.w_theta, &mut self.w_phi, &mut self.w_g, &mut self.w_z]
    }
}

fn check_shapes(x: &FeatureMap, p: &NonLocalParams) -> Result<()> {
    // re-run the constructor checks in case fields were edited in place
    NonLocalParams::new(
        p.w_theta.clone(),
        p.w_phi.clone(),
        p.w_g.clone(),
        p.w_z.clone(),
    )?;
    if p.channels() != x.channels() {
        return Err(PoseError::Dimension(format!(
            "parameters expect {} channels, feature map has {}",
            p.channels(),
            x.channels()
        )));
    }
    Ok(())
}

/// Row-wise softmax with max subtraction.
fn softmax_rows(s: &DMatrix<f64>) -> DMatrix<f64> {
    let mut a = s.clone();
    for mut row in a.row_iter_mut() {
        let m = row.max();
        row.apply(|v| *v = (*v - m).exp());
        let total = row.sum();
        row /= total;
    }
    a
}

struct Forward {
    x: DMatrix<f64>,
    theta: DMatrix<f64>,
    phi: DMatrix<f64>,
    g: DMatrix<f64>,
    attn: DMatrix<f64>,
    y: DMatrix<f64>,
    z: DMatrix<f64>,
}

fn forward_cached(x: &FeatureMap, p: &NonLocalParams) -> Result<Forward> {
    check_shapes(x, p)?;
    let xm = x.to_matrix();
    let theta = &p.w_theta * &xm;
    let phi = &p.w_phi * &xm;
    let g = &p.w_g * &xm;
    let attn = softmax_rows(&(theta.transpose() * &phi));
    let y = &g * attn.transpose();
    let z = &p.w_z * &y + &xm;
    if z.iter().any(|v| !v.is_finite()) {
        return Err(PoseError::Range("non-finite activation in non-local block".into()));
    }
    Ok(Forward {
        x: xm,
        theta,
        phi,
        g,
        attn,
        y,
        z,
    })
}

/// Attention weights (N x N, row i over keys j) used by [`nonlocal_forward`].
pub fn attention_map(x: &FeatureMap, p: &NonLocalParams) -> Result<DMatrix<f64>> {
    Ok(forward_cached(x, p)?.attn)
}

pub fn nonlocal_forward(x: &FeatureMap, p: &NonLocalParams) -> Result<FeatureMap> {
    let f = forward_cached(x, p)?;
    Ok(FeatureMap::from_matrix(&f.z, x.height, x.width))
}

/// Reference evaluation with explicit loops over positions and channels.
pub fn nonlocal_bruteforce(x: &FeatureMap, p: &NonLocalParams) -> Result<FeatureMap> {
    check_shapes(x, p)?;
    let (c, cb, n) = (x.channels(), p.bottleneck(), x.positions());
    let embed = |w: &DMatrix<f64>, pos: usize| -> Vec<f64> {
        (0..cb)
            .map(|k| (0..c).map(|ch| w[(k, ch)] * x.at(ch, pos)).sum())
            .collect()
    };
    let thetas: Vec<Vec<f64>> = (0..n).map(|i| embed(&p.w_theta, i)).collect();
    let phis: Vec<Vec<f64>> = (0..n).map(|j| embed(&p.w_phi, j)).collect();
    let gs: Vec<Vec<f64>> = (0..n).map(|j| embed(&p.w_g, j)).collect();

    let mut out = vec![0.0; c * n];
    for i in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|j| (0..cb).map(|k| thetas[i][k] * phis[j][k]).sum())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let f: Vec<f64> = logits.iter().map(|s| (s - m).exp()).collect();
        let norm: f64 = f.iter().sum();
        let mut y = vec![0.0; cb];
        for j in 0..n {
            for k in 0..cb {
                y[k] += f[j] / norm * gs[j][k];
            }
        }
        for ch in 0..c {
            let wz_y: f64 = (0..cb).map(|k| p.w_z[(ch, k)] * y[k]).sum();
            out[ch * n + i] = wz_y + x.at(ch, i);
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(PoseError::Range("non-finite activation in non-local block".into()));
    }
    FeatureMap::new(c, x.height, x.width, out)
}

/// Gradients of `L = sum z^2` with respect to every weight and the input.
#[derive(Debug, Clone, PartialEq)]
pub struct NonLocalGrads {
    pub params: NonLocalParams,
    pub input: DMatrix<f64>,
}

/// `L = sum z^2` and its analytic gradient.
pub fn nonlocal_loss_grad(x: &FeatureMap, p: &NonLocalParams) -> Result<(f64, NonLocalGrads)> {
    let f = forward_cached(x, p)?;
    let loss = f.z.norm_squared();
    let dz = &f.z * 2.0;

    let dw_z = &dz * f.y.transpose();
    let dy = p.w_z.transpose() * &dz;
    // y = g a^T
    let dg = &dy * &f.attn;
    let da = dy.transpose() * &f.g;
    // softmax backward, row by row
    let mut ds = DMatrix::zeros(da.nrows(), da.ncols());
    for i in 0..da.nrows() {
        let dot = f.attn.row(i).dot(&da.row(i));
        for j in 0..da.ncols() {
            ds[(i, j)] = f.attn[(i, j)] * (da[(i, j)] - dot);
        }
    }
    // s = theta^T phi
    let dtheta = &f.phi * ds.transpose();
    let dphi = &f.theta * &ds;

    let xt = f.x.transpose();
    let grads = NonLocalParams {
        w_theta: &dtheta * &xt,
        w_phi: &dphi * &xt,
        w_g: &dg * &xt,
        w_z: dw_z,
    };
    let input = dz
        + p.w_theta.transpose() * dtheta
        + p.w_phi.transpose() * dphi
        + p.w_g.transpose() * dg;
    Ok((
        loss,
        NonLocalGrads {
            params: grads,
            input,
        },
    ))
}

/// Denominator floor for relative gradient errors.
pub const GRAD_REL_FLOOR: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, GRAD_REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_REL_FLOOR)
}

fn sum_sq(x: &FeatureMap, p: &NonLocalParams) -> Result<f64> {
    Ok(nonlocal_forward(x, p)?.data.iter().map(|v| v * v).sum())
}

/// Largest relative error between the analytic gradient and central
/// differences, over every weight and input entry.
pub fn nonlocal_grad_check(x: &FeatureMap, p: &NonLocalParams, step: f64) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&step) {
        return Err(PoseError::Validation(format!(
            "finite-difference step must lie in [1e-7, 1e-3] (got {step})"
        )));
    }
    let (_, grads) = nonlocal_loss_grad(x, p)?;
    let mut worst = 0.0f64;

    let mut probe = p.clone();
    for (m, analytic) in grads.params.matrices().iter().enumerate() {
        for idx in 0..analytic.len() {
            let orig = probe.matrices()[m][idx];
            probe.matrices_mut()[m][idx] = orig + step;
            let up = sum_sq(x, &probe)?;
            probe.matrices_mut()[m][idx] = orig - step;
            let down = sum_sq(x, &probe)?;
            probe.matrices_mut()[m][idx] = orig;
            worst = worst.max(relative_error(analytic[idx], (up - down) / (2.0 * step)));
        }
    }

    let n = x.positions();
    let mut xp = x.clone();
    for c in 0..x.channels() {
        for i in 0..n {
            let k = c * n + i;
            let orig = xp.data[k];
            xp.data[k] = orig + step;
            let up = sum_sq(&xp, p)?;
            xp.data[k] = orig - step;
            let down = sum_sq(&xp, p)?;
            xp.data[k] = orig;
            worst = worst.max(relative_error(grads.input[(c, i)], (up - down) / (2.0 * step)));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_diff(a: &FeatureMap, b: &FeatureMap) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn feature_map_validation() {
        assert!(FeatureMap::new(2, 2, 2, vec![0.0; 7]).is_err());
        assert!(FeatureMap::new(0, 2, 2, vec![]).is_err());
        assert!(FeatureMap::new(1, 1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn params_validation() {
        let mut p = NonLocalParams::zeros(4);
        assert_eq!(p.bottleneck(), 2);
        assert_eq!(NonLocalParams::zeros(1).bottleneck(), 1);
        p.w_z = DMatrix::zeros(4, 3);
        let x = FeatureMap::new(4, 1, 1, vec![0.0; 4]).unwrap();
        assert!(matches!(nonlocal_forward(&x, &p), Err(PoseError::Dimension(_))));
        let p = NonLocalParams::zeros(2);
        assert!(matches!(nonlocal_forward(&x, &p), Err(PoseError::Dimension(_))));
    }

    #[test]
    fn zero_attention_logits_average_values() {
        let mut rng = SplitMix64::new(1);
        let x = FeatureMap::random(4, 3, 3, &mut rng);
        let mut p = NonLocalParams::random(4, 0.5, &mut rng);
        p.w_theta.fill(0.0);
        p.w_phi.fill(0.0);
        let f = forward_cached(&x, &p).unwrap();
        let mean_g = f.g.column_mean();
        for i in 0..x.positions() {
            assert!((f.y.column(i) - &mean_g).amax() < 1e-15);
        }
    }

    #[test]
    fn zero_output_projection_is_identity() {
        let mut rng = SplitMix64::new(2);
        let x = FeatureMap::random(4, 3, 2, &mut rng);
        let mut p = NonLocalParams::random(4, 0.7, &mut rng);
        p.w_z.fill(0.0);
        assert_eq!(nonlocal_forward(&x, &p).unwrap(), x);
        assert_eq!(nonlocal_bruteforce(&x, &p).unwrap(), x);
    }

    #[test]
    fn single_position_map() {
        let mut rng = SplitMix64::new(3);
        let x = FeatureMap::random(2, 1, 1, &mut rng);
        let p = NonLocalParams::random(2, 1.0, &mut rng);
        let z = nonlocal_bruteforce(&x, &p).unwrap();
        let xm = x.to_matrix();
        let expected = &p.w_z * (&p.w_g * &xm) + &xm;
        for c in 0..2 {
            assert!((z.at(c, 0) - expected[(c, 0)]).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_computed_two_channel_case() {
        // C = 2 (bottleneck 1), 2x2 positions, x rows: c0 = [1, 0, 0, 1], c1 = [0, 1, 1, 1]
        // theta = phi = x0 + x1 = [1, 1, 1, 2]; g = x0 = [1, 0, 0, 1]; w_z = [1, 1]^T
        let x = FeatureMap::new(2, 2, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let p = NonLocalParams::new(
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::from_row_slice(2, 1, &[1.0, 1.0]),
        )
        .unwrap();
        // rows i = 0..2 (theta 1): logits [1,1,1,2] -> y = (e + e^2) / (3e + e^2)
        // row i = 3 (theta 2): logits [2,2,2,4] -> y = (e^2 + e^4) / (3e^2 + e^4)
        let e = std::f64::consts::E;
        let y_a = (e + e * e) / (3.0 * e + e * e);
        let y_b = (e.powi(2) + e.powi(4)) / (3.0 * e.powi(2) + e.powi(4));
        let expected = [
            1.0 + y_a, y_a, y_a, 1.0 + y_b,
            y_a, 1.0 + y_a, 1.0 + y_a, 1.0 + y_b,
        ];
        for z in [nonlocal_forward(&x, &p).unwrap(), nonlocal_bruteforce(&x, &p).unwrap()] {
            for (got, want) in z.data().iter().zip(expected) {
                assert!((got - want).abs() < 1e-14, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn vectorized_matches_loops() {
        for seed in 0..100 {
            let mut rng = SplitMix64::new(seed);
            let x = FeatureMap::random(4, 3, 3, &mut rng);
            let p = NonLocalParams::random(4, 0.5, &mut rng);
            let d = max_diff(&nonlocal_forward(&x, &p).unwrap(), &nonlocal_bruteforce(&x, &p).unwrap());
            assert!(d < 1e-10, "seed {seed}: {d}");
        }
    }

    #[test]
    fn large_logits_stay_finite() {
        let mut rng = SplitMix64::new(9);
        let x = FeatureMap::random(2, 2, 2, &mut rng);
        let p = NonLocalParams::random(2, 40.0, &mut rng);
        let z = nonlocal_forward(&x, &p).unwrap();
        assert!(z.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn permuting_positions_permutes_output() {
        let mut rng = SplitMix64::new(17);
        let x = FeatureMap::random(4, 2, 3, &mut rng);
        let p = NonLocalParams::random(4, 0.5, &mut rng);
        let perm = [4, 2, 0, 5, 1, 3];
        let lhs = nonlocal_forward(&x.permute_positions(&perm), &p).unwrap();
        let rhs = nonlocal_forward(&x, &p).unwrap().permute_positions(&perm);
        assert!(max_diff(&lhs, &rhs) < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..10 {
            let mut rng = SplitMix64::new(seed);
            let x = FeatureMap::random(4, 2, 3, &mut rng);
            let p = NonLocalParams::random(4, 0.5, &mut rng);
            let err = nonlocal_grad_check(&x, &p, 1e-5).unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn output_projection_gradient_with_zero_value_path() {
        // w_z = 0 gives z = x, so dL/dW_z = 2 x y^T exactly
        let mut rng = SplitMix64::new(5);
        let x = FeatureMap::random(4, 2, 2, &mut rng);
        let mut p = NonLocalParams::random(4, 0.5, &mut rng);
        p.w_z.fill(0.0);
        let (_, grads) = nonlocal_loss_grad(&x, &p).unwrap();
        let f = forward_cached(&x, &p).unwrap();
        let expected = x.to_matrix() * f.y.transpose() * 2.0;
        assert!((&grads.params.w_z - expected).amax() < 1e-12);
        assert!(nonlocal_grad_check(&x, &p, 1e-5).unwrap() < 1e-6);

        let zero = NonLocalParams::zeros(4);
        let (_, grads) = nonlocal_loss_grad(&x, &zero).unwrap();
        assert_eq!(grads.params.w_z.amax(), 0.0);
        assert!(nonlocal_grad_check(&x, &zero, 1e-5).unwrap() < 1e-6);
    }

    #[test]
    fn constant_input_gradient() {
        let x = FeatureMap::new(2, 2, 2, vec![0.7; 8]).unwrap();
        let mut rng = SplitMix64::new(6);
        let p = NonLocalParams::random(2, 1.0, &mut rng);
        let (_, grads) = nonlocal_loss_grad(&x, &p).unwrap();
        assert!(grads.params.w_theta.iter().all(|v| v.is_finite()));
        assert!(nonlocal_grad_check(&x, &p, 1e-5).unwrap() < 1e-4);
    }

    #[test]
    fn step_out_of_range() {
        let x = FeatureMap::new(1, 1, 1, vec![1.0]).unwrap();
        let p = NonLocalParams::zeros(1);
        assert!(nonlocal_grad_check(&x, &p, 1e-2).is_err());
        assert!(nonlocal_grad_check(&x, &p, 1e-9).is_err());
    }
}
