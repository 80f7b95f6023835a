//! Symplectic flow kernel.
//!
//! Each 2-D frequency band carries a symmetric positive-definite matrix
//! K = [[a, c], [c, b]] parameterized for unconditional stability:
//! a = e^alpha, b = e^beta, c = rho*sqrt(ab) with rho = tanh(gamma), so
//! ab - c^2 = ab(1 - rho^2) > 0 for every finite parameter triple. The
//! generator A = JK has A^2 = -(ab - c^2) I, giving the closed-form flow
//!
//!   S(t) = cos(omega t) I + (sin(omega t)/omega) A,  omega = sqrt(ab - c^2).
//!
//! `expm_oracle` provides an independent scaling-and-squaring matrix
//! exponential for cross-checking the closed form, and
//! `rope_feasibility_check` decides whether a warped time grid admits a
//! single rotary angle (it does exactly when the increments are constant).
//!
//! The kernel is generic over the scalar; the crate root pins f64 aliases.

use num_traits::{Float, FromPrimitive};
use thiserror::Error;

/// Scalar abstraction for the flow kernel: f32 or f64.
pub trait Real: Float + FromPrimitive + std::fmt::Debug {}
impl Real for f32 {}
impl Real for f64 {}

fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("literal conversion")
}

#[derive(Debug, Error, PartialEq)]
pub enum SypeError {
    #[error("vector length {0} is odd; flows act on consecutive pairs")]
    OddLength(usize),
    #[error("vector length {got} does not match band stack dimension {want}")]
    DimensionMismatch { got: usize, want: usize },
    #[error("band stack must have at least one band")]
    EmptyStack,
    #[error("warped times must be strictly increasing (violated at index {0})")]
    NonMonotone(usize),
    #[error("non-aliasing violated at index {index}: |omega0 * increment| = {phase} >= pi")]
    Aliasing { index: usize, phase: f64 },
    #[error("rope frequency must be positive, got {0}")]
    NonPositiveFrequency(f64),
}

/// Raw stability parameters of one 2-D band.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HamiltonianBand<T> {
    pub alpha: T,
    pub beta: T,
    pub gamma: T,
}

impl<T: Real> HamiltonianBand<T> {
    pub fn new(alpha: T, beta: T, gamma: T) -> Self {
        HamiltonianBand { alpha, beta, gamma }
    }

    /// The isotropic band a = b = omega, c = 0, whose flow is the rotation
    /// by omega*t.
    pub fn isotropic(omega: T) -> Self {
        let l = omega.ln();
        HamiltonianBand {
            alpha: l,
            beta: l,
            gamma: T::zero(),
        }
    }

    pub fn coeff_a(&self) -> T {
        self.alpha.exp()
    }

    pub fn coeff_b(&self) -> T {
        self.beta.exp()
    }

    pub fn coeff_c(&self) -> T {
        self.gamma.tanh() * (self.coeff_a() * self.coeff_b()).sqrt()
    }

    /// omega = sqrt(ab - c^2) = sqrt(ab) / cosh(gamma), strictly positive.
    pub fn omega(&self) -> T {
        ((self.alpha + self.beta) * lit(0.5)).exp() / self.gamma.cosh()
    }

    /// A = JK = [[c, b], [-a, -c]]; A^2 = -omega^2 I and trace(A) = 0.
    pub fn generator(&self) -> Mat2<T> {
        let (a, b, c) = (self.coeff_a(), self.coeff_b(), self.coeff_c());
        Mat2::new(c, b, -a, -c)
    }

    /// Closed-form S(t). For |omega t| < 1e-4 the sin(omega t)/omega factor
    /// switches to the series t(1 - (wt)^2/6 + (wt)^4/120), which keeps both
    /// the value and its parameter derivatives well conditioned near zero.
    pub fn flow(&self, t: T) -> Mat2<T> {
        let omega = self.omega();
        let u = omega * t;
        let cos_u = u.cos();
        let sinc_t = if u.abs() < lit(1e-4) {
            let u2 = u * u;
            t * (T::one() - u2 / lit(6.0) + u2 * u2 / lit(120.0))
        } else {
            u.sin() / omega
        };
        let (a, b, c) = (self.coeff_a(), self.coeff_b(), self.coeff_c());
        Mat2::new(
            cos_u + c * sinc_t,
            b * sinc_t,
            -(a * sinc_t),
            cos_u - c * sinc_t,
        )
    }
}

/// Row-major 2x2 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat2<T> {
    pub e: [T; 4],
}

impl<T: Real> Mat2<T> {
    pub fn new(m00: T, m01: T, m10: T, m11: T) -> Self {
        Mat2 {
            e: [m00, m01, m10, m11],
        }
    }

    pub fn identity() -> Self {
        Mat2::new(T::one(), T::zero(), T::zero(), T::one())
    }

    pub fn zero() -> Self {
        Mat2::new(T::zero(), T::zero(), T::zero(), T::zero())
    }

    /// The standard symplectic form J = [[0, 1], [-1, 0]].
    pub fn j() -> Self {
        Mat2::new(T::zero(), T::one(), -T::one(), T::zero())
    }

    pub fn matmul(&self, o: &Mat2<T>) -> Mat2<T> {
        let a = &self.e;
        let b = &o.e;
        Mat2::new(
            a[0] * b[0] + a[1] * b[2],
            a[0] * b[1] + a[1] * b[3],
            a[2] * b[0] + a[3] * b[2],
            a[2] * b[1] + a[3] * b[3],
        )
    }

    pub fn transpose(&self) -> Mat2<T> {
        Mat2::new(self.e[0], self.e[2], self.e[1], self.e[3])
    }

    pub fn apply(&self, v: [T; 2]) -> [T; 2] {
        [
            self.e[0] * v[0] + self.e[1] * v[1],
            self.e[2] * v[0] + self.e[3] * v[1],
        ]
    }

    pub fn det(&self) -> T {
        self.e[0] * self.e[3] - self.e[1] * self.e[2]
    }

    pub fn trace(&self) -> T {
        self.e[0] + self.e[3]
    }

    pub fn scale(&self, s: T) -> Mat2<T> {
        Mat2::new(self.e[0] * s, self.e[1] * s, self.e[2] * s, self.e[3] * s)
    }

    pub fn add(&self, o: &Mat2<T>) -> Mat2<T> {
        Mat2::new(
            self.e[0] + o.e[0],
            self.e[1] + o.e[1],
            self.e[2] + o.e[2],
            self.e[3] + o.e[3],
        )
    }

    pub fn sub(&self, o: &Mat2<T>) -> Mat2<T> {
        Mat2::new(
            self.e[0] - o.e[0],
            self.e[1] - o.e[1],
            self.e[2] - o.e[2],
            self.e[3] - o.e[3],
        )
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> T {
        self.e
            .iter()
            .fold(T::zero(), |m, x| if x.abs() > m { x.abs() } else { m })
    }

    pub fn max_abs_diff(&self, o: &Mat2<T>) -> T {
        self.sub(o).max_abs()
    }

    /// Infinity norm (max absolute row sum).
    pub fn norm_inf(&self) -> T {
        let r0 = self.e[0].abs() + self.e[1].abs();
        let r1 = self.e[2].abs() + self.e[3].abs();
        if r0 > r1 {
            r0
        } else {
            r1
        }
    }
}

/// exp(t*M) by scaling-and-squaring with a degree-16 Taylor polynomial.
/// The scaled matrix satisfies |t| * ||M||_inf / 2^s <= 0.25. This route
/// never sees omega or the closed form; it exists to cross-check them.
pub fn expm_oracle<T: Real>(m: &Mat2<T>, t: T) -> Mat2<T> {
    let b = m.scale(t);
    let norm = b.norm_inf();
    let mut squarings = 0u32;
    let mut scaled = b;
    if norm > lit(0.25) {
        let ratio: f64 = (norm.to_f64().unwrap() / 0.25).log2().ceil();
        squarings = ratio as u32;
        let factor = lit::<T>(2.0).powi(squarings as i32);
        scaled = b.scale(T::one() / factor);
    }
    // Horner evaluation of sum_{k=0}^{16} X^k / k!.
    let mut acc = Mat2::identity();
    for k in (1..=16u32).rev() {
        // acc = I + X/k * acc
        let prod = scaled.matmul(&acc).scale(T::one() / lit(k as f64));
        acc = Mat2::identity().add(&prod);
    }
    let mut result = acc;
    for _ in 0..squarings {
        result = result.matmul(&result);
    }
    result
}

/// The rotation flow of the isotropic Hamiltonian K = omega*I:
/// [[cos wt, sin wt], [-sin wt, cos wt]].
pub fn rope_flow<T: Real>(omega: T, t: T) -> Result<Mat2<T>, SypeError> {
    if omega <= T::zero() {
        return Err(SypeError::NonPositiveFrequency(
            omega.to_f64().unwrap_or(f64::NAN),
        ));
    }
    let u = omega * t;
    Ok(Mat2::new(u.cos(), u.sin(), -u.sin(), u.cos()))
}

/// One attention head's worth of bands; the full transformation is
/// block-diagonal over consecutive coordinate pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct BandStack<T> {
    bands: Vec<HamiltonianBand<T>>,
}

impl<T: Real> BandStack<T> {
    pub fn new(bands: Vec<HamiltonianBand<T>>) -> Result<Self, SypeError> {
        if bands.is_empty() {
            return Err(SypeError::EmptyStack);
        }
        Ok(BandStack { bands })
    }

    /// Rotary initialization: band i starts at the isotropic Hamiltonian with
    /// the conventional frequency theta_i = 10000^(-2i/d_h), so the flow at
    /// init coincides with standard RoPE.
    pub fn rope_init(head_dim: usize) -> Result<Self, SypeError> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(SypeError::OddLength(head_dim));
        }
        let bands = rope_frequencies(head_dim)
            .into_iter()
            .map(|theta| HamiltonianBand::isotropic(lit(theta)))
            .collect();
        Ok(BandStack { bands })
    }

    pub fn bands(&self) -> &[HamiltonianBand<T>] {
        &self.bands
    }

    pub fn len(&self) -> usize {
        self.bands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bands.is_empty()
    }

    pub fn head_dim(&self) -> usize {
        2 * self.bands.len()
    }

    fn check_len(&self, v: &[T]) -> Result<(), SypeError> {
        if v.len() % 2 != 0 {
            return Err(SypeError::OddLength(v.len()));
        }
        if v.len() != self.head_dim() {
            return Err(SypeError::DimensionMismatch {
                got: v.len(),
                want: self.head_dim(),
            });
        }
        Ok(())
    }

    /// Multiply each consecutive pair (v[2i], v[2i+1]) by S_i(t).
    pub fn apply_flow(&self, v: &[T], t: T) -> Result<Vec<T>, SypeError> {
        self.check_len(v)?;
        let mut out = Vec::with_capacity(v.len());
        for (i, band) in self.bands.iter().enumerate() {
            let s = band.flow(t);
            let r = s.apply([v[2 * i], v[2 * i + 1]]);
            out.push(r[0]);
            out.push(r[1]);
        }
        Ok(out)
    }

    /// Per pair, J * S_i(t) * k: the conjugate transform applied to keys so
    /// that q~ . k~ collapses to the relative-time bilinear form.
    pub fn conjugate_key_flow(&self, k: &[T], t: T) -> Result<Vec<T>, SypeError> {
        self.check_len(k)?;
        let j = Mat2::j();
        let mut out = Vec::with_capacity(k.len());
        for (i, band) in self.bands.iter().enumerate() {
            let s = band.flow(t);
            let r = j.matmul(&s).apply([k[2 * i], k[2 * i + 1]]);
            out.push(r[0]);
            out.push(r[1]);
        }
        Ok(out)
    }
}

/// Conventional rotary geometric frequency ladder for an even head dim.
pub fn rope_frequencies(head_dim: usize) -> Vec<f64> {
    (0..head_dim / 2)
        .map(|i| 10000f64.powf(-2.0 * i as f64 / head_dim as f64))
        .collect()
}

/// Outcome of the rotary-feasibility decision for a warped time grid.
#[derive(Debug, Clone, PartialEq)]
pub enum Feasibility {
    /// A single angle theta = omega0 * (tau[1] - tau[0]) reproduces every
    /// relative phase.
    Feasible { theta: f64 },
    /// The 1-based indices of the first two consecutive increments whose
    /// phases disagree.
    Infeasible { witness: (usize, usize) },
}

/// Decide whether the grid `tau` admits the rotary relative-position
/// property at base frequency `omega0`: under the non-aliasing premise
/// |omega0 * increment| < pi, feasibility holds exactly when all increments
/// are equal (to 1e-12 in phase).
pub fn rope_feasibility_check(tau: &[f64], omega0: f64) -> Result<Feasibility, SypeError> {
    const PHASE_TOL: f64 = 1e-12;
    for i in 1..tau.len() {
        if tau[i] <= tau[i - 1] {
            return Err(SypeError::NonMonotone(i));
        }
    }
    let phases: Vec<f64> = tau.windows(2).map(|w| omega0 * (w[1] - w[0])).collect();
    for (i, &p) in phases.iter().enumerate() {
        if p.abs() >= std::f64::consts::PI {
            return Err(SypeError::Aliasing {
                index: i + 1,
                phase: p.abs(),
            });
        }
    }
    for i in 1..phases.len() {
        if (phases[i] - phases[i - 1]).abs() > PHASE_TOL {
            return Ok(Feasibility::Infeasible {
                witness: (i, i + 1),
            });
        }
    }
    Ok(Feasibility::Feasible {
        theta: phases.first().copied().unwrap_or(0.0),
    })
}
