//! The dictionary `M` (m atoms of dimension d) and its ridge-regularized
//! coefficient solve.
//!
//! For features `F` (n × d) the coefficients minimizing
//! `‖F − Z·M‖²_F + λ‖Z‖²_F` are `Z = F·Mᵀ·(M·Mᵀ + λI)⁻¹`. The m × m system is
//! factored once per call and the factor is kept so the adjoint can reuse it.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Cholesky, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dictionary {
    atoms: Matrix,
    lambda: f64,
}

/// Coefficients together with the factorization that produced them.
#[derive(Debug, Clone)]
pub struct CoefficientSolve {
    pub z: Matrix,
    factor: Cholesky,
}

/// Gradients of a scalar function of `Z` pulled back to the atoms and to the
/// input features.
#[derive(Debug, Clone)]
pub struct CoefficientGrad {
    pub atoms: Matrix,
    pub features: Matrix,
}

#[derive(Debug, Clone)]
pub struct ReconstructionGrad {
    pub loss: f64,
    pub z: Matrix,
    pub atoms: Matrix,
    pub features: Matrix,
}

impl Dictionary {
    pub fn new(atoms: Matrix, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::config(format!("ridge weight must be finite and >= 0, got {lambda}")));
        }
        if atoms.rows() == 0 || atoms.cols() == 0 {
            return Err(Error::config("dictionary needs at least one atom of positive dimension"));
        }
        if !atoms.is_finite() {
            return Err(Error::Numerical("dictionary atoms contain non-finite entries".into()));
        }
        Ok(Self { atoms, lambda })
    }

    /// Atoms drawn i.i.d. from N(0, 1/d).
    pub fn random(m: usize, d: usize, lambda: f64, rng: &mut impl Rng) -> Result<Self> {
        if m == 0 || d == 0 {
            return Err(Error::config(format!("dictionary size must be positive, got {m}x{d}")));
        }
        let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
        let atoms = Matrix::from_fn(m, d, |_, _| normal.sample(rng));
        Self::new(atoms, lambda)
    }

    pub fn atoms(&self) -> &Matrix {
        &self.atoms
    }

    pub fn atoms_mut(&mut self) -> &mut Matrix {
        &mut self.atoms
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Number of atoms.
    pub fn m(&self) -> usize {
        self.atoms.rows()
    }

    /// Feature dimension.
    pub fn d(&self) -> usize {
        self.atoms.cols()
    }

    fn gram_factor(&self) -> Result<Cholesky> {
        if self.lambda <= 0.0 {
            return Err(Error::config(
                "coefficient solve requires a positive ridge weight (lambda > 0)",
            ));
        }
        let mut gram = self.atoms.matmul_t(&self.atoms)?;
        for i in 0..self.m() {
            gram.set(i, i, gram.get(i, i) + self.lambda);
        }
        Cholesky::factor(&gram)
    }

    fn check_features(&self, features: &Matrix, op: &'static str) -> Result<()> {
        if features.cols() != self.d() {
            return Err(Error::shape(
                op,
                format!("features have {} columns, dictionary dimension is {}", features.cols(), self.d()),
            ));
        }
        Ok(())
    }

    pub fn solve_coefficients(&self, features: &Matrix) -> Result<Matrix> {
        Ok(self.solve(features)?.z)
    }

    /// Closed-form coefficients, keeping the factorization for
    /// [`Dictionary::coefficients_backward`].
    pub fn solve(&self, features: &Matrix) -> Result<CoefficientSolve> {
        self.check_features(features, "solve_coefficients")?;
        let factor = self.gram_factor()?;
        self.solve_with(features, factor)
    }

    /// Solve against a factorization obtained from an earlier [`Dictionary::solve`]
    /// with the same atoms.
    pub fn solve_reusing(&self, features: &Matrix, previous: &CoefficientSolve) -> Result<CoefficientSolve> {
        self.check_features(features, "solve_coefficients")?;
        self.solve_with(features, previous.factor.clone())
    }

    fn solve_with(&self, features: &Matrix, factor: Cholesky) -> Result<CoefficientSolve> {
        let projected = features.matmul_t(&self.atoms)?;
        let z = factor.solve_right(&projected)?;
        Ok(CoefficientSolve { z, factor })
    }

    /// Pull `upstream = ∂L/∂Z` back through the closed form.
    ///
    /// With `S = M·Mᵀ + λI` and `H = upstream·S⁻¹`:
    /// `∂L/∂F = H·M` and `∂L/∂M = Hᵀ·F − (Zᵀ·H + Hᵀ·Z)·M`.
    pub fn coefficients_backward(
        &self,
        features: &Matrix,
        solve: &CoefficientSolve,
        upstream: &Matrix,
    ) -> Result<CoefficientGrad> {
        self.check_features(features, "coefficients_backward")?;
        if upstream.shape() != solve.z.shape() || features.rows() != solve.z.rows() {
            return Err(Error::shape(
                "coefficients_backward",
                format!(
                    "upstream {:?}, coefficients {:?}, features {:?}",
                    upstream.shape(),
                    solve.z.shape(),
                    features.shape()
                ),
            ));
        }
        let h = solve.factor.solve_right(upstream)?;
        let grad_features = h.matmul(&self.atoms)?;
        let zt_h = solve.z.t_matmul(&h)?;
        let sym = zt_h.add(&zt_h.transpose())?;
        let grad_atoms = h.t_matmul(features)?.sub(&sym.matmul(&self.atoms)?)?;
        Ok(CoefficientGrad {
            atoms: grad_atoms,
            features: grad_features,
        })
    }

    /// `‖F − Z·M‖²_F + λ‖Z‖²_F`
    pub fn reconstruction_loss(&self, features: &Matrix, z: &Matrix) -> Result<f64> {
        Ok(self.reconstruction_residual(features, z)?.0)
    }

    fn reconstruction_residual(&self, features: &Matrix, z: &Matrix) -> Result<(f64, Matrix)> {
        self.check_features(features, "reconstruction_loss")?;
        if z.cols() != self.m() || z.rows() != features.rows() {
            return Err(Error::shape(
                "reconstruction_loss",
                format!("coefficients {:?} for features {:?} and {} atoms", z.shape(), features.shape(), self.m()),
            ));
        }
        let residual = features.sub(&z.matmul(&self.atoms)?)?;
        Ok((residual.sum_squares() + self.lambda * z.sum_squares(), residual))
    }

    /// Reconstruction loss with its partial derivatives in `Z`, `M` and `F`,
    /// all three treated as independent.
    pub fn reconstruction_grad(&self, features: &Matrix, z: &Matrix) -> Result<ReconstructionGrad> {
        let (loss, residual) = self.reconstruction_residual(features, z)?;
        let mut grad_z = residual.matmul_t(&self.atoms)?.scale(-2.0);
        grad_z.axpy(2.0 * self.lambda, z)?;
        Ok(ReconstructionGrad {
            loss,
            z: grad_z,
            atoms: z.t_matmul(&residual)?.scale(-2.0),
            features: residual.scale(2.0),
        })
    }

    /// `‖M − M₀‖²_F`, without any weight.
    pub fn drift_penalty(&self, anchor: &Dictionary) -> Result<f64> {
        Ok(self.atoms.sub(&anchor.atoms)?.sum_squares())
    }

    /// `‖M − M₀‖_F`
    pub fn drift_norm(&self, anchor: &Dictionary) -> Result<f64> {
        Ok(self.drift_penalty(anchor)?.sqrt())
    }
}
