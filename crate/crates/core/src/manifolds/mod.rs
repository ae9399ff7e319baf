//! Constant-curvature stereographic models.
//!
//! One formula family covers all three geometries, selected by the sign of the
//! curvature `c`: Euclidean space (`c = 0`), the Poincaré ball (`c < 0`) and the
//! projected sphere (`c > 0`). The functions here evaluate on plain slices;
//! [`ops`] holds the same kernels for any [`Backend`](crate::numerics::Backend).

pub mod ops;

use std::fmt;

use crate::error::{contract, Error, Result};
use crate::numerics::{softplus, Eval};

pub use ops::C_EPS;

/// Geometry of a component space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpaceKind {
    /// Flat, `c = 0`.
    Euclidean,
    /// Poincaré ball, `c < 0`.
    Poincare,
    /// Projected sphere, `c > 0`.
    Sphere,
}

impl SpaceKind {
    pub fn letter(self) -> char {
        match self {
            SpaceKind::Euclidean => 'E',
            SpaceKind::Poincare => 'P',
            SpaceKind::Sphere => 'D',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        match c {
            'E' => Some(SpaceKind::Euclidean),
            'P' => Some(SpaceKind::Poincare),
            'D' => Some(SpaceKind::Sphere),
            _ => None,
        }
    }

    /// Sign of the curvature: -1, 0 or +1.
    pub fn sign(self) -> f64 {
        match self {
            SpaceKind::Euclidean => 0.0,
            SpaceKind::Poincare => -1.0,
            SpaceKind::Sphere => 1.0,
        }
    }

    pub fn default_curvature(self) -> f64 {
        self.sign()
    }
}

impl fmt::Display for SpaceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// One factor of a product space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComponentSpace {
    pub kind: SpaceKind,
    pub dim: usize,
    curvature: f64,
    pub trainable_curvature: bool,
}

impl ComponentSpace {
    pub fn new(kind: SpaceKind, dim: usize, curvature: f64) -> Result<Self> {
        if dim == 0 {
            return Err(contract("component dimension must be positive"));
        }
        let ok = match kind {
            SpaceKind::Euclidean => curvature == 0.0,
            SpaceKind::Poincare => curvature < 0.0,
            SpaceKind::Sphere => curvature > 0.0,
        };
        if !ok || !curvature.is_finite() {
            return Err(contract(format!(
                "curvature {curvature} does not match space kind {kind}"
            )));
        }
        Ok(Self {
            kind,
            dim,
            curvature,
            trainable_curvature: false,
        })
    }

    pub fn with_default_curvature(kind: SpaceKind, dim: usize) -> Result<Self> {
        Self::new(kind, dim, kind.default_curvature())
    }

    /// Marks the curvature as learned through `sign * softplus(raw)`.
    /// Euclidean components stay flat.
    pub fn trainable(mut self, on: bool) -> Self {
        self.trainable_curvature = on && self.kind != SpaceKind::Euclidean;
        self
    }

    pub fn curvature(&self) -> f64 {
        self.curvature
    }

    /// Unconstrained value whose softplus gives `|c|`.
    pub fn raw_curvature(&self) -> f64 {
        inverse_softplus(self.curvature.abs())
    }

    pub fn is_flat(&self) -> bool {
        self.kind == SpaceKind::Euclidean
    }
}

/// Curvature of a space of `kind` parametrized by an unconstrained `raw` value.
pub fn curvature_from_raw(kind: SpaceKind, raw: f64) -> f64 {
    kind.sign() * softplus(raw)
}

pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Coordinates of a point of a component space.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldPoint {
    coords: Vec<f64>,
    space: ComponentSpace,
}

impl ManifoldPoint {
    pub fn new(space: ComponentSpace, coords: Vec<f64>) -> Result<Self> {
        if coords.len() != space.dim {
            return Err(contract(format!(
                "point has {} coordinates, space has dimension {}",
                coords.len(),
                space.dim
            )));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite coordinates".into()));
        }
        let c = space.curvature();
        if c < 0.0 && c.abs() * sq(&coords) >= 1.0 {
            return Err(Error::Domain("point lies outside the Poincaré ball".into()));
        }
        Ok(Self { coords, space })
    }

    pub fn origin(space: ComponentSpace) -> Self {
        Self {
            coords: vec![0.0; space.dim],
            space,
        }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn space(&self) -> &ComponentSpace {
        &self.space
    }

    pub fn mobius_add(&self, other: &ManifoldPoint) -> Result<ManifoldPoint> {
        self.same_space(other)?;
        let coords = mobius_add(&self.coords, &other.coords, self.space.curvature())?;
        Ok(ManifoldPoint {
            coords,
            space: self.space,
        })
    }

    pub fn dist(&self, other: &ManifoldPoint) -> Result<f64> {
        self.same_space(other)?;
        dist(&self.coords, &other.coords, self.space.curvature())
    }

    pub fn conformal_factor(&self) -> Result<f64> {
        conformal_factor(&self.coords, self.space.curvature())
    }

    pub fn exp(&self, v: &TangentVector) -> Result<ManifoldPoint> {
        let coords = exp_map(&self.coords, &v.coords, self.space.curvature())?;
        Ok(ManifoldPoint {
            coords,
            space: self.space,
        })
    }

    pub fn log(&self, y: &ManifoldPoint) -> Result<TangentVector> {
        self.same_space(y)?;
        let coords = log_map(&self.coords, &y.coords, self.space.curvature())?;
        Ok(TangentVector {
            coords,
            base_point: self.clone(),
        })
    }

    fn same_space(&self, other: &ManifoldPoint) -> Result<()> {
        if self.space.kind != other.space.kind || self.space.dim != other.space.dim {
            return Err(contract("points belong to different component spaces"));
        }
        Ok(())
    }
}

/// A tangent vector attached to `base_point`.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    coords: Vec<f64>,
    base_point: ManifoldPoint,
}

impl TangentVector {
    pub fn new(base_point: ManifoldPoint, coords: Vec<f64>) -> Result<Self> {
        if coords.len() != base_point.space.dim {
            return Err(contract("tangent vector dimension mismatch"));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite tangent vector".into()));
        }
        Ok(Self { coords, base_point })
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn base_point(&self) -> &ManifoldPoint {
        &self.base_point
    }
}

fn sq(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn same_len(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(contract(format!(
            "dimension mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    Ok(())
}

pub fn tan_c(z: f64, c: f64) -> Result<f64> {
    Ok(ops::tan_c(&mut Eval, &vec![z], c)?[0])
}

pub fn arctan_c(z: f64, c: f64) -> f64 {
    ops::arctan_c(&mut Eval, &vec![z], c)[0]
}

pub fn mobius_add(x: &[f64], y: &[f64], c: f64) -> Result<Vec<f64>> {
    same_len(x, y)?;
    ops::mobius_add(&mut Eval, &x.to_vec(), &y.to_vec(), &vec![c])
}

pub fn dist(x: &[f64], y: &[f64], c: f64) -> Result<f64> {
    same_len(x, y)?;
    Ok(ops::dist(&mut Eval, &x.to_vec(), &y.to_vec(), &vec![c])?[0])
}

pub fn sq_dist(x: &[f64], y: &[f64], c: f64) -> Result<f64> {
    same_len(x, y)?;
    Ok(ops::sq_dist(&mut Eval, &x.to_vec(), &y.to_vec(), &vec![c])?[0])
}

/// Allocation-free [`sq_dist`] for ranking loops. Agrees with [`sq_dist`]
/// up to rounding.
pub fn sq_dist_fast(x: &[f64], y: &[f64], c: f64) -> Result<f64> {
    same_len(x, y)?;
    if ops::is_flat(c) {
        return Ok(4.0 * x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>());
    }
    let (mut xy, mut x2, mut y2) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        xy += a * b;
        x2 += a * a;
        y2 += b * b;
    }
    // |(-x) ⊕ y| from the three inner products.
    let cx = 1.0 + 2.0 * c * xy - c * y2;
    let cy = 1.0 + c * x2;
    let den = 1.0 + 2.0 * c * xy + c * c * x2 * y2;
    if den.abs() < ops::MIN_DENOM {
        return Err(Error::Numeric { op: "mobius_add" });
    }
    let num2 = cx * cx * x2 - 2.0 * cx * cy * xy + cy * cy * y2;
    let sc = c.abs().sqrt();
    let mut n = num2.max(0.0).sqrt() / den.abs();
    if c < 0.0 {
        n = n.min((1.0 - ops::BALL_MARGIN) / sc);
    }
    let a = if c > 0.0 { (sc * n).atan() } else { (sc * n).atanh() };
    let d = 2.0 * a / sc;
    Ok(d * d)
}

pub fn conformal_factor(x: &[f64], c: f64) -> Result<f64> {
    Ok(ops::conformal_factor(&mut Eval, &x.to_vec(), &vec![c])?[0])
}

pub fn exp_map(x: &[f64], v: &[f64], c: f64) -> Result<Vec<f64>> {
    same_len(x, v)?;
    ops::exp_map(&mut Eval, &x.to_vec(), &v.to_vec(), &vec![c])
}

pub fn log_map(x: &[f64], y: &[f64], c: f64) -> Result<Vec<f64>> {
    same_len(x, y)?;
    ops::log_map(&mut Eval, &x.to_vec(), &y.to_vec(), &vec![c])
}

pub fn exp_map0(v: &[f64], c: f64) -> Result<Vec<f64>> {
    ops::exp_map0(&mut Eval, &v.to_vec(), &vec![c])
}

pub fn log_map0(y: &[f64], c: f64) -> Result<Vec<f64>> {
    ops::log_map0(&mut Eval, &y.to_vec(), &vec![c])
}

pub fn project_to_domain(x: &[f64], c: f64) -> Vec<f64> {
    ops::project(&mut Eval, &x.to_vec(), &vec![c])
}
