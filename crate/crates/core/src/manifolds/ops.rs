//! Gyrovector kernels written against [`Backend`], so the same code serves
//! plain evaluation and differentiation.
//!
//! Curvature is passed as a length-1 value. Below [`C_EPS`] in magnitude every
//! kernel takes its exact Euclidean-limit branch.

use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};
use crate::numerics::Backend;

/// Curvatures with `|c| < C_EPS` are treated as flat.
pub const C_EPS: f64 = 1e-7;
/// Relative margin kept from the Poincaré ball boundary.
pub const BALL_MARGIN: f64 = 1e-5;
/// Smallest admissible Möbius-addition denominator.
pub const MIN_DENOM: f64 = 1e-15;
/// Spherical exponential maps must stay this far below the chart edge.
pub const WRAP_MARGIN: f64 = 1e-6;

pub fn is_flat(c: f64) -> bool {
    c.abs() < C_EPS
}

fn curvature<B: Backend>(b: &B, c: &B::V) -> f64 {
    b.value(c)[0]
}

/// `sqrt(|c|)` as a value that carries the gradient of `c`.
pub fn sqrt_abs_c<B: Backend>(b: &mut B, c: &B::V) -> B::V {
    let sign = curvature(b, c).signum();
    let abs = b.scale(c, sign);
    b.sqrt(&abs)
}

/// `tan` for positive curvature, `tanh` for negative, identity when flat.
pub fn tan_c<B: Backend>(b: &mut B, z: &B::V, c: f64) -> Result<B::V> {
    if is_flat(c) {
        Ok(z.clone())
    } else if c > 0.0 {
        if b.value(z).iter().any(|v| v.cos().abs() < 1e-9) {
            return Err(Error::Domain("tan_c evaluated at a pole".into()));
        }
        Ok(b.tan(z))
    } else {
        Ok(b.tanh(z))
    }
}

/// Inverse of [`tan_c`]: `arctan` for positive curvature, `artanh` for negative.
pub fn arctan_c<B: Backend>(b: &mut B, z: &B::V, c: f64) -> B::V {
    if is_flat(c) {
        z.clone()
    } else if c > 0.0 {
        b.atan(z)
    } else {
        b.atanh(z)
    }
}

/// Rescales points of the Poincaré ball that drift onto or past the boundary.
pub fn project<B: Backend>(b: &mut B, x: &B::V, c: &B::V) -> B::V {
    let cv = curvature(b, c);
    if cv >= 0.0 || is_flat(cv) {
        return x.clone();
    }
    let limit = (1.0 - BALL_MARGIN) / cv.abs().sqrt();
    let norm = b.norm(x);
    if b.value(&norm)[0] < limit {
        return x.clone();
    }
    let sc = sqrt_abs_c(b, c);
    let one = b.scalar(1.0 - BALL_MARGIN);
    let max_norm = b.div(&one, &sc);
    let factor = b.div(&max_norm, &norm);
    b.mul(x, &factor)
}

/// Möbius addition `x ⊕_c y`, re-projected into the ball for `c < 0`.
pub fn mobius_add<B: Backend>(b: &mut B, x: &B::V, y: &B::V, c: &B::V) -> Result<B::V> {
    let cv = curvature(b, c);
    if is_flat(cv) {
        return Ok(b.add(x, y));
    }
    let xy = b.dot(x, y);
    let x2 = b.sq_norm(x);
    let y2 = b.sq_norm(y);
    let cxy2 = {
        let t = b.mul(c, &xy);
        b.scale(&t, 2.0)
    };
    let cy2 = b.mul(c, &y2);
    let cx2 = b.mul(c, &x2);
    // (1 - 2c<x,y> - c|y|^2) x + (1 + c|x|^2) y
    let coef_x = {
        let t = b.add(&cxy2, &cy2);
        b.affine(&t, -1.0, 1.0)
    };
    let coef_y = b.shift(&cx2, 1.0);
    // 1 - 2c<x,y> + c^2 |x|^2 |y|^2
    let denom = {
        let cc = b.mul(&cx2, &cy2);
        let t = b.affine(&cxy2, -1.0, 1.0);
        b.add(&t, &cc)
    };
    if b.value(&denom)[0].abs() < MIN_DENOM {
        return Err(Error::Numeric { op: "mobius_add" });
    }
    let left = b.mul(&coef_x, x);
    let right = b.mul(&coef_y, y);
    let num = b.add(&left, &right);
    let out = b.div(&num, &denom);
    Ok(project(b, &out, c))
}

/// Geodesic distance `(2/sqrt|c|) arctan_c(sqrt|c| |(-x) ⊕_c y|)`; `2|x - y|`
/// in the flat limit.
pub fn dist<B: Backend>(b: &mut B, x: &B::V, y: &B::V, c: &B::V) -> Result<B::V> {
    let cv = curvature(b, c);
    if is_flat(cv) {
        let d = b.sub(x, y);
        let n = b.norm(&d);
        return Ok(b.scale(&n, 2.0));
    }
    let neg_x = b.neg(x);
    let w = mobius_add(b, &neg_x, y, c)?;
    let n = b.norm(&w);
    let sc = sqrt_abs_c(b, c);
    let z = b.mul(&sc, &n);
    let a = arctan_c(b, &z, cv);
    let q = b.div(&a, &sc);
    Ok(b.scale(&q, 2.0))
}

/// Squared distance; `4|x - y|^2` in the flat limit.
pub fn sq_dist<B: Backend>(b: &mut B, x: &B::V, y: &B::V, c: &B::V) -> Result<B::V> {
    if is_flat(curvature(b, c)) {
        let d = b.sub(x, y);
        let n2 = b.sq_norm(&d);
        return Ok(b.scale(&n2, 4.0));
    }
    let d = dist(b, x, y, c)?;
    Ok(b.square(&d))
}

/// `λ_x^c = 2 / (1 + c|x|^2)`.
pub fn conformal_factor<B: Backend>(b: &mut B, x: &B::V, c: &B::V) -> Result<B::V> {
    let x2 = b.sq_norm(x);
    let cx2 = b.mul(c, &x2);
    let den = b.shift(&cx2, 1.0);
    if b.value(&den)[0] <= MIN_DENOM {
        return Err(Error::Domain(
            "conformal factor undefined outside the ball".into(),
        ));
    }
    let two = b.scalar(2.0);
    Ok(b.div(&two, &den))
}

/// Exponential map at `x`.
pub fn exp_map<B: Backend>(b: &mut B, x: &B::V, v: &B::V, c: &B::V) -> Result<B::V> {
    let cv = curvature(b, c);
    let vn = b.norm(v);
    if b.value(&vn)[0] == 0.0 {
        return Ok(x.clone());
    }
    if is_flat(cv) {
        return Ok(b.add(x, v));
    }
    let lambda = conformal_factor(b, x, c)?;
    let sc = sqrt_abs_c(b, c);
    let arg = {
        let t = b.mul(&sc, &lambda);
        let t = b.mul(&t, &vn);
        b.scale(&t, 0.5)
    };
    check_wrap(b.value(&arg)[0], cv)?;
    let t = tan_c(b, &arg, cv)?;
    let den = b.mul(&sc, &vn);
    let coef = b.div(&t, &den);
    let second = b.mul(&coef, v);
    mobius_add(b, x, &second, c)
}

/// Exponential map at the origin, where `λ_0 = 2`.
pub fn exp_map0<B: Backend>(b: &mut B, v: &B::V, c: &B::V) -> Result<B::V> {
    let cv = curvature(b, c);
    if is_flat(cv) {
        return Ok(v.clone());
    }
    let vn = b.norm(v);
    if b.value(&vn)[0] == 0.0 {
        return Ok(v.clone());
    }
    let sc = sqrt_abs_c(b, c);
    let arg = b.mul(&sc, &vn);
    check_wrap(b.value(&arg)[0], cv)?;
    let t = tan_c(b, &arg, cv)?;
    let coef = b.div(&t, &arg);
    let out = b.mul(&coef, v);
    Ok(project(b, &out, c))
}

fn check_wrap(arg: f64, c: f64) -> Result<()> {
    if c > 0.0 && arg >= FRAC_PI_2 - WRAP_MARGIN {
        return Err(Error::Domain(format!(
            "spherical exponential map wraps around (angle {arg:.6} >= pi/2)"
        )));
    }
    Ok(())
}

/// Logarithmic map at `x`.
pub fn log_map<B: Backend>(b: &mut B, x: &B::V, y: &B::V, c: &B::V) -> Result<B::V> {
    let cv = curvature(b, c);
    if is_flat(cv) {
        return Ok(b.sub(y, x));
    }
    let neg_x = b.neg(x);
    let w = mobius_add(b, &neg_x, y, c)?;
    let wn = b.norm(&w);
    if b.value(&wn)[0] == 0.0 {
        return Ok(b.scale(&w, 0.0));
    }
    let lambda = conformal_factor(b, x, c)?;
    let sc = sqrt_abs_c(b, c);
    let z = b.mul(&sc, &wn);
    let a = arctan_c(b, &z, cv);
    // 2 / (sqrt|c| λ) · arctan_c(z) / |w|
    let den = {
        let t = b.mul(&sc, &lambda);
        let t = b.mul(&t, &wn);
        b.scale(&t, 0.5)
    };
    let coef = b.div(&a, &den);
    Ok(b.mul(&coef, &w))
}

/// Logarithmic map at the origin.
pub fn log_map0<B: Backend>(b: &mut B, y: &B::V, c: &B::V) -> Result<B::V> {
    let cv = curvature(b, c);
    if is_flat(cv) {
        return Ok(y.clone());
    }
    let yn = b.norm(y);
    if b.value(&yn)[0] == 0.0 {
        return Ok(y.clone());
    }
    let sc = sqrt_abs_c(b, c);
    let z = b.mul(&sc, &yn);
    let a = arctan_c(b, &z, cv);
    let coef = b.div(&a, &z);
    Ok(b.mul(&coef, y))
}

/// Shrinks a tangent vector at the origin so its spherical exponential map
/// stays inside one chart (`sqrt(c)|v| <= pi/2 - margin`). Identity for
/// `c <= 0` and for vectors already inside.
pub fn fit_to_chart<B: Backend>(b: &mut B, v: &B::V, c: &B::V, margin: f64) -> B::V {
    let cv = curvature(b, c);
    if cv <= 0.0 || is_flat(cv) {
        return v.clone();
    }
    let vn = b.norm(v);
    let limit = (FRAC_PI_2 - margin) / cv.sqrt();
    if b.value(&vn)[0] <= limit {
        return v.clone();
    }
    let sc = sqrt_abs_c(b, c);
    let edge = b.scalar(FRAC_PI_2 - margin);
    let max_norm = b.div(&edge, &sc);
    let factor = b.div(&max_norm, &vn);
    b.mul(v, &factor)
}
