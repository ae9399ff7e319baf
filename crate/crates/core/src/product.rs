//! Product spaces: signatures, splitting flat rows into component slices, and
//! the decomposed squared distance.
//!
//! Signature grammar: comma-separated tokens `<K><dim>[@<c0>]`, with `K` one of
//! `E`, `P`, `D`. Omitted curvatures default to 0, -1 and +1 respectively.
//! Example: `D100,D100,D100,D100,E100`, `P20@-0.5`.

use std::fmt;
use std::str::FromStr;

use crate::error::{contract, Error, Result};
use crate::manifolds::{self, ComponentSpace, ManifoldPoint, SpaceKind};

/// Ordered list of component spaces.
#[derive(Debug, Clone, PartialEq)]
pub struct Signature {
    components: Vec<ComponentSpace>,
    offsets: Vec<usize>,
}

impl Signature {
    pub fn new(components: Vec<ComponentSpace>) -> Result<Self> {
        if components.is_empty() {
            return Err(contract("a signature needs at least one component"));
        }
        let mut offsets = Vec::with_capacity(components.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for c in &components {
            acc += c.dim;
            offsets.push(acc);
        }
        Ok(Self {
            components,
            offsets,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut comps = Vec::new();
        for (i, token) in text.split(',').enumerate() {
            comps.push(parse_token(token.trim(), i + 1)?);
        }
        Self::new(comps)
    }

    pub fn components(&self) -> &[ComponentSpace] {
        &self.components
    }

    pub fn component(&self, i: usize) -> &ComponentSpace {
        &self.components[i]
    }

    /// Number of component spaces `N`.
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn total_dim(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Start offset and length of component `i` inside a flat row.
    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn offset(&self, i: usize) -> usize {
        self.offsets[i]
    }

    /// Common component dimension, if every component has the same one.
    pub fn uniform_dim(&self) -> Option<usize> {
        let d = self.components[0].dim;
        self.components.iter().all(|c| c.dim == d).then_some(d)
    }

    /// Marks every non-flat component's curvature as trainable (or not).
    pub fn with_trainable_curvature(mut self, on: bool) -> Self {
        for c in &mut self.components {
            *c = c.trainable(on);
        }
        self
    }

    /// Contiguous component slices of a flat row.
    pub fn split<'a>(&self, x: &'a [f64]) -> Result<Vec<&'a [f64]>> {
        if x.len() != self.total_dim() {
            return Err(contract(format!(
                "flat array has length {}, signature needs {}",
                x.len(),
                self.total_dim()
            )));
        }
        Ok((0..self.len()).map(|i| &x[self.range(i)]).collect())
    }

    /// Splits `x` into validated points of each component.
    pub fn split_point(&self, x: &[f64]) -> Result<ProductPoint> {
        let parts = self
            .split(x)?
            .into_iter()
            .zip(&self.components)
            .map(|(s, space)| ManifoldPoint::new(*space, s.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(ProductPoint { parts })
    }
}

fn parse_token(token: &str, position: usize) -> Result<ComponentSpace> {
    let err = |message: String| Error::Parse { position, message };
    let mut chars = token.chars();
    let letter = chars
        .next()
        .ok_or_else(|| err("empty component token".into()))?;
    let kind = SpaceKind::from_letter(letter)
        .ok_or_else(|| err(format!("unknown space kind `{letter}` (expected E, P or D)")))?;
    let rest = chars.as_str();
    let (dim_text, curv_text) = match rest.split_once('@') {
        Some((d, c)) => (d, Some(c)),
        None => (rest, None),
    };
    let dim: usize = dim_text
        .parse()
        .map_err(|_| err(format!("invalid dimension `{dim_text}`")))?;
    if dim == 0 {
        return Err(err("dimension must be positive".into()));
    }
    let c = match curv_text {
        Some(t) => t
            .parse::<f64>()
            .map_err(|_| err(format!("invalid curvature `{t}`")))?,
        None => kind.default_curvature(),
    };
    ComponentSpace::new(kind, dim, c).map_err(|_| {
        err(format!(
            "curvature {c} has the wrong sign for a {kind} component"
        ))
    })
}

impl FromStr for Signature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Signature::parse(s)
    }
}

impl fmt::Display for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.components.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{}{}", c.kind, c.dim)?;
            if c.curvature() != c.kind.default_curvature() {
                write!(f, "@{}", c.curvature())?;
            }
        }
        Ok(())
    }
}

/// A point of a product space: one point per component.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductPoint {
    parts: Vec<ManifoldPoint>,
}

impl ProductPoint {
    pub fn new(parts: Vec<ManifoldPoint>) -> Self {
        Self { parts }
    }

    pub fn parts(&self) -> &[ManifoldPoint] {
        &self.parts
    }

    /// Flat row, the inverse of [`Signature::split_point`].
    pub fn concat(&self) -> Vec<f64> {
        self.parts
            .iter()
            .flat_map(|p| p.coords().iter().copied())
            .collect()
    }
}

/// Flat row from component slices.
pub fn concat(parts: &[&[f64]]) -> Vec<f64> {
    parts.concat()
}

/// Sum of squared component distances.
pub fn product_sq_dist(x: &ProductPoint, y: &ProductPoint) -> Result<f64> {
    if x.parts.len() != y.parts.len() {
        return Err(contract("product points have different signatures"));
    }
    let mut total = 0.0;
    for (a, b) in x.parts.iter().zip(&y.parts) {
        if a.space() != b.space() {
            return Err(contract("product points have different signatures"));
        }
        let d = manifolds::dist(a.coords(), b.coords(), a.space().curvature())?;
        total += d * d;
    }
    Ok(total)
}
