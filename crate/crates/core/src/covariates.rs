//! Covariate vectors and their schemas.
//!
//! A schema declares, per dimension, the value kind (real, integer count, or
//! binary flag) and optional bounds. Vectors are validated against their
//! schema when constructed or mutated through the checked API; intervention
//! hot loops mutate raw values in place and re-clamp per their own rules, with
//! debug assertions guarding the schema in test builds.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DimKind {
    Real,
    Integer,
    Binary,
}

/// Declared range and kind of one covariate dimension. `None` bounds mean
/// unbounded on that side. Binary dims implicitly carry bounds {0, 1}.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DimSpec {
    pub name: String,
    pub kind: DimKind,
    #[serde(default)]
    pub lower: Option<f64>,
    #[serde(default)]
    pub upper: Option<f64>,
}

impl DimSpec {
    pub fn real(name: &str, lower: Option<f64>, upper: Option<f64>) -> Self {
        DimSpec {
            name: name.into(),
            kind: DimKind::Real,
            lower,
            upper,
        }
    }

    pub fn integer(name: &str, lower: f64, upper: f64) -> Self {
        DimSpec {
            name: name.into(),
            kind: DimKind::Integer,
            lower: Some(lower),
            upper: Some(upper),
        }
    }

    pub fn binary(name: &str) -> Self {
        DimSpec {
            name: name.into(),
            kind: DimKind::Binary,
            lower: Some(0.0),
            upper: Some(1.0),
        }
    }

    fn check(&self, dim: usize, value: f64) -> Result<()> {
        let violation = |reason: &str| Error::SchemaViolation {
            dim,
            name: self.name.clone(),
            value,
            reason: reason.into(),
        };
        if value.is_nan() {
            return Err(violation("NaN"));
        }
        if let Some(lo) = self.lower {
            if value < lo {
                return Err(violation("below lower bound"));
            }
        }
        if let Some(hi) = self.upper {
            if value > hi {
                return Err(violation("above upper bound"));
            }
        }
        match self.kind {
            DimKind::Real => {}
            DimKind::Integer => {
                if value.fract() != 0.0 {
                    return Err(violation("not an integer"));
                }
            }
            DimKind::Binary => {
                if value != 0.0 && value != 1.0 {
                    return Err(violation("not in {0, 1}"));
                }
            }
        }
        Ok(())
    }
}

/// Shared, immutable list of dimension specs. Cloning is cheap.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Schema(Arc<Vec<DimSpec>>);

impl Schema {
    pub fn new(dims: Vec<DimSpec>) -> Self {
        Schema(Arc::new(dims))
    }

    /// `p` unbounded real dimensions named `x1..xp`; the shape used by the
    /// synthetic demonstrations.
    pub fn unbounded_real(p: usize) -> Self {
        Schema::new(
            (1..=p)
                .map(|i| DimSpec::real(&format!("x{i}"), None, None))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn dims(&self) -> &[DimSpec] {
        &self.0
    }

    pub fn validate_values(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: values.len(),
            });
        }
        for (i, (&v, spec)) in values.iter().zip(self.dims()).enumerate() {
            spec.check(i, v)?;
        }
        Ok(())
    }
}

/// One individual's covariates, tied to a schema.
#[derive(Clone, Debug)]
pub struct CovariateVector {
    schema: Schema,
    values: Vec<f64>,
}

impl CovariateVector {
    pub fn new(schema: Schema, values: Vec<f64>) -> Result<Self> {
        schema.validate_values(&values)?;
        Ok(CovariateVector { schema, values })
    }

    /// Construct without validating against the schema. For hot loops whose
    /// values are produced by code that already maintains the invariants;
    /// debug builds still check length.
    pub fn new_unchecked(schema: Schema, values: Vec<f64>) -> Self {
        debug_assert_eq!(schema.len(), values.len());
        CovariateVector { schema, values }
    }

    /// Consume the vector, returning the raw values.
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Checked mutation of one coordinate.
    pub fn set(&mut self, dim: usize, value: f64) -> Result<()> {
        let spec = self.schema.dims().get(dim).ok_or(Error::DimensionMismatch {
            expected: self.schema.len(),
            got: dim,
        })?;
        spec.check(dim, value)?;
        self.values[dim] = value;
        Ok(())
    }

    /// Unchecked mutable access for intervention hot loops. Callers are
    /// responsible for keeping values inside the schema; debug builds verify.
    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[cfg(debug_assertions)]
    pub(crate) fn debug_check(&self) {
        if let Err(e) = self.schema.validate_values(&self.values) {
            panic!("covariate vector left schema: {e}");
        }
    }

    #[cfg(not(debug_assertions))]
    pub(crate) fn debug_check(&self) {}
}

/// Dot product with a dense coefficient vector. Lengths must already agree.
pub fn dot(values: &[f64], coeffs: &[f64]) -> f64 {
    debug_assert_eq!(values.len(), coeffs.len());
    values.iter().zip(coeffs).map(|(v, c)| v * c).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_schema() -> Schema {
        Schema::new(vec![
            DimSpec::real("weight", Some(0.0), Some(10.0)),
            DimSpec::integer("visits", 0.0, 12.0),
            DimSpec::binary("smoker"),
        ])
    }

    #[test]
    fn construction_validates_bounds_kind_and_length() {
        let s = toy_schema();
        CovariateVector::new(s.clone(), vec![3.5, 4.0, 1.0]).unwrap();
        assert!(CovariateVector::new(s.clone(), vec![3.5, 4.0]).is_err());
        assert!(CovariateVector::new(s.clone(), vec![-1.0, 4.0, 1.0]).is_err());
        assert!(CovariateVector::new(s.clone(), vec![3.5, 4.5, 1.0]).is_err());
        assert!(CovariateVector::new(s.clone(), vec![3.5, 4.0, 0.3]).is_err());
        assert!(CovariateVector::new(s, vec![f64::NAN, 4.0, 1.0]).is_err());
    }

    #[test]
    fn set_enforces_schema() {
        let mut v = CovariateVector::new(toy_schema(), vec![3.5, 4.0, 1.0]).unwrap();
        v.set(0, 9.9).unwrap();
        assert!(v.set(0, 10.1).is_err());
        assert!(v.set(1, 2.5).is_err());
        assert!(v.set(2, 2.0).is_err());
        assert!(v.set(7, 0.0).is_err());
        assert_eq!(v.values(), &[9.9, 4.0, 1.0]);
    }

    #[test]
    fn unbounded_real_accepts_anything_finite() {
        let s = Schema::unbounded_real(3);
        CovariateVector::new(s, vec![-1e6, 0.0, 42.5]).unwrap();
    }
}
