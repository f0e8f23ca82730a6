//! Named-parameter registry shared by the optimizer, the gradient checker
//! and model serialization.

use crate::error::{Error, Result};
use crate::scalar::Real;
use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD};
use std::collections::BTreeMap;

/// A tree of named parameter arrays. Gradients reuse the same struct types as
/// the parameters they belong to, so a `ParamSet` works for both.
pub trait ParamSet<S: Real> {
    /// Visit every parameter as `(name, view)`. `prefix` scopes the names.
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, S>));
    /// Mutable counterpart of [`ParamSet::visit`], same traversal order.
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, S>));
}

/// Snapshot of all parameters (or gradients) keyed by name.
pub fn collect<S: Real>(set: &impl ParamSet<S>) -> BTreeMap<String, ArrayD<S>> {
    let mut map = BTreeMap::new();
    set.visit("", &mut |name, view| {
        let prev = map.insert(name.to_string(), view.to_owned());
        assert!(prev.is_none(), "duplicate parameter name {name}");
    });
    map
}

/// In-place `acc += other`, matched by name.
pub fn accumulate<S: Real, T: ParamSet<S>>(acc: &mut T, other: &T) {
    let map = collect(other);
    acc.visit_mut("", &mut |name, mut view| {
        let src = map.get(name).expect("parameter sets must match");
        view.zip_mut_with(src, |a, b| *a += *b);
    });
}

/// In-place multiplication of every array by `factor`.
pub fn scale<S: Real, T: ParamSet<S>>(set: &mut T, factor: S) {
    set.visit_mut("", &mut |_, mut view| {
        view.mapv_inplace(|v| v * factor);
    });
}

/// Errors with the first parameter containing a non-finite entry.
pub fn check_finite<S: Real>(set: &impl ParamSet<S>) -> Result<()> {
    let mut bad: Option<String> = None;
    set.visit("", &mut |name, view| {
        if bad.is_none() && view.iter().any(|v| !v.is_finite()) {
            bad = Some(name.to_string());
        }
    });
    match bad {
        Some(name) => Err(Error::numeric(name, "non-finite entry")),
        None => Ok(()),
    }
}

/// Total number of scalar parameters.
pub fn count_scalars<S: Real>(set: &impl ParamSet<S>) -> usize {
    let mut n = 0;
    set.visit("", &mut |_, view| n += view.len());
    n
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
