use std::collections::BTreeMap;

use super::{Elem, NumericsError, Tensor};

/// Named trainable tensors, iterated in lexicographic name order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Elem> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.entries.insert(name.into(), t.with_grad(true));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    /// Identical names and shapes.
    pub fn is_congruent<U: Elem>(&self, other: &ParamStore<U>) -> bool {
        self.check_congruent(other).is_ok()
    }

    pub fn check_congruent<U: Elem>(&self, other: &ParamStore<U>) -> Result<(), NumericsError> {
        if self.len() != other.len() {
            return Err(NumericsError::Structure(format!(
                "stores hold {} and {} tensors",
                self.len(),
                other.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.iter().zip(other.iter()) {
            if na != nb {
                return Err(NumericsError::Structure(format!(
                    "parameter names differ: `{na}` vs `{nb}`"
                )));
            }
            if ta.shape() != tb.shape() {
                return Err(NumericsError::Structure(format!(
                    "`{na}` has shape {:?} vs {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_, t| Tensor::zeros(t.shape()))
    }

    pub fn map(&self, mut f: impl FnMut(&str, &Tensor<T>) -> Tensor<T>) -> Self {
        let mut out = Self::new();
        for (k, v) in self.iter() {
            out.insert(k, f(k, v));
        }
        out
    }

    /// Entry-wise combination of two congruent stores.
    pub fn zip_with(
        &self,
        other: &Self,
        mut f: impl FnMut(T, T) -> T,
    ) -> Result<Self, NumericsError> {
        self.check_congruent(other)?;
        let mut out = Self::new();
        for ((k, a), (_, b)) in self.iter().zip(other.iter()) {
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            out.insert(k, Tensor::from_parts(a.shape().to_vec(), data));
        }
        Ok(out)
    }

    /// `self += c * other`, in place.
    pub fn axpy(&mut self, c: T, other: &Self) -> Result<(), NumericsError> {
        self.check_congruent(other)?;
        for (t, (_, o)) in self.entries.values_mut().zip(other.iter()) {
            for (x, &y) in t.data_mut().iter_mut().zip(o.data()) {
                *x = *x + c * y;
            }
        }
        Ok(())
    }

    pub fn scaled(&self, c: T) -> Self {
        self.map(|_, t| {
            Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| x * c).collect())
        })
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|t| t.all_finite())
    }

    /// Largest absolute entry-wise difference; infinite when not congruent.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        if !self.is_congruent(other) {
            return f64::INFINITY;
        }
        self.iter()
            .zip(other.iter())
            .map(|((_, a), (_, b))| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    pub fn l2_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|t| t.data().iter())
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn cast<U: Elem>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (k, v) in self.iter() {
            out.insert(k, v.cast());
        }
        out
    }

    /// Names joined by newlines; the byte sequence is stable across runs.
    pub fn layout_fingerprint(&self) -> String {
        self.iter()
            .map(|(k, t)| format!("{k}\t{:?}\n", t.shape()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iteration_is_lexicographic() {
        let mut p = ParamStore::<f32>::new();
        for name in ["b.x", "a.z", "a.b", "c"] {
            p.insert(name, Tensor::zeros(&[1]));
        }
        let names: Vec<_> = p.names().collect();
        assert_eq!(names, ["a.b", "a.z", "b.x", "c"]);
    }

    #[test]
    fn congruence_checks_names_and_shapes() {
        let mut a = ParamStore::<f32>::new();
        a.insert("w", Tensor::zeros(&[2, 2]));
        let mut b = a.clone();
        assert!(a.is_congruent(&b));
        b.insert("w", Tensor::zeros(&[4]));
        assert!(!a.is_congruent(&b));
        let mut c = ParamStore::<f32>::new();
        c.insert("v", Tensor::zeros(&[2, 2]));
        assert!(a.check_congruent(&c).unwrap_err().to_string().contains("`w`"));
    }
}
