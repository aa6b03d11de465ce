//! Named parameter storage: deterministic initialization, leaf binding for
//! autodiff graphs, checksums, and f32↔f64 casting for gradient checks.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// One named weight buffer.
#[derive(Clone)]
pub struct Param<F: Scalar> {
    pub values: Arc<Vec<F>>,
    pub shape: Vec<usize>,
}

/// Ordered map of named parameters. Iteration order (and therefore archive
/// order, checksum order, and optimizer-update order) is the lexicographic
/// name order of the `BTreeMap`.
#[derive(Clone, Default)]
pub struct ParamSet<F: Scalar> {
    params: BTreeMap<String, Param<F>>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, values: Vec<F>, shape: Vec<usize>) {
        assert_eq!(
            values.len(),
            shape.iter().product::<usize>(),
            "parameter {name} length does not match shape {shape:?}"
        );
        assert!(
            self.params
                .insert(name.to_string(), Param { values: Arc::new(values), shape })
                .is_none(),
            "duplicate parameter name {name}"
        );
    }

    /// Truncated-normal init: N(0, std²) resampled until within ±2σ.
    pub fn insert_trunc_normal<R: Rng>(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        std: f64,
        rng: &mut R,
    ) {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("valid normal");
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            let mut v = dist.sample(rng);
            while v.abs() > 2.0 * std {
                v = dist.sample(rng);
            }
            values.push(F::from_f64(v));
        }
        self.insert(name, values, shape);
    }

    pub fn insert_zeros(&mut self, name: &str, shape: Vec<usize>) {
        let n: usize = shape.iter().product();
        self.insert(name, vec![F::ZERO; n], shape);
    }

    pub fn insert_ones(&mut self, name: &str, shape: Vec<usize>) {
        let n: usize = shape.iter().product();
        self.insert(name, vec![F::ONE; n], shape);
    }

    pub fn get(&self, name: &str) -> Result<&Param<F>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::artifact_mismatch(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Replace a parameter's buffer (optimizer update). Shape is unchanged.
    pub fn set_values(&mut self, name: &str, values: Vec<F>) {
        let p = self.params.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(values.len(), p.values.len(), "update length mismatch for {name}");
        p.values = Arc::new(values);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<F>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.values.len()).sum()
    }

    /// Bind every parameter as a graph leaf. With `trainable`, leaves record
    /// gradients during backward.
    pub fn leaves(&self, trainable: bool) -> Leaves<F> {
        let map = self
            .params
            .iter()
            .map(|(name, p)| {
                (
                    name.clone(),
                    Tensor::leaf(Arc::clone(&p.values), p.shape.clone(), trainable),
                )
            })
            .collect();
        Leaves { map }
    }

    /// SHA-256 over (name, shape, little-endian payload) in name order.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, p) in &self.params {
            hasher.update((name.len() as u32).to_le_bytes());
            hasher.update(name.as_bytes());
            hasher.update((p.shape.len() as u8).to_le_bytes());
            for &d in &p.shape {
                hasher.update((d as u64).to_le_bytes());
            }
            for v in p.values.iter() {
                hasher.update(v.to_f64().to_le_bytes());
            }
        }
        hex(&hasher.finalize())
    }

    /// Cast every buffer to a different scalar type (f32 → f64 for checks).
    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        let params = self
            .params
            .iter()
            .map(|(name, p)| {
                (
                    name.clone(),
                    Param {
                        values: Arc::new(
                            p.values.iter().map(|v| G::from_f64(v.to_f64())).collect(),
                        ),
                        shape: p.shape.clone(),
                    },
                )
            })
            .collect();
        ParamSet { params }
    }

    /// Verify that `self` provides exactly the names and shapes of `template`.
    pub fn validate_against(&self, template: &ParamSet<F>) -> Result<()> {
        for (name, want) in &template.params {
            match self.params.get(name) {
                None => {
                    return Err(Error::artifact_mismatch(format!(
                        "archive is missing tensor `{name}` (expected shape {:?})",
                        want.shape
                    )))
                }
                Some(got) if got.shape != want.shape => {
                    return Err(Error::artifact_mismatch(format!(
                        "tensor `{name}` shape mismatch: expected {:?}, found {:?}",
                        want.shape, got.shape
                    )))
                }
                Some(_) => {}
            }
        }
        for name in self.params.keys() {
            if !template.params.contains_key(name) {
                return Err(Error::artifact_mismatch(format!(
                    "archive contains unexpected tensor `{name}`"
                )));
            }
        }
        Ok(())
    }
}

impl<F: Scalar> std::fmt::Debug for ParamSet<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut map = f.debug_map();
        for (name, p) in &self.params {
            map.entry(name, &p.shape);
        }
        map.finish()
    }
}

/// Parameters bound as graph leaves for one forward/backward pass.
pub struct Leaves<F: Scalar> {
    map: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> Leaves<F> {
    /// Look up a bound parameter; unknown names are a programming error.
    pub fn get(&self, name: &str) -> &Tensor<F> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.map.iter()
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trunc_normal_is_bounded_and_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = ParamSet::<f32>::new();
        p.insert_trunc_normal("w", vec![64, 64], 0.02, &mut rng);
        let w = p.get("w").unwrap();
        assert!(w.values.iter().all(|v| v.abs() <= 0.04 + 1e-9));

        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let mut p2 = ParamSet::<f32>::new();
        p2.insert_trunc_normal("w", vec![64, 64], 0.02, &mut rng2);
        assert_eq!(p.checksum(), p2.checksum());

        let mut rng3 = ChaCha8Rng::seed_from_u64(8);
        let mut p3 = ParamSet::<f32>::new();
        p3.insert_trunc_normal("w", vec![64, 64], 0.02, &mut rng3);
        assert_ne!(p.checksum(), p3.checksum());
    }

    #[test]
    fn validate_reports_missing_and_mismatched() {
        let mut tmpl = ParamSet::<f32>::new();
        tmpl.insert_zeros("a", vec![2, 2]);
        tmpl.insert_zeros("b", vec![3]);

        let mut missing = ParamSet::<f32>::new();
        missing.insert_zeros("a", vec![2, 2]);
        let err = missing.validate_against(&tmpl).unwrap_err();
        assert!(err.to_string().contains("`b`"), "{err}");

        let mut wrong = ParamSet::<f32>::new();
        wrong.insert_zeros("a", vec![2, 2]);
        wrong.insert_zeros("b", vec![4]);
        let err = wrong.validate_against(&tmpl).unwrap_err();
        assert!(err.to_string().contains("expected [3], found [4]"), "{err}");
    }

    #[test]
    fn cast_roundtrip_preserves_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamSet::<f32>::new();
        p.insert_trunc_normal("w", vec![10], 0.02, &mut rng);
        let as64 = p.cast::<f64>();
        let back = as64.cast::<f32>();
        assert_eq!(&*p.get("w").unwrap().values, &*back.get("w").unwrap().values);
    }
}
