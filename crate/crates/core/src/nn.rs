//! Parameter storage, initialization, and the Adam optimizer shared by the
//! denoiser and the sync encoders.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::io;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable matrices.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    values: Vec<Array2<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    pub fn get(&self, id: ParamId) -> &Array2<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<T> {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn has_non_finite(&self) -> bool {
        self.values.iter().any(|v| v.iter().any(|x| !x.is_finite()))
    }

    /// Register every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Binding {
        let vars = self.values.iter().map(|v| tape.leaf(v.clone())).collect();
        Binding { vars }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        for (name, value) in self.names.iter().zip(&self.values) {
            io::write_matrix(&dir.join(format!("{name}.pdt")), value)?;
        }
        Ok(())
    }

    /// Load values for all registered parameters from `dir`, shape-checked.
    pub fn load(&mut self, dir: &Path) -> Result<()> {
        for i in 0..self.values.len() {
            let path = dir.join(format!("{}.pdt", self.names[i]));
            let loaded: Array2<T> = io::read_matrix(&path)?;
            if loaded.dim() != self.values[i].dim() {
                return Err(Error::format(
                    path.display().to_string(),
                    format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        self.names[i],
                        loaded.dim(),
                        self.values[i].dim()
                    ),
                ));
            }
            self.values[i] = loaded;
        }
        Ok(())
    }
}

/// Tape handles for a bound [`ParamStore`].
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Collect per-parameter gradients from a backward pass.
pub fn collect_grads<T: Scalar>(
    store: &ParamStore<T>,
    binding: &Binding,
    grads: &Grads<T>,
) -> Vec<Array2<T>> {
    store
        .ids()
        .map(|id| {
            let shape = store.get(id).dim();
            grads.get(binding.var(id), shape)
        })
        .collect()
}

pub fn add_assign_grads<T: Scalar>(acc: &mut [Array2<T>], delta: &[Array2<T>]) {
    for (a, d) in acc.iter_mut().zip(delta) {
        *a += d;
    }
}

/// Xavier/Glorot normal init.
pub fn xavier<T: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<T> {
    let scale = (2.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| {
        let n: f64 = StandardNormal.sample(rng);
        T::from_f64(n * scale)
    })
}

pub fn zeros<T: Scalar>(rows: usize, cols: usize) -> Array2<T> {
    Array2::zeros((rows, cols))
}

pub fn ones<T: Scalar>(rows: usize, cols: usize) -> Array2<T> {
    Array2::from_elem((rows, cols), T::one())
}

/// Identity-like rectangular matrix (ones on the main diagonal).
pub fn eye_like<T: Scalar>(rows: usize, cols: usize) -> Array2<T> {
    let mut m = Array2::zeros((rows, cols));
    for i in 0..rows.min(cols) {
        m[[i, i]] = T::one();
    }
    m
}

/// Delta kernel for a depthwise conv: passes the input through unchanged.
pub fn delta_kernel<T: Scalar>(width: usize, channels: usize) -> Array2<T> {
    let mut k = Array2::zeros((width, channels));
    for c in 0..channels {
        k[[width / 2, c]] = T::one();
    }
    k
}

/// Adam with optional global-norm gradient clipping.
pub struct Adam<T: Scalar> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    clip: Option<T>,
    step: u64,
    m: Vec<Array2<T>>,
    v: Vec<Array2<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, clip: Option<f64>) -> Self {
        let m = store.ids().map(|id| Array2::zeros(store.get(id).dim())).collect();
        let v = store.ids().map(|id| Array2::zeros(store.get(id).dim())).collect();
        Adam {
            lr: T::from_f64(lr),
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
            clip: clip.map(T::from_f64),
            step: 0,
            m,
            v,
        }
    }

    pub fn apply(&mut self, store: &mut ParamStore<T>, mut grads: Vec<Array2<T>>) {
        if let Some(max_norm) = self.clip {
            let total: T = grads
                .iter()
                .map(|g| g.iter().map(|&x| x * x).sum::<T>())
                .sum::<T>()
                .sqrt();
            if total > max_norm {
                let scale = max_norm / total;
                for g in &mut grads {
                    g.mapv_inplace(|x| x * scale);
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        for (id, g) in store.ids().zip(grads.iter()) {
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            ndarray::Zip::from(&mut *m).and(g).for_each(|mv, &gv| {
                *mv = self.beta1 * *mv + (T::one() - self.beta1) * gv;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|vv, &gv| {
                *vv = self.beta2 * *vv + (T::one() - self.beta2) * gv * gv;
            });
            let p = store.get_mut(id);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|pv, &mv, &vv| {
                let mhat = mv / bc1;
                let vhat = vv / bc2;
                *pv = *pv - self.lr * mhat / (vhat.sqrt() + self.eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", array![[5.0, -3.0]]);
        let mut opt = Adam::new(&store, 0.1, None);
        for _ in 0..500 {
            let g = store.get(id).clone(); // d/dx of 0.5 x^2
            opt.apply(&mut store, vec![g]);
        }
        assert!(store.get(id).iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn clipping_bounds_update_norm() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", array![[0.0]]);
        let before = store.get(id)[[0, 0]];
        let mut opt = Adam::new(&store, 1.0, Some(1e-3));
        opt.apply(&mut store, vec![array![[1e9]]]);
        // clipped gradient is tiny but Adam normalizes; just check finiteness
        assert!(store.get(id)[[0, 0]].is_finite());
        assert_ne!(store.get(id)[[0, 0]], before);
    }

    #[test]
    fn store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::<f64>::new();
        store.add("w", array![[1.0, 2.0], [3.0, 4.0]]);
        store.add("b", array![[0.5, -0.5]]);
        store.save(dir.path()).unwrap();

        let mut other = ParamStore::<f64>::new();
        other.add("w", Array2::zeros((2, 2)));
        other.add("b", Array2::zeros((1, 2)));
        other.load(dir.path()).unwrap();
        assert_eq!(other.get(other.by_name("w").unwrap()), &array![[1.0, 2.0], [3.0, 4.0]]);

        let mut wrong = ParamStore::<f64>::new();
        wrong.add("w", Array2::<f64>::zeros((3, 3)));
        assert!(wrong.load(dir.path()).is_err());
    }
}
