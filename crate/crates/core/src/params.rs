//! Named parameter storage.
//!
//! Parameters live in an ordered map keyed by dotted paths such as
//! `enc.0.lfse0.head.w`. Initialization walks the model through [`Init`];
//! the forward pass binds every tensor to a tape variable and resolves
//! names through a [`Scope`].

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{contract, ensure, Result};
use crate::nn::attention_hidden;
use crate::ssm::{S6Params, S6Vars, S6_PARAM_NAMES};
use crate::tensor::{Element, Tensor};

/// Reduction ratio of channel attention.
pub const CA_REDUCTION: usize = 4;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T: Element> {
    map: IndexMap<String, Tensor<T>>,
}

impl<T: Element> ParamSet<T> {
    pub fn new() -> Self {
        Self { map: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        ensure!(!self.map.contains_key(&name), "duplicate parameter {name}");
        self.map.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .ok_or_else(|| contract!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| contract!("missing parameter {name}"))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    pub fn tensors(&self) -> Vec<Tensor<T>> {
        self.map.values().cloned().collect()
    }

    /// Replaces every tensor, in insertion order.
    pub fn set_tensors(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        ensure!(
            values.len() == self.map.len(),
            "{} tensors for {} parameters",
            values.len(),
            self.map.len()
        );
        for ((name, slot), v) in self.map.iter_mut().zip(values) {
            ensure!(
                slot.shape() == v.shape(),
                "parameter {name} has shape {:?}, replacement {:?}",
                slot.shape(),
                v.shape()
            );
            *slot = v;
        }
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> ParamSet<U> {
        ParamSet {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Puts every tensor on `tape`, as gradient leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, T> {
        Bound {
            vars: self
                .map
                .iter()
                .map(|(k, v)| {
                    let var = if trainable {
                        tape.leaf(v.clone())
                    } else {
                        tape.constant(v.clone())
                    };
                    (k.clone(), var)
                })
                .collect(),
        }
    }

    /// Binds every tensor as a constant except `name`, which maps to `var`.
    pub fn bind_with_override<'t>(&self, tape: &'t Tape<T>, name: &str, var: Var<'t, T>) -> Bound<'t, T> {
        let mut bound = self.bind(tape, false);
        if let Some(slot) = bound.vars.get_mut(name) {
            *slot = var;
        }
        bound
    }

    /// Parameters whose path starts with `prefix.`, with the prefix removed.
    pub fn subset(&self, prefix: &str) -> ParamSet<T> {
        let p = format!("{prefix}.");
        ParamSet {
            map: self
                .map
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&p).map(|rest| (rest.to_string(), v.clone())))
                .collect(),
        }
    }
}

/// A [`ParamSet`] bound to tape variables.
pub struct Bound<'t, T: Element> {
    vars: IndexMap<String, Var<'t, T>>,
}

impl<'t, T: Element> Bound<'t, T> {
    pub fn root(&self) -> Scope<'_, 't, T> {
        Scope {
            bound: self,
            prefix: String::new(),
        }
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var<'t, T>)> + '_ {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Name resolution relative to a path prefix.
#[derive(Clone)]
pub struct Scope<'a, 't, T: Element> {
    bound: &'a Bound<'t, T>,
    prefix: String,
}

impl<'a, 't, T: Element> Scope<'a, 't, T> {
    pub fn child(&self, name: &str) -> Self {
        Self {
            bound: self.bound,
            prefix: join(&self.prefix, name),
        }
    }

    pub fn path(&self) -> &str {
        &self.prefix
    }

    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        let key = join(&self.prefix, name);
        self.bound
            .vars
            .get(&key)
            .copied()
            .ok_or_else(|| contract!("missing parameter {key}"))
    }

    pub fn s6(&self, name: &str) -> Result<S6Vars<'t, T>> {
        let s = self.child(name);
        let [a_log, d_skip, w_b, w_c, w_dt_in, w_dt_out, b_dt] = [0, 1, 2, 3, 4, 5, 6]
            .map(|i| s.get(S6_PARAM_NAMES[i]));
        Ok(S6Vars {
            a_log: a_log?,
            d_skip: d_skip?,
            w_b: w_b?,
            w_c: w_c?,
            w_dt_in: w_dt_in?,
            w_dt_out: w_dt_out?,
            b_dt: b_dt?,
        })
    }
}

/// Deterministic initializer writing into a [`ParamSet`] under a prefix.
pub struct Init<'a, T: Element> {
    set: &'a mut ParamSet<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Element> Init<'a, T> {
    pub fn new(set: &'a mut ParamSet<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            set,
            rng,
            prefix: String::new(),
        }
    }

    pub fn child(&mut self, name: &str) -> Init<'_, T> {
        Init {
            prefix: join(&self.prefix, name),
            set: self.set,
            rng: self.rng,
        }
    }

    fn put(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        self.set.insert(join(&self.prefix, name), t)
    }

    fn uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let rng = &mut *self.rng;
        Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..bound)))
    }

    /// Weight `[cout, cin_g, k, k]` and bias `[cout]` under `name`.
    pub fn conv(&mut self, name: &str, cout: usize, cin_g: usize, k: usize) -> Result<()> {
        let fan_in = cin_g * k * k;
        let w = self.uniform(&[cout, cin_g, k, k], fan_in);
        let b = self.uniform(&[cout], fan_in);
        let mut c = self.child(name);
        c.put("w", w)?;
        c.put("b", b)
    }

    /// Weight `[cout, cin]` and bias `[cout]` under `name`.
    pub fn linear(&mut self, name: &str, cout: usize, cin: usize) -> Result<()> {
        let w = self.uniform(&[cout, cin], cin);
        let b = self.uniform(&[cout], cin);
        let mut c = self.child(name);
        c.put("w", w)?;
        c.put("b", b)
    }

    pub fn layernorm(&mut self, name: &str, c: usize) -> Result<()> {
        let mut s = self.child(name);
        s.put("g", Tensor::ones(&[c]))?;
        s.put("b", Tensor::zeros(&[c]))
    }

    pub fn scalar(&mut self, name: &str, v: f64) -> Result<()> {
        self.put(name, Tensor::scalar(T::of(v)))
    }

    pub fn s6(&mut self, name: &str, d: usize, n: usize) -> Result<()> {
        let p = S6Params::<T>::init(d, n, self.rng);
        let mut s = self.child(name);
        for (pname, t) in S6_PARAM_NAMES.iter().zip(p.tensors()) {
            s.put(pname, t.clone())?;
        }
        Ok(())
    }

    /// Squeeze-and-excitation weights for `c` channels.
    pub fn channel_attention(&mut self, name: &str, c: usize) -> Result<()> {
        let h = attention_hidden(c, CA_REDUCTION);
        let w1 = self.uniform(&[c, h], c);
        let b1 = self.uniform(&[h], c);
        let w2 = self.uniform(&[h, c], h);
        let b2 = self.uniform(&[c], h);
        let mut s = self.child(name);
        s.put("w1", w1)?;
        s.put("b1", b1)?;
        s.put("w2", w2)?;
        s.put("b2", b2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn init_names_and_shapes() {
        let mut set = ParamSet::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        {
            let mut root = Init::new(&mut set, &mut rng);
            let mut enc = root.child("enc");
            let mut blk = enc.child("0");
            blk.conv("head", 8, 64, 3).unwrap();
            blk.scalar("alpha", 0.5).unwrap();
            blk.layernorm("ln", 8).unwrap();
        }
        let names: Vec<&str> = set.names().collect();
        assert_eq!(
            names,
            ["enc.0.head.w", "enc.0.head.b", "enc.0.alpha", "enc.0.ln.g", "enc.0.ln.b"]
        );
        assert_eq!(set.get("enc.0.head.w").unwrap().shape(), &[8, 64, 3, 3]);
        assert_eq!(set.numel(), 8 * 64 * 9 + 8 + 1 + 16);
        let bound = 1.0 / (64.0f32 * 9.0).sqrt();
        assert!(set.get("enc.0.head.w").unwrap().data().iter().all(|v| v.abs() <= bound));
        assert!(set.insert("enc.0.alpha", Tensor::scalar(0.0)).is_err());
        assert_eq!(set.subset("enc.0").len(), 5);
    }

    #[test]
    fn scope_resolves_paths() {
        let mut set = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        Init::new(&mut set, &mut rng).child("a").s6("s6", 4, 2).unwrap();
        let tape = Tape::new();
        let bound = set.bind(&tape, true);
        let scope = bound.root().child("a");
        assert_eq!(scope.path(), "a");
        let s6 = scope.s6("s6").unwrap();
        assert_eq!(s6.w_b.shape(), vec![4, 2]);
        assert!(scope.get("nope").is_err());
    }

    #[test]
    fn same_seed_same_values() {
        let build = || {
            let mut set = ParamSet::<f32>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut root = Init::new(&mut set, &mut rng);
            root.conv("c", 4, 2, 3).unwrap();
            root.channel_attention("ca", 8).unwrap();
            set
        };
        assert_eq!(build(), build());
    }
}
