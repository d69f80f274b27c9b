//! Named parameter storage and the plain-text checkpoint format.
//!
//! Checkpoint grammar (UTF-8, one item per line):
//!
//! ```text
//! optibox-checkpoint 1
//! meta <key> <value...>            zero or more
//! param <name> <trainable 0|1> <rank> <dim>...
//! <value> <value> ...              exactly prod(dims) values, row-major
//! end
//! ```
//!
//! Values are written in shortest round-trip exponent form, so save/load is
//! lossless for every `f64` including infinities and NaN payload-free NaNs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "optibox-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Buffers (e.g. running statistics) are stored but never optimized.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    pub meta: BTreeMap<String, String>,
}

/// Tape handles for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct Bindings {
    vars: Vec<Var>,
}

impl std::ops::Index<ParamId> for Bindings {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Bindings {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Bindings over tape variables supplied in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bindings { vars }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor, trainable: bool) -> ParamId {
        assert!(
            !name.chars().any(char::is_whitespace),
            "parameter names must not contain whitespace"
        );
        assert!(self.find(name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name: name.to_string(),
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.find(name)
            .ok_or_else(|| Error::MissingAsset(format!("parameter {name}")))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.params[id.0].value.shape() {
            return Err(Error::Shape(format!(
                "set {}: {:?} vs {:?}",
                self.params[id.0].name,
                value.shape(),
                self.params[id.0].value.shape()
            )));
        }
        self.params[id.0].value = value;
        Ok(())
    }

    /// Binds every parameter onto `tape`. Trainable parameters for which
    /// `learn(name)` holds become gradient leaves; the rest are constants.
    pub fn bind_with(&self, tape: &mut Tape, learn: impl Fn(&str) -> bool) -> Bindings {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if p.trainable && learn(&p.name) {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Bindings { vars }
    }

    pub fn bind(&self, tape: &mut Tape, learn: bool) -> Bindings {
        self.bind_with(tape, |_| learn)
    }

    /// Gradients for each parameter after `tape.backward`; `None` for
    /// buffers and frozen parameters.
    pub fn gradients(&self, tape: &Tape, bindings: &Bindings) -> Vec<Option<Tensor>> {
        self.params
            .iter()
            .zip(&bindings.vars)
            .map(|(p, v)| {
                if p.trainable && tape.requires_grad(*v) {
                    Some(
                        tape.grad(*v)
                            .unwrap_or_else(|| Tensor::zeros(p.value.shape())),
                    )
                } else {
                    None
                }
            })
            .collect()
    }

    /// Copies every parameter whose name starts with `src_prefix` from `src`
    /// into this store under `dst_prefix`, bit-exact.
    pub fn copy_prefixed(
        &mut self,
        src: &ParamStore,
        src_prefix: &str,
        dst_prefix: &str,
    ) -> Result<usize> {
        let mut n = 0;
        for p in &src.params {
            if let Some(rest) = p.name.strip_prefix(src_prefix) {
                let dst = format!("{dst_prefix}{rest}");
                let id = self.id(&dst)?;
                self.set(id, p.value.clone())?;
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}");
        for (k, v) in &self.meta {
            let _ = writeln!(s, "meta {k} {v}");
        }
        for p in &self.params {
            let shape = p.value.shape();
            let _ = write!(
                s,
                "param {} {} {}",
                p.name,
                u8::from(p.trainable),
                shape.len()
            );
            for d in shape {
                let _ = write!(s, " {d}");
            }
            s.push('\n');
            let mut first = true;
            for v in p.value.data() {
                if !first {
                    s.push(' ');
                }
                first = false;
                let _ = write!(s, "{v:e}");
            }
            s.push('\n');
        }
        s.push_str("end\n");
        s
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let perr = |line: usize, msg: &str| Error::parse(origin, line, msg);
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (ln, header) = lines.next().ok_or_else(|| perr(1, "empty checkpoint"))?;
        let mut hp = header.split_whitespace();
        if hp.next() != Some(CHECKPOINT_MAGIC) {
            return Err(perr(ln, "bad magic"));
        }
        let version: u32 = hp
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| perr(ln, "missing version"))?;
        if version != CHECKPOINT_VERSION {
            return Err(perr(ln, &format!("unsupported version {version}")));
        }
        let mut store = ParamStore::new();
        let mut ended = false;
        while let Some((ln, line)) = lines.next() {
            if line == "end" {
                ended = true;
                break;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                store.meta.insert(k.to_string(), v.to_string());
                continue;
            }
            let Some(rest) = line.strip_prefix("param ") else {
                return Err(perr(ln, "expected `param`, `meta` or `end`"));
            };
            let f: Vec<&str> = rest.split_whitespace().collect();
            if f.len() < 3 {
                return Err(perr(ln, "truncated param header"));
            }
            let name = f[0];
            let trainable = match f[1] {
                "0" => false,
                "1" => true,
                _ => return Err(perr(ln, "trainable flag must be 0 or 1")),
            };
            let rank: usize = f[2].parse().map_err(|_| perr(ln, "bad rank"))?;
            if f.len() != 3 + rank {
                return Err(perr(ln, "rank does not match dims"));
            }
            let shape: Vec<usize> = f[3..]
                .iter()
                .map(|d| d.parse().map_err(|_| perr(ln, "bad dim")))
                .collect::<Result<_>>()?;
            let (vln, vline) = lines
                .next()
                .ok_or_else(|| perr(ln + 1, "missing values line"))?;
            let data: Vec<f64> = vline
                .split_whitespace()
                .map(|v| {
                    v.parse()
                        .map_err(|_| perr(vln, &format!("bad value {v:?}")))
                })
                .collect::<Result<_>>()?;
            let value = Tensor::new(shape, data).map_err(|e| perr(vln, &e.to_string()))?;
            if store.find(name).is_some() {
                return Err(perr(ln, &format!("duplicate parameter {name}")));
            }
            store.add(name, value, trainable);
        }
        if !ended {
            return Err(perr(text.lines().count(), "missing `end`"));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ParamStore::from_text(&text, path)
    }

    /// Replaces values from `other`, requiring identical names and shapes.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} parameters, model expects {}",
                other.params.len(),
                self.params.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Shape(format!(
                    "checkpoint parameter {} {:?} does not match {} {:?}",
                    src.name,
                    src.value.shape(),
                    dst.name,
                    dst.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        self.meta = other.meta.clone();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn truncated_checkpoint_names_line() {
        let text = "optibox-checkpoint 1\nparam w 1 2 2 2\n1 2 3\nend\n";
        let err = ParamStore::from_text(text, Path::new("x.ckpt")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = ParamStore::from_text("nope 1\n", Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn special_values_survive() {
        let mut s = ParamStore::new();
        s.add(
            "w",
            Tensor::row(vec![
                f64::INFINITY,
                f64::NEG_INFINITY,
                -0.0,
                f64::MIN_POSITIVE,
                5e-324,
            ]),
            true,
        );
        s.meta.insert("converged".into(), "true".into());
        let back = ParamStore::from_text(&s.to_text(), Path::new("x")).unwrap();
        let a: Vec<u64> = s
            .get(ParamId(0))
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        let b: Vec<u64> = back
            .get(ParamId(0))
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        assert_eq!(a, b);
        assert_eq!(back.meta.get("converged").map(String::as_str), Some("true"));
    }

    proptest! {
        #[test]
        fn checkpoint_round_trip_is_bit_exact(vals in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40),
                                              trainable in any::<bool>()) {
            let mut s = ParamStore::new();
            let n = vals.len();
            s.add("layer.w", Tensor::matrix(1, n, vals.clone()).unwrap(), trainable);
            s.add("layer.b", Tensor::row(vec![0.1; 3]), false);
            let back = ParamStore::from_text(&s.to_text(), Path::new("x")).unwrap();
            prop_assert_eq!(back.params().len(), 2);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back.params()[0].value), bits(&s.params()[0].value));
            prop_assert_eq!(back.params()[0].trainable, trainable);
            prop_assert_eq!(back, s);
        }
    }
}
