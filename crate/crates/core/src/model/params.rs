//! Named parameter tensors with paired gradients.

use std::collections::HashSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use indexmap::IndexMap;

use super::arch::{ArchSpec, ParamKind, ENCODER_PREFIX};
use super::weights::load_weights;
use crate::error::{Error, Result};
use crate::ops::lecun_uniform_fill;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor4};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor<T: Scalar> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor4<T>,
    /// Always shaped like `value`.
    pub grad: Tensor4<T>,
}

impl<T: Scalar> ParamTensor<T> {
    pub fn new(name: impl Into<String>, kind: ParamKind, value: Tensor4<T>) -> Self {
        let grad = Tensor4::zeros(value.shape());
        ParamTensor {
            name: name.into(),
            kind,
            value,
            grad,
        }
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Ordered `name → ParamTensor` map.
///
/// Every mutable access to the values bumps a version counter, which lets a
/// recorded forward tape detect that the weights changed underneath it.
pub struct ParamStore<T: Scalar> {
    params: IndexMap<String, ParamTensor<T>>,
    id: u64,
    version: u64,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            params: IndexMap::new(),
            id: fresh_id(),
            version: 0,
        }
    }
}

impl<T: Scalar> Clone for ParamStore<T> {
    /// The clone is a distinct store: tapes recorded on one are stale for
    /// the other.
    fn clone(&self) -> Self {
        ParamStore {
            params: self.params.clone(),
            id: fresh_id(),
            version: 0,
        }
    }
}

impl<T: Scalar> PartialEq for ParamStore<T> {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
    }
}

impl<T: Scalar> fmt::Debug for ParamStore<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParamStore")
            .field("precision_bits", &T::BITS)
            .field("tensors", &self.params.len())
            .field("version", &self.version)
            .finish()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Bit width of the stored scalars (32 or 64).
    pub fn precision_bits(&self) -> u32 {
        T::BITS
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor4<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::ParamMismatch {
                reason: "duplicate parameter name".into(),
                names: vec![name],
            });
        }
        self.version += 1;
        self.params.insert(name.clone(), ParamTensor::new(name, kind, value));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.params.get(name)
    }

    /// Value of a parameter that must exist.
    pub fn value(&self, name: &str) -> Result<&Tensor4<T>> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::ParamMismatch {
                reason: "missing parameter".into(),
                names: vec![name.to_string()],
            })
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor<T>> {
        self.params.values()
    }

    /// Mutable access to every tensor; counts as a modification.
    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor<T>> {
        self.version += 1;
        self.params.values_mut()
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor4<T>> {
        self.version += 1;
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    /// Gradient access that leaves the version untouched.
    pub(crate) fn grad_mut(&mut self, name: &str) -> Option<&mut Tensor4<T>> {
        self.params.get_mut(name).map(|p| &mut p.grad)
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(T::zero());
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub(crate) fn id(&self) -> u64 {
        self.id
    }

    pub(crate) fn version(&self) -> u64 {
        self.version
    }

    /// Values converted to another precision; gradients start at zero.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in self.iter() {
            out.insert(p.name.clone(), p.kind, p.value.cast())
                .expect("names are unique in the source store");
        }
        out
    }

    /// Fails unless the store holds exactly the architecture's tensors with
    /// the expected shapes.
    pub fn check_against(&self, arch: &ArchSpec) -> Result<()> {
        let specs = arch.param_specs();
        let wanted: HashSet<&str> = specs.iter().map(|s| s.name.as_str()).collect();
        let missing: Vec<String> = specs
            .iter()
            .filter(|s| !self.contains(&s.name))
            .map(|s| s.name.clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::ParamMismatch {
                reason: "missing parameters".into(),
                names: missing,
            });
        }
        let extra: Vec<String> = self
            .names()
            .filter(|n| !wanted.contains(n))
            .map(String::from)
            .collect();
        if !extra.is_empty() {
            return Err(Error::ParamMismatch {
                reason: "unexpected parameters".into(),
                names: extra,
            });
        }
        let wrong: Vec<String> = specs
            .iter()
            .filter_map(|s| {
                let got = self.params[&s.name].value.shape();
                (got != s.shape).then(|| format!("{} ({got}, expected {})", s.name, s.shape))
            })
            .collect();
        if !wrong.is_empty() {
            return Err(Error::ParamMismatch {
                reason: "shape mismatch".into(),
                names: wrong,
            });
        }
        Ok(())
    }
}

/// How a fresh network's parameters are obtained.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum InitScheme {
    /// Every tensor drawn from LeCun uniform.
    Lecun,
    /// `enc.*` tensors from the file, the rest LeCun uniform.
    EncoderPretrained(PathBuf),
    /// Every tensor from the file.
    FullPretrained(PathBuf),
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitScheme::Lecun => f.write_str("lecun"),
            InitScheme::EncoderPretrained(p) => write!(f, "encoder:{}", p.display()),
            InitScheme::FullPretrained(p) => write!(f, "full:{}", p.display()),
        }
    }
}

impl FromStr for InitScheme {
    type Err = Error;

    /// `lecun`, `encoder:PATH` or `full:PATH`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::InvalidArgument(format!(
                "unknown init scheme `{s}`, expected lecun, encoder:PATH or full:PATH"
            ))
        };
        if s == "lecun" {
            return Ok(InitScheme::Lecun);
        }
        let (kind, path) = s.split_once(':').ok_or_else(bad)?;
        if path.is_empty() {
            return Err(bad());
        }
        match kind {
            "encoder" => Ok(InitScheme::EncoderPretrained(path.into())),
            "full" => Ok(InitScheme::FullPretrained(path.into())),
            _ => Err(bad()),
        }
    }
}

fn lecun_store<T: Scalar>(arch: &ArchSpec, rng: &mut Rng) -> ParamStore<T> {
    let mut store = ParamStore::new();
    for spec in arch.param_specs() {
        let value = lecun_uniform_fill(rng, spec.shape, spec.fan_in);
        store
            .insert(spec.name, spec.kind, value)
            .expect("architecture names are unique");
    }
    store
}

/// Copies the named tensors from `source`, which must hold all of them with
/// matching shapes.
fn overwrite_from<T: Scalar>(
    store: &mut ParamStore<T>,
    source: &ParamStore<f32>,
    names: &[String],
) -> Result<()> {
    let missing: Vec<String> = names
        .iter()
        .filter(|n| !source.contains(n))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::ParamMismatch {
            reason: "weight file lacks parameters".into(),
            names: missing,
        });
    }
    let wrong: Vec<String> = names
        .iter()
        .filter(|n| source.params[*n].value.shape() != store.params[*n].value.shape())
        .map(|n| {
            format!(
                "{n} (file {}, network {})",
                source.params[n].value.shape(),
                store.params[n].value.shape()
            )
        })
        .collect();
    if !wrong.is_empty() {
        return Err(Error::ParamMismatch {
            reason: "shape mismatch".into(),
            names: wrong,
        });
    }
    for n in names {
        let v = source.params[n].value.cast();
        *store.value_mut(n).expect("name checked above") = v;
    }
    Ok(())
}

/// Builds a store for `arch` from an already-loaded source of pretrained
/// tensors. `scheme` only selects which tensors are copied; its path is
/// not read.
pub fn init_params_with<T: Scalar>(
    arch: &ArchSpec,
    scheme: &InitScheme,
    source: Option<&ParamStore<f32>>,
    rng: &mut Rng,
) -> Result<ParamStore<T>> {
    // LeCun draws happen for every scheme so the decoder of an
    // encoder-pretrained run matches the lecun run with the same seed.
    let mut store = lecun_store(arch, rng);
    let names = match scheme {
        InitScheme::Lecun => return Ok(store),
        InitScheme::EncoderPretrained(_) => arch
            .param_names()
            .into_iter()
            .filter(|n| n.starts_with(ENCODER_PREFIX))
            .collect::<Vec<_>>(),
        InitScheme::FullPretrained(_) => arch.param_names(),
    };
    let source = source.ok_or_else(|| {
        Error::InvalidArgument(format!("init scheme {scheme} needs a weight source"))
    })?;
    if let InitScheme::FullPretrained(_) = scheme {
        let wanted: HashSet<&str> = names.iter().map(String::as_str).collect();
        let extra: Vec<String> = source
            .names()
            .filter(|n| !wanted.contains(n))
            .map(String::from)
            .collect();
        if !extra.is_empty() {
            return Err(Error::ParamMismatch {
                reason: "weight file has parameters the network lacks".into(),
                names: extra,
            });
        }
    }
    overwrite_from(&mut store, source, &names)?;
    Ok(store)
}

/// Creates a fresh parameter store for `arch`, reading the weight file of a
/// pretrained scheme.
pub fn init_params<T: Scalar>(arch: &ArchSpec, scheme: &InitScheme, rng: &mut Rng) -> Result<ParamStore<T>> {
    let source = match scheme {
        InitScheme::Lecun => None,
        InitScheme::EncoderPretrained(p) | InitScheme::FullPretrained(p) => Some(load_weights(p)?),
    };
    init_params_with(arch, scheme, source.as_ref(), rng)
}
