//! Named flat parameter vectors.

use std::fmt;

use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::arch::ArchitectureSpec;
use crate::error::{Error, Result};

/// Ordered trainable values with their fully qualified names.
///
/// Serializes as a JSON object whose key order is the declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    names: Vec<String>,
    values: Vec<f64>,
}

impl ParameterVector {
    pub fn new(names: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if names.len() != values.len() {
            return Err(Error::Contract(format!(
                "{} names for {} values",
                names.len(),
                values.len()
            )));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::Validation(format!("duplicate parameter `{n}`")));
            }
        }
        Ok(ParameterVector { names, values })
    }

    /// Values in the architecture's declaration order.
    pub fn for_arch(arch: &ArchitectureSpec, values: Vec<f64>) -> Result<Self> {
        ParameterVector::new(arch.param_names(), values)
    }

    pub fn zeros(arch: &ArchitectureSpec) -> Self {
        let names = arch.param_names();
        let values = vec![0.0; names.len()];
        ParameterVector { names, values }
    }

    /// Build from `(name, value)` pairs in any order, laid out for `arch`.
    pub fn from_pairs<'a>(arch: &ArchitectureSpec, pairs: impl IntoIterator<Item = (&'a str, f64)>) -> Result<Self> {
        let mut p = ParameterVector::zeros(arch);
        let mut seen = vec![false; p.len()];
        for (name, v) in pairs {
            let i = p
                .index_of(name)
                .ok_or_else(|| Error::Validation(format!("`{name}` is not a parameter of {}", arch.canonical())))?;
            p.values[i] = v;
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Validation(format!("missing parameter `{}`", p.names[i])));
        }
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.index_of(name).map(|i| self.values[i])
    }

    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        let i = self
            .index_of(name)
            .ok_or_else(|| Error::Validation(format!("unknown parameter `{name}`")))?;
        self.values[i] = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().copied())
    }

    /// Names and order must match the architecture and all values be finite.
    pub fn check_layout(&self, arch: &ArchitectureSpec) -> Result<()> {
        let expected = arch.param_names();
        if expected != self.names {
            return Err(Error::Validation(format!(
                "parameters do not match {}: expected [{}], got [{}]",
                arch.canonical(),
                expected.join(", "),
                self.names.join(", ")
            )));
        }
        if let Some((n, v)) = self.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Validation(format!("parameter `{n}` is not finite ({v})")));
        }
        Ok(())
    }
}

impl Serialize for ParameterVector {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(self.len()))?;
        for (n, v) in self.iter() {
            m.serialize_entry(n, &v)?;
        }
        m.end()
    }
}

impl<'de> Deserialize<'de> for ParameterVector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = ParameterVector;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object mapping parameter names to numbers")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Self::Value, A::Error> {
                let mut names = Vec::new();
                let mut values = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, f64>()? {
                    names.push(k);
                    values.push(v);
                }
                ParameterVector::new(names, values).map_err(serde::de::Error::custom)
            }
        }
        d.deserialize_map(V)
    }
}
