//! Path-tracking accessors over `serde_json::Value` so schema errors can name
//! the offending location (`$.blocks[2].channels`).

use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Clone, Copy)]
pub struct Node<'a> {
    pub value: &'a Value,
    path: &'a str,
}

pub struct Owned {
    value: Value,
}

impl Owned {
    pub fn parse(text: &str) -> Result<Self> {
        let value = serde_json::from_str(text).map_err(|e| Error::parse("$", e.to_string()))?;
        Ok(Owned { value })
    }

    pub fn root(&self) -> Node<'_> {
        Node {
            value: &self.value,
            path: "$",
        }
    }
}

impl<'a> Node<'a> {
    pub fn path(&self) -> &str {
        self.path
    }

    pub fn error(&self, message: impl Into<String>) -> Error {
        Error::parse(self.path, message)
    }

    pub fn object(&self) -> Result<&'a Map<String, Value>> {
        self.value.as_object().ok_or_else(|| self.error("expected an object"))
    }

    /// Runs `f` on the child at `key`; errors from `f` carry the child's path.
    pub fn field<T>(&self, key: &str, f: impl FnOnce(Node<'_>) -> Result<T>) -> Result<T> {
        let obj = self.object()?;
        let path = format!("{}.{key}", self.path);
        match obj.get(key) {
            Some(v) => f(Node { value: v, path: &path }),
            None => Err(Error::parse(path, "missing required field")),
        }
    }

    pub fn optional<T>(&self, key: &str, f: impl FnOnce(Node<'_>) -> Result<T>) -> Result<Option<T>> {
        let obj = self.object()?;
        let path = format!("{}.{key}", self.path);
        match obj.get(key) {
            Some(Value::Null) | None => Ok(None),
            Some(v) => f(Node { value: v, path: &path }).map(Some),
        }
    }

    pub fn items<T>(&self, mut f: impl FnMut(usize, Node<'_>) -> Result<T>) -> Result<Vec<T>> {
        let arr = self.value.as_array().ok_or_else(|| self.error("expected an array"))?;
        arr.iter()
            .enumerate()
            .map(|(i, v)| {
                let path = format!("{}[{i}]", self.path);
                f(i, Node { value: v, path: &path })
            })
            .collect()
    }

    pub fn uint(&self) -> Result<usize> {
        self.value
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| self.error(format!("expected a non-negative integer, got {}", self.value)))
    }

    pub fn uint_list(&self) -> Result<Vec<usize>> {
        self.items(|_, n| n.uint())
    }

    pub fn str(&self) -> Result<&'a str> {
        self.value
            .as_str()
            .ok_or_else(|| self.error(format!("expected a string, got {}", self.value)))
    }

    /// Rejects keys outside `allowed`.
    pub fn only_keys(&self, allowed: &[&str]) -> Result<()> {
        for key in self.object()?.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(Error::parse(format!("{}.{key}", self.path), "unknown field"));
            }
        }
        Ok(())
    }
}

/// Pretty JSON with keys in sorted order.
pub fn to_sorted_string<T: serde::Serialize>(value: &T) -> Result<String> {
    // serde_json's default map is ordered, so a round trip through Value sorts keys
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string_pretty(&v)?)
}
