use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Chemical element symbol, stored upper-cased in at most two ASCII bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Element([u8; 2]);

impl Element {
    pub const H: Element = Element([b'H', b' ']);
    pub const D: Element = Element([b'D', b' ']);
    pub const C: Element = Element([b'C', b' ']);
    pub const N: Element = Element([b'N', b' ']);
    pub const O: Element = Element([b'O', b' ']);
    pub const S: Element = Element([b'S', b' ']);

    /// Parses a one- or two-letter symbol, ignoring surrounding whitespace and case.
    /// Returns `None` for empty or non-alphabetic input.
    pub fn from_symbol(symbol: &str) -> Option<Element> {
        let s = symbol.trim();
        let bytes = s.as_bytes();
        if bytes.is_empty() || bytes.len() > 2 || !bytes.iter().all(u8::is_ascii_alphabetic) {
            return None;
        }
        let mut out = [b' '; 2];
        for (slot, b) in out.iter_mut().zip(bytes) {
            *slot = b.to_ascii_uppercase();
        }
        Some(Element(out))
    }

    /// Infers the element from a PDB atom name: first non-digit character.
    pub fn infer_from_atom_name(name: &str) -> Option<Element> {
        name.trim()
            .chars()
            .find(|c| !c.is_ascii_digit())
            .and_then(|c| Element::from_symbol(&c.to_string()))
    }

    pub fn symbol(&self) -> &str {
        let len = if self.0[1] == b' ' { 1 } else { 2 };
        std::str::from_utf8(&self.0[..len]).unwrap_or("?")
    }

    pub fn is_hydrogen(&self) -> bool {
        *self == Element::H || *self == Element::D
    }

    /// Standard atomic mass in daltons for the elements that occur in peptides.
    pub fn mass(&self) -> Option<f64> {
        match self.symbol() {
            "H" | "D" => Some(1.008),
            "C" => Some(12.011),
            "N" => Some(14.007),
            "O" => Some(15.999),
            "S" => Some(32.06),
            _ => None,
        }
    }
}

impl fmt::Debug for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.symbol())
    }
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

impl Serialize for Element {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.symbol())
    }
}

impl<'de> Deserialize<'de> for Element {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Element::from_symbol(&s)
            .ok_or_else(|| serde::de::Error::custom(format!("invalid element symbol {s:?}")))
    }
}
