// SPDX-License-Identifier: Apache-2.0

//! Single-config imprint store and its binary file format.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "FWIM" | version u16 | spec_hash u64 | theta_star_hash u64 | N u64 | P u64
//! epsilon f64 | eta f64 | lambda f64 | steps u64 | variant u8 | flags u8
//! count u64
//! count x { example_id u64 | delta_plus P x f64 | present u8 | [delta_minus P x f64] }
//! ```
//!
//! `variant` is 0 for pair and 1 for single; `flags` bit 0 is drift
//! correction, bit 1 diagnostics. Records are written in ascending id order
//! so saving is byte-deterministic.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelSpec, ParameterVector};
use crate::simulator::{InfluenceImprint, SimulationConfig, Variant};

pub const MAGIC: &[u8; 4] = b"FWIM";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 * 8 + 3 * 8 + 8 + 1 + 1 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct ImprintStore {
    spec_hash: u64,
    theta_star_hash: u64,
    n: u64,
    p: u64,
    config: SimulationConfig,
    imprints: BTreeMap<u64, InfluenceImprint>,
}

impl ImprintStore {
    pub fn new(spec: &ModelSpec, theta_star: &ParameterVector, n: u64, config: SimulationConfig) -> Self {
        Self {
            spec_hash: spec.hash(),
            theta_star_hash: theta_star.content_hash(),
            n,
            p: spec.param_count() as u64,
            config,
            imprints: BTreeMap::new(),
        }
    }

    /// Builds a store from imprints that must agree on hashes, `N` and config.
    pub fn from_imprints(imprints: Vec<InfluenceImprint>) -> Result<Self> {
        let first = imprints.first().ok_or(Error::Empty("imprint list"))?;
        let mut store = Self {
            spec_hash: first.spec_hash,
            theta_star_hash: first.theta_star_hash,
            n: first.n,
            p: first.delta_plus.len() as u64,
            config: first.config,
            imprints: BTreeMap::new(),
        };
        for imp in imprints {
            store.insert(imp)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, imprint: InfluenceImprint) -> Result<()> {
        if imprint.spec_hash != self.spec_hash {
            return Err(Error::Stale {
                what: "imprint model spec",
                expected: self.spec_hash,
                found: imprint.spec_hash,
            });
        }
        if imprint.theta_star_hash != self.theta_star_hash {
            return Err(Error::Stale {
                what: "imprint reference parameters",
                expected: self.theta_star_hash,
                found: imprint.theta_star_hash,
            });
        }
        if imprint.config != self.config || imprint.n != self.n {
            return Err(Error::Config(format!(
                "imprint {} was simulated under a different configuration than the store",
                imprint.example_id
            )));
        }
        let p = self.p as usize;
        let minus_ok = match (&imprint.delta_minus, self.config.variant) {
            (Some(m), Variant::Pair) => m.len() == p,
            (None, Variant::Single) => true,
            _ => false,
        };
        if imprint.delta_plus.len() != p || !minus_ok {
            return Err(Error::Config(format!(
                "imprint {} does not match the store shape (P = {p}, variant {})",
                imprint.example_id,
                self.config.variant.as_str()
            )));
        }
        if self.imprints.contains_key(&imprint.example_id) {
            return Err(Error::Config(format!("duplicate imprint for example {}", imprint.example_id)));
        }
        self.imprints.insert(imprint.example_id, imprint);
        Ok(())
    }

    pub fn get(&self, example_id: u64) -> Option<&InfluenceImprint> {
        self.imprints.get(&example_id)
    }

    /// Imprints in ascending example id order.
    pub fn imprints(&self) -> impl Iterator<Item = &InfluenceImprint> {
        self.imprints.values()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.imprints.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.imprints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.imprints.is_empty()
    }

    pub fn spec_hash(&self) -> u64 {
        self.spec_hash
    }

    pub fn theta_star_hash(&self) -> u64 {
        self.theta_star_hash
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn config(&self) -> &SimulationConfig {
        &self.config
    }

    /// Fails with a staleness error unless the store was built for `spec`
    /// and `theta_star`.
    pub fn check_against(&self, spec: &ModelSpec, theta_star: &ParameterVector) -> Result<()> {
        if self.spec_hash != spec.hash() {
            return Err(Error::Stale {
                what: "imprint store model spec",
                expected: spec.hash(),
                found: self.spec_hash,
            });
        }
        if self.theta_star_hash != theta_star.content_hash() {
            return Err(Error::Stale {
                what: "imprint store reference parameters",
                expected: theta_star.content_hash(),
                found: self.theta_star_hash,
            });
        }
        Ok(())
    }

    fn record_len(&self) -> usize {
        let p = self.p as usize;
        8 + 8 * p + 1 + if self.config.variant == Variant::Pair { 8 * p } else { 0 }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.len() * self.record_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [self.spec_hash, self.theta_star_hash, self.n, self.p] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let c = &self.config;
        for v in [c.epsilon, c.eta, c.lambda] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&c.steps.to_le_bytes());
        out.push(match c.variant {
            Variant::Pair => 0,
            Variant::Single => 1,
        });
        out.push(u8::from(c.drift_correction) | (u8::from(c.record_diagnostics) << 1));
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for imp in self.imprints.values() {
            out.extend_from_slice(&imp.example_id.to_le_bytes());
            imp.delta_plus.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            match &imp.delta_minus {
                Some(m) => {
                    out.push(1);
                    m.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
                }
                None => out.push(0),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() < 4 {
            return Err(truncated(HEADER_LEN, bytes.len()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::BadMagic {
                what: "imprint store",
                expected: u32::from_be_bytes(*MAGIC),
                found: u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes")),
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(truncated(HEADER_LEN, bytes.len()));
        }
        r.pos = 4;
        let version = u16::from_le_bytes(r.take(2).try_into().expect("2 bytes"));
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                what: "imprint store",
                version,
            });
        }
        let spec_hash = r.u64();
        let theta_star_hash = r.u64();
        let n = r.u64();
        let p = r.u64();
        let epsilon = r.f64();
        let eta = r.f64();
        let lambda = r.f64();
        let steps = r.u64();
        let variant = match r.u8() {
            0 => Variant::Pair,
            1 => Variant::Single,
            other => return Err(corrupt(format!("unknown variant byte {other}"))),
        };
        let flags = r.u8();
        if flags & !0b11 != 0 {
            return Err(corrupt(format!("unknown flag bits {flags:#04x}")));
        }
        let config = SimulationConfig {
            epsilon,
            eta,
            steps,
            lambda,
            variant,
            drift_correction: flags & 1 != 0,
            record_diagnostics: flags & 2 != 0,
        };
        config
            .validate()
            .map_err(|e| corrupt(format!("invalid simulation config: {e}")))?;
        let count = r.u64();
        let mut store = Self {
            spec_hash,
            theta_star_hash,
            n,
            p,
            config,
            imprints: BTreeMap::new(),
        };
        let expected = (store.record_len() as u128)
            .checked_mul(count as u128)
            .map(|x| x + HEADER_LEN as u128)
            .filter(|&x| x <= u64::MAX as u128)
            .ok_or_else(|| corrupt(format!("record count {count} overflows")))? as u64;
        if (bytes.len() as u64) < expected {
            return Err(truncated(expected as usize, bytes.len()));
        }
        if (bytes.len() as u64) > expected {
            return Err(corrupt(format!(
                "{} trailing bytes after {count} records",
                bytes.len() as u64 - expected
            )));
        }
        let p = p as usize;
        let mut last_id = None;
        for _ in 0..count {
            let example_id = r.u64();
            if last_id.is_some_and(|l| l >= example_id) {
                return Err(corrupt(format!("record ids not strictly ascending at {example_id}")));
            }
            last_id = Some(example_id);
            let delta_plus = r.f64s(p);
            let delta_minus = match (r.u8(), variant) {
                (1, Variant::Pair) => Some(r.f64s(p)),
                (0, Variant::Single) => None,
                (b, _) => {
                    return Err(corrupt(format!(
                        "presence byte {b} inconsistent with variant {} for example {example_id}",
                        variant.as_str()
                    )))
                }
            };
            store.imprints.insert(
                example_id,
                InfluenceImprint {
                    example_id,
                    delta_plus,
                    delta_minus,
                    config,
                    theta_star_hash,
                    spec_hash,
                    n,
                },
            );
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// [`ImprintStore::load`] followed by [`ImprintStore::check_against`].
    pub fn load_for(path: &Path, spec: &ModelSpec, theta_star: &ParameterVector) -> Result<Self> {
        let store = Self::load(path)?;
        store.check_against(spec, theta_star)?;
        Ok(store)
    }
}

fn truncated(expected: usize, actual: usize) -> Error {
    Error::Truncated {
        what: "imprint store",
        expected: expected as u64,
        actual: actual as u64,
    }
}

fn corrupt(detail: String) -> Error {
    Error::Corrupt {
        what: "imprint store",
        detail,
    }
}

/// Cursor over a buffer whose length has already been checked.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> &[u8] {
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        s
    }

    fn u8(&mut self) -> u8 {
        self.take(1)[0]
    }

    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take(8).try_into().expect("8 bytes"))
    }

    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take(8).try_into().expect("8 bytes"))
    }

    fn f64s(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.f64()).collect()
    }
}
