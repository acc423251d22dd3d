//! Circular fingerprints and Tanimoto similarity.
//!
//! Each atom starts from an invariant over its own fields, then absorbs its
//! neighborhood one bond hop per round. Every per-round invariant lights one
//! of 2048 bits. Neighbor lists are sorted before hashing, so any relabeling
//! of the same molecule produces the same bit set.

use crate::smiles::{BondOrder, MolGraph};

use super::PropError;

pub const FINGERPRINT_BITS: usize = 2048;
const WORDS: usize = FINGERPRINT_BITS / 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fingerprint {
    pub bits: Vec<u64>,
    pub radius: usize,
}

impl Fingerprint {
    pub fn empty(radius: usize) -> Fingerprint {
        Fingerprint { bits: vec![0; WORDS], radius }
    }

    pub fn set(&mut self, bit: usize) {
        self.bits[bit / 64] |= 1 << (bit % 64);
    }

    pub fn popcount(&self) -> u32 {
        self.bits.iter().map(|w| w.count_ones()).sum()
    }
}

pub fn fingerprint(g: &MolGraph, radius: usize) -> Fingerprint {
    let mut fp = Fingerprint::empty(radius);
    let adj = g.adjacency();
    let mut inv: Vec<u64> = g
        .atoms
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let heavy_degree =
                adj[i].iter().filter(|(n, _)| g.atoms[*n].element != "H").count() as u64;
            let mut h = Fnv::new();
            h.write(a.element.as_bytes());
            h.write(&[a.aromatic as u8]);
            h.write(&a.charge.to_le_bytes());
            h.write(&(a.total_h() as u64).to_le_bytes());
            h.write(&heavy_degree.to_le_bytes());
            h.finish()
        })
        .collect();
    for &i in inv.iter() {
        fp.set((i % FINGERPRINT_BITS as u64) as usize);
    }

    for _ in 0..radius {
        let mut next = Vec::with_capacity(inv.len());
        for (i, &own) in inv.iter().enumerate() {
            let mut shell: Vec<(u8, u64)> =
                adj[i].iter().map(|&(n, order)| (order_code(order), inv[n])).collect();
            shell.sort_unstable();
            let mut h = Fnv::new();
            h.write(&own.to_le_bytes());
            for (code, ninv) in shell {
                h.write(&[code]);
                h.write(&ninv.to_le_bytes());
            }
            let v = h.finish();
            fp.set((v % FINGERPRINT_BITS as u64) as usize);
            next.push(v);
        }
        inv = next;
    }
    fp
}

pub fn tanimoto(a: &Fingerprint, b: &Fingerprint) -> Result<f64, PropError> {
    if a.bits.len() != b.bits.len() {
        return Err(PropError::SizeMismatch { a: a.bits.len() * 64, b: b.bits.len() * 64 });
    }
    let mut inter = 0u32;
    let mut union = 0u32;
    for (x, y) in a.bits.iter().zip(&b.bits) {
        inter += (x & y).count_ones();
        union += (x | y).count_ones();
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

fn order_code(order: BondOrder) -> u8 {
    match order {
        BondOrder::Single => 1,
        BondOrder::Double => 2,
        BondOrder::Triple => 3,
        BondOrder::Aromatic => 4,
    }
}

// FNV-1a, 64 bit. Fixed constants keep bit assignments stable across
// platforms and builds.
struct Fnv(u64);

impl Fnv {
    fn new() -> Fnv {
        Fnv(0xcbf29ce484222325)
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x100000001b3);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}
