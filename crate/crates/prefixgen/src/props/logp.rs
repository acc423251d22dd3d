//! Additive atom-contribution LogP.
//!
//! Each atom is classed by element, aromaticity, and how many of its
//! neighbors are heteroatoms (anything but C and H, capped at two). Classes
//! and contributions live in a versioned TSV bundled into the binary; the
//! value is the plain sum over atoms, so LogP is additive over disconnected
//! components by construction.

use std::sync::OnceLock;

use crate::smiles::MolGraph;

const TABLE_V1: &str = include_str!("data/logp_v1.tsv");

/// Atom whose class is missing from the table. Its contribution is 0.0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownAtomType {
    pub atom: usize,
    pub element: String,
}

struct Row {
    element: String,
    aromatic: Option<bool>,
    het_bucket: Option<u8>,
    value: f64,
}

fn table() -> &'static [Row] {
    static TABLE: OnceLock<Vec<Row>> = OnceLock::new();
    TABLE.get_or_init(|| {
        TABLE_V1
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|line| {
                let mut f = line.split('\t');
                let mut field = || f.next().expect("logp table row has 4 fields");
                let element = field().to_string();
                let aromatic = match field() {
                    "*" => None,
                    "1" => Some(true),
                    _ => Some(false),
                };
                let het_bucket = match field() {
                    "*" => None,
                    n => Some(n.parse().expect("logp table het bucket")),
                };
                let value = field().parse().expect("logp table contribution");
                Row { element, aromatic, het_bucket, value }
            })
            .collect()
    })
}

fn lookup(element: &str, aromatic: bool, het_bucket: u8) -> Option<f64> {
    let mut best: Option<(u8, f64)> = None;
    for row in table() {
        if row.element != element {
            continue;
        }
        if row.aromatic.is_some_and(|a| a != aromatic) {
            continue;
        }
        if row.het_bucket.is_some_and(|h| h != het_bucket) {
            continue;
        }
        let specificity = row.aromatic.is_some() as u8 + row.het_bucket.is_some() as u8;
        if best.is_none_or(|(s, _)| specificity > s) {
            best = Some((specificity, row.value));
        }
    }
    best.map(|(_, v)| v)
}

pub fn logp(g: &MolGraph) -> f64 {
    logp_detailed(g).0
}

pub fn logp_detailed(g: &MolGraph) -> (f64, Vec<UnknownAtomType>) {
    let adj = g.adjacency();
    let mut total = 0.0;
    let mut warnings = Vec::new();
    for (idx, atom) in g.atoms.iter().enumerate() {
        let het = adj[idx]
            .iter()
            .filter(|(n, _)| {
                let e = g.atoms[*n].element.as_str();
                e != "C" && e != "H"
            })
            .count()
            .min(2) as u8;
        match lookup(&atom.element, atom.aromatic, het) {
            Some(v) => total += v,
            None => warnings.push(UnknownAtomType { atom: idx, element: atom.element.clone() }),
        }
    }
    (total, warnings)
}
