//! Molecular graphs built from SMILES text.
//!
//! The parser resolves branches, ring closures, and bracket atoms, then
//! assigns implicit hydrogens from a standard valence table. Aromaticity
//! follows token case: lowercase atoms are aromatic, and an unannotated bond
//! is aromatic only when both endpoints are. No electron counting happens
//! here; an aromatic unbracketed atom simply reserves one valence unit for
//! its ring system when the table leaves room.
//!
//! Overfilled valences are not parse errors. `parse` builds whatever graph
//! the string describes and `validate` reports violations as data, so a
//! sampled string is scored instead of aborting the caller.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::{tokenize, TokenKind, TokenizeError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Atom {
    /// Canonical element symbol, uppercase first letter ("C", "Cl", "Se").
    pub element: String,
    pub charge: i32,
    /// Hydrogens written inside a bracket atom.
    pub explicit_h: u8,
    /// Hydrogens added to reach the nearest allowed valence. Always 0 for
    /// bracket atoms, which state their hydrogens explicitly.
    pub implicit_h: u8,
    pub aromatic: bool,
    pub bracket: bool,
}

impl Atom {
    pub fn total_h(&self) -> u32 {
        self.explicit_h as u32 + self.implicit_h as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    /// Valence units the bond consumes at each endpoint. Aromatic bonds
    /// count one; the ring π contribution is accounted per atom instead.
    pub fn valence_units(self) -> u32 {
        match self {
            BondOrder::Single | BondOrder::Aromatic => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    pub order: BondOrder,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MolGraph {
    pub atoms: Vec<Atom>,
    pub bonds: Vec<Bond>,
    /// Smallest cycle basis, each ring listed in traversal order. Left empty
    /// for molecules above [`MAX_RING_PERCEPTION_ATOMS`].
    pub rings: Vec<Vec<usize>>,
}

/// Ring perception cutoff. Beyond this the cycle list stays empty.
pub const MAX_RING_PERCEPTION_ATOMS: usize = 64;

impl MolGraph {
    pub fn adjacency(&self) -> Vec<Vec<(usize, BondOrder)>> {
        let mut adj = vec![Vec::new(); self.atoms.len()];
        for b in &self.bonds {
            adj[b.i].push((b.j, b.order));
            adj[b.j].push((b.i, b.order));
        }
        adj
    }

    pub fn is_ring_bond(&self, i: usize, j: usize) -> bool {
        self.rings.iter().any(|ring| {
            (0..ring.len()).any(|k| {
                let (a, b) = (ring[k], ring[(k + 1) % ring.len()]);
                (a == i && b == j) || (a == j && b == i)
            })
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
    #[error("ring bond {digit} opened but never closed")]
    UnclosedRingBond { digit: u16 },
    #[error("branch opened but never closed")]
    UnclosedBranch,
    #[error("')' at token {position} without a matching '('")]
    UnmatchedBranchClose { position: usize },
    #[error("bond at token {position} has nothing to attach to")]
    DanglingBond { position: usize },
    #[error("ring bond {digit} closed with conflicting bond orders")]
    MismatchedRingBond { digit: u16 },
    #[error("duplicate bond between atoms {i} and {j}")]
    DuplicateBond { i: usize, j: usize },
    #[error("malformed bracket atom {text}")]
    BadBracketAtom { text: String },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ValidityIssue {
    #[error("molecule has no atoms")]
    EmptyMolecule,
    #[error("atom {atom} ({element}) carries valence {total}, at most {max_allowed} allowed")]
    ValenceViolation { atom: usize, element: String, total: i32, max_allowed: i32 },
    #[error("unparseable: {error}")]
    Unparseable { error: ParseError },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidityReport {
    pub valid: bool,
    pub reasons: Vec<ValidityIssue>,
}

pub fn parse(smiles: &str) -> Result<MolGraph, ParseError> {
    let tokens = tokenize(smiles)?;
    let mut atoms: Vec<Atom> = Vec::new();
    let mut bonds: Vec<Bond> = Vec::new();
    let mut prev: Option<usize> = None;
    // Explicit bond token waiting for its second endpoint, with its position.
    let mut pending: Option<(BondOrder, usize)> = None;
    let mut stack: Vec<Option<usize>> = Vec::new();
    let mut open_rings: BTreeMap<u16, (usize, Option<BondOrder>)> = BTreeMap::new();

    for (pos, tok) in tokens.iter().enumerate() {
        match tok.kind {
            TokenKind::Atom | TokenKind::BracketAtom => {
                let atom = if tok.kind == TokenKind::Atom {
                    plain_atom(&tok.text)
                } else {
                    bracket_atom(&tok.text)?
                };
                let idx = atoms.len();
                atoms.push(atom);
                if let Some(p) = prev {
                    let order = pending
                        .take()
                        .map(|(o, _)| o)
                        .unwrap_or_else(|| default_order(&atoms[p], &atoms[idx]));
                    push_bond(&mut bonds, p, idx, order)?;
                }
                prev = Some(idx);
            }
            TokenKind::Bond => {
                if prev.is_none() || pending.is_some() {
                    return Err(ParseError::DanglingBond { position: pos });
                }
                pending = Some((bond_order(&tok.text), pos));
            }
            TokenKind::RingBond | TokenKind::TwoDigitRingBond => {
                let digit = ring_index(&tok.text);
                let at = prev.ok_or(ParseError::DanglingBond { position: pos })?;
                match open_rings.remove(&digit) {
                    Some((other, far)) => {
                        let near = pending.take().map(|(o, _)| o);
                        let order = match (far, near) {
                            (None, None) => default_order(&atoms[other], &atoms[at]),
                            (Some(o), None) | (None, Some(o)) => o,
                            (Some(a), Some(b)) if a == b => a,
                            _ => return Err(ParseError::MismatchedRingBond { digit }),
                        };
                        push_bond(&mut bonds, other, at, order)?;
                    }
                    None => {
                        let order = pending.take().map(|(o, _)| o);
                        open_rings.insert(digit, (at, order));
                    }
                }
            }
            TokenKind::Branch => {
                if let Some((_, p)) = pending {
                    return Err(ParseError::DanglingBond { position: p });
                }
                if tok.text == "(" {
                    stack.push(prev);
                } else {
                    prev = stack
                        .pop()
                        .ok_or(ParseError::UnmatchedBranchClose { position: pos })?;
                }
            }
            TokenKind::Dot => {
                if let Some((_, p)) = pending {
                    return Err(ParseError::DanglingBond { position: p });
                }
                prev = None;
            }
            TokenKind::Special => {}
        }
    }
    if let Some((_, p)) = pending {
        return Err(ParseError::DanglingBond { position: p });
    }
    if let Some((&digit, _)) = open_rings.iter().next() {
        return Err(ParseError::UnclosedRingBond { digit });
    }
    if !stack.is_empty() {
        return Err(ParseError::UnclosedBranch);
    }

    assign_implicit_h(&mut atoms, &bonds);
    let rings = perceive_rings(atoms.len(), &bonds);
    Ok(MolGraph { atoms, bonds, rings })
}

/// Valence check over the standard table. Elements outside the table are
/// skipped; only overfilled valences count, an underfilled atom is fine.
pub fn validate(g: &MolGraph) -> ValidityReport {
    let mut reasons = Vec::new();
    if g.atoms.is_empty() {
        reasons.push(ValidityIssue::EmptyMolecule);
    }
    let base = bond_sums(g.atoms.len(), &g.bonds);
    for (idx, atom) in g.atoms.iter().enumerate() {
        let allowed = allowed_valences(&atom.element);
        if allowed.is_empty() {
            continue;
        }
        let pi = if atom.bracket {
            0
        } else {
            hydrogen_fill(atom.aromatic, &atom.element, base[idx]).1
        };
        let total = (base[idx] + pi + atom.total_h()) as i32;
        let max_allowed = *allowed.iter().max().unwrap() as i32 + atom.charge;
        if total > max_allowed {
            reasons.push(ValidityIssue::ValenceViolation {
                atom: idx,
                element: atom.element.clone(),
                total,
                max_allowed,
            });
        }
    }
    ValidityReport { valid: reasons.is_empty(), reasons }
}

/// Parse then validate; parse failures become report reasons.
pub fn validate_smiles(smiles: &str) -> ValidityReport {
    match parse(smiles) {
        Ok(g) => validate(&g),
        Err(error) => ValidityReport {
            valid: false,
            reasons: vec![ValidityIssue::Unparseable { error }],
        },
    }
}

#[rustfmt::skip]
const ELEMENTS: &[&str] = &[
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S",
    "Cl", "Ar", "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga",
    "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd",
    "Ag", "Cd", "In", "Sn", "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm",
    "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W", "Re", "Os",
    "Ir", "Pt", "Au", "Hg", "Tl", "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th", "Pa",
    "U", "Np", "Pu", "Am", "Cm", "Bk", "Cf", "Es", "Fm", "Md", "No", "Lr", "Rf", "Db", "Sg",
    "Bh", "Hs", "Mt", "Ds", "Rg", "Cn", "Nh", "Fl", "Mc", "Lv", "Ts", "Og",
];

fn is_element(symbol: &str) -> bool {
    ELEMENTS.contains(&symbol)
}

fn allowed_valences(element: &str) -> &'static [u32] {
    match element {
        "H" => &[1],
        "B" => &[3],
        "C" => &[4],
        "N" => &[3, 5],
        "O" => &[2],
        "P" => &[3, 5],
        "S" => &[2, 4, 6],
        "F" | "Cl" | "Br" | "I" => &[1],
        _ => &[],
    }
}

/// Implicit hydrogen count and aromatic π allowance for an unbracketed atom
/// whose explicit bonds sum to `base`. The target is the smallest allowed
/// valence that fits; an aromatic atom first reserves one unit for its ring
/// system when the target leaves room.
fn hydrogen_fill(aromatic: bool, element: &str, base: u32) -> (u8, u32) {
    let target = allowed_valences(element).iter().copied().find(|&v| v >= base);
    match target {
        None => (0, 0),
        Some(t) => {
            let pi = if aromatic && t - base >= 1 { 1 } else { 0 };
            ((t - base - pi) as u8, pi)
        }
    }
}

fn assign_implicit_h(atoms: &mut [Atom], bonds: &[Bond]) {
    let base = bond_sums(atoms.len(), bonds);
    for (atom, &b) in atoms.iter_mut().zip(&base) {
        atom.implicit_h = if atom.bracket {
            0
        } else {
            hydrogen_fill(atom.aromatic, &atom.element, b).0
        };
    }
}

fn bond_sums(n: usize, bonds: &[Bond]) -> Vec<u32> {
    let mut base = vec![0u32; n];
    for b in bonds {
        base[b.i] += b.order.valence_units();
        base[b.j] += b.order.valence_units();
    }
    base
}

fn push_bond(bonds: &mut Vec<Bond>, i: usize, j: usize, order: BondOrder) -> Result<(), ParseError> {
    let key = (i.min(j), i.max(j));
    if i == j || bonds.iter().any(|b| (b.i.min(b.j), b.i.max(b.j)) == key) {
        return Err(ParseError::DuplicateBond { i: key.0, j: key.1 });
    }
    bonds.push(Bond { i, j, order });
    Ok(())
}

fn default_order(a: &Atom, b: &Atom) -> BondOrder {
    if a.aromatic && b.aromatic {
        BondOrder::Aromatic
    } else {
        BondOrder::Single
    }
}

fn bond_order(text: &str) -> BondOrder {
    match text {
        "=" => BondOrder::Double,
        "#" => BondOrder::Triple,
        ":" => BondOrder::Aromatic,
        // '/' and '\' carry stereo information this model ignores.
        _ => BondOrder::Single,
    }
}

fn ring_index(text: &str) -> u16 {
    text.trim_start_matches('%').parse().expect("ring token text is digits")
}

fn plain_atom(text: &str) -> Atom {
    let aromatic = text.chars().next().is_some_and(|c| c.is_ascii_lowercase());
    Atom {
        element: canonical_element(text),
        charge: 0,
        explicit_h: 0,
        implicit_h: 0,
        aromatic,
        bracket: false,
    }
}

fn canonical_element(text: &str) -> String {
    let mut chars = text.chars();
    let mut s = String::with_capacity(text.len());
    if let Some(c) = chars.next() {
        s.push(c.to_ascii_uppercase());
    }
    s.extend(chars);
    s
}

/// Bracket atom fields in order: isotope (ignored), element, chirality marks
/// (ignored), hydrogen count, charge. Anything left over is malformed.
fn bracket_atom(text: &str) -> Result<Atom, ParseError> {
    let bad = || ParseError::BadBracketAtom { text: text.to_string() };
    let inner = text
        .strip_prefix('[')
        .and_then(|t| t.strip_suffix(']'))
        .ok_or_else(bad)?;
    let b = inner.as_bytes();
    let mut i = 0;

    let mut isotope_digits = 0;
    while i < b.len() && b[i].is_ascii_digit() && isotope_digits < 3 {
        i += 1;
        isotope_digits += 1;
    }

    let rest = &inner[i..];
    let (symbol, aromatic) = if rest.starts_with("se") || rest.starts_with("as") {
        (&rest[..2], true)
    } else if !rest.is_empty() && matches!(b[i], b'b' | b'c' | b'n' | b'o' | b'p' | b's') {
        (&rest[..1], true)
    } else if !rest.is_empty() && b[i].is_ascii_uppercase() {
        let two_letter = rest.len() > 1 && b[i + 1].is_ascii_lowercase() && is_element(&rest[..2]);
        let symbol = if two_letter { &rest[..2] } else { &rest[..1] };
        if !is_element(symbol) {
            return Err(bad());
        }
        (symbol, false)
    } else {
        return Err(bad());
    };
    let element = canonical_element(symbol);
    i += symbol.len();

    while i < b.len() && b[i] == b'@' {
        i += 1;
    }

    let mut explicit_h = 0u8;
    if i < b.len() && b[i] == b'H' {
        i += 1;
        let start = i;
        while i < b.len() && b[i].is_ascii_digit() && i - start < 2 {
            i += 1;
        }
        explicit_h = if i > start { inner[start..i].parse().map_err(|_| bad())? } else { 1 };
    }

    let mut charge = 0i32;
    if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
        let sign = if b[i] == b'+' { 1 } else { -1 };
        let mark = b[i];
        let mut repeats = 0;
        while i < b.len() && b[i] == mark {
            i += 1;
            repeats += 1;
        }
        let start = i;
        while i < b.len() && b[i].is_ascii_digit() && i - start < 2 {
            i += 1;
        }
        let magnitude: i32 = if i > start {
            if repeats != 1 {
                return Err(bad());
            }
            inner[start..i].parse().map_err(|_| bad())?
        } else {
            repeats
        };
        charge = sign * magnitude;
    }

    if i != b.len() {
        return Err(bad());
    }
    Ok(Atom { element, charge, explicit_h, implicit_h: 0, aromatic, bracket: true })
}

/// Smallest cycle basis, Horton style: every candidate cycle is a shortest
/// root-to-x path plus a shortest root-to-y path plus the edge (x, y).
/// Candidates sorted by length enter greedily when independent over GF(2)
/// edge sets, until the basis reaches rank E − V + components.
fn perceive_rings(n: usize, bonds: &[Bond]) -> Vec<Vec<usize>> {
    if n == 0 || n > MAX_RING_PERCEPTION_ATOMS || bonds.is_empty() {
        return Vec::new();
    }
    let mut adj = vec![Vec::new(); n];
    let mut edge_id = HashMap::new();
    for (e, b) in bonds.iter().enumerate() {
        adj[b.i].push(b.j);
        adj[b.j].push(b.i);
        edge_id.insert((b.i.min(b.j), b.i.max(b.j)), e);
    }

    let mut components = 0;
    let mut seen_comp = vec![false; n];
    for s in 0..n {
        if !seen_comp[s] {
            components += 1;
            let mut queue = vec![s];
            seen_comp[s] = true;
            while let Some(v) = queue.pop() {
                for &w in &adj[v] {
                    if !seen_comp[w] {
                        seen_comp[w] = true;
                        queue.push(w);
                    }
                }
            }
        }
    }
    let rank = (bonds.len() + components).saturating_sub(n);
    if rank == 0 {
        return Vec::new();
    }

    // Keyed by (length, vertices) so iteration is shortest-first and stable.
    let mut candidates: BTreeSet<(usize, Vec<usize>)> = BTreeSet::new();
    for root in 0..n {
        let (dist, parent) = bfs_tree(root, &adj);
        for b in bonds {
            let (px, py) = match (walk_up(b.i, root, &dist, &parent), walk_up(b.j, root, &dist, &parent)) {
                (Some(px), Some(py)) => (px, py),
                _ => continue,
            };
            let mut verts = px;
            verts.extend(py[1..].iter().rev());
            if verts.len() < 3 {
                continue;
            }
            let mut mask = 0u64;
            if verts.iter().all(|&v| {
                let fresh = mask >> v & 1 == 0;
                mask |= 1 << v;
                fresh
            }) {
                let canon = canonical_cycle(&verts);
                candidates.insert((canon.len(), canon));
            }
        }
    }

    let words = bonds.len().div_ceil(64);
    // Reduced basis vectors keyed by pivot bit, iterated high-to-low.
    let mut basis: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    let mut rings = Vec::new();
    for (_, verts) in candidates {
        let mut v = vec![0u64; words];
        for k in 0..verts.len() {
            let (a, b) = (verts[k], verts[(k + 1) % verts.len()]);
            let e = edge_id[&(a.min(b), a.max(b))];
            v[e / 64] ^= 1 << (e % 64);
        }
        for (&p, bv) in basis.iter().rev() {
            if v[p / 64] >> (p % 64) & 1 == 1 {
                for (vw, bw) in v.iter_mut().zip(bv) {
                    *vw ^= bw;
                }
            }
        }
        if let Some(p) = highest_set_bit(&v) {
            basis.insert(p, v);
            rings.push(verts);
            if rings.len() == rank {
                break;
            }
        }
    }
    rings
}

fn bfs_tree(root: usize, adj: &[Vec<usize>]) -> (Vec<usize>, Vec<usize>) {
    let n = adj.len();
    let mut dist = vec![usize::MAX; n];
    let mut parent = vec![usize::MAX; n];
    let mut queue = std::collections::VecDeque::new();
    dist[root] = 0;
    queue.push_back(root);
    while let Some(v) = queue.pop_front() {
        for &w in &adj[v] {
            if dist[w] == usize::MAX {
                dist[w] = dist[v] + 1;
                parent[w] = v;
                queue.push_back(w);
            }
        }
    }
    (dist, parent)
}

/// Path root..=x along BFS parents, or None when x is unreachable.
fn walk_up(x: usize, root: usize, dist: &[usize], parent: &[usize]) -> Option<Vec<usize>> {
    if dist[x] == usize::MAX {
        return None;
    }
    let mut path = vec![x];
    let mut v = x;
    while v != root {
        v = parent[v];
        path.push(v);
    }
    path.reverse();
    Some(path)
}

/// Rotate to start at the smallest vertex, pick the lexicographically
/// smaller direction. Equal cycles then compare equal as vectors.
fn canonical_cycle(verts: &[usize]) -> Vec<usize> {
    let k = verts.len();
    let pos = (0..k).min_by_key(|&i| verts[i]).unwrap();
    let fwd: Vec<usize> = (0..k).map(|i| verts[(pos + i) % k]).collect();
    let bwd: Vec<usize> = (0..k).map(|i| verts[(pos + k - i) % k]).collect();
    if fwd <= bwd {
        fwd
    } else {
        bwd
    }
}

fn highest_set_bit(v: &[u64]) -> Option<usize> {
    for (w, &word) in v.iter().enumerate().rev() {
        if word != 0 {
            return Some(w * 64 + 63 - word.leading_zeros() as usize);
        }
    }
    None
}
