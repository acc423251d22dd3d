//! Chemical property calculators: descriptors, LogP, QED, synthesizability,
//! Lipinski rule count, fingerprints, and the docking-score oracle interface.
//!
//! These are deliberately self-contained surrogates. They keep the documented
//! ranges and invariants (additivity, [0,1] bounds, determinism) without
//! claiming numeric agreement with any external chemistry toolkit.

mod fingerprint;
mod logp;

pub use fingerprint::{fingerprint, tanimoto, Fingerprint, FINGERPRINT_BITS};
pub use logp::{logp, logp_detailed, UnknownAtomType};

use crate::smiles::{BondOrder, MolGraph};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PropError {
    #[error("molecule has no atoms")]
    EmptyMolecule,
    #[error("fingerprint sizes differ: {a} vs {b} bits")]
    SizeMismatch { a: usize, b: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Descriptors {
    pub mol_weight: f64,
    pub hbd: u32,
    pub hba: u32,
    pub rotatable_bonds: u32,
    pub aromatic_rings: u32,
    pub heavy_atoms: u32,
}

pub fn descriptors(g: &MolGraph) -> Result<Descriptors, PropError> {
    if g.atoms.is_empty() {
        return Err(PropError::EmptyMolecule);
    }
    let adj = g.adjacency();
    let heavy_degree: Vec<usize> = (0..g.atoms.len())
        .map(|i| adj[i].iter().filter(|(n, _)| g.atoms[*n].element != "H").count())
        .collect();

    let mut mol_weight = 0.0;
    let mut hbd = 0;
    let mut hba = 0;
    let mut heavy_atoms = 0;
    for a in &g.atoms {
        mol_weight += atomic_mass(&a.element) + a.total_h() as f64 * atomic_mass("H");
        if a.element != "H" {
            heavy_atoms += 1;
        }
        if a.element == "N" || a.element == "O" {
            hba += 1;
            if a.total_h() >= 1 {
                hbd += 1;
            }
        }
    }

    // Single non-ring bonds whose endpoints are heavy and each keep another
    // heavy neighbor, which excludes terminal bonds.
    let rotatable_bonds = g
        .bonds
        .iter()
        .filter(|b| {
            b.order == BondOrder::Single
                && !g.is_ring_bond(b.i, b.j)
                && g.atoms[b.i].element != "H"
                && g.atoms[b.j].element != "H"
                && heavy_degree[b.i] >= 2
                && heavy_degree[b.j] >= 2
        })
        .count() as u32;

    let aromatic_rings = g
        .rings
        .iter()
        .filter(|r| r.iter().all(|&i| g.atoms[i].aromatic))
        .count() as u32;

    Ok(Descriptors { mol_weight, hbd, hba, rotatable_bonds, aromatic_rings, heavy_atoms })
}

/// Desirability centers and widths for the four QED terms, in order
/// mol_weight, logp, hbd, hba.
pub const QED_CENTERS: [f64; 4] = [300.0, 2.5, 1.0, 3.0];
pub const QED_WIDTHS: [f64; 4] = [150.0, 1.8, 2.0, 3.0];

/// Geometric mean of four Gaussian desirabilities. 1.0 exactly when every
/// descriptor sits on its center, decaying monotonically away from each.
pub fn qed(d: &Descriptors, logp: f64) -> f64 {
    let xs = [d.mol_weight, logp, d.hbd as f64, d.hba as f64];
    let mut log_sum = 0.0;
    for ((x, mu), sigma) in xs.iter().zip(QED_CENTERS).zip(QED_WIDTHS) {
        log_sum += -((x - mu) * (x - mu)) / (2.0 * sigma * sigma);
    }
    (log_sum / 4.0).exp()
}

/// Complexity penalty weights: per ring, macrocycle presence, per heavy atom
/// over 25, per bracket atom.
pub const SA_RING_WEIGHT: f64 = 0.12;
pub const SA_MACROCYCLE_WEIGHT: f64 = 0.30;
pub const SA_HEAVY_EXCESS_WEIGHT: f64 = 0.03;
pub const SA_BRACKET_WEIGHT: f64 = 0.05;
/// Rings longer than this count as macrocycles.
pub const SA_MACROCYCLE_LEN: usize = 8;
/// Heavy atoms beyond this each add to the complexity penalty.
pub const SA_HEAVY_BUDGET: u32 = 25;

/// Synthesizability score in [0,1], larger meaning simpler to make. One
/// minus a clamped weighted complexity sum.
pub fn sa_score(g: &MolGraph) -> f64 {
    let heavy = g.atoms.iter().filter(|a| a.element != "H").count() as u32;
    let brackets = g.atoms.iter().filter(|a| a.bracket).count();
    let macrocycle = g.rings.iter().any(|r| r.len() > SA_MACROCYCLE_LEN);
    let complexity = SA_RING_WEIGHT * g.rings.len() as f64
        + SA_MACROCYCLE_WEIGHT * macrocycle as u8 as f64
        + SA_HEAVY_EXCESS_WEIGHT * heavy.saturating_sub(SA_HEAVY_BUDGET) as f64
        + SA_BRACKET_WEIGHT * brackets as f64;
    1.0 - complexity.clamp(0.0, 1.0)
}

/// How many of the five rules hold: MW ≤ 500, LogP ≤ 5, HBD ≤ 5, HBA ≤ 10,
/// rotatable bonds ≤ 10.
pub fn lipinski(d: &Descriptors, logp: f64) -> u8 {
    (d.mol_weight <= 500.0) as u8
        + (logp <= 5.0) as u8
        + (d.hbd <= 5) as u8
        + (d.hba <= 10) as u8
        + (d.rotatable_bonds <= 10) as u8
}

pub const N_PROPERTIES: usize = 5;

/// Scalar condition values in fixed order: vina, qed, sa, logp, lipinski.
/// `mask` marks which entries hold a value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropVec {
    pub vina: f64,
    pub qed: f64,
    pub sa: f64,
    pub logp: f64,
    pub lipinski: u8,
    pub mask: [bool; N_PROPERTIES],
}

impl PropVec {
    pub fn values(&self) -> [f64; N_PROPERTIES] {
        [self.vina, self.qed, self.sa, self.logp, self.lipinski as f64]
    }

    /// Copy with property `index` moved by `delta`. The rule count lives on
    /// an integer grid, so its shift rounds and saturates.
    pub fn shifted(&self, index: usize, delta: f64) -> PropVec {
        let mut c = *self;
        match index {
            0 => c.vina += delta,
            1 => c.qed += delta,
            2 => c.sa += delta,
            3 => c.logp += delta,
            4 => c.lipinski = (c.lipinski as f64 + delta).round().clamp(0.0, 255.0) as u8,
            _ => panic!("property index {index} out of range"),
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("vina oracle failed: {0}")]
pub struct VinaError(pub String);

/// Docking score source. Real docking is out of scope; implementations are
/// stubs or external integrations.
pub trait VinaOracle {
    fn score(&self, g: &MolGraph) -> Result<f64, VinaError>;
}

/// Cheap stand-in: −0.1 per heavy atom, clamped to [−12, 0].
pub struct SurrogateVina;

impl VinaOracle for SurrogateVina {
    fn score(&self, g: &MolGraph) -> Result<f64, VinaError> {
        let heavy = g.atoms.iter().filter(|a| a.element != "H").count() as f64;
        Ok((-0.1 * heavy).clamp(-12.0, 0.0))
    }
}

pub struct ConstantVina(pub f64);

impl VinaOracle for ConstantVina {
    fn score(&self, _g: &MolGraph) -> Result<f64, VinaError> {
        Ok(self.0)
    }
}

/// Assembles the full scalar condition vector. An oracle failure clears the
/// vina mask bit and leaves the other four entries intact.
pub fn property_vector(g: &MolGraph, oracle: &dyn VinaOracle) -> Result<PropVec, PropError> {
    let d = descriptors(g)?;
    let lp = logp(g);
    let (vina, vina_known) = match oracle.score(g) {
        Ok(v) => (v, true),
        Err(_) => (0.0, false),
    };
    Ok(PropVec {
        vina,
        qed: qed(&d, lp),
        sa: sa_score(g),
        logp: lp,
        lipinski: lipinski(&d, lp),
        mask: [vina_known, true, true, true, true],
    })
}

fn atomic_mass(element: &str) -> f64 {
    // Standard atomic weights for the elements this corpus can produce.
    // Anything outside the list contributes no mass.
    const MASSES: &[(&str, f64)] = &[
        ("H", 1.008),
        ("He", 4.003),
        ("Li", 6.94),
        ("Be", 9.012),
        ("B", 10.81),
        ("C", 12.011),
        ("N", 14.007),
        ("O", 15.999),
        ("F", 18.998),
        ("Ne", 20.180),
        ("Na", 22.990),
        ("Mg", 24.305),
        ("Al", 26.982),
        ("Si", 28.085),
        ("P", 30.974),
        ("S", 32.06),
        ("Cl", 35.45),
        ("Ar", 39.948),
        ("K", 39.098),
        ("Ca", 40.078),
        ("Fe", 55.845),
        ("Co", 58.933),
        ("Ni", 58.693),
        ("Cu", 63.546),
        ("Zn", 65.38),
        ("As", 74.922),
        ("Se", 78.971),
        ("Br", 79.904),
        ("Ag", 107.868),
        ("Sn", 118.710),
        ("Sb", 121.760),
        ("Te", 127.60),
        ("I", 126.904),
        ("Pt", 195.084),
        ("Au", 196.967),
        ("Hg", 200.592),
    ];
    MASSES.iter().find(|(s, _)| *s == element).map_or(0.0, |(_, m)| *m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smiles::parse;

    fn d(s: &str) -> Descriptors {
        descriptors(&parse(s).unwrap()).unwrap()
    }

    #[test]
    fn benzene_weight() {
        assert!((d("c1ccccc1").mol_weight - 78.114).abs() < 0.01);
    }

    #[test]
    fn methane_has_no_donors_acceptors_or_rotors() {
        let m = d("C");
        assert_eq!((m.hbd, m.hba, m.rotatable_bonds), (0, 0, 0));
        assert_eq!(m.heavy_atoms, 1);
    }

    #[test]
    fn ethanol_descriptors() {
        let e = d("CCO");
        assert!((e.mol_weight - 46.069).abs() < 0.01);
        // Both bonds touch a terminal heavy atom, so nothing rotates.
        assert_eq!((e.hbd, e.hba, e.rotatable_bonds), (1, 1, 0));
    }

    #[test]
    fn butane_central_bond_rotates() {
        assert_eq!(d("CCCC").rotatable_bonds, 1);
        assert_eq!(d("CCCCC").rotatable_bonds, 2);
    }

    #[test]
    fn ring_bonds_do_not_rotate() {
        assert_eq!(d("C1CCCCC1").rotatable_bonds, 0);
        assert_eq!(d("C1CCCCC1CC").rotatable_bonds, 1);
    }

    #[test]
    fn aromatic_ring_count() {
        assert_eq!(d("c1ccccc1").aromatic_rings, 1);
        assert_eq!(d("C1CCCCC1").aromatic_rings, 0);
        assert_eq!(d("c1ccc2ccccc2c1").aromatic_rings, 2);
    }

    #[test]
    fn explicit_hydrogen_atoms_are_not_heavy() {
        let g = parse("[H]C([H])([H])[H]").unwrap();
        let m = descriptors(&g).unwrap();
        assert_eq!(m.heavy_atoms, 1);
        assert!((m.mol_weight - (12.011 + 4.0 * 1.008)).abs() < 1e-9);
    }

    #[test]
    fn empty_graph_is_rejected() {
        assert_eq!(descriptors(&parse("").unwrap()), Err(PropError::EmptyMolecule));
    }

    #[test]
    fn qed_is_one_at_the_centers() {
        let ideal = Descriptors {
            mol_weight: 300.0,
            hbd: 1,
            hba: 3,
            rotatable_bonds: 0,
            aromatic_rings: 0,
            heavy_atoms: 20,
        };
        assert_eq!(qed(&ideal, 2.5), 1.0);
    }

    #[test]
    fn qed_decays_monotonically_in_weight() {
        let mut probe = Descriptors {
            mol_weight: 300.0,
            hbd: 1,
            hba: 3,
            rotatable_bonds: 0,
            aromatic_rings: 0,
            heavy_atoms: 20,
        };
        let mut last = qed(&probe, 2.5);
        for mw in [400.0, 600.0, 900.0, 1500.0] {
            probe.mol_weight = mw;
            let q = qed(&probe, 2.5);
            assert!(q < last);
            last = q;
        }
    }

    #[test]
    fn ethanol_qed_matches_hand_evaluation() {
        let e = d("CCO");
        let q = qed(&e, logp(&parse("CCO").unwrap()));
        assert!((q - 0.502169386390).abs() < 1e-9);
    }

    #[test]
    fn sa_of_methane_is_maximal() {
        assert!(sa_score(&parse("C").unwrap()) >= 0.95);
    }

    #[test]
    fn sa_of_a_thirty_heavy_four_ring_assembly_is_low() {
        let s = "CCCCCCC1CCCCC1C1CCCCC1C1CCCCC1C1CCCCC1";
        let g = parse(s).unwrap();
        assert_eq!(g.rings.len(), 4);
        assert_eq!(g.atoms.len(), 30);
        let score = sa_score(&g);
        assert!((score - 0.37).abs() < 1e-12);
        assert!(score < 0.5);
    }

    #[test]
    fn sa_macrocycle_penalty_and_clamp() {
        let macro12 = format!("C1{}C1", "C".repeat(10));
        let plain = sa_score(&parse("C1CCCCC1").unwrap());
        let big = sa_score(&parse(&macro12).unwrap());
        assert!(big < plain);
        // 60 heavy atoms blow past the budget; the clamp holds the floor.
        let huge = format!("C(Br){}", "C(Br)".repeat(29));
        let s = sa_score(&parse(&huge).unwrap());
        assert!((0.0..=1.0).contains(&s));
        assert_eq!(s, 0.0);
    }

    #[test]
    fn sa_stays_in_unit_interval_across_corpus() {
        for s in ["C", "CCO", "c1ccccc1", "C1CC1C1CC1", "[NH4+]", "C%12CCCCC%12"] {
            let v = sa_score(&parse(s).unwrap());
            assert!((0.0..=1.0).contains(&v), "{s}");
        }
    }

    #[test]
    fn benzene_obeys_all_five_rules() {
        let b = d("c1ccccc1");
        assert_eq!(lipinski(&b, logp(&parse("c1ccccc1").unwrap())), 5);
    }

    #[test]
    fn total_rule_breaker_scores_zero() {
        // 11 hydroxylated carbons, then 8 double-iodinated ones: heavy over
        // budget on every axis.
        let s = format!("{}{}", "C(O)".repeat(11), "C(I)(I)".repeat(8));
        let g = parse(&s).unwrap();
        let m = descriptors(&g).unwrap();
        let lp = logp(&g);
        assert!(m.mol_weight > 500.0);
        assert!(lp > 5.0);
        assert!(m.hbd > 5 && m.hba > 10 && m.rotatable_bonds > 10);
        assert_eq!(lipinski(&m, lp), 0);
    }

    #[test]
    fn rule_count_is_monotone_at_the_weight_boundary() {
        let mut probe = Descriptors {
            mol_weight: 501.0,
            hbd: 0,
            hba: 0,
            rotatable_bonds: 0,
            aromatic_rings: 0,
            heavy_atoms: 30,
        };
        let above = lipinski(&probe, 0.0);
        probe.mol_weight = 499.0;
        assert!(lipinski(&probe, 0.0) >= above);
    }

    #[test]
    fn property_vector_composes_the_calculators() {
        let g = parse("c1ccccc1").unwrap();
        let pv = property_vector(&g, &ConstantVina(-6.0)).unwrap();
        assert_eq!(pv.vina, -6.0);
        assert_eq!(pv.lipinski, 5);
        assert!(pv.mask.iter().all(|&m| m));
        assert_eq!(pv, property_vector(&g, &ConstantVina(-6.0)).unwrap());
    }

    #[test]
    fn oracle_failure_masks_only_vina() {
        struct Down;
        impl VinaOracle for Down {
            fn score(&self, _: &MolGraph) -> Result<f64, VinaError> {
                Err(VinaError("socket closed".into()))
            }
        }
        let pv = property_vector(&parse("CCO").unwrap(), &Down).unwrap();
        assert_eq!(pv.mask, [false, true, true, true, true]);
        assert!(pv.qed > 0.0 && pv.sa > 0.0);
    }

    #[test]
    fn surrogate_vina_is_clamped() {
        let small = SurrogateVina.score(&parse("CCO").unwrap()).unwrap();
        assert!((small + 0.3).abs() < 1e-12);
        let huge = format!("C{}", "C".repeat(200));
        assert_eq!(SurrogateVina.score(&parse(&huge).unwrap()).unwrap(), -12.0);
    }
}
