//! Solvent-accessible surface area, buried-surface fractions and peptide masses.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::element::Element;
use crate::fragment_forge::LigandAtom;
use crate::geometry::{add, cross, dist_sq, dot, norm, normalize, scale, sub, Vec3};
use crate::grid::SpatialGrid;
use crate::structure_io::HeavyAtom;

#[derive(Debug, Error, PartialEq)]
pub enum SurfaceError {
    #[error("ligand has no solvent-accessible surface")]
    ZeroSurface,
    #[error("no atomic mass for element {0}")]
    UnknownElement(String),
}

/// Anything with an element and a position.
pub trait Atomic {
    fn element(&self) -> Element;
    fn pos(&self) -> Vec3;
}

impl Atomic for HeavyAtom {
    fn element(&self) -> Element {
        self.element
    }
    fn pos(&self) -> Vec3 {
        self.pos
    }
}

impl Atomic for LigandAtom {
    fn element(&self) -> Element {
        self.element
    }
    fn pos(&self) -> Vec3 {
        self.pos
    }
}

impl Atomic for (Element, Vec3) {
    fn element(&self) -> Element {
        self.0
    }
    fn pos(&self) -> Vec3 {
        self.1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RbsaMode {
    /// Fraction of the free ligand surface buried by the pocket.
    #[default]
    LigandSide,
    /// Fraction of the summed free surfaces of both partners buried in the complex.
    Complex,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SasaConfig {
    pub probe_radius: f64,
    pub sphere_points: usize,
    pub vdw_radii: Vec<(Element, f64)>,
    pub default_radius: f64,
    pub rbsa_mode: RbsaMode,
}

impl Default for SasaConfig {
    fn default() -> Self {
        Self {
            probe_radius: 1.4,
            sphere_points: 960,
            vdw_radii: vec![
                (Element::C, 1.70),
                (Element::N, 1.55),
                (Element::O, 1.52),
                (Element::S, 1.80),
            ],
            default_radius: 1.70,
            rbsa_mode: RbsaMode::LigandSide,
        }
    }
}

impl SasaConfig {
    pub fn radius(&self, element: Element) -> f64 {
        self.vdw_radii
            .iter()
            .find(|(e, _)| *e == element)
            .map_or(self.default_radius, |(_, r)| *r)
    }
}

/// Deterministic quasi-uniform points on the unit sphere (golden-angle spiral).
pub fn fibonacci_sphere(n: usize) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect()
}

/// Per-atom SASA (Å²) of the first `n_targets` atoms, with every atom acting as occluder.
/// Lattice frames come from the targets alone, so appending occluders can only bury points.
fn sasa_of_prefix<A: Atomic>(atoms: &[A], n_targets: usize, config: &SasaConfig) -> Vec<f64> {
    assert!(config.sphere_points >= 32, "sphere_points must be at least 32");
    assert!(config.probe_radius >= 0.0, "probe radius must be non-negative");
    if n_targets == 0 {
        return Vec::new();
    }
    let radii: Vec<f64> = atoms
        .iter()
        .map(|a| config.radius(a.element()) + config.probe_radius)
        .collect();
    let max_r = radii.iter().cloned().fold(0.0, f64::max);
    let grid = SpatialGrid::new(atoms.iter().map(Atomic::pos).collect(), 2.0 * max_r);
    let sphere = fibonacci_sphere(config.sphere_points);
    let mut neighbours: Vec<(f64, usize)> = Vec::new();

    (0..n_targets)
        .map(|i| {
            let center = atoms[i].pos();
            let ri = radii[i];
            neighbours.clear();
            grid.for_each_within(center, ri + max_r, |j, d2| {
                let reach = ri + radii[j];
                if j != i && d2 < reach * reach {
                    neighbours.push((d2, j));
                }
            });
            neighbours.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let frame = local_frame(
                center,
                neighbours.iter().filter(|&&(_, j)| j < n_targets).map(|&(_, j)| atoms[j].pos()),
            );
            let mut last_hit = 0usize;
            let exposed = sphere
                .iter()
                .filter(|u| {
                    let p = add(center, scale(frame_apply(&frame, **u), ri));
                    let buried_by = |j: usize| dist_sq(p, atoms[j].pos()) < radii[j] * radii[j];
                    if neighbours.get(last_hit).is_some_and(|&(_, j)| buried_by(j)) {
                        return false;
                    }
                    match neighbours.iter().position(|&(_, j)| buried_by(j)) {
                        Some(k) => {
                            last_hit = k;
                            false
                        }
                        None => true,
                    }
                })
                .count();
            4.0 * std::f64::consts::PI * ri * ri * exposed as f64 / sphere.len() as f64
        })
        .collect()
}

/// Orthonormal frame attached to the local geometry: z toward the nearest neighbour, x in
/// the plane of the first non-collinear one. Orienting the lattice this way makes the
/// point count follow the molecule under rotation instead of the lab axes.
fn local_frame(center: Vec3, mut neighbours: impl Iterator<Item = Vec3>) -> [Vec3; 3] {
    let Some(first) = neighbours.next() else {
        return [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    };
    let ez = normalize(sub(first, center));
    let ex = neighbours
        .map(|p| {
            let v = sub(p, center);
            sub(v, scale(ez, dot(v, ez)))
        })
        .find(|v| norm(*v) > 1e-6 * (1.0 + norm(sub(first, center))))
        .map(normalize)
        .unwrap_or_else(|| {
            let helper = if ez[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
            normalize(cross(helper, ez))
        });
    [ex, cross(ez, ex), ez]
}

fn frame_apply(frame: &[Vec3; 3], u: Vec3) -> Vec3 {
    add(add(scale(frame[0], u[0]), scale(frame[1], u[1])), scale(frame[2], u[2]))
}

/// Shrake–Rupley per-atom solvent-accessible surface area in Å².
pub fn shrake_rupley<A: Atomic>(atoms: &[A], config: &SasaConfig) -> Vec<f64> {
    sasa_of_prefix(atoms, atoms.len(), config)
}

/// Per-atom SASA of `targets` in the presence of extra `occluders`.
pub fn occluded_sasa<T: Atomic, O: Atomic>(targets: &[T], occluders: &[O], config: &SasaConfig) -> Vec<f64> {
    let mut all: Vec<(Element, Vec3)> = targets.iter().map(|a| (a.element(), a.pos())).collect();
    all.extend(occluders.iter().map(|a| (a.element(), a.pos())));
    sasa_of_prefix(&all, targets.len(), config)
}

pub fn total_sasa<A: Atomic>(atoms: &[A], config: &SasaConfig) -> f64 {
    shrake_rupley(atoms, config).iter().sum()
}

/// Relative buried surface area of a ligand in a pocket, clamped to `[0, 1]`.
pub fn compute_rbsa<L: Atomic, P: Atomic>(
    ligand: &[L],
    pocket: &[P],
    config: &SasaConfig,
) -> Result<f64, SurfaceError> {
    let lig: Vec<(Element, Vec3)> = ligand.iter().map(|a| (a.element(), a.pos())).collect();
    let free_ligand: f64 = total_sasa(&lig, config);
    if free_ligand <= 0.0 {
        return Err(SurfaceError::ZeroSurface);
    }
    if pocket.is_empty() {
        return Ok(0.0);
    }
    let mut complex = lig.clone();
    complex.extend(pocket.iter().map(|a| (a.element(), a.pos())));

    let fraction = match config.rbsa_mode {
        RbsaMode::LigandSide => {
            let bound: f64 = sasa_of_prefix(&complex, lig.len(), config).iter().sum();
            (free_ligand - bound) / free_ligand
        }
        RbsaMode::Complex => {
            let poc: Vec<(Element, Vec3)> = complex[lig.len()..].to_vec();
            let free = free_ligand + total_sasa(&poc, config);
            (free - total_sasa(&complex, config)) / free
        }
    };
    Ok(fraction.clamp(0.0, 1.0))
}

/// Hydrogens carried by a heavy atom of a residue inside a peptide chain (neutral forms).
/// Terminal adjustments are applied by [`molecular_weight`].
pub fn implied_hydrogens(residue: &str, atom: &str) -> u32 {
    match (residue, atom) {
        ("ACE", "CH3") => 3,
        ("ACE", _) => 0,
        ("NH2", "N") => 2,
        ("PRO", "N") => 0,
        (_, "N") => 1,
        ("GLY", "CA") => 2,
        (_, "CA") => 1,
        (_, "C") | (_, "O") => 0,
        (_, "OXT") => 1,
        ("ALA", "CB") => 3,
        ("ILE" | "THR" | "VAL", "CB") => 1,
        (_, "CB") => 2,
        ("ARG", "CG" | "CD") => 2,
        ("ARG", "NE") => 1,
        ("ARG", "NH1") => 2,
        ("ARG", "NH2") => 1,
        ("ASN", "ND2") | ("GLN", "NE2") => 2,
        ("ASP", "OD2") | ("GLU", "OE2") => 1,
        ("CYS", "SG") => 1,
        ("GLN" | "GLU" | "LYS" | "MET" | "PRO", "CG") => 2,
        ("HIS", "ND1" | "CD2" | "CE1") => 1,
        ("ILE", "CG1") => 2,
        ("ILE", "CG2" | "CD1") => 3,
        ("LEU", "CG") => 1,
        ("LEU", "CD1" | "CD2") => 3,
        ("LYS", "CD" | "CE" | "NZ") => 2,
        ("MET", "CE") => 3,
        ("PHE" | "TYR", "CD1" | "CD2" | "CE1" | "CE2") => 1,
        ("PHE", "CZ") => 1,
        ("PRO", "CD") => 2,
        ("SER", "OG") => 1,
        ("THR", "OG1") => 1,
        ("THR", "CG2") => 3,
        ("TRP", "CD1" | "NE1" | "CE3" | "CZ2" | "CZ3" | "CH2") => 1,
        ("TYR", "OH") => 1,
        ("VAL", "CG1" | "CG2") => 3,
        _ => 0,
    }
}

/// Molecular weight in daltons of heavy atoms plus implied hydrogens.
///
/// The backbone nitrogen of the first residue carries one extra hydrogen unless an
/// acetyl cap is present.
pub fn molecular_weight(atoms: &[LigandAtom]) -> Result<f64, SurfaceError> {
    let first_residue = atoms.iter().filter(|a| !a.is_cap()).map(|a| a.residue).min();
    let acetylated = atoms.iter().any(|a| a.residue_name == "ACE");
    let h_mass = Element::H.mass().unwrap_or(1.008);
    let mut total = 0.0;
    for atom in atoms {
        let mass = atom
            .element
            .mass()
            .ok_or_else(|| SurfaceError::UnknownElement(atom.element.symbol().to_string()))?;
        let mut hydrogens = implied_hydrogens(&atom.residue_name, &atom.name);
        if atom.name == "N" && !atom.is_cap() && Some(atom.residue) == first_residue && !acetylated {
            hydrogens += 1;
        }
        total += mass + hydrogens as f64 * h_mass;
    }
    Ok(total)
}

/// Effective residue count: molecular weight over 110 Da, rounded, at least one.
pub fn effective_size_from_weight(weight: f64) -> usize {
    ((weight / 110.0).round() as usize).max(1)
}

pub fn effective_size(atoms: &[LigandAtom]) -> Result<usize, SurfaceError> {
    molecular_weight(atoms).map(effective_size_from_weight)
}
