//! Pseudo-ligand/pocket complex construction.
//!
//! Every contiguous fragment of 1..=N residues that does not cross a chain break is a
//! candidate pseudo-ligand. Its pocket is every residue with a heavy atom strictly closer
//! than the distance threshold to a fragment heavy atom, minus the residues within the
//! sequence exclusion window on the fragment's own segment. Pockets are determined from
//! the uncapped fragment; the acetyl/amide caps are added afterwards.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::element::Element;
use crate::geometry::{dihedral, place_atom, Vec3};
use crate::grid::SpatialGrid;
use crate::structure_io::{CleanChain, HeavyAtom};
use crate::surface::{compute_rbsa, effective_size, SasaConfig, SurfaceError};

#[derive(Debug, Error, PartialEq)]
pub enum ForgeError {
    #[error("residue {0} lacks one of the backbone atoms N, CA, C")]
    MissingBackbone(usize),
    #[error("fragment already carries terminal caps")]
    CapAlreadyPresent,
    #[error("fragment has no atoms")]
    EmptyFragment,
    #[error("invalid extraction config: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Surface(#[from] SurfaceError),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExtractionConfig {
    /// Largest fragment length in residues.
    pub max_fragment_len: usize,
    /// Pocket contact distance in Å (strict).
    pub pocket_threshold: f64,
    /// Residues on each side of the fragment that can never be pocket residues.
    pub exclusion_window: usize,
    pub cap_terminals: bool,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            max_fragment_len: 8,
            pocket_threshold: 6.0,
            exclusion_window: 5,
            cap_terminals: true,
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<(), ForgeError> {
        if self.max_fragment_len < 1 {
            return Err(ForgeError::InvalidConfig("max_fragment_len must be >= 1"));
        }
        if !(self.pocket_threshold > 0.0) {
            return Err(ForgeError::InvalidConfig("pocket_threshold must be > 0"));
        }
        Ok(())
    }
}

/// Inclusive, 0-based residue range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        assert!(start <= end);
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, i: usize) -> bool {
        (self.start..=self.end).contains(&i)
    }
}

/// Fragment atom with the residue context needed for capping and mass bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct LigandAtom {
    /// Cleaned index of the owning residue; caps carry the index of the residue they cap.
    pub residue: usize,
    pub residue_name: String,
    pub name: String,
    pub element: Element,
    pub pos: Vec3,
}

impl LigandAtom {
    pub fn is_cap(&self) -> bool {
        self.residue_name == "ACE" || self.residue_name == "NH2"
    }

    fn from_heavy(residue: usize, residue_name: &str, atom: &HeavyAtom) -> Self {
        Self {
            residue,
            residue_name: residue_name.to_string(),
            name: atom.name.clone(),
            element: atom.element,
            pos: atom.pos,
        }
    }
}

/// Atom as stored in dataset records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteAtom {
    pub el: Element,
    pub name: String,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl SiteAtom {
    pub fn pos(&self) -> Vec3 {
        [self.x, self.y, self.z]
    }
}

impl From<&LigandAtom> for SiteAtom {
    fn from(a: &LigandAtom) -> Self {
        Self {
            el: a.element,
            name: a.name.clone(),
            x: a.pos[0],
            y: a.pos[1],
            z: a.pos[2],
        }
    }
}

impl From<&HeavyAtom> for SiteAtom {
    fn from(a: &HeavyAtom) -> Self {
        Self {
            el: a.element,
            name: a.name.clone(),
            x: a.pos[0],
            y: a.pos[1],
            z: a.pos[2],
        }
    }
}

impl crate::surface::Atomic for SiteAtom {
    fn element(&self) -> Element {
        self.el
    }
    fn pos(&self) -> Vec3 {
        SiteAtom::pos(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LigandBlock {
    pub atoms: Vec<SiteAtom>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PocketBlock {
    pub residues: Vec<usize>,
    pub atoms: Vec<SiteAtom>,
}

/// One pseudo-ligand/pocket pair. Field layout is the dataset line schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexRecord {
    pub source_id: String,
    pub span: [usize; 2],
    pub ligand: LigandBlock,
    pub pocket: PocketBlock,
    pub ligand_size: usize,
    pub pocket_size: usize,
    pub rbsa: f64,
}

impl ComplexRecord {
    pub fn fragment_span(&self) -> Span {
        Span::new(self.span[0], self.span[1])
    }
}

/// Every valid fragment span, by ascending start then ascending length.
pub fn enumerate_fragments<'a>(
    chain: &'a CleanChain,
    config: &ExtractionConfig,
) -> impl Iterator<Item = Span> + 'a {
    let max_len = config.max_fragment_len;
    (0..chain.len()).flat_map(move |start| {
        let mut open = true;
        (start..(start + max_len).min(chain.len())).map_while(move |end| {
            if !open {
                return None;
            }
            if chain.discontinuities.contains(&end) {
                open = false;
            }
            Some(Span::new(start, end))
        })
    })
}

/// Per-chain lookup structure for repeated pocket queries.
pub struct PocketIndex<'a> {
    chain: &'a CleanChain,
    grid: SpatialGrid,
    atom_residue: Vec<usize>,
    segments: Vec<usize>,
    threshold: f64,
    window: usize,
}

impl<'a> PocketIndex<'a> {
    pub fn new(chain: &'a CleanChain, config: &ExtractionConfig) -> Self {
        let mut points = Vec::new();
        let mut atom_residue = Vec::new();
        for res in &chain.residues {
            for atom in &res.heavy_atoms {
                points.push(atom.pos);
                atom_residue.push(res.index);
            }
        }
        Self {
            chain,
            grid: SpatialGrid::new(points, config.pocket_threshold),
            atom_residue,
            segments: chain.segment_ids(),
            threshold: config.pocket_threshold,
            window: config.exclusion_window,
        }
    }

    /// True when residue `r` is sequence-excluded for fragment `span`.
    pub fn is_excluded(&self, span: Span, r: usize) -> bool {
        self.segments[r] == self.segments[span.start]
            && r + self.window >= span.start
            && r <= span.end + self.window
    }

    pub fn pocket(&self, span: Span) -> BTreeSet<usize> {
        let mut pocket = BTreeSet::new();
        for i in span.start..=span.end {
            for atom in &self.chain.residues[i].heavy_atoms {
                self.grid.for_each_within(atom.pos, self.threshold, |j, _| {
                    let r = self.atom_residue[j];
                    if !self.is_excluded(span, r) {
                        pocket.insert(r);
                    }
                });
            }
        }
        pocket
    }
}

pub fn extract_pocket(chain: &CleanChain, span: Span, config: &ExtractionConfig) -> BTreeSet<usize> {
    PocketIndex::new(chain, config).pocket(span)
}

/// Uncapped heavy atoms of a fragment.
pub fn fragment_atoms(chain: &CleanChain, span: Span) -> Vec<LigandAtom> {
    chain.residues[span.start..=span.end]
        .iter()
        .flat_map(|res| res.heavy_atoms.iter().map(|a| LigandAtom::from_heavy(res.index, &res.name, a)))
        .collect()
}

const PEPTIDE_BOND: f64 = 1.335;
const CARBONYL_BOND: f64 = 1.229;
const METHYL_BOND: f64 = 1.52;
const TRIGONAL: f64 = 2.0 * PI / 3.0;

fn backbone(atoms: &[LigandAtom], residue: usize) -> Result<(Vec3, Vec3, Vec3), ForgeError> {
    let find = |name: &str| {
        atoms
            .iter()
            .find(|a| a.residue == residue && !a.is_cap() && a.name == name)
            .map(|a| a.pos)
    };
    match (find("N"), find("CA"), find("C")) {
        (Some(n), Some(ca), Some(c)) => Ok((n, ca, c)),
        _ => Err(ForgeError::MissingBackbone(residue)),
    }
}

/// Acetylates the N-terminus and amidates the C-terminus of a fragment.
///
/// Adds ACE (C, O, CH3) and NH2 (N) with ideal peptide geometry and drops any OXT.
pub fn apply_terminal_caps(fragment: &[LigandAtom]) -> Result<Vec<LigandAtom>, ForgeError> {
    if fragment.iter().any(LigandAtom::is_cap) {
        return Err(ForgeError::CapAlreadyPresent);
    }
    let first = fragment.iter().map(|a| a.residue).min().ok_or(ForgeError::EmptyFragment)?;
    let last = fragment.iter().map(|a| a.residue).max().ok_or(ForgeError::EmptyFragment)?;
    let (n1, ca1, c1) = backbone(fragment, first)?;
    let (nl, cal, cl) = backbone(fragment, last)?;

    let c_ace = place_atom(c1, ca1, n1, PEPTIDE_BOND, TRIGONAL, PI);
    let o_ace = place_atom(ca1, n1, c_ace, CARBONYL_BOND, TRIGONAL, 0.0);
    let ch3 = place_atom(ca1, n1, c_ace, METHYL_BOND, TRIGONAL, PI);

    let carbonyl_o = fragment
        .iter()
        .find(|a| a.residue == last && a.name == "O")
        .map(|a| a.pos);
    let torsion = carbonyl_o.map_or(PI, |o| dihedral(nl, cal, cl, o) + PI);
    let n_amide = place_atom(nl, cal, cl, PEPTIDE_BOND, TRIGONAL, torsion);

    let cap = |residue: usize, res: &str, name: &str, element: Element, pos: Vec3| LigandAtom {
        residue,
        residue_name: res.to_string(),
        name: name.to_string(),
        element,
        pos,
    };
    let mut out = Vec::with_capacity(fragment.len() + 4);
    out.push(cap(first, "ACE", "C", Element::C, c_ace));
    out.push(cap(first, "ACE", "O", Element::O, o_ace));
    out.push(cap(first, "ACE", "CH3", Element::C, ch3));
    out.extend(fragment.iter().filter(|a| a.name != "OXT").cloned());
    out.push(cap(last, "NH2", "N", Element::N, n_amide));
    Ok(out)
}

/// Builds the record for one fragment, or `None` when its pocket is empty.
pub fn build_complex(
    index: &PocketIndex<'_>,
    span: Span,
    config: &ExtractionConfig,
    sasa: &SasaConfig,
) -> Result<Option<ComplexRecord>, ForgeError> {
    let pocket = index.pocket(span);
    if pocket.is_empty() {
        return Ok(None);
    }
    let chain = index.chain;
    let mut ligand = fragment_atoms(chain, span);
    if config.cap_terminals {
        ligand = apply_terminal_caps(&ligand)?;
    }
    let pocket_atoms: Vec<SiteAtom> = pocket
        .iter()
        .flat_map(|&r| chain.residues[r].heavy_atoms.iter().map(SiteAtom::from))
        .collect();
    let rbsa = compute_rbsa(&ligand, &pocket_atoms, sasa)?;
    Ok(Some(ComplexRecord {
        source_id: chain.source_id.clone(),
        span: [span.start, span.end],
        ligand: LigandBlock {
            atoms: ligand.iter().map(SiteAtom::from).collect(),
        },
        pocket_size: pocket.len(),
        pocket: PocketBlock {
            residues: pocket.into_iter().collect(),
            atoms: pocket_atoms,
        },
        ligand_size: effective_size(&ligand)?,
        rbsa,
    }))
}

/// Outcome of running the extraction over one chain.
#[derive(Debug, Default)]
pub struct ChainExtraction {
    pub records: Vec<ComplexRecord>,
    /// Fragments dropped because capping or mass bookkeeping failed.
    pub skipped: Vec<(Span, String)>,
}

pub fn extract_chain(chain: &CleanChain, config: &ExtractionConfig, sasa: &SasaConfig) -> ChainExtraction {
    let index = PocketIndex::new(chain, config);
    let mut out = ChainExtraction::default();
    for span in enumerate_fragments(chain, config) {
        match build_complex(&index, span, config, sasa) {
            Ok(Some(record)) => out.records.push(record),
            Ok(None) => {}
            Err(e) => out.skipped.push((span, e.to_string())),
        }
    }
    out
}
