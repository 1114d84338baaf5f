//! PDB ingestion and cleanup.
//!
//! [`parse_pdb`] decodes fixed-column `ATOM`/`HETATM` records from the first model of a
//! file. [`clean_structure`] keeps standard amino acids only, resolves alternate
//! locations, strips hydrogens, merges all chains in file order and renumbers residues
//! from zero while recording every sequence discontinuity.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::element::Element;
use crate::geometry::{dist, Vec3};

#[derive(Debug, Error)]
pub enum StructureError {
    #[error("malformed coordinate record at line {0}")]
    MalformedRecord(usize),
    #[error("no standard amino-acid residue survived cleanup")]
    EmptyStructure,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The twenty standard amino acids.
pub const STANDARD_RESIDUES: [&str; 20] = [
    "ALA", "ARG", "ASN", "ASP", "CYS", "GLN", "GLU", "GLY", "HIS", "ILE", "LEU", "LYS", "MET",
    "PHE", "PRO", "SER", "THR", "TRP", "TYR", "VAL",
];

pub fn is_standard_residue(name: &str) -> bool {
    STANDARD_RESIDUES.contains(&name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecordKind {
    Atom,
    Hetatm,
}

/// One coordinate record, decoded column-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct RawAtom {
    pub record_kind: RecordKind,
    pub serial: i64,
    /// Atom name with surrounding blanks removed.
    pub atom_name: String,
    /// `' '` when the column is blank.
    pub alt_loc: char,
    pub residue_name: String,
    pub chain_id: char,
    pub residue_seq: i32,
    pub insertion_code: char,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub element: Element,
}

impl RawAtom {
    pub fn pos(&self) -> Vec3 {
        [self.x, self.y, self.z]
    }
}

/// 1-based inclusive column range, clipped to the line length.
fn columns(line: &[u8], start: usize, end: usize) -> &[u8] {
    let lo = (start - 1).min(line.len());
    let hi = end.min(line.len());
    &line[lo..hi]
}

fn field(line: &[u8], start: usize, end: usize) -> String {
    String::from_utf8_lossy(columns(line, start, end)).trim().to_string()
}

fn column_char(line: &[u8], col: usize) -> char {
    match line.get(col - 1) {
        Some(b) if b.is_ascii_graphic() => *b as char,
        _ => ' ',
    }
}

fn parse_coordinate(line: &[u8], start: usize, end: usize, line_no: usize) -> Result<f64, StructureError> {
    let text = field(line, start, end);
    match text.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(StructureError::MalformedRecord(line_no)),
    }
}

fn parse_atom_line(line: &[u8], line_no: usize) -> Result<RawAtom, StructureError> {
    if line.len() < 54 {
        return Err(StructureError::MalformedRecord(line_no));
    }
    let record_kind = if line.starts_with(b"HETATM") {
        RecordKind::Hetatm
    } else {
        RecordKind::Atom
    };
    // Serial numbers overflow into hybrid-36 in large entries; they are informational only.
    let serial = field(line, 7, 11).parse::<i64>().unwrap_or(0);
    let atom_name = field(line, 13, 16);
    let residue_seq = field(line, 23, 26)
        .parse::<i32>()
        .map_err(|_| StructureError::MalformedRecord(line_no))?;
    let x = parse_coordinate(line, 31, 38, line_no)?;
    let y = parse_coordinate(line, 39, 46, line_no)?;
    let z = parse_coordinate(line, 47, 54, line_no)?;
    let element = Element::from_symbol(&field(line, 77, 78))
        .or_else(|| Element::infer_from_atom_name(&atom_name))
        .ok_or(StructureError::MalformedRecord(line_no))?;
    Ok(RawAtom {
        record_kind,
        serial,
        atom_name,
        alt_loc: column_char(line, 17),
        residue_name: field(line, 18, 20),
        chain_id: column_char(line, 22),
        residue_seq,
        insertion_code: column_char(line, 27),
        x,
        y,
        z,
        element,
    })
}

/// Decodes every `ATOM`/`HETATM` record of the first model. Other records are ignored.
pub fn parse_pdb(text: &[u8]) -> Result<Vec<RawAtom>, StructureError> {
    let mut atoms = Vec::new();
    for (i, raw_line) in text.split(|&b| b == b'\n').enumerate() {
        let line = raw_line.strip_suffix(b"\r").unwrap_or(raw_line);
        if line.starts_with(b"ENDMDL") {
            break;
        }
        if line.starts_with(b"ATOM  ") || line.starts_with(b"HETATM") {
            atoms.push(parse_atom_line(line, i + 1)?);
        }
    }
    Ok(atoms)
}

/// Returns the file contents, transparently inflating gzip (magic `1f 8b`).
pub fn decode_bytes(raw: Vec<u8>) -> std::io::Result<Vec<u8>> {
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn read_structure_file(path: &Path) -> Result<Vec<RawAtom>, StructureError> {
    let bytes = decode_bytes(std::fs::read(path)?)?;
    parse_pdb(&bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeavyAtom {
    pub element: Element,
    pub name: String,
    pub pos: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residue {
    pub index: usize,
    pub name: String,
    pub chain_id: char,
    pub heavy_atoms: Vec<HeavyAtom>,
}

impl Residue {
    pub fn atom(&self, name: &str) -> Option<&HeavyAtom> {
        self.heavy_atoms.iter().find(|a| a.name == name)
    }
}

/// A cleaned, merged and renumbered residue array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanChain {
    pub source_id: String,
    pub residues: Vec<Residue>,
    /// `i` in this set means there is a break between residue `i` and `i + 1`.
    pub discontinuities: BTreeSet<usize>,
    /// Chain identifiers in the order they were concatenated.
    pub chain_order: Vec<char>,
}

impl CleanChain {
    pub fn len(&self) -> usize {
        self.residues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residues.is_empty()
    }

    /// Contiguous segment id of every residue; segments are separated by discontinuities.
    pub fn segment_ids(&self) -> Vec<usize> {
        let mut seg = 0;
        let mut out = Vec::with_capacity(self.residues.len());
        for i in 0..self.residues.len() {
            out.push(seg);
            if self.discontinuities.contains(&i) {
                seg += 1;
            }
        }
        out
    }

    /// Writes the chain as PDB `ATOM` records. Residue numbers skip one value at every
    /// discontinuity so that cleaning the output reproduces the same chain.
    pub fn to_pdb(&self) -> String {
        let mut out = String::new();
        let mut serial = 1;
        let mut offset = 1;
        for res in &self.residues {
            let seq = res.index + offset;
            for atom in &res.heavy_atoms {
                let name = if atom.name.len() < 4 && atom.element.symbol().len() == 1 {
                    format!(" {:<3}", atom.name)
                } else {
                    format!("{:<4}", atom.name)
                };
                let _ = writeln!(
                    out,
                    "ATOM  {:>5} {} {:>3} {}{:>4}    {:>8.3}{:>8.3}{:>8.3}  1.00  0.00          {:>2}",
                    serial % 100_000,
                    name,
                    res.name,
                    res.chain_id,
                    seq % 10_000,
                    atom.pos[0],
                    atom.pos[1],
                    atom.pos[2],
                    atom.element.symbol(),
                );
                serial += 1;
            }
            if self.discontinuities.contains(&res.index) {
                offset += 1;
            }
        }
        out.push_str("END\n");
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CleanConfig {
    /// Maximum C(i)–N(i+1) distance in Å for two residues to count as bonded.
    pub peptide_bond_cutoff: f64,
}

impl Default for CleanConfig {
    fn default() -> Self {
        Self {
            peptide_bond_cutoff: 2.0,
        }
    }
}

struct PendingResidue {
    key: (char, i32, char),
    name: String,
    alt_loc: Option<char>,
    atoms: Vec<HeavyAtom>,
}

impl PendingResidue {
    fn push(&mut self, atom: &RawAtom) {
        if atom.residue_name != self.name {
            return;
        }
        if atom.alt_loc != ' ' {
            match self.alt_loc {
                None => self.alt_loc = Some(atom.alt_loc),
                Some(chosen) if chosen != atom.alt_loc => return,
                _ => {}
            }
        }
        if self.atoms.iter().any(|a| a.name == atom.atom_name) {
            return;
        }
        self.atoms.push(HeavyAtom {
            element: atom.element,
            name: atom.atom_name.clone(),
            pos: atom.pos(),
        });
    }
}

/// Applies the cleanup rules and merges all chains into one renumbered residue array.
pub fn clean_structure(
    source_id: &str,
    atoms: &[RawAtom],
    config: &CleanConfig,
) -> Result<CleanChain, StructureError> {
    let mut pending: Vec<PendingResidue> = Vec::new();
    for atom in atoms {
        if atom.record_kind != RecordKind::Atom
            || !is_standard_residue(&atom.residue_name)
            || atom.element.is_hydrogen()
        {
            continue;
        }
        let key = (atom.chain_id, atom.residue_seq, atom.insertion_code);
        if pending.last().map(|r| r.key) != Some(key) {
            pending.push(PendingResidue {
                key,
                name: atom.residue_name.clone(),
                alt_loc: None,
                atoms: Vec::new(),
            });
        }
        if let Some(last) = pending.last_mut() {
            last.push(atom);
        }
    }
    pending.retain(|r| !r.atoms.is_empty());
    if pending.is_empty() {
        return Err(StructureError::EmptyStructure);
    }

    let mut discontinuities = BTreeSet::new();
    let mut chain_order: Vec<char> = Vec::new();
    for (i, res) in pending.iter().enumerate() {
        if !chain_order.contains(&res.key.0) {
            chain_order.push(res.key.0);
        }
        let Some(next) = pending.get(i + 1) else {
            continue;
        };
        let step = next.key.1 as i64 - res.key.1 as i64;
        let broken = next.key.0 != res.key.0 || !(0..=1).contains(&step) || {
            let c = res.atoms.iter().find(|a| a.name == "C");
            let n = next.atoms.iter().find(|a| a.name == "N");
            matches!((c, n), (Some(c), Some(n)) if dist(c.pos, n.pos) > config.peptide_bond_cutoff)
        };
        if broken {
            discontinuities.insert(i);
        }
    }

    let residues = pending
        .into_iter()
        .enumerate()
        .map(|(index, r)| Residue {
            index,
            name: r.name,
            chain_id: r.key.0,
            heavy_atoms: r.atoms,
        })
        .collect();
    Ok(CleanChain {
        source_id: source_id.to_string(),
        residues,
        discontinuities,
        chain_order,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const ALA_N: &str =
        "ATOM      1  N   ALA A   1      11.104   6.134  -6.504  1.00  0.00           N";

    fn atom_line(serial: usize, name: &str, alt: char, res: &str, chain: char, seq: i32, p: Vec3, el: &str) -> String {
        format!(
            "ATOM  {serial:>5} {name:<4}{alt}{res:>3} {chain}{seq:>4}    {:>8.3}{:>8.3}{:>8.3}  1.00  0.00          {el:>2}",
            p[0], p[1], p[2]
        )
    }

    /// Backbone-only residue with a bonded C–N geometry along x.
    fn backbone(serial: &mut usize, res: &str, chain: char, seq: i32, x0: f64) -> Vec<String> {
        let mut out = Vec::new();
        for (name, dx, el) in [("N", 0.0, "N"), ("CA", 1.46, "C"), ("C", 2.5, "C"), ("O", 2.6, "O")] {
            let y = if name == "O" { 1.2 } else { 0.0 };
            out.push(atom_line(*serial, name, ' ', res, chain, seq, [x0 + dx, y, 0.0], el));
            *serial += 1;
        }
        out
    }

    fn chain_text(specs: &[(char, i32)]) -> String {
        let mut serial = 1;
        let mut lines = Vec::new();
        for (k, (chain, seq)) in specs.iter().enumerate() {
            lines.extend(backbone(&mut serial, "GLY", *chain, *seq, 3.8 * k as f64));
        }
        lines.join("\n")
    }

    #[test]
    fn decodes_reference_line_column_exact() {
        let atoms = parse_pdb(ALA_N.as_bytes()).unwrap();
        assert_eq!(atoms.len(), 1);
        let a = &atoms[0];
        assert_eq!(a.atom_name, "N");
        assert_eq!(a.residue_name, "ALA");
        assert_eq!(a.chain_id, 'A');
        assert_eq!(a.residue_seq, 1);
        assert_eq!(a.serial, 1);
        assert_eq!(a.alt_loc, ' ');
        assert_eq!(a.insertion_code, ' ');
        assert_eq!((a.x, a.y, a.z), (11.104, 6.134, -6.504));
        assert_eq!(a.element, Element::N);
        assert_eq!(a.record_kind, RecordKind::Atom);
    }

    #[test]
    fn empty_and_header_only_inputs_yield_nothing() {
        assert!(parse_pdb(b"").unwrap().is_empty());
        assert!(parse_pdb(b"HEADER    HYDROLASE                               01-JAN-00   1ABC\n")
            .unwrap()
            .is_empty());
    }

    #[test]
    fn short_and_garbled_records_are_malformed() {
        let short = "ATOM      1  N   ALA A   1      11.104   6.134";
        assert!(matches!(parse_pdb(short.as_bytes()), Err(StructureError::MalformedRecord(1))));
        let text = format!("REMARK\n{}", ALA_N.replace("11.104", "11.x04"));
        assert!(matches!(parse_pdb(text.as_bytes()), Err(StructureError::MalformedRecord(2))));
    }

    #[test]
    fn blank_element_columns_fall_back_to_atom_name() {
        let line = &ALA_N[..70];
        let atoms = parse_pdb(line.as_bytes()).unwrap();
        assert_eq!(atoms[0].element, Element::N);
    }

    #[test]
    fn only_first_model_is_read() {
        let text = format!("MODEL        1\n{ALA_N}\nENDMDL\nMODEL        2\n{ALA_N}\nENDMDL\n");
        assert_eq!(parse_pdb(text.as_bytes()).unwrap().len(), 1);
    }

    #[test]
    fn gzip_input_is_sniffed() {
        use flate2::{write::GzEncoder, Compression};
        use std::io::Write;
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(ALA_N.as_bytes()).unwrap();
        let bytes = decode_bytes(enc.finish().unwrap()).unwrap();
        assert_eq!(bytes, ALA_N.as_bytes());
    }

    #[test]
    fn chain_boundary_is_a_discontinuity() {
        let text = chain_text(&[('A', 1), ('A', 2), ('A', 3), ('B', 1), ('B', 2), ('B', 3)]);
        let chain = clean_structure("x", &parse_pdb(text.as_bytes()).unwrap(), &CleanConfig::default()).unwrap();
        assert_eq!(chain.len(), 6);
        assert!(chain.residues.iter().enumerate().all(|(i, r)| r.index == i));
        assert_eq!(chain.discontinuities, BTreeSet::from([2]));
        assert_eq!(chain.chain_order, vec!['A', 'B']);
    }

    #[test]
    fn numbering_gap_is_a_discontinuity() {
        let text = chain_text(&[('A', 1), ('A', 2), ('A', 3), ('A', 4), ('A', 7)]);
        let chain = clean_structure("x", &parse_pdb(text.as_bytes()).unwrap(), &CleanConfig::default()).unwrap();
        assert_eq!(chain.discontinuities, BTreeSet::from([3]));
    }

    #[test]
    fn long_peptide_bond_is_a_discontinuity() {
        let mut serial = 1;
        let mut lines = backbone(&mut serial, "GLY", 'A', 1, 0.0);
        lines.extend(backbone(&mut serial, "GLY", 'A', 2, 3.8));
        lines.extend(backbone(&mut serial, "GLY", 'A', 3, 9.0));
        let chain = clean_structure("x", &parse_pdb(lines.join("\n").as_bytes()).unwrap(), &CleanConfig::default()).unwrap();
        assert_eq!(chain.discontinuities, BTreeSet::from([1]));
    }

    #[test]
    fn first_alternate_location_is_kept() {
        let lines = [
            atom_line(1, "N", ' ', "SER", 'A', 1, [0.0, 0.0, 0.0], "N"),
            atom_line(2, "CA", 'A', "SER", 'A', 1, [1.0, 0.0, 0.0], "C"),
            atom_line(3, "CA", 'B', "SER", 'A', 1, [1.1, 0.2, 0.0], "C"),
            atom_line(4, "CB", 'B', "SER", 'A', 1, [2.0, 0.2, 0.0], "C"),
            atom_line(5, "CB", 'A', "SER", 'A', 1, [2.0, 0.0, 0.0], "C"),
        ];
        let chain = clean_structure("x", &parse_pdb(lines.join("\n").as_bytes()).unwrap(), &CleanConfig::default()).unwrap();
        let res = &chain.residues[0];
        let cas: Vec<_> = res.heavy_atoms.iter().filter(|a| a.name == "CA").collect();
        assert_eq!(cas.len(), 1);
        assert_eq!(cas[0].pos, [1.0, 0.0, 0.0]);
        assert_eq!(res.atom("CB").unwrap().pos, [2.0, 0.0, 0.0]);
    }

    #[test]
    fn drops_hetero_nonstandard_and_hydrogen() {
        let lines = [
            atom_line(1, "N", ' ', "GLY", 'A', 1, [0.0, 0.0, 0.0], "N"),
            atom_line(2, "H", ' ', "GLY", 'A', 1, [0.0, 1.0, 0.0], "H"),
            atom_line(3, "CA", ' ', "MSE", 'A', 2, [3.0, 0.0, 0.0], "C"),
            "HETATM    4  O   HOH A 101       9.000   9.000   9.000  1.00  0.00           O".to_string(),
        ];
        let chain = clean_structure("x", &parse_pdb(lines.join("\n").as_bytes()).unwrap(), &CleanConfig::default()).unwrap();
        assert_eq!(chain.len(), 1);
        assert_eq!(chain.residues[0].heavy_atoms.len(), 1);
    }

    #[test]
    fn nothing_standard_is_an_error() {
        let text = "HETATM    4  O   HOH A 101       9.000   9.000   9.000  1.00  0.00           O";
        let atoms = parse_pdb(text.as_bytes()).unwrap();
        assert!(matches!(clean_structure("x", &atoms, &CleanConfig::default()), Err(StructureError::EmptyStructure)));
    }

    #[test]
    fn cleaning_serialized_chain_is_idempotent() {
        let text = chain_text(&[('A', 1), ('A', 2), ('A', 5), ('B', 1), ('B', 2)]);
        let first = clean_structure("x", &parse_pdb(text.as_bytes()).unwrap(), &CleanConfig::default()).unwrap();
        let again = clean_structure("x", &parse_pdb(first.to_pdb().as_bytes()).unwrap(), &CleanConfig::default()).unwrap();
        assert_eq!(first, again);
    }
}
