//! Synthetic structures and datasets: an internal-coordinate peptide builder, random
//! multi-segment chains, a hand-placed hairpin, and the four-archetype alignment corpus.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::contrastive::TrainPair;
use crate::element::Element;
use crate::encoder::{type_code, TokenSeq};
use crate::fragment_forge::{apply_terminal_caps, fragment_atoms, SiteAtom, Span};
use crate::geometry::{dist, place_atom, random_rotation, rigid_transform, Vec3};
use crate::structure_io::{CleanChain, HeavyAtom, Residue};

fn deg(x: f64) -> f64 {
    x.to_radians()
}

/// Side-chain heavy atoms given the residue's N, CA, CB.
fn side_chain(name: &str, n: Vec3, ca: Vec3, cb: Vec3) -> Vec<(&'static str, Element, Vec3)> {
    let chi1 = deg(-60.0);
    match name {
        "SER" => vec![("OG", Element::O, place_atom(n, ca, cb, 1.417, deg(111.0), chi1))],
        "CYS" => vec![("SG", Element::S, place_atom(n, ca, cb, 1.81, deg(114.0), chi1))],
        "THR" => vec![
            ("OG1", Element::O, place_atom(n, ca, cb, 1.43, deg(109.5), chi1)),
            ("CG2", Element::C, place_atom(n, ca, cb, 1.53, deg(111.0), PI)),
        ],
        "VAL" => vec![
            ("CG1", Element::C, place_atom(n, ca, cb, 1.53, deg(110.5), chi1)),
            ("CG2", Element::C, place_atom(n, ca, cb, 1.53, deg(110.5), PI)),
        ],
        "ASN" | "ASP" => {
            let cg = place_atom(n, ca, cb, 1.52, deg(112.6), chi1);
            let (e2, n2) = if name == "ASN" { (Element::N, "ND2") } else { (Element::O, "OD2") };
            vec![
                ("CG", Element::C, cg),
                ("OD1", Element::O, place_atom(ca, cb, cg, 1.23, deg(120.8), deg(-60.0))),
                (n2, e2, place_atom(ca, cb, cg, 1.33, deg(116.4), deg(120.0))),
            ]
        }
        "TRP" => {
            let cg = place_atom(n, ca, cb, 1.50, deg(114.0), chi1);
            let cd1 = place_atom(ca, cb, cg, 1.37, deg(127.0), deg(90.0));
            let cd2 = place_atom(ca, cb, cg, 1.43, deg(126.6), deg(-90.0));
            let ne1 = place_atom(cb, cg, cd1, 1.38, deg(110.0), PI);
            let ce2 = place_atom(cb, cg, cd2, 1.41, deg(107.2), PI);
            let ce3 = place_atom(cb, cg, cd2, 1.40, deg(133.9), 0.0);
            let cz2 = place_atom(cg, cd2, ce2, 1.40, deg(122.4), PI);
            let cz3 = place_atom(cg, cd2, ce3, 1.39, deg(118.7), PI);
            let ch2 = place_atom(cd2, ce2, cz2, 1.37, deg(117.5), 0.0);
            vec![
                ("CG", Element::C, cg),
                ("CD1", Element::C, cd1),
                ("CD2", Element::C, cd2),
                ("NE1", Element::N, ne1),
                ("CE2", Element::C, ce2),
                ("CE3", Element::C, ce3),
                ("CZ2", Element::C, cz2),
                ("CZ3", Element::C, cz3),
                ("CH2", Element::C, ch2),
            ]
        }
        _ => vec![],
    }
}

/// Builds a chain segment with ideal bond geometry from per-residue (phi, psi) in degrees.
/// Residue indices start at `first_index`.
pub fn build_peptide(names: &[&str], torsions: &[(f64, f64)], first_index: usize, chain_id: char) -> Vec<Residue> {
    assert_eq!(names.len(), torsions.len(), "one (phi, psi) per residue");
    let mut out = Vec::with_capacity(names.len());
    let mut n = [0.0, 0.0, 0.0];
    let mut ca = [1.458, 0.0, 0.0];
    let mut c = place_atom([0.0, 1.0, 0.0], n, ca, 1.525, deg(111.2), deg(-60.0));
    for (k, name) in names.iter().enumerate() {
        let (_, psi) = torsions[k];
        let next_n = place_atom(n, ca, c, 1.329, deg(116.2), deg(psi));
        let o = place_atom(n, ca, c, 1.231, deg(120.5), deg(psi) + PI);
        let mut atoms = vec![
            HeavyAtom {
                element: Element::N,
                name: "N".into(),
                pos: n,
            },
            HeavyAtom {
                element: Element::C,
                name: "CA".into(),
                pos: ca,
            },
            HeavyAtom {
                element: Element::C,
                name: "C".into(),
                pos: c,
            },
            HeavyAtom {
                element: Element::O,
                name: "O".into(),
                pos: o,
            },
        ];
        if *name != "GLY" {
            let cb = place_atom(c, n, ca, 1.53, deg(110.5), deg(-122.6));
            atoms.push(HeavyAtom {
                element: Element::C,
                name: "CB".into(),
                pos: cb,
            });
            for (an, el, pos) in side_chain(name, n, ca, cb) {
                atoms.push(HeavyAtom {
                    element: el,
                    name: an.into(),
                    pos,
                });
            }
        }
        out.push(Residue {
            index: first_index + k,
            name: name.to_string(),
            chain_id,
            heavy_atoms: atoms,
        });
        if k + 1 < names.len() {
            let next_ca = place_atom(ca, c, next_n, 1.458, deg(121.7), PI);
            let next_phi = torsions[k + 1].0;
            let next_c = place_atom(c, next_n, next_ca, 1.525, deg(111.2), deg(next_phi));
            n = next_n;
            ca = next_ca;
            c = next_c;
        }
    }
    out
}

const CHAIN_RESIDUES: [&str; 7] = ["GLY", "ALA", "SER", "CYS", "ASN", "THR", "VAL"];

/// Random chain of `len` residues in 1–4 segments, each a random helix/strand mix placed
/// with a random pose inside a 14 Å box so that segments touch.
pub fn random_chain(rng: &mut impl Rng, len: usize, source_id: &str) -> CleanChain {
    let n_segments = rng.random_range(1..=4usize).min(len.max(1));
    let mut cuts: BTreeSet<usize> = BTreeSet::new();
    while cuts.len() + 1 < n_segments {
        cuts.insert(rng.random_range(1..len));
    }
    let mut bounds: Vec<usize> = vec![0];
    bounds.extend(cuts.iter().copied());
    bounds.push(len);

    let mut residues = Vec::with_capacity(len);
    for w in bounds.windows(2) {
        let (start, end) = (w[0], w[1]);
        let names: Vec<&str> = (start..end).map(|_| CHAIN_RESIDUES[rng.random_range(0..CHAIN_RESIDUES.len())]).collect();
        let torsions: Vec<(f64, f64)> = (start..end)
            .map(|_| {
                if rng.random_bool(0.5) {
                    (-60.0 + rng.random_range(-15.0..15.0), -45.0 + rng.random_range(-15.0..15.0))
                } else {
                    (-120.0 + rng.random_range(-20.0..20.0), 130.0 + rng.random_range(-20.0..20.0))
                }
            })
            .collect();
        let mut seg = build_peptide(&names, &torsions, start, 'A');
        let rot = random_rotation(rng);
        let shift: Vec3 = std::array::from_fn(|_| rng.random_range(-7.0..7.0));
        let centroid = {
            let cas: Vec<Vec3> = seg.iter().filter_map(|r| r.atom("CA").map(|a| a.pos)).collect();
            let n = cas.len() as f64;
            std::array::from_fn(|k| cas.iter().map(|p| p[k]).sum::<f64>() / n)
        };
        for r in &mut seg {
            for a in &mut r.heavy_atoms {
                let centred = crate::geometry::sub(a.pos, centroid);
                a.pos = rigid_transform(&[centred], &rot, shift)[0];
            }
        }
        residues.extend(seg);
    }
    CleanChain {
        source_id: source_id.to_string(),
        residues,
        discontinuities: cuts.iter().map(|&c| c - 1).collect(),
        chain_order: vec!['A'],
    }
}

/// Closed-form fragment count of a chain: for each segment of length n,
/// `sum_{k=1..min(K,n)} (n - k + 1)`.
pub fn fragment_count_formula(chain: &CleanChain, max_len: usize) -> usize {
    let mut lengths = Vec::new();
    let mut run = 0;
    for i in 0..chain.len() {
        run += 1;
        if chain.discontinuities.contains(&i) || i + 1 == chain.len() {
            lengths.push(run);
            run = 0;
        }
    }
    lengths
        .iter()
        .map(|&n| (1..=max_len.min(n)).map(|k| n - k + 1).sum::<usize>())
        .sum()
}

fn compact_residue(index: usize, name: &str, ca: Vec3) -> Residue {
    let [x, y, z] = ca;
    let atom = |n: &str, e: Element, p: Vec3| HeavyAtom {
        element: e,
        name: n.into(),
        pos: p,
    };
    Residue {
        index,
        name: name.into(),
        chain_id: 'A',
        heavy_atoms: vec![
            atom("N", Element::N, [x - 0.6, y - 0.4, z]),
            atom("CA", Element::C, [x, y, z]),
            atom("C", Element::C, [x + 0.7, y - 0.3, z + 0.2]),
            atom("O", Element::O, [x + 0.8, y - 0.6, z + 0.4]),
        ],
    }
}

/// 20-residue two-strand fixture. Residues 0–9 run along +x at y = 0; residues 15–18 sit
/// 4 Å above residues 4, 3, 2, 1; the turn (10–14) and residue 19 are held away.
pub fn hairpin() -> CleanChain {
    let mut cas: Vec<Vec3> = (0..10).map(|i| [3.8 * i as f64, 0.0, 0.0]).collect();
    cas.extend([[34.2, 8.0, 0.0], [30.4, 10.0, 0.0], [26.6, 10.0, 0.0], [22.8, 10.0, 0.0], [19.0, 8.0, 0.0]]);
    cas.extend([[15.2, 4.0, 0.0], [11.4, 4.0, 0.0], [7.6, 4.0, 0.0], [3.8, 4.0, 0.0]]);
    cas.push([0.0, 9.0, 0.0]);
    CleanChain {
        source_id: "hairpin".into(),
        residues: cas.iter().enumerate().map(|(i, &p)| compact_residue(i, "GLY", p)).collect(),
        discontinuities: BTreeSet::new(),
        chain_order: vec!['A'],
    }
}

/// Capped ligand atoms of a residue sequence in extended conformation.
pub fn capped_peptide_atoms(names: &[&str]) -> Vec<SiteAtom> {
    let torsions = vec![(-120.0, 130.0); names.len()];
    let chain = CleanChain {
        source_id: "peptide".into(),
        residues: build_peptide(names, &torsions, 0, 'A'),
        discontinuities: BTreeSet::new(),
        chain_order: vec!['A'],
    };
    let atoms = fragment_atoms(&chain, Span::new(0, names.len() - 1));
    apply_terminal_caps(&atoms)
        .expect("builder always emits a full backbone")
        .iter()
        .map(SiteAtom::from)
        .collect()
}

/// Residue type of each archetype's ligands.
pub const ARCHETYPE_RESIDUES: [&str; 4] = ["GLY", "SER", "CYS", "TRP"];
/// Distances (Å) from the sulfur of each pocket motif to its nitrogen and its oxygen.
pub const ARCHETYPE_MOTIF: [(f64, f64); 4] = [(2.2, 6.0), (6.0, 2.2), (2.2, 2.2), (6.0, 6.0)];
/// Motifs per pocket.
pub const MOTIFS: usize = 5;
/// Minimum distance between atoms of different motifs (Å).
pub const MOTIF_CLEARANCE: f64 = 6.0;

/// Ligand variant: `length` residues of the archetype with `subs` of them replaced by
/// `sub_residue` (from the C-terminal end).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Instance {
    pub length: usize,
    pub subs: usize,
    pub sub_residue: &'static str,
}

/// Residues that may replace part of a ligand; each adds a distinct carbon count to the pocket.
pub const SUBSTITUTES: [&str; 5] = ["ALA", "THR", "VAL", "ASP", "ASN"];

/// First `n` variants ordered by (length, substitute, count). At most half of a ligand's
/// residues are substituted so the archetype residue stays in the majority.
pub fn instances(n: usize) -> Vec<Instance> {
    let mut out = Vec::new();
    for length in 2..=6 {
        out.push(Instance {
            length,
            subs: 0,
            sub_residue: SUBSTITUTES[0],
        });
        for sub_residue in SUBSTITUTES {
            for subs in 1..=length / 2 {
                out.push(Instance {
                    length,
                    subs,
                    sub_residue,
                });
            }
        }
    }
    assert!(n <= out.len(), "at most {} variants", out.len());
    out.truncate(n);
    out
}

pub fn instance_ligand(archetype: usize, inst: &Instance) -> Vec<SiteAtom> {
    let names: Vec<&str> = (0..inst.length)
        .map(|k| {
            if k >= inst.length - inst.subs {
                inst.sub_residue
            } else {
                ARCHETYPE_RESIDUES[archetype]
            }
        })
        .collect();
    capped_peptide_atoms(&names)
}

/// Pocket tokens. Every pocket holds `MOTIFS` S/N/O motifs whose internal distances depend
/// only on the archetype, so all archetypes share one composition; the variant adds N/O/C
/// counts. Atoms lie in a 10 Å ball, at least 3 Å from each other except within a motif,
/// and atoms of different motifs are at least 6 Å apart.
pub fn archetype_pocket(rng: &mut impl Rng, archetype: usize, inst: &Instance) -> TokenSeq {
    let radius: f64 = 10.0;
    let in_ball = |p: Vec3| p.iter().map(|v| v * v).sum::<f64>() <= radius * radius;
    let random_point = |rng: &mut dyn rand::RngCore| -> Vec3 {
        loop {
            let p: Vec3 = std::array::from_fn(|_| rng.random_range(-radius..radius));
            if in_ball(p) {
                return p;
            }
        }
    };
    let random_dir = |rng: &mut dyn rand::RngCore| -> Vec3 {
        loop {
            let v: Vec3 = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let n = crate::geometry::norm(v);
            if n > 1e-3 && n <= 1.0 {
                return crate::geometry::scale(v, 1.0 / n);
            }
        }
    };
    let (d_n, d_o) = ARCHETYPE_MOTIF[archetype];
    loop {
        let mut atoms: Vec<(Element, Vec3)> = Vec::new();
        let mut ok = true;
        for _ in 0..MOTIFS {
            let mut placed = false;
            for _ in 0..2000 {
                let s = random_point(rng);
                let n = crate::geometry::add(s, crate::geometry::scale(random_dir(rng), d_n));
                let o = crate::geometry::add(s, crate::geometry::scale(random_dir(rng), d_o));
                let motif = [(Element::S, s), (Element::N, n), (Element::O, o)];
                let fits = in_ball(n) && in_ball(o) && dist(n, o) >= 2.0;
                if fits && atoms.iter().all(|(_, p)| motif.iter().all(|(_, q)| dist(*p, *q) >= MOTIF_CLEARANCE)) {
                    atoms.extend(motif);
                    placed = true;
                    break;
                }
            }
            ok &= placed;
        }
        if !ok {
            continue;
        }
        let kind = SUBSTITUTES.iter().position(|&r| r == inst.sub_residue).unwrap_or(0);
        let carbons = 6 + kind;
        let mut kinds: Vec<Element> = vec![Element::N; inst.length];
        kinds.extend(std::iter::repeat_n(Element::O, inst.subs));
        kinds.extend(std::iter::repeat_n(Element::C, carbons));
        for el in kinds {
            let mut placed = false;
            for _ in 0..2000 {
                let p = random_point(rng);
                if atoms.iter().all(|(_, q)| dist(*q, p) >= 3.0) {
                    atoms.push((el, p));
                    placed = true;
                    break;
                }
            }
            ok &= placed;
        }
        if ok {
            return TokenSeq::new(atoms.iter().map(|(e, _)| type_code(*e)).collect(), atoms.iter().map(|(_, p)| *p).collect())
                .expect("non-empty pocket");
        }
    }
}

#[derive(Debug, Clone)]
pub struct ArchetypeCorpus {
    pub pairs: Vec<TrainPair>,
    pub archetype: Vec<usize>,
    pub instance: Vec<usize>,
}

/// `4 × per_archetype` aligned pairs; every archetype uses the same variant list.
pub fn archetype_corpus(per_archetype: usize, seed: u64) -> ArchetypeCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let insts = instances(per_archetype);
    let mut corpus = ArchetypeCorpus {
        pairs: Vec::new(),
        archetype: Vec::new(),
        instance: Vec::new(),
    };
    for a in 0..ARCHETYPE_RESIDUES.len() {
        for (k, inst) in insts.iter().enumerate() {
            let ligand = TokenSeq::from_atoms(&instance_ligand(a, inst)).expect("non-empty ligand");
            let pocket = archetype_pocket(&mut rng, a, inst);
            corpus.pairs.push(TrainPair { pocket, ligand });
            corpus.archetype.push(a);
            corpus.instance.push(k);
        }
    }
    corpus
}
