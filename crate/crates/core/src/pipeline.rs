//! File-level extraction: structure files in, JSON Lines complex records out.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fragment_forge::{extract_chain, ComplexRecord, ExtractionConfig};
use crate::structure_io::{clean_structure, read_structure_file, CleanConfig, StructureError};
use crate::surface::SasaConfig;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Structure { path: PathBuf, source: StructureError },
    #[error("{path}:{line}: {source}")]
    Json { path: PathBuf, line: usize, source: serde_json::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

const EXTENSIONS: [&str; 4] = [".pdb", ".ent", ".pdb.gz", ".ent.gz"];

/// Entry identifier: the file name without its structure extension.
pub fn source_id(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let lower = name.to_ascii_lowercase();
    EXTENSIONS
        .iter()
        .filter(|ext| lower.ends_with(*ext))
        .map(|ext| name[..name.len() - ext.len()].to_string())
        .max_by_key(|s| std::cmp::Reverse(s.len()))
        .unwrap_or(name)
}

/// Structure files directly inside `dir`, sorted by name.
pub fn list_structure_files(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let lower = path.to_string_lossy().to_ascii_lowercase();
        if path.is_file() && EXTENSIONS.iter().any(|e| lower.ends_with(e)) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub clean: CleanConfig,
    pub extraction: ExtractionConfig,
    pub sasa: SasaConfig,
}

#[derive(Debug, Default)]
pub struct EntryExtraction {
    pub source_id: String,
    pub records: Vec<ComplexRecord>,
    pub skipped_fragments: usize,
}

/// Parses, cleans and mines one structure file.
pub fn extract_file(path: &Path, config: &PipelineConfig) -> Result<EntryExtraction, PipelineError> {
    let wrap = |source| PipelineError::Structure {
        path: path.to_path_buf(),
        source,
    };
    let atoms = read_structure_file(path).map_err(wrap)?;
    let id = source_id(path);
    let chain = clean_structure(&id, &atoms, &config.clean).map_err(wrap)?;
    let out = extract_chain(&chain, &config.extraction, &config.sasa);
    Ok(EntryExtraction {
        source_id: id,
        records: out.records,
        skipped_fragments: out.skipped.len(),
    })
}

pub fn write_jsonl(path: &Path, records: &[ComplexRecord]) -> Result<(), PipelineError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for (i, r) in records.iter().enumerate() {
        let line = serde_json::to_string(r).map_err(|source| PipelineError::Json {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<ComplexRecord>, PipelineError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| PipelineError::Json {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}
