//! Corpus file formats: one sentence per line, UTF-8; parallel corpora as
//! a two-column TSV or two aligned files.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::pipeline::corpus::{Provenance, TextCorpus, TextPair};

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = std::fs::File::open(path)?;
    std::io::BufReader::new(f)
        .lines()
        .map(|l| l.map_err(Into::into))
        .collect()
}

pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for l in lines {
        writeln!(f, "{l}")?;
    }
    Ok(())
}

/// Parallel TSV: `source <tab> target`, one pair per line.
pub fn read_parallel_tsv(path: &Path) -> Result<TextCorpus> {
    let mut pairs = Vec::new();
    for (i, line) in read_lines(path)?.into_iter().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (src, tgt) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(format!("line {} lacks a tab separator", i + 1)))?;
        pairs.push(TextPair::new(src, tgt));
    }
    Ok(TextCorpus { pairs })
}

pub fn write_parallel_tsv(path: &Path, corpus: &TextCorpus) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for p in &corpus.pairs {
        writeln!(f, "{}\t{}", p.src, p.tgt)?;
    }
    Ok(())
}

/// Two aligned files, one sentence per line each.
pub fn read_parallel_files(src_path: &Path, tgt_path: &Path) -> Result<TextCorpus> {
    let src = read_lines(src_path)?;
    let tgt = read_lines(tgt_path)?;
    if src.len() != tgt.len() {
        return Err(Error::format(format!(
            "{} source lines vs {} target lines",
            src.len(),
            tgt.len()
        )));
    }
    Ok(TextCorpus {
        pairs: src.into_iter().zip(tgt).map(|(s, t)| TextPair::new(s, t)).collect(),
    })
}

/// Token-level parallel TSV with provenance: `src ids <tab> tgt ids <tab> tag`.
pub fn write_token_corpus(
    path: &Path,
    corpus: &crate::pipeline::corpus::ParallelCorpus,
) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for p in &corpus.pairs {
        let s: Vec<String> = p.src.ids.iter().map(|i| i.to_string()).collect();
        let t: Vec<String> = p.tgt.ids.iter().map(|i| i.to_string()).collect();
        writeln!(f, "{}\t{}\t{}", s.join(" "), t.join(" "), p.provenance.code())?;
    }
    Ok(())
}

pub fn read_token_corpus(path: &Path) -> Result<crate::pipeline::corpus::ParallelCorpus> {
    use crate::pipeline::corpus::{ParallelCorpus, TokenPair};
    use crate::seq2seq::TokenSeq;
    let parse_ids = |s: &str, line: usize| -> Result<TokenSeq> {
        s.split_whitespace()
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| Error::format(format!("bad token id on line {line}")))
            })
            .collect::<Result<Vec<_>>>()
            .map(TokenSeq::new)
    };
    let mut pairs = Vec::new();
    for (i, line) in read_lines(path)?.into_iter().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::format(format!("line {} needs 3 tab fields", i + 1)));
        }
        pairs.push(TokenPair {
            src: parse_ids(fields[0], i + 1)?,
            tgt: parse_ids(fields[1], i + 1)?,
            provenance: Provenance::parse(fields[2])?,
        });
    }
    Ok(ParallelCorpus { pairs })
}
