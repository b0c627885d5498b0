//! Progressive alignment consensus over a set of candidate transcriptions.
//!
//! The first present sample seeds the column table. Every later sample is
//! aligned against the current consensus string and votes into the columns:
//! aligned symbols vote for themselves, unmatched consensus columns receive a
//! gap vote, and inserted symbols either revive a previously dropped column
//! in the same gap region or open a new one. A new column is back-filled with
//! one gap vote per sample merged before it, so every column always holds
//! exactly one vote per merged sample.
//!
//! A column is emitted when its non-gap votes outnumber its gap votes. The
//! emitted symbol is the non-gap argmax; ties keep the symbol the column
//! emitted before, then fall back to the smallest symbol. Confidence is the
//! winning vote count divided by the total number of samples, absent ones
//! included.

mod align;

use std::collections::BTreeMap;

use serde::Serialize;

use crate::text::{fold_case, normalize_text};

pub use align::{align_chars, nw_align, AlignedPair, Alignment, GAP_CHAR};

/// Candidate transcriptions of one field, in voting order.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    /// `None` marks a sample where the field was not extracted.
    pub samples: Vec<Option<String>>,
    /// Where each sample came from (spec key, generation parameters).
    pub provenance: Vec<String>,
}

impl SampleSet {
    /// Panics if `samples` is empty or the provenance length differs.
    pub fn new(samples: Vec<Option<String>>, provenance: Vec<String>) -> Self {
        assert!(!samples.is_empty(), "a sample set needs at least one sample");
        assert_eq!(samples.len(), provenance.len(), "one provenance entry per sample");
        Self { samples, provenance }
    }

    /// Samples with positional provenance `"0"`, `"1"`, ...
    pub fn from_samples<I, S>(samples: I) -> Self
    where
        I: IntoIterator<Item = Option<S>>,
        S: Into<String>,
    {
        let samples: Vec<Option<String>> = samples.into_iter().map(|s| s.map(Into::into)).collect();
        let provenance = (0..samples.len()).map(|i| i.to_string()).collect();
        Self::new(samples, provenance)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CaseMode {
    /// Align and vote on case-folded symbols; emit the majority surface form.
    #[default]
    Fold,
    /// Treat differently-cased letters as different symbols.
    Exact,
}

/// Vote tally of one alignment column.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct ColumnVotes {
    pub symbols: BTreeMap<char, usize>,
    pub gap: usize,
    #[serde(skip)]
    surface: BTreeMap<char, BTreeMap<char, usize>>,
    #[serde(skip)]
    emitted: Option<char>,
}

impl ColumnVotes {
    fn vote(&mut self, symbol: char, surface: char) {
        *self.symbols.entry(symbol).or_default() += 1;
        *self.surface.entry(symbol).or_default().entry(surface).or_default() += 1;
    }

    pub fn non_gap(&self) -> usize {
        self.symbols.values().sum()
    }

    pub fn total(&self) -> usize {
        self.non_gap() + self.gap
    }

    pub fn count(&self, symbol: char) -> usize {
        self.symbols.get(&symbol).copied().unwrap_or(0)
    }

    /// Most-voted non-gap symbol, if the column beats its gap votes.
    fn winner(&self) -> Option<char> {
        if self.non_gap() <= self.gap {
            return None;
        }
        let best = *self.symbols.values().max()?;
        if let Some(prev) = self.emitted {
            if self.count(prev) == best {
                return Some(prev);
            }
        }
        // BTreeMap iterates in ascending order, so this is the smallest tie.
        self.symbols.iter().find(|(_, &n)| n == best).map(|(&s, _)| s)
    }

    fn surface_form(&self, symbol: char) -> char {
        self.surface
            .get(&symbol)
            .and_then(|forms| {
                let best = forms.values().max()?;
                forms.iter().find(|(_, n)| *n == best).map(|(&c, _)| c)
            })
            .unwrap_or(symbol)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsensusResult {
    pub consensus: String,
    /// One entry per character of `consensus`.
    pub char_confidences: Vec<f64>,
    /// Every column of the final tally, emitted or dropped.
    pub columns: Vec<ColumnVotes>,
    pub unanimous: bool,
    pub n_samples: usize,
    pub n_present: usize,
}

/// The report-facing JSON shape of a consensus.
#[derive(Debug, Serialize)]
pub struct ConsensusSummary<'a> {
    pub consensus: &'a str,
    pub confidences: &'a [f64],
    pub unanimous: bool,
    pub n_samples: usize,
}

impl ConsensusResult {
    /// The consensus string, or `None` when no sample extracted the field.
    pub fn prediction(&self) -> Option<&str> {
        (self.n_present > 0).then_some(self.consensus.as_str())
    }

    pub fn summary(&self) -> ConsensusSummary<'_> {
        ConsensusSummary {
            consensus: &self.consensus,
            confidences: &self.char_confidences,
            unanimous: self.unanimous,
            n_samples: self.n_samples,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Folder(CaseMode);

impl Folder {
    fn symbol(&self, c: char) -> char {
        match self.0 {
            CaseMode::Fold => fold_case(c),
            CaseMode::Exact => c,
        }
    }
}

/// (column index, emitted symbol) for every emitted column.
fn emitted_columns(columns: &mut [ColumnVotes]) -> Vec<(usize, char)> {
    let mut kept = Vec::new();
    for (i, col) in columns.iter_mut().enumerate() {
        col.emitted = col.winner();
        if let Some(sym) = col.emitted {
            kept.push((i, sym));
        }
    }
    kept
}

/// Merges a run of inserted symbols into the dropped columns that sit in the
/// same gap of the consensus, opening new columns where they do not align.
fn merge_region(out: &mut Vec<ColumnVotes>, dropped: &[ColumnVotes], run: &[(char, char)], merged_before: usize) {
    if run.is_empty() {
        for col in dropped {
            let mut col = col.clone();
            col.gap += 1;
            out.push(col);
        }
        return;
    }
    if dropped.is_empty() {
        for &(sym, surface) in run {
            let mut col = ColumnVotes {
                gap: merged_before,
                ..Default::default()
            };
            col.vote(sym, surface);
            out.push(col);
        }
        return;
    }
    let representatives: Vec<char> = dropped
        .iter()
        .map(|c| {
            let best = c.symbols.values().max().copied().unwrap_or(0);
            c.symbols
                .iter()
                .find(|(_, &n)| n == best)
                .map(|(&s, _)| s)
                .unwrap_or(GAP_CHAR)
        })
        .collect();
    let inserted: Vec<char> = run.iter().map(|&(s, _)| s).collect();
    let alignment = align_chars(&representatives, &inserted);
    let (mut di, mut ri) = (0, 0);
    for pair in alignment.columns {
        match (pair.a, pair.b) {
            (Some(_), Some(_)) => {
                let mut col = dropped[di].clone();
                col.vote(run[ri].0, run[ri].1);
                out.push(col);
                di += 1;
                ri += 1;
            }
            (Some(_), None) => {
                let mut col = dropped[di].clone();
                col.gap += 1;
                out.push(col);
                di += 1;
            }
            (None, Some(_)) => {
                let mut col = ColumnVotes {
                    gap: merged_before,
                    ..Default::default()
                };
                col.vote(run[ri].0, run[ri].1);
                out.push(col);
                ri += 1;
            }
            (None, None) => unreachable!("alignments have no gap-gap columns"),
        }
    }
}

/// Incremental form of [`progressive_consensus`]: samples are merged one at
/// a time, so a tally can be cloned and extended by one candidate cheaply.
#[derive(Debug, Clone)]
pub struct ConsensusBuilder {
    folder: Folder,
    columns: Vec<ColumnVotes>,
    kept: Vec<(usize, char)>,
    n_samples: usize,
    n_present: usize,
    first: Option<String>,
    unanimous: bool,
}

impl ConsensusBuilder {
    pub fn new(case_mode: CaseMode) -> Self {
        Self {
            folder: Folder(case_mode),
            columns: Vec::new(),
            kept: Vec::new(),
            n_samples: 0,
            n_present: 0,
            first: None,
            unanimous: true,
        }
    }

    /// Merges the next sample; `None` counts towards N but casts no votes.
    pub fn push(&mut self, sample: Option<&str>) {
        self.n_samples += 1;
        let Some(text) = sample else {
            return;
        };
        let normalized = normalize_text(text);
        match &self.first {
            None => self.first = Some(normalized),
            Some(first) => self.unanimous &= *first == normalized,
        }
        let sample: Vec<(char, char)> = text.chars().map(|c| (self.folder.symbol(c), c)).collect();
        let merged = self.n_present;
        self.n_present += 1;
        if merged == 0 {
            for &(sym, surface) in &sample {
                let mut col = ColumnVotes::default();
                col.vote(sym, surface);
                self.columns.push(col);
            }
            self.kept = emitted_columns(&mut self.columns);
            return;
        }

        let consensus: Vec<char> = self.kept.iter().map(|&(_, s)| s).collect();
        let symbols: Vec<char> = sample.iter().map(|&(s, _)| s).collect();
        let alignment = align_chars(&consensus, &symbols);

        let columns = &self.columns;
        let mut next: Vec<ColumnVotes> = Vec::with_capacity(columns.len() + sample.len());
        let mut cursor = 0;
        let mut run: Vec<(char, char)> = Vec::new();
        let (mut ki, mut si) = (0, 0);
        for pair in alignment.columns {
            match (pair.a, pair.b) {
                (Some(_), b) => {
                    let col_idx = self.kept[ki].0;
                    merge_region(&mut next, &columns[cursor..col_idx], &run, merged);
                    run.clear();
                    let mut col = columns[col_idx].clone();
                    match b {
                        Some(_) => {
                            col.vote(sample[si].0, sample[si].1);
                            si += 1;
                        }
                        None => col.gap += 1,
                    }
                    next.push(col);
                    cursor = col_idx + 1;
                    ki += 1;
                }
                (None, Some(_)) => {
                    run.push(sample[si]);
                    si += 1;
                }
                (None, None) => unreachable!("alignments have no gap-gap columns"),
            }
        }
        merge_region(&mut next, &columns[cursor..], &run, merged);
        self.columns = next;
        self.kept = emitted_columns(&mut self.columns);
    }

    pub fn finish(&self) -> ConsensusResult {
        let mut consensus = String::new();
        let mut char_confidences = Vec::with_capacity(self.kept.len());
        for &(idx, sym) in &self.kept {
            let col = &self.columns[idx];
            consensus.push(col.surface_form(sym));
            char_confidences.push(col.count(sym) as f64 / self.n_samples as f64);
        }
        ConsensusResult {
            consensus,
            char_confidences,
            columns: self.columns.clone(),
            unanimous: self.n_present > 0 && self.unanimous,
            n_samples: self.n_samples,
            n_present: self.n_present,
        }
    }
}

/// Fuses `set` into a consensus string with per-character confidences.
pub fn progressive_consensus(set: &SampleSet, case_mode: CaseMode) -> ConsensusResult {
    let mut builder = ConsensusBuilder::new(case_mode);
    for sample in &set.samples {
        builder.push(sample.as_deref());
    }
    builder.finish()
}

/// Splits the consensus on whitespace; each word scores the minimum of its
/// characters' confidences.
pub fn word_confidences(res: &ConsensusResult) -> Vec<(String, f64)> {
    let mut words = Vec::new();
    let mut word = String::new();
    let mut conf = f64::INFINITY;
    for (c, &p) in res.consensus.chars().zip(&res.char_confidences) {
        if c.is_whitespace() {
            if !word.is_empty() {
                words.push((std::mem::take(&mut word), conf));
            }
            conf = f64::INFINITY;
        } else {
            word.push(c);
            conf = conf.min(p);
        }
    }
    if !word.is_empty() {
        words.push((word, conf));
    }
    words
}

/// Field-level confidence: the minimum character confidence.
///
/// An empty consensus scores 0 when the tally had columns (everything was
/// voted out) and when nothing was extracted; it scores 1 when every present
/// sample agreed on the empty string.
pub fn field_confidence(res: &ConsensusResult) -> f64 {
    if let Some(min) = res.char_confidences.iter().copied().reduce(f64::min) {
        return min;
    }
    if res.columns.is_empty() && res.unanimous {
        1.0
    } else {
        0.0
    }
}
