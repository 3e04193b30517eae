//! Error-rate metrics and evaluation reports.
//!
//! All rates are normalized by the reference length. Aggregate ("micro")
//! rates divide total edit distance by total reference length; that is the
//! headline number. Per-line means ("macro") are reported alongside.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoding::{align, edit_distance, AlignOp};
use crate::tokenizer::Token;

/// Character error rate: edit distance over characters / reference length.
///
/// An empty reference makes the rate the raw hypothesis length.
pub fn cer(reference: &str, hypothesis: &str) -> f64 {
    let r: Vec<char> = reference.chars().collect();
    let h: Vec<char> = hypothesis.chars().collect();
    if r.is_empty() {
        return h.len() as f64;
    }
    edit_distance(&r, &h) as f64 / r.len() as f64
}

/// Word error rate over whitespace-separated tokens, no normalization.
pub fn wer(reference: &str, hypothesis: &str) -> f64 {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    if r.is_empty() {
        return h.len() as f64;
    }
    edit_distance(&r, &h) as f64 / r.len() as f64
}

/// Token error rate over context-relative token sequences.
///
/// Trailing `<end>`/`<pad>` are stripped from both sides; `<ooc>` is an
/// ordinary symbol. An empty reference mirrors [`cer`].
pub fn ter(reference_tokens: &[Token], hypothesis_tokens: &[Token]) -> f64 {
    let r = strip_tail(reference_tokens);
    let h = strip_tail(hypothesis_tokens);
    if r.is_empty() {
        return h.len() as f64;
    }
    edit_distance(r, h) as f64 / r.len() as f64
}

fn strip_tail(tokens: &[Token]) -> &[Token] {
    let mut end = tokens.len();
    while end > 0 && matches!(tokens[end - 1], Token::End | Token::Pad) {
        end -= 1;
    }
    &tokens[..end]
}

/// F1 of `<ooc>` prediction under the edit-distance alignment.
///
/// A true positive is an aligned pair that is `<ooc>` on both sides; an
/// `<ooc>` aligned to anything else (or to a gap) counts against the side it
/// appears on. When neither side contains `<ooc>` the score is 1.
pub fn ooc_f1(reference_tokens: &[Token], hypothesis_tokens: &[Token]) -> f64 {
    let r = strip_tail(reference_tokens);
    let h = strip_tail(hypothesis_tokens);
    let alignment = align(r, h);
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for op in &alignment.ops {
        match *op {
            AlignOp::Match { a, b } | AlignOp::Substitute { a, b } => {
                match (r[a] == Token::Ooc, h[b] == Token::Ooc) {
                    (true, true) => tp += 1,
                    (true, false) => fn_ += 1,
                    (false, true) => fp += 1,
                    (false, false) => {}
                }
            }
            AlignOp::InsertA { a } => {
                if r[a] == Token::Ooc {
                    fn_ += 1;
                }
            }
            AlignOp::InsertB { b } => {
                if h[b] == Token::Ooc {
                    fp += 1;
                }
            }
        }
    }
    if tp + fp + fn_ == 0 {
        return 1.0;
    }
    2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64)
}

/// Position-based alternative to [`ooc_f1`]: pairs are formed by index, and
/// length overhang counts against the longer side.
pub fn ooc_f1_positional(reference_tokens: &[Token], hypothesis_tokens: &[Token]) -> f64 {
    let r = strip_tail(reference_tokens);
    let h = strip_tail(hypothesis_tokens);
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for i in 0..r.len().max(h.len()) {
        match (r.get(i).map(|t| *t == Token::Ooc), h.get(i).map(|t| *t == Token::Ooc)) {
            (Some(true), Some(true)) => tp += 1,
            (Some(true), _) => fn_ += 1,
            (_, Some(true)) => fp += 1,
            _ => {}
        }
    }
    if tp + fp + fn_ == 0 {
        return 1.0;
    }
    2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64)
}

/// Fraction of predicted tokens that are `<ooc>` across a set of hypotheses.
pub fn ooc_rate(hypotheses: &[Vec<Token>]) -> f64 {
    let mut total = 0usize;
    let mut ooc = 0usize;
    for hyp in hypotheses {
        let h = strip_tail(hyp);
        total += h.len();
        ooc += h.iter().filter(|&&t| t == Token::Ooc).count();
    }
    if total == 0 {
        0.0
    } else {
        ooc as f64 / total as f64
    }
}

// ── Evaluation reports ───────────────────────────────────────────────────────

/// Token-level counts, present only for context-driven evaluations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCounts {
    pub ref_tokens: usize,
    pub token_edits: usize,
}

/// Per-line evaluation record. Rates are derived, never stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineRecord {
    pub id: String,
    pub writer_id: String,
    pub k: usize,
    pub ref_chars: usize,
    pub char_edits: usize,
    pub ref_words: usize,
    pub word_edits: usize,
    pub token: Option<TokenCounts>,
    /// `<ooc>` tokens the model emitted for this line.
    pub ooc_pred_count: usize,
    /// `<ooc>` tokens in the ground-truth encoding; zero means the line is
    /// fully context-covered.
    pub gt_ooc_count: usize,
}

impl LineRecord {
    pub fn cer(&self) -> f64 {
        if self.ref_chars == 0 {
            self.char_edits as f64
        } else {
            self.char_edits as f64 / self.ref_chars as f64
        }
    }

    pub fn fully_covered(&self) -> bool {
        self.gt_ooc_count == 0
    }
}

/// A full evaluation over a set of lines at one context length.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub lines: Vec<LineRecord>,
}

/// Aggregate summary serialized as JSON next to the per-line CSV.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Summary {
    pub lines: usize,
    pub micro_cer: f64,
    pub macro_cer: f64,
    pub micro_wer: f64,
    pub micro_ter: Option<f64>,
    pub ooc_pred_total: usize,
    pub per_writer: BTreeMap<String, WriterSummary>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WriterSummary {
    pub lines: usize,
    pub micro_cer: f64,
    pub micro_ter: Option<f64>,
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("report i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("report row {row}: {msg}")]
    Parse { row: usize, msg: String },
    #[error("reports disagree on line ids ({only_left} only left, {only_right} only right)")]
    IdMismatch { only_left: usize, only_right: usize },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl EvalReport {
    pub fn micro_cer(&self) -> f64 {
        micro(self.lines.iter().map(|l| (l.char_edits, l.ref_chars)))
    }

    pub fn macro_cer(&self) -> f64 {
        if self.lines.is_empty() {
            return 0.0;
        }
        self.lines.iter().map(|l| l.cer()).sum::<f64>() / self.lines.len() as f64
    }

    pub fn micro_wer(&self) -> f64 {
        micro(self.lines.iter().map(|l| (l.word_edits, l.ref_words)))
    }

    /// Micro token error rate; `None` when no line carries token counts.
    pub fn micro_ter(&self) -> Option<f64> {
        if self.lines.iter().all(|l| l.token.is_none()) {
            return None;
        }
        Some(micro(
            self.lines
                .iter()
                .filter_map(|l| l.token.as_ref())
                .map(|t| (t.token_edits, t.ref_tokens)),
        ))
    }

    pub fn summary(&self) -> Summary {
        let mut per_writer: BTreeMap<String, Vec<&LineRecord>> = BTreeMap::new();
        for l in &self.lines {
            per_writer.entry(l.writer_id.clone()).or_default().push(l);
        }
        Summary {
            lines: self.lines.len(),
            micro_cer: self.micro_cer(),
            macro_cer: self.macro_cer(),
            micro_wer: self.micro_wer(),
            micro_ter: self.micro_ter(),
            ooc_pred_total: self.lines.iter().map(|l| l.ooc_pred_count).sum(),
            per_writer: per_writer
                .into_iter()
                .map(|(w, ls)| {
                    let ter = if ls.iter().all(|l| l.token.is_none()) {
                        None
                    } else {
                        Some(micro(
                            ls.iter().filter_map(|l| l.token.as_ref()).map(|t| (t.token_edits, t.ref_tokens)),
                        ))
                    };
                    let s = WriterSummary {
                        lines: ls.len(),
                        micro_cer: micro(ls.iter().map(|l| (l.char_edits, l.ref_chars))),
                        micro_ter: ter,
                    };
                    (w, s)
                })
                .collect(),
        }
    }

    const CSV_HEADER: &'static str = "id,writer_id,k,ref_chars,char_edits,ref_words,word_edits,ref_tokens,token_edits,ooc_pred_count,gt_ooc_count";

    /// Writes the per-line CSV.
    pub fn write_csv(&self, path: &Path) -> Result<(), MetricsError> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for l in &self.lines {
            let (rt, te) = match &l.token {
                Some(t) => (t.ref_tokens.to_string(), t.token_edits.to_string()),
                None => (String::new(), String::new()),
            };
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{}",
                l.id, l.writer_id, l.k, l.ref_chars, l.char_edits, l.ref_words, l.word_edits, rt, te,
                l.ooc_pred_count, l.gt_ooc_count
            )?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a CSV produced by [`EvalReport::write_csv`].
    pub fn read_csv(path: &Path) -> Result<EvalReport, MetricsError> {
        let reader = BufReader::new(File::open(path)?);
        let mut lines = Vec::new();
        for (i, row) in reader.lines().enumerate() {
            let row = row?;
            if i == 0 {
                if row != Self::CSV_HEADER {
                    return Err(MetricsError::Parse { row: 1, msg: format!("unexpected header {row:?}") });
                }
                continue;
            }
            if row.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = row.split(',').collect();
            if cols.len() != 11 {
                return Err(MetricsError::Parse { row: i + 1, msg: format!("{} columns", cols.len()) });
            }
            let num = |s: &str, what: &str| -> Result<usize, MetricsError> {
                s.parse().map_err(|_| MetricsError::Parse { row: i + 1, msg: format!("bad {what}: {s:?}") })
            };
            let token = if cols[7].is_empty() && cols[8].is_empty() {
                None
            } else {
                Some(TokenCounts { ref_tokens: num(cols[7], "ref_tokens")?, token_edits: num(cols[8], "token_edits")? })
            };
            lines.push(LineRecord {
                id: cols[0].to_string(),
                writer_id: cols[1].to_string(),
                k: num(cols[2], "k")?,
                ref_chars: num(cols[3], "ref_chars")?,
                char_edits: num(cols[4], "char_edits")?,
                ref_words: num(cols[5], "ref_words")?,
                word_edits: num(cols[6], "word_edits")?,
                token,
                ooc_pred_count: num(cols[9], "ooc_pred_count")?,
                gt_ooc_count: num(cols[10], "gt_ooc_count")?,
            });
        }
        Ok(EvalReport { lines })
    }

    pub fn write_summary_json(&self, path: &Path) -> Result<(), MetricsError> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, &self.summary())?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

fn micro(pairs: impl Iterator<Item = (usize, usize)>) -> f64 {
    let (mut edits, mut total) = (0usize, 0usize);
    for (e, t) in pairs {
        edits += e;
        total += t;
    }
    if total == 0 {
        0.0
    } else {
        edits as f64 / total as f64
    }
}

/// Per-writer winner counts between two evaluations of the same lines.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WinnerTally {
    pub context_better: usize,
    pub ocr_better: usize,
    pub equal: usize,
}

/// Compares per-writer micro CER between a context-driven report and a
/// standard OCR report over the same line ids. With `covered_only`, lines
/// whose ground-truth encoding contains any `<ooc>` are dropped first.
pub fn writer_winner_tally(
    eval_ctx: &EvalReport,
    eval_ocr: &EvalReport,
    covered_only: bool,
) -> Result<WinnerTally, MetricsError> {
    let ids_ctx: std::collections::BTreeSet<&str> = eval_ctx.lines.iter().map(|l| l.id.as_str()).collect();
    let ids_ocr: std::collections::BTreeSet<&str> = eval_ocr.lines.iter().map(|l| l.id.as_str()).collect();
    if ids_ctx != ids_ocr {
        return Err(MetricsError::IdMismatch {
            only_left: ids_ctx.difference(&ids_ocr).count(),
            only_right: ids_ocr.difference(&ids_ctx).count(),
        });
    }
    // Coverage comes from the context-driven report's ground-truth encoding.
    let keep: std::collections::BTreeSet<&str> = eval_ctx
        .lines
        .iter()
        .filter(|l| !covered_only || l.fully_covered())
        .map(|l| l.id.as_str())
        .collect();

    let mut per_writer: BTreeMap<&str, ((usize, usize), (usize, usize))> = BTreeMap::new();
    for l in &eval_ctx.lines {
        if keep.contains(l.id.as_str()) {
            let e = per_writer.entry(l.writer_id.as_str()).or_default();
            e.0 .0 += l.char_edits;
            e.0 .1 += l.ref_chars;
        }
    }
    for l in &eval_ocr.lines {
        if keep.contains(l.id.as_str()) {
            let e = per_writer.entry(l.writer_id.as_str()).or_default();
            e.1 .0 += l.char_edits;
            e.1 .1 += l.ref_chars;
        }
    }

    let mut tally = WinnerTally::default();
    for (_, ((ce, ct), (oe, ot))) in per_writer {
        if ct == 0 && ot == 0 {
            continue;
        }
        let ctx_cer = if ct == 0 { 0.0 } else { ce as f64 / ct as f64 };
        let ocr_cer = if ot == 0 { 0.0 } else { oe as f64 / ot as f64 };
        if ctx_cer < ocr_cer {
            tally.context_better += 1;
        } else if ocr_cer < ctx_cer {
            tally.ocr_better += 1;
        } else {
            tally.equal += 1;
        }
    }
    Ok(tally)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::Token::{End, Ooc as TOoc, Rel};

    #[test]
    fn cer_examples() {
        assert_eq!(cer("abc", "abc"), 0.0);
        assert!((cer("abc", "axc") - 1.0 / 3.0).abs() < 1e-12);
        assert!((cer("kitten", "sitting") - 0.5).abs() < 1e-12);
        assert_eq!(cer("", "ab"), 2.0);
    }

    #[test]
    fn wer_examples() {
        assert_eq!(wer("the cat sat", "the cat sat"), 0.0);
        assert!((wer("the cat sat", "the cat") - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(wer("a b", "b a"), 1.0);
    }

    #[test]
    fn wer_splits_on_runs_of_spaces() {
        assert_eq!(wer("a  b", "a b"), 0.0);
    }

    #[test]
    fn ter_examples() {
        assert_eq!(ter(&[Rel(1), TOoc, End], &[Rel(1), TOoc, End]), 0.0);
        assert!((ter(&[Rel(1), TOoc], &[Rel(1), Rel(2)]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ter_strips_trailing_end() {
        assert_eq!(ter(&[Rel(1), End], &[Rel(1)]), 0.0);
    }

    #[test]
    fn ooc_f1_cases() {
        assert_eq!(ooc_f1(&[TOoc, TOoc], &[TOoc, TOoc]), 1.0);
        assert_eq!(ooc_f1(&[Rel(1), Rel(2)], &[TOoc, Rel(2)]), 0.0);
        assert_eq!(ooc_f1(&[Rel(1)], &[Rel(1)]), 1.0);
        // ref [ooc,t1,ooc] vs hyp [ooc,t1,t2]: TP=1, FN=1, FP=0.
        let f1 = ooc_f1(&[TOoc, Rel(1), TOoc], &[TOoc, Rel(1), Rel(2)]);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn ooc_rate_cases() {
        assert_eq!(ooc_rate(&[vec![Rel(1), Rel(2)]]), 0.0);
        assert_eq!(ooc_rate(&[vec![TOoc, TOoc]]), 1.0);
        // 3 <ooc> out of 30 predicted tokens
        let hyps = vec![vec![TOoc, TOoc, TOoc], vec![Rel(1); 27]];
        assert!((ooc_rate(&hyps) - 0.1).abs() < 1e-12);
        assert_eq!(ooc_rate(&[]), 0.0);
    }

    fn record(id: &str, writer: &str, edits: usize, refs: usize, gt_ooc: usize) -> LineRecord {
        LineRecord {
            id: id.into(),
            writer_id: writer.into(),
            k: 5,
            ref_chars: refs,
            char_edits: edits,
            ref_words: 3,
            word_edits: 0,
            token: Some(TokenCounts { ref_tokens: refs + 1, token_edits: edits }),
            ooc_pred_count: 0,
            gt_ooc_count: gt_ooc,
        }
    }

    #[test]
    fn micro_is_total_edits_over_total_refs() {
        let report = EvalReport { lines: vec![record("a", "w1", 1, 10, 0), record("b", "w1", 0, 30, 0)] };
        assert!((report.micro_cer() - 1.0 / 40.0).abs() < 1e-12);
        // macro averages per-line rates instead
        assert!((report.macro_cer() - 0.05).abs() < 1e-12);
    }

    #[test]
    fn tally_identical_reports_all_equal() {
        let r = EvalReport { lines: vec![record("a", "w1", 1, 10, 0), record("b", "w2", 2, 10, 0)] };
        let t = writer_winner_tally(&r, &r, false).unwrap();
        assert_eq!(t, WinnerTally { context_better: 0, ocr_better: 0, equal: 2 });
    }

    #[test]
    fn tally_single_writer_context_better() {
        let ctx = EvalReport { lines: vec![record("a", "w1", 2, 100, 0)] };
        let ocr = EvalReport { lines: vec![record("a", "w1", 3, 100, 0)] };
        let t = writer_winner_tally(&ctx, &ocr, false).unwrap();
        assert_eq!(t.context_better, 1);
        assert_eq!(t.ocr_better, 0);
    }

    #[test]
    fn covered_only_drops_lines_with_gt_ooc() {
        let ctx = EvalReport { lines: vec![record("a", "w1", 5, 10, 1), record("b", "w1", 0, 10, 0)] };
        let ocr = EvalReport { lines: vec![record("a", "w1", 0, 10, 1), record("b", "w1", 1, 10, 0)] };
        // Without the filter, writer w1 compares 5 edits vs 1: ocr better.
        let t = writer_winner_tally(&ctx, &ocr, false).unwrap();
        assert_eq!(t.ocr_better, 1);
        // Covered-only keeps line b only: ctx 0 edits vs ocr 1.
        let t = writer_winner_tally(&ctx, &ocr, true).unwrap();
        assert_eq!(t.context_better, 1);
    }

    #[test]
    fn tally_rejects_mismatched_ids() {
        let ctx = EvalReport { lines: vec![record("a", "w1", 0, 10, 0)] };
        let ocr = EvalReport { lines: vec![record("b", "w1", 0, 10, 0)] };
        assert!(matches!(writer_winner_tally(&ctx, &ocr, false), Err(MetricsError::IdMismatch { .. })));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eval.csv");
        let mut no_token = record("c", "w2", 1, 12, 0);
        no_token.token = None;
        let report = EvalReport { lines: vec![record("a", "w1", 1, 10, 2), no_token] };
        report.write_csv(&path).unwrap();
        let back = EvalReport::read_csv(&path).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn zero_iff_equal() {
        for (a, b) in [("", ""), ("abc", "abc"), ("a b", "a b")] {
            assert_eq!(cer(a, b), 0.0);
            assert_eq!(wer(a, b), 0.0);
        }
        assert!(cer("ab", "ba") > 0.0);
    }
}
