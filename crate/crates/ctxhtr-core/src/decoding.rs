//! Greedy decoding, edit-distance alignment, and late fusion.
//!
//! Two recognizers produce character hypotheses with per-symbol confidences.
//! Fusion aligns them under unit edit costs and keeps, at each aligned
//! position, the higher-confidence symbol — except that a context-model
//! `<ooc>` always yields to the OCR symbol, regardless of confidence.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Gap keep-threshold for confidence fusion. A symbol present in only one
/// hypothesis is kept iff its confidence reaches this value.
pub const DEFAULT_TAU_GAP: f32 = 0.5;

/// A fusable output symbol: a concrete character or the out-of-context marker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Sym {
    Ch(char),
    Ooc,
}

impl fmt::Display for Sym {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sym::Ch(c) => write!(f, "{c}"),
            Sym::Ooc => write!(f, "{}", crate::tokenizer::OOC_PLACEHOLDER),
        }
    }
}

/// Which training paradigm produced a hypothesis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    ContextDriven,
    StandardOcr,
}

/// A decoded sequence with one confidence per emitted symbol.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub symbols: Vec<Sym>,
    pub confidences: Vec<f32>,
    pub source: Source,
    /// Set when greedy decoding hit the length cap before `<end>`.
    pub truncated: bool,
}

impl Hypothesis {
    pub fn new(symbols: Vec<Sym>, confidences: Vec<f32>, source: Source) -> Self {
        assert_eq!(symbols.len(), confidences.len());
        Hypothesis { symbols, confidences, source, truncated: false }
    }

    /// Renders the symbols as a string, `<ooc>` as the placeholder character.
    pub fn text(&self) -> String {
        self.symbols.iter().map(|s| s.to_string()).collect()
    }
}

/// One alignment step. Indices refer to the input sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlignOp {
    Match { a: usize, b: usize },
    Substitute { a: usize, b: usize },
    /// Symbol present only in `a`.
    InsertA { a: usize },
    /// Symbol present only in `b`.
    InsertB { b: usize },
}

/// A cost-minimal alignment between two sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alignment {
    pub ops: Vec<AlignOp>,
    pub cost: usize,
}

/// Aligns two sequences under unit costs via dynamic programming.
///
/// Ties are broken by preferring match > substitute > insert_b > insert_a,
/// which makes the traceback deterministic.
pub fn align<T: PartialEq>(a: &[T], b: &[T]) -> Alignment {
    let n = a.len();
    let m = b.len();
    let mut dp = vec![0usize; (n + 1) * (m + 1)];
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..=n {
        dp[idx(i, 0)] = i;
    }
    for j in 0..=m {
        dp[idx(0, j)] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = dp[idx(i - 1, j - 1)] + usize::from(a[i - 1] != b[j - 1]);
            let del = dp[idx(i - 1, j)] + 1;
            let ins = dp[idx(i, j - 1)] + 1;
            dp[idx(i, j)] = sub.min(del).min(ins);
        }
    }

    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dp[idx(i, j)];
        if i > 0 && j > 0 && a[i - 1] == b[j - 1] && here == dp[idx(i - 1, j - 1)] {
            ops.push(AlignOp::Match { a: i - 1, b: j - 1 });
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && a[i - 1] != b[j - 1] && here == dp[idx(i - 1, j - 1)] + 1 {
            ops.push(AlignOp::Substitute { a: i - 1, b: j - 1 });
            i -= 1;
            j -= 1;
        } else if j > 0 && here == dp[idx(i, j - 1)] + 1 {
            ops.push(AlignOp::InsertB { b: j - 1 });
            j -= 1;
        } else {
            ops.push(AlignOp::InsertA { a: i - 1 });
            i -= 1;
        }
    }
    ops.reverse();
    Alignment { ops, cost: dp[idx(n, m)] }
}

/// Unit-cost edit distance between two sequences.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    // Cost is symmetric, so keep the rolling row on the shorter side.
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let n = short.len();
    let mut row: Vec<usize> = (0..=n).collect();
    for (j, bj) in long.iter().enumerate() {
        let mut prev_diag = row[0];
        row[0] = j + 1;
        for i in 1..=n {
            let prev = row[i];
            let cost = usize::from(short[i - 1] != *bj);
            row[i] = (prev_diag + cost).min(prev + 1).min(row[i - 1] + 1);
            prev_diag = prev;
        }
    }
    row[n]
}

/// Confidence-based late fusion of a context-driven and a standard OCR
/// hypothesis. See module docs for the `<ooc>` rule; gap symbols are kept
/// iff their confidence reaches `tau_gap`. Confidence ties at aligned pairs
/// go to the context-driven symbol.
pub fn fuse(ctx: &Hypothesis, ocr: &Hypothesis, tau_gap: f32) -> String {
    let alignment = align(&ctx.symbols, &ocr.symbols);
    let mut out = String::new();
    for op in &alignment.ops {
        match *op {
            AlignOp::Match { a, b } | AlignOp::Substitute { a, b } => match ctx.symbols[a] {
                Sym::Ooc => push_sym(&mut out, ocr.symbols[b]),
                sym => {
                    if ctx.confidences[a] >= ocr.confidences[b] {
                        push_sym(&mut out, sym);
                    } else {
                        push_sym(&mut out, ocr.symbols[b]);
                    }
                }
            },
            AlignOp::InsertA { a } => match ctx.symbols[a] {
                Sym::Ooc => {}
                sym if ctx.confidences[a] >= tau_gap => push_sym(&mut out, sym),
                _ => {}
            },
            AlignOp::InsertB { b } => {
                if ocr.confidences[b] >= tau_gap {
                    push_sym(&mut out, ocr.symbols[b]);
                }
            }
        }
    }
    out
}

/// Ablation baseline: a fair coin picks the side at every aligned pair, and
/// gap symbols are kept with probability one half. The `<ooc>` substitution
/// rule is preserved exactly as in [`fuse`].
pub fn random_fuse(ctx: &Hypothesis, ocr: &Hypothesis, rng: &mut impl Rng) -> String {
    let alignment = align(&ctx.symbols, &ocr.symbols);
    let mut out = String::new();
    for op in &alignment.ops {
        match *op {
            AlignOp::Match { a, b } | AlignOp::Substitute { a, b } => match ctx.symbols[a] {
                Sym::Ooc => push_sym(&mut out, ocr.symbols[b]),
                sym => {
                    if rng.random::<bool>() {
                        push_sym(&mut out, sym);
                    } else {
                        push_sym(&mut out, ocr.symbols[b]);
                    }
                }
            },
            AlignOp::InsertA { a } => match ctx.symbols[a] {
                Sym::Ooc => {}
                sym => {
                    if rng.random::<bool>() {
                        push_sym(&mut out, sym);
                    }
                }
            },
            AlignOp::InsertB { b } => {
                if rng.random::<bool>() {
                    push_sym(&mut out, ocr.symbols[b]);
                }
            }
        }
    }
    out
}

fn push_sym(out: &mut String, sym: Sym) {
    // Fused output never carries the out-of-context marker.
    if let Sym::Ch(c) = sym {
        out.push(c);
    }
}

// ── Hypothesis interchange (JSON lines) ─────────────────────────────────────

/// Serialized symbol for the `<ooc>` marker in interchange files.
pub const OOC_SYMBOL: &str = "<ooc>";

#[derive(Serialize, Deserialize)]
struct HypothesisRecord {
    id: String,
    source: Source,
    symbols: Vec<String>,
    conf: Vec<f32>,
}

#[derive(Debug, Error)]
pub enum InterchangeError {
    #[error("hypothesis file i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {err}")]
    Json { line: usize, err: serde_json::Error },
    #[error("line {line}: symbol {sym:?} is not a single character or {OOC_SYMBOL}")]
    BadSymbol { line: usize, sym: String },
    #[error("line {line}: {symbols} symbols but {confs} confidences")]
    LengthMismatch { line: usize, symbols: usize, confs: usize },
}

/// Writes hypotheses as JSON lines: `{"id","source","symbols","conf"}`.
pub fn write_hypotheses(
    path: &Path,
    items: &[(String, Hypothesis)],
) -> Result<(), InterchangeError> {
    let mut w = BufWriter::new(File::create(path)?);
    for (id, hyp) in items {
        let rec = HypothesisRecord {
            id: id.clone(),
            source: hyp.source,
            symbols: hyp
                .symbols
                .iter()
                .map(|s| match s {
                    Sym::Ch(c) => c.to_string(),
                    Sym::Ooc => OOC_SYMBOL.to_string(),
                })
                .collect(),
            conf: hyp.confidences.clone(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(|err| InterchangeError::Json { line: 0, err })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a hypothesis interchange file written by [`write_hypotheses`] (or by
/// an external recognizer following the same schema).
pub fn read_hypotheses(path: &Path) -> Result<Vec<(String, Hypothesis)>, InterchangeError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: HypothesisRecord =
            serde_json::from_str(&line).map_err(|err| InterchangeError::Json { line: i + 1, err })?;
        if rec.symbols.len() != rec.conf.len() {
            return Err(InterchangeError::LengthMismatch {
                line: i + 1,
                symbols: rec.symbols.len(),
                confs: rec.conf.len(),
            });
        }
        let mut symbols = Vec::with_capacity(rec.symbols.len());
        for s in &rec.symbols {
            if s == OOC_SYMBOL {
                symbols.push(Sym::Ooc);
            } else {
                let mut it = s.chars();
                match (it.next(), it.next()) {
                    (Some(c), None) => symbols.push(Sym::Ch(c)),
                    _ => {
                        return Err(InterchangeError::BadSymbol { line: i + 1, sym: s.clone() })
                    }
                }
            }
        }
        let mut hyp = Hypothesis::new(symbols, rec.conf, rec.source);
        hyp.truncated = false;
        out.push((rec.id, hyp));
    }
    Ok(out)
}

/// Convenience constructor used by tests and the offline fusion path.
pub fn hypothesis_from_str(s: &str, conf: &[f32], source: Source) -> Hypothesis {
    let symbols: Vec<Sym> = s
        .chars()
        .map(|c| if c == crate::tokenizer::OOC_PLACEHOLDER { Sym::Ooc } else { Sym::Ch(c) })
        .collect();
    Hypothesis::new(symbols, conf.to_vec(), source)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chars(s: &str) -> Vec<char> {
        s.chars().collect()
    }

    #[test]
    fn identity_alignment_is_all_matches() {
        let al = align(&chars("abc"), &chars("abc"));
        assert_eq!(al.cost, 0);
        assert_eq!(al.ops.len(), 3);
        assert!(al.ops.iter().all(|op| matches!(op, AlignOp::Match { .. })));
    }

    #[test]
    fn kitten_sitting_costs_three() {
        assert_eq!(align(&chars("kitten"), &chars("sitting")).cost, 3);
        assert_eq!(edit_distance(&chars("kitten"), &chars("sitting")), 3);
    }

    #[test]
    fn empty_against_two_is_two_insert_b() {
        let al = align(&chars(""), &chars("ab"));
        assert_eq!(al.cost, 2);
        assert_eq!(al.ops, vec![AlignOp::InsertB { b: 0 }, AlignOp::InsertB { b: 1 }]);
    }

    #[test]
    fn projection_reproduces_inputs() {
        let a = chars("leaven");
        let b = chars("eleven");
        let al = align(&a, &b);
        let proj_a: Vec<usize> = al
            .ops
            .iter()
            .filter_map(|op| match op {
                AlignOp::Match { a, .. } | AlignOp::Substitute { a, .. } | AlignOp::InsertA { a } => Some(*a),
                AlignOp::InsertB { .. } => None,
            })
            .collect();
        let proj_b: Vec<usize> = al
            .ops
            .iter()
            .filter_map(|op| match op {
                AlignOp::Match { b, .. } | AlignOp::Substitute { b, .. } | AlignOp::InsertB { b } => Some(*b),
                AlignOp::InsertA { .. } => None,
            })
            .collect();
        assert_eq!(proj_a, (0..a.len()).collect::<Vec<_>>());
        assert_eq!(proj_b, (0..b.len()).collect::<Vec<_>>());
    }

    fn hyp(s: &str, conf: &[f32], source: Source) -> Hypothesis {
        hypothesis_from_str(s, conf, source)
    }

    #[test]
    fn ooc_position_taken_from_ocr_regardless_of_confidence() {
        // ctx "h*llo" with a fully confident ooc slot still yields to OCR.
        let ctx = hyp("h*llo", &[0.9, 1.0, 0.8, 0.8, 0.9], Source::ContextDriven);
        let ocr = hyp("hello", &[0.9, 0.7, 0.6, 0.6, 0.9], Source::StandardOcr);
        assert_eq!(fuse(&ctx, &ocr, DEFAULT_TAU_GAP), "hello");
    }

    #[test]
    fn positionwise_max_picks_per_symbol() {
        let ctx = hyp("cat", &[0.9, 0.9, 0.9], Source::ContextDriven);
        let ocr = hyp("cot", &[0.8, 0.95, 0.8], Source::StandardOcr);
        assert_eq!(fuse(&ctx, &ocr, DEFAULT_TAU_GAP), "cot");
    }

    #[test]
    fn identical_hypotheses_fuse_to_themselves() {
        let ctx = hyp("same", &[0.1, 0.2, 0.3, 0.4], Source::ContextDriven);
        let ocr = hyp("same", &[0.9, 0.8, 0.7, 0.6], Source::StandardOcr);
        assert_eq!(fuse(&ctx, &ocr, DEFAULT_TAU_GAP), "same");
    }

    #[test]
    fn confidence_tie_prefers_context_symbol() {
        let ctx = hyp("a", &[0.5], Source::ContextDriven);
        let ocr = hyp("b", &[0.5], Source::StandardOcr);
        assert_eq!(fuse(&ctx, &ocr, DEFAULT_TAU_GAP), "a");
    }

    #[test]
    fn gap_threshold_controls_insertions() {
        // OCR has one extra trailing symbol.
        let ctx = hyp("ab", &[0.9, 0.9], Source::ContextDriven);
        let ocr = hyp("abc", &[0.9, 0.9, 0.4], Source::StandardOcr);
        assert_eq!(fuse(&ctx, &ocr, DEFAULT_TAU_GAP), "ab");
        let ocr2 = hyp("abc", &[0.9, 0.9, 0.6], Source::StandardOcr);
        assert_eq!(fuse(&ctx, &ocr2, DEFAULT_TAU_GAP), "abc");
    }

    #[test]
    fn ooc_only_gap_emits_nothing() {
        let ctx = hyp("a*b", &[0.9, 1.0, 0.9], Source::ContextDriven);
        let ocr = hyp("ab", &[0.1, 0.1], Source::StandardOcr);
        assert_eq!(fuse(&ctx, &ocr, DEFAULT_TAU_GAP), "ab");
    }

    #[test]
    fn random_fuse_identical_hypotheses_stable() {
        let ctx = hyp("same", &[0.5; 4], Source::ContextDriven);
        let ocr = hyp("same", &[0.5; 4], Source::StandardOcr);
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            assert_eq!(random_fuse(&ctx, &ocr, &mut rng), "same");
        }
    }

    #[test]
    fn random_fuse_preserves_ooc_rule() {
        let ctx = hyp("h*llo", &[0.9, 1.0, 0.8, 0.8, 0.9], Source::ContextDriven);
        let ocr = hyp("hello", &[0.1, 0.1, 0.1, 0.1, 0.1], Source::StandardOcr);
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fused = random_fuse(&ctx, &ocr, &mut rng);
            assert_eq!(fused.chars().nth(1), Some('e'));
        }
    }

    #[test]
    fn interchange_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hyp.jsonl");
        let items = vec![
            ("l1".to_string(), hyp("h*i", &[0.9, 0.5, 0.8], Source::ContextDriven)),
            ("l2".to_string(), hyp("ok", &[0.7, 0.7], Source::StandardOcr)),
        ];
        write_hypotheses(&path, &items).unwrap();
        let back = read_hypotheses(&path).unwrap();
        assert_eq!(back, items);
    }

    // Brute-force recursive edit distance, straight from the recurrence.
    fn oracle_distance(a: &[char], b: &[char], memo: &mut std::collections::HashMap<(usize, usize), usize>) -> usize {
        fn go(
            a: &[char],
            b: &[char],
            i: usize,
            j: usize,
            memo: &mut std::collections::HashMap<(usize, usize), usize>,
        ) -> usize {
            if i == 0 {
                return j;
            }
            if j == 0 {
                return i;
            }
            if let Some(&v) = memo.get(&(i, j)) {
                return v;
            }
            let cost = usize::from(a[i - 1] != b[j - 1]);
            let v = (go(a, b, i - 1, j - 1, memo) + cost)
                .min(go(a, b, i - 1, j, memo) + 1)
                .min(go(a, b, i, j - 1, memo) + 1);
            memo.insert((i, j), v);
            v
        }
        go(a, b, a.len(), b.len(), memo)
    }

    #[test]
    fn alignment_cost_matches_recursive_oracle_exhaustively_len4() {
        // Full exhaustive sweep up to length 6 runs in the acceptance suite.
        let alphabet = ['x', 'y', 'z'];
        let mut seqs: Vec<Vec<char>> = vec![vec![]];
        let mut frontier = vec![vec![]];
        for _ in 0..4 {
            let mut next = Vec::new();
            for s in &frontier {
                for &c in &alphabet {
                    let mut t = s.clone();
                    t.push(c);
                    next.push(t);
                }
            }
            seqs.extend(next.iter().cloned());
            frontier = next;
        }
        for a in &seqs {
            for b in &seqs {
                let mut memo = std::collections::HashMap::new();
                let expect = oracle_distance(a, b, &mut memo);
                let al = align(a, b);
                assert_eq!(al.cost, expect, "a={a:?} b={b:?}");
                assert_eq!(edit_distance(a, b), expect);
            }
        }
    }

    proptest! {
        #[test]
        fn fuse_of_hypothesis_with_itself_is_identity(
            s in "[a-z ]{0,12}",
            c in proptest::collection::vec(0.0f32..=1.0, 0..13),
        ) {
            let conf: Vec<f32> = s.chars().enumerate().map(|(i, _)| c.get(i).copied().unwrap_or(0.5)).collect();
            let h_ctx = hyp(&s, &conf, Source::ContextDriven);
            let h_ocr = hyp(&s, &conf, Source::StandardOcr);
            prop_assert_eq!(fuse(&h_ctx, &h_ocr, DEFAULT_TAU_GAP), s);
        }

        #[test]
        fn fuse_never_emits_the_ooc_marker(
            a in "[ab*]{0,10}",
            b in "[ab]{0,10}",
        ) {
            let ca: Vec<f32> = a.chars().map(|_| 0.9).collect();
            let cb: Vec<f32> = b.chars().map(|_| 0.6).collect();
            let h_ctx = hyp(&a, &ca, Source::ContextDriven);
            let h_ocr = hyp(&b, &cb, Source::StandardOcr);
            let fused = fuse(&h_ctx, &h_ocr, DEFAULT_TAU_GAP);
            prop_assert!(!fused.contains('*'));
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let rf = random_fuse(&h_ctx, &h_ocr, &mut rng);
            prop_assert!(!rf.contains('*'));
        }

        #[test]
        fn all_match_alignment_degenerates_to_higher_confidence(
            s in "[a-d]{1,10}",
            flip in proptest::collection::vec(proptest::bool::ANY, 10),
        ) {
            // Same symbols, differing confidences: fusion returns the string.
            let ca: Vec<f32> = s.chars().enumerate().map(|(i, _)| if flip[i] { 0.9 } else { 0.2 }).collect();
            let cb: Vec<f32> = s.chars().enumerate().map(|(i, _)| if flip[i] { 0.2 } else { 0.9 }).collect();
            let h_ctx = hyp(&s, &ca, Source::ContextDriven);
            let h_ocr = hyp(&s, &cb, Source::StandardOcr);
            prop_assert_eq!(fuse(&h_ctx, &h_ocr, DEFAULT_TAU_GAP), s);
        }
    }
}
