//! Strict grammar for model responses.
//!
//! A response must contain exactly one each of `<think>`, `</think>`,
//! `<answer>`, `</answer>`, in that order. The answer block starts with a
//! `Total clusters: [K]` line followed by `clusterN: [i, j, ...]` lines that
//! together cover the items `1..=M` exactly once.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::partition::Partition;

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";

const TAGS: [&str; 4] = [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE];
const COUNT_PREFIX: &str = "total clusters";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FormatErrorCode {
    MissingTag,
    DuplicateTag,
    TagOrder,
    MissingCountLine,
    UnparseableCount,
    ClusterLineMalformed,
    DeclaredCountMismatch,
    DuplicateItem,
    MissingItem,
    OutOfBoundsItem,
    EmptyCluster,
}

impl fmt::Display for FormatErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatError {
    pub code: FormatErrorCode,
    pub detail: String,
}

impl FormatError {
    fn new(code: FormatErrorCode, detail: impl Into<String>) -> Self {
        Self {
            code,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatVerdict {
    pub valid: bool,
    pub errors: Vec<FormatError>,
}

impl FormatVerdict {
    pub fn ok() -> Self {
        Self {
            valid: true,
            errors: Vec::new(),
        }
    }

    pub fn from_errors(errors: Vec<FormatError>) -> Self {
        Self {
            valid: errors.is_empty(),
            errors,
        }
    }

    pub fn codes(&self) -> Vec<FormatErrorCode> {
        self.errors.iter().map(|e| e.code).collect()
    }

    pub fn has(&self, code: FormatErrorCode) -> bool {
        self.errors.iter().any(|e| e.code == code)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedResponse {
    pub think_text: String,
    pub declared_k: usize,
    pub partition: Partition,
    /// Non-fatal observations, e.g. text outside the tagged sections.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Tag-level checks only: multiplicity and think-then-answer ordering.
pub fn validate_structure(raw: &str) -> FormatVerdict {
    FormatVerdict::from_errors(structure_errors(raw))
}

fn structure_errors(raw: &str) -> Vec<FormatError> {
    let mut errors = Vec::new();
    let mut positions = Vec::with_capacity(4);
    for tag in TAGS {
        let found: Vec<usize> = raw.match_indices(tag).map(|(i, _)| i).collect();
        match found.len() {
            0 => errors.push(FormatError::new(FormatErrorCode::MissingTag, tag)),
            1 => positions.push(found[0]),
            n => errors.push(FormatError::new(
                FormatErrorCode::DuplicateTag,
                format!("{tag} x{n}"),
            )),
        }
    }
    if errors.is_empty() && !positions.windows(2).all(|w| w[0] < w[1]) {
        errors.push(FormatError::new(
            FormatErrorCode::TagOrder,
            "expected <think></think><answer></answer>",
        ));
    }
    errors
}

/// Parses and validates a response for an example with `item_count` items.
///
/// All violated rules are collected. Tag rules are checked first; the answer
/// body is still checked when a single, well-ordered answer block can be
/// located, so one response may report both kinds of errors.
pub fn parse_response(raw: &str, item_count: usize) -> Result<ParsedResponse, FormatVerdict> {
    let mut errors = structure_errors(raw);

    let answer = locate_block(raw, ANSWER_OPEN, ANSWER_CLOSE);
    let body = match answer {
        Some((start, end)) => Some(parse_body(&raw[start..end], item_count, &mut errors)),
        None => None,
    };

    match body {
        Some(Some((declared_k, clusters))) if errors.is_empty() => {
            let partition = match Partition::new(clusters, item_count) {
                Ok(p) => p,
                // parse_body already enforces every partition invariant
                Err(e) => unreachable!("validated answer failed partition check: {e}"),
            };
            let (ts, te) = locate_block(raw, THINK_OPEN, THINK_CLOSE).unwrap_or((0, 0));
            Ok(ParsedResponse {
                think_text: raw[ts..te].trim().to_string(),
                declared_k,
                partition,
                warnings: outside_text_warnings(raw),
            })
        }
        _ => {
            if errors.is_empty() {
                // no answer block at all is always reported by the tag rules
                errors.push(FormatError::new(FormatErrorCode::MissingTag, ANSWER_OPEN));
            }
            Err(FormatVerdict::from_errors(errors))
        }
    }
}

/// Byte range of the content between a unique open/close tag pair.
fn locate_block(raw: &str, open: &str, close: &str) -> Option<(usize, usize)> {
    let mut opens = raw.match_indices(open);
    let mut closes = raw.match_indices(close);
    let (o, _) = opens.next()?;
    let (c, _) = closes.next()?;
    if opens.next().is_some() || closes.next().is_some() || c < o + open.len() {
        return None;
    }
    Some((o + open.len(), c))
}

fn outside_text_warnings(raw: &str) -> Vec<String> {
    let mut warnings = Vec::new();
    if let Some(pos) = raw.find(THINK_OPEN) {
        if !raw[..pos].trim().is_empty() {
            warnings.push("text before <think>".to_string());
        }
    }
    if let Some(pos) = raw.find(THINK_CLOSE) {
        if let Some(a) = raw.find(ANSWER_OPEN) {
            if a > pos && !raw[pos + THINK_CLOSE.len()..a].trim().is_empty() {
                warnings.push("text between </think> and <answer>".to_string());
            }
        }
    }
    if let Some(pos) = raw.find(ANSWER_CLOSE) {
        if !raw[pos + ANSWER_CLOSE.len()..].trim().is_empty() {
            warnings.push("text after </answer>".to_string());
        }
    }
    warnings
}

/// Returns the declared count and the clusters when the body is well formed;
/// appends every violation to `errors` regardless.
fn parse_body(
    body: &str,
    item_count: usize,
    errors: &mut Vec<FormatError>,
) -> Option<(usize, Vec<Vec<usize>>)> {
    let before = errors.len();
    let mut lines = body.lines().map(str::trim).filter(|l| !l.is_empty());

    let mut declared: Option<usize> = None;
    let mut cluster_lines: Vec<&str> = Vec::new();
    match lines.next() {
        None => {
            errors.push(FormatError::new(FormatErrorCode::MissingCountLine, "answer block is empty"));
        }
        Some(first) if starts_with_ci(first, COUNT_PREFIX) => match parse_count_line(first) {
            Some(k) => declared = Some(k),
            None => errors.push(FormatError::new(FormatErrorCode::UnparseableCount, first)),
        },
        Some(first) => {
            errors.push(FormatError::new(
                FormatErrorCode::MissingCountLine,
                format!("first line is {first:?}"),
            ));
            cluster_lines.push(first);
        }
    }
    cluster_lines.extend(lines);

    let mut clusters: Vec<Vec<usize>> = Vec::new();
    let mut seen = vec![false; item_count + 1];
    let mut reported_dup = BTreeSet::new();
    let mut cluster_line_count = 0usize;
    for line in cluster_lines {
        let Some((label, inner)) = split_cluster_line(line) else {
            errors.push(FormatError::new(FormatErrorCode::ClusterLineMalformed, line));
            continue;
        };
        cluster_line_count += 1;
        if label != Some(cluster_line_count) {
            errors.push(FormatError::new(
                FormatErrorCode::ClusterLineMalformed,
                format!("expected cluster{cluster_line_count}: {line}"),
            ));
        }
        if inner.trim().is_empty() {
            errors.push(FormatError::new(FormatErrorCode::EmptyCluster, line));
            continue;
        }
        let mut members = Vec::new();
        for token in inner.split(',') {
            let token = token.trim();
            let Ok(item) = token.parse::<usize>() else {
                errors.push(FormatError::new(
                    FormatErrorCode::ClusterLineMalformed,
                    format!("bad item {token:?} in {line}"),
                ));
                continue;
            };
            if item == 0 || item > item_count {
                errors.push(FormatError::new(FormatErrorCode::OutOfBoundsItem, item.to_string()));
                continue;
            }
            if seen[item] {
                if reported_dup.insert(item) {
                    errors.push(FormatError::new(FormatErrorCode::DuplicateItem, item.to_string()));
                }
                continue;
            }
            seen[item] = true;
            members.push(item);
        }
        clusters.push(members);
    }

    for item in 1..=item_count {
        if !seen[item] {
            errors.push(FormatError::new(FormatErrorCode::MissingItem, item.to_string()));
        }
    }
    if let Some(k) = declared {
        if k != cluster_line_count {
            errors.push(FormatError::new(
                FormatErrorCode::DeclaredCountMismatch,
                format!("declared {k}, found {cluster_line_count} cluster lines"),
            ));
        }
    }

    if errors.len() == before {
        declared.map(|k| (k, clusters))
    } else {
        None
    }
}

fn starts_with_ci(s: &str, prefix: &str) -> bool {
    s.len() >= prefix.len()
        && s.is_char_boundary(prefix.len())
        && s[..prefix.len()].eq_ignore_ascii_case(prefix)
}

/// `Total clusters: [K]` with optional spaces and an optional trailing period.
fn parse_count_line(line: &str) -> Option<usize> {
    let rest = line[COUNT_PREFIX.len()..].trim_start();
    let rest = rest.strip_prefix(':')?.trim();
    let rest = rest.strip_suffix('.').unwrap_or(rest).trim_end();
    let inner = rest.strip_prefix('[')?.strip_suffix(']')?.trim();
    match inner.parse::<usize>() {
        Ok(k) if k >= 1 => Some(k),
        _ => None,
    }
}

/// Splits `clusterN: [ ... ]` into (N, inner text). `N` is `None` when the
/// label carries no number.
fn split_cluster_line(line: &str) -> Option<(Option<usize>, &str)> {
    if !starts_with_ci(line, "cluster") {
        return None;
    }
    let rest = &line["cluster".len()..];
    let colon = rest.find(':')?;
    let label = rest[..colon].trim();
    let number = if label.is_empty() {
        None
    } else {
        Some(label.parse::<usize>().ok()?)
    };
    let value = rest[colon + 1..].trim();
    let value = value.strip_suffix('.').unwrap_or(value).trim_end();
    let inner = value.strip_prefix('[')?.strip_suffix(']')?;
    Some((number, inner))
}

/// Canonical answer block (without tags) for a partition.
pub fn render_answer(p: &Partition) -> String {
    let mut out = format!("Total clusters: [{}]", p.k());
    for (ci, cluster) in p.clusters().iter().enumerate() {
        let items: Vec<String> = cluster.iter().map(usize::to_string).collect();
        out.push_str(&format!("\ncluster{}: [{}]", ci + 1, items.join(", ")));
    }
    out
}

/// A full, valid response wrapping `render_answer` with a think section.
pub fn render_response(think: &str, p: &Partition) -> String {
    format!("{THINK_OPEN}{think}{THINK_CLOSE}{ANSWER_OPEN}\n{}\n{ANSWER_CLOSE}", render_answer(p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use FormatErrorCode::*;

    fn wrap(answer: &str) -> String {
        format!("<think>t</think><answer>{answer}</answer>")
    }

    fn codes(raw: &str, m: usize) -> Vec<FormatErrorCode> {
        parse_response(raw, m).unwrap_err().codes()
    }

    #[test]
    fn canonical_parse() {
        let raw = "<think>t</think><answer>Total clusters: [2]\ncluster1: [1,2]\ncluster2: [3]</answer>";
        let parsed = parse_response(raw, 3).unwrap();
        assert_eq!(parsed.declared_k, 2);
        assert_eq!(parsed.think_text, "t");
        assert_eq!(parsed.partition.clusters(), &[vec![1, 2], vec![3]]);
        assert!(parsed.warnings.is_empty());
    }

    #[test]
    fn duplicate_item() {
        let raw = wrap("Total clusters: [2]\ncluster1: [1,2]\ncluster2: [2,3]");
        let err = parse_response(&raw, 3).unwrap_err();
        assert_eq!(err.codes(), vec![DuplicateItem]);
        assert_eq!(err.errors[0].detail, "2");
    }

    #[test]
    fn declared_count_mismatch() {
        let raw = wrap("Total clusters: [3]\ncluster1: [1,2]\ncluster2: [3]");
        assert_eq!(codes(&raw, 3), vec![DeclaredCountMismatch]);
    }

    #[test]
    fn missing_item() {
        let raw = wrap("Total clusters: [2]\ncluster1: [1]\ncluster2: [2]");
        let err = parse_response(&raw, 3).unwrap_err();
        assert_eq!(err.codes(), vec![MissingItem]);
        assert_eq!(err.errors[0].detail, "3");
    }

    #[test]
    fn structure_checks() {
        assert_eq!(
            validate_structure("<answer>..</answer><think>..</think>").codes(),
            vec![TagOrder]
        );
        assert_eq!(
            validate_structure("<think>a</think><answer>x</answer><answer>y</answer>").codes(),
            vec![DuplicateTag, DuplicateTag]
        );
        assert!(validate_structure("<think>a</think><answer>b</answer>").valid);
        assert_eq!(
            validate_structure("<answer>b</answer>").codes(),
            vec![MissingTag, MissingTag]
        );
    }

    #[test]
    fn render_examples() {
        let p = Partition::new(vec![vec![1, 2], vec![3]], 3).unwrap();
        assert_eq!(render_answer(&p), "Total clusters: [2]\ncluster1: [1, 2]\ncluster2: [3]");
        let p = Partition::new(vec![vec![1]], 1).unwrap();
        assert_eq!(render_answer(&p), "Total clusters: [1]\ncluster1: [1]");
        let p = Partition::new(vec![vec![2], vec![1, 3]], 3).unwrap();
        assert_eq!(render_answer(&p), "Total clusters: [2]\ncluster1: [2]\ncluster2: [1, 3]");
    }

    #[test]
    fn trailing_periods_and_whitespace() {
        let raw = wrap("\n\n  Total clusters : [ 2 ].\n\ncluster1:[ 1 ,2 ].\n   cluster2 :  [3]  \n\n");
        let parsed = parse_response(&raw, 3).unwrap();
        assert_eq!(parsed.partition.clusters(), &[vec![1, 2], vec![3]]);
    }

    #[test]
    fn empty_cluster_is_error() {
        let raw = wrap("Total clusters: [3]\ncluster1: [1,2,3]\ncluster2: []\ncluster3: [ ]");
        assert_eq!(codes(&raw, 3), vec![EmptyCluster, EmptyCluster]);
    }

    #[test]
    fn count_line_problems() {
        assert_eq!(codes(&wrap("cluster1: [1,2]"), 2), vec![MissingCountLine]);
        assert_eq!(codes(&wrap("Total clusters: two\ncluster1: [1,2]"), 2), vec![UnparseableCount]);
        assert_eq!(codes(&wrap("Total clusters: [0]\ncluster1: [1,2]"), 2), vec![UnparseableCount]);
        assert_eq!(codes(&wrap(""), 2), vec![MissingCountLine, MissingItem, MissingItem]);
    }

    #[test]
    fn out_of_bounds_and_malformed() {
        let raw = wrap("Total clusters: [2]\ncluster1: [0,1]\ncluster2: [2,5]");
        assert_eq!(codes(&raw, 2), vec![OutOfBoundsItem, OutOfBoundsItem]);
        let raw = wrap("Total clusters: [2]\ncluster1: [1,a]\ngroup2: [2]");
        assert_eq!(
            codes(&raw, 2),
            vec![ClusterLineMalformed, ClusterLineMalformed, MissingItem, DeclaredCountMismatch]
        );
        let raw = wrap("Total clusters: [2]\ncluster1: [1]\ncluster3: [2]");
        assert_eq!(codes(&raw, 2), vec![ClusterLineMalformed]);
    }

    #[test]
    fn outside_text_is_warning() {
        let raw = "Sure! <think>t</think> ok <answer>Total clusters: [1]\ncluster1: [1]</answer> bye";
        let parsed = parse_response(raw, 1).unwrap();
        assert_eq!(parsed.warnings.len(), 3);
    }

    #[test]
    fn tag_and_body_errors_combine() {
        let raw = "<answer>Total clusters: [1]\ncluster1: [1]</answer>";
        assert_eq!(codes(raw, 2), vec![MissingTag, MissingTag, MissingItem]);
    }

    fn arb_partition(max_m: usize) -> impl Strategy<Value = Partition> {
        (1..=max_m)
            .prop_flat_map(|m| (Just(m), prop::collection::vec(0usize..8, m), Just(())))
            .prop_map(|(_, labels, _)| Partition::from_labels(&labels).unwrap())
    }

    proptest! {
        #[test]
        fn render_parse_roundtrip(p in arb_partition(50)) {
            let raw = format!("<think>x</think><answer>{}</answer>", render_answer(&p));
            let parsed = parse_response(&raw, p.m()).unwrap();
            prop_assert_eq!(parsed.declared_k, p.k());
            prop_assert_eq!(parsed.partition, p);
        }

        #[test]
        fn fuzz_success_implies_valid(raw in ".{0,200}", m in 1usize..6) {
            match parse_response(&raw, m) {
                Ok(parsed) => {
                    prop_assert_eq!(parsed.partition.m(), m);
                    prop_assert_eq!(parsed.declared_k, parsed.partition.k());
                }
                Err(v) => {
                    prop_assert!(!v.valid);
                    prop_assert!(!v.errors.is_empty());
                }
            }
        }

        #[test]
        fn fuzz_near_valid(p in arb_partition(6), noise in prop::collection::vec(any::<u8>(), 0..4), at in 0usize..200) {
            let mut raw = format!("<think>x</think><answer>{}</answer>", render_answer(&p)).into_bytes();
            let at = at.min(raw.len());
            raw.splice(at..at, noise);
            let raw = String::from_utf8_lossy(&raw).into_owned();
            match parse_response(&raw, p.m()) {
                Ok(parsed) => prop_assert_eq!(parsed.partition.m(), p.m()),
                Err(v) => prop_assert!(!v.errors.is_empty()),
            }
        }

        #[test]
        fn whitespace_robust(p in arb_partition(12), pad in "[ ]{0,3}", blank in 0usize..3) {
            let mut body = format!("Total clusters: [{}]\n", p.k());
            for (ci, c) in p.clusters().iter().enumerate() {
                let items: Vec<String> = c.iter().map(|i| format!("{pad}{i}{pad}")).collect();
                body.push_str(&format!("cluster{}:{pad}[{pad}{}{pad}]{pad}\n", ci + 1, items.join(",")));
                body.push_str(&"\n".repeat(blank));
            }
            let raw = format!("<think>x</think><answer>{body}</answer>");
            prop_assert_eq!(parse_response(&raw, p.m()).unwrap().partition, p);
        }
    }
}
