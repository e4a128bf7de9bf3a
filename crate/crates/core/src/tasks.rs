//! Synthetic tasks, tokenizers and the tab-separated dataset cache.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, NacError, Result};
use crate::tensor::Tensor;

/// One tokenized example. `context` is only read by conditional models.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub context: Option<Vec<usize>>,
    pub label: usize,
}

pub fn parity_label(bits: &[u8]) -> usize {
    usize::from(bits.iter().fold(0u8, |acc, b| acc ^ (b & 1)))
}

/// Uniform random bits with their XOR.
pub fn gen_parity(length: usize, rng: &mut impl Rng) -> (Vec<u8>, usize) {
    let bits: Vec<u8> = (0..length).map(|_| rng.random_range(0..2u8)).collect();
    let label = parity_label(&bits);
    (bits, label)
}

/// Bits plus a rule id; the label is the bit at position `rule`.
pub fn gen_two_rule(length: usize, rng: &mut impl Rng) -> (Vec<u8>, usize, usize) {
    assert!(length >= 2, "two-rule sequences need at least 2 bits");
    let bits: Vec<u8> = (0..length).map(|_| rng.random_range(0..2u8)).collect();
    let rule = rng.random_range(0..2usize);
    let label = usize::from(bits[rule]);
    (bits, rule, label)
}

// ----------------------------------------------------------------------
// ListOps
// ----------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ListOp {
    Max,
    Min,
    /// Median; for an even count, the floor of the mean of the middle pair.
    Med,
    /// Sum modulo 10.
    SumMod,
}

impl ListOp {
    const ALL: [ListOp; 4] = [ListOp::Max, ListOp::Min, ListOp::Med, ListOp::SumMod];

    fn keyword(self) -> &'static str {
        match self {
            ListOp::Max => "[MAX",
            ListOp::Min => "[MIN",
            ListOp::Med => "[MED",
            ListOp::SumMod => "[SM",
        }
    }

    fn from_keyword(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|op| op.keyword() == s)
    }

    fn apply(self, args: &mut [u8]) -> u8 {
        match self {
            ListOp::Max => *args.iter().max().expect("non-empty"),
            ListOp::Min => *args.iter().min().expect("non-empty"),
            ListOp::Med => {
                args.sort_unstable();
                let n = args.len();
                if n % 2 == 1 {
                    args[n / 2]
                } else {
                    ((u16::from(args[n / 2 - 1]) + u16::from(args[n / 2])) / 2) as u8
                }
            }
            ListOp::SumMod => (args.iter().map(|&a| u32::from(a)).sum::<u32>() % 10) as u8,
        }
    }
}

/// ListOps vocabulary: digits are ids 0..=9, then the four operators and `]`.
pub const LISTOPS_VOCAB: usize = 15;

pub fn listops_token_id(tok: &str) -> Result<usize> {
    if let Ok(d) = tok.parse::<u8>() {
        if d <= 9 && tok.len() == 1 {
            return Ok(usize::from(d));
        }
    }
    if let Some(op) = ListOp::from_keyword(tok) {
        return Ok(10 + ListOp::ALL.iter().position(|&o| o == op).expect("listed"));
    }
    if tok == "]" {
        return Ok(14);
    }
    Err(NacError::Format {
        what: "listops expression",
        detail: format!("unknown token {tok:?}"),
    })
}

pub fn listops_tokenize(expr: &str) -> Result<Vec<usize>> {
    expr.split_whitespace().map(listops_token_id).collect()
}

/// Evaluates a bracketed prefix expression such as `[MAX 2 9 0 ]`.
pub fn eval_listops(expr: &str) -> Result<u8> {
    let bad = |detail: String| NacError::Format {
        what: "listops expression",
        detail,
    };
    let mut stack: Vec<(ListOp, Vec<u8>)> = Vec::new();
    let mut result = None;
    for tok in expr.split_whitespace() {
        if result.is_some() {
            return Err(bad(format!("trailing token {tok:?}")));
        }
        let value = if let Some(op) = ListOp::from_keyword(tok) {
            stack.push((op, Vec::new()));
            continue;
        } else if tok == "]" {
            let (op, mut args) = stack.pop().ok_or_else(|| bad("unbalanced ]".into()))?;
            if args.is_empty() {
                return Err(bad("operator without arguments".into()));
            }
            op.apply(&mut args)
        } else {
            match tok.parse::<u8>() {
                Ok(d) if d <= 9 && tok.len() == 1 => d,
                _ => return Err(bad(format!("unknown token {tok:?}"))),
            }
        };
        match stack.last_mut() {
            Some((_, args)) => args.push(value),
            None => result = Some(value),
        }
    }
    if !stack.is_empty() {
        return Err(bad("unclosed operator".into()));
    }
    result.ok_or_else(|| bad("empty expression".into()))
}

fn listops_tree(depth: usize, max_depth: usize, max_args: usize, rng: &mut impl Rng, out: &mut String) {
    let leaf = depth >= max_depth || (depth > 0 && rng.random_bool(0.35));
    if leaf {
        let _ = write!(out, "{} ", rng.random_range(0..10u8));
        return;
    }
    let op = *ListOp::ALL.choose(rng).expect("non-empty");
    out.push_str(op.keyword());
    out.push(' ');
    for _ in 0..rng.random_range(2..=max_args.max(2)) {
        listops_tree(depth + 1, max_depth, max_args, rng, out);
    }
    out.push_str("] ");
}

/// Random expression of nesting depth at most `max_depth` and at most
/// `max_len` tokens, with its value.
pub fn gen_listops(max_depth: usize, max_args: usize, max_len: usize, rng: &mut impl Rng) -> (String, usize) {
    loop {
        let mut s = String::new();
        listops_tree(0, max_depth, max_args, rng, &mut s);
        let s = s.trim_end().to_string();
        if s.split_whitespace().count() <= max_len {
            let label = eval_listops(&s).expect("generated expressions are well formed");
            return (s, usize::from(label));
        }
    }
}

// ----------------------------------------------------------------------
// Bytes and text
// ----------------------------------------------------------------------

/// Token ids of a byte string, truncated to `max_len`.
pub fn byte_tokenize(text: &[u8], max_len: usize) -> Result<Vec<usize>> {
    if text.is_empty() {
        return Err(contract("cannot tokenize an empty byte string"));
    }
    Ok(text.iter().take(max_len).map(|&b| usize::from(b)).collect())
}

const FILLER: &[&str] = &[
    "the", "a", "movie", "plot", "was", "and", "it", "of", "to", "in", "actor", "scene", "film", "story", "with",
    "this", "that", "there", "very", "quite",
];
const POSITIVE: &[&str] = &["good", "great", "superb"];
const NEGATIVE: &[&str] = &["bad", "awful", "dull"];

/// Filler text of about `length` bytes with one planted sentiment keyword;
/// label 1 for a positive keyword, 0 for a negative one.
pub fn gen_keyword_text(length: usize, rng: &mut impl Rng) -> (String, usize) {
    let label = rng.random_range(0..2usize);
    let keyword = *if label == 1 { POSITIVE } else { NEGATIVE }.choose(rng).expect("non-empty");
    let mut words: Vec<&str> = Vec::new();
    let mut len = keyword.len();
    while len < length {
        let w = *FILLER.choose(rng).expect("non-empty");
        len += w.len() + 1;
        words.push(w);
    }
    let at = rng.random_range(0..=words.len());
    words.insert(at, keyword);
    let mut text = words.join(" ");
    text.truncate(length.max(keyword.len()));
    // Keep the keyword even if truncation would have cut it.
    if !text.contains(keyword) {
        text = format!("{keyword} {text}");
        text.truncate(length.max(keyword.len()));
    }
    (text, label)
}

// ----------------------------------------------------------------------
// Images
// ----------------------------------------------------------------------

/// Splits an `[H, W, C]` image into non-overlapping `patch x patch` squares,
/// returned row-major as `[(H/p)(W/p), p*p*C]`.
pub fn extract_patches(image: &Tensor, patch: usize) -> Result<Tensor> {
    let [h, w, c] = image.shape()[..] else {
        return Err(contract(format!("image must be [H, W, C], got {:?}", image.shape())));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(contract(format!("{h}x{w} image is not divisible into {patch}x{patch} patches")));
    }
    let (ph, pw) = (h / patch, w / patch);
    let mut out = Vec::with_capacity(image.len());
    for py in 0..ph {
        for px in 0..pw {
            for y in 0..patch {
                let row = (py * patch + y) * w + px * patch;
                out.extend_from_slice(&image.data()[row * c..(row + patch) * c]);
            }
        }
    }
    Ok(Tensor::new(vec![ph * pw, patch * patch * c], out)?)
}

/// Inverse of [`extract_patches`].
pub fn assemble_patches(patches: &Tensor, h: usize, w: usize, c: usize, patch: usize) -> Result<Tensor> {
    let (ph, pw) = (h / patch, w / patch);
    if patches.shape() != [ph * pw, patch * patch * c] {
        return Err(contract(format!("patch tensor {:?} does not tile {h}x{w}x{c}", patches.shape())));
    }
    let mut img = vec![0.0; h * w * c];
    for (idx, p) in patches.data().chunks(patch * patch * c).enumerate() {
        let (py, px) = (idx / pw, idx % pw);
        for y in 0..patch {
            let row = (py * patch + y) * w + px * patch;
            img[row * c..(row + patch) * c].copy_from_slice(&p[y * patch * c..(y + 1) * patch * c]);
        }
    }
    Ok(Tensor::new(vec![h, w, c], img)?)
}

// ----------------------------------------------------------------------
// Task descriptions and datasets
// ----------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Parity,
    Listops,
    Text,
    TwoRule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// Sequence length (parity, two-rule, text) or maximum token count (listops).
    pub length: usize,
    pub max_depth: usize,
    pub max_args: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            kind: TaskKind::Parity,
            length: 16,
            max_depth: 4,
            max_args: 5,
        }
    }
}

impl TaskConfig {
    pub fn parity(length: usize) -> Self {
        Self {
            kind: TaskKind::Parity,
            length,
            ..Self::default()
        }
    }

    pub fn two_rule(length: usize) -> Self {
        Self {
            kind: TaskKind::TwoRule,
            length,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let min = if self.kind == TaskKind::TwoRule { 2 } else { 1 };
        if self.length < min {
            return Err(contract(format!("task length must be at least {min}")));
        }
        if self.kind == TaskKind::Listops && self.max_args < 2 {
            return Err(contract("listops needs max_args >= 2"));
        }
        Ok(())
    }

    pub fn vocab(&self) -> usize {
        match self.kind {
            TaskKind::Parity | TaskKind::TwoRule => 2,
            TaskKind::Listops => LISTOPS_VOCAB,
            TaskKind::Text => 256,
        }
    }

    pub fn classes(&self) -> usize {
        match self.kind {
            TaskKind::Listops => 10,
            _ => 2,
        }
    }

    /// Number of distinct context tokens (0 if the task has no context).
    pub fn context_vocab(&self) -> usize {
        match self.kind {
            TaskKind::TwoRule => 2,
            _ => 0,
        }
    }

    pub fn max_len(&self) -> usize {
        self.length
    }

    /// Draws one sample as `(payload, context, label)`.
    pub fn sample_raw(&self, rng: &mut impl Rng) -> (String, Option<usize>, usize) {
        let bits = |b: &[u8]| b.iter().map(|v| char::from(b'0' + v)).collect::<String>();
        match self.kind {
            TaskKind::Parity => {
                let (b, l) = gen_parity(self.length, rng);
                (bits(&b), None, l)
            }
            TaskKind::TwoRule => {
                let (b, rule, l) = gen_two_rule(self.length, rng);
                (bits(&b), Some(rule), l)
            }
            TaskKind::Listops => {
                let (s, l) = gen_listops(self.max_depth, self.max_args, self.length, rng);
                (s, None, l)
            }
            TaskKind::Text => {
                let (s, l) = gen_keyword_text(self.length, rng);
                (s, None, l)
            }
        }
    }

    /// Tokenizes a payload in the dataset cache format.
    pub fn encode(&self, payload: &str, context: Option<usize>, label: usize) -> Result<Example> {
        let tokens = match self.kind {
            TaskKind::Parity | TaskKind::TwoRule => payload
                .chars()
                .map(|c| match c {
                    '0' => Ok(0),
                    '1' => Ok(1),
                    _ => Err(NacError::Format {
                        what: "bit string",
                        detail: format!("unexpected character {c:?}"),
                    }),
                })
                .collect::<Result<Vec<_>>>()?,
            TaskKind::Listops => listops_tokenize(payload)?,
            TaskKind::Text => byte_tokenize(payload.as_bytes(), self.length)?,
        };
        if tokens.is_empty() {
            return Err(contract("empty payload"));
        }
        if label >= self.classes() {
            return Err(contract(format!("label {label} out of range for {} classes", self.classes())));
        }
        let context = match (self.context_vocab(), context) {
            (0, _) => None,
            (n, Some(c)) if c < n => Some(vec![c]),
            (_, c) => return Err(contract(format!("task needs a context token, got {c:?}"))),
        };
        Ok(Example {
            tokens,
            context,
            label,
        })
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Example {
        let (payload, context, label) = self.sample_raw(rng);
        self.encode(&payload, context, label).expect("generated samples encode")
    }
}

/// Labeled payloads as stored in the cache.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDataset {
    /// `(label, context, payload)`.
    pub rows: Vec<(usize, Option<usize>, String)>,
}

impl RawDataset {
    pub fn generate(task: &TaskConfig, n: usize, rng: &mut impl Rng) -> Self {
        let rows = (0..n)
            .map(|_| {
                let (payload, ctx, label) = task.sample_raw(rng);
                (label, ctx, payload)
            })
            .collect();
        Self { rows }
    }

    /// One sample per line: `label<TAB>payload`, with tasks that carry a
    /// context written as `label<TAB>context:payload`.
    pub fn save_tsv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (label, ctx, payload) in &self.rows {
            match ctx {
                Some(c) => writeln!(out, "{label}\t{c}:{payload}")?,
                None => writeln!(out, "{label}\t{payload}")?,
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load_tsv(path: &Path, task: &TaskConfig) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut rows = Vec::new();
        for (n, line) in file.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let bad = |detail: &str| NacError::Format {
                what: "dataset line",
                detail: format!("line {}: {detail}", n + 1),
            };
            let (label, payload) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
            let label: usize = label.trim().parse().map_err(|_| bad("label is not an integer"))?;
            let (ctx, payload) = if task.context_vocab() > 0 {
                let (c, p) = payload.split_once(':').ok_or_else(|| bad("missing context prefix"))?;
                (Some(c.parse().map_err(|_| bad("context is not an integer"))?), p)
            } else {
                (None, payload)
            };
            rows.push((label, ctx, payload.to_string()));
        }
        Ok(Self { rows })
    }

    pub fn encode(&self, task: &TaskConfig) -> Result<Vec<Example>> {
        self.rows
            .iter()
            .map(|(label, ctx, payload)| task.encode(payload, *ctx, *label))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parity_examples() {
        assert_eq!(parity_label(&[0, 0, 0, 0]), 0);
        assert_eq!(parity_label(&[1, 0, 0, 0]), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let (bits, label) = gen_parity(16, &mut rng);
            assert_eq!(bits.len(), 16);
            assert_eq!(label, bits.iter().map(|&b| b as usize).sum::<usize>() % 2);
        }
    }

    #[test]
    fn listops_evaluator_examples() {
        assert_eq!(eval_listops("[MAX 2 9 0 ]").unwrap(), 9);
        assert_eq!(eval_listops("[MIN [MAX 1 2 ] 0 ]").unwrap(), 0);
        assert_eq!(eval_listops("7").unwrap(), 7);
        assert_eq!(eval_listops("[SM 5 6 7 ]").unwrap(), 8);
        assert_eq!(eval_listops("[MED 1 8 3 ]").unwrap(), 3);
        assert_eq!(eval_listops("[MED 1 8 ]").unwrap(), 4);
        for bad in ["", "[MAX 1", "[MAX ]", "]", "[FOO 1 ]", "1 2", "12"] {
            assert!(eval_listops(bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn generated_listops_are_well_formed_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let (s, label) = gen_listops(4, 5, 64, &mut rng);
            assert!(s.split_whitespace().count() <= 64);
            assert_eq!(usize::from(eval_listops(&s).unwrap()), label);
            let ids = listops_tokenize(&s).unwrap();
            assert!(ids.iter().all(|&i| i < LISTOPS_VOCAB));
        }
    }

    #[test]
    fn byte_tokenizer_examples() {
        assert_eq!(byte_tokenize(b"A", 8).unwrap(), vec![65]);
        assert!(byte_tokenize(b"", 8).is_err());
        let a = byte_tokenize(b"hello", 8).unwrap();
        let b = byte_tokenize(b"hellp", 8).unwrap();
        assert_eq!(a.iter().zip(&b).filter(|(x, y)| x != y).count(), 1);
        assert_eq!(byte_tokenize(b"abcdef", 3).unwrap().len(), 3);
    }

    #[test]
    fn keyword_text_contains_its_keyword() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let (text, label) = gen_keyword_text(40, &mut rng);
            assert!(text.len() <= 40);
            let pos = POSITIVE.iter().any(|k| text.split(' ').any(|w| w == *k));
            let neg = NEGATIVE.iter().any(|k| text.split(' ').any(|w| w == *k));
            assert_eq!(label == 1, pos, "{text}");
            assert_eq!(label == 0, neg, "{text}");
        }
    }

    #[test]
    fn patch_examples() {
        let img = Tensor::new(vec![8, 8, 3], (0..192).map(f64::from).collect()).unwrap();
        let p = extract_patches(&img, 4).unwrap();
        assert_eq!(p.shape(), &[4, 48]);
        assert_eq!(assemble_patches(&p, 8, 8, 3, 4).unwrap(), img);
        let flat = Tensor::full(&[8, 8, 1], 0.25);
        let p = extract_patches(&flat, 4).unwrap();
        assert!((1..4).all(|i| p.row(i) == p.row(0)));
        assert!(extract_patches(&img, 3).is_err());
    }

    #[test]
    fn two_rule_labels_follow_the_context() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let task = TaskConfig::two_rule(8);
        for _ in 0..100 {
            let ex = task.sample(&mut rng);
            let rule = ex.context.as_ref().unwrap()[0];
            assert_eq!(ex.label, ex.tokens[rule]);
        }
    }

    #[test]
    fn generators_are_pure_functions_of_the_seed() {
        for kind in [TaskKind::Parity, TaskKind::Listops, TaskKind::Text, TaskKind::TwoRule] {
            let task = TaskConfig {
                kind,
                length: 32,
                ..TaskConfig::default()
            };
            let a = RawDataset::generate(&task, 20, &mut ChaCha8Rng::seed_from_u64(5));
            let b = RawDataset::generate(&task, 20, &mut ChaCha8Rng::seed_from_u64(5));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn dataset_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for kind in [TaskKind::Parity, TaskKind::Listops, TaskKind::Text, TaskKind::TwoRule] {
            let task = TaskConfig {
                kind,
                length: 24,
                ..TaskConfig::default()
            };
            let data = RawDataset::generate(&task, 30, &mut ChaCha8Rng::seed_from_u64(6));
            let path = dir.path().join("data.tsv");
            data.save_tsv(&path).unwrap();
            let back = RawDataset::load_tsv(&path, &task).unwrap();
            assert_eq!(back, data);
            assert_eq!(back.encode(&task).unwrap().len(), 30);
        }
    }

    #[test]
    fn encoding_rejects_bad_labels_and_contexts() {
        let task = TaskConfig::parity(4);
        assert!(task.encode("0101", None, 2).is_err());
        assert!(task.encode("01x1", None, 0).is_err());
        let task = TaskConfig::two_rule(4);
        assert!(task.encode("0101", None, 0).is_err());
        assert!(task.encode("0101", Some(2), 0).is_err());
    }
}
