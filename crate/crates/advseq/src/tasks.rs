//! Synthetic corpora: a copy task over a synonym-clustered vocabulary
//! (robustness testbed with a ground-truth meaning-preservation oracle)
//! and a toy table-to-text task (faithfulness testbed).
//!
//! File formats, all plain text:
//! - corpus: one sample per line, `src-tokens<TAB>tgt-tokens`, space-joined
//! - vocab: one token per line, the four specials first
//! - clusters: one cluster per line, space-joined tokens
//! - tables: one JSON `TableRecord` per line, aligned with the corpus

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::metrics::TableRecord;
use crate::model::{TokenId, TokenSeq, Vocab, NUM_SPECIALS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    Table,
}

impl std::str::FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "table" => Ok(TaskKind::Table),
            other => Err(format!("unknown task {other:?} (expected copy|table)")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CorpusSpec {
    pub kind: TaskKind,
    pub content_vocab: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub cluster_size: usize,
    pub num_keys: usize,
    pub pool_size: usize,
    pub num_templates: usize,
    pub seed: u64,
}

impl CorpusSpec {
    pub fn copy_default(seed: u64) -> Self {
        CorpusSpec {
            kind: TaskKind::Copy,
            content_vocab: 50,
            len_min: 8,
            len_max: 12,
            n_train: 5000,
            n_valid: 500,
            n_test: 500,
            cluster_size: 5,
            num_keys: 0,
            pool_size: 0,
            num_templates: 0,
            seed,
        }
    }

    pub fn table_default(seed: u64) -> Self {
        CorpusSpec {
            kind: TaskKind::Table,
            content_vocab: 0,
            len_min: 0,
            len_max: 0,
            n_train: 4000,
            n_valid: 400,
            n_test: 400,
            cluster_size: 0,
            num_keys: 6,
            pool_size: 20,
            num_templates: 2,
            seed,
        }
    }

    fn validate(&self) -> Result<(), TaskError> {
        let ok = match self.kind {
            TaskKind::Copy => {
                self.content_vocab > 0
                    && self.cluster_size >= 2
                    && self.content_vocab % self.cluster_size == 0
                    && self.len_min >= 1
                    && self.len_min <= self.len_max
            }
            TaskKind::Table => {
                self.num_keys > 0 && self.pool_size >= 2 && (1..=2).contains(&self.num_templates)
            }
        };
        if ok && self.n_train > 0 && self.n_valid > 0 && self.n_test > 0 {
            Ok(())
        } else {
            Err(TaskError::BadSpec)
        }
    }
}

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("invalid corpus spec")]
    BadSpec,
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}:{line}:{column}: unknown token {token:?}")]
    UnknownToken { path: PathBuf, line: usize, column: usize, token: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Disjoint clusters of content tokens that are mutually substitutable:
/// the ground-truth meaning-preservation oracle for attacks.
#[derive(Clone, Debug)]
pub struct SynonymClusters {
    clusters: Vec<Vec<TokenId>>,
    membership: Vec<Option<usize>>,
}

impl SynonymClusters {
    pub fn new(clusters: Vec<Vec<TokenId>>, vocab_size: usize) -> Self {
        let mut membership = vec![None; vocab_size];
        let mut seen = HashSet::new();
        for (c, members) in clusters.iter().enumerate() {
            assert!(members.len() >= 2, "cluster size must be >= 2");
            for &id in members {
                assert!(seen.insert(id), "clusters must be disjoint");
                membership[id] = Some(c);
            }
        }
        SynonymClusters { clusters, membership }
    }

    pub fn clusters(&self) -> &[Vec<TokenId>] {
        &self.clusters
    }

    pub fn cluster_of(&self, id: TokenId) -> Option<usize> {
        self.membership.get(id).copied().flatten()
    }

    pub fn same_cluster(&self, a: TokenId, b: TokenId) -> bool {
        match (self.cluster_of(a), self.cluster_of(b)) {
            (Some(x), Some(y)) => x == y,
            _ => false,
        }
    }

    pub fn save(&self, path: &Path, vocab: &Vocab) -> Result<(), TaskError> {
        let mut out = String::new();
        for members in &self.clusters {
            let line: Vec<&str> = members.iter().map(|&id| vocab.token(id)).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path, vocab: &Vocab) -> Result<Self, TaskError> {
        let text = fs::read_to_string(path)?;
        let mut clusters = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut members = Vec::new();
            for (col, tok) in line.split_whitespace().enumerate() {
                let id = vocab.id(tok).ok_or_else(|| TaskError::UnknownToken {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    column: col + 1,
                    token: tok.to_string(),
                })?;
                members.push(id);
            }
            clusters.push(members);
        }
        Ok(SynonymClusters::new(clusters, vocab.len()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub x: TokenSeq,
    pub y: TokenSeq,
}

/// Everything produced in memory for one task; file emission serializes it.
pub struct GeneratedTask {
    pub vocab: Vocab,
    pub splits: [Vec<Sample>; 3],
    pub clusters: Option<SynonymClusters>,
    pub tables: Option<[Vec<TableRecord>; 3]>,
    /// tokens parent_lite should ignore (templates fillers and keys)
    pub stop_list: Vec<TokenId>,
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "valid", "test"];

/// Copy task: y = x, tokens drawn by first sampling a cluster sequence and
/// then a member per position, so cluster siblings appear in
/// interchangeable contexts.
pub fn gen_copy_task(spec: &CorpusSpec) -> Result<GeneratedTask, TaskError> {
    spec.validate()?;
    if spec.kind != TaskKind::Copy {
        return Err(TaskError::BadSpec);
    }
    let content: Vec<String> = (0..spec.content_vocab).map(|i| format!("w{i:02}")).collect();
    let vocab = Vocab::from_content(&content);
    let num_clusters = spec.content_vocab / spec.cluster_size;
    let clusters: Vec<Vec<TokenId>> = (0..num_clusters)
        .map(|c| {
            (0..spec.cluster_size)
                .map(|j| NUM_SPECIALS + c * spec.cluster_size + j)
                .collect()
        })
        .collect();
    let clusters = SynonymClusters::new(clusters, vocab.len());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let counts = [spec.n_train, spec.n_valid, spec.n_test];
    let splits = counts.map(|n| {
        (0..n)
            .map(|_| {
                let len = rng.gen_range(spec.len_min..=spec.len_max);
                let ids: Vec<TokenId> = (0..len)
                    .map(|_| {
                        let c = rng.gen_range(0..num_clusters);
                        clusters.clusters()[c][rng.gen_range(0..spec.cluster_size)]
                    })
                    .collect();
                Sample { x: TokenSeq::new(ids.clone()), y: TokenSeq::new(ids) }
            })
            .collect()
    });
    Ok(GeneratedTask {
        vocab,
        splits,
        clusters: Some(clusters),
        tables: None,
        stop_list: Vec::new(),
    })
}

const TABLE_FILLERS: usize = 4;

/// Table task: x linearizes `key value` pairs in key order; y verbalizes
/// every value exactly once through one of two filler templates.
pub fn gen_table_task(spec: &CorpusSpec) -> Result<GeneratedTask, TaskError> {
    spec.validate()?;
    if spec.kind != TaskKind::Table {
        return Err(TaskError::BadSpec);
    }
    let mut content: Vec<String> = (0..spec.num_keys).map(|k| format!("k{k}")).collect();
    content.extend((0..TABLE_FILLERS).map(|f| format!("f{f}")));
    for k in 0..spec.num_keys {
        content.extend((0..spec.pool_size).map(|v| format!("v{k}_{v}")));
    }
    let vocab = Vocab::from_content(&content);
    let key_id = |k: usize| NUM_SPECIALS + k;
    let filler_id = |f: usize| NUM_SPECIALS + spec.num_keys + f;
    let value_id =
        |k: usize, v: usize| NUM_SPECIALS + spec.num_keys + TABLE_FILLERS + k * spec.pool_size + v;
    let mut stop_list: Vec<TokenId> = (0..spec.num_keys).map(key_id).collect();
    stop_list.extend((0..TABLE_FILLERS).map(filler_id));

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let counts = [spec.n_train, spec.n_valid, spec.n_test];
    let mut splits: Vec<Vec<Sample>> = Vec::new();
    let mut tables: Vec<Vec<TableRecord>> = Vec::new();
    for n in counts {
        let mut samples = Vec::with_capacity(n);
        let mut records = Vec::with_capacity(n);
        for _ in 0..n {
            let values: Vec<TokenId> = (0..spec.num_keys)
                .map(|k| value_id(k, rng.gen_range(0..spec.pool_size)))
                .collect();
            let record = TableRecord {
                pairs: (0..spec.num_keys).map(|k| (key_id(k), vec![values[k]])).collect(),
            };
            let x = linearize(&record);
            // template is a function of the table content so the
            // verbalization is fully predictable from the source
            let template = (values[0] - value_id(0, 0)) % spec.num_templates;
            let y = match template {
                0 => {
                    // f0 v0 f1 v1 f0 v2 f1 v3 ...
                    let mut out = Vec::new();
                    for (i, &v) in values.iter().enumerate() {
                        out.push(filler_id(i % 2));
                        out.push(v);
                    }
                    out
                }
                _ => {
                    // f2 v_last ... v0 f3
                    let mut out = vec![filler_id(2)];
                    out.extend(values.iter().rev());
                    out.push(filler_id(3));
                    out
                }
            };
            samples.push(Sample { x: TokenSeq::new(x), y: TokenSeq::new(y) });
            records.push(record);
        }
        splits.push(samples);
        tables.push(records);
    }
    let mut splits_it = splits.into_iter();
    let mut tables_it = tables.into_iter();
    Ok(GeneratedTask {
        vocab,
        splits: [
            splits_it.next().unwrap(),
            splits_it.next().unwrap(),
            splits_it.next().unwrap(),
        ],
        clusters: None,
        tables: Some([
            tables_it.next().unwrap(),
            tables_it.next().unwrap(),
            tables_it.next().unwrap(),
        ]),
        stop_list,
    })
}

/// `key value key value ...` in record order.
pub fn linearize(record: &TableRecord) -> Vec<TokenId> {
    let mut out = Vec::new();
    for (k, vs) in &record.pairs {
        out.push(*k);
        out.extend(vs.iter().copied());
    }
    out
}

/// Inverse of [`linearize`] for single-valued keys: the sidecar
/// round-trip check. `is_key` decides which tokens open a new pair.
pub fn parse_linearization<F: Fn(TokenId) -> bool>(
    x: &[TokenId],
    is_key: F,
) -> Option<TableRecord> {
    let mut pairs: Vec<(TokenId, Vec<TokenId>)> = Vec::new();
    for &tok in x {
        if is_key(tok) {
            pairs.push((tok, Vec::new()));
        } else {
            pairs.last_mut()?.1.push(tok);
        }
    }
    if pairs.iter().any(|(_, vs)| vs.is_empty()) {
        return None;
    }
    Some(TableRecord { pairs })
}

fn sample_line(s: &Sample, vocab: &Vocab) -> String {
    let join = |ids: &[TokenId]| {
        ids.iter().map(|&id| vocab.token(id)).collect::<Vec<_>>().join(" ")
    };
    format!("{}\t{}", join(&s.x.ids), join(&s.y.ids))
}

/// Emit a generated task under `dir`: `{train,valid,test}.tsv`,
/// `vocab.txt`, plus `clusters.txt`, `tables.{split}.jsonl`, and
/// `stoplist.txt` when the task defines them.
pub fn write_task(task: &GeneratedTask, dir: &Path) -> Result<(), TaskError> {
    fs::create_dir_all(dir)?;
    let vocab_lines: Vec<String> = task.vocab.tokens().to_vec();
    fs::write(dir.join("vocab.txt"), vocab_lines.join("\n") + "\n")?;
    for (split, samples) in SPLIT_NAMES.iter().zip(&task.splits) {
        let mut out = String::new();
        for s in samples {
            out.push_str(&sample_line(s, &task.vocab));
            out.push('\n');
        }
        fs::write(dir.join(format!("{split}.tsv")), out)?;
    }
    if let Some(clusters) = &task.clusters {
        clusters.save(&dir.join("clusters.txt"), &task.vocab)?;
    }
    if let Some(tables) = &task.tables {
        for (split, records) in SPLIT_NAMES.iter().zip(tables) {
            let mut out = String::new();
            for r in records {
                out.push_str(&serde_json::to_string(r).expect("serialize table"));
                out.push('\n');
            }
            fs::write(dir.join(format!("tables.{split}.jsonl")), out)?;
        }
    }
    if !task.stop_list.is_empty() {
        let lines: Vec<&str> =
            task.stop_list.iter().map(|&id| task.vocab.token(id)).collect();
        fs::write(dir.join("stoplist.txt"), lines.join("\n") + "\n")?;
    }
    Ok(())
}

pub fn load_vocab(path: &Path) -> Result<Vocab, TaskError> {
    let text = fs::read_to_string(path)?;
    let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
    if tokens.len() < NUM_SPECIALS || tokens[0] != "<pad>" {
        return Err(TaskError::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: "vocab file must start with the four specials".into(),
        });
    }
    Ok(Vocab::from_full_list(tokens))
}

pub fn load_corpus(path: &Path, vocab: &Vocab) -> Result<Vec<Sample>, TaskError> {
    let text = fs::read_to_string(path)?;
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (src, tgt) = line.split_once('\t').ok_or_else(|| TaskError::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg: "expected exactly one tab between source and target".into(),
        })?;
        let parse_side = |side: &str, col_base: usize| -> Result<Vec<TokenId>, TaskError> {
            side.split_whitespace()
                .enumerate()
                .map(|(col, tok)| {
                    vocab.id(tok).ok_or_else(|| TaskError::UnknownToken {
                        path: path.to_path_buf(),
                        line: lineno + 1,
                        column: col_base + col + 1,
                        token: tok.to_string(),
                    })
                })
                .collect()
        };
        let x = parse_side(src, 0)?;
        let y = parse_side(tgt, src.split_whitespace().count())?;
        if x.is_empty() || y.is_empty() {
            return Err(TaskError::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: "empty source or target".into(),
            });
        }
        samples.push(Sample { x: TokenSeq::new(x), y: TokenSeq::new(y) });
    }
    Ok(samples)
}

pub fn load_tables(path: &Path) -> Result<Vec<TableRecord>, TaskError> {
    let text = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: TableRecord = serde_json::from_str(line).map_err(|e| TaskError::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        records.push(r);
    }
    Ok(records)
}

pub fn load_stop_list(path: &Path, vocab: &Vocab) -> Result<HashSet<TokenId>, TaskError> {
    let text = fs::read_to_string(path)?;
    let mut out = HashSet::new();
    for (lineno, tok) in text.lines().enumerate() {
        if tok.trim().is_empty() {
            continue;
        }
        let id = vocab.id(tok).ok_or_else(|| TaskError::UnknownToken {
            path: path.to_path_buf(),
            line: lineno + 1,
            column: 1,
            token: tok.to_string(),
        })?;
        out.insert(id);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::parent_lite;
    use tempfile::tempdir;

    fn small_copy_spec() -> CorpusSpec {
        CorpusSpec {
            n_train: 60,
            n_valid: 12,
            n_test: 12,
            ..CorpusSpec::copy_default(7)
        }
    }

    fn small_table_spec() -> CorpusSpec {
        CorpusSpec {
            n_train: 40,
            n_valid: 10,
            n_test: 10,
            ..CorpusSpec::table_default(7)
        }
    }

    #[test]
    fn copy_task_y_equals_x() {
        let task = gen_copy_task(&small_copy_spec()).unwrap();
        for split in &task.splits {
            for s in split {
                assert_eq!(s.x.ids, s.y.ids);
                assert!(s.x.len() >= 8 && s.x.len() <= 12);
                assert!(s.x.ids.iter().all(|&id| id >= NUM_SPECIALS));
            }
        }
        let clusters = task.clusters.as_ref().unwrap();
        assert_eq!(clusters.clusters().len(), 10);
        assert!(clusters.same_cluster(4, 8));
        assert!(!clusters.same_cluster(4, 9));
    }

    #[test]
    fn copy_task_deterministic_files() {
        let spec = small_copy_spec();
        let d1 = tempdir().unwrap();
        let d2 = tempdir().unwrap();
        write_task(&gen_copy_task(&spec).unwrap(), d1.path()).unwrap();
        write_task(&gen_copy_task(&spec).unwrap(), d2.path()).unwrap();
        for name in ["train.tsv", "valid.tsv", "test.tsv", "vocab.txt", "clusters.txt"] {
            let a = fs::read(d1.path().join(name)).unwrap();
            let b = fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical-seed runs");
        }
    }

    #[test]
    fn copy_splits_rarely_collide() {
        let task = gen_copy_task(&CorpusSpec::copy_default(3)).unwrap();
        let train: HashSet<&Vec<TokenId>> =
            task.splits[0].iter().map(|s| &s.x.ids).collect();
        let mut collisions = 0usize;
        let mut total = 0usize;
        for split in &task.splits[1..] {
            for s in split {
                total += 1;
                if train.contains(&s.x.ids) {
                    collisions += 1;
                }
            }
        }
        // >= 8 positions over 50 tokens: 50^8 ~ 4e13 sequences, so the
        // expected collision count against 5000 train samples is ~1e-7
        assert!(
            (collisions as f64) / (total as f64) < 1e-3,
            "{collisions}/{total} held-out samples collide with train"
        );
    }

    #[test]
    fn table_task_faithful_by_construction() {
        let task = gen_table_task(&small_table_spec()).unwrap();
        let tables = task.tables.as_ref().unwrap();
        let stop: HashSet<TokenId> = task.stop_list.iter().copied().collect();
        for (split, records) in task.splits.iter().zip(tables) {
            for (s, r) in split.iter().zip(records) {
                let score = parent_lite(&s.y.ids, r, &s.y.ids, &stop);
                assert_eq!((score.precision, score.recall, score.f1), (1.0, 1.0, 1.0));
                // every value token appears in x and in y
                for v in r.value_tokens() {
                    assert!(s.x.ids.contains(&v));
                    assert_eq!(s.y.ids.iter().filter(|&&t| t == v).count(), 1);
                }
                // linearization round-trip
                assert_eq!(s.x.ids, linearize(r));
                let keys: HashSet<TokenId> = r.pairs.iter().map(|(k, _)| *k).collect();
                let parsed = parse_linearization(&s.x.ids, |t| keys.contains(&t)).unwrap();
                assert_eq!(parsed.pairs, r.pairs);
            }
        }
    }

    #[test]
    fn corpus_roundtrip_and_errors() {
        let task = gen_copy_task(&small_copy_spec()).unwrap();
        let dir = tempdir().unwrap();
        write_task(&task, dir.path()).unwrap();
        let vocab = load_vocab(&dir.path().join("vocab.txt")).unwrap();
        assert_eq!(vocab.len(), task.vocab.len());
        let loaded = load_corpus(&dir.path().join("train.tsv"), &vocab).unwrap();
        assert_eq!(loaded, task.splits[0]);
        let clusters = SynonymClusters::load(&dir.path().join("clusters.txt"), &vocab).unwrap();
        assert_eq!(clusters.clusters(), task.clusters.as_ref().unwrap().clusters());

        // truncated line names the line number
        let bad = dir.path().join("bad.tsv");
        fs::write(&bad, "w00 w01\tw00 w01\nw02 w03\n").unwrap();
        match load_corpus(&bad, &vocab) {
            Err(TaskError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        // unknown token names line and column
        fs::write(&bad, "w00 zzz\tw00\n").unwrap();
        match load_corpus(&bad, &vocab) {
            Err(TaskError::UnknownToken { line, column, token, .. }) => {
                assert_eq!((line, column), (1, 2));
                assert_eq!(token, "zzz");
            }
            other => panic!("expected unknown token, got {other:?}"),
        }
        // empty file is a valid empty corpus
        fs::write(&bad, "").unwrap();
        assert!(load_corpus(&bad, &vocab).unwrap().is_empty());
    }

    #[test]
    fn table_sidecar_roundtrip() {
        let task = gen_table_task(&small_table_spec()).unwrap();
        let dir = tempdir().unwrap();
        write_task(&task, dir.path()).unwrap();
        let vocab = load_vocab(&dir.path().join("vocab.txt")).unwrap();
        let loaded = load_tables(&dir.path().join("tables.train.jsonl")).unwrap();
        assert_eq!(loaded.len(), task.splits[0].len());
        assert_eq!(loaded[0].pairs, task.tables.as_ref().unwrap()[0][0].pairs);
        let stop = load_stop_list(&dir.path().join("stoplist.txt"), &vocab).unwrap();
        assert_eq!(stop.len(), task.stop_list.len());
    }
}
