//! CSV parsing, cleaning, id remapping and score normalization.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetMeta, IdMaps, InteractionRecord, StudentSequence, Task};
use crate::error::{KtError, Result};

/// Supported input layouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schema {
    /// `order_id,user_id,skill_id,correct`
    Assist09,
    /// `exer_id,user_id,knowledge_code,score`
    Scored,
}

impl Schema {
    /// Required columns as (order, student, skill, outcome).
    pub fn columns(self) -> [&'static str; 4] {
        match self {
            Schema::Assist09 => ["order_id", "user_id", "skill_id", "correct"],
            Schema::Scored => ["exer_id", "user_id", "knowledge_code", "score"],
        }
    }

    pub fn task(self) -> Task {
        match self {
            Schema::Assist09 => Task::Objective,
            Schema::Scored => Task::Subjective,
        }
    }
}

impl fmt::Display for Schema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schema::Assist09 => "assist09",
            Schema::Scored => "scored",
        })
    }
}

impl FromStr for Schema {
    type Err = KtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "assist09" => Ok(Schema::Assist09),
            "scored" => Ok(Schema::Scored),
            other => Err(KtError::Config(format!(
                "unknown schema {other:?}; expected assist09 or scored"
            ))),
        }
    }
}

/// Optional item column picked up when present in either schema.
pub const ITEM_COLUMN: &str = "problem_id";

/// The fields of one source row that the pipeline uses, as raw strings.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RawRow {
    /// 1-based line in the source file.
    pub line: u64,
    pub order: String,
    pub student: String,
    pub skill: String,
    pub item: Option<String>,
    pub outcome: String,
}

impl RawRow {
    fn key(&self) -> (&str, &str, Option<&str>, &str, &str) {
        (
            &self.student,
            &self.skill,
            self.item.as_deref(),
            &self.outcome,
            &self.order,
        )
    }
}

/// Reads every row of `source`, keeping only the columns `schema` needs.
pub fn parse_csv<R: Read>(source: R, schema: Schema) -> Result<Vec<RawRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(source);
    let header = reader.byte_headers()?.clone();
    let find = |name: &str| header.iter().position(|h| trim_bom(h) == name.as_bytes());
    let mut idx = [0usize; 4];
    for (slot, name) in idx.iter_mut().zip(schema.columns()) {
        *slot = find(name).ok_or_else(|| KtError::MissingColumn {
            column: name.to_string(),
        })?;
    }
    let item_idx = find(ITEM_COLUMN);

    let mut rows = Vec::new();
    let mut record = csv::ByteRecord::new();
    loop {
        let more = reader.read_byte_record(&mut record).map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            KtError::Row {
                line,
                message: e.to_string(),
            }
        })?;
        if !more {
            break;
        }
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| -> Result<String> {
            let bytes = record.get(i).unwrap_or_default();
            std::str::from_utf8(bytes)
                .map(|s| s.trim().to_string())
                .map_err(|_| KtError::Row {
                    line,
                    message: format!("column {} is not valid UTF-8", i + 1),
                })
        };
        rows.push(RawRow {
            line,
            order: field(idx[0])?,
            student: field(idx[1])?,
            skill: field(idx[2])?,
            item: item_idx.map(field).transpose()?.filter(|s| !s.is_empty()),
            outcome: field(idx[3])?,
        });
    }
    Ok(rows)
}

fn trim_bom(h: &[u8]) -> &[u8] {
    h.strip_prefix(b"\xEF\xBB\xBF").unwrap_or(h)
}

/// Rows removed by [`clean`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanReport {
    pub nan: usize,
    pub dup: usize,
}

fn is_missing(value: &str) -> bool {
    let v = value.trim();
    v.is_empty() || v.eq_ignore_ascii_case("nan") || v.eq_ignore_ascii_case("null")
}

/// Drops rows whose skill is missing and collapses exact duplicates to their
/// first occurrence. Duplicates compare every used field, not the line number.
pub fn clean(rows: Vec<RawRow>) -> (Vec<RawRow>, CleanReport) {
    let mut report = CleanReport::default();
    let mut kept = Vec::with_capacity(rows.len());
    let mut seen = HashSet::with_capacity(rows.len());
    for row in &rows {
        if is_missing(&row.skill) {
            report.nan += 1;
        } else if seen.insert(row.key()) {
            kept.push(row.clone());
        } else {
            report.dup += 1;
        }
    }
    (kept, report)
}

fn parse_outcome(row: &RawRow, schema: Schema) -> Result<f64> {
    let column = schema.columns()[3];
    let err = || KtError::Parse {
        line: row.line,
        column: column.to_string(),
        value: row.outcome.clone(),
    };
    let v: f64 = row.outcome.parse().map_err(|_| err())?;
    match schema {
        Schema::Assist09 if v == 0.0 || v == 1.0 => Ok(v),
        Schema::Scored if v.is_finite() && v >= 0.0 => Ok(v),
        _ => Err(err()),
    }
}

/// Assigns dense student and skill indices in first-appearance order and
/// parses outcomes. Scores stay raw until [`normalize_scores`].
///
/// The order key is the record-id column when every row holds an integer
/// there; otherwise rows keep their file order.
pub fn remap_ids(rows: &[RawRow], schema: Schema) -> Result<(Vec<InteractionRecord>, DatasetMeta)> {
    let orders: Option<Vec<i64>> = rows.iter().map(|r| r.order.parse::<i64>().ok()).collect();
    let mut maps = IdMaps::default();
    let mut records = Vec::with_capacity(rows.len());
    for (k, row) in rows.iter().enumerate() {
        let outcome = parse_outcome(row, schema)?;
        records.push(InteractionRecord {
            student: maps.students.intern(&row.student),
            skill: maps.skills.intern(&row.skill),
            item: row.item.clone(),
            outcome,
            order: orders.as_ref().map_or(k as i64, |o| o[k]),
        });
    }
    let meta = DatasetMeta {
        n_skills: maps.skills.len(),
        n_students: maps.students.len(),
        task: schema.task(),
        score_levels: None,
        id_maps: maps,
    };
    Ok((records, meta))
}

/// Divides each raw score by its skill's maximum and records the number of
/// distinct raw scores per skill in `meta.score_levels`.
///
/// The maximum is the largest observed score unless `max_table` supplies one
/// for the skill's raw id.
pub fn normalize_scores(
    records: &mut [InteractionRecord],
    meta: &mut DatasetMeta,
    max_table: Option<&HashMap<String, f64>>,
) -> Result<()> {
    let n = meta.n_skills;
    let mut max = vec![0.0f64; n];
    let mut distinct: Vec<HashSet<u64>> = vec![HashSet::new(); n];
    for r in records.iter() {
        if r.skill >= n {
            return Err(KtError::Corrupt(format!(
                "skill index {} out of range",
                r.skill
            )));
        }
        max[r.skill] = max[r.skill].max(r.outcome);
        distinct[r.skill].insert(r.outcome.to_bits());
    }
    if let Some(table) = max_table {
        for (skill, m) in max.iter_mut().enumerate() {
            let raw = meta.id_maps.skills.raw_of(skill).unwrap_or_default();
            if let Some(&cap) = table.get(raw) {
                if cap < *m {
                    return Err(KtError::Range(format!(
                        "skill {raw}: observed score {m} exceeds table maximum {cap}"
                    )));
                }
                *m = cap;
            }
        }
    }
    let degenerate: Vec<String> = (0..n)
        .filter(|&s| (max[s].is_nan() || max[s] <= 0.0) && !distinct[s].is_empty())
        .map(|s| {
            meta.id_maps
                .skills
                .raw_of(s)
                .unwrap_or_default()
                .to_string()
        })
        .collect();
    if !degenerate.is_empty() {
        return Err(KtError::DegenerateSkill(degenerate));
    }
    for r in records.iter_mut() {
        r.outcome /= max[r.skill];
    }
    meta.score_levels = Some(distinct.iter().map(HashSet::len).collect());
    Ok(())
}

/// Student-level train/test partition.
///
/// The test side receives `round(n * test_fraction)` students, clamped so that
/// neither side is empty. Sequences keep their input order within each side.
pub fn split(
    sequences: &[StudentSequence],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<StudentSequence>, Vec<StudentSequence>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(KtError::Config(format!(
            "test_fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let mut students: Vec<usize> = sequences.iter().map(|s| s.student).collect();
    students.sort_unstable();
    students.dedup();
    let n = students.len();
    if n < 2 {
        return Err(KtError::Config(format!(
            "split needs at least 2 students, got {n}"
        )));
    }
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    students.shuffle(&mut rng);
    let test: HashSet<usize> = students[..n_test].iter().copied().collect();
    let (te, tr): (Vec<_>, Vec<_>) = sequences
        .iter()
        .cloned()
        .partition(|s| test.contains(&s.student));
    Ok((tr, te))
}

/// What one ingest run produced.
#[derive(Clone, Debug)]
pub struct Ingested {
    pub records: Vec<InteractionRecord>,
    pub meta: DatasetMeta,
    pub report: CleanReport,
    pub raw_rows: usize,
}

/// Parse, clean, remap and (for scored data) normalize in one pass.
pub fn ingest<R: Read>(
    source: R,
    schema: Schema,
    max_table: Option<&HashMap<String, f64>>,
) -> Result<Ingested> {
    let rows = parse_csv(source, schema)?;
    let raw_rows = rows.len();
    let (rows, report) = clean(rows);
    let (mut records, mut meta) = remap_ids(&rows, schema)?;
    if schema == Schema::Scored {
        normalize_scores(&mut records, &mut meta, max_table)?;
    }
    Ok(Ingested {
        records,
        meta,
        report,
        raw_rows,
    })
}

/// Writes one JSON object per line.
pub fn write_records_jsonl<W: Write>(records: &[InteractionRecord], out: W) -> Result<()> {
    let mut out = BufWriter::new(out);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_records_jsonl<R: BufRead>(input: R) -> Result<Vec<InteractionRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| KtError::Row {
            line: i as u64 + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Loads a `{"raw skill id": max score}` JSON table.
pub fn read_max_score_table(path: &Path) -> Result<HashMap<String, f64>> {
    let text = std::fs::read_to_string(path)?;
    let table: BTreeMap<String, f64> = serde_json::from_str(&text)?;
    if let Some((k, v)) = table.iter().find(|(_, v)| !v.is_finite() || **v <= 0.0) {
        return Err(KtError::Range(format!(
            "max score {v} for skill {k} must be positive"
        )));
    }
    Ok(table.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::to_sequences;

    const ASSIST: &str = "order_id,assignment_id,user_id,skill_id,correct,problem_id\n\
        10,1,u1,B,1,p1\n\
        11,1,u1,A,0,p2\n\
        12,1,u2,B,1,p1\n";

    #[test]
    fn parses_required_columns() {
        let rows = parse_csv(ASSIST.as_bytes(), Schema::Assist09).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].order, "10");
        assert_eq!(rows[1].skill, "A");
        assert_eq!(rows[2].item.as_deref(), Some("p1"));
        assert_eq!(rows[0].line, 2);
    }

    #[test]
    fn missing_column_is_named() {
        let csv = "order_id,user_id,correct\n1,u,1\n";
        match parse_csv(csv.as_bytes(), Schema::Assist09) {
            Err(KtError::MissingColumn { column }) => assert_eq!(column, "skill_id"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ragged_row_reports_line() {
        let csv = "order_id,user_id,skill_id,correct\n1,u,s,1\n2,u,s\n";
        match parse_csv(csv.as_bytes(), Schema::Assist09) {
            Err(KtError::Row { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    fn row(order: &str, skill: &str, outcome: &str) -> RawRow {
        RawRow {
            line: 0,
            order: order.into(),
            student: "u".into(),
            skill: skill.into(),
            item: None,
            outcome: outcome.into(),
        }
    }

    #[test]
    fn clean_drops_missing_skills_and_duplicates() {
        let rows = vec![
            row("1", "a", "1"),
            row("2", "", "1"),
            row("3", "NaN", "0"),
            row("1", "a", "1"),
            row("1", "a", "1"),
            row("4", "b", "0"),
        ];
        let (kept, report) = clean(rows);
        assert_eq!(report, CleanReport { nan: 2, dup: 2 });
        assert_eq!(kept.len(), 2);
        let (again, second) = clean(kept.clone());
        assert_eq!(again, kept);
        assert_eq!(second, CleanReport::default());
    }

    #[test]
    fn remap_uses_first_appearance() {
        let rows = parse_csv(ASSIST.as_bytes(), Schema::Assist09).unwrap();
        let (recs, meta) = remap_ids(&rows, Schema::Assist09).unwrap();
        assert_eq!(meta.id_maps.skills.index_of("B"), Some(0));
        assert_eq!(meta.id_maps.skills.index_of("A"), Some(1));
        assert_eq!(meta.n_students, 2);
        assert_eq!(recs[1].order, 11);
        for (r, raw) in recs.iter().zip(&rows) {
            let back = meta.id_maps.skills.raw_of(r.skill).unwrap();
            assert_eq!(back, raw.skill);
        }
    }

    #[test]
    fn non_numeric_outcome_is_a_parse_error() {
        let rows = vec![row("1", "a", "yes")];
        assert!(matches!(
            remap_ids(&rows, Schema::Assist09),
            Err(KtError::Parse { .. })
        ));
        let rows = vec![row("1", "a", "2")];
        assert!(remap_ids(&rows, Schema::Assist09).is_err());
    }

    #[test]
    fn non_integer_order_falls_back_to_file_order() {
        let rows = vec![row("x9", "a", "1"), row("x1", "a", "0")];
        let (recs, _) = remap_ids(&rows, Schema::Assist09).unwrap();
        assert_eq!(recs.iter().map(|r| r.order).collect::<Vec<_>>(), vec![0, 1]);
    }

    fn scored(rows: &[(&str, &str)]) -> (Vec<InteractionRecord>, DatasetMeta) {
        let rows: Vec<RawRow> = rows
            .iter()
            .enumerate()
            .map(|(i, (s, v))| row(&i.to_string(), s, v))
            .collect();
        remap_ids(&rows, Schema::Scored).unwrap()
    }

    #[test]
    fn normalizes_by_observed_max() {
        let (mut recs, mut meta) = scored(&[("q", "0"), ("q", "2"), ("q", "4")]);
        normalize_scores(&mut recs, &mut meta, None).unwrap();
        let v: Vec<f64> = recs.iter().map(|r| r.outcome).collect();
        assert_eq!(v, vec![0.0, 0.5, 1.0]);
        assert_eq!(meta.score_levels, Some(vec![3]));
    }

    #[test]
    fn per_skill_maxima_match_hand_division() {
        let (mut recs, mut meta) =
            scored(&[("a", "5"), ("b", "10"), ("a", "3"), ("b", "7"), ("a", "1")]);
        normalize_scores(&mut recs, &mut meta, None).unwrap();
        let v: Vec<f64> = recs.iter().map(|r| r.outcome).collect();
        assert_eq!(v, vec![1.0, 1.0, 3.0 / 5.0, 7.0 / 10.0, 1.0 / 5.0]);
    }

    #[test]
    fn max_table_overrides_observed_max() {
        let (mut recs, mut meta) = scored(&[("a", "3"), ("a", "6")]);
        let table = HashMap::from([("a".to_string(), 12.0)]);
        normalize_scores(&mut recs, &mut meta, Some(&table)).unwrap();
        assert_eq!(recs[1].outcome, 0.5);
        let (mut recs, mut meta) = scored(&[("a", "13")]);
        assert!(normalize_scores(&mut recs, &mut meta, Some(&table)).is_err());
    }

    #[test]
    fn all_zero_skill_is_degenerate() {
        let (mut recs, mut meta) = scored(&[("a", "0"), ("b", "1"), ("a", "0")]);
        match normalize_scores(&mut recs, &mut meta, None) {
            Err(KtError::DegenerateSkill(s)) => assert_eq!(s, vec!["a".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    fn population(n: usize) -> Vec<StudentSequence> {
        let recs: Vec<InteractionRecord> = (0..n * 3)
            .map(|k| InteractionRecord {
                student: k / 3,
                skill: 0,
                item: None,
                outcome: 1.0,
                order: k as i64,
            })
            .collect();
        let meta = DatasetMeta {
            n_skills: 1,
            n_students: n,
            task: Task::Objective,
            score_levels: None,
            id_maps: IdMaps::default(),
        };
        to_sequences(&recs, &meta, 50).unwrap()
    }

    #[test]
    fn split_is_student_level_and_seeded() {
        let seqs = population(10);
        let (tr, te) = split(&seqs, 0.2, 7).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
        let (tr2, te2) = split(&seqs, 0.2, 7).unwrap();
        assert_eq!(tr, tr2);
        assert_eq!(te, te2);
        let a: HashSet<usize> = tr.iter().map(|s| s.student).collect();
        let b: HashSet<usize> = te.iter().map(|s| s.student).collect();
        assert!(a.is_disjoint(&b));
        assert_eq!(a.len() + b.len(), 10);
    }

    #[test]
    fn split_needs_two_students() {
        assert!(split(&population(1), 0.5, 0).is_err());
        assert!(split(&population(4), 1.0, 0).is_err());
        let (tr, te) = split(&population(2), 0.01, 0).unwrap();
        assert_eq!((tr.len(), te.len()), (1, 1));
    }

    #[test]
    fn jsonl_round_trip() {
        let rows = parse_csv(ASSIST.as_bytes(), Schema::Assist09).unwrap();
        let (recs, _) = remap_ids(&rows, Schema::Assist09).unwrap();
        let mut buf = Vec::new();
        write_records_jsonl(&recs, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(r#"{"student":0,"skill":0,"item":"p1","outcome":1.0,"order":10}"#));
        assert_eq!(read_records_jsonl(&buf[..]).unwrap(), recs);
    }
}
