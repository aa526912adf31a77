//! Fixture databases and scripted model conversations for hermetic runs.
//!
//! Everything here is deterministic: the same call always writes the same
//! database bytes and the same script.

use std::fs;
use std::path::Path;

use rusqlite::Connection;
use serde_json::{json, Value};

use crate::db::DbHandle;
use crate::gateway::Script;
use crate::prompts::default_stage_prompt;
use crate::stage::{CallTag, StageId};

/// Creates (or replaces) a SQLite file from a SQL batch.
pub fn create_db(path: &Path, db_id: &str, batch: &str) -> rusqlite::Result<DbHandle> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| rusqlite::Error::ToSqlConversionFailure(Box::new(e)))?;
    }
    if path.exists() {
        fs::remove_file(path).map_err(|e| rusqlite::Error::ToSqlConversionFailure(Box::new(e)))?;
    }
    let conn = Connection::open(path)?;
    conn.execute_batch(batch)?;
    drop(conn);
    Ok(DbHandle::new(db_id, path))
}

pub const CALIFORNIA_SCHOOLS_DDL: &str = "
CREATE TABLE schools (
    CDSCode TEXT PRIMARY KEY,
    County TEXT,
    School TEXT,
    Charter INTEGER,
    FundingType TEXT
);
CREATE TABLE frpm (
    CDSCode TEXT PRIMARY KEY REFERENCES schools(CDSCode),
    \"Enrollment (K-12)\" REAL
);
INSERT INTO schools VALUES
    ('01', 'Santa Clara', 'Alpha Charter', 1, 'Locally funded'),
    ('02', 'Santa Clara', 'Beta Charter', 1, 'Locally funded'),
    ('03', 'Santa Clara', 'Gamma Charter', 1, 'Directly funded'),
    ('04', 'Santa Clara', 'Delta Charter', 1, 'Directly funded'),
    ('05', 'Santa Clara', 'Epsilon Charter', 1, 'Directly funded'),
    ('06', 'Santa Clara', 'Zeta Charter', 1, 'Not in CS funding model'),
    ('07', 'Santa Clara', 'Eta Elementary', 0, NULL),
    ('08', 'Santa Clara', 'Theta High', 0, NULL),
    ('09', 'Alameda', 'Iota Charter', 1, 'Locally funded'),
    ('10', 'Alameda', 'Kappa Charter', 1, 'Locally funded'),
    ('11', 'Alameda', 'Lambda Charter', 1, 'Directly funded');
INSERT INTO frpm VALUES
    ('01', 310), ('02', 120), ('03', 480), ('04', 95), ('05', 210), ('06', 60),
    ('07', 520), ('08', 1300), ('09', 240), ('10', 180), ('11', 75);
";

/// Santa Clara holds charters of every funding class: 2 locally funded,
/// 3 directly funded, 1 outside the charter funding model.
pub fn california_schools(dir: &Path) -> rusqlite::Result<DbHandle> {
    create_db(&dir.join("california_schools.sqlite"), "california_schools", CALIFORNIA_SCHOOLS_DDL)
}

pub const CONCERT_SINGER_DDL: &str = "
CREATE TABLE singer (
    singer_id INTEGER PRIMARY KEY,
    name TEXT NOT NULL,
    country TEXT,
    age INTEGER
);
INSERT INTO singer VALUES
    (1, 'Joe Sharp', 'Netherlands', 52),
    (2, 'Timbaland', 'United States', 32),
    (3, 'Justin Brown', 'France', 29),
    (4, 'Rose White', 'France', 41),
    (5, 'John Nizinik', 'France', 43),
    (6, 'Tribal King', 'United States', 25);
";

pub fn concert_singer(dir: &Path) -> rusqlite::Result<DbHandle> {
    create_db(&dir.join("concert_singer.sqlite"), "concert_singer", CONCERT_SINGER_DDL)
}

pub const EMPLOYEES_DDL: &str = "
CREATE TABLE employees (
    employee_id INTEGER PRIMARY KEY,
    name TEXT NOT NULL,
    hire_year INTEGER
);
INSERT INTO employees VALUES
    (1, 'Ada', 2017), (2, 'Grace', 2019), (3, 'Edsger', 2020), (4, 'Barbara', 2022);
";

/// Contains a 2019 hire, so `> 2019` and `>= 2019` disagree.
pub fn employees(dir: &Path) -> rusqlite::Result<DbHandle> {
    create_db(&dir.join("employees.sqlite"), "employees", EMPLOYEES_DDL)
}

// ------------------------------------------------------------ stage replies

pub fn stage1_reply(tables: &[&str], attributes: &[&str]) -> String {
    json!({ "tables": tables, "attributes": attributes }).to_string()
}

/// One stage-2 literal with the given column and comparison type.
pub fn literal(column: Option<&str>, raw: &str, comparison_type: &str) -> Value {
    json!({
        "column_candidate": column,
        "raw_expression": raw,
        "comparison_type": comparison_type,
        "direction": null,
        "cardinality_hint": "unknown",
        "confidence": 0.9,
    })
}

pub fn stage2_reply(literals: Vec<Value>) -> String {
    json!({ "literals": literals, "filter_candidates": [], "notes": null }).to_string()
}

/// A plan with the given filters and aggregations; everything else empty.
pub fn plan_reply(intent: &str, entities: &[&str], attributes: &[&str], filters: Vec<Value>, aggregations: Value) -> String {
    json!({
        "intent": intent,
        "entities": entities,
        "attributes": attributes,
        "filters": filters,
        "aggregations": aggregations,
        "joins": [],
        "order": [],
        "limit": null,
        "grouping": [],
        "derived": [],
        "feasibility_checked": true,
        "cardinality": "single",
        "distinct": false,
    })
    .to_string()
}

pub fn judge_reply(intent_preserved: bool, missing: &[&str], rationale: &str) -> String {
    json!({ "intent_preserved": intent_preserved, "missing_constraints": missing, "rationale": rationale }).to_string()
}

pub fn critic_reply(likely_stage: Option<&str>, issues: &[&str]) -> String {
    json!({ "likely_stage": likely_stage, "issues": issues, "notes": [] }).to_string()
}

/// A refiner reply that appends guidance lines to the default prompt of
/// `stage`. Valid under the revision rules as long as the lines contain no
/// braces.
pub fn refiner_reply(stage: StageId, lines: &[&str]) -> String {
    let mut prompt = default_stage_prompt(stage).to_string();
    for line in lines {
        prompt.push('\n');
        prompt.push_str(line);
    }
    json!({ "new_prompt": prompt, "explanation": lines.last().copied().unwrap_or("") }).to_string()
}

/// Scripted stage outputs for one question. SQL replies are keyed by the
/// SQL prompt version (`None` matches any version).
#[derive(Debug, Clone)]
pub struct ScriptedExample {
    pub example_id: String,
    pub stage1: String,
    pub stage2: String,
    pub plan: String,
    pub sql: Vec<(Option<u32>, String)>,
}

impl ScriptedExample {
    pub fn into_script(self, script: Script) -> Script {
        let id = self.example_id.as_str();
        let mut script = script
            .respond(CallTag::Stage(StageId::Stage1), id, None, [self.stage1.as_str()])
            .respond(CallTag::Stage(StageId::Stage2), id, None, [self.stage2.as_str()])
            .respond(CallTag::Stage(StageId::Plan), id, None, [self.plan.as_str()]);
        for (version, sql) in &self.sql {
            script = script.respond(CallTag::Stage(StageId::Sql), id, *version, [sql.as_str()]);
        }
        script
    }
}

// ------------------------------------------------------------ worked example

pub const WORKED_ID: &str = "ca-charter-ratio";
pub const WORKED_QUESTION: &str = "What is the ratio in percentage of Santa Clara County charter schools that are locally \
funded compared to charter schools with all other types of funding?";
pub const WORKED_EVIDENCE: &str = "Ratio in percentage = (count(locally funded charter schools in Santa Clara) / \
count(non-locally funded charter schools in Santa Clara)) * 100%";

pub const WORKED_GOLD: &str = "SELECT CAST(SUM(CASE WHEN FundingType = 'Locally funded' THEN 1 ELSE 0 END) AS REAL) * 100 / \
SUM(CASE WHEN FundingType != 'Locally funded' THEN 1 ELSE 0 END) FROM schools WHERE County = 'Santa Clara' AND Charter = 1;";

/// The three successive candidates: wrong denominator, corrected ratio,
/// corrected ratio with a zero guard.
pub const WORKED_SQL: [&str; 3] = [
    "SELECT CAST(SUM(CASE WHEN FundingType = 'Locally funded' THEN 1 ELSE 0 END) AS REAL) * 100 / COUNT(*) \
FROM schools WHERE County = 'Santa Clara' AND Charter = 1;",
    WORKED_GOLD,
    "SELECT CAST(SUM(CASE WHEN FundingType = 'Locally funded' THEN 1 ELSE 0 END) AS REAL) * 100 / \
NULLIF(SUM(CASE WHEN FundingType != 'Locally funded' THEN 1 ELSE 0 END), 0) FROM schools \
WHERE County = 'Santa Clara' AND Charter = 1;",
];

const WORKED_NOTES: [&str; 2] = [
    "When a ratio compares two groups, the denominator counts only the comparison group, never all rows.",
    "Guard every division with NULLIF(denominator, 0).",
];

pub fn worked_example() -> ScriptedExample {
    let attrs = ["schools.County", "schools.Charter", "schools.FundingType"];
    ScriptedExample {
        example_id: WORKED_ID.into(),
        stage1: stage1_reply(&["schools"], &attrs),
        stage2: stage2_reply(vec![
            literal(Some("schools.County"), "Santa Clara", "equality"),
            literal(Some("schools.FundingType"), "locally funded", "equality"),
            literal(Some("schools.Charter"), "charter schools", "equality"),
        ]),
        plan: plan_reply(
            "percentage of locally funded charter schools relative to the other charter schools in Santa Clara",
            &["schools"],
            &attrs,
            vec![
                json!("County = 'Santa Clara'"),
                json!("Charter = 1"),
                json!({ "column": "FundingType", "op": "=", "value": "Locally funded" }),
                json!({ "column": "FundingType", "op": "!=", "value": "Locally funded" }),
            ],
            json!({ "numerator": "SUM over locally funded charters", "denominator": "SUM over other charters" }),
        ),
        sql: WORKED_SQL.iter().enumerate().map(|(i, s)| (Some(i as u32 + 1), s.to_string())).collect(),
    }
}

/// Model judge, critic and refiner replies for the worked example: the
/// judge rejects t0 and t1 and accepts t2; each critique points at stage 3.
pub fn worked_script() -> Script {
    let id = WORKED_ID;
    worked_example()
        .into_script(Script::default())
        .respond(
            CallTag::Judge,
            id,
            Some(0),
            [judge_reply(
                false,
                &["denominator restricted to non-locally funded charter schools"],
                "the denominator counts all charter schools",
            )],
        )
        .respond(
            CallTag::Judge,
            id,
            Some(1),
            [judge_reply(false, &["zero-denominator guard"], "the division fails when no other charters exist")],
        )
        .respond(CallTag::Judge, id, Some(2), [judge_reply(true, &[], "ratio matches the question")])
        .respond(
            CallTag::Critic,
            id,
            Some(0),
            [critic_reply(
                Some("stage3"),
                &["[semantic-mismatch] incorrect denominator: uses all charter schools instead of non-locally funded ones :: COUNT(*)"],
            )],
        )
        .respond(
            CallTag::Critic,
            id,
            Some(1),
            [critic_reply(Some("stage3"), &["[sql-structure] division is not guarded against a zero denominator"])],
        )
        .respond(CallTag::Refiner, id, Some(1), [refiner_reply(StageId::Sql, &WORKED_NOTES[..1])])
        .respond(CallTag::Refiner, id, Some(2), [refiner_reply(StageId::Sql, &WORKED_NOTES)])
}

// ------------------------------------------------------------ mechanism set

pub const MECHANISM_NOTE: &str = "Every filter in the plan must appear in the WHERE clause.";

/// Three questions over `concert_singer` as (id, question, gold SQL).
/// B's first candidate drops its filter; a refined SQL prompt fixes it.
pub const MECHANISM_QUESTIONS: [(&str, &str, &str); 3] = [
    ("0", "How many singers are there?", "SELECT COUNT(*) FROM singer;"),
    ("1", "What are the names of singers from France?", "SELECT name FROM singer WHERE country = 'France';"),
    ("2", "What is the average age of all singers?", "SELECT AVG(age) FROM singer;"),
];

pub fn mechanism_examples() -> Vec<ScriptedExample> {
    let count = ScriptedExample {
        example_id: "0".into(),
        stage1: stage1_reply(&["singer"], &["singer.singer_id"]),
        stage2: stage2_reply(vec![]),
        plan: plan_reply("count singers", &["singer"], &["singer.singer_id"], vec![], json!({ "function": "COUNT" })),
        sql: vec![(None, MECHANISM_QUESTIONS[0].2.into())],
    };
    let france = ScriptedExample {
        example_id: "1".into(),
        stage1: stage1_reply(&["singer"], &["singer.name", "singer.country"]),
        stage2: stage2_reply(vec![literal(Some("singer.country"), "France", "equality")]),
        plan: plan_reply(
            "names of French singers",
            &["singer"],
            &["singer.name", "singer.country"],
            vec![json!("country = 'France'")],
            Value::Null,
        ),
        sql: vec![(Some(1), "SELECT name FROM singer;".into()), (None, MECHANISM_QUESTIONS[1].2.into())],
    };
    let average = ScriptedExample {
        example_id: "2".into(),
        stage1: stage1_reply(&["singer"], &["singer.age"]),
        stage2: stage2_reply(vec![]),
        plan: plan_reply("average singer age", &["singer"], &["singer.age"], vec![], json!({ "function": "AVG", "target": "age" })),
        sql: vec![(None, MECHANISM_QUESTIONS[2].2.into())],
    };
    vec![count, france, average]
}

/// Stage replies for the mechanism set plus one refiner reply for B.
pub fn mechanism_script() -> Script {
    let script = mechanism_examples().into_iter().fold(Script::default(), |s, e| e.into_script(s));
    script.respond(CallTag::Refiner, "1", Some(1), [refiner_reply(StageId::Sql, &[MECHANISM_NOTE])])
}

/// Writes the mechanism set as a Spider-layout dataset under `root`.
pub fn write_spider_fixture(root: &Path) -> std::io::Result<()> {
    let records: Vec<Value> = MECHANISM_QUESTIONS
        .iter()
        .map(|(_, q, gold)| json!({ "db_id": "concert_singer", "question": q, "query": gold }))
        .collect();
    fs::create_dir_all(root)?;
    fs::write(root.join("dev.json"), serde_json::to_string_pretty(&records).expect("records serialize"))?;
    concert_singer(&root.join("database").join("concert_singer")).map_err(std::io::Error::other)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::db::{open_read_only, query_rows, Cell, JUDGE_TIMEOUT};

    fn scalar(db: &DbHandle, sql: &str) -> Cell {
        let conn = open_read_only(&db.path).unwrap();
        query_rows(&conn, sql, JUDGE_TIMEOUT).unwrap().remove(0).remove(0)
    }

    #[test]
    fn worked_candidates_on_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let db = california_schools(dir.path()).unwrap();
        assert_eq!(scalar(&db, WORKED_SQL[0]).as_f64(), Some(200.0 / 6.0));
        assert_eq!(scalar(&db, WORKED_SQL[1]).as_f64(), Some(50.0));
        assert_eq!(scalar(&db, WORKED_SQL[2]).as_f64(), Some(50.0));
    }

    #[test]
    fn refiner_replies_validate() {
        use crate::refiner::{parse_refiner_output, validate_prompt};
        let out = parse_refiner_output(&refiner_reply(StageId::Sql, &WORKED_NOTES)).unwrap();
        assert!(validate_prompt(&out.new_prompt, StageId::Sql, default_stage_prompt(StageId::Sql)).is_empty());
    }
}
