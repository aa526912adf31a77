//! Parse-and-execute verdicts against the real database.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::signature::{extract_signature, parse_query};
use crate::db::{query_rows, table_row_count, DbHandle, ExecError};
use crate::pipeline::SqlCandidate;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterpreterVerdict {
    pub parse_ok: bool,
    pub exec_ok: bool,
    pub error_message: Option<String>,
    pub row_count: Option<u64>,
    pub table_populations: BTreeMap<String, u64>,
    pub elapsed_ms: u64,
}

impl InterpreterVerdict {
    fn failed(parse_ok: bool, message: String) -> Self {
        InterpreterVerdict {
            parse_ok,
            exec_ok: false,
            error_message: Some(message),
            row_count: None,
            table_populations: BTreeMap::new(),
            elapsed_ms: 0,
        }
    }
}

/// SQLite messages that mean the text never parsed. Anything else from
/// `prepare` (unknown table, unknown column) is a compile error on
/// well-formed SQL.
const SYNTAX_MARKERS: [&str; 3] = ["syntax error", "incomplete input", "unrecognized token"];

fn is_syntax_error(message: &str) -> bool {
    let lower = message.to_ascii_lowercase();
    SYNTAX_MARKERS.iter().any(|m| lower.contains(m))
}

/// Parses then executes `candidate` read-only under `timeout`.
/// Failures are verdict content, never errors.
pub fn judge_syntax(candidate: &SqlCandidate, db: &DbHandle, timeout: Duration, record_timings: bool) -> InterpreterVerdict {
    let conn = match db.open() {
        Ok(c) => c,
        Err(e) => {
            let parse_ok = parse_query(&candidate.text).is_ok();
            return InterpreterVerdict::failed(parse_ok, e.to_string());
        }
    };
    let started = Instant::now();
    let result = query_rows(&conn, &candidate.text, timeout);
    let elapsed_ms = if record_timings { started.elapsed().as_millis() as u64 } else { 0 };
    let rows = match result {
        Ok(rows) => rows,
        Err(ExecError::Prepare(msg)) => return InterpreterVerdict::failed(!is_syntax_error(&msg), msg),
        Err(e) => return InterpreterVerdict { elapsed_ms, ..InterpreterVerdict::failed(true, e.to_string()) },
    };
    let mut table_populations = BTreeMap::new();
    if let Ok(sig) = extract_signature(&candidate.text) {
        for table in sig.tables {
            if let Ok(n) = table_row_count(&conn, &table) {
                table_populations.insert(table, n);
            }
        }
    }
    InterpreterVerdict {
        parse_ok: true,
        exec_ok: true,
        error_message: None,
        row_count: Some(rows.len() as u64),
        table_populations,
        elapsed_ms,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rusqlite::Connection;

    fn candidate(sql: &str) -> SqlCandidate {
        SqlCandidate { text: sql.into(), terminated: true, produced_at_iteration: 0 }
    }

    fn fixture(populated: bool) -> (tempfile::TempDir, DbHandle) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("concert.sqlite");
        let conn = Connection::open(&path).unwrap();
        conn.execute_batch("CREATE TABLE head(name TEXT, age INTEGER); CREATE TABLE dept(id INTEGER PRIMARY KEY);")
            .unwrap();
        if populated {
            conn.execute_batch("INSERT INTO head VALUES ('a', 50), ('b', 60); INSERT INTO dept VALUES (1);").unwrap();
        }
        (dir, DbHandle::new("concert", path))
    }

    #[test]
    fn select_one() {
        let (_d, db) = fixture(true);
        let v = judge_syntax(&candidate("SELECT 1;"), &db, Duration::from_secs(5), false);
        assert!(v.parse_ok && v.exec_ok);
        assert_eq!(v.row_count, Some(1));
        assert!(v.table_populations.is_empty());
    }

    #[test]
    fn malformed_keyword_fails_parse() {
        let (_d, db) = fixture(true);
        let v = judge_syntax(&candidate("SELEC name FROM head;"), &db, Duration::from_secs(5), false);
        assert!(!v.parse_ok && !v.exec_ok);
        assert!(v.error_message.is_some());
    }

    #[test]
    fn unknown_table_parses_but_fails() {
        let (_d, db) = fixture(true);
        let v = judge_syntax(&candidate("SELECT x FROM nowhere;"), &db, Duration::from_secs(5), false);
        assert!(v.parse_ok && !v.exec_ok);
        assert!(v.error_message.unwrap().contains("no such table"));
    }

    #[test]
    fn empty_tables_report_zero_populations() {
        let (_d, db) = fixture(false);
        let v = judge_syntax(
            &candidate("SELECT h.name FROM head h JOIN dept d ON d.id = h.age;"),
            &db,
            Duration::from_secs(5),
            false,
        );
        assert!(v.exec_ok);
        assert_eq!(v.row_count, Some(0));
        assert_eq!(v.table_populations, BTreeMap::from([("dept".into(), 0), ("head".into(), 0)]));
    }

    #[test]
    fn runaway_query_times_out() {
        let (_d, db) = fixture(true);
        let sql = "WITH RECURSIVE c(x) AS (SELECT 1 UNION ALL SELECT x + 1 FROM c) SELECT count(*) FROM c;";
        let v = judge_syntax(&candidate(sql), &db, Duration::from_millis(200), false);
        assert!(v.parse_ok && !v.exec_ok);
    }

    #[test]
    fn writes_are_refused() {
        let (_d, db) = fixture(true);
        let v = judge_syntax(&candidate("DELETE FROM head;"), &db, Duration::from_secs(5), false);
        assert!(!v.exec_ok);
        let conn = Connection::open(&db.path).unwrap();
        let n: i64 = conn.query_row("SELECT count(*) FROM head", [], |r| r.get(0)).unwrap();
        assert_eq!(n, 2);
    }

    #[test]
    fn unreadable_database_falls_back_to_parser() {
        let db = DbHandle::new("gone", "/nonexistent/gone.sqlite");
        let ok = judge_syntax(&candidate("SELECT 1;"), &db, Duration::from_secs(5), false);
        assert!(ok.parse_ok && !ok.exec_ok);
        let bad = judge_syntax(&candidate("SELEC 1;"), &db, Duration::from_secs(5), false);
        assert!(!bad.parse_ok);
    }
}
