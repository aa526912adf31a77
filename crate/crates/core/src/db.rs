//! Read-only SQLite access with per-statement timeouts.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rusqlite::types::ValueRef;
use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Statement timeout used by the judges.
pub const JUDGE_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Error)]
pub enum DbError {
    #[error("database `{path}` is unreadable: {message}")]
    Unreadable { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExecError {
    #[error("prepare failed: {0}")]
    Prepare(String),
    #[error("execution failed: {0}")]
    Exec(String),
    #[error("statement exceeded {0:?}")]
    Timeout(Duration),
}

/// A database file plus its benchmark identifier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DbHandle {
    pub db_id: String,
    pub path: PathBuf,
}

impl DbHandle {
    pub fn new(db_id: impl Into<String>, path: impl Into<PathBuf>) -> Self {
        DbHandle { db_id: db_id.into(), path: path.into() }
    }

    /// Uses the file stem as the identifier.
    pub fn from_path(path: impl Into<PathBuf>) -> Self {
        let path = path.into();
        let db_id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        DbHandle { db_id, path }
    }

    /// Opens read-only and confirms the catalog is readable.
    pub fn open(&self) -> Result<Connection, DbError> {
        open_read_only(&self.path)
    }

    pub fn bytes(&self) -> Result<Vec<u8>, DbError> {
        std::fs::read(&self.path).map_err(|e| DbError::Unreadable { path: self.path.clone(), message: e.to_string() })
    }
}

pub fn open_read_only(path: &Path) -> Result<Connection, DbError> {
    let unreadable = |message: String| DbError::Unreadable { path: path.to_path_buf(), message };
    if !path.is_file() {
        return Err(unreadable("no such file".into()));
    }
    let conn = Connection::open_with_flags(path, OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX)
        .map_err(|e| unreadable(e.to_string()))?;
    conn.pragma_update(None, "query_only", true).map_err(|e| unreadable(e.to_string()))?;
    conn.query_row("SELECT count(*) FROM sqlite_master", [], |r| r.get::<_, i64>(0))
        .map_err(|e| unreadable(e.to_string()))?;
    Ok(conn)
}

/// A result cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Null,
    Integer(i64),
    Real(f64),
    Text(String),
    Blob(Vec<u8>),
}

impl Cell {
    fn from_ref(v: ValueRef<'_>) -> Self {
        match v {
            ValueRef::Null => Cell::Null,
            ValueRef::Integer(i) => Cell::Integer(i),
            ValueRef::Real(f) => Cell::Real(f),
            ValueRef::Text(t) => Cell::Text(String::from_utf8_lossy(t).into_owned()),
            ValueRef::Blob(b) => Cell::Blob(b.to_vec()),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Integer(i) => Some(*i as f64),
            Cell::Real(f) => Some(*f),
            _ => None,
        }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Null => f.write_str("NULL"),
            Cell::Integer(i) => write!(f, "{i}"),
            Cell::Real(r) => write!(f, "{r}"),
            Cell::Text(t) => f.write_str(t),
            Cell::Blob(b) => write!(f, "x'{}'", hex::encode(b)),
        }
    }
}

pub type Row = Vec<Cell>;

/// Runs `sql` and collects every row, aborting once `timeout` elapses.
pub fn query_rows(conn: &Connection, sql: &str, timeout: Duration) -> Result<Vec<Row>, ExecError> {
    let deadline = Instant::now() + timeout;
    conn.progress_handler(1_000, Some(move || Instant::now() > deadline));
    let result = collect_rows(conn, sql);
    conn.progress_handler(0, None::<fn() -> bool>);
    result.map_err(|e| match e {
        ExecError::Exec(msg) if Instant::now() > deadline && msg.contains("interrupt") => ExecError::Timeout(timeout),
        other => other,
    })
}

fn collect_rows(conn: &Connection, sql: &str) -> Result<Vec<Row>, ExecError> {
    let mut stmt = conn.prepare(sql).map_err(|e| ExecError::Prepare(e.to_string()))?;
    let width = stmt.column_count();
    let mut rows = stmt.query([]).map_err(|e| ExecError::Exec(e.to_string()))?;
    let mut out = Vec::new();
    while let Some(row) = rows.next().map_err(|e| ExecError::Exec(e.to_string()))? {
        let mut cells = Vec::with_capacity(width);
        for i in 0..width {
            cells.push(Cell::from_ref(row.get_ref(i).map_err(|e| ExecError::Exec(e.to_string()))?));
        }
        out.push(cells);
    }
    Ok(out)
}

/// Exact row count of a table.
pub fn table_row_count(conn: &Connection, table: &str) -> Result<u64, ExecError> {
    let sql = format!("SELECT count(*) FROM {}", quote_ident(table));
    conn.query_row(&sql, [], |r| r.get::<_, i64>(0))
        .map(|n| n as u64)
        .map_err(|e| ExecError::Exec(e.to_string()))
}

/// Double-quoted identifier.
pub fn quote_ident(name: &str) -> String {
    format!("\"{}\"", name.replace('"', "\"\""))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.sqlite");
        let conn = Connection::open(&path).unwrap();
        conn.execute_batch("CREATE TABLE t(a INTEGER, b TEXT); INSERT INTO t VALUES (1, 'x'), (2, NULL);")
            .unwrap();
        (dir, path)
    }

    #[test]
    fn reads_rows_and_nulls() {
        let (_dir, path) = fixture();
        let conn = open_read_only(&path).unwrap();
        let rows = query_rows(&conn, "SELECT a, b FROM t ORDER BY a", JUDGE_TIMEOUT).unwrap();
        assert_eq!(rows, vec![vec![Cell::Integer(1), Cell::Text("x".into())], vec![Cell::Integer(2), Cell::Null]]);
        assert_eq!(table_row_count(&conn, "t").unwrap(), 2);
    }

    #[test]
    fn writes_are_refused() {
        let (_dir, path) = fixture();
        let conn = open_read_only(&path).unwrap();
        assert!(query_rows(&conn, "DELETE FROM t", JUDGE_TIMEOUT).is_err());
        assert_eq!(table_row_count(&conn, "t").unwrap(), 2);
    }

    #[test]
    fn runaway_query_times_out() {
        let (_dir, path) = fixture();
        let conn = open_read_only(&path).unwrap();
        let sql = "WITH RECURSIVE c(x) AS (SELECT 1 UNION ALL SELECT x + 1 FROM c) SELECT count(*) FROM c";
        let err = query_rows(&conn, sql, Duration::from_millis(50)).unwrap_err();
        assert_eq!(err, ExecError::Timeout(Duration::from_millis(50)));
    }

    #[test]
    fn garbage_file_is_unreadable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.sqlite");
        std::fs::write(&path, b"definitely not a database file, just some bytes").unwrap();
        assert!(matches!(open_read_only(&path), Err(DbError::Unreadable { .. })));
        assert!(open_read_only(&dir.path().join("missing.sqlite")).is_err());
    }

    #[test]
    fn quoting_escapes_quotes() {
        assert_eq!(quote_ident("a\"b"), "\"a\"\"b\"");
    }
}
