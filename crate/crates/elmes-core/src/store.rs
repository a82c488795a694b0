//! Embedded per-run persistence: cases, messages and evaluations in one
//! SQLite file, with resume support and JSON / Label Studio exports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use rusqlite::{params, Connection, OptionalExtension};
use serde::Serialize;
use thiserror::Error;

use crate::config::{EvaluationSpec, FieldType, TestCase};
use crate::judge::EvaluationResult;
use crate::orchestrator::{AttributedMessage, DialogueRecord, MessageSink, Termination};
use crate::template;

const SCHEMA_VERSION: i64 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("cannot open run database at {path}: {source}")]
    Open {
        path: PathBuf,
        source: rusqlite::Error,
    },
    #[error("run database uses schema version {found}, this build supports {supported}")]
    VersionMismatch { found: i64, supported: i64 },
    #[error("run database belongs to run '{found}', not '{requested}'")]
    RunNameMismatch { found: String, requested: String },
    #[error("integrity violation: {what}")]
    Integrity { what: String },
    #[error("case '{0}' is not registered")]
    UnknownCase(String),
    #[error("run has no complete cases to export")]
    EmptyRun,
    #[error("database error: {0}")]
    Sqlite(#[from] rusqlite::Error),
    #[error("serialization error: {0}")]
    Serialization(#[from] serde_json::Error),
}

/// Field-name → typed-value map of one persisted evaluation.
pub type EvaluationValues = serde_json::Map<String, serde_json::Value>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseState {
    Pending,
    Running,
    Complete,
    Failed,
}

impl CaseState {
    fn as_str(&self) -> &'static str {
        match self {
            CaseState::Pending => "pending",
            CaseState::Running => "running",
            CaseState::Complete => "complete",
            CaseState::Failed => "failed",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "pending" => Some(CaseState::Pending),
            "running" => Some(CaseState::Running),
            "complete" => Some(CaseState::Complete),
            "failed" => Some(CaseState::Failed),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseStatus {
    pub case_id: String,
    pub status: CaseState,
    pub termination: Option<Termination>,
}

impl CaseStatus {
    pub fn is_complete(&self) -> bool {
        self.status == CaseState::Complete
    }
}

/// Handle to one run's database. Cloning shares the connection; writes are
/// serialized through a single lock while readers interleave freely.
#[derive(Clone)]
pub struct RunStore {
    conn: Arc<Mutex<Connection>>,
    run_name: String,
    path: PathBuf,
}

/// Opens (or creates) the run database, stamping the schema version.
pub fn open_run(path: &Path, run_name: &str) -> Result<RunStore, StoreError> {
    let conn = Connection::open(path).map_err(|source| StoreError::Open {
        path: path.to_path_buf(),
        source,
    })?;
    conn.execute_batch(
        "PRAGMA journal_mode=WAL;
         PRAGMA synchronous=NORMAL;
         PRAGMA foreign_keys=ON;",
    )?;
    conn.execute_batch(
        "CREATE TABLE IF NOT EXISTS meta (
            key TEXT PRIMARY KEY,
            value TEXT NOT NULL
         );
         CREATE TABLE IF NOT EXISTS cases (
            case_id TEXT PRIMARY KEY,
            bindings_doc TEXT NOT NULL,
            status TEXT NOT NULL,
            termination TEXT,
            error_detail TEXT
         );
         CREATE TABLE IF NOT EXISTS messages (
            case_id TEXT NOT NULL,
            seq INTEGER NOT NULL,
            agent TEXT NOT NULL,
            role TEXT NOT NULL,
            content TEXT NOT NULL,
            created_at TEXT NOT NULL,
            PRIMARY KEY (case_id, seq)
         );
         CREATE TABLE IF NOT EXISTS evaluations (
            case_id TEXT NOT NULL,
            evaluator TEXT NOT NULL,
            field TEXT NOT NULL,
            value_doc TEXT NOT NULL,
            created_at TEXT NOT NULL,
            PRIMARY KEY (case_id, evaluator, field)
         );",
    )?;

    let found: Option<i64> = conn
        .query_row(
            "SELECT value FROM meta WHERE key = 'schema_version'",
            [],
            |row| row.get::<_, String>(0),
        )
        .optional()?
        .and_then(|v| v.parse().ok());
    match found {
        Some(version) if version != SCHEMA_VERSION => {
            return Err(StoreError::VersionMismatch {
                found: version,
                supported: SCHEMA_VERSION,
            });
        }
        Some(_) => {}
        None => {
            conn.execute(
                "INSERT INTO meta (key, value) VALUES ('schema_version', ?1)",
                params![SCHEMA_VERSION.to_string()],
            )?;
        }
    }

    let existing_run: Option<String> = conn
        .query_row("SELECT value FROM meta WHERE key = 'run_name'", [], |row| {
            row.get(0)
        })
        .optional()?;
    match existing_run {
        Some(found) if found != run_name => {
            return Err(StoreError::RunNameMismatch {
                found,
                requested: run_name.to_string(),
            });
        }
        Some(_) => {}
        None => {
            conn.execute(
                "INSERT INTO meta (key, value) VALUES ('run_name', ?1)",
                params![run_name],
            )?;
        }
    }

    Ok(RunStore {
        conn: Arc::new(Mutex::new(conn)),
        run_name: run_name.to_string(),
        path: path.to_path_buf(),
    })
}

fn is_constraint_violation(err: &rusqlite::Error) -> bool {
    matches!(
        err,
        rusqlite::Error::SqliteFailure(e, _)
            if e.code == rusqlite::ErrorCode::ConstraintViolation
    )
}

impl RunStore {
    pub fn run_name(&self) -> &str {
        &self.run_name
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Connection> {
        self.conn.lock().expect("store lock poisoned")
    }

    /// Registers a case as pending; reopening an existing case is a no-op.
    pub fn register_case(&self, case: &TestCase) -> Result<(), StoreError> {
        let bindings_doc = serde_json::to_string(&case.bindings)?;
        self.lock().execute(
            "INSERT OR IGNORE INTO cases (case_id, bindings_doc, status) VALUES (?1, ?2, 'pending')",
            params![case.case_id, bindings_doc],
        )?;
        Ok(())
    }

    pub fn case_status(&self, case_id: &str) -> Result<Option<CaseStatus>, StoreError> {
        let conn = self.lock();
        let row = conn
            .query_row(
                "SELECT status, termination FROM cases WHERE case_id = ?1",
                params![case_id],
                |row| Ok((row.get::<_, String>(0)?, row.get::<_, Option<String>>(1)?)),
            )
            .optional()?;
        Ok(row.map(|(status, termination)| CaseStatus {
            case_id: case_id.to_string(),
            status: CaseState::parse(&status).unwrap_or(CaseState::Pending),
            termination: termination.as_deref().and_then(Termination::parse),
        }))
    }

    /// Clears any partial transcript and marks the case running. Used when a
    /// pending or previously failed case is (re-)executed.
    pub fn reset_case(&self, case_id: &str) -> Result<(), StoreError> {
        let conn = self.lock();
        let updated = conn.execute(
            "UPDATE cases SET status = 'running', termination = NULL, error_detail = NULL
             WHERE case_id = ?1",
            params![case_id],
        )?;
        if updated == 0 {
            return Err(StoreError::UnknownCase(case_id.to_string()));
        }
        conn.execute("DELETE FROM messages WHERE case_id = ?1", params![case_id])?;
        conn.execute(
            "DELETE FROM evaluations WHERE case_id = ?1",
            params![case_id],
        )?;
        Ok(())
    }

    /// Durably appends one message; `(case_id, seq)` must be new.
    pub fn append_message(&self, message: &AttributedMessage) -> Result<(), StoreError> {
        let conn = self.lock();
        let registered: Option<i64> = conn
            .query_row(
                "SELECT 1 FROM cases WHERE case_id = ?1",
                params![message.case_id],
                |row| row.get(0),
            )
            .optional()?;
        if registered.is_none() {
            return Err(StoreError::UnknownCase(message.case_id.clone()));
        }
        conn.execute(
            "INSERT INTO messages (case_id, seq, agent, role, content, created_at)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
            params![
                message.case_id,
                message.seq,
                message.agent.as_str(),
                message.role.to_string(),
                message.content,
                message.created_at.to_rfc3339(),
            ],
        )
        .map_err(|e| {
            if is_constraint_violation(&e) {
                StoreError::Integrity {
                    what: format!(
                        "duplicate message ({}, seq {})",
                        message.case_id, message.seq
                    ),
                }
            } else {
                e.into()
            }
        })?;
        Ok(())
    }

    pub fn messages(&self, case_id: &str) -> Result<Vec<AttributedMessage>, StoreError> {
        let conn = self.lock();
        let mut stmt = conn.prepare(
            "SELECT seq, agent, role, content, created_at FROM messages
             WHERE case_id = ?1 ORDER BY seq",
        )?;
        let rows = stmt.query_map(params![case_id], |row| {
            Ok((
                row.get::<_, u32>(0)?,
                row.get::<_, String>(1)?,
                row.get::<_, String>(2)?,
                row.get::<_, String>(3)?,
                row.get::<_, String>(4)?,
            ))
        })?;
        let mut messages = Vec::new();
        for row in rows {
            let (seq, agent, role, content, created_at) = row?;
            messages.push(AttributedMessage {
                case_id: case_id.to_string(),
                seq,
                agent: crate::graph::NodeId(agent),
                role: parse_role(&role)?,
                content,
                created_at: parse_timestamp(&created_at)?,
            });
        }
        Ok(messages)
    }

    /// Marks the case complete or failed according to its termination.
    pub fn finish_case(&self, record: &DialogueRecord) -> Result<(), StoreError> {
        let status = match record.termination {
            Termination::Error => CaseState::Failed,
            _ => CaseState::Complete,
        };
        let updated = self.lock().execute(
            "UPDATE cases SET status = ?2, termination = ?3, error_detail = ?4
             WHERE case_id = ?1",
            params![
                record.case_id,
                status.as_str(),
                record.termination.as_str(),
                record.error_detail,
            ],
        )?;
        if updated == 0 {
            return Err(StoreError::UnknownCase(record.case_id.clone()));
        }
        Ok(())
    }

    pub fn statuses(&self) -> Result<Vec<CaseStatus>, StoreError> {
        let conn = self.lock();
        let mut stmt =
            conn.prepare("SELECT case_id, status, termination FROM cases ORDER BY case_id")?;
        let rows = stmt.query_map([], |row| {
            Ok((
                row.get::<_, String>(0)?,
                row.get::<_, String>(1)?,
                row.get::<_, Option<String>>(2)?,
            ))
        })?;
        let mut out = Vec::new();
        for row in rows {
            let (case_id, status, termination) = row?;
            out.push(CaseStatus {
                case_id,
                status: CaseState::parse(&status).unwrap_or(CaseState::Pending),
                termination: termination.as_deref().and_then(Termination::parse),
            });
        }
        Ok(out)
    }

    pub fn bindings(&self, case_id: &str) -> Result<BTreeMap<String, String>, StoreError> {
        let doc: Option<String> = self
            .lock()
            .query_row(
                "SELECT bindings_doc FROM cases WHERE case_id = ?1",
                params![case_id],
                |row| row.get(0),
            )
            .optional()?;
        let doc = doc.ok_or_else(|| StoreError::UnknownCase(case_id.to_string()))?;
        Ok(serde_json::from_str(&doc)?)
    }

    /// Reconstructs the persisted dialogue record for one case.
    pub fn record(&self, case_id: &str) -> Result<Option<DialogueRecord>, StoreError> {
        let header = {
            let conn = self.lock();
            conn.query_row(
                "SELECT termination, error_detail FROM cases WHERE case_id = ?1",
                params![case_id],
                |row| {
                    Ok((
                        row.get::<_, Option<String>>(0)?,
                        row.get::<_, Option<String>>(1)?,
                    ))
                },
            )
            .optional()?
        };
        let Some((termination, error_detail)) = header else {
            return Ok(None);
        };
        let Some(termination) = termination.as_deref().and_then(Termination::parse) else {
            return Ok(None);
        };
        Ok(Some(DialogueRecord {
            case_id: case_id.to_string(),
            messages: self.messages(case_id)?,
            termination,
            error_detail,
        }))
    }

    pub fn insert_evaluation(&self, result: &EvaluationResult) -> Result<(), StoreError> {
        let mut conn = self.lock();
        let tx = conn.transaction()?;
        let now = Utc::now().to_rfc3339();
        for (field, value) in &result.values {
            tx.execute(
                "INSERT INTO evaluations (case_id, evaluator, field, value_doc, created_at)
                 VALUES (?1, ?2, ?3, ?4, ?5)",
                params![
                    result.case_id,
                    result.evaluator,
                    field,
                    serde_json::to_string(value)?,
                    now,
                ],
            )
            .map_err(|e| {
                if is_constraint_violation(&e) {
                    StoreError::Integrity {
                        what: format!(
                            "duplicate evaluation ({}, {}, {field})",
                            result.case_id, result.evaluator
                        ),
                    }
                } else {
                    StoreError::from(e)
                }
            })?;
        }
        tx.commit()?;
        Ok(())
    }

    /// Case ids already judged by the named evaluator.
    pub fn evaluated_case_ids(&self, evaluator: &str) -> Result<Vec<String>, StoreError> {
        let conn = self.lock();
        let mut stmt = conn.prepare(
            "SELECT DISTINCT case_id FROM evaluations WHERE evaluator = ?1 ORDER BY case_id",
        )?;
        let rows = stmt.query_map(params![evaluator], |row| row.get::<_, String>(0))?;
        rows.map(|r| r.map_err(StoreError::from)).collect()
    }

    /// All evaluations for one case, grouped per evaluator.
    pub fn evaluations(
        &self,
        case_id: &str,
    ) -> Result<Vec<(String, EvaluationValues)>, StoreError> {
        let conn = self.lock();
        let mut stmt = conn.prepare(
            "SELECT evaluator, field, value_doc FROM evaluations
             WHERE case_id = ?1 ORDER BY evaluator, field",
        )?;
        let rows = stmt.query_map(params![case_id], |row| {
            Ok((
                row.get::<_, String>(0)?,
                row.get::<_, String>(1)?,
                row.get::<_, String>(2)?,
            ))
        })?;
        let mut grouped: Vec<(String, EvaluationValues)> = Vec::new();
        for row in rows {
            let (evaluator, field, value_doc) = row?;
            let value: serde_json::Value = serde_json::from_str(&value_doc)?;
            match grouped.last_mut() {
                Some((name, values)) if *name == evaluator => {
                    values.insert(field, value);
                }
                _ => {
                    let mut values = EvaluationValues::new();
                    values.insert(field, value);
                    grouped.push((evaluator, values));
                }
            }
        }
        Ok(grouped)
    }

    /// Per-field evaluation values for every case judged by `evaluator`.
    pub fn evaluation_values(
        &self,
        evaluator: &str,
    ) -> Result<Vec<(String, EvaluationValues)>, StoreError> {
        let case_ids = self.evaluated_case_ids(evaluator)?;
        let mut out = Vec::with_capacity(case_ids.len());
        for case_id in case_ids {
            let values = self
                .evaluations(&case_id)?
                .into_iter()
                .find(|(name, _)| name == evaluator)
                .map(|(_, values)| values)
                .unwrap_or_default();
            out.push((case_id, values));
        }
        Ok(out)
    }

    pub fn complete_case_ids(&self) -> Result<Vec<String>, StoreError> {
        let conn = self.lock();
        let mut stmt =
            conn.prepare("SELECT case_id FROM cases WHERE status = 'complete' ORDER BY case_id")?;
        let rows = stmt.query_map([], |row| row.get::<_, String>(0))?;
        rows.map(|r| r.map_err(StoreError::from)).collect()
    }

    pub fn message_count(&self) -> Result<u64, StoreError> {
        Ok(self
            .lock()
            .query_row("SELECT COUNT(*) FROM messages", [], |row| row.get(0))?)
    }
}

impl MessageSink for RunStore {
    fn append(&self, message: &AttributedMessage) -> Result<(), StoreError> {
        self.append_message(message)
    }
}

fn parse_role(s: &str) -> Result<crate::config::Role, StoreError> {
    match s {
        "system" => Ok(crate::config::Role::System),
        "user" => Ok(crate::config::Role::User),
        "assistant" => Ok(crate::config::Role::Assistant),
        other => Err(StoreError::Integrity {
            what: format!("unknown role '{other}' in messages table"),
        }),
    }
}

fn parse_timestamp(s: &str) -> Result<DateTime<Utc>, StoreError> {
    DateTime::parse_from_rfc3339(s)
        .map(|dt| dt.with_timezone(&Utc))
        .map_err(|e| StoreError::Integrity {
            what: format!("bad timestamp '{s}': {e}"),
        })
}

// ---------------------------------------------------------------------------
// Exports
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
struct MessageDoc {
    seq: u32,
    agent: String,
    role: String,
    content: String,
    created_at: String,
}

#[derive(Debug, Serialize)]
struct EvaluationDoc {
    evaluator: String,
    values: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Serialize)]
struct CaseDoc {
    case_id: String,
    bindings: BTreeMap<String, String>,
    status: String,
    termination: Option<String>,
    error_detail: Option<String>,
    messages: Vec<MessageDoc>,
    evaluations: Vec<EvaluationDoc>,
}

/// Exports one JSON document per case, in stable case-id order.
pub fn export_json(store: &RunStore) -> Result<Vec<serde_json::Value>, StoreError> {
    let mut documents = Vec::new();
    for status in store.statuses()? {
        let case_id = status.case_id;
        let (case_status, termination, error_detail) = {
            let conn = store.lock();
            conn.query_row(
                "SELECT status, termination, error_detail FROM cases WHERE case_id = ?1",
                params![case_id],
                |row| {
                    Ok((
                        row.get::<_, String>(0)?,
                        row.get::<_, Option<String>>(1)?,
                        row.get::<_, Option<String>>(2)?,
                    ))
                },
            )?
        };
        let doc = CaseDoc {
            bindings: store.bindings(&case_id)?,
            status: case_status,
            termination,
            error_detail,
            messages: store
                .messages(&case_id)?
                .into_iter()
                .map(|m| MessageDoc {
                    seq: m.seq,
                    agent: m.agent.as_str().to_string(),
                    role: m.role.to_string(),
                    content: m.content,
                    created_at: m.created_at.to_rfc3339(),
                })
                .collect(),
            evaluations: store
                .evaluations(&case_id)?
                .into_iter()
                .map(|(evaluator, values)| EvaluationDoc { evaluator, values })
                .collect(),
            case_id,
        };
        documents.push(serde_json::to_value(doc)?);
    }
    Ok(documents)
}

fn xml_escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
        .replace('\'', "&apos;")
}

/// Builds the Label Studio labeling interface and data file for all complete
/// cases: one rating control per metric field plus the transcript display.
pub fn export_label_studio(
    store: &RunStore,
    eval_spec: &EvaluationSpec,
) -> Result<(String, serde_json::Value), StoreError> {
    let case_ids = store.complete_case_ids()?;
    if case_ids.is_empty() {
        return Err(StoreError::EmptyRun);
    }

    let mut interface = String::from(
        "<View>\n  <Header value=\"Dialogue\"/>\n  <Text name=\"dialog\" value=\"$dialog\"/>\n",
    );
    for field in &eval_spec.format {
        let name = xml_escape(&field.name);
        let header = if field.description.is_empty() {
            name.clone()
        } else {
            format!("{name}: {}", xml_escape(&field.description))
        };
        interface.push_str(&format!("  <Header value=\"{header}\"/>\n"));
        match field.value_type {
            FieldType::Int => {
                interface.push_str(&format!(
                    "  <Rating name=\"{name}\" toName=\"dialog\" maxRating=\"5\" icon=\"star\"/>\n"
                ));
            }
            FieldType::Float => {
                interface.push_str(&format!(
                    "  <Number name=\"{name}\" toName=\"dialog\" min=\"1\" max=\"5\"/>\n"
                ));
            }
            FieldType::Bool => {
                interface.push_str(&format!(
                    "  <Choices name=\"{name}\" toName=\"dialog\" choice=\"single\">\n    <Choice value=\"true\"/>\n    <Choice value=\"false\"/>\n  </Choices>\n"
                ));
            }
            FieldType::Str => {
                interface.push_str(&format!(
                    "  <TextArea name=\"{name}\" toName=\"dialog\" rows=\"3\"/>\n"
                ));
            }
        }
    }
    interface.push_str("</View>\n");

    let mut items = Vec::with_capacity(case_ids.len());
    for case_id in case_ids {
        let messages = store.messages(&case_id)?;
        let dialog = template::as_dialog(
            messages
                .iter()
                .map(|m| (m.agent.as_str(), m.content.as_str())),
        );
        let bindings = store.bindings(&case_id)?;
        let mut data = serde_json::Map::new();
        data.insert("case_id".into(), serde_json::Value::String(case_id));
        data.insert("dialog".into(), serde_json::Value::String(dialog));
        data.insert("task".into(), serde_json::to_value(&bindings)?);
        let mut item = serde_json::Map::new();
        item.insert("data".into(), serde_json::Value::Object(data));
        items.push(serde_json::Value::Object(item));
    }

    Ok((interface, serde_json::Value::Array(items)))
}
