//! Crash recovery: a committed message survives an aborted process.

use std::path::Path;
use std::process::Command;

use chrono::Utc;
use elmes_core::config::{Role, TestCase};
use elmes_core::orchestrator::AttributedMessage;
use elmes_core::store::open_run;

const ENV_DIR: &str = "ELMES_CRASH_DIR";

/// Does nothing under `cargo test`; the recovery test re-invokes this binary
/// with ELMES_CRASH_DIR set, at which point it writes one message and aborts
/// without any orderly shutdown.
#[test]
fn crash_helper() {
    let Ok(dir) = std::env::var(ENV_DIR) else {
        return;
    };
    let store = open_run(&Path::new(&dir).join("run.db"), "crash").unwrap();
    store
        .register_case(&TestCase {
            case_id: "crash/0".into(),
            bindings: Default::default(),
        })
        .unwrap();
    store
        .append_message(&AttributedMessage {
            case_id: "crash/0".into(),
            seq: 0,
            agent: "teacher".into(),
            role: Role::Assistant,
            content: "persisted before the crash".into(),
            created_at: Utc::now(),
        })
        .unwrap();
    std::process::abort();
}

#[test]
fn message_survives_process_abort() {
    let dir = tempfile::tempdir().unwrap();
    let exe = std::env::current_exe().unwrap();
    let status = Command::new(exe)
        .args([
            "--exact",
            "crash_helper",
            "--test-threads",
            "1",
            "--nocapture",
        ])
        .env(ENV_DIR, dir.path())
        .status()
        .unwrap();
    assert!(!status.success(), "helper must abort, got {status}");

    let store = open_run(&dir.path().join("run.db"), "crash").unwrap();
    let messages = store.messages("crash/0").unwrap();
    assert_eq!(messages.len(), 1);
    assert_eq!(messages[0].content, "persisted before the crash");
}
