use std::io::Write;

use serde::Serialize;
use serde_json::Value;

/// One fired event, as written to trace CSVs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub time_s: f64,
    pub event_kind: String,
    pub payload: Value,
}

impl TraceRecord {
    pub fn new(time_s: f64, kind: impl Into<String>, payload: Value) -> Self {
        Self {
            time_s,
            event_kind: kind.into(),
            payload,
        }
    }
}

/// Writes `time_s,event_kind,payload_json` rows.
pub fn write_trace_csv<W: Write>(records: &[TraceRecord], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["time_s", "event_kind", "payload_json"])?;
    for r in records {
        w.write_record([
            r.time_s.to_string(),
            r.event_kind.clone(),
            r.payload.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
