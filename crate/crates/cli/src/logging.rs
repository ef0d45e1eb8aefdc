use std::io::Write;
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use flowdet::pipeline::LogRecord;
use log::{Level, LevelFilter, Log, Metadata, Record};

/// Writes one JSON object per log line: timestamp, stage, level, message.
struct JsonLines {
    stage: String,
    level: Level,
    sink: Mutex<Box<dyn Write + Send>>,
}

impl Log for JsonLines {
    fn enabled(&self, metadata: &Metadata) -> bool {
        metadata.level() <= self.level
    }

    fn log(&self, record: &Record) {
        if !self.enabled(record.metadata()) {
            return;
        }
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64());
        let line = LogRecord {
            timestamp,
            stage: self.stage.clone(),
            level: record.level().to_string(),
            message: record.args().to_string(),
        }
        .to_json_line();
        if let Ok(mut w) = self.sink.lock() {
            let _ = writeln!(w, "{line}");
        }
    }

    fn flush(&self) {
        if let Ok(mut w) = self.sink.lock() {
            let _ = w.flush();
        }
    }
}

pub fn init(stage: &str, level: Level, sink: Box<dyn Write + Send>) {
    let logger = JsonLines { stage: stage.to_string(), level, sink: Mutex::new(sink) };
    if log::set_boxed_logger(Box::new(logger)).is_ok() {
        log::set_max_level(LevelFilter::from(level.to_level_filter()));
    }
}
