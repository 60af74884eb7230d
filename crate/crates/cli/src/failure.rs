use serde::Serialize;

/// Every way a run can end unsuccessfully, each with its own exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Config(String),
    Io(String),
    Data(String),
    Runtime(String),
    CheckFailed(String),
}

#[derive(Serialize)]
struct Line<'a> {
    error: &'a str,
    code: i32,
    message: &'a str,
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Config(_) => 3,
            Failure::Io(_) => 4,
            Failure::Data(_) => 5,
            Failure::Runtime(_) => 6,
            Failure::CheckFailed(_) => 7,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Failure::Usage(_) => "usage",
            Failure::Config(_) => "config",
            Failure::Io(_) => "io",
            Failure::Data(_) => "data",
            Failure::Runtime(_) => "runtime",
            Failure::CheckFailed(_) => "check_failed",
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m)
            | Failure::Config(m)
            | Failure::Io(m)
            | Failure::Data(m)
            | Failure::Runtime(m)
            | Failure::CheckFailed(m) => m,
        }
    }

    /// Single-line JSON for stderr.
    pub fn to_line(&self) -> String {
        serde_json::to_string(&Line {
            error: self.kind(),
            code: self.code(),
            message: &self.message().replace('\n', " "),
        })
        .expect("plain strings serialize")
    }
}

impl From<mag_core::Error> for Failure {
    fn from(e: mag_core::Error) -> Self {
        let m = e.to_string();
        match e.kind() {
            "config" => Failure::Config(m),
            "io" => Failure::Io(m),
            "data" | "parse" | "alignment" => Failure::Data(m),
            _ => Failure::Runtime(m),
        }
    }
}
