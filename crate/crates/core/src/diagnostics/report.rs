use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    Info,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pass => "pass",
            Status::Fail => "fail",
            Status::Info => "info",
        })
    }
}

/// One checked statement.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckEntry {
    pub name: String,
    /// The inequality or limit being tested, in symbols.
    pub statement: String,
    pub status: Status,
    pub worst_value: f64,
    /// Node and time of the worst value, when it has one.
    pub location: Option<(usize, f64)>,
    pub tolerance: f64,
}

impl CheckEntry {
    pub fn new(name: &str, statement: &str) -> Self {
        Self {
            name: name.into(),
            statement: statement.into(),
            status: Status::Info,
            worst_value: f64::NAN,
            location: None,
            tolerance: 0.0,
        }
    }

    pub fn pass_if(mut self, ok: bool) -> Self {
        self.status = if ok { Status::Pass } else { Status::Fail };
        self
    }

    pub fn info(mut self) -> Self {
        self.status = Status::Info;
        self
    }

    pub fn worst(mut self, value: f64, location: Option<(usize, f64)>) -> Self {
        self.worst_value = value;
        self.location = location;
        self
    }

    pub fn tol(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }
}

impl fmt::Display for CheckEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let loc = match self.location {
            Some((n, t)) => format!("node={n} t={t}"),
            None => "-".into(),
        };
        write!(
            f,
            "{} {} worst={:e} at={} tol={:e} [{}]",
            self.name, self.status, self.worst_value, loc, self.tolerance, self.statement
        )
    }
}

/// A named table of numeric columns, written out as CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Series {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Self {
            name: name.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DiagnosticsReport {
    pub checks: Vec<CheckEntry>,
    pub series: Vec<Series>,
}

impl DiagnosticsReport {
    pub fn push(&mut self, entry: CheckEntry) {
        self.checks.push(entry);
    }

    /// Appends another report; checks are kept sorted by name so merged
    /// reports do not depend on evaluation order.
    pub fn merge(&mut self, other: DiagnosticsReport) {
        self.checks.extend(other.checks);
        self.series.extend(other.series);
        self.checks.sort_by(|a, b| a.name.cmp(&b.name));
        self.series.sort_by(|a, b| a.name.cmp(&b.name));
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != Status::Fail)
    }

    pub fn check(&self, name: &str) -> Option<&CheckEntry> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn series(&self, name: &str) -> Option<&Series> {
        self.series.iter().find(|s| s.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            s.push_str(&c.to_string());
            s.push('\n');
        }
        s
    }
}
