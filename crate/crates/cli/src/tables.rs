//! Plain tabular text output: tab-separated columns under a named header.

pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Table {
        Table {
            header: columns.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn row(&mut self, cells: Vec<String>) {
        assert_eq!(cells.len(), self.header.len(), "row width must match header");
        self.rows.push(cells);
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.header.join("\t"));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join("\t"));
            out.push('\n');
        }
        out
    }
}

/// Shortest-roundtrip float formatting (deterministic, lossless).
pub fn num(v: f64) -> String {
    format!("{v}")
}

pub fn opt_knot(k: Option<usize>) -> String {
    match k {
        Some(v) => v.to_string(),
        None => "not-hit".to_string(),
    }
}
