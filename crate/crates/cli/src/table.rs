//! Tables built from serializable rows.

use anyhow::{bail, Result};
use serde::Serialize;
use serde_json::Value;

use crate::io::{fmt_f64, Table};

fn cell(v: &Value) -> Result<String> {
    Ok(match v {
        Value::Null => String::new(),
        Value::Bool(b) => b.to_string(),
        Value::Number(n) => match (n.as_u64(), n.as_i64()) {
            (Some(u), _) => u.to_string(),
            (None, Some(i)) => i.to_string(),
            _ => fmt_f64(n.as_f64().unwrap_or(f64::NAN)),
        },
        Value::String(s) => s.clone(),
        other => bail!("nested value {other} cannot be a table cell"),
    })
}

/// `prefix` columns followed by the fields of each row, in declaration order.
pub fn rows_to_table<T: Serialize>(prefix: &[&str], rows: &[(Vec<String>, T)]) -> Result<Table> {
    let mut header: Vec<String> = prefix.iter().map(|s| s.to_string()).collect();
    let mut out = Vec::with_capacity(rows.len());
    for (i, (lead, row)) in rows.iter().enumerate() {
        let Value::Object(map) = serde_json::to_value(row)? else {
            bail!("table rows must serialize to objects");
        };
        if i == 0 {
            header.extend(map.keys().cloned());
        }
        let mut cells = lead.clone();
        for v in map.values() {
            cells.push(cell(v)?);
        }
        if cells.len() != header.len() {
            bail!("row {i} has {} cells for {} columns", cells.len(), header.len());
        }
        out.push(cells);
    }
    Ok(Table { header, rows: out })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Row {
        b: f64,
        a: usize,
        name: &'static str,
    }

    #[test]
    fn columns_keep_field_order() {
        let t = rows_to_table(&["image"], &[(vec!["x.png".into()], Row { b: 0.5, a: 3, name: "q" })]).unwrap();
        assert_eq!(t.header, ["image", "b", "a", "name"]);
        assert_eq!(t.rows[0], ["x.png", "0.5", "3", "q"]);
    }
}
