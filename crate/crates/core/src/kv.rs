//! `key = value` configuration text, one pair per line, `#` comments.

use crate::error::{Error, Result};

/// Parsed pairs with their 1-based line numbers, in file order.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                message: "empty key".into(),
            });
        }
        out.push((i + 1, key.to_string(), value.trim().to_string()));
    }
    Ok(out)
}

pub(crate) fn parse_value<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Parse {
        line,
        message: format!("invalid value `{value}` for `{key}`"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_pairs_and_comments() {
        let pairs = parse_pairs("# c\nsteps = 10\n\n lr=0.5 # inline\n").unwrap();
        assert_eq!(
            pairs,
            vec![
                (2, "steps".to_string(), "10".to_string()),
                (4, "lr".to_string(), "0.5".to_string())
            ]
        );
        assert!(matches!(parse_pairs("a = 1\nnope"), Err(Error::Parse { line: 2, .. })));
    }
}
