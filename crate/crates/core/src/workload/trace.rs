//! Line-oriented trace files.
//!
//! ```text
//! # comments start with '#'
//! hbm_footprint_bytes 1358954496
//! # id  deps       me_cycles ve_cycles hbm_bytes max_me_parallelism reduction_split
//! mm0   -          1000      0         65536     4                  0
//! sm0   mm0        0         400       0         0                  0
//! add0  mm0,sm0    0         50        0         0                  false
//! ```
//!
//! Fields are whitespace separated. `deps` is a comma list or `-` for none.
//! `reduction_split` accepts `0`/`1`/`true`/`false`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{Operator, OperatorGraph, ValidationError};

const HEADER_KEY: &str = "hbm_footprint_bytes";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn parse_err(line: usize, msg: impl Into<String>) -> TraceError {
    TraceError::Parse {
        line,
        msg: msg.into(),
    }
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<OperatorGraph, TraceError> {
    let p = path.as_ref();
    let text = fs::read_to_string(p).map_err(|source| TraceError::Io {
        path: p.display().to_string(),
        source,
    })?;
    parse_trace(&text)
}

fn field_u64(
    tok: &str,
    line: usize,
    op: &str,
    name: &'static str,
) -> Result<u64, TraceError> {
    let v: i64 = tok
        .replace('_', "")
        .parse()
        .map_err(|_| parse_err(line, format!("{name}: expected integer, got {tok:?}")))?;
    if v < 0 {
        return Err(ValidationError::Negative {
            op: op.to_string(),
            field: name,
        }
        .into());
    }
    Ok(v as u64)
}

pub fn parse_trace(text: &str) -> Result<OperatorGraph, TraceError> {
    let mut footprint: Option<u64> = None;
    let mut ops = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = body.split_whitespace().collect();
        if toks[0] == HEADER_KEY {
            if footprint.is_some() {
                return Err(parse_err(line, "duplicate header"));
            }
            if toks.len() != 2 {
                return Err(parse_err(line, "header takes exactly one value"));
            }
            let v = toks[1]
                .replace('_', "")
                .parse::<i64>()
                .map_err(|_| parse_err(line, "bad footprint"))?;
            if v <= 0 {
                return Err(ValidationError::ZeroFootprint.into());
            }
            footprint = Some(v as u64);
            continue;
        }
        if footprint.is_none() {
            return Err(parse_err(line, format!("expected `{HEADER_KEY}` header first")));
        }
        if toks.len() != 7 {
            return Err(parse_err(line, format!("expected 7 fields, found {}", toks.len())));
        }
        let id = toks[0];
        let deps = if toks[1] == "-" {
            Vec::new()
        } else {
            let d: Vec<String> = toks[1].split(',').map(str::to_string).collect();
            if d.iter().any(String::is_empty) {
                return Err(parse_err(line, "empty dependency id"));
            }
            d
        };
        let me_cycles = field_u64(toks[2], line, id, "me_cycles")?;
        let ve_cycles = field_u64(toks[3], line, id, "ve_cycles")?;
        let hbm_bytes = field_u64(toks[4], line, id, "hbm_bytes")?;
        let par = field_u64(toks[5], line, id, "max_me_parallelism")?;
        let max_me_parallelism =
            u32::try_from(par).map_err(|_| parse_err(line, "max_me_parallelism too large"))?;
        let reduction_split = match toks[6] {
            "0" | "false" => false,
            "1" | "true" => true,
            t => return Err(parse_err(line, format!("reduction_split: bad flag {t:?}"))),
        };
        ops.push(Operator {
            id: id.to_string(),
            deps,
            me_cycles,
            ve_cycles,
            hbm_bytes,
            max_me_parallelism,
            reduction_split,
        });
    }
    let footprint = footprint.ok_or_else(|| parse_err(0, format!("missing `{HEADER_KEY}` header")))?;
    Ok(OperatorGraph::new(ops, footprint)?)
}

pub fn write_trace(g: &OperatorGraph) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{HEADER_KEY} {}", g.hbm_footprint_bytes());
    s.push_str("# id deps me_cycles ve_cycles hbm_bytes max_me_parallelism reduction_split\n");
    for op in g.operators() {
        let deps = if op.deps.is_empty() {
            "-".to_string()
        } else {
            op.deps.join(",")
        };
        let _ = writeln!(
            s,
            "{} {} {} {} {} {} {}",
            op.id,
            deps,
            op.me_cycles,
            op.ve_cycles,
            op.hbm_bytes,
            op.max_me_parallelism,
            u8::from(op.reduction_split)
        );
    }
    s
}

pub fn save_trace(g: &OperatorGraph, path: impl AsRef<Path>) -> std::io::Result<()> {
    fs::write(path, write_trace(g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const CHAIN: &str = "\
# two-op chain
hbm_footprint_bytes 1048576
matmul - 1000 0 0 1 0
softmax matmul 0 400 0 0 0
";

    #[test]
    fn minimal_chain() {
        let g = parse_trace(CHAIN).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.edge_count(), 1);
        assert_eq!(g.operators()[1].ve_cycles, 400);
    }

    #[test]
    fn undefined_dep() {
        let t = "hbm_footprint_bytes 1\na ghost 1 0 0 1 0\n";
        assert!(matches!(
            parse_trace(t),
            Err(TraceError::Validation(ValidationError::MissingDep { .. }))
        ));
    }

    #[test]
    fn two_cycle() {
        let t = "hbm_footprint_bytes 1\na b 1 0 0 1 0\nb a 1 0 0 1 0\n";
        assert!(matches!(
            parse_trace(t),
            Err(TraceError::Validation(ValidationError::Cycle(_)))
        ));
    }

    #[test]
    fn negative_duration() {
        let t = "hbm_footprint_bytes 1\na - -5 10 0 1 0\n";
        assert!(matches!(
            parse_trace(t),
            Err(TraceError::Validation(ValidationError::Negative { field: "me_cycles", .. }))
        ));
    }

    #[test]
    fn parse_error_carries_line() {
        let t = "hbm_footprint_bytes 1\n\na - x 10 0 1 0\n";
        match parse_trace(t) {
            Err(TraceError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_header() {
        assert!(matches!(
            parse_trace("a - 1 0 0 1 0\n"),
            Err(TraceError::Parse { line: 1, .. })
        ));
    }

    fn arb_graph() -> impl Strategy<Value = OperatorGraph> {
        proptest::collection::vec(
            (0u64..5000, 0u64..5000, 0u64..1 << 30, 1u32..9, any::<bool>(), any::<u64>()),
            1..30,
        )
        .prop_map(|rows| {
            let ops = rows
                .iter()
                .enumerate()
                .map(|(i, &(me, ve, hbm, par, red, mask))| {
                    let (me, ve) = if me == 0 && ve == 0 { (1, 0) } else { (me, ve) };
                    let deps = (0..i)
                        .filter(|j| mask >> (j % 64) & 1 == 1)
                        .map(|j| format!("op{j}"))
                        .collect();
                    Operator {
                        id: format!("op{i}"),
                        deps,
                        me_cycles: me,
                        ve_cycles: ve,
                        hbm_bytes: hbm,
                        max_me_parallelism: if me == 0 { 0 } else { par },
                        reduction_split: me > 0 && red,
                    }
                })
                .collect();
            OperatorGraph::new(ops, 1 << 20).unwrap()
        })
    }

    proptest! {
        #[test]
        fn round_trip(g in arb_graph()) {
            let back = parse_trace(&write_trace(&g)).unwrap();
            prop_assert_eq!(back, g);
        }
    }

    #[test]
    fn file_round_trip() {
        let g = parse_trace(CHAIN).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.trace");
        save_trace(&g, &p).unwrap();
        assert_eq!(load_trace(&p).unwrap(), g);
    }
}
