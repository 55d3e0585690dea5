//! Instance state blob (`.imps`): parameters plus the hot-start iterate.
//!
//! ```text
//! impsv1
//! bundle <bundle sha256>
//! hot_start previous
//! p 0.5 0.0 ...
//! iterate 1
//! w ...
//! lam_g ...
//! lam_h ...
//! lam_x ...
//! working_rows LU..
//! working_vars ....
//! @end <sha256>
//! ```

use crate::solver::{Guess, Side, WorkingSet};

use super::codec::{check_trailer, corrupt, float_line, parse_floats, Lines};
use super::{HotStart, RuntimeError};

pub const STATE_VERSION: &str = "impsv1";

#[derive(Debug, Clone, PartialEq)]
pub struct StateBlob {
    pub bundle_hash: String,
    pub hot_start: HotStart,
    pub p: Vec<f64>,
    pub iterate: Option<Guess>,
}

fn side_char(s: Side) -> char {
    match s {
        Side::Inactive => '.',
        Side::Lower => 'L',
        Side::Upper => 'U',
        Side::Equal => 'E',
    }
}

fn parse_sides(s: &str) -> Result<Vec<Side>, RuntimeError> {
    s.chars()
        .map(|c| match c {
            '.' => Ok(Side::Inactive),
            'L' => Ok(Side::Lower),
            'U' => Ok(Side::Upper),
            'E' => Ok(Side::Equal),
            _ => Err(corrupt(format!("bad working-set code `{c}`"))),
        })
        .collect()
}

impl StateBlob {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!(
            "{STATE_VERSION}\nbundle {}\nhot_start {}\n",
            self.bundle_hash,
            self.hot_start.name()
        );
        out.push_str(&float_line("p", &self.p));
        match &self.iterate {
            None => out.push_str("iterate 0\n"),
            Some(g) => {
                out.push_str("iterate 1\n");
                out.push_str(&float_line("w", &g.w));
                let opt = |v: &Option<Vec<f64>>| v.clone().unwrap_or_default();
                out.push_str(&float_line("lam_g", &opt(&g.lam_g)));
                out.push_str(&float_line("lam_h", &opt(&g.lam_h)));
                out.push_str(&float_line("lam_x", &opt(&g.lam_x)));
                let ws = g.working.clone().unwrap_or_default();
                let rows: String = ws.rows.iter().map(|s| side_char(*s)).collect();
                let vars: String = ws.vars.iter().map(|s| side_char(*s)).collect();
                out.push_str(&format!("working_rows {rows}\nworking_vars {vars}\n"));
            }
        }
        let hash = super::codec::sha256_hex(out.as_bytes());
        out.push_str(&format!("@end {hash}\n"));
        out.into_bytes()
    }

    pub fn decode(data: &[u8]) -> Result<StateBlob, RuntimeError> {
        if !data.starts_with(b"impsv") {
            return Err(corrupt("not a state blob"));
        }
        if !data.starts_with(format!("{STATE_VERSION}\n").as_bytes()) {
            let line = data.split(|b| *b == b'\n').next().unwrap_or_default();
            return Err(RuntimeError::Version(
                String::from_utf8_lossy(line).into_owned(),
            ));
        }
        let body = check_trailer(data)?;
        let mut l = Lines::new(body);
        l.expect(STATE_VERSION)?;
        let bundle_hash = l.expect("bundle")?.to_string();
        if bundle_hash.len() != 64 || !bundle_hash.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(corrupt("malformed bundle hash"));
        }
        let hot_start = HotStart::from_name(l.expect("hot_start")?)
            .ok_or_else(|| corrupt("unknown hot-start mode"))?;
        let p = parse_floats(l.expect("p")?)?;
        let iterate = match l.expect("iterate")? {
            "0" => None,
            "1" => {
                let w = parse_floats(l.expect("w")?)?;
                let lam_g = parse_floats(l.expect("lam_g")?)?;
                let lam_h = parse_floats(l.expect("lam_h")?)?;
                let lam_x = parse_floats(l.expect("lam_x")?)?;
                let rows = parse_sides(l.expect("working_rows")?)?;
                let vars = parse_sides(l.expect("working_vars")?)?;
                Some(Guess {
                    w,
                    lam_g: Some(lam_g),
                    lam_h: Some(lam_h),
                    lam_x: Some(lam_x),
                    working: Some(WorkingSet { rows, vars }),
                })
            }
            _ => return Err(corrupt("bad iterate flag")),
        };
        if !l.is_done() {
            return Err(corrupt("trailing lines"));
        }
        Ok(StateBlob {
            bundle_hash,
            hot_start,
            p,
            iterate,
        })
    }
}
