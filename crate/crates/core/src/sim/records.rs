//! Plain-text dataset files, one utterance per line:
//!
//! ```text
//! domain=<source|target> frames=<T> dim=<F> tokens=<k,k,...> starts=<t,t,...> x=<v,v,...>
//! ```
//!
//! `starts` holds the first frame of each token's span (its alignment
//! frame) and `x` the `T * F` features in frame-major order. Numbers are
//! written in shortest round-trip form, so loading is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lattice::AlignmentPath;
use crate::model::Features;

use super::data::{Domain, Utterance};

fn join<T: std::fmt::Debug>(xs: &[T]) -> String {
    let mut s = String::new();
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{x:?}");
    }
    s
}

pub fn format_record(u: &Utterance) -> String {
    format!(
        "domain={} frames={} dim={} tokens={} starts={} x={}",
        u.domain.name(),
        u.features.frames(),
        u.features.dim(),
        join(&u.tokens),
        join(&u.true_alignment.emit_frames()),
        join(u.features.as_slice())
    )
}

fn split_list<T: std::str::FromStr>(s: &str, line: usize, key: &str) -> Result<Vec<T>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|v| {
            v.parse().map_err(|_| Error::Record {
                line,
                detail: format!("bad number `{v}` in `{key}`"),
            })
        })
        .collect()
}

/// Parses one record; `line` is only used in error messages.
pub fn parse_record(text: &str, line: usize, blank_id: usize) -> Result<Utterance> {
    let err = |detail: String| Error::Record { line, detail };
    let mut fields = std::collections::HashMap::new();
    for part in text.split_whitespace() {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| err(format!("field `{part}` is not key=value")))?;
        fields.insert(k, v);
    }
    let get = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| err(format!("missing `{k}`")))
    };
    let domain: Domain = get("domain")?
        .parse()
        .map_err(|_| err("bad domain".into()))?;
    let frames: usize = get("frames")?
        .parse()
        .map_err(|_| err("bad frames".into()))?;
    let dim: usize = get("dim")?.parse().map_err(|_| err("bad dim".into()))?;
    let tokens: Vec<usize> = split_list(get("tokens")?, line, "tokens")?;
    let starts: Vec<usize> = split_list(get("starts")?, line, "starts")?;
    let x: Vec<f64> = split_list(get("x")?, line, "x")?;
    if dim == 0 || x.len() != frames * dim {
        return Err(err(format!(
            "{} feature values for frames={frames} dim={dim}",
            x.len()
        )));
    }
    let features = Features::new(x, dim).map_err(|e| err(e.to_string()))?;
    let true_alignment = AlignmentPath::from_emit_frames(&tokens, &starts, frames, blank_id)
        .map_err(|e| err(e.to_string()))?;
    Ok(Utterance {
        features,
        tokens,
        true_alignment,
        domain,
    })
}

pub fn save_dataset(path: &Path, data: &[Utterance]) -> Result<()> {
    let mut out = String::new();
    for u in data {
        out.push_str(&format_record(u));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a dataset; blank lines are skipped.
pub fn load_dataset(path: &Path, blank_id: usize) -> Result<Vec<Utterance>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_record(l, i + 1, blank_id))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedPath;
    use crate::sim::data::{gen_dataset, make_domains, DataConfig};

    #[test]
    fn records_round_trip() {
        let (src, tgt) = make_domains(&DataConfig::default(), 17, 0, 8, SeedPath::new(1)).unwrap();
        let mut data = gen_dataset(&src, 10, 2);
        data.extend(gen_dataset(&tgt, 10, 3));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.txt");
        save_dataset(&path, &data).unwrap();
        assert_eq!(load_dataset(&path, 0).unwrap(), data);
    }

    #[test]
    fn empty_token_list_parses() {
        let u = parse_record(
            "domain=source frames=1 dim=2 tokens= starts= x=0.5,-1.0",
            1,
            0,
        )
        .unwrap();
        assert!(u.tokens.is_empty());
        assert_eq!(u.features.as_slice(), &[0.5, -1.0]);
    }

    #[test]
    fn bad_records_report_line() {
        let cases = [
            "domain=source frames=1 dim=2 tokens= starts= x=0.5",
            "domain=elsewhere frames=1 dim=2 tokens= starts= x=0.5,1",
            "frames=1 dim=2 tokens= starts= x=0.5,1",
            "domain=source frames=1 dim=2 tokens=3 starts=4 x=0.5,1",
            "domain=source frames=1 dim=2 tokens=a starts= x=0.5,1",
            "domain=source garbage",
        ];
        for c in cases {
            match parse_record(c, 7, 0) {
                Err(Error::Record { line, .. }) => assert_eq!(line, 7, "{c}"),
                other => panic!("{c}: {other:?}"),
            }
        }
    }
}
