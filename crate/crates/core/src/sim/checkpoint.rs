//! `FTSIM1` checkpoints.
//!
//! Layout: the line `FTSIM1`, a plain-text manifest, the line `end`, then
//! the tensor data as little-endian `f64`. Manifest lines:
//!
//! ```text
//! config <feat_dim> <hidden_dim> <joint_dim> <vocab> <blank_id> <seed>
//! tensor <section> <group> <d0>x<d1>... <byte offset> <element count>
//! round <t>            (optional, with beta / mask / w_prev tensors)
//! beta <value>
//! mask <group>,<group>,...
//! ```
//!
//! `section` is `params` for the weights or `w_prev` for the server's
//! previous weights. Byte offsets are relative to the start of the data.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{AdaptationMask, Group, ModelConfig, ParamGroup, ParameterSet};
use crate::server::ServerState;

const MAGIC: &[u8] = b"FTSIM1\n";
const END: &[u8] = b"end\n";

/// Weights plus, when saved mid-adaptation, the server's round state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ParameterSet,
    pub server: Option<ServerSnapshot>,
}

#[derive(Debug, Clone)]
pub struct ServerSnapshot {
    pub round: usize,
    pub beta: f64,
    pub mask: AdaptationMask,
    pub w_prev: ParameterSet,
}

impl Checkpoint {
    pub fn from_server(state: &ServerState) -> Self {
        Checkpoint {
            params: state.w_curr.clone(),
            server: Some(ServerSnapshot {
                round: state.round,
                beta: state.beta,
                mask: state.mask.clone(),
                w_prev: state.w_prev.clone(),
            }),
        }
    }

    /// The server state this checkpoint was taken from, if any.
    pub fn server_state(&self) -> Option<ServerState> {
        self.server.as_ref().map(|s| ServerState {
            w_curr: self.params.clone(),
            w_prev: s.w_prev.clone(),
            round: s.round,
            beta: s.beta,
            mask: s.mask.clone(),
        })
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let cfg = ckpt.params.config();
    let mut manifest = format!(
        "config {} {} {} {} {} {}\n",
        cfg.feat_dim, cfg.hidden_dim, cfg.joint_dim, cfg.vocab, cfg.blank_id, cfg.seed
    );
    let mut data: Vec<u8> = Vec::new();
    let mut push = |section: &str, params: &ParameterSet, manifest: &mut String| {
        for g in params.groups() {
            let shape: Vec<String> = g.shape.iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!(
                "tensor {section} {} {} {} {}\n",
                g.group.name(),
                shape.join("x"),
                data.len(),
                g.data.len()
            ));
            for x in &g.data {
                data.extend_from_slice(&x.to_le_bytes());
            }
        }
    };
    push("params", &ckpt.params, &mut manifest);
    if let Some(s) = &ckpt.server {
        manifest.push_str(&format!("round {}\n", s.round));
        manifest.push_str(&format!("beta {:?}\n", s.beta));
        manifest.push_str(&format!("mask {}\n", s.mask.to_names().replace(' ', ",")));
        push("w_prev", &s.w_prev, &mut manifest);
    }
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(END);
    out.extend_from_slice(&data);
    out
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ckpt))?;
    Ok(())
}

/// Loads a checkpoint, using the model config recorded in its manifest.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?, path, None)
}

/// Loads a checkpoint that must fit `expected`; a mismatch names the first
/// offending group.
pub fn load_checkpoint_as(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?, path, Some(expected))
}

struct TensorEntry {
    section: String,
    group: Group,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

fn manifest_err(line: &str, what: &str) -> Error {
    Error::Manifest(format!("{what} in line `{line}`"))
}

fn num<T: std::str::FromStr>(field: Option<&str>, line: &str) -> Result<T> {
    field
        .and_then(|f| f.parse().ok())
        .ok_or_else(|| manifest_err(line, "bad number"))
}

pub fn decode_checkpoint(
    bytes: &[u8],
    path: &Path,
    expected: Option<&ModelConfig>,
) -> Result<Checkpoint> {
    if !bytes.starts_with(MAGIC) {
        if MAGIC.starts_with(bytes) {
            return Err(Error::Truncated(path.to_path_buf()));
        }
        return Err(Error::BadMagic(path.to_path_buf()));
    }
    let rest = &bytes[MAGIC.len()..];
    let mut pos = 0;
    let mut lines = Vec::new();
    loop {
        let Some(nl) = rest[pos..].iter().position(|&b| b == b'\n') else {
            return Err(Error::Truncated(path.to_path_buf()));
        };
        let line = std::str::from_utf8(&rest[pos..pos + nl])
            .map_err(|_| Error::Manifest("manifest is not UTF-8".into()))?;
        pos += nl + 1;
        if line == "end" {
            break;
        }
        lines.push(line.to_string());
    }
    let data = &rest[pos..];

    let mut config: Option<ModelConfig> = None;
    let mut tensors = Vec::new();
    let (mut round, mut beta, mut mask) = (None, None, None);
    for line in &lines {
        let mut f = line.split(' ');
        match f.next() {
            Some("config") => {
                config = Some(ModelConfig {
                    feat_dim: num(f.next(), line)?,
                    hidden_dim: num(f.next(), line)?,
                    joint_dim: num(f.next(), line)?,
                    vocab: num(f.next(), line)?,
                    blank_id: num(f.next(), line)?,
                    seed: num(f.next(), line)?,
                })
            }
            Some("tensor") => {
                let section = f
                    .next()
                    .ok_or_else(|| manifest_err(line, "missing section"))?;
                let group: Group = f
                    .next()
                    .ok_or_else(|| manifest_err(line, "missing group"))?
                    .parse()
                    .map_err(|_| manifest_err(line, "unknown group"))?;
                let shape = f
                    .next()
                    .ok_or_else(|| manifest_err(line, "missing shape"))?
                    .split('x')
                    .map(|d| num(Some(d), line))
                    .collect::<Result<Vec<usize>>>()?;
                tensors.push(TensorEntry {
                    section: section.to_string(),
                    group,
                    shape,
                    offset: num(f.next(), line)?,
                    len: num(f.next(), line)?,
                });
            }
            Some("round") => round = Some(num::<usize>(f.next(), line)?),
            Some("beta") => beta = Some(num::<f64>(f.next(), line)?),
            Some("mask") => {
                let names: Vec<&str> = f
                    .next()
                    .unwrap_or("")
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .collect();
                mask = Some(
                    AdaptationMask::from_names(&names)
                        .map_err(|_| manifest_err(line, "unknown group in mask"))?,
                );
            }
            _ => return Err(manifest_err(line, "unknown entry")),
        }
    }
    let stored = config.ok_or_else(|| Error::Manifest("missing config line".into()))?;
    let config = expected.cloned().unwrap_or(stored);

    let mut end = 0;
    for t in &tensors {
        if t.shape.iter().product::<usize>() != t.len {
            return Err(Error::Manifest(format!(
                "tensor {} {} has shape {:?} but {} elements",
                t.section,
                t.group.name(),
                t.shape,
                t.len
            )));
        }
        end = end.max(t.offset + 8 * t.len);
    }
    if data.len() < end {
        return Err(Error::Truncated(path.to_path_buf()));
    }
    if data.len() > end {
        return Err(Error::Manifest(format!(
            "{} trailing bytes after tensor data",
            data.len() - end
        )));
    }
    let section = |name: &str| -> Result<ParameterSet> {
        let groups: Vec<ParamGroup> = tensors
            .iter()
            .filter(|t| t.section == name)
            .map(|t| ParamGroup {
                group: t.group,
                shape: t.shape.clone(),
                data: data[t.offset..t.offset + 8 * t.len]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect(),
            })
            .collect();
        ParameterSet::from_groups(&config, groups)
    };
    let params = section("params")?;
    let server = match (round, beta, mask) {
        (Some(round), Some(beta), Some(mask)) => Some(ServerSnapshot {
            round,
            beta,
            mask,
            w_prev: section("w_prev")?,
        }),
        (None, None, None) => None,
        _ => {
            return Err(Error::Manifest(
                "round state needs round, beta and mask together".into(),
            ))
        }
    };
    if let Some(t) = tensors
        .iter()
        .find(|t| t.section != "params" && t.section != "w_prev")
    {
        return Err(Error::Manifest(format!("unknown section `{}`", t.section)));
    }
    Ok(Checkpoint { params, server })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ParameterSet {
        let mut p = ParameterSet::init(&ModelConfig::default());
        p.get_mut(Group::BiasAll)[0] = f64::MIN_POSITIVE / 3.0;
        p.get_mut(Group::BiasAll)[1] = -0.0;
        p
    }

    fn here() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = params();
        let c = decode_checkpoint(
            &encode_checkpoint(&Checkpoint {
                params: p.clone(),
                server: None,
            }),
            here(),
            None,
        )
        .unwrap();
        assert!(c.params.bits_eq(&p));
        assert_eq!(c.params.config(), p.config());
        assert!(c.server.is_none());
    }

    #[test]
    fn server_state_round_trip() {
        let mut state =
            ServerState::new(params(), 0.8, AdaptationMask::preset("keyvalue").unwrap());
        let mut delta = state.w_curr.zeros_like();
        delta.get_mut(Group::AttnK)[3] = 0.25;
        state.apply(&delta).unwrap();
        let bytes = encode_checkpoint(&Checkpoint::from_server(&state));
        let back = decode_checkpoint(&bytes, here(), None)
            .unwrap()
            .server_state()
            .unwrap();
        assert!(back.w_curr.bits_eq(&state.w_curr));
        assert!(back.w_prev.bits_eq(&state.w_prev));
        assert_eq!(back.round, 1);
        assert_eq!(back.beta, 0.8);
        assert_eq!(back.mask, state.mask);
    }

    #[test]
    fn distinct_errors() {
        let bytes = encode_checkpoint(&Checkpoint {
            params: params(),
            server: None,
        });
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_checkpoint(&bad, here(), None),
            Err(Error::BadMagic(_))
        ));
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 5], here(), None),
            Err(Error::Truncated(_))
        ));
        assert!(matches!(
            decode_checkpoint(&bytes[..20], here(), None),
            Err(Error::Truncated(_))
        ));
        assert!(matches!(
            decode_checkpoint(&bytes[..3], here(), None),
            Err(Error::Truncated(_))
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(
            decode_checkpoint(&extra, here(), None),
            Err(Error::Manifest(_))
        ));
        let text = String::from_utf8_lossy(&bytes[..200])
            .replace("tensor params enc_in", "tensor params bogus");
        let mut edited = text.into_bytes();
        edited.extend_from_slice(&bytes[200..]);
        assert!(matches!(
            decode_checkpoint(&edited, here(), None),
            Err(Error::Manifest(_))
        ));
    }

    #[test]
    fn incompatible_config_names_first_group() {
        let bytes = encode_checkpoint(&Checkpoint {
            params: params(),
            server: None,
        });
        let other = ModelConfig {
            hidden_dim: 8,
            ..ModelConfig::default()
        };
        match decode_checkpoint(&bytes, here(), Some(&other)) {
            Err(Error::ShapeMismatch { group, .. }) => assert_eq!(group, "enc_in"),
            other => panic!("unexpected {other:?}"),
        }
        let vocab_only = ModelConfig {
            vocab: 9,
            ..ModelConfig::default()
        };
        match decode_checkpoint(&bytes, here(), Some(&vocab_only)) {
            Err(Error::ShapeMismatch { group, .. }) => assert_eq!(group, "pred_emb"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ftsim");
        let p = params();
        save_checkpoint(
            &path,
            &Checkpoint {
                params: p.clone(),
                server: None,
            },
        )
        .unwrap();
        assert!(load_checkpoint(&path).unwrap().params.bits_eq(&p));
        assert!(load_checkpoint_as(&path, p.config())
            .unwrap()
            .params
            .bits_eq(&p));
    }
}
