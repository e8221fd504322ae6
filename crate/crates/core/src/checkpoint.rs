//! Single-file checkpoints: a text header followed by little-endian f32 data.
//!
//! ```text
//! lsenet-checkpoint 1
//! [model]
//! layers=4
//! ...
//! [params]
//! layer0.mff.pre.kernel 64,1,3,3 0
//! ...
//! [train]            optional optimizer state
//! step=120
//! ...
//! [history]
//! 0,0.0005,1.23,0.41
//! [moments]
//! m.layer0.mff.pre.kernel 64,1,3,3 8532
//! ...
//! [payload]
//! <raw bytes>
//! ```
//!
//! Offsets count bytes from the start of the payload.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use lsenet_tensor::Tensor;

use crate::error::{LsenetError, Result};
use crate::network::{LsenetConfig, LsenetModel};
use crate::train::{HistoryRow, TrainState};

pub const MAGIC: &str = "lsenet-checkpoint";
pub const VERSION: u32 = 1;
const PAYLOAD_MARK: &str = "[payload]\n";

fn shape_str(s: &[usize]) -> String {
    s.iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

struct Writer {
    header: String,
    payload: Vec<u8>,
}

impl Writer {
    fn tensor(&mut self, name: &str, t: &Tensor<f32>) {
        let _ = writeln!(
            self.header,
            "{name} {} {}",
            shape_str(t.shape()),
            self.payload.len()
        );
        for v in t.data() {
            self.payload.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode_checkpoint(model: &LsenetModel<f32>, state: Option<&TrainState>) -> Vec<u8> {
    let mut w = Writer {
        header: format!("{MAGIC} {VERSION}\n[model]\n"),
        payload: Vec::new(),
    };
    for (k, v) in model.config.to_pairs() {
        let _ = writeln!(w.header, "{k}={v}");
    }
    w.header.push_str("[params]\n");
    for p in model.params.iter() {
        w.tensor(&p.name, &p.value);
    }
    if let Some(s) = state {
        let best_epoch = s.best_epoch.map_or("none".to_string(), |e| e.to_string());
        let _ = write!(
            w.header,
            "[train]\nstep={}\nepoch={}\nbest_val_dice={}\nbest_epoch={best_epoch}\nepochs_since_best={}\nseed={}\n[history]\n",
            s.step, s.epoch, s.best_val_dice, s.epochs_since_best, s.seed
        );
        for r in &s.history {
            let _ = writeln!(w.header, "{}", r.to_csv());
        }
        w.header.push_str("[moments]\n");
        for (p, m) in model.params.iter().zip(&s.m) {
            w.tensor(&format!("m.{}", p.name), m);
        }
        for (p, v) in model.params.iter().zip(&s.v) {
            w.tensor(&format!("v.{}", p.name), v);
        }
    }
    w.header.push_str(PAYLOAD_MARK);
    let mut out = w.header.into_bytes();
    out.extend_from_slice(&w.payload);
    out
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

struct Reader<'a> {
    origin: &'a Path,
    payload: &'a [u8],
}

impl Reader<'_> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(LsenetError::format(self.origin, msg))
    }

    fn entry(&self, line: &str) -> Result<Entry> {
        let mut f = line.split(' ');
        let (Some(name), Some(shape), Some(offset), None) =
            (f.next(), f.next(), f.next(), f.next())
        else {
            return self.err(format!("malformed tensor line `{line}`"));
        };
        let shape: Option<Vec<usize>> = if shape.is_empty() {
            Some(vec![])
        } else {
            shape.split(',').map(|d| d.parse().ok()).collect()
        };
        let (Some(shape), Ok(offset)) = (shape, offset.parse()) else {
            return self.err(format!("malformed tensor line `{line}`"));
        };
        Ok(Entry {
            name: name.to_string(),
            shape,
            offset,
        })
    }

    fn tensor(&self, e: &Entry) -> Result<Tensor<f32>> {
        let n: usize = e.shape.iter().product();
        let end = e.offset + 4 * n;
        let Some(bytes) = self.payload.get(e.offset..end) else {
            return self.err(format!(
                "tensor `{}` runs past the end of the payload",
                e.name
            ));
        };
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Tensor::new(e.shape.clone(), data)?)
    }
}

/// Parses a checkpoint, rebuilding the model from its stored config and
/// checking that every stored tensor matches the rebuilt parameter list.
pub fn decode_checkpoint(
    bytes: &[u8],
    origin: &Path,
) -> Result<(LsenetModel<f32>, Option<TrainState>)> {
    let fmt_err = |msg: String| LsenetError::format(origin, msg);
    let split = bytes
        .windows(PAYLOAD_MARK.len())
        .position(|w| w == PAYLOAD_MARK.as_bytes())
        .ok_or_else(|| fmt_err("missing payload marker".into()))?;
    let header =
        std::str::from_utf8(&bytes[..split]).map_err(|_| fmt_err("header is not UTF-8".into()))?;
    let rd = Reader {
        origin,
        payload: &bytes[split + PAYLOAD_MARK.len()..],
    };

    let mut lines = header.lines();
    let magic = lines.next().unwrap_or("");
    if magic != format!("{MAGIC} {VERSION}") {
        return rd.err(format!("unsupported header `{magic}`"));
    }
    let mut sections: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let mut current = None;
    for line in lines {
        if line.starts_with('[') && line.ends_with(']') {
            let name = &line[1..line.len() - 1];
            if sections.insert(name, Vec::new()).is_some() {
                return rd.err(format!("duplicate section [{name}]"));
            }
            current = Some(name);
        } else if let Some(sec) = current {
            sections.get_mut(sec).expect("inserted above").push(line);
        } else {
            return rd.err(format!("line `{line}` outside any section"));
        }
    }
    let kv = |sec: &str| -> Result<BTreeMap<String, String>> {
        let mut m = BTreeMap::new();
        for line in sections.get(sec).into_iter().flatten() {
            let Some((k, v)) = line.split_once('=') else {
                return rd.err(format!("[{sec}] line `{line}` is not key=value"));
            };
            m.insert(k.to_string(), v.to_string());
        }
        Ok(m)
    };

    let Some(_) = sections.get("model") else {
        return rd.err("missing [model] section");
    };
    let config = LsenetConfig::from_pairs(&kv("model")?)?;
    let mut model = LsenetModel::<f32>::build(&config)?;
    let stored = sections.get("params").map(Vec::as_slice).unwrap_or(&[]);
    if stored.len() != model.params.len() {
        return rd.err(format!(
            "{} stored parameters, config implies {}",
            stored.len(),
            model.params.len()
        ));
    }
    for (line, p) in stored.iter().zip(model.params.iter_mut()) {
        let e = rd.entry(line)?;
        if e.name != p.name || e.shape != p.value.shape() {
            return rd.err(format!(
                "stored `{}` {:?} does not match expected `{}` {:?}",
                e.name,
                e.shape,
                p.name,
                p.value.shape()
            ));
        }
        p.value = rd.tensor(&e)?;
    }

    if !sections.contains_key("train") {
        return Ok((model, None));
    }
    let t = kv("train")?;
    fn field<V: std::str::FromStr>(
        t: &BTreeMap<String, String>,
        key: &str,
        origin: &Path,
    ) -> Result<V> {
        let raw = t
            .get(key)
            .ok_or_else(|| LsenetError::format(origin, format!("[train] lacks `{key}`")))?;
        raw.parse().map_err(|_| {
            LsenetError::format(origin, format!("[train] bad value `{raw}` for `{key}`"))
        })
    }
    let best_epoch = match t.get("best_epoch").map(String::as_str) {
        Some("none") => None,
        _ => Some(field(&t, "best_epoch", origin)?),
    };
    let mut history = Vec::new();
    for line in sections.get("history").into_iter().flatten() {
        history.push(
            HistoryRow::from_csv(line)
                .ok_or_else(|| fmt_err(format!("bad history row `{line}`")))?,
        );
    }
    let moments = sections.get("moments").map(Vec::as_slice).unwrap_or(&[]);
    let n = model.params.len();
    if moments.len() != 2 * n {
        return rd.err(format!(
            "{} moment tensors, expected {}",
            moments.len(),
            2 * n
        ));
    }
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for (i, line) in moments.iter().enumerate() {
        let e = rd.entry(line)?;
        let p = model.params.iter().nth(i % n).expect("index below len");
        let (prefix, dst) = if i < n {
            ("m.", &mut m)
        } else {
            ("v.", &mut v)
        };
        if e.name != format!("{prefix}{}", p.name) || e.shape != p.value.shape() {
            return rd.err(format!(
                "moment `{}` {:?} does not match `{prefix}{}`",
                e.name, e.shape, p.name
            ));
        }
        dst.push(rd.tensor(&e)?);
    }
    let state = TrainState {
        step: field(&t, "step", origin)?,
        epoch: field(&t, "epoch", origin)?,
        m,
        v,
        best_val_dice: field(&t, "best_val_dice", origin)?,
        best_epoch,
        epochs_since_best: field(&t, "epochs_since_best", origin)?,
        seed: field(&t, "seed", origin)?,
        history,
    };
    Ok((model, Some(state)))
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn save_checkpoint(
    path: &Path,
    model: &LsenetModel<f32>,
    state: Option<&TrainState>,
) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| LsenetError::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_checkpoint(model, state)).map_err(|e| LsenetError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| LsenetError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(LsenetModel<f32>, Option<TrainState>)> {
    let bytes = fs::read(path).map_err(|e| LsenetError::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> LsenetModel<f32> {
        LsenetModel::build(&LsenetConfig {
            layers: 2,
            channels: 8,
            patch_size: 2,
            seed: 5,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_without_state() {
        let m = tiny();
        let bytes = encode_checkpoint(&m, None);
        let (back, st) = decode_checkpoint(&bytes, Path::new("x")).unwrap();
        assert!(st.is_none());
        assert_eq!(back, m);
        assert_eq!(encode_checkpoint(&back, None), bytes);
    }

    #[test]
    fn round_trip_with_state() {
        let m = tiny();
        let mut st = TrainState::new(&m.params, 9);
        st.step = 4;
        st.epoch = 2;
        st.observe(0, 0.25);
        st.observe(1, 0.125);
        st.m[3] = Tensor::full(st.m[3].shape().to_vec(), 0.5);
        st.history.push(HistoryRow {
            epoch: 0,
            lr: 5e-4,
            train_loss: 1.1,
            val_dice: 0.25,
        });
        let bytes = encode_checkpoint(&m, Some(&st));
        let (back, back_st) = decode_checkpoint(&bytes, Path::new("x")).unwrap();
        assert_eq!(back_st.as_ref(), Some(&st));
        assert_eq!(encode_checkpoint(&back, back_st.as_ref()), bytes);
    }

    #[test]
    fn fresh_state_keeps_neg_infinity() {
        let m = tiny();
        let st = TrainState::new(&m.params, 0);
        let (_, back) =
            decode_checkpoint(&encode_checkpoint(&m, Some(&st)), Path::new("x")).unwrap();
        assert_eq!(back.unwrap().best_val_dice, f64::NEG_INFINITY);
    }

    #[test]
    fn corrupt_inputs() {
        let m = tiny();
        let bytes = encode_checkpoint(&m, None);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 4], Path::new("x")).is_err());
        assert!(decode_checkpoint(b"garbage", Path::new("x")).is_err());
        let at = bytes.windows(10).position(|w| w == b"channels=8").unwrap();
        let mut edited = bytes[..at].to_vec();
        edited.extend_from_slice(b"channels=16");
        edited.extend_from_slice(&bytes[at + 10..]);
        let err = decode_checkpoint(&edited, Path::new("x"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("does not match"), "{err}");
    }
}
