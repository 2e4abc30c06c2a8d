//! Checkpoint files.
//!
//! Layout: the magic line `AWI1`, a newline-separated text header, then the
//! raw tensor payload.
//!
//! ```text
//! AWI1
//! format-version 1
//! config {...json TrainConfig...}
//! dims {...json ModelDims...}
//! vocab <N>
//! <token 0>
//! ...
//! tensors <K>
//! <name> <rows> <cols>
//! ...
//! data
//! <Σ rows·cols little-endian f64, tensors in header order>
//! ```

use std::fs;
use std::path::Path;

use crate::corpus::Vocab;
use crate::error::{AwiError, Result};
use crate::gradcheck::ParamSet;
use crate::model::{AwiParams, ModelDims};
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8] = b"AWI1\n";
pub const FORMAT_VERSION: u32 = 1;

pub fn to_bytes(params: &AwiParams, config: &TrainConfig, vocab: &Vocab) -> Result<Vec<u8>> {
    if vocab.len() != params.dims.vocab {
        return Err(AwiError::Checkpoint(format!(
            "vocabulary has {} entries but the model expects {}",
            vocab.len(),
            params.dims.vocab
        )));
    }
    let mut header = String::new();
    header.push_str(&format!("format-version {FORMAT_VERSION}\n"));
    header.push_str(&format!("config {}\n", to_json(config)?));
    header.push_str(&format!("dims {}\n", to_json(&params.dims)?));
    header.push_str(&format!("vocab {}\n", vocab.len()));
    for t in vocab.tokens() {
        header.push_str(t);
        header.push('\n');
    }
    let named = params.named_tensors();
    header.push_str(&format!("tensors {}\n", named.len()));
    for (name, t) in &named {
        header.push_str(&format!("{name} {} {}\n", t.rows(), t.cols()));
    }
    header.push_str("data\n");

    let mut out = Vec::with_capacity(MAGIC.len() + header.len() + 8 * params.num_elements());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(header.as_bytes());
    for (_, t) in &named {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| AwiError::Checkpoint(e.to_string()))
}

pub fn save_checkpoint(
    params: &AwiParams,
    config: &TrainConfig,
    vocab: &Vocab,
    path: impl AsRef<Path>,
) -> Result<()> {
    fs::write(path, to_bytes(params, config, vocab)?)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| AwiError::Checkpoint("truncated header".into()))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end])
            .map_err(|_| AwiError::Checkpoint("header is not valid UTF-8".into()))
    }

    fn keyed(&mut self, key: &str) -> Result<&'a str> {
        let line = self.line()?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| {
                AwiError::Checkpoint(format!("expected `{key}` header line, got {line:?}"))
            })
    }

    fn count(&mut self, key: &str) -> Result<usize> {
        let v = self.keyed(key)?;
        v.parse()
            .map_err(|_| AwiError::Checkpoint(format!("bad `{key}` count {v:?}")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(AwiParams, TrainConfig, Vocab)> {
    if !bytes.starts_with(MAGIC) {
        return Err(AwiError::Checkpoint(
            "bad magic, not an AWI1 checkpoint".into(),
        ));
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
    };
    let version: u32 = r
        .keyed("format-version")?
        .parse()
        .map_err(|_| AwiError::Checkpoint("unparsable format version".into()))?;
    if version != FORMAT_VERSION {
        return Err(AwiError::Checkpoint(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let config: TrainConfig = serde_json::from_str(r.keyed("config")?)
        .map_err(|e| AwiError::Checkpoint(format!("config: {e}")))?;
    let dims: ModelDims = serde_json::from_str(r.keyed("dims")?)
        .map_err(|e| AwiError::Checkpoint(format!("dims: {e}")))?;
    let n_vocab = r.count("vocab")?;
    if n_vocab != dims.vocab {
        return Err(AwiError::Checkpoint(format!(
            "header declares {n_vocab} vocabulary entries but dims say {}",
            dims.vocab
        )));
    }
    let tokens = (0..n_vocab)
        .map(|_| r.line().map(str::to_string))
        .collect::<Result<Vec<_>>>()?;
    let vocab = Vocab::from_tokens(tokens).map_err(|e| AwiError::Checkpoint(e.to_string()))?;

    let mut params = AwiParams::zeros(dims).map_err(|e| AwiError::Checkpoint(e.to_string()))?;
    let expected: Vec<(String, (usize, usize))> = params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape()))
        .collect();
    let n_tensors = r.count("tensors")?;
    if n_tensors != expected.len() {
        return Err(AwiError::Checkpoint(format!(
            "{n_tensors} tensors declared, model has {}",
            expected.len()
        )));
    }
    for (name, (rows, cols)) in &expected {
        let line = r.line()?;
        let parts: Vec<&str> = line.split(' ').collect();
        let declared = match parts.as_slice() {
            [n, r, c] => (
                n.to_string(),
                r.parse::<usize>().ok(),
                c.parse::<usize>().ok(),
            ),
            _ => return Err(AwiError::Checkpoint(format!("bad tensor line {line:?}"))),
        };
        if declared.0 != *name || declared.1 != Some(*rows) || declared.2 != Some(*cols) {
            return Err(AwiError::Checkpoint(format!(
                "tensor {line:?} inconsistent with model: expected {name} {rows} {cols}"
            )));
        }
    }
    if r.line()? != "data" {
        return Err(AwiError::Checkpoint("missing `data` marker".into()));
    }

    let payload = &bytes[r.pos..];
    let needed = 8 * params.num_elements();
    if payload.len() != needed {
        return Err(AwiError::Checkpoint(format!(
            "payload has {} bytes, expected {needed}",
            payload.len()
        )));
    }
    let mut chunks = payload.chunks_exact(8);
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            let b: [u8; 8] = chunks
                .next()
                .expect("length checked")
                .try_into()
                .expect("8 bytes");
            *v = f64::from_le_bytes(b);
        }
    }
    if !params.all_finite() {
        return Err(AwiError::Checkpoint(
            "payload contains non-finite values".into(),
        ));
    }
    Ok((params, config, vocab))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(AwiParams, TrainConfig, Vocab)> {
    from_bytes(&fs::read(path)?)
}
