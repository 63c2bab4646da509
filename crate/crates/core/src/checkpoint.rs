//! Parameter checkpoints: a text header naming each array and its shape, followed
//! by the raw values as little-endian `f64`, in header order.
//!
//! ```text
//! DAGCKPT v1 <count>
//! <name> <rows> <cols>
//! ...
//! END
//! <binary payload>
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::attention::{StackShape, TransformerStack};
use crate::error::{Error, Result};

const MAGIC: &str = "DAGCKPT v1";

fn bad(msg: impl Into<String>) -> Error {
    Error::ParseError { line: 0, msg: format!("checkpoint: {}", msg.into()) }
}

pub fn encode(named: &[(String, &Array2<f64>)]) -> Vec<u8> {
    let mut out = format!("{MAGIC} {}\n", named.len()).into_bytes();
    for (name, m) in named {
        out.extend_from_slice(format!("{name} {} {}\n", m.nrows(), m.ncols()).as_bytes());
    }
    out.extend_from_slice(b"END\n");
    for (_, m) in named {
        for x in m.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Array2<f64>)>> {
    let mut pos = 0;
    let mut next_line = || -> Result<String> {
        let end = bytes[pos..].iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header"))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| bad("header is not UTF-8"))?.to_string();
        pos += end + 1;
        Ok(line)
    };
    let head = next_line()?;
    let count: usize = head
        .strip_prefix(MAGIC)
        .and_then(|rest| rest.trim().parse().ok())
        .ok_or_else(|| bad(format!("unrecognized header `{head}`")))?;
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next_line()?;
        let toks: Vec<&str> = line.split(' ').collect();
        let [name, rows, cols] = toks.as_slice() else {
            return Err(bad(format!("bad entry `{line}`")));
        };
        let rows: usize = rows.parse().map_err(|_| bad(format!("bad rows in `{line}`")))?;
        let cols: usize = cols.parse().map_err(|_| bad(format!("bad cols in `{line}`")))?;
        shapes.push((name.to_string(), rows, cols));
    }
    if next_line()? != "END" {
        return Err(bad("missing END marker"));
    }
    let mut out = Vec::with_capacity(count);
    for (name, rows, cols) in shapes {
        let len = rows * cols * 8;
        let chunk = bytes.get(pos..pos + len).ok_or_else(|| bad(format!("payload truncated in `{name}`")))?;
        let vals = chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        pos += len;
        out.push((name, Array2::from_shape_vec((rows, cols), vals).expect("shape matches length")));
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after payload"));
    }
    Ok(out)
}

pub fn encode_stack(stack: &TransformerStack) -> Vec<u8> {
    encode(&stack.named_params())
}

/// Rebuild a stack from its named arrays; every parameter must be present exactly once.
pub fn decode_stack(bytes: &[u8]) -> Result<TransformerStack> {
    let named: BTreeMap<String, Array2<f64>> = decode(bytes)?.into_iter().collect();
    let get = |k: &str| named.get(k).ok_or_else(|| bad(format!("missing `{k}`")));
    let input_proj = get("input_proj")?;
    let head_w = get("head.w")?;
    let blocks = (0..).take_while(|i| named.contains_key(&format!("blocks.{i}.attn.w_o"))).count();
    let heads = (0..).take_while(|h| named.contains_key(&format!("blocks.0.attn.w_q.{h}"))).count();
    if blocks == 0 || heads == 0 {
        return Err(bad("no transformer blocks"));
    }
    let d_k = get("blocks.0.attn.w_q.0")?.ncols();
    let shape = StackShape {
        d_in: input_proj.nrows(),
        d_model: input_proj.ncols(),
        heads,
        d_k,
        blocks,
        d_out: head_w.ncols(),
    };
    let mut stack = TransformerStack::init(shape, 0);
    let expected = stack.num_params();
    for (name, slot) in stack.named_params_mut() {
        let src = get(&name)?;
        if src.dim() != slot.dim() {
            return Err(bad(format!("`{name}` has shape {:?}, expected {:?}", src.dim(), slot.dim())));
        }
        slot.assign(src);
    }
    if named.values().map(|m| m.len()).sum::<usize>() != expected {
        return Err(bad("unexpected extra arrays"));
    }
    Ok(stack)
}

pub fn save_stack(stack: &TransformerStack, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_stack(stack))?;
    Ok(())
}

pub fn load_stack(path: impl AsRef<Path>) -> Result<TransformerStack> {
    decode_stack(&fs::read(path)?)
}
