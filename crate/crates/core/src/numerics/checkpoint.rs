// Copyright 2026 The medbert authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! Checkpoint files: a UTF-8 manifest header followed by little-endian `f32` data.
//!
//! ```text
//! medbert-checkpoint 1
//! tensors <count>
//! <name>\t<d0>x<d1>...\t<byte offset into the data section>
//! ...
//! <raw little-endian f32 values, tensors back to back>
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{NumericsError, ParameterStore, Tensor};

const MAGIC: &str = "medbert-checkpoint 1";

fn format_err(msg: impl Into<String>) -> NumericsError {
    NumericsError::Checkpoint(msg.into())
}

/// Serializes named tensors. Values are rounded to `f32`.
pub fn encode_checkpoint<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut header = format!("{MAGIC}\ntensors {}\n", tensors.len());
    let mut offset = 0usize;
    for (name, t) in &tensors {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        header.push_str(&format!("{name}\t{}\t{offset}\n", dims.join("x")));
        offset += t.len() * 4;
    }
    let mut out = header.into_bytes();
    out.reserve(offset);
    for (_, t) in &tensors {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, NumericsError> {
    let mut pos = 0usize;
    let mut next_line = |bytes: &[u8]| -> Result<String, NumericsError> {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| format_err("truncated header"))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end])
            .map_err(|_| format_err("header is not UTF-8"))?
            .to_string();
        pos += end + 1;
        Ok(line)
    };
    if next_line(bytes)? != MAGIC {
        return Err(format_err("missing checkpoint magic line"));
    }
    let count: usize = next_line(bytes)?
        .strip_prefix("tensors ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format_err("malformed tensor count line"))?;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next_line(bytes)?;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(format_err(format!("malformed record {line:?}")));
        }
        let shape = if fields[1].is_empty() {
            vec![]
        } else {
            fields[1]
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| format_err(format!("bad shape in {line:?}")))?
        };
        let offset: usize = fields[2]
            .parse()
            .map_err(|_| format_err(format!("bad offset in {line:?}")))?;
        records.push((fields[0].to_string(), shape, offset));
    }
    let data = &bytes[pos..];
    let mut out = Vec::with_capacity(count);
    let mut expected_offset = 0usize;
    for (name, shape, offset) in records {
        let n: usize = shape.iter().product();
        if offset != expected_offset || offset + n * 4 > data.len() {
            return Err(format_err(format!("tensor {name} has inconsistent offset {offset}")));
        }
        let values = data[offset..offset + n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        out.push((name, Tensor::new(shape, values)?));
        expected_offset = offset + n * 4;
    }
    if expected_offset != data.len() {
        return Err(format_err("trailing bytes after tensor data"));
    }
    Ok(out)
}

pub fn save_store(store: &ParameterStore, path: &Path) -> Result<(), NumericsError> {
    let bytes = encode_checkpoint(store.ids().map(|id| (store.name(id), store.value(id))));
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor)>, NumericsError> {
    decode_checkpoint(&fs::read(path)?)
}

/// Overwrites every parameter of `store` from the checkpoint. Extra tensors in
/// the file are an error unless `allow_extra`; missing ones always are.
pub fn load_into(
    store: &mut ParameterStore,
    tensors: Vec<(String, Tensor)>,
    allow_extra: bool,
) -> Result<(), NumericsError> {
    let mut seen = 0;
    for (name, t) in tensors {
        if !store.contains(&name) {
            if allow_extra {
                continue;
            }
            return Err(format_err(format!("unexpected tensor {name}")));
        }
        store.set(&name, t)?;
        seen += 1;
    }
    if seen != store.len() {
        return Err(format_err(format!(
            "checkpoint covers {seen} of {} parameters",
            store.len()
        )));
    }
    Ok(())
}
