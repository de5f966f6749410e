//! Bit-exact binary checkpoints.
//!
//! Layout: magic "SQFM", u32 version, a length-prefixed `key = value` config
//! block, then each named tensor as name length + name + u32 rows +
//! u32 cols + little-endian f64 data. All integers little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SQFM";
const VERSION: u32 = 1;

pub fn save_checkpoint(params: &ModelParams, config: &ModelConfig, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let config_text = config.to_kv_text();
    out.write_all(&(config_text.len() as u32).to_le_bytes())?;
    out.write_all(config_text.as_bytes())?;

    let mut failure = None;
    params.visit(|name, tensor| {
        if failure.is_some() {
            return;
        }
        if let Err(e) = write_tensor(&mut out, name, tensor) {
            failure = Some(e);
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    out.flush()?;
    Ok(())
}

fn write_tensor(out: &mut impl Write, name: &str, tensor: &Tensor) -> Result<()> {
    out.write_all(&(name.len() as u32).to_le_bytes())?;
    out.write_all(name.as_bytes())?;
    out.write_all(&(tensor.rows() as u32).to_le_bytes())?;
    out.write_all(&(tensor.cols() as u32).to_le_bytes())?;
    for &v in tensor.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, ModelConfig)> {
    let mut input = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    read_exact(&mut input, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, not a checkpoint file",
            magic
        )));
    }
    let version = read_u32(&mut input, "version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let config_len = read_u32(&mut input, "config length")? as usize;
    let mut config_raw = vec![0u8; config_len];
    read_exact(&mut input, &mut config_raw, "config block")?;
    let config_text = String::from_utf8(config_raw)
        .map_err(|_| Error::Corrupt("config block is not UTF-8".to_string()))?;
    let config = ModelConfig::from_kv_text(&config_text)
        .map_err(|e| Error::Corrupt(format!("invalid config block: {e}")))?;

    let mut named = crate::autodiff::NamedParams::new();
    loop {
        let mut len_buf = [0u8; 4];
        match input.read(&mut len_buf)? {
            0 => break,
            4 => {}
            n => {
                // partial length prefix: keep reading or fail as truncated
                input
                    .read_exact(&mut len_buf[n..])
                    .map_err(|_| Error::Corrupt("truncated tensor record".to_string()))?;
            }
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        if name_len > 4096 {
            return Err(Error::Corrupt(format!(
                "implausible tensor name length {name_len}"
            )));
        }
        let mut name_raw = vec![0u8; name_len];
        read_exact(&mut input, &mut name_raw, "tensor name")?;
        let name = String::from_utf8(name_raw)
            .map_err(|_| Error::Corrupt("tensor name is not UTF-8".to_string()))?;
        let rows = read_u32(&mut input, "rows")? as usize;
        let cols = read_u32(&mut input, "cols")? as usize;
        if rows.saturating_mul(cols) > 100_000_000 {
            return Err(Error::Corrupt(format!(
                "implausible tensor shape {rows}x{cols} for '{name}'"
            )));
        }
        let mut data = vec![0.0f64; rows * cols];
        for v in &mut data {
            let mut buf = [0u8; 8];
            read_exact(&mut input, &mut buf, "tensor data")?;
            *v = f64::from_le_bytes(buf);
        }
        let tensor = Tensor::new(rows, cols, data)
            .map_err(|e| Error::Corrupt(format!("tensor '{name}': {e}")))?;
        if named.insert(name.clone(), tensor).is_some() {
            return Err(Error::Corrupt(format!("duplicate tensor '{name}'")));
        }
    }

    let params = ModelParams::from_named(&config, named)?;
    Ok((params, config))
}

fn read_exact(input: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    input
        .read_exact(buf)
        .map_err(|_| Error::Corrupt(format!("truncated while reading {what}")))
}

fn read_u32(input: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(input, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}
