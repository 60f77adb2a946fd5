//! Parameter checkpoints.
//!
//! Layout: header `BGCM` v1, the model configuration, then each tensor as
//! name, rank, dims and raw little-endian f64 values.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use super::model::{HeadInput, ModelConfig, ModelParams};
use crate::codec::{Decoder, Encoder, MAX_LEN};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"BGCM";
const VERSION: u32 = 1;

pub fn write_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    params.check()?;
    let mut e = Encoder::new(BufWriter::new(File::create(path)?));
    e.header(MAGIC, VERSION)?;
    let c = &params.config;
    e.len(c.input_dim)?;
    e.len(c.hidden)?;
    e.len(c.layers)?;
    e.len(c.num_classes)?;
    e.u8(c.weighted_adjacency as u8)?;
    e.u8(match c.head_input {
        HeadInput::Pooled => 0,
        HeadInput::Projection => 1,
    })?;
    let names = params.names();
    e.len(params.tensors.len())?;
    for (name, t) in names.iter().zip(&params.tensors) {
        e.str(name)?;
        e.len(t.shape().len())?;
        for &d in t.shape() {
            e.len(d)?;
        }
        e.f64_slice(t.data())?;
    }
    e.finish()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<ModelParams> {
    let shown = path.display().to_string();
    let mut d = Decoder::new(BufReader::new(File::open(path)?), shown);
    d.header(MAGIC, VERSION)?;
    let config = ModelConfig {
        input_dim: d.len(MAX_LEN)?,
        hidden: d.len(MAX_LEN)?,
        layers: d.len(1024)?,
        num_classes: d.len(MAX_LEN)?,
        weighted_adjacency: d.u8()? != 0,
        head_input: match d.u8()? {
            0 => HeadInput::Pooled,
            1 => HeadInput::Projection,
            x => return Err(d.err(format!("unknown head input tag {x}"))),
        },
    };
    config.validate()?;
    let expected = ModelParams::expected_shapes(&config);
    let count = d.len(expected.len())?;
    if count != expected.len() {
        return Err(d.err(format!("{count} tensors, expected {}", expected.len())));
    }
    let names = ModelParams {
        config: config.clone(),
        tensors: vec![],
    }
    .names();
    let mut tensors = Vec::with_capacity(count);
    for (name, shape) in names.iter().zip(&expected) {
        let got = d.str()?;
        if &got != name {
            return Err(d.err(format!("tensor {got:?} where {name:?} expected")));
        }
        let rank = d.len(8)?;
        let dims = (0..rank).map(|_| d.len(MAX_LEN)).collect::<Result<Vec<_>>>()?;
        if &dims != shape {
            return Err(d.err(format!("{name} has shape {dims:?}, expected {shape:?}")));
        }
        let data = d.f64_vec(MAX_LEN)?;
        tensors
            .push(Tensor::from_vec(&dims, data).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?);
    }
    d.expect_eof()?;
    let params = ModelParams { config, tensors };
    params.check()?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let mut cfg = ModelConfig::new(7);
        cfg.hidden = 5;
        cfg.head_input = HeadInput::Projection;
        let mut p = ModelParams::init(cfg, 3).unwrap();
        p.tensors[1].data_mut()[0] = -0.0;
        p.tensors[3].data_mut()[2] = f64::MIN_POSITIVE / 2.0;
        write_checkpoint(&path, &p).unwrap();
        let q = read_checkpoint(&path).unwrap();
        assert_eq!(p.config, q.config);
        for (a, b) in p.tensors.iter().zip(&q.tensors) {
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let p = ModelParams::init(ModelConfig::new(3), 1).unwrap();
        write_checkpoint(&path, &p).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_checkpoint(&path).is_err());
    }
}
