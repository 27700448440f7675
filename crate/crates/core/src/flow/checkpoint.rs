//! Checkpoint format: a UTF-8 header of `key value` lines terminated by `end`,
//! followed by a little-endian `f64` payload. The payload holds every layer's
//! weight then bias, the adapter's down/up factors (if present), and the
//! normalizer mean then std.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::model::{FlowDims, FlowModel, Normalizer, TIME_FEATURES};
use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::numerics::{Activation, DenseMatrix, Layer, LoraAdapter, LoraLayer, MlpParams};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "gdpo-checkpoint";

fn push_all(out: &mut Vec<f64>, xs: &[f64]) {
    out.extend_from_slice(xs);
}

fn backbone_values(backbone: &MlpParams) -> Vec<f64> {
    let mut v = Vec::new();
    for layer in &backbone.layers {
        push_all(&mut v, layer.weight.data());
        push_all(&mut v, &layer.bias);
    }
    v
}

fn to_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 over the backbone's weights and biases in payload order.
pub fn backbone_checksum(backbone: &MlpParams) -> String {
    sha_hex(&to_bytes(&backbone_values(backbone)))
}

/// Serializes a model to bytes.
pub fn encode_checkpoint(model: &FlowModel) -> Vec<u8> {
    let mut values = backbone_values(&model.backbone);
    if let Some(a) = &model.adapter {
        for l in &a.layers {
            push_all(&mut values, l.down.data());
            push_all(&mut values, l.up.data());
        }
    }
    push_all(&mut values, &model.normalizer.mean);
    push_all(&mut values, &model.normalizer.std);
    let payload = to_bytes(&values);

    let mut h = String::new();
    let mut line = |s: String| {
        h.push_str(&s);
        h.push('\n');
    };
    line(format!("{MAGIC} {CHECKPOINT_VERSION}"));
    line(format!("frames {}", model.dims.frames));
    line(format!("dims {}", model.dims.dims));
    line(format!("categories {}", model.dims.categories));
    line(format!("frame_step {:?}", model.frame_step));
    line(format!("pos_bound {:?}", model.pos_bound));
    line(format!("vel_bound {:?}", model.vel_bound));
    line(format!("time_features {TIME_FEATURES}"));
    line(format!("activation {}", model.backbone.activation.name()));
    line(format!("seed {}", model.seed));
    line(format!("layers {}", model.backbone.layers.len()));
    for l in &model.backbone.layers {
        line(format!("layer {} {}", l.out_dim(), l.in_dim()));
    }
    match &model.adapter {
        Some(a) => line(format!("adapter {} {:?} {}", a.rank, a.scale, a.enabled)),
        None => line("adapter none".to_string()),
    }
    line(format!("normalizer {}", model.normalizer.mean.len()));
    line(format!("payload {}", values.len()));
    line(format!("sha256 {}", sha_hex(&payload)));
    line("end".to_string());

    let mut out = h.into_bytes();
    out.extend_from_slice(&payload);
    out
}

struct Header<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
}

fn bad(line: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        line,
        msg: msg.into(),
    }
}

impl<'a> Header<'a> {
    /// Next line, which must start with `key`; returns the remaining fields.
    fn field(&mut self, key: &str) -> Result<(usize, Vec<&'a str>)> {
        let (i, text) = self.lines.next().ok_or_else(|| bad(0, format!("missing `{key}`")))?;
        let mut parts = text.split_whitespace();
        let lineno = i + 1;
        if parts.next() != Some(key) {
            return Err(bad(lineno, format!("expected `{key}`, found `{text}`")));
        }
        Ok((lineno, parts.collect()))
    }

    fn value<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let (line, parts) = self.field(key)?;
        match parts.as_slice() {
            [v] => parse(line, key, v),
            _ => Err(bad(line, format!("`{key}` takes one value"))),
        }
    }
}

fn parse<T: std::str::FromStr>(line: usize, key: &str, s: &str) -> Result<T> {
    s.parse().map_err(|_| bad(line, format!("invalid value `{s}` for `{key}`")))
}

/// Parses bytes produced by [`encode_checkpoint`]. `origin` names the source
/// in checksum errors.
pub fn decode_checkpoint(bytes: &[u8], origin: &Path) -> Result<FlowModel> {
    const END: &[u8] = b"\nend\n";
    let split = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| bad(0, "header terminator `end` not found"))?
        + END.len();
    let header = std::str::from_utf8(&bytes[..split]).map_err(|_| bad(0, "header is not UTF-8"))?;
    let payload = &bytes[split..];
    let mut h = Header {
        lines: header.lines().enumerate(),
    };

    let version: u32 = h.value(MAGIC)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(1, format!("unsupported version {version}")));
    }
    let dims = FlowDims {
        frames: h.value("frames")?,
        dims: h.value("dims")?,
        categories: h.value("categories")?,
    };
    let frame_step: f64 = h.value("frame_step")?;
    let pos_bound: f64 = h.value("pos_bound")?;
    let vel_bound: f64 = h.value("vel_bound")?;
    let tf: usize = h.value("time_features")?;
    if tf != TIME_FEATURES {
        return Err(bad(8, format!("time feature count {tf} differs from {TIME_FEATURES}")));
    }
    let act: String = h.value("activation")?;
    let activation = Activation::parse(&act)?;
    let seed: u64 = h.value("seed")?;
    let n_layers: usize = h.value("layers")?;
    let mut shapes = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let (line, p) = h.field("layer")?;
        if p.len() != 2 {
            return Err(bad(line, "`layer` takes output and input sizes"));
        }
        shapes.push((parse::<usize>(line, "layer", p[0])?, parse::<usize>(line, "layer", p[1])?));
    }
    let (line, p) = h.field("adapter")?;
    let adapter_meta = match p.as_slice() {
        ["none"] => None,
        [r, s, e] => Some((
            parse::<usize>(line, "adapter", r)?,
            parse::<f64>(line, "adapter", s)?,
            parse::<bool>(line, "adapter", e)?,
        )),
        _ => return Err(bad(line, "`adapter` takes `none` or rank, scale, enabled")),
    };
    let norm_len: usize = h.value("normalizer")?;
    let count: usize = h.value("payload")?;
    let (line, p) = h.field("sha256")?;
    let digest = match p.as_slice() {
        [d] => d.to_string(),
        _ => return Err(bad(line, "`sha256` takes one value")),
    };
    h.field("end")?;

    if payload.len() != count * 8 {
        return Err(bad(0, format!("payload has {} bytes, header declares {count} values", payload.len())));
    }
    if sha_hex(payload) != digest {
        return Err(Error::Checksum {
            path: origin.to_path_buf(),
        });
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();

    let mut expected = norm_len * 2;
    for &(o, i) in &shapes {
        expected += o * i + o;
        if let Some((r, _, _)) = adapter_meta {
            expected += r * i + o * r;
        }
    }
    if expected != count {
        return Err(bad(0, format!("layer shapes imply {expected} values, payload has {count}")));
    }

    let mut cursor = values.into_iter();
    let mut take = |n: usize| -> Vec<f64> { cursor.by_ref().take(n).collect() };
    let mut layers = Vec::with_capacity(n_layers);
    for &(o, i) in &shapes {
        let weight = DenseMatrix::from_vec(o, i, take(o * i))?;
        layers.push(Layer { weight, bias: take(o) });
    }
    let backbone = MlpParams::new(layers, activation)?;
    let adapter = match adapter_meta {
        Some((rank, scale, enabled)) => {
            let mut ls = Vec::with_capacity(n_layers);
            for &(o, i) in &shapes {
                let down = DenseMatrix::from_vec(rank, i, take(rank * i))?;
                let up = DenseMatrix::from_vec(o, rank, take(o * rank))?;
                ls.push(LoraLayer { down, up });
            }
            let a = LoraAdapter {
                layers: ls,
                rank,
                scale,
                enabled,
            };
            a.check_host(&backbone)?;
            Some(a)
        }
        None => None,
    };
    let normalizer = Normalizer {
        mean: take(norm_len),
        std: take(norm_len),
    };
    if backbone.in_dim() != dims.input_len() || backbone.out_dim() != dims.flow_len() || norm_len != dims.flow_len() {
        return Err(bad(0, "network shapes do not match the declared clip dimensions"));
    }
    Ok(FlowModel {
        dims,
        backbone,
        adapter,
        normalizer,
        frame_step,
        pos_bound,
        vel_bound,
        seed,
    })
}

pub fn write_checkpoint(model: &FlowModel, path: &Path) -> Result<()> {
    atomic_write(path, &encode_checkpoint(model))
}

pub fn read_checkpoint(path: &Path) -> Result<FlowModel> {
    let bytes = fs::read(path)?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::ModelConfig;
    use crate::physics::WorldConfig;
    use crate::rng::seeded;

    fn model(adapter: bool) -> FlowModel {
        let cfg = ModelConfig::default();
        let mut m = FlowModel::new(&WorldConfig::default(), &cfg, Normalizer::identity(32), 9, &mut seeded(3)).unwrap();
        m.normalizer.mean[3] = 0.125;
        m.normalizer.std[5] = 1.0 / 3.0;
        if adapter {
            m.attach_adapter(&cfg, &mut seeded(4)).unwrap();
            m.adapter.as_mut().unwrap().layers[1].up.set(2, 1, -0.1);
        }
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for with_adapter in [false, true] {
            let m = model(with_adapter);
            let back = decode_checkpoint(&encode_checkpoint(&m), Path::new("mem")).unwrap();
            assert_eq!(back, m);
            assert_eq!(backbone_checksum(&back.backbone), backbone_checksum(&m.backbone));
        }
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let mut bytes = encode_checkpoint(&model(true));
        let n = bytes.len();
        bytes[n - 3] ^= 0x40;
        assert!(matches!(
            decode_checkpoint(&bytes, Path::new("x")),
            Err(Error::Checksum { .. })
        ));
    }

    #[test]
    fn truncated_or_garbled_header_is_format_error() {
        let bytes = encode_checkpoint(&model(false));
        assert!(matches!(decode_checkpoint(&bytes[..40], Path::new("x")), Err(Error::Format { .. })));
        let text = String::from_utf8_lossy(&bytes).replacen("frames 16", "frames x", 1);
        assert!(matches!(
            decode_checkpoint(text.as_bytes(), Path::new("x")),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn checksum_tracks_backbone_only() {
        let a = model(false);
        let mut b = model(true);
        assert_eq!(backbone_checksum(&a.backbone), backbone_checksum(&b.backbone));
        b.backbone.layers[0].bias[0] += 1e-12;
        assert_ne!(backbone_checksum(&a.backbone), backbone_checksum(&b.backbone));
    }
}
