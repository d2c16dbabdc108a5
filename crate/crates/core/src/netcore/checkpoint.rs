//! Checkpoints: a text manifest (name → dtype/shape/offset) plus one raw
//! little-endian tensor blob holding the student and teacher sets.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::network::{NetConfig, ParamSet};
use super::tensor::Tensor;
use crate::error::{NtlError, Result};

pub const MANIFEST_FILE: &str = "checkpoint.manifest";
pub const BLOB_FILE: &str = "checkpoint.bin";
const HEADER: &str = "# ntl checkpoint v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: NetConfig,
    pub student: ParamSet<f32>,
    pub teacher: ParamSet<f32>,
    pub step: u64,
}

fn config_line(c: &NetConfig) -> String {
    let widths: Vec<String> = c.widths.iter().map(usize::to_string).collect();
    format!(
        "config input_size={} channels={} widths={} roi_bins={} noise_sigma={} dropout={} lrelu_alpha={} bn_momentum={} bn_eps={} classes={} roi_pooling={}",
        c.input_size,
        c.channels,
        widths.join(","),
        c.roi_bins,
        c.noise_sigma,
        c.dropout,
        c.lrelu_alpha,
        c.bn_momentum,
        c.bn_eps,
        c.classes,
        c.roi_pooling
    )
}

fn parse_config(line: &str) -> Result<NetConfig> {
    let bad = |m: String| NtlError::Format(format!("checkpoint config: {m}"));
    let mut c = NetConfig::default();
    for kv in line.split_whitespace().skip(1) {
        let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("bad entry `{kv}`")))?;
        let num = |v: &str| v.parse::<f64>().map_err(|_| bad(format!("bad number `{v}`")));
        let int = |v: &str| v.parse::<usize>().map_err(|_| bad(format!("bad integer `{v}`")));
        match k {
            "input_size" => c.input_size = int(v)?,
            "channels" => c.channels = int(v)?,
            "widths" => {
                let ws: Vec<usize> = v.split(',').map(int).collect::<Result<_>>()?;
                c.widths = ws.try_into().map_err(|_| bad("need nine widths".into()))?;
            }
            "roi_bins" => c.roi_bins = int(v)?,
            "noise_sigma" => c.noise_sigma = num(v)?,
            "dropout" => c.dropout = num(v)?,
            "lrelu_alpha" => c.lrelu_alpha = num(v)?,
            "bn_momentum" => c.bn_momentum = num(v)?,
            "bn_eps" => c.bn_eps = num(v)?,
            "classes" => c.classes = int(v)?,
            "roi_pooling" => c.roi_pooling = v == "true",
            other => return Err(bad(format!("unknown key `{other}`"))),
        }
    }
    Ok(c)
}

impl Checkpoint {
    fn entries(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = Vec::new();
        for (role, set) in [("student", &self.student), ("teacher", &self.teacher)] {
            for (kind, map) in [("param", &set.params), ("buffer", &set.buffers)] {
                for (name, t) in map {
                    out.push((format!("{role}/{kind}/{name}"), t));
                }
            }
        }
        out
    }

    /// Manifest text and blob bytes.
    pub fn to_bytes(&self) -> (String, Vec<u8>) {
        let mut manifest = format!("{HEADER}\n{}\nstep {}\n", config_line(&self.net), self.step);
        let mut blob = Vec::new();
        for (name, t) in self.entries() {
            let shape: Vec<String> = t.shape.iter().map(usize::to_string).collect();
            let _ = writeln!(manifest, "tensor {name} f32 {} {} {}", shape.join(","), blob.len(), t.len() * 4);
            for v in &t.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        (manifest, blob)
    }

    pub fn from_bytes(manifest: &str, blob: &[u8]) -> Result<Self> {
        let bad = |m: String| NtlError::Format(format!("checkpoint manifest: {m}"));
        let mut lines = manifest.lines();
        if lines.next() != Some(HEADER) {
            return Err(bad("missing header".into()));
        }
        let net = parse_config(lines.next().ok_or_else(|| bad("missing config".into()))?)?;
        let step: u64 = lines
            .next()
            .and_then(|l| l.strip_prefix("step "))
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| bad("missing step".into()))?;
        let mut sets: BTreeMap<&str, ParamSet<f32>> = BTreeMap::new();
        for role in ["student", "teacher"] {
            sets.insert(role, ParamSet { params: BTreeMap::new(), buffers: BTreeMap::new(), step });
        }
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [tag, name, dtype, shape, offset, len] = parts[..] else {
                return Err(bad(format!("bad line `{line}`")));
            };
            if tag != "tensor" || dtype != "f32" {
                return Err(bad(format!("unsupported entry `{line}`")));
            }
            let shape: Vec<usize> = if shape.is_empty() {
                Vec::new()
            } else {
                shape.split(',').map(|s| s.parse().map_err(|_| bad(format!("bad shape in `{line}`")))).collect::<Result<_>>()?
            };
            let (offset, len): (usize, usize) = (
                offset.parse().map_err(|_| bad(format!("bad offset in `{line}`")))?,
                len.parse().map_err(|_| bad(format!("bad length in `{line}`")))?,
            );
            let bytes = blob.get(offset..offset + len).ok_or_else(|| bad(format!("`{name}` past end of blob")))?;
            let data: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            let tensor = Tensor::from_vec(&shape, data)?;
            let mut it = name.splitn(3, '/');
            let (role, kind, key) = (it.next(), it.next(), it.next());
            let set = role.and_then(|r| sets.get_mut(r)).ok_or_else(|| bad(format!("bad tensor name `{name}`")))?;
            match (kind, key) {
                (Some("param"), Some(k)) => set.params.insert(k.to_string(), tensor),
                (Some("buffer"), Some(k)) => set.buffers.insert(k.to_string(), tensor),
                _ => return Err(bad(format!("bad tensor name `{name}`"))),
            };
        }
        let teacher = sets.remove("teacher").unwrap();
        let student = sets.remove("student").unwrap();
        student.check_compatible(&teacher)?;
        Ok(Checkpoint { net, student, teacher, step })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| NtlError::io(dir, e))?;
        let (manifest, blob) = self.to_bytes();
        let (m, b) = (dir.join(MANIFEST_FILE), dir.join(BLOB_FILE));
        fs::write(&m, manifest).map_err(|e| NtlError::io(&m, e))?;
        fs::write(&b, blob).map_err(|e| NtlError::io(&b, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (m, b): (PathBuf, PathBuf) = (dir.join(MANIFEST_FILE), dir.join(BLOB_FILE));
        let manifest = fs::read_to_string(&m).map_err(|e| NtlError::io(&m, e))?;
        let blob = fs::read(&b).map_err(|e| NtlError::io(&b, e))?;
        Checkpoint::from_bytes(&manifest, &blob)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::Network;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_bit_exact() {
        let cfg = NetConfig { input_size: 12, roi_pooling: false, ..NetConfig::default() }.scaled_widths(8);
        let net = Network::new(cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let student = net.init_params(&mut rng);
        let mut teacher = net.init_params(&mut rng);
        teacher.step = 17;
        let ck = Checkpoint { net: cfg, student, teacher, step: 17 };
        let (m, b) = ck.to_bytes();
        assert!(m.starts_with(HEADER));
        let back = Checkpoint::from_bytes(&m, &b).unwrap();
        assert_eq!(back.student.params, ck.student.params);
        assert_eq!(back.teacher.buffers, ck.teacher.buffers);
        assert_eq!(back.net, ck.net);
        assert_eq!(back.step, 17);
        assert!(Checkpoint::from_bytes(&m, &b[..b.len() - 4]).is_err());
    }
}
