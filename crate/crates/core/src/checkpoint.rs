//! `DNFC` checkpoints: config echo, named parameter tensors, rigid frame,
//! anchors and (after editing) the composition network. Little-endian.

use crate::config::Config;
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::pac::AcrNet;
use crate::scene::SceneModel;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"DNFC";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Scene = 1,
    Edit = 2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config: Config,
    pub model: SceneModel,
    pub rigid_frame: usize,
    pub anchors: Vec<usize>,
    pub acr: Option<AcrNet>,
}

fn mlp_names(prefix: &str, m: &Mlp) -> Vec<String> {
    let mut out = Vec::new();
    for (i, l) in m.layers.iter().enumerate() {
        out.push(format!("{prefix}.{i}.weight"));
        out.push(format!("{prefix}.{i}.bias"));
        if l.lip_c.is_some() {
            out.push(format!("{prefix}.{i}.lip_c"));
        }
    }
    out
}

fn model_names(model: &SceneModel) -> Vec<String> {
    let mut names: Vec<String> = model.networks().iter().flat_map(|(n, m)| mlp_names(n, m)).collect();
    names.push("latents".into());
    names
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len());
        self.0.extend_from_slice(b);
    }

    fn tensor(&mut self, name: &str, t: &Tensor) {
        self.bytes(name.as_bytes());
        self.u32(t.shape().len());
        for &d in t.shape() {
            self.u32(d);
        }
        for v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn bytes(&mut self, what: &'static str) -> Result<&'a [u8]> {
        let n = self.u32(what)?;
        self.take(n, what)
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = String::from_utf8(self.bytes("tensor name")?.to_vec())
            .map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
        let nd = self.u32("tensor shape")?;
        let shape = (0..nd).map(|_| self.u32("tensor shape")).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(8).ok_or(Error::Truncated("tensor data"))?, "tensor data")?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION as usize);
        w.0.push(self.stage as u8);
        w.bytes(self.config.to_text().as_bytes());
        w.u32(self.model.latents.len());
        let names = model_names(&self.model);
        let params = self.model.params();
        w.u32(names.len());
        for (n, p) in names.iter().zip(params) {
            w.tensor(n, p);
        }
        w.u32(self.rigid_frame);
        w.u32(self.anchors.len());
        for &a in &self.anchors {
            w.u32(a);
        }
        match &self.acr {
            Some(net) => {
                w.0.push(1);
                let names = mlp_names("acr", &net.mlp);
                for (n, p) in names.iter().zip(net.params()) {
                    w.tensor(n, p);
                }
            }
            None => w.0.push(0),
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32("version")? as u32;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                supported: VERSION,
            });
        }
        let stage = match r.take(1, "stage")?[0] {
            1 => Stage::Scene,
            2 => Stage::Edit,
            s => return Err(Error::Format(format!("unknown stage tag {s}"))),
        };
        let text = std::str::from_utf8(r.bytes("config")?).map_err(|_| Error::Format("config echo is not utf-8".into()))?;
        let config = Config::parse(text)?;
        let frames = r.u32("frame count")?;
        // shapes come from the config; values are overwritten below
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = SceneModel::new(config.scene.model.clone(), frames, &mut rng);
        let names = model_names(&model);
        let count = r.u32("tensor count")?;
        if count != names.len() {
            return Err(Error::Format(format!("checkpoint has {count} tensors, config implies {}", names.len())));
        }
        for (want, slot) in names.iter().zip(model.params_mut()) {
            let (name, t) = r.tensor()?;
            if &name != want || t.shape() != slot.shape() {
                return Err(Error::Format(format!("tensor '{name}' {:?} does not match '{want}' {:?}", t.shape(), slot.shape())));
            }
            *slot = t;
        }
        let rigid_frame = r.u32("rigid frame")?;
        let k = r.u32("anchors")?;
        let anchors = (0..k).map(|_| r.u32("anchors")).collect::<Result<Vec<_>>>()?;
        let acr = match r.take(1, "acr flag")?[0] {
            0 => None,
            1 => {
                let e = &config.edit;
                let mut net = AcrNet::new(config.scene.model.d_w, e.pac_width, e.pac_depth, e.pe_pac, &mut rng);
                let names = mlp_names("acr", &net.mlp);
                for (want, slot) in names.iter().zip(net.params_mut()) {
                    let (name, t) = r.tensor()?;
                    if &name != want || t.shape() != slot.shape() {
                        return Err(Error::Format(format!("tensor '{name}' does not match '{want}'")));
                    }
                    *slot = t;
                }
                Some(net)
            }
            f => return Err(Error::Format(format!("bad acr flag {f}"))),
        };
        if r.pos != buf.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        if rigid_frame >= frames || anchors.iter().any(|&a| a >= frames) {
            return Err(Error::Format("frame index outside the latent table".into()));
        }
        Ok(Checkpoint {
            stage,
            config,
            model,
            rigid_frame,
            anchors,
            acr,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Checkpoint {
        let mut config = Config::default();
        config
            .apply_text("deform_width = 6\ndeform_depth = 1\nslice_width = 6\nslice_depth = 1\ntemplate_width = 8\ntemplate_depth = 2\ncolor_width = 4\npac_width = 5\npac_depth = 1")
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = SceneModel::new(config.scene.model.clone(), 6, &mut rng);
        let acr = AcrNet::new(config.scene.model.d_w, 5, 1, config.edit.pe_pac, &mut rng);
        Checkpoint {
            stage: Stage::Edit,
            config,
            model,
            rigid_frame: 1,
            anchors: vec![2, 4],
            acr: Some(acr),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = small();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = small().to_bytes();
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        let mut newer = bytes.clone();
        newer[4..8].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&newer), Err(Error::Version { found: 9, .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Truncated(_))));
    }
}
