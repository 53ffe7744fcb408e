//! Directory checkpoints: a text manifest plus one little-endian `f32` blob.
//!
//! ```text
//! audiomosaic-checkpoint 1
//! step 2000
//! seed 7
//! norm -6.52 4.1
//! config model.depth = 4
//! tensor param/encoder.norm.weight 96 0 384
//! ```
//!
//! Tensor lines give the name, the shape joined by `x` (`-` for a scalar),
//! and the byte offset and length inside `tensors.bin`. The sampling state of
//! a run is fully determined by `seed` and `step`, since every random draw is
//! derived from the master seed and the step's epoch and item indices.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::model::ParamStore;
use crate::tensor::{Real, Tensor};
use crate::Error;

use super::{OptimState, TrainError};

pub const MANIFEST: &str = "manifest.txt";
pub const BLOB: &str = "tensors.bin";
const HEADER: &str = "audiomosaic-checkpoint 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub seed: u64,
    /// Log-Mel normalization `(mean, std)` used by the run.
    pub norm: (f64, f64),
    pub config: BTreeMap<String, String>,
    pub arrays: Vec<Array>,
}

fn bad(path: &Path, msg: impl Into<String>) -> Error {
    TrainError::Checkpoint {
        path: path.display().to_string(),
        msg: msg.into(),
    }
    .into()
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.arrays.push(Array {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        });
    }

    pub fn array(&self, name: &str) -> Option<&Array> {
        self.arrays.iter().find(|a| a.name == name)
    }

    /// Parameters, batch-norm buffers and, when given, optimizer moments.
    pub fn from_training<T: Real>(store: &ParamStore<T>, optim: Option<&OptimState<T>>) -> Self {
        let mut ck = Checkpoint::default();
        let f32s = |t: &Tensor<T>| t.data().iter().map(|x| x.as_f64() as f32).collect();
        for p in store.params() {
            ck.push(format!("param/{}", p.name), p.value.shape(), f32s(&p.value));
        }
        for (name, b) in store.buffers() {
            ck.push(format!("buffer/{name}"), &[b.len()], b.iter().map(|&x| x as f32).collect());
        }
        if let Some(o) = optim {
            ck.step = o.step;
            for (p, (m, v)) in store.params().iter().zip(o.m.iter().zip(&o.v)) {
                ck.push(format!("adam_m/{}", p.name), m.shape(), f32s(m));
                ck.push(format!("adam_v/{}", p.name), v.shape(), f32s(v));
            }
        }
        ck
    }

    /// Overwrites every parameter and buffer of `store` whose name appears in
    /// the checkpoint; every parameter of `store` under `prefix` must be present.
    pub fn restore_params<T: Real>(&self, store: &mut ParamStore<T>, prefix: &str) -> Result<(), TrainError> {
        for p in store.params_mut() {
            if !p.name.starts_with(prefix) {
                continue;
            }
            let a = self
                .array(&format!("param/{}", p.name))
                .ok_or_else(|| TrainError::Mismatch(format!("checkpoint lacks parameter {}", p.name)))?;
            if a.shape != p.value.shape() {
                return Err(TrainError::Mismatch(format!(
                    "parameter {} has shape {:?} in the checkpoint but {:?} in the model",
                    p.name,
                    a.shape,
                    p.value.shape()
                )));
            }
            p.value = Tensor::from_fn(&a.shape, |i| T::of(a.data[i] as f64));
        }
        let names: Vec<String> = store.buffers().iter().map(|(n, _)| n.clone()).collect();
        for name in names.iter().filter(|n| n.starts_with(prefix)) {
            if let Some(a) = self.array(&format!("buffer/{name}")) {
                let buf = store.buffer_mut(name).expect("listed buffer");
                if a.data.len() != buf.len() {
                    return Err(TrainError::Mismatch(format!("buffer {name} has the wrong length")));
                }
                *buf = a.data.iter().map(|&x| x as f64).collect();
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), Error> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let mut text = format!("{HEADER}\nstep {}\nseed {}\nnorm {} {}\n", self.step, self.seed, self.norm.0, self.norm.1);
        for (k, v) in &self.config {
            writeln!(text, "config {k} = {v}").expect("string write");
        }
        let mut blob = Vec::with_capacity(self.arrays.iter().map(|a| 4 * a.data.len()).sum());
        for a in &self.arrays {
            if a.name.contains(char::is_whitespace) {
                return Err(bad(dir, format!("tensor name {:?} contains whitespace", a.name)));
            }
            let shape = if a.shape.is_empty() {
                "-".to_string()
            } else {
                a.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
            };
            writeln!(text, "tensor {} {shape} {} {}", a.name, blob.len(), 4 * a.data.len()).expect("string write");
            for x in &a.data {
                blob.extend_from_slice(&x.to_le_bytes());
            }
        }
        let (mp, bp) = (dir.join(MANIFEST), dir.join(BLOB));
        fs::write(&mp, text).map_err(Error::io(&mp))?;
        fs::write(&bp, blob).map_err(Error::io(&bp))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, Error> {
        let dir = dir.as_ref();
        let (mp, bp) = (dir.join(MANIFEST), dir.join(BLOB));
        let text = fs::read_to_string(&mp).map_err(Error::io(&mp))?;
        let blob = fs::read(&bp).map_err(Error::io(&bp))?;
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(bad(&mp, "missing checkpoint header"));
        }
        let mut ck = Checkpoint::default();
        let mut cursor = 0usize;
        for (n, line) in lines.enumerate() {
            let lineno = n + 2;
            let (tag, rest) = line.split_once(' ').unwrap_or((line, ""));
            let parse_err = || bad(&mp, format!("line {lineno}: cannot parse {line:?}"));
            match tag {
                "step" => ck.step = rest.parse().map_err(|_| parse_err())?,
                "seed" => ck.seed = rest.parse().map_err(|_| parse_err())?,
                "norm" => {
                    let (m, s) = rest.split_once(' ').ok_or_else(parse_err)?;
                    ck.norm = (m.parse().map_err(|_| parse_err())?, s.parse().map_err(|_| parse_err())?);
                }
                "config" => {
                    let (k, v) = rest.split_once(" = ").ok_or_else(parse_err)?;
                    ck.config.insert(k.to_string(), v.to_string());
                }
                "tensor" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    if f.len() != 4 {
                        return Err(parse_err());
                    }
                    let shape: Vec<usize> = if f[1] == "-" {
                        Vec::new()
                    } else {
                        f[1].split('x').map(|d| d.parse()).collect::<Result<_, _>>().map_err(|_| parse_err())?
                    };
                    let offset: usize = f[2].parse().map_err(|_| parse_err())?;
                    let len: usize = f[3].parse().map_err(|_| parse_err())?;
                    if offset != cursor || len != 4 * shape.iter().product::<usize>() || offset + len > blob.len() {
                        return Err(bad(&mp, format!("line {lineno}: tensor {} does not tile the blob", f[0])));
                    }
                    let data = blob[offset..offset + len]
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    ck.arrays.push(Array {
                        name: f[0].to_string(),
                        shape,
                        data,
                    });
                    cursor += len;
                }
                "" => {}
                _ => return Err(parse_err()),
            }
        }
        if cursor != blob.len() {
            return Err(bad(&bp, format!("{} trailing bytes not described by the manifest", blob.len() - cursor)));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_pretrain_model, EncoderConfig, ProjectionConfig};
    use crate::train::AdamConfig;

    fn tiny() -> (EncoderConfig, ProjectionConfig) {
        (
            EncoderConfig {
                depth: 1,
                dim: 8,
                heads: 2,
                mlp_ratio: 2,
                patch: (4, 4),
            },
            ProjectionConfig { hidden: 6, out: 4 },
        )
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let (e, p) = tiny();
        let store = init_pretrain_model::<f32>(&e, &p, 3).unwrap();
        let mut opt = OptimState::new(&store, AdamConfig::default());
        opt.step = 12;
        opt.m[0].data_mut()[0] = 0.125;
        let mut ck = Checkpoint::from_training(&store, Some(&opt));
        ck.seed = 9;
        ck.norm = (-6.25, 3.0000000000000004);
        ck.config.insert("run.out".into(), "some dir/with spaces".into());
        ck.push("scalar", &[], vec![1.5]);

        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        ck.save(&a).unwrap();
        let back = Checkpoint::load(&a).unwrap();
        assert_eq!(back, ck);
        back.save(&b).unwrap();
        for f in [MANIFEST, BLOB] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
        }

        let mut fresh = init_pretrain_model::<f32>(&e, &p, 4).unwrap();
        back.restore_params(&mut fresh, "").unwrap();
        assert_eq!(fresh.params(), store.params());
    }

    #[test]
    fn corrupt_blobs_are_rejected() {
        let mut ck = Checkpoint::default();
        ck.push("x", &[3], vec![1.0, 2.0, 3.0]);
        let dir = tempfile::tempdir().unwrap();
        ck.save(dir.path()).unwrap();
        let bp = dir.path().join(BLOB);
        let mut blob = fs::read(&bp).unwrap();
        blob.push(0);
        fs::write(&bp, &blob).unwrap();
        assert!(Checkpoint::load(dir.path()).is_err());
        blob.truncate(8);
        fs::write(&bp, &blob).unwrap();
        assert!(Checkpoint::load(dir.path()).is_err());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let (e, p) = tiny();
        let store = init_pretrain_model::<f32>(&e, &p, 3).unwrap();
        let ck = Checkpoint::from_training(&store, None);
        let wider = EncoderConfig { dim: 12, ..e };
        let mut other = init_pretrain_model::<f32>(&wider, &p, 3).unwrap();
        assert!(matches!(ck.restore_params(&mut other, "encoder."), Err(TrainError::Mismatch(_))));
    }
}
