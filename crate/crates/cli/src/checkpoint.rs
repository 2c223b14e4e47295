//! Binary checkpoints: magic, u32 format version, u64 payload length, the
//! payload, then the CRC32 of the payload. All integers are little-endian
//! and every f64 is stored by its bit pattern, so a load/save cycle
//! reproduces the file byte for byte.

use std::fs;
use std::io::{self, Cursor};
use std::path::Path;

use protomotif::fsutil::write_atomic;
use protomotif::model::{LinearHead, Model, ModelConfig, PrototypeBank, Provenance};
use protomotif::preprocess::{ChannelStats, PcaModel, Preprocessor};
use protomotif::tensor::{read_ptn, write_ptn, Tensor};
use protomotif::train::{Adam, Best, EpochRecord, PushEntry, PushReport, TrainState};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"PMOTCKPT";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint is truncated: {available} of {needed} bytes present")]
    Truncated { needed: usize, available: usize },
    #[error("checkpoint CRC mismatch: stored {stored:08x}, computed {computed:08x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("malformed checkpoint payload: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Effective run configuration (TOML) that produced this state.
    pub config: String,
    pub preprocessor: Option<Preprocessor>,
    /// Model, optimizer moments, best-so-far model, records, push history
    /// and the (seed, next epoch) pair that determines all remaining
    /// randomness.
    pub state: TrainState,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::default();
        enc.str(&self.config);
        enc.opt(self.preprocessor.as_ref(), |e, p| e.preprocessor(p));
        enc.state(&self.state);
        let payload = enc.buf;
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let prefix = bytes.len().min(MAGIC.len());
        if bytes[..prefix] != MAGIC[..prefix] {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(CheckpointError::Truncated {
                needed: HEADER_LEN,
                available: bytes.len(),
            });
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let needed = usize::try_from(len)
            .ok()
            .and_then(|l| l.checked_add(HEADER_LEN + 4))
            .ok_or_else(|| CheckpointError::Malformed(format!("payload length {len} is not addressable")))?;
        if bytes.len() < needed {
            return Err(CheckpointError::Truncated {
                needed,
                available: bytes.len(),
            });
        }
        if bytes.len() > needed {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - needed)));
        }
        let payload = &bytes[HEADER_LEN..needed - 4];
        let stored = u32::from_le_bytes(bytes[needed - 4..].try_into().unwrap());
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(CheckpointError::CrcMismatch { stored, computed });
        }
        let mut dec = Decoder { buf: payload, pos: 0 };
        let config = dec.str()?;
        let preprocessor = dec.opt(|d| d.preprocessor())?;
        let state = dec.state()?;
        if dec.pos != payload.len() {
            return Err(CheckpointError::Malformed(format!("{} unread payload bytes", payload.len() - dec.pos)));
        }
        Ok(Checkpoint { config, preprocessor, state })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(write_atomic(path, &self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

#[derive(Default)]
struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_bits().to_le_bytes());
    }

    fn bool(&mut self, v: bool) {
        self.u8(v as u8);
    }

    fn str(&mut self, s: &str) {
        self.usize(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        v.iter().for_each(|&x| self.f64(x));
    }

    fn usizes(&mut self, v: &[usize]) {
        self.usize(v.len());
        v.iter().for_each(|&x| self.usize(x));
    }

    fn tensor(&mut self, t: &Tensor) {
        write_ptn(&mut self.buf, t).expect("writing to a Vec cannot fail");
    }

    fn tensors(&mut self, ts: &[Tensor]) {
        self.usize(ts.len());
        ts.iter().for_each(|t| self.tensor(t));
    }

    fn opt<T>(&mut self, v: Option<T>, f: impl FnOnce(&mut Self, T)) {
        match v {
            None => self.u8(0),
            Some(x) => {
                self.u8(1);
                f(self, x);
            }
        }
    }

    fn provenance(&mut self, p: &Provenance) {
        self.usize(p.sample);
        self.usize(p.row);
        self.usize(p.col);
        self.f64(p.distance_before);
    }

    fn model(&mut self, m: &Model) {
        self.str(&toml::to_string(&m.config).expect("model config serializes"));
        self.tensors(&m.layers);
        self.tensor(&m.prototypes.vectors);
        self.usizes(&m.prototypes.class_of);
        self.usize(m.prototypes.provenance.len());
        for p in &m.prototypes.provenance {
            self.opt(p.as_ref(), |e, p| e.provenance(p));
        }
        self.tensor(&m.head.weight);
        self.tensor(&m.head.bias);
    }

    fn adam(&mut self, a: &Adam) {
        self.f64(a.beta1);
        self.f64(a.beta2);
        self.f64(a.eps);
        self.u64(a.t);
        self.tensors(&a.m);
        self.tensors(&a.v);
    }

    fn state(&mut self, s: &TrainState) {
        self.u64(s.seed);
        self.usize(s.epoch);
        self.model(&s.model);
        self.adam(&s.optimizer);
        self.opt(s.best.as_ref(), |e, b| {
            e.usize(b.epoch);
            e.f64(b.val_accuracy);
            e.model(&b.model);
        });
        self.usize(s.records.len());
        for r in &s.records {
            self.usize(r.epoch);
            self.f64(r.train_loss);
            self.f64(r.train_accuracy);
            self.f64(r.val_loss);
            self.f64(r.val_accuracy);
            self.f64(r.lr);
            self.bool(r.pushed);
        }
        self.usize(s.pushes.len());
        for p in &s.pushes {
            self.opt(p.epoch, |e, x| e.usize(x));
            self.usize(p.entries.len());
            for entry in &p.entries {
                self.usize(entry.prototype);
                self.provenance(&entry.provenance);
            }
        }
    }

    fn preprocessor(&mut self, p: &Preprocessor) {
        self.f64s(&p.stats.clip);
        self.f64s(&p.stats.min);
        self.f64s(&p.stats.max);
        self.usize(p.stats.degenerate.len());
        p.stats.degenerate.iter().for_each(|&d| self.bool(d));
        self.f64s(&p.pca.mean);
        self.f64s(&p.pca.components);
        self.f64s(&p.pca.eigenvalues);
        self.f64(p.pca.total_variance);
        self.usize(p.pca.channels);
        self.usize(p.pca.k);
        self.f64s(&p.proj_min);
        self.f64s(&p.proj_max);
    }
}

struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Decoder<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CheckpointError::Malformed(format!("field of {n} bytes overruns the payload at offset {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| CheckpointError::Malformed(format!("count {v} is not addressable")))
    }

    /// A length prefix that cannot exceed the bytes left, given each item
    /// needs at least `min_item` bytes.
    fn len(&mut self, min_item: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(min_item) > self.buf.len() - self.pos {
            return Err(CheckpointError::Malformed(format!("length {n} exceeds the remaining payload")));
        }
        Ok(n)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(CheckpointError::Malformed(format!("invalid bool byte {b}"))),
        }
    }

    fn str(&mut self) -> Result<String> {
        let n = self.len(1)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| CheckpointError::Malformed(e.to_string()))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    fn usizes(&mut self) -> Result<Vec<usize>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.usize()).collect()
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let mut cur = Cursor::new(&self.buf[self.pos..]);
        let t = read_ptn(&mut cur).map_err(|e| CheckpointError::Malformed(format!("tensor at offset {}: {e}", self.pos)))?;
        self.pos += cur.position() as usize;
        Ok(t)
    }

    fn tensors(&mut self) -> Result<Vec<Tensor>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.tensor()).collect()
    }

    fn opt<T>(&mut self, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<Option<T>> {
        match self.u8()? {
            0 => Ok(None),
            1 => Ok(Some(f(self)?)),
            b => Err(CheckpointError::Malformed(format!("invalid option tag {b}"))),
        }
    }

    fn provenance(&mut self) -> Result<Provenance> {
        Ok(Provenance {
            sample: self.usize()?,
            row: self.usize()?,
            col: self.usize()?,
            distance_before: self.f64()?,
        })
    }

    fn model(&mut self) -> Result<Model> {
        let config: ModelConfig = toml::from_str(&self.str()?).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let layers = self.tensors()?;
        let vectors = self.tensor()?;
        let class_of = self.usizes()?;
        let n = self.len(1)?;
        let provenance = (0..n).map(|_| self.opt(|d| d.provenance())).collect::<Result<_>>()?;
        let weight = self.tensor()?;
        let bias = self.tensor()?;
        let model = Model {
            config,
            layers,
            prototypes: PrototypeBank {
                vectors,
                class_of,
                provenance,
            },
            head: LinearHead { weight, bias },
        };
        check_model(&model)?;
        Ok(model)
    }

    fn adam(&mut self) -> Result<Adam> {
        Ok(Adam {
            beta1: self.f64()?,
            beta2: self.f64()?,
            eps: self.f64()?,
            t: self.u64()?,
            m: self.tensors()?,
            v: self.tensors()?,
        })
    }

    fn state(&mut self) -> Result<TrainState> {
        let seed = self.u64()?;
        let epoch = self.usize()?;
        let model = self.model()?;
        let optimizer = self.adam()?;
        let best = self.opt(|d| {
            Ok(Best {
                epoch: d.usize()?,
                val_accuracy: d.f64()?,
                model: d.model()?,
            })
        })?;
        let n = self.len(49)?;
        let records = (0..n)
            .map(|_| {
                Ok(EpochRecord {
                    epoch: self.usize()?,
                    train_loss: self.f64()?,
                    train_accuracy: self.f64()?,
                    val_loss: self.f64()?,
                    val_accuracy: self.f64()?,
                    lr: self.f64()?,
                    pushed: self.bool()?,
                })
            })
            .collect::<Result<_>>()?;
        let n = self.len(9)?;
        let pushes = (0..n)
            .map(|_| {
                let epoch = self.opt(|d| d.usize())?;
                let k = self.len(40)?;
                let entries = (0..k)
                    .map(|_| {
                        Ok(PushEntry {
                            prototype: self.usize()?,
                            provenance: self.provenance()?,
                        })
                    })
                    .collect::<Result<_>>()?;
                Ok(PushReport { epoch, entries })
            })
            .collect::<Result<_>>()?;
        let params: Vec<&[usize]> = model.params().iter().map(|t| t.shape()).collect();
        let moments_fit = |ms: &[Tensor]| ms.len() == params.len() && ms.iter().zip(&params).all(|(m, p)| m.shape() == *p);
        if !moments_fit(&optimizer.m) || !moments_fit(&optimizer.v) {
            return Err(CheckpointError::Malformed("optimizer moments do not match the model parameters".into()));
        }
        Ok(TrainState {
            seed,
            epoch,
            model,
            optimizer,
            best,
            records,
            pushes,
        })
    }

    fn preprocessor(&mut self) -> Result<Preprocessor> {
        let clip = self.f64s()?;
        let min = self.f64s()?;
        let max = self.f64s()?;
        let n = self.len(1)?;
        let degenerate = (0..n).map(|_| self.bool()).collect::<Result<_>>()?;
        let pca = PcaModel {
            mean: self.f64s()?,
            components: self.f64s()?,
            eigenvalues: self.f64s()?,
            total_variance: self.f64()?,
            channels: self.usize()?,
            k: self.usize()?,
        };
        Ok(Preprocessor {
            stats: ChannelStats { clip, min, max, degenerate },
            pca,
            proj_min: self.f64s()?,
            proj_max: self.f64s()?,
        })
    }
}

fn check_model(m: &Model) -> Result<()> {
    let bad = |what: &str| Err(CheckpointError::Malformed(format!("model {what} is inconsistent with its config")));
    if m.config.validate().is_err() {
        return bad("config");
    }
    let c = &m.config;
    if m.layers.len() != c.channels.len() {
        return bad("layer count");
    }
    let mut cin = c.in_channels;
    for (k, &cout) in m.layers.iter().zip(&c.channels) {
        if k.shape() != [cout, cin, c.kernel, c.kernel] {
            return bad("kernel shape");
        }
        cin = cout;
    }
    let mp = c.n_prototypes();
    if m.prototypes.vectors.shape() != [mp, c.latent_depth(), c.prototype_height, c.prototype_width] {
        return bad("prototype shape");
    }
    if m.prototypes.class_of.len() != mp || m.prototypes.class_of.iter().any(|&k| k >= c.n_classes) {
        return bad("class map");
    }
    if m.prototypes.provenance.len() != mp {
        return bad("provenance");
    }
    if m.head.weight.shape() != [c.n_classes, mp] || m.head.bias.shape() != [c.n_classes] {
        return bad("head shape");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use protomotif::synthgen::{generate_dataset, SynthConfig};

    fn sample_checkpoint() -> Checkpoint {
        let data = generate_dataset(
            &SynthConfig {
                n_samples: 10,
                image_size: 32,
                neutral_count_min: 1,
                neutral_count_max: 2,
                ..SynthConfig::default()
            },
            3,
        )
        .unwrap();
        let model = Model::new(
            ModelConfig {
                image_size: 32,
                ..ModelConfig::default()
            },
            3,
        )
        .unwrap();
        let mut state = TrainState::start(model, &data, 3).unwrap();
        state.best = Some(Best {
            epoch: 0,
            val_accuracy: 0.5,
            model: state.model.clone(),
        });
        state.records.push(EpochRecord {
            epoch: 0,
            train_loss: 0.1 + 0.2,
            train_accuracy: 1.0 / 3.0,
            val_loss: f64::NAN,
            val_accuracy: -0.0,
            lr: 1e-3,
            pushed: true,
        });
        Checkpoint {
            config: "seed = 3\n".into(),
            preprocessor: None,
            state,
        }
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let ck = sample_checkpoint();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.state.model, ck.state.model);
        assert_eq!(back.state.records[0].train_loss.to_bits(), (0.1f64 + 0.2).to_bits());
    }

    #[test]
    fn corruption_is_detected_distinctly() {
        let bytes = sample_checkpoint().to_bytes();
        let mut flipped = bytes.clone();
        flipped[HEADER_LEN + 40] ^= 0x01;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(CheckpointError::CrcMismatch { .. })));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated { .. })
        ));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..10]), Err(CheckpointError::Truncated { .. })));
        let mut version = bytes.clone();
        version[8] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&version),
            Err(CheckpointError::VersionMismatch { found: 9, .. })
        ));
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&magic), Err(CheckpointError::BadMagic)));
    }
}
