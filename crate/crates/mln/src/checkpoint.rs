//! Binary checkpoint format.
//!
//! Little-endian throughout: magic "MLNCKPT1", u32 version, the payload,
//! then a CRC32 trailer over everything before it. Tensors are stored as
//! u32 rank, u32 dims, then f64 row-major data, so a save/load roundtrip is
//! bit-exact.

use crate::embedding::{EmbeddingConfig, EmbeddingParams};
use crate::error::{MlnError, Result};
use crate::head::{GradientMode, LogitMode, ReferenceBank};
use crate::num::matrix::Matrix;
use crate::trainer::{AdamState, Checkpoint, TrainConfig};
use std::path::Path;

const MAGIC: &[u8; 8] = b"MLNCKPT1";
pub const VERSION: u32 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn tensor(&mut self, m: &Matrix) {
        self.u32(2);
        self.u32(m.rows() as u32);
        self.u32(m.cols() as u32);
        for &v in m.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(MlnError::Format("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn tensor(&mut self) -> Result<Matrix> {
        let rank = self.u32()?;
        if rank != 2 {
            return Err(MlnError::Format(format!("unsupported tensor rank {rank}")));
        }
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| MlnError::Format("tensor dims overflow".into()))?;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(self.f64()?);
        }
        // bypass the finite check: a checkpoint must roundtrip bit-exactly
        let mut m = Matrix::zeros(rows, cols);
        m.data_mut().copy_from_slice(&data);
        Ok(m)
    }
}

fn logit_mode_tag(m: LogitMode) -> u8 {
    match m {
        LogitMode::ProjectedEuclidean => 0,
        LogitMode::ProjectedInnerProduct => 1,
    }
}

fn logit_mode_from(tag: u8) -> Result<LogitMode> {
    match tag {
        0 => Ok(LogitMode::ProjectedEuclidean),
        1 => Ok(LogitMode::ProjectedInnerProduct),
        _ => Err(MlnError::Format(format!("unknown logit mode tag {tag}"))),
    }
}

fn gradient_mode_tag(m: GradientMode) -> u8 {
    match m {
        GradientMode::StopGradientProjector => 0,
        GradientMode::DifferentiateProjector => 1,
    }
}

fn gradient_mode_from(tag: u8) -> Result<GradientMode> {
    match tag {
        0 => Ok(GradientMode::StopGradientProjector),
        1 => Ok(GradientMode::DifferentiateProjector),
        _ => Err(MlnError::Format(format!("unknown gradient mode tag {tag}"))),
    }
}

pub fn encode(cp: &Checkpoint) -> Vec<u8> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);

    w.u32(cp.emb_config.input_dim as u32);
    w.u32(cp.emb_config.layer_widths.len() as u32);
    for &width in &cp.emb_config.layer_widths {
        w.u32(width as u32);
    }
    w.u64(cp.emb_config.init_seed);

    for t in cp.params.weights.iter().chain(&cp.params.biases) {
        w.tensor(t);
    }
    w.tensor(&cp.bank.refs);

    w.f64(cp.adam.beta1);
    w.f64(cp.adam.beta2);
    w.f64(cp.adam.eps);
    w.u64(cp.adam.step);
    w.u32(cp.adam.first_moment.len() as u32);
    for t in cp.adam.first_moment.iter().chain(&cp.adam.second_moment) {
        w.tensor(t);
    }

    let tc = &cp.train_config;
    w.u64(tc.episodes);
    w.u32(tc.way as u32);
    w.u32(tc.shots as u32);
    w.u32(tc.queries_per_class as u32);
    w.u32(tc.n_ref as u32);
    w.f64(tc.base_lr);
    w.f64(tc.decay_factor);
    w.u64(tc.decay_interval);
    w.u8(gradient_mode_tag(tc.gradient_mode));
    w.u8(logit_mode_tag(tc.logit_mode));
    w.u8(tc.normalize as u8);
    w.u64(tc.seed);

    w.u64(cp.episode_counter);

    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    w.buf
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 8 {
        return Err(MlnError::Format("truncated checkpoint".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(MlnError::ChecksumMismatch { stored, computed });
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(MlnError::Format("bad magic: not an MLNCKPT1 checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(MlnError::VersionMismatch { found: version, expected: VERSION });
    }

    let input_dim = r.u32()? as usize;
    let n_layers = r.u32()? as usize;
    let mut layer_widths = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        layer_widths.push(r.u32()? as usize);
    }
    let init_seed = r.u64()?;
    let emb_config = EmbeddingConfig::new(input_dim, layer_widths, init_seed)?;

    let mut weights = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        weights.push(r.tensor()?);
    }
    let mut biases = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        biases.push(r.tensor()?);
    }
    let params = EmbeddingParams { weights, biases };
    let bank = ReferenceBank { refs: r.tensor()? };

    let beta1 = r.f64()?;
    let beta2 = r.f64()?;
    let eps = r.f64()?;
    let step = r.u64()?;
    let n_acc = r.u32()? as usize;
    let mut first_moment = Vec::with_capacity(n_acc);
    for _ in 0..n_acc {
        first_moment.push(r.tensor()?);
    }
    let mut second_moment = Vec::with_capacity(n_acc);
    for _ in 0..n_acc {
        second_moment.push(r.tensor()?);
    }
    let adam = AdamState { first_moment, second_moment, step, beta1, beta2, eps };

    let train_config = TrainConfig {
        episodes: r.u64()?,
        way: r.u32()? as usize,
        shots: r.u32()? as usize,
        queries_per_class: r.u32()? as usize,
        n_ref: r.u32()? as usize,
        base_lr: r.f64()?,
        decay_factor: r.f64()?,
        decay_interval: r.u64()?,
        gradient_mode: gradient_mode_from(r.u8()?)?,
        logit_mode: logit_mode_from(r.u8()?)?,
        normalize: r.u8()? != 0,
        seed: r.u64()?,
    };
    let episode_counter = r.u64()?;

    Ok(Checkpoint { emb_config, params, bank, adam, train_config, episode_counter })
}

pub fn save_checkpoint(cp: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, encode(cp))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::EpisodeSource;
    use crate::trainer::train_loop;

    fn trained_checkpoint() -> Checkpoint {
        let emb_cfg = EmbeddingConfig::new(4, vec![8, 6], 1).unwrap();
        let cfg = TrainConfig { episodes: 5, way: 3, n_ref: 4, seed: 5, ..Default::default() };
        let source = EpisodeSource::Gaussian { dim: 4, sigma: 0.3 };
        train_loop(&cfg, &emb_cfg, &source).unwrap().0
    }

    #[test]
    fn save_load_roundtrip_is_exact() {
        let cp = trained_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&cp, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(cp, loaded);
        // byte-level determinism
        assert_eq!(encode(&cp), encode(&loaded));
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let cp = trained_checkpoint();
        let mut bytes = encode(&cp);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        assert!(matches!(decode(&bytes), Err(MlnError::ChecksumMismatch { .. })));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let cp = trained_checkpoint();
        let mut bytes = encode(&cp);
        bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
        let crc = crc32fast::hash(&bytes[..bytes.len() - 4]);
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(MlnError::VersionMismatch { found: 99, .. })));
    }

    #[test]
    fn loaded_model_reproduces_logits() {
        use crate::episodes::gen_gaussian_episode;
        use crate::num::rng::RngStream;
        let cp = trained_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&cp, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let episode = gen_gaussian_episode(3, 1, 4, 4, 0.3, &mut RngStream::new(77)).unwrap();
        let head = cp.train_config.head_config(cp.emb_config.output_dim());
        let a = crate::trainer::episode_loss(&cp.model(), &episode, &head).unwrap();
        let b = crate::trainer::episode_loss(&loaded.model(), &episode, &head).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.loss, b.loss);
    }
}
