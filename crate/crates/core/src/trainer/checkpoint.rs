//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! "DHSL"  u32 version  u32+bytes layout ("NHWC")  u32 d  f64 channel multiplier
//! 10 x u32 stack geometry (input h, w, c, three channel widths,
//!          conv kernel, pool kernel, pool stride, pool pad)
//! u32+bytes training config as key=value text
//! u8 state flag, then if 1: u64 step, u64 epoch, f64 lr, f64 epoch loss sum,
//!          u64 epoch steps, u32+f64s stage history, u32 + (u64, u64, i8) mined pairs
//! u32 tensor count, per tensor: u16+bytes name, u8 rank, rank x u32 dims, u64 offset
//! u64 value count, then f32 values
//! ```
//!
//! Tensors appear in model order (conv filters `(kh, kw, c_in, c_out)`,
//! activations `(n, h, w, c)`, channel fastest), followed by velocity
//! buffers when the state block is present.

use std::path::Path;

use super::config::TrainConfig;
use super::optim::MomentumState;
use super::runner::TrainState;
use super::sampler::PairIndex;
use crate::error::{Error, Result};
use crate::layers::StackConfig;
use crate::model::Model;
use crate::scalar::Scalar;
use crate::similarity::PairLabel;

pub const MAGIC: &[u8; 4] = b"DHSL";
pub const FORMAT_VERSION: u32 = 1;
pub const LAYOUT: &str = "NHWC";

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub config: TrainConfig,
    /// Optimizer state, present in checkpoints written during training.
    pub state: Option<(TrainState, MomentumState<T>)>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes32(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated at byte {}", self.pos)));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Format("invalid utf-8 in header".into()))
    }
    fn count(&mut self, what: &str) -> Result<usize> {
        let n = self.u32()? as usize;
        // every counted item occupies at least one byte
        if n > self.buf.len() - self.pos {
            return Err(Error::Format(format!("{what} count {n} exceeds file size")));
        }
        Ok(n)
    }
}

fn stack_fields(s: &StackConfig) -> [usize; 10] {
    [
        s.input_h,
        s.input_w,
        s.input_c,
        s.channels[0],
        s.channels[1],
        s.channels[2],
        s.conv_kernel,
        s.pool_kernel,
        s.pool_stride,
        s.pool_pad,
    ]
}

struct TableEntry {
    name: String,
    dims: Vec<usize>,
    len: usize,
}

fn table<T: Scalar>(model: &Model<T>, momentum: Option<&MomentumState<T>>) -> (Vec<TableEntry>, Vec<f32>) {
    let mut entries = Vec::new();
    let mut values = Vec::new();
    for t in model.tensors() {
        entries.push(TableEntry {
            name: t.name.clone(),
            dims: t.dims.clone(),
            len: t.data.len(),
        });
        values.extend(t.data.iter().map(|v| v.as_f64() as f32));
    }
    if let Some(momentum) = momentum {
        let names = model.param_names();
        for (name, v) in names.into_iter().zip(&momentum.velocity) {
            entries.push(TableEntry {
                name: format!("velocity.{name}"),
                dims: vec![v.len()],
                len: v.len(),
            });
            values.extend(v.iter().map(|x| x.as_f64() as f32));
        }
    }
    (entries, values)
}

/// Serializes a model, its training config and optional optimizer state.
pub fn encode<T: Scalar>(model: &Model<T>, config: &TrainConfig, state: Option<(&TrainState, &MomentumState<T>)>) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    w.bytes32(LAYOUT.as_bytes());
    w.u32(model.feature_dim() as u32);
    w.f64(config.channel_multiplier);
    for v in stack_fields(model.stack_config()) {
        w.u32(v as u32);
    }
    w.bytes32(config.to_text().as_bytes());
    match state {
        None => w.u8(0),
        Some((s, _)) => {
            w.u8(1);
            w.u64(s.step);
            w.u64(s.epoch);
            w.f64(s.lr);
            w.f64(s.epoch_loss_sum);
            w.u64(s.epoch_steps);
            w.u32(s.stage_history.len() as u32);
            s.stage_history.iter().for_each(|&h| w.f64(h));
            w.u32(s.mined.len() as u32);
            for p in &s.mined {
                w.u64(p.first as u64);
                w.u64(p.second as u64);
                w.u8(p.label.sign::<f64>() as i8 as u8);
            }
        }
    }
    let (entries, values) = table(model, state.map(|(_, m)| m));
    w.u32(entries.len() as u32);
    let mut offset = 0u64;
    for e in &entries {
        w.u16(e.name.len() as u16);
        w.0.extend_from_slice(e.name.as_bytes());
        w.u8(e.dims.len() as u8);
        e.dims.iter().for_each(|&d| w.u32(d as u32));
        w.u64(offset);
        offset += e.len as u64;
    }
    w.u64(values.len() as u64);
    for v in values {
        w.0.extend_from_slice(&v.to_le_bytes());
    }
    w.0
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        encode(&self.model, &self.config, self.state.as_ref().map(|(s, m)| (s, m)))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4).ok() != Some(&MAGIC[..]) {
            return Err(Error::Format("missing DHSL magic bytes".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let n = r.count("layout")?;
        let layout = r.string(n)?;
        if layout != LAYOUT {
            return Err(Error::Format(format!("layout `{layout}`, expected `{LAYOUT}`")));
        }
        let d = r.u32()? as usize;
        let multiplier = r.f64()?;
        let mut g = [0usize; 10];
        for v in &mut g {
            *v = r.u32()? as usize;
        }
        let stack = StackConfig {
            input_h: g[0],
            input_w: g[1],
            input_c: g[2],
            channels: [g[3], g[4], g[5]],
            conv_kernel: g[6],
            pool_kernel: g[7],
            pool_stride: g[8],
            pool_pad: g[9],
        };
        let n = r.count("config")?;
        let config = TrainConfig::from_text(&r.string(n)?).map_err(|e| Error::Format(format!("embedded config: {e}")))?;
        if config.channel_multiplier != multiplier {
            return Err(Error::Format("header and config disagree on the channel multiplier".into()));
        }
        let mut model = Model::<T>::new(stack, config.head_mode).map_err(|e| Error::Format(format!("stack geometry: {e}")))?;
        if model.feature_dim() != d {
            return Err(Error::Format(format!(
                "header feature dim {d}, geometry gives {}",
                model.feature_dim()
            )));
        }

        let state = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let epoch = r.u64()?;
                let lr = r.f64()?;
                let epoch_loss_sum = r.f64()?;
                let epoch_steps = r.u64()?;
                let n = r.count("history")?;
                let stage_history = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                let n = r.count("mined pair")?;
                let mut mined = Vec::with_capacity(n);
                for _ in 0..n {
                    let first = r.u64()? as usize;
                    let second = r.u64()? as usize;
                    let label = PairLabel::from_sign(r.u8()? as i8 as i32).map_err(|e| Error::Format(e.to_string()))?;
                    mined.push(PairIndex { first, second, label });
                }
                let s = TrainState {
                    step,
                    epoch,
                    lr,
                    epoch_loss_sum,
                    epoch_steps,
                    stage_history,
                    mined,
                };
                Some((s, MomentumState::new(&mut model)))
            }
            f => return Err(Error::Format(format!("bad state flag {f}"))),
        };

        let mut probe = Checkpoint { model, config, state };
        let (expected, _) = table(&probe.model, probe.state.as_ref().map(|(_, m)| m));
        let count = r.u32()? as usize;
        if count != expected.len() {
            return Err(Error::Format(format!(
                "{count} tensors in file, model needs {}",
                expected.len()
            )));
        }
        let mut offset = 0u64;
        for e in &expected {
            let n = r.u16()? as usize;
            let name = r.string(n)?;
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let off = r.u64()?;
            if name != e.name || dims != e.dims || off != offset {
                return Err(Error::Format(format!(
                    "tensor `{name}` {dims:?} at {off}, expected `{}` {:?} at {offset}",
                    e.name, e.dims
                )));
            }
            offset += e.len as u64;
        }
        if r.u64()? != offset {
            return Err(Error::Format("value count does not match the tensor table".into()));
        }
        let raw = r.take(offset as usize * 4)?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let mut values = raw
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64));

        for t in probe.model.tensors_mut() {
            t.iter_mut().for_each(|v| *v = values.next().expect("counted"));
        }
        if let Some((_, momentum)) = &mut probe.state {
            for v in &mut momentum.velocity {
                v.iter_mut().for_each(|x| *x = values.next().expect("counted"));
            }
        }
        Ok(probe)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
