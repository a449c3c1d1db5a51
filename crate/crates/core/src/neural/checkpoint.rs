//! Versioned binary checkpoints.
//!
//! Net file: magic, version, layout, layer table, train-step counter,
//! little-endian f64 parameter blob (canonical order), FNV-64 checksum over
//! everything before it. Adapters are saved separately, tagged with a hash
//! of the layout they attach to.

use super::adapter::{AdapterLayer, LowRankAdapter};
use super::net::{Activation, DenseLayer, DenseNet, InputLayout};
use super::optim::{net_params, set_net_params};
use super::NeuralError;
use crate::seeds::fnv1a;
use std::fs;
use std::path::Path;

const NET_MAGIC: &[u8; 8] = b"MDNET001";
const ADAPTER_MAGIC: &[u8; 8] = b"MDADP001";
const VERSION: u32 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: &[u8; 8]) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        Self { buf }
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

    fn f64s(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f64(v);
        }
    }

    fn finish(mut self) -> Vec<u8> {
        let sum = fnv1a(&self.buf);
        self.buf.extend_from_slice(&sum.to_le_bytes());
        self.buf
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], magic: &[u8; 8]) -> Result<Self, NeuralError> {
        if buf.len() < 20 {
            return Err(NeuralError::Corrupt("file too short".into()));
        }
        let (body, sum_bytes) = buf.split_at(buf.len() - 8);
        let stored = u64::from_le_bytes(sum_bytes.try_into().unwrap());
        if fnv1a(body) != stored {
            return Err(NeuralError::Corrupt("checksum mismatch".into()));
        }
        let mut r = Self { buf: body, pos: 0 };
        let got_magic = r.bytes(8)?;
        if got_magic != magic {
            return Err(NeuralError::Corrupt("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(NeuralError::Corrupt(format!("unsupported version {version}")));
        }
        Ok(r)
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8], NeuralError> {
        if self.pos + n > self.buf.len() {
            return Err(NeuralError::Corrupt("truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NeuralError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, NeuralError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, NeuralError> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, NeuralError> {
        (0..n).map(|_| self.f64()).collect()
    }

    fn done(&self) -> Result<(), NeuralError> {
        if self.pos != self.buf.len() {
            return Err(NeuralError::Corrupt("trailing bytes".into()));
        }
        Ok(())
    }
}

fn act_tag(a: Activation) -> u32 {
    match a {
        Activation::Silu => 0,
        Activation::Linear => 1,
    }
}

fn act_from(tag: u32) -> Result<Activation, NeuralError> {
    match tag {
        0 => Ok(Activation::Silu),
        1 => Ok(Activation::Linear),
        other => Err(NeuralError::Corrupt(format!("unknown activation tag {other}"))),
    }
}

fn layout_descriptor(net: &DenseNet) -> Vec<u8> {
    let mut w = Writer::new(b"MDLAYOUT");
    w.u32(net.layout.target_dim as u32);
    w.u32(net.layout.context_dim as u32);
    w.u32(net.layout.time_dim as u32);
    w.u32(net.layout.pos_dim as u32);
    w.u32(net.layers.len() as u32);
    for l in &net.layers {
        w.u32(l.d_in as u32);
        w.u32(l.d_out as u32);
        w.u32(act_tag(l.act));
    }
    w.buf
}

/// Hash of the net's layout; adapters record it so attachment to a
/// checkpoint of a different shape is rejected at load time.
pub fn layout_hash(net: &DenseNet) -> u64 {
    fnv1a(&layout_descriptor(net))
}

pub fn save_net(net: &DenseNet, path: &Path) -> Result<(), NeuralError> {
    let mut w = Writer::new(NET_MAGIC);
    w.u32(net.layout.target_dim as u32);
    w.u32(net.layout.context_dim as u32);
    w.u32(net.layout.time_dim as u32);
    w.u32(net.layout.pos_dim as u32);
    w.u32(net.layers.len() as u32);
    for l in &net.layers {
        w.u32(l.d_in as u32);
        w.u32(l.d_out as u32);
        w.u32(act_tag(l.act));
    }
    w.u64(net.train_steps);
    let params = net_params(net);
    w.u64(params.len() as u64);
    w.f64s(&params);
    fs::write(path, w.finish())?;
    Ok(())
}

pub fn load_net(path: &Path) -> Result<DenseNet, NeuralError> {
    let data = fs::read(path)?;
    let mut r = Reader::new(&data, NET_MAGIC)?;
    let layout = InputLayout {
        target_dim: r.u32()? as usize,
        context_dim: r.u32()? as usize,
        time_dim: r.u32()? as usize,
        pos_dim: r.u32()? as usize,
    };
    let n_layers = r.u32()? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let d_in = r.u32()? as usize;
        let d_out = r.u32()? as usize;
        let act = act_from(r.u32()?)?;
        layers.push(DenseLayer { d_in, d_out, w: vec![0.0; d_in * d_out], b: vec![0.0; d_out], act });
    }
    let train_steps = r.u64()?;
    let n_params = r.u64()? as usize;
    let mut net = DenseNet {
        layout,
        layers,
        null_context: vec![0.0; layout.context_dim],
        null_pos: vec![0.0; layout.pos_dim],
        train_steps,
    };
    if n_params != net.param_count() {
        return Err(NeuralError::Corrupt(format!(
            "parameter count {n_params} does not match layout ({})",
            net.param_count()
        )));
    }
    let flat = r.f64s(n_params)?;
    r.done()?;
    set_net_params(&mut net, &flat);
    net.validate()?;
    Ok(net)
}

pub fn save_adapter(adapter: &LowRankAdapter, net: &DenseNet, path: &Path) -> Result<(), NeuralError> {
    adapter.check_shape(net)?;
    let mut w = Writer::new(ADAPTER_MAGIC);
    w.u64(layout_hash(net));
    w.u32(adapter.rank as u32);
    w.f64(adapter.scale);
    w.u32(adapter.layers.len() as u32);
    for l in &adapter.layers {
        w.u32(l.d_in as u32);
        w.u32(l.d_out as u32);
    }
    let count: usize = adapter.param_count();
    w.u64(count as u64);
    for l in &adapter.layers {
        w.f64s(&l.down);
        w.f64s(&l.up);
    }
    fs::write(path, w.finish())?;
    Ok(())
}

/// Load an adapter and verify it attaches to `net`'s layout.
pub fn load_adapter(path: &Path, net: &DenseNet) -> Result<LowRankAdapter, NeuralError> {
    let data = fs::read(path)?;
    let mut r = Reader::new(&data, ADAPTER_MAGIC)?;
    let hash = r.u64()?;
    if hash != layout_hash(net) {
        return Err(NeuralError::Corrupt(
            "adapter was saved for a different network layout".into(),
        ));
    }
    let rank = r.u32()? as usize;
    let scale = r.f64()?;
    let n_layers = r.u32()? as usize;
    let mut dims = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        dims.push((r.u32()? as usize, r.u32()? as usize));
    }
    let count = r.u64()? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for (d_in, d_out) in dims {
        let down = r.f64s(d_in * rank)?;
        let up = r.f64s(rank * d_out)?;
        layers.push(AdapterLayer { d_in, d_out, down, up });
    }
    r.done()?;
    let adapter = LowRankAdapter { rank, scale, layers };
    if adapter.param_count() != count {
        return Err(NeuralError::Corrupt("adapter parameter count mismatch".into()));
    }
    adapter.check_shape(net)?;
    Ok(adapter)
}
