//! Versioned little-endian binary checkpoints.
//!
//! Layout: magic `CFPCKPT\0`, `u32` version, `u64` episode, RNG state
//! (32-byte seed, `u64` stream, `u128` word position), input shape as three
//! `u32`, the layer list, optional SGD velocity, then a length-prefixed UTF-8
//! metadata blob. Floats are stored as raw IEEE-754 bits, so a round trip is
//! bit-exact.

use std::path::Path;

use crate::error::{CfpError, Result};
use crate::nn::{Conv2d, Dense, Gradients, Layer, Network, ParamGrad, SgdState};
use crate::rng::RngState;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CFPCKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub optimizer: SgdState,
    pub rng: RngState,
    pub episode: u64,
    /// Free-form caller state (the pipeline stores JSON here).
    pub meta: String,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        self.u64(vs.len() as u64);
        for v in vs {
            self.0.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CfpError::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| CfpError::Checkpoint("length overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }
}

fn write_network(w: &mut Writer, net: &Network) {
    for d in net.input_shape {
        w.u32(d);
    }
    w.u32(net.layers.len());
    for layer in &net.layers {
        match layer {
            Layer::Conv2d(c) => {
                w.u8(0);
                for d in [c.c_in, c.c_out, c.k_h, c.k_w] {
                    w.u32(d);
                }
                w.f64s(c.weights.data());
                w.f64s(&c.bias);
            }
            Layer::MaxPool2 => w.u8(1),
            Layer::Relu => w.u8(2),
            Layer::Flatten => w.u8(3),
            Layer::Dense(d) => {
                w.u8(4);
                w.u32(d.n_in);
                w.u32(d.n_out);
                w.f64s(d.weights.data());
                w.f64s(&d.bias);
            }
        }
    }
}

fn read_network(r: &mut Reader) -> Result<Network> {
    let input_shape = [r.u32()?, r.u32()?, r.u32()?];
    let n = r.u32()?;
    let mut layers = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let layer = match r.u8()? {
            0 => {
                let (c_in, c_out, k_h, k_w) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
                let w = Tensor::new(vec![c_out, c_in, k_h, k_w], r.f64s()?)?;
                Layer::Conv2d(Conv2d::new(c_in, c_out, k_h, k_w, w, r.f64s()?)?)
            }
            1 => Layer::MaxPool2,
            2 => Layer::Relu,
            3 => Layer::Flatten,
            4 => {
                let (n_in, n_out) = (r.u32()?, r.u32()?);
                let w = Tensor::new(vec![n_out, n_in], r.f64s()?)?;
                Layer::Dense(Dense::new(n_in, n_out, w, r.f64s()?)?)
            }
            tag => {
                return Err(CfpError::Checkpoint(format!(
                    "unknown layer tag {tag} at byte {}",
                    r.pos - 1
                )))
            }
        };
        layers.push(layer);
    }
    Network::new(layers, input_shape)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION as usize);
        w.u64(self.episode);
        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        write_network(&mut w, &self.network);
        match &self.optimizer.velocity {
            None => w.u8(0),
            Some(v) => {
                w.u8(1);
                w.u32(v.layers.len());
                for g in &v.layers {
                    match g {
                        None => w.u8(0),
                        Some(g) => {
                            w.u8(1);
                            w.f64s(&g.weights);
                            w.f64s(&g.bias);
                        }
                    }
                }
            }
        }
        w.u64(self.meta.len() as u64);
        w.0.extend_from_slice(self.meta.as_bytes());
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CfpError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(CfpError::Checkpoint(format!("unsupported version {version}")));
        }
        let episode = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let network = read_network(&mut r)?;
        let optimizer = match r.u8()? {
            0 => SgdState::new(),
            1 => {
                let n = r.u32()?;
                let mut layers = Vec::with_capacity(n.min(1024));
                for _ in 0..n {
                    layers.push(match r.u8()? {
                        0 => None,
                        _ => Some(ParamGrad {
                            weights: r.f64s()?,
                            bias: r.f64s()?,
                        }),
                    });
                }
                SgdState {
                    velocity: Some(Gradients { layers }),
                }
            }
            tag => return Err(CfpError::Checkpoint(format!("bad optimizer tag {tag}"))),
        };
        let meta_len = r.u64()? as usize;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec()).map_err(|e| CfpError::Checkpoint(e.to_string()))?;
        if r.pos != bytes.len() {
            return Err(CfpError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            network,
            optimizer,
            rng: RngState { seed, stream, word_pos },
            episode,
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // Write then rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| CfpError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| CfpError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CfpError::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Restores the saved state; calling it repeatedly yields the same result.
    pub fn rollback(&self) -> (Network, SgdState, crate::rng::Rng) {
        (self.network.clone(), self.optimizer.clone(), self.rng.restore())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng as _;

    fn sample() -> Checkpoint {
        let mut rng = seeded(3);
        let net = Network::lenet(3, 4, 7, &mut rng);
        let mut opt = SgdState::new();
        let x = Tensor::filled(vec![2, 1, 28, 28], 0.25);
        let (_, g) = net.backward_pass(&x, &[1, 9]).unwrap();
        let mut stepped = net.clone();
        opt.step(&mut stepped, &g, 0.1, 0.9).unwrap();
        rng.random::<u64>();
        Checkpoint {
            network: stepped,
            optimizer: opt,
            rng: RngState::capture(&rng),
            episode: 12,
            meta: "{\"phase\":\"global\"}".into(),
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn rollback_restores_and_is_idempotent() {
        let ck = sample();
        let x = Tensor::filled(vec![1, 1, 28, 28], 0.5);
        let before = ck.network.forward(&x).unwrap();
        let (mut net, _, _) = ck.rollback();
        if let Layer::Dense(d) = &mut net.layers[5] {
            d.weights.data_mut()[0] += 1.0;
        }
        assert_ne!(net, ck.network);
        let (a, oa, ra) = ck.rollback();
        let (b, ob, rb) = ck.rollback();
        assert_eq!(a, ck.network);
        assert_eq!((&a, &oa), (&b, &ob));
        assert_eq!(RngState::capture(&ra), RngState::capture(&rb));
        let after = a.forward(&x).unwrap();
        assert!(before
            .data()
            .iter()
            .zip(after.data())
            .all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
