//! SLPW checkpoint format.
//!
//! Layout (little-endian): magic `SLPW`, `u16` version, `u32` metadata length
//! and TOML metadata, `u32` record count, then one record per tensor:
//! name (`u16` length + UTF-8), role `u8`, precision `u8`, rank `u8`, `u32`
//! dims, and a payload. Full-precision payloads are raw `f64` values;
//! quantized weights store `beta`, the ternary threshold, and packed sign
//! (and non-zero mask) bit planes with rows padded to whole bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlpError};
use crate::model::{build_model, ModelConfig, UnfoldedModel};
use crate::nn::{Layer, LayerParam, Precision, Role};
use crate::quant::{quantize, QuantKind, QuantTensor};

pub const MAGIC: &[u8; 4] = b"SLPW";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub reshape_mapping: String,
    pub ppu_input: String,
}

fn role_code(role: Role) -> u8 {
    match role {
        Role::Weight => 0,
        Role::Bias => 1,
        Role::BnScale => 2,
        Role::BnShift => 3,
        Role::PreluSlope => 4,
        Role::RunningMean => 5,
        Role::RunningVar => 6,
        Role::Scalar => 7,
    }
}

fn precision_code(p: Precision) -> u8 {
    match p {
        Precision::Fp32 => 0,
        Precision::Binary => 1,
        Precision::Ternary => 2,
    }
}

fn precision_from(code: u8) -> Option<Precision> {
    [Precision::Fp32, Precision::Binary, Precision::Ternary].get(code as usize).copied()
}

/// One stored tensor and, for quantized weights, the owning layer slot.
enum Slot<'a> {
    Param(&'a LayerParam),
    Weight(&'a LayerParam, Option<&'a QuantTensor>),
}

fn layer_slots(layer: &Layer) -> Vec<Slot<'_>> {
    let packed = match layer {
        Layer::Conv2d(c) => Some(c.packed()),
        Layer::Linear(l) => Some(l.packed()),
        _ => None,
    };
    layer
        .state()
        .into_iter()
        .map(|p| match packed {
            Some(q) if p.role == Role::Weight => Slot::Weight(p, q),
            _ => Slot::Param(p),
        })
        .collect()
}

fn model_slots(model: &UnfoldedModel) -> Vec<Slot<'_>> {
    let mut out = Vec::new();
    for b in &model.blocks {
        for layer in &b.subnet.layers {
            out.extend(layer_slots(layer));
        }
        out.push(Slot::Param(&b.gamma));
        out.push(Slot::Param(&b.lambda));
    }
    for layer in &model.ppu.layers {
        out.extend(layer_slots(layer));
    }
    out
}

fn write_header<W: Write>(w: &mut W, p: &LayerParam, precision: Precision) -> Result<()> {
    let name = p.name.as_bytes();
    let len = u16::try_from(name.len()).map_err(|_| SlpError::Parameter(format!("name too long: {}", p.name)))?;
    w.write_u16::<LittleEndian>(len)?;
    w.write_all(name)?;
    w.write_u8(role_code(p.role))?;
    w.write_u8(precision_code(precision))?;
    w.write_u8(p.shape().len() as u8)?;
    for &d in p.shape() {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    Ok(())
}

/// Serialize `model`; quantized weights are stored packed.
pub fn save_model<W: Write>(model: &UnfoldedModel, mut w: W) -> Result<()> {
    let meta = CheckpointMeta {
        config: model.config.clone(),
        reshape_mapping: model.config.reshape_mapping(),
        ppu_input: "channel 0: normalized Psi; channel 1: PUU output broadcast over users".into(),
    };
    let text = toml::to_string(&meta).map_err(|e| SlpError::Config(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_u16::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(text.len() as u32)?;
    w.write_all(text.as_bytes())?;
    let slots = model_slots(model);
    w.write_u32::<LittleEndian>(slots.len() as u32)?;
    for slot in slots {
        match slot {
            Slot::Weight(p, packed) if p.precision() != Precision::Fp32 => {
                let kind = p.precision().quant_kind().expect("quantized precision");
                let owned;
                let q = match packed {
                    Some(q) => q,
                    None => {
                        owned = quantize(kind, &p.values, p.shape())?;
                        &owned
                    }
                };
                write_header(&mut w, p, p.precision())?;
                w.write_f64::<LittleEndian>(q.beta)?;
                w.write_f64::<LittleEndian>(q.rho.unwrap_or(0.0))?;
                w.write_all(&q.plane_bytes(&q.sign))?;
                if let Some(mask) = &q.mask {
                    w.write_all(&q.plane_bytes(mask))?;
                }
            }
            Slot::Weight(p, _) | Slot::Param(p) => {
                write_header(&mut w, p, Precision::Fp32)?;
                for &v in &p.values {
                    w.write_f64::<LittleEndian>(v)?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_model_file(model: &UnfoldedModel, path: &Path) -> Result<()> {
    save_model(model, BufWriter::new(File::create(path)?))
}

/// Reader that remembers how many bytes it has consumed.
struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(SlpError::Format { offset: self.offset, message: message.into() })
    }

    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        let mut filled = 0;
        while filled < n {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => {
                    self.offset += filled as u64;
                    return self.fail(format!("unexpected end of file reading {what}"));
                }
                Ok(k) => filled += k,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += n as u64;
        Ok(buf)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.bytes(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(self.bytes(2, what)?.as_slice().read_u16::<LittleEndian>()?)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(self.bytes(4, what)?.as_slice().read_u32::<LittleEndian>()?)
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(self.bytes(8, what)?.as_slice().read_f64::<LittleEndian>()?)
    }
}

fn install(layer: &mut Layer, q: QuantTensor) -> Result<()> {
    match layer {
        Layer::Conv2d(c) => c.install_packed(q),
        Layer::Linear(l) => l.install_packed(q),
        _ => Err(SlpError::State("packed weights on a layer without weights".into())),
    }
}

/// Read one record into `p`; returns the packed tensor of quantized weights.
fn read_record<R: Read>(c: &mut Cursor<R>, p: &mut LayerParam) -> Result<Option<QuantTensor>> {
    let start = c.offset;
    let len = c.u16("name length")? as usize;
    let name = String::from_utf8(c.bytes(len, "name")?).or_else(|_| c.fail("name is not UTF-8"))?;
    if name != p.name {
        return Err(SlpError::Format { offset: start, message: format!("expected record {}, found {name}", p.name) });
    }
    let role = c.u8("role")?;
    if role != role_code(p.role) {
        return c.fail(format!("{name}: role code {role} does not match {:?}", p.role));
    }
    let code = c.u8("precision")?;
    let precision = match precision_from(code) {
        Some(v) => v,
        None => return c.fail(format!("{name}: unknown precision code {code}")),
    };
    let rank = c.u8("rank")? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(c.u32("dimension")? as usize);
    }
    if shape != p.shape() {
        return c.fail(format!("{name}: shape {shape:?} does not match {:?}", p.shape()));
    }
    match precision.quant_kind() {
        None => {
            for v in p.values.iter_mut() {
                *v = c.f64("value")?;
            }
            p.set_precision(Precision::Fp32)?;
            Ok(None)
        }
        Some(kind) => {
            if p.role != Role::Weight {
                return c.fail(format!("{name}: only weights may be quantized"));
            }
            let beta = c.f64("beta")?;
            let rho = c.f64("threshold")?;
            if !(beta.is_finite() && beta >= 0.0) {
                return c.fail(format!("{name}: invalid scale {beta}"));
            }
            let cols: usize = shape.iter().skip(1).product();
            let plane_len = shape.first().copied().unwrap_or(1) * cols.div_ceil(8);
            let sign = QuantTensor::plane_from_bytes(&shape, &c.bytes(plane_len, "sign plane")?)?;
            let mask = match kind {
                QuantKind::Ternary => Some(QuantTensor::plane_from_bytes(&shape, &c.bytes(plane_len, "mask plane")?)?),
                QuantKind::Binary => None,
            };
            let q = QuantTensor {
                kind,
                shape,
                beta,
                rho: (kind == QuantKind::Ternary).then_some(rho),
                sign,
                mask,
            };
            p.values = q.dequantize();
            p.set_precision(precision)?;
            Ok(Some(q))
        }
    }
}

/// Read a checkpoint written by [`save_model`]. Quantized models come back frozen.
pub fn load_model<R: Read>(r: R) -> Result<UnfoldedModel> {
    let mut c = Cursor { inner: r, offset: 0 };
    if &c.bytes(4, "magic")?[..] != MAGIC {
        return Err(SlpError::Format { offset: 0, message: "bad magic, not an SLPW file".into() });
    }
    let version = c.u16("version")?;
    if version != VERSION {
        return Err(SlpError::Format { offset: 4, message: format!("unsupported version {version}") });
    }
    let len = c.u32("metadata length")? as usize;
    let meta_at = c.offset;
    let text = String::from_utf8(c.bytes(len, "metadata")?).or_else(|_| c.fail("metadata is not UTF-8"))?;
    let meta: CheckpointMeta = toml::from_str(&text)
        .map_err(|e| SlpError::Format { offset: meta_at, message: format!("metadata: {e}") })?;
    let mut model = build_model(&meta.config)
        .map_err(|e| SlpError::Format { offset: meta_at, message: format!("metadata: {e}") })?;
    let count_at = c.offset;
    let count = c.u32("record count")? as usize;
    let expected = model_slots(&model).len();
    if count != expected {
        return Err(SlpError::Format { offset: count_at, message: format!("{count} records, model has {expected}") });
    }
    let mut packed_any = false;
    for b in &mut model.blocks {
        for layer in &mut b.subnet.layers {
            packed_any |= read_layer(&mut c, layer)?;
        }
        read_record(&mut c, &mut b.gamma)?;
        read_record(&mut c, &mut b.lambda)?;
    }
    for layer in &mut model.ppu.layers {
        packed_any |= read_layer(&mut c, layer)?;
    }
    if c.inner.read(&mut [0u8; 1])? != 0 {
        return c.fail("trailing bytes after the last record");
    }
    model.config.precision = if packed_any { meta.config.precision } else { Precision::Fp32 };
    Ok(model)
}

fn read_layer<R: Read>(c: &mut Cursor<R>, layer: &mut Layer) -> Result<bool> {
    let mut packed = None;
    for p in layer.state_mut() {
        if let Some(q) = read_record(c, p)? {
            packed = Some(q);
        }
    }
    match packed {
        Some(q) => {
            install(layer, q)?;
            Ok(true)
        }
        None => Ok(false),
    }
}

pub fn load_model_file(path: &Path) -> Result<UnfoldedModel> {
    load_model(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{draw_channel, stream_rng, Psk, Stream, SymbolFrame};
    use crate::geometry::{build_slot, CiInstance};

    fn slots() -> Vec<Vec<CiInstance>> {
        (0..4)
            .map(|i| {
                let mut rng = stream_rng(i, Stream::Channel, 0);
                let h = draw_channel(4, 4, &mut rng).unwrap();
                let f = SymbolFrame::random(&Psk::qpsk(), 4, &mut rng);
                build_slot(&h, &f, 15.0, 0.01, std::f64::consts::FRAC_PI_4).unwrap()
            })
            .collect()
    }

    fn roundtrip(model: &UnfoldedModel) -> (Vec<u8>, UnfoldedModel) {
        let mut buf = Vec::new();
        save_model(model, &mut buf).unwrap();
        let back = load_model(buf.as_slice()).unwrap();
        (buf, back)
    }

    #[test]
    fn fp32_roundtrip_is_exact() {
        let model = build_model(&ModelConfig { seed: 7, ..ModelConfig::new(4, 4) }).unwrap();
        let (_, back) = roundtrip(&model);
        assert_eq!(back.config, model.config);
        let a: Vec<u64> = model_slots(&model).iter().flat_map(|s| slot_bits(s)).collect();
        let b: Vec<u64> = model_slots(&back).iter().flat_map(|s| slot_bits(s)).collect();
        assert_eq!(a, b);
        let s = slots();
        let x = model.infer_batch(&s).unwrap();
        let y = back.infer_batch(&s).unwrap();
        for (p, q) in x.iter().zip(&y) {
            assert_eq!(p.w2, q.w2);
        }
    }

    fn slot_bits(s: &Slot<'_>) -> Vec<u64> {
        match s {
            Slot::Param(p) | Slot::Weight(p, _) => p.values.iter().map(|v| v.to_bits()).collect(),
        }
    }

    #[test]
    fn quantized_roundtrip_is_packed_and_equivalent() {
        for precision in [Precision::Binary, Precision::Ternary] {
            let mut model = build_model(&ModelConfig { precision, seed: 9, ..ModelConfig::new(4, 4) }).unwrap();
            model.freeze().unwrap();
            let (buf, back) = roundtrip(&model);
            let mut fp = build_model(&ModelConfig { seed: 9, ..ModelConfig::new(4, 4) }).unwrap();
            fp.freeze().unwrap();
            let mut fp_buf = Vec::new();
            save_model(&fp, &mut fp_buf).unwrap();
            assert!(buf.len() * 4 < fp_buf.len(), "{} vs {}", buf.len(), fp_buf.len());
            assert_eq!(back.config.precision, precision);
            let s = slots();
            let x = model.infer_batch(&s).unwrap();
            let y = back.infer_batch(&s).unwrap();
            for (p, q) in x.iter().zip(&y) {
                assert!((&p.w2.0 - &q.w2.0).norm() <= 1e-10 * (1.0 + p.w2.0.norm()));
            }
        }
    }

    #[test]
    fn corrupt_files_report_offsets() {
        let model = build_model(&ModelConfig::new(4, 4)).unwrap();
        let mut buf = Vec::new();
        save_model(&model, &mut buf).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(load_model(bad.as_slice()), Err(SlpError::Format { offset: 0, .. })));

        let cut = buf.len() - 3;
        match load_model(&buf[..cut]) {
            Err(SlpError::Format { offset, .. }) => assert!(offset as usize <= cut && offset as usize > cut - 16),
            other => panic!("{other:?}"),
        }

        let mut longer = buf.clone();
        longer.push(0);
        assert!(matches!(load_model(longer.as_slice()), Err(SlpError::Format { .. })));

        let meta_len = u32::from_le_bytes(buf[6..10].try_into().unwrap()) as usize;
        let first = 10 + meta_len + 4;
        let mut renamed = buf.clone();
        renamed[first + 2] ^= 0x20;
        assert!(matches!(
            load_model(renamed.as_slice()),
            Err(SlpError::Format { offset, .. }) if offset as usize == first
        ));
    }
}
