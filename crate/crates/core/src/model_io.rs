//! Versioned binary model files and CSV metric output.
//!
//! Layout: magic `MSCN`, a little-endian `u32` version, then tagged records
//! `[u32 tag][u64 length][payload]` ending with an empty `END` record. All
//! reals are little-endian IEEE-754 doubles, so round trips are bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Grid2D;
use crate::propagation::{Activation, ActivationKind, Classifier, FeatureMap, NetworkParams};
use crate::stencil::{Stencil, StencilBank};
use crate::training::IterRecord;

pub const MAGIC: [u8; 4] = *b"MSCN";
pub const FORMAT_VERSION: u32 = 1;

const TAG_GRID: u32 = 1;
const TAG_NET: u32 = 2;
const TAG_EMBED: u32 = 3;
const TAG_LAYERS: u32 = 4;
const TAG_CLASSIFIER: u32 = 5;
const TAG_PROVENANCE: u32 = 6;
const TAG_END: u32 = 0xFFFF;

/// One stage of the training that produced a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelStamp {
    pub nx: usize,
    pub ny: usize,
    pub layers: usize,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Provenance {
    /// SHA-256 of the canonical training configuration.
    pub config_hash: [u8; 32],
    pub seed: u64,
    pub levels: Vec<LevelStamp>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub params: NetworkParams,
    pub classifier: Classifier,
    pub provenance: Provenance,
}

impl ModelFile {
    pub fn grid(&self) -> Grid2D {
        self.classifier.grid()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());

        let g = self.grid();
        let mut w = Writer::default();
        w.u64(g.nx() as u64);
        w.u64(g.ny() as u64);
        w.f64(g.h());
        record(&mut out, TAG_GRID, w);

        let p = &self.params;
        let mut w = Writer::default();
        w.u64(p.num_layers() as u64);
        w.f64(p.dt());
        w.f64(p.final_time());
        w.u64(p.channels() as u64);
        w.u64(p.k() as u64);
        w.u8(match p.activation().kind {
            ActivationKind::Tanh => 0,
            ActivationKind::Identity => 1,
        });
        w.f64(p.activation().gain);
        w.u8(u8::from(p.learn_embed()));
        record(&mut out, TAG_NET, w);

        let mut w = Writer::default();
        p.embed().flat().for_each(|&v| w.f64(v));
        record(&mut out, TAG_EMBED, w);

        let mut w = Writer::default();
        for (bank, bias) in p.banks().iter().zip(p.biases()) {
            bank.flat().for_each(|&v| w.f64(v));
            bias.iter().for_each(|&v| w.f64(v));
        }
        record(&mut out, TAG_LAYERS, w);

        let c = &self.classifier;
        let mut w = Writer::default();
        w.u64(c.num_classes() as u64);
        for f in c.weights() {
            f.data().iter().for_each(|&v| w.f64(v));
        }
        c.mu().iter().for_each(|&v| w.f64(v));
        record(&mut out, TAG_CLASSIFIER, w);

        let pr = &self.provenance;
        let mut w = Writer::default();
        w.0.extend_from_slice(&pr.config_hash);
        w.u64(pr.seed);
        w.u64(pr.levels.len() as u64);
        for l in &pr.levels {
            w.u64(l.nx as u64);
            w.u64(l.ny as u64);
            w.u64(l.layers as u64);
            w.u64(l.iterations as u64);
        }
        record(&mut out, TAG_PROVENANCE, w);

        record(&mut out, TAG_END, Writer::default());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::CorruptHeader("missing MSCN magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                supported: FORMAT_VERSION,
            });
        }

        let mut grid = None;
        let mut net = None;
        let mut embed = None;
        let mut layers = None;
        let mut classifier = None;
        let mut provenance = None;
        loop {
            let tag = r.u32()?;
            let len = usize::try_from(r.u64()?)
                .map_err(|_| Error::CorruptHeader("record length overflow".into()))?;
            let mut body = Reader::new(r.take(len)?);
            match tag {
                TAG_GRID => {
                    let (nx, ny, h) = (body.usize()?, body.usize()?, body.f64()?);
                    grid = Some(
                        Grid2D::new(nx, ny, h).map_err(|e| Error::CorruptHeader(e.to_string()))?,
                    );
                }
                TAG_NET => net = Some(NetRecord::read(&mut body)?),
                TAG_EMBED => embed = Some(body.rest_f64()?),
                TAG_LAYERS => layers = Some(body.rest_f64()?),
                TAG_CLASSIFIER => {
                    let classes = body.usize()?;
                    classifier = Some((classes, body.rest_f64()?));
                }
                TAG_PROVENANCE => {
                    let mut hash = [0u8; 32];
                    hash.copy_from_slice(body.take(32)?);
                    let seed = body.u64()?;
                    let count = body.usize()?;
                    let levels = (0..count)
                        .map(|_| {
                            Ok(LevelStamp {
                                nx: body.usize()?,
                                ny: body.usize()?,
                                layers: body.usize()?,
                                iterations: body.usize()?,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    provenance = Some(Provenance {
                        config_hash: hash,
                        seed,
                        levels,
                    });
                }
                TAG_END => break,
                other => return Err(Error::CorruptHeader(format!("unknown record tag {other}"))),
            }
            body.finish()?;
        }
        let missing = |name: &str| Error::CorruptHeader(format!("missing {name} record"));
        let grid = grid.ok_or_else(|| missing("grid"))?;
        let net = net.ok_or_else(|| missing("network"))?;
        let embed = embed.ok_or_else(|| missing("embedding"))?;
        let layers = layers.ok_or_else(|| missing("layer"))?;
        let (classes, cvals) = classifier.ok_or_else(|| missing("classifier"))?;
        let provenance = provenance.ok_or_else(|| missing("provenance"))?;
        let corrupt = |e: Error| Error::CorruptHeader(e.to_string());

        let (nf, k) = (net.channels, net.k);
        let kk = k * k;
        if embed.len() != nf * kk
            || layers.len() != net.layers * (nf * nf * kk + nf)
            || cvals.len() != classes * (grid.len() * nf + 1)
        {
            return Err(Error::CorruptHeader(
                "record sizes disagree with network shape".into(),
            ));
        }
        let bank = |c_in: usize, vals: &[f64]| -> Result<StencilBank> {
            let stencils = vals
                .chunks(kk)
                .map(|w| Stencil::new(k, w.to_vec()))
                .collect::<Result<Vec<_>>>()?;
            StencilBank::new(c_in, nf, stencils)
        };
        let embed = bank(1, &embed).map_err(corrupt)?;
        let mut banks = Vec::with_capacity(net.layers);
        let mut biases = Vec::with_capacity(net.layers);
        for chunk in layers.chunks(nf * nf * kk + nf) {
            banks.push(bank(nf, &chunk[..nf * nf * kk]).map_err(corrupt)?);
            biases.push(chunk[nf * nf * kk..].to_vec());
        }
        let params = NetworkParams::with_final_time(
            net.dt,
            net.final_time,
            banks,
            biases,
            embed,
            net.activation,
            net.learn_embed,
        )
        .map_err(corrupt)?;
        let d = grid.len() * nf;
        let weights = (0..classes)
            .map(|j| FeatureMap::new(grid, nf, cvals[j * d..(j + 1) * d].to_vec()))
            .collect::<Result<Vec<_>>>()
            .map_err(corrupt)?;
        let classifier =
            Classifier::new(weights, cvals[classes * d..].to_vec()).map_err(corrupt)?;
        Ok(Self {
            params,
            classifier,
            provenance,
        })
    }
}

pub fn save_model(model: &ModelFile, path: &Path) -> Result<()> {
    fs::write(path, model.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelFile::from_bytes(&bytes)
}

struct NetRecord {
    layers: usize,
    dt: f64,
    final_time: f64,
    channels: usize,
    k: usize,
    activation: Activation,
    learn_embed: bool,
}

impl NetRecord {
    fn read(r: &mut Reader<'_>) -> Result<Self> {
        let layers = r.usize()?;
        let dt = r.f64()?;
        let final_time = r.f64()?;
        let channels = r.usize()?;
        let k = r.usize()?;
        let kind = match r.u8()? {
            0 => ActivationKind::Tanh,
            1 => ActivationKind::Identity,
            other => {
                return Err(Error::CorruptHeader(format!(
                    "unknown activation code {other}"
                )))
            }
        };
        let gain = r.f64()?;
        let learn_embed = match r.u8()? {
            0 => false,
            1 => true,
            other => return Err(Error::CorruptHeader(format!("bad flag byte {other}"))),
        };
        Ok(Self {
            layers,
            dt,
            final_time,
            channels,
            k,
            activation: Activation { kind, gain },
            learn_embed,
        })
    }
}

fn record(out: &mut Vec<u8>, tag: u32, body: Writer) {
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&(body.0.len() as u64).to_le_bytes());
    out.extend_from_slice(&body.0);
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptHeader("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::CorruptHeader("size overflow".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn rest_f64(&mut self) -> Result<Vec<f64>> {
        let rest = self.bytes.len() - self.pos;
        if !rest.is_multiple_of(8) {
            return Err(Error::CorruptHeader(
                "record is not a whole number of doubles".into(),
            ));
        }
        (0..rest / 8).map(|_| self.f64()).collect()
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::CorruptHeader("trailing bytes in record".into()));
        }
        Ok(())
    }
}

fn csv_real(out: &mut String, v: f64) {
    write!(out, "{v}").expect("write to String");
}

/// `iter,loss,data_term,reg_term,train_acc,val_acc`; one row per iteration.
/// A missing validation accuracy is an empty field.
pub fn history_csv(history: &[IterRecord]) -> String {
    let mut out = String::from("iter,loss,data_term,reg_term,train_acc,val_acc\n");
    for r in history {
        write!(out, "{},", r.iter).expect("write to String");
        for v in [r.loss, r.data_term, r.reg_term, r.train_acc] {
            csv_real(&mut out, v);
            out.push(',');
        }
        if let Some(v) = r.val_acc {
            csv_real(&mut out, v);
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryRow {
    /// Pyramid level or network depth.
    pub level: usize,
    pub init_loss_warm: f64,
    pub init_loss_cold: f64,
    pub final_acc: f64,
    pub iterations: usize,
    pub wall_seconds: f64,
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out =
        String::from("level,init_loss_warm,init_loss_cold,final_acc,iterations,wall_seconds\n");
    for r in rows {
        write!(out, "{},", r.level).expect("write to String");
        for v in [r.init_loss_warm, r.init_loss_cold, r.final_acc] {
            csv_real(&mut out, v);
            out.push(',');
        }
        write!(out, "{},", r.iterations).expect("write to String");
        csv_real(&mut out, r.wall_seconds);
        out.push('\n');
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
