//! Flat binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "PROCACK1"
//! version  u32
//! step     u64      optimizer step counter of the stage that wrote the file
//! count    u32      number of entries
//! entry*   name_len u16, name (UTF-8), dtype u8, ndim u8, dims u64 × ndim, payload
//! ```
//!
//! dtype 0 is f32, 1 is f64, 2 is u64 and 3 is raw bytes. Model parameters are
//! always f32; prototype banks keep their f64 accumulators.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use proca_core::pipeline::{Banks, Float, PipelineConfig};
use proca_core::prototypes::{Level, PrototypeBank};
use proca_core::pseudolabel::ThresholdTable;
use proca_core::model::SegModel;

use crate::error::{AppError, AppResult};

const MAGIC: &[u8; 8] = b"PROCACK1";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Data {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
    Bytes(Vec<u8>),
}

impl Data {
    fn dtype(&self) -> u8 {
        match self {
            Data::F32(_) => 0,
            Data::F64(_) => 1,
            Data::U64(_) => 2,
            Data::Bytes(_) => 3,
        }
    }

    fn len(&self) -> usize {
        match self {
            Data::F32(v) => v.len(),
            Data::F64(v) => v.len(),
            Data::U64(v) => v.len(),
            Data::Bytes(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub shape: Vec<usize>,
    pub data: Data,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub entries: BTreeMap<String, Entry>,
}

fn corrupt(msg: impl Into<String>) -> AppError {
    AppError::Runtime(format!("corrupt checkpoint: {}", msg.into()))
}

fn read_exact<const N: usize>(r: &mut impl Read) -> AppResult<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| corrupt(e.to_string()))?;
    Ok(buf)
}

impl Checkpoint {
    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Data) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.insert(name.to_string(), Entry { shape, data });
    }

    pub fn get(&self, name: &str) -> AppResult<&Entry> {
        self.entries.get(name).ok_or_else(|| corrupt(format!("missing entry {name}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(entry.data.dtype());
            out.push(entry.shape.len() as u8);
            for &d in &entry.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &entry.data {
                Data::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Data::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Data::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Data::Bytes(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    pub fn from_reader(mut r: impl Read) -> AppResult<Self> {
        if &read_exact::<8>(&mut r)? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(read_exact(&mut r)?);
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let step = u64::from_le_bytes(read_exact(&mut r)?);
        let count = u32::from_le_bytes(read_exact(&mut r)?);
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(read_exact(&mut r)?) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(|e| corrupt(e.to_string()))?;
            let name = String::from_utf8(name).map_err(|_| corrupt("entry name is not UTF-8"))?;
            let [dtype, ndim] = read_exact::<2>(&mut r)?;
            let mut shape = Vec::with_capacity(ndim as usize);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(read_exact(&mut r)?) as usize);
            }
            let len: usize = shape.iter().product();
            let width = match dtype {
                0 => 4,
                1 | 2 => 8,
                3 => 1,
                other => return Err(corrupt(format!("unknown dtype {other} in {name}"))),
            };
            let mut raw = vec![0u8; len * width];
            r.read_exact(&mut raw).map_err(|e| corrupt(format!("{name}: {e}")))?;
            let data = match dtype {
                0 => Data::F32(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect()),
                1 => Data::F64(raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect()),
                2 => Data::U64(raw.chunks_exact(8).map(|b| u64::from_le_bytes(b.try_into().unwrap())).collect()),
                _ => Data::Bytes(raw),
            };
            entries.insert(name, Entry { shape, data });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| corrupt(e.to_string()))? != 0 {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self { step, entries })
    }

    pub fn save(&self, path: &Path) -> AppResult<()> {
        let mut f = std::fs::File::create(path).map_err(|e| AppError::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| AppError::io(path, e))
    }

    pub fn load(path: &Path) -> AppResult<Self> {
        let f = std::fs::File::open(path).map_err(|e| AppError::io(path, e))?;
        Self::from_reader(std::io::BufReader::new(f))
    }
}

/// Everything needed to resume or evaluate after a stage.
#[derive(Clone, Debug)]
pub struct StageCheckpoint {
    pub stage: u8,
    pub step: u64,
    pub config: PipelineConfig,
    pub model: SegModel<Float>,
    pub banks: Option<Banks>,
    pub thresholds: Option<ThresholdTable>,
}

fn level_name(level: Level) -> &'static str {
    match level {
        Level::Feature => "feature",
        Level::Output => "output",
    }
}

fn put_bank(ck: &mut Checkpoint, bank: &PrototypeBank) {
    let prefix = format!("bank.{}", level_name(bank.level));
    let (c, d) = (bank.num_classes(), bank.dim());
    ck.insert(&format!("{prefix}.vectors"), vec![c, d], Data::F64(bank.raw_vectors().to_vec()));
    ck.insert(&format!("{prefix}.counts"), vec![c], Data::U64(bank.counts().to_vec()));
    let mask = bank.initialized_mask().into_iter().map(u8::from).collect();
    ck.insert(&format!("{prefix}.mask"), vec![c], Data::Bytes(mask));
}

fn take_bank(ck: &Checkpoint, level: Level) -> AppResult<Option<PrototypeBank>> {
    let prefix = format!("bank.{}", level_name(level));
    let Some(vectors) = ck.entries.get(&format!("{prefix}.vectors")) else {
        return Ok(None);
    };
    let counts = ck.get(&format!("{prefix}.counts"))?;
    let (Data::F64(v), Data::U64(n), [_, dim]) = (&vectors.data, &counts.data, vectors.shape.as_slice()) else {
        return Err(corrupt(format!("{prefix} has the wrong layout")));
    };
    PrototypeBank::from_parts(level, *dim, v.clone(), n.clone()).map(Some).map_err(|e| corrupt(e.to_string()))
}

impl StageCheckpoint {
    pub fn to_checkpoint(&self) -> AppResult<Checkpoint> {
        let mut ck = Checkpoint { step: self.step, ..Checkpoint::default() };
        let config = serde_json::to_vec(&self.config).map_err(|e| AppError::Runtime(e.to_string()))?;
        ck.insert("config.json", vec![config.len()], Data::Bytes(config));
        ck.insert("stage", vec![1], Data::Bytes(vec![self.stage]));
        for ((name, shape), values) in self.model.param_specs().into_iter().zip(self.model.params()) {
            ck.insert(&format!("model.{name}"), shape, Data::F32(values.to_vec()));
        }
        if let Some(banks) = &self.banks {
            banks.feature.iter().chain(&banks.output).for_each(|b| put_bank(&mut ck, b));
        }
        if let Some(t) = &self.thresholds {
            let values = t.thresholds.iter().map(|v| v.unwrap_or(f64::NAN)).collect::<Vec<_>>();
            ck.insert("thresholds.eta", vec![1], Data::F64(vec![t.eta]));
            ck.insert("thresholds.values", vec![values.len()], Data::F64(values));
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> AppResult<Self> {
        let Data::Bytes(raw) = &ck.get("config.json")?.data else {
            return Err(corrupt("config.json is not a byte entry"));
        };
        let config: PipelineConfig = serde_json::from_slice(raw).map_err(|e| corrupt(format!("config: {e}")))?;
        let stage = match &ck.get("stage")?.data {
            Data::Bytes(b) if b.len() == 1 => b[0],
            _ => return Err(corrupt("stage entry")),
        };
        let mut model = SegModel::<Float>::new(config.model.clone(), 0).map_err(|e| corrupt(e.to_string()))?;
        let specs = model.param_specs();
        for ((name, shape), slot) in specs.into_iter().zip(model.params_mut()) {
            let entry = ck.get(&format!("model.{name}"))?;
            match &entry.data {
                Data::F32(v) if entry.shape == shape => slot.clone_from(v),
                _ => return Err(corrupt(format!("parameter {name} has shape {:?}, expected {shape:?}", entry.shape))),
            }
        }
        let feature = take_bank(ck, Level::Feature)?;
        let output = take_bank(ck, Level::Output)?;
        let banks = (feature.is_some() || output.is_some()).then_some(Banks { feature, output });
        let thresholds = match (ck.entries.get("thresholds.eta"), ck.entries.get("thresholds.values")) {
            (Some(Entry { data: Data::F64(eta), .. }), Some(Entry { data: Data::F64(values), .. })) => Some(ThresholdTable {
                eta: eta.first().copied().unwrap_or(f64::NAN),
                thresholds: values.iter().map(|&v| (!v.is_nan()).then_some(v)).collect(),
            }),
            (None, None) => None,
            _ => return Err(corrupt("threshold entries")),
        };
        Ok(Self { stage, step: ck.step, config, model, banks, thresholds })
    }

    pub fn save(&self, path: &Path) -> AppResult<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> AppResult<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
