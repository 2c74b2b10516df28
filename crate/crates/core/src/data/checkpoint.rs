use std::path::Path;

use super::bytes::{checked_u32, put_f32s, put_f64, put_u16, put_u32, put_u64};
use super::{atomic_write, read_file, ByteReader};
use crate::error::{Error, Result};
use crate::model::{expected_shapes, ModelConfig, Parameters};
use crate::tensor::Tensor;
use crate::train::{OptimizerKind, OptimizerState, PlateauScheduler};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Where training stands, enough to resume exactly.
#[derive(Clone, Debug, PartialEq)]
#[derive(Default)]
pub struct Progress {
    pub epoch: u64,
    pub step: u64,
    /// Batches already consumed in `epoch`.
    pub batch_in_epoch: u64,
    pub scheduler: PlateauScheduler,
}


#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Parameters,
    pub optimizer: Option<OptimizerState>,
    pub progress: Progress,
}

fn sorted_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, bool)> {
    let mut s = expected_shapes(cfg);
    s.sort_by(|a, b| a.0.cmp(&b.0));
    s
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let shapes = sorted_shapes(&ck.config);
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    let text = ck.config.to_string();
    put_u32(&mut out, checked_u32(text.len(), "config length")?);
    out.extend_from_slice(text.as_bytes());

    for (name, shape, _) in &shapes {
        let t = ck.params.require(name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::invalid(format!(
                "parameter `{name}` has shape {:?}, config expects {shape:?}",
                t.shape()
            )));
        }
        put_u16(&mut out, name.len() as u16);
        out.extend_from_slice(name.as_bytes());
        out.push(shape.len() as u8);
        for &d in shape {
            put_u32(&mut out, checked_u32(d, "dimension")?);
        }
        put_f32s(&mut out, t.data());
    }

    match &ck.optimizer {
        None => out.push(0),
        Some(opt) => {
            opt.check(&ck.params)?;
            out.push(opt.kind.code());
            put_u64(&mut out, opt.step);
            for (name, _, trainable) in &shapes {
                if *trainable {
                    put_f32s(&mut out, &opt.first[name]);
                    put_f32s(&mut out, &opt.second[name]);
                }
            }
        }
    }

    let p = &ck.progress;
    put_u64(&mut out, p.epoch);
    put_u64(&mut out, p.step);
    put_u64(&mut out, p.batch_in_epoch);
    put_f64(&mut out, p.scheduler.lr);
    put_f64(&mut out, p.scheduler.best);
    put_u64(&mut out, p.scheduler.stale);
    put_f64(&mut out, p.scheduler.factor);
    put_u64(&mut out, p.scheduler.patience);
    put_f64(&mut out, p.scheduler.min_lr);
    Ok(out)
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    atomic_write(path, &encode_checkpoint(ck)?)
}

fn parse_config(text: &str) -> std::result::Result<ModelConfig, String> {
    let mut cfg = ModelConfig::default();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| format!("config line `{line}` has no `=`"))?;
        match cfg.set(k.trim(), v.trim()) {
            Ok(true) => {}
            Ok(false) => return Err(format!("unknown config key `{}`", k.trim())),
            Err(e) => return Err(e.to_string()),
        }
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

/// Parses a checkpoint buffer; `path` only labels errors. With `expect`,
/// the stored tensors must match that config and the first divergent one
/// is named.
pub fn decode_checkpoint(buf: &[u8], path: &Path, expect: Option<&ModelConfig>) -> Result<Checkpoint> {
    let mut r = ByteReader::new(buf, path);
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(r.error_at(0, "bad magic, expected SGCK"));
    }
    let at = r.offset();
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(r.error_at(at, format!("unsupported version {version}")));
    }
    let len = r.u32("config length")? as usize;
    let at = r.offset();
    let text = r.utf8(len, "config text")?;
    let config = parse_config(&text).map_err(|e| r.error_at(at, e))?;
    let shapes = sorted_shapes(&config);

    if let Some(want) = expect {
        let mine = sorted_shapes(want);
        for i in 0..shapes.len().max(mine.len()) {
            let (a, b) = (shapes.get(i), mine.get(i));
            if a.map(|x| (&x.0, &x.1)) != b.map(|x| (&x.0, &x.1)) {
                let (name, found, wanted) = match (a, b) {
                    (Some(a), Some(b)) if a.0 == b.0 => (a.0.clone(), format!("{:?}", a.1), format!("{:?}", b.1)),
                    (Some(a), Some(b)) if a.0 < b.0 => (a.0.clone(), format!("{:?}", a.1), "no such tensor".into()),
                    (Some(_), Some(b)) => (b.0.clone(), "no such tensor".into(), format!("{:?}", b.1)),
                    (Some(a), None) => (a.0.clone(), format!("{:?}", a.1), "no such tensor".into()),
                    (None, Some(b)) => (b.0.clone(), "no such tensor".into(), format!("{:?}", b.1)),
                    (None, None) => unreachable!(),
                };
                return Err(Error::invalid(format!(
                    "{}: tensor `{name}` is {found} in the checkpoint but the current config expects {wanted}",
                    path.display()
                )));
            }
        }
    }

    let mut params = Parameters::new();
    for (name, shape, trainable) in &shapes {
        let at = r.offset();
        let n = r.u16("tensor name length")? as usize;
        let got = r.utf8(n, "tensor name")?;
        if &got != name {
            return Err(r.error_at(at, format!("expected tensor `{name}`, found `{got}`")));
        }
        let at = r.offset();
        let rank = r.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dimension")? as usize);
        }
        if &dims != shape {
            return Err(r.error_at(at, format!("tensor `{name}` has dims {dims:?}, its config implies {shape:?}")));
        }
        let data = r.f32s(shape.iter().product(), "tensor data")?;
        let mut t = Tensor::new(dims, data)?;
        t.set_requires_grad(*trainable);
        params.insert(name.clone(), t);
    }

    let at = r.offset();
    let optimizer = match r.u8("optimizer kind")? {
        0 => None,
        c => {
            let kind = OptimizerKind::from_code(c).ok_or_else(|| r.error_at(at, format!("unknown optimizer kind {c}")))?;
            let mut st = OptimizerState::new(kind, &params);
            st.step = r.u64("optimizer step")?;
            for (name, shape, trainable) in &shapes {
                if *trainable {
                    let n = shape.iter().product();
                    st.first.insert(name.clone(), r.f32s(n, "optimizer buffer")?);
                    st.second.insert(name.clone(), r.f32s(n, "optimizer buffer")?);
                }
            }
            Some(st)
        }
    };

    let epoch = r.u64("epoch")?;
    let step = r.u64("step")?;
    let batch_in_epoch = r.u64("batch index")?;
    let scheduler = PlateauScheduler {
        lr: r.f64("learning rate")?,
        best: r.f64("best metric")?,
        stale: r.u64("stale count")?,
        factor: r.f64("decay factor")?,
        patience: r.u64("patience")?,
        min_lr: r.f64("min learning rate")?,
    };
    if !r.at_end() {
        return Err(r.error(format!("{} trailing bytes", r.remaining())));
    }
    Ok(Checkpoint {
        config,
        params,
        optimizer,
        progress: Progress {
            epoch,
            step,
            batch_in_epoch,
            scheduler,
        },
    })
}

pub fn load_checkpoint(path: &Path, expect: Option<&ModelConfig>) -> Result<Checkpoint> {
    let buf = read_file(path)?;
    decode_checkpoint(&buf, path, expect)
}
