//! Binary checkpoints: architecture, parameters, both branches' running
//! statistics and, optionally, the full training state.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uad_autograd::Tensor;

use crate::error::{Result, UadError};
use crate::model::{ArchConfig, RunningStats, SplitClassifier};
use crate::statistics::HistoryStore;
use crate::training::{Sgd, TrainConfig, TrainState};

const MAGIC: &[u8; 8] = b"UADCKPT1";
const VERSION: u32 = 1;

fn write_bytes(w: &mut impl Write, b: &[u8]) -> std::io::Result<()> {
    w.write_u64::<LittleEndian>(b.len() as u64)?;
    w.write_all(b)
}

fn write_tensor(w: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(t.ndim() as u32)?;
    for &d in t.shape() {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    for &v in t.data() {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn fail(&self, what: &str) -> UadError {
        UadError::Checkpoint {
            path: Default::default(),
            message: format!("truncated or corrupt while reading {what}"),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        self.inner.read_u8().map_err(|_| self.fail(what))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        self.inner.read_u32::<LittleEndian>().map_err(|_| self.fail(what))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        self.inner.read_u64::<LittleEndian>().map_err(|_| self.fail(what))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        self.inner.read_f64::<LittleEndian>().map_err(|_| self.fail(what))
    }

    fn bytes(&mut self, what: &str) -> Result<Vec<u8>> {
        let n = self.u64(what)? as usize;
        if n > 1 << 32 {
            return Err(self.fail(what));
        }
        let mut b = vec![0u8; n];
        self.inner.read_exact(&mut b).map_err(|_| self.fail(what))?;
        Ok(b)
    }

    fn tensor(&mut self, what: &str) -> Result<Tensor> {
        let nd = self.u32(what)? as usize;
        if nd > 8 {
            return Err(self.fail(what));
        }
        let shape = (0..nd)
            .map(|_| self.u64(what).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        if n > 1 << 31 {
            return Err(self.fail(what));
        }
        let mut data = vec![0.0; n];
        self.inner
            .read_f64_into::<LittleEndian>(&mut data)
            .map_err(|_| self.fail(what))?;
        Ok(Tensor::new(&shape, data))
    }
}

fn write_model(w: &mut impl Write, model: &SplitClassifier) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    let arch = serde_json::to_vec(model.config()).expect("architecture serializes");
    write_bytes(w, &arch)?;
    w.write_u64::<LittleEndian>(model.params().len() as u64)?;
    for (info, p) in model.param_info().iter().zip(model.params()) {
        write_bytes(w, info.name.as_bytes())?;
        write_tensor(w, p)?;
    }
    w.write_u64::<LittleEndian>(model.running_stats().len() as u64)?;
    for layer in model.running_stats() {
        for branch in layer {
            write_tensor(w, &branch.mean)?;
            write_tensor(w, &branch.var)?;
        }
    }
    Ok(())
}

fn read_model<R: Read>(r: &mut Reader<R>) -> Result<SplitClassifier> {
    let mut magic = [0u8; 8];
    r.inner.read_exact(&mut magic).map_err(|_| r.fail("header"))?;
    if &magic != MAGIC {
        return Err(UadError::Checkpoint {
            path: Default::default(),
            message: "not a checkpoint file (bad magic)".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(UadError::Checkpoint {
            path: Default::default(),
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let arch: ArchConfig = serde_json::from_slice(&r.bytes("architecture")?).map_err(|e| UadError::Checkpoint {
        path: Default::default(),
        message: format!("architecture block: {e}"),
    })?;
    let n = r.u64("parameter count")? as usize;
    let mut params = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let _name = r.bytes("parameter name")?;
        params.push(r.tensor("parameter")?);
    }
    let layers = r.u64("running statistics")? as usize;
    let mut running = Vec::with_capacity(layers.min(4096));
    for _ in 0..layers {
        let mut pair = Vec::with_capacity(2);
        for _ in 0..2 {
            let mean = r.tensor("running mean")?;
            let var = r.tensor("running variance")?;
            pair.push(RunningStats { mean, var });
        }
        let aux = pair.pop().expect("two branches");
        let primary = pair.pop().expect("two branches");
        running.push([primary, aux]);
    }
    SplitClassifier::from_parts(arch, params, running)
}

fn write_state(w: &mut impl Write, state: &TrainState) -> std::io::Result<()> {
    write_model(w, &state.model)?;
    w.write_u8(1)?;
    write_bytes(w, &serde_json::to_vec(&state.config).expect("config serializes"))?;
    w.write_u32::<LittleEndian>(state.epoch)?;
    w.write_u64::<LittleEndian>(state.step)?;
    match state.best_robust {
        Some(b) => {
            w.write_u8(1)?;
            w.write_f64::<LittleEndian>(b)?;
        }
        None => w.write_u8(0)?,
    }
    w.write_all(&state.rng.get_seed())?;
    w.write_u64::<LittleEndian>(state.rng.get_stream())?;
    w.write_u128::<LittleEndian>(state.rng.get_word_pos())?;
    w.write_f64::<LittleEndian>(state.optimizer.momentum)?;
    w.write_f64::<LittleEndian>(state.optimizer.weight_decay)?;
    w.write_u64::<LittleEndian>(state.optimizer.buffers.len() as u64)?;
    for (b, d) in state.optimizer.buffers.iter().zip(&state.optimizer.decay) {
        w.write_u8(u8::from(*d))?;
        write_tensor(w, b)?;
    }
    state.history.write_to(w)
}

fn read_state<R: Read>(r: &mut Reader<R>) -> Result<TrainState> {
    let model = read_model(r)?;
    if r.u8("state flag")? != 1 {
        return Err(UadError::Checkpoint {
            path: Default::default(),
            message: "checkpoint holds a model only, no training state".into(),
        });
    }
    let config: TrainConfig = serde_json::from_slice(&r.bytes("train config")?).map_err(|e| UadError::Checkpoint {
        path: Default::default(),
        message: format!("train config block: {e}"),
    })?;
    let epoch = r.u32("epoch")?;
    let step = r.u64("step")?;
    let best_robust = if r.u8("best flag")? == 1 {
        Some(r.f64("best")?)
    } else {
        None
    };
    let mut seed = [0u8; 32];
    r.inner.read_exact(&mut seed).map_err(|_| r.fail("rng seed"))?;
    let stream = r.u64("rng stream")?;
    let word_pos = r
        .inner
        .read_u128::<LittleEndian>()
        .map_err(|_| r.fail("rng position"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    let momentum = r.f64("momentum")?;
    let weight_decay = r.f64("weight decay")?;
    let n = r.u64("optimizer buffers")? as usize;
    if n != model.params().len() {
        return Err(r.fail("optimizer buffers"));
    }
    let mut buffers = Vec::with_capacity(n);
    let mut decay = Vec::with_capacity(n);
    for _ in 0..n {
        decay.push(r.u8("decay flag")? == 1);
        buffers.push(r.tensor("optimizer buffer")?);
    }
    let history = HistoryStore::read_from(&mut r.inner)?;
    Ok(TrainState {
        config,
        model,
        optimizer: Sgd {
            momentum,
            weight_decay,
            buffers,
            decay,
        },
        history,
        rng,
        epoch,
        step,
        best_robust,
    })
}

pub fn model_to_bytes(model: &SplitClassifier) -> Vec<u8> {
    let mut out = Vec::new();
    write_model(&mut out, model).expect("writing to memory");
    out.push(0);
    out
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<SplitClassifier> {
    read_model(&mut Reader { inner: bytes })
}

pub fn state_to_bytes(state: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    write_state(&mut out, state).expect("writing to memory");
    out
}

pub fn state_from_bytes(bytes: &[u8]) -> Result<TrainState> {
    read_state(&mut Reader { inner: bytes })
}

fn with_path(path: &Path, e: UadError) -> UadError {
    match e {
        UadError::Checkpoint { message, .. } => UadError::Checkpoint {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    }
}

fn open(path: &Path) -> Result<Reader<BufReader<File>>> {
    let f = File::open(path).map_err(|e| UadError::io(format!("opening checkpoint {}", path.display()), e))?;
    Ok(Reader {
        inner: BufReader::new(f),
    })
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let tmp = path.with_extension("bin.tmp");
    let io = |e| UadError::io(format!("writing checkpoint {}", path.display()), e);
    {
        let mut w = BufWriter::new(File::create(&tmp).map_err(io)?);
        f(&mut w).map_err(io)?;
        w.flush().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn save_model(path: &Path, model: &SplitClassifier) -> Result<()> {
    write_file(path, |w| {
        write_model(w, model)?;
        w.write_u8(0)
    })
}

/// Load the model from either kind of checkpoint.
pub fn load_model(path: &Path) -> Result<SplitClassifier> {
    read_model(&mut open(path)?).map_err(|e| with_path(path, e))
}

pub fn save_state(path: &Path, state: &TrainState) -> Result<()> {
    write_file(path, |w| write_state(w, state))
}

pub fn load_state(path: &Path) -> Result<TrainState> {
    read_state(&mut open(path)?).map_err(|e| with_path(path, e))
}
