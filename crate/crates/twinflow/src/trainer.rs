//! Training loop: mixed-batch loss, Adam with global-norm clipping, EMA
//! weights, and a binary checkpoint format that resumes bitwise.

use crate::data::DatasetSpec;
use crate::losses::{mixed_step_loss, Batch, LossError, MixConfig, RectifyWeighting};
use crate::model::{ema_update, ModelError, NetConfig, Param, ParamSnapshot, VelocityNet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::io::{self, Read, Write};
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("non-finite loss at step {step}: {value}")]
    Diverged { step: usize, value: f64 },
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Full run configuration; round-trips through flat `key = value` text.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub dataset: DatasetSpec,
    /// Ring8 only: condition the model on the mode label.
    pub conditional: bool,
    pub hidden: usize,
    pub depth: usize,
    pub n_freq: usize,
    pub lambda: f64,
    pub rectify_weighting: RectifyWeighting,
    pub fake_r_zero: bool,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub ema_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: DatasetSpec::Ring8 { conditional: false },
            conditional: false,
            hidden: 256,
            depth: 4,
            n_freq: 64,
            lambda: 1.0 / 3.0,
            rectify_weighting: RectifyWeighting::None,
            fake_r_zero: false,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: 1.0,
            ema_decay: 0.99,
            batch_size: 256,
            steps: 10_000,
            seed: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    /// Effective dataset after the `conditional` flag is applied.
    pub fn dataset_spec(&self) -> DatasetSpec {
        match (&self.dataset, self.conditional) {
            (DatasetSpec::Ring8 { .. }, c) => DatasetSpec::Ring8 { conditional: c },
            (other, _) => other.clone(),
        }
    }

    pub fn net_config(&self) -> NetConfig {
        let spec = self.dataset_spec();
        NetConfig {
            data_dim: spec.dim(),
            hidden: self.hidden,
            depth: self.depth,
            n_freq: self.n_freq,
            n_classes: spec.n_classes(),
        }
    }

    pub fn mix_config(&self) -> MixConfig {
        MixConfig {
            lambda: self.lambda,
            rectify_weighting: self.rectify_weighting,
            fake_r_zero: self.fake_r_zero,
        }
    }

    /// Parse flat `key = value` lines; `#` starts a comment, blank lines are
    /// skipped, unknown keys are rejected, unset keys take defaults.
    pub fn parse(text: &str) -> Result<Self, TrainerError> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                TrainerError::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |e: &dyn std::fmt::Display| {
                TrainerError::Config(format!("line {}: {key}: {e}", lineno + 1))
            };
            match key {
                "dataset" => cfg.dataset = DatasetSpec::from_str(value).map_err(|e| bad(&e))?,
                "conditional" => cfg.conditional = value.parse().map_err(|e| bad(&e))?,
                "hidden" => cfg.hidden = value.parse().map_err(|e| bad(&e))?,
                "depth" => cfg.depth = value.parse().map_err(|e| bad(&e))?,
                "n_freq" => cfg.n_freq = value.parse().map_err(|e| bad(&e))?,
                "lambda" => cfg.lambda = value.parse().map_err(|e| bad(&e))?,
                "rectify_weighting" => {
                    cfg.rectify_weighting = value.parse().map_err(|e: String| bad(&e))?
                }
                "fake_r_zero" => cfg.fake_r_zero = value.parse().map_err(|e| bad(&e))?,
                "lr" => cfg.lr = value.parse().map_err(|e| bad(&e))?,
                "beta1" => cfg.beta1 = value.parse().map_err(|e| bad(&e))?,
                "beta2" => cfg.beta2 = value.parse().map_err(|e| bad(&e))?,
                "adam_eps" => cfg.adam_eps = value.parse().map_err(|e| bad(&e))?,
                "weight_decay" => cfg.weight_decay = value.parse().map_err(|e| bad(&e))?,
                "grad_clip" => cfg.grad_clip = value.parse().map_err(|e| bad(&e))?,
                "ema_decay" => cfg.ema_decay = value.parse().map_err(|e| bad(&e))?,
                "batch_size" => cfg.batch_size = value.parse().map_err(|e| bad(&e))?,
                "steps" => cfg.steps = value.parse().map_err(|e| bad(&e))?,
                "seed" => cfg.seed = value.parse().map_err(|e| bad(&e))?,
                "log_every" => cfg.log_every = value.parse().map_err(|e| bad(&e))?,
                other => {
                    return Err(TrainerError::Config(format!(
                        "line {}: unknown key '{other}'",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrainerError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(TrainerError::Config(format!(
                "lambda must be in [0, 1], got {}",
                self.lambda
            )));
        }
        if self.batch_size < 2 {
            return Err(TrainerError::Config("batch_size must be >= 2".into()));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(TrainerError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(TrainerError::Config(format!(
                "ema_decay must be in [0, 1), got {}",
                self.ema_decay
            )));
        }
        if self.hidden == 0 || self.depth == 0 || self.n_freq == 0 {
            return Err(TrainerError::Config("hidden, depth, n_freq must be positive".into()));
        }
        Ok(())
    }

    /// Render every key so the resolved configuration can be echoed.
    pub fn to_key_values(&self) -> String {
        let weighting = match self.rectify_weighting {
            RectifyWeighting::None => "none",
            RectifyWeighting::KlWeight => "kl_weight",
        };
        format!(
            "dataset = {}\nconditional = {}\nhidden = {}\ndepth = {}\nn_freq = {}\n\
             lambda = {:.17e}\nrectify_weighting = {}\nfake_r_zero = {}\n\
             lr = {:.17e}\nbeta1 = {:.17e}\nbeta2 = {:.17e}\nadam_eps = {:.17e}\n\
             weight_decay = {:.17e}\ngrad_clip = {:.17e}\nema_decay = {:.17e}\n\
             batch_size = {}\nsteps = {}\nseed = {}\nlog_every = {}\n",
            self.dataset,
            self.conditional,
            self.hidden,
            self.depth,
            self.n_freq,
            self.lambda,
            weighting,
            self.fake_r_zero,
            self.lr,
            self.beta1,
            self.beta2,
            self.adam_eps,
            self.weight_decay,
            self.grad_clip,
            self.ema_decay,
            self.batch_size,
            self.steps,
            self.seed,
            self.log_every,
        )
    }
}

/// Loss breakdown and gradient norm for one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub base: f64,
    pub adv: f64,
    pub rectify: f64,
    pub total: f64,
    pub grad_norm: f64,
}

/// Everything needed to continue training bitwise from a checkpoint.
pub struct Trainer {
    pub config: TrainConfig,
    pub net: VelocityNet,
    pub ema: ParamSnapshot,
    pub step: usize,
    adam_m: Vec<Vec<f64>>,
    adam_v: Vec<Vec<f64>>,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self, TrainerError> {
        config.validate()?;
        let net = VelocityNet::new(config.net_config(), config.seed);
        let ema = net.snapshot();
        let adam_m: Vec<Vec<f64>> = net.params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        let adam_v = adam_m.clone();
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Trainer { config, net, ema, step: 0, adam_m, adam_v, rng })
    }

    /// One optimization step. RNG draw order: data batch, then noise batch,
    /// then the loss-internal draws.
    pub fn step_once(&mut self) -> Result<LogRecord, TrainerError> {
        let spec = self.config.dataset_spec();
        let dim = spec.dim();
        let b = self.config.batch_size;
        let (x, labels) = spec.sample(b, &mut self.rng);
        let z: Vec<f64> = (0..b * dim).map(|_| self.rng.sample(StandardNormal)).collect();
        let batch = Batch {
            x,
            z,
            labels: (spec.n_classes() > 0).then_some(labels),
            dim,
            size: b,
        };

        let mix = self.config.mix_config();
        let mut tape = crate::autodiff::Tape::new();
        let (loss, breakdown, grads) = {
            let live = self.net.bind(&mut tape);
            let frozen = self.net.bind_frozen();
            let (loss, breakdown) =
                mixed_step_loss(&mut tape, &live, &frozen, &batch, &mix, &mut self.rng)?;
            let grad_map = tape.backward(&loss).map_err(LossError::from)?;
            (loss, breakdown, live.gradients(&grad_map))
        };
        if !loss.data[0].is_finite() {
            return Err(TrainerError::Diverged { step: self.step, value: loss.data[0] });
        }

        let grad_norm = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let clip_scale = if self.config.grad_clip > 0.0 && grad_norm > self.config.grad_clip {
            self.config.grad_clip / grad_norm
        } else {
            1.0
        };

        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let bias1 = 1.0 - b1.powf(t);
        let bias2 = 1.0 - b2.powf(t);
        for ((param, grad), (m, v)) in self
            .net
            .params
            .iter_mut()
            .zip(&grads)
            .zip(self.adam_m.iter_mut().zip(self.adam_v.iter_mut()))
        {
            for i in 0..param.data.len() {
                let g = grad[i] * clip_scale;
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                if self.config.weight_decay > 0.0 {
                    param.data[i] -= self.config.lr * self.config.weight_decay * param.data[i];
                }
                param.data[i] -= self.config.lr * m_hat / (v_hat.sqrt() + self.config.adam_eps);
            }
        }
        ema_update(&mut self.ema, &self.net, self.config.ema_decay)?;

        Ok(LogRecord {
            step: self.step,
            base: breakdown.base,
            adv: breakdown.adv,
            rectify: breakdown.rectify,
            total: breakdown.total,
            grad_norm,
        })
    }

    /// Run `steps` further optimization steps, returning every log record.
    pub fn run(&mut self, steps: usize) -> Result<Vec<LogRecord>, TrainerError> {
        let mut records = Vec::with_capacity(steps);
        for _ in 0..steps {
            records.push(self.step_once()?);
        }
        Ok(records)
    }

    pub fn ema_snapshot(&self) -> ParamSnapshot {
        self.ema.clone()
    }
}

// ---------------------------------------------------------------------------
// Checkpoint format (version 1, little-endian):
//   magic "TWFL", version u32
//   config text  (u32 length + utf-8, the key=value rendering)
//   step u64
//   rng seed [u8; 32], rng word_pos u128 (as 16 LE bytes)
//   4 param blocks: live, ema, adam_m, adam_v
// Each param block: count u32, then per entry name (u32 + utf-8),
// rank u8, dims (u64 each), data (u64 count + f64 LE values).
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"TWFL";
const FORMAT_VERSION: u32 = 1;

fn write_u32<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn write_params<W: Write>(w: &mut W, params: &[Param]) -> io::Result<()> {
    write_u32(w, params.len() as u32)?;
    for p in params {
        write_u32(w, p.name.len() as u32)?;
        w.write_all(p.name.as_bytes())?;
        let dims = p.shape.dims();
        w.write_all(&[dims.len() as u8])?;
        for &d in dims {
            write_u64(w, d as u64)?;
        }
        write_u64(w, p.data.len() as u64)?;
        for &v in &p.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_params<R: Read>(r: &mut R) -> Result<Vec<Param>, TrainerError> {
    let count = read_u32(r)? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| TrainerError::Checkpoint(format!("bad name: {e}")))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut dims = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            dims.push(read_u64(r)? as usize);
        }
        let shape = match dims.as_slice() {
            [n] if *n > 0 => crate::autodiff::Shape::vector(*n),
            [r, c] if *r > 0 && *c > 0 => crate::autodiff::Shape::matrix(*r, *c),
            other => {
                return Err(TrainerError::Checkpoint(format!(
                    "{name}: unsupported shape {other:?}"
                )))
            }
        };
        let len = read_u64(r)? as usize;
        if len != dims.iter().product::<usize>() {
            return Err(TrainerError::Checkpoint(format!(
                "{name}: data length {len} does not match shape {dims:?}"
            )));
        }
        let mut data = Vec::with_capacity(len);
        let mut buf = [0u8; 8];
        for _ in 0..len {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        params.push(Param { name, shape, data });
    }
    Ok(params)
}

impl Trainer {
    pub fn save<W: Write>(&self, w: &mut W) -> Result<(), TrainerError> {
        w.write_all(MAGIC)?;
        write_u32(w, FORMAT_VERSION)?;
        let cfg = self.config.to_key_values();
        write_u32(w, cfg.len() as u32)?;
        w.write_all(cfg.as_bytes())?;
        write_u64(w, self.step as u64)?;
        w.write_all(&self.rng.get_seed())?;
        w.write_all(&self.rng.get_word_pos().to_le_bytes())?;
        write_params(w, &self.net.params)?;
        write_params(w, &self.ema.params)?;
        let as_params = |buf: &[Vec<f64>]| -> Vec<Param> {
            self.net
                .params
                .iter()
                .zip(buf)
                .map(|(p, data)| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: data.clone(),
                })
                .collect()
        };
        write_params(w, &as_params(&self.adam_m))?;
        write_params(w, &as_params(&self.adam_v))?;
        Ok(())
    }

    pub fn save_to_path(&self, path: &std::path::Path) -> Result<(), TrainerError> {
        let mut file = io::BufWriter::new(std::fs::File::create(path)?);
        self.save(&mut file)?;
        file.flush()?;
        Ok(())
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Self, TrainerError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(TrainerError::Checkpoint("bad magic (not a checkpoint)".into()));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(TrainerError::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let cfg_len = read_u32(r)? as usize;
        let mut cfg_bytes = vec![0u8; cfg_len];
        r.read_exact(&mut cfg_bytes)?;
        let cfg_text = String::from_utf8(cfg_bytes)
            .map_err(|e| TrainerError::Checkpoint(format!("bad config text: {e}")))?;
        let config = TrainConfig::parse(&cfg_text)?;
        let step = read_u64(r)? as usize;
        let mut seed = [0u8; 32];
        r.read_exact(&mut seed)?;
        let mut pos = [0u8; 16];
        r.read_exact(&mut pos)?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(u128::from_le_bytes(pos));

        let live = read_params(r)?;
        let ema = read_params(r)?;
        let m = read_params(r)?;
        let v = read_params(r)?;

        let mut net = VelocityNet::new(config.net_config(), config.seed);
        if live.len() != net.params.len() {
            return Err(TrainerError::Checkpoint(format!(
                "parameter count {} does not match architecture ({})",
                live.len(),
                net.params.len()
            )));
        }
        net.load_snapshot(&ParamSnapshot { params: live })?;
        let align = |stored: Vec<Param>, net: &VelocityNet| -> Result<Vec<Vec<f64>>, TrainerError> {
            net.params
                .iter()
                .zip(stored)
                .map(|(p, s)| {
                    if p.name != s.name || p.data.len() != s.data.len() {
                        Err(TrainerError::Checkpoint(format!(
                            "optimizer state for '{}' does not match parameter '{}'",
                            s.name, p.name
                        )))
                    } else {
                        Ok(s.data)
                    }
                })
                .collect()
        };
        let adam_m = align(m, &net)?;
        let adam_v = align(v, &net)?;
        Ok(Trainer { config, net, ema: ParamSnapshot { params: ema }, step, adam_m, adam_v, rng })
    }

    pub fn load_from_path(path: &std::path::Path) -> Result<Self, TrainerError> {
        let mut file = io::BufReader::new(std::fs::File::open(path)?);
        Self::load(&mut file)
    }
}
