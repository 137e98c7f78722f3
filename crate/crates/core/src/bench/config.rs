use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::BenchError;

/// Student initialization strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// Pruned teacher weights as they are.
    Pruned,
    /// Pruned teacher weights after square-root singular value scaling.
    Scaled,
    /// Fresh He-initialized weights.
    RandomHe,
}

impl InitKind {
    pub const ALL: [InitKind; 3] = [InitKind::Pruned, InitKind::Scaled, InitKind::RandomHe];

    pub fn label(self) -> &'static str {
        match self {
            InitKind::Pruned => "pruned",
            InitKind::Scaled => "scaled",
            InitKind::RandomHe => "random_he",
        }
    }
}

impl fmt::Display for InitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for InitKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        InitKind::ALL
            .into_iter()
            .find(|k| k.label() == s)
            .ok_or_else(|| format!("unknown init {s:?}, expected pruned|scaled|random_he"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// First seed; runs use `seed, seed + 1, ..`.
    pub seed: u64,
    pub num_seeds: usize,
    pub dims: Vec<usize>,
    /// Hidden width of the task net the teacher learns.
    pub task_width: usize,
    /// Fraction of hidden channels removed.
    pub sparsity: f64,
    pub teacher_steps: usize,
    pub teacher_lr: f64,
    pub teacher_target_mse: f64,
    pub student_steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub eval_size: usize,
    pub log_every: usize,
    pub inits: Vec<InitKind>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_seeds: 5,
            dims: vec![8, 32, 32, 8],
            task_width: 2,
            sparsity: 0.5,
            teacher_steps: 20000,
            teacher_lr: 1e-2,
            teacher_target_mse: 1e-3,
            student_steps: 3000,
            lr: 1e-3,
            batch: 64,
            eval_size: 512,
            log_every: 10,
            inits: InitKind::ALL.to_vec(),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |msg: String| Err(BenchError::Config(msg));
        if !(self.sparsity > 0.0 && self.sparsity < 1.0) {
            return bad(format!("sparsity {} must lie in (0, 1)", self.sparsity));
        }
        if self.dims.len() < 2 || self.dims.contains(&0) {
            return bad(format!("invalid dims {:?}", self.dims));
        }
        if self.num_seeds == 0 || self.task_width == 0 || self.batch == 0 || self.eval_size == 0 || self.log_every == 0
        {
            return bad("num_seeds, task_width, batch, eval_size and log_every must be positive".into());
        }
        if !(self.lr >= 0.0) || !(self.teacher_lr >= 0.0) {
            return bad("learning rates must be non-negative".into());
        }
        if self.inits.is_empty() {
            return bad("at least one init is required".into());
        }
        Ok(())
    }

    /// Parses flat `key = value` lines; `#` starts a comment. Keys not given
    /// keep their defaults. Lists are comma separated.
    pub fn parse(text: &str) -> Result<Self, BenchError> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| BenchError::Config(format!("line {}: {msg}", lineno + 1));
            let (key, value) =
                line.split_once('=').ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            fn num<T: FromStr>(v: &str) -> Result<T, String>
            where
                T::Err: fmt::Display,
            {
                v.parse::<T>().map_err(|e| format!("bad value {v:?}: {e}"))
            }
            fn list<T: FromStr>(v: &str) -> Result<Vec<T>, String>
            where
                T::Err: fmt::Display,
            {
                v.split(',').map(|s| num::<T>(s.trim())).collect()
            }
            let res: Result<(), String> = (|| {
                match key {
                    "seed" => cfg.seed = num(value)?,
                    "num_seeds" => cfg.num_seeds = num(value)?,
                    "dims" => cfg.dims = list(value)?,
                    "task_width" => cfg.task_width = num(value)?,
                    "sparsity" => cfg.sparsity = num(value)?,
                    "teacher_steps" => cfg.teacher_steps = num(value)?,
                    "teacher_lr" => cfg.teacher_lr = num(value)?,
                    "teacher_target_mse" => cfg.teacher_target_mse = num(value)?,
                    "student_steps" => cfg.student_steps = num(value)?,
                    "lr" => cfg.lr = num(value)?,
                    "batch" => cfg.batch = num(value)?,
                    "eval_size" => cfg.eval_size = num(value)?,
                    "log_every" => cfg.log_every = num(value)?,
                    "inits" => cfg.inits = list(value)?,
                    _ => return Err(format!("unknown key {key:?}")),
                }
                Ok(())
            })();
            res.map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Inverse of [`BenchConfig::parse`].
    pub fn to_text(&self) -> String {
        let join = |v: Vec<String>| v.join(", ");
        format!(
            "seed = {}\nnum_seeds = {}\ndims = {}\ntask_width = {}\nsparsity = {}\nteacher_steps = {}\nteacher_lr = {}\n\
             teacher_target_mse = {}\nstudent_steps = {}\nlr = {}\nbatch = {}\neval_size = {}\n\
             log_every = {}\ninits = {}\n",
            self.seed,
            self.num_seeds,
            join(self.dims.iter().map(usize::to_string).collect()),
            self.task_width,
            self.sparsity,
            self.teacher_steps,
            self.teacher_lr,
            self.teacher_target_mse,
            self.student_steps,
            self.lr,
            self.batch,
            self.eval_size,
            self.log_every,
            join(self.inits.iter().map(|i| i.label().to_string()).collect()),
        )
    }
}
