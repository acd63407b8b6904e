//! Gradient-ascent optimizers over the dense logit table.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::policy::{expect_line, header_value, read_matrix, write_matrix, PolicyParams, SparseGrad};
use crate::scalar::Scalar;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::Config(format!("unknown optimizer {s:?} (expected sgd or adam)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer<T> {
    Sgd,
    /// Dense moments; rows without gradient still decay.
    Adam { m: Vec<T>, v: Vec<T>, t: u64 },
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, num_params: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam { m: vec![T::zero(); num_params], v: vec![T::zero(); num_params], t: 0 },
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Optimizer::Sgd => OptimizerKind::Sgd,
            Optimizer::Adam { .. } => OptimizerKind::Adam,
        }
    }

    /// One ascent step along `grad`.
    pub fn step(&mut self, params: &mut PolicyParams<T>, grad: &SparseGrad<T>, lr: T) {
        match self {
            Optimizer::Sgd => params.apply(grad, lr),
            Optimizer::Adam { m, v, t } => {
                *t += 1;
                let (b1, b2, eps) = (T::lit(BETA1), T::lit(BETA2), T::lit(ADAM_EPS));
                let bc1 = T::one() - b1.powi(*t as i32);
                let bc2 = T::one() - b2.powi(*t as i32);
                let dense = grad.to_dense(params.num_rows());
                for (i, (theta, g)) in params.logits_mut().iter_mut().zip(dense).enumerate() {
                    m[i] = b1 * m[i] + (T::one() - b1) * g;
                    v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    *theta = *theta + lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }

    /// State file: `rlep-optimizer v1`, `kind`, and for adam the step count
    /// followed by the first- and second-moment tables in policy layout.
    pub fn write_to<W: Write>(&self, mut w: W, width: usize) -> std::io::Result<()> {
        writeln!(w, "rlep-optimizer v1")?;
        match self {
            Optimizer::Sgd => writeln!(w, "sgd"),
            Optimizer::Adam { m, v, t } => {
                writeln!(w, "adam")?;
                writeln!(w, "t {t}")?;
                writeln!(w, "len {}", m.len())?;
                write_matrix(&mut w, m, width)?;
                write_matrix(&mut w, v, width)
            }
        }
    }

    pub fn read_from<R: BufRead>(r: R, width: usize) -> Result<Self> {
        let mut lines = r.lines();
        expect_line(&mut lines, "rlep-optimizer v1", "optimizer state")?;
        let kind = lines
            .next()
            .ok_or_else(|| Error::parse("optimizer state", "missing kind"))?
            .map_err(|e| Error::parse("optimizer state", e))?;
        match kind.trim() {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => {
                let t = header_value(&mut lines, "t", "optimizer state")? as u64;
                let len = header_value(&mut lines, "len", "optimizer state")?;
                if width == 0 || len % width != 0 {
                    return Err(Error::parse("optimizer state", "length does not match table width"));
                }
                let m = read_matrix(&mut lines, len / width, width, "optimizer state")?;
                let v = read_matrix(&mut lines, len / width, width, "optimizer state")?;
                Ok(Optimizer::Adam { m, v, t })
            }
            other => Err(Error::parse("optimizer state", format!("unknown kind {other:?}"))),
        }
    }

    pub fn save(&self, path: &Path, width: usize) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w, width).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, width: usize) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file), width)
    }
}
