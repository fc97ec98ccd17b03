use rand::Rng;

use super::ModelConfig;
use crate::params::Params;
use crate::tensor::{Mat, Real};

/// One low-rank update `ΔW = s·B·A` with `A: r × d_in`, `B: d_out × r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair<T> {
    pub a: Mat<T>,
    pub b: Mat<T>,
}

impl<T: Real> LoraPair<T> {
    fn init<R: Rng>(d_in: usize, d_out: usize, r: usize, rng: &mut R) -> Self {
        LoraPair { a: Mat::randn(r, d_in, 1.0 / (d_in as f64).sqrt(), rng), b: Mat::zeros(d_out, r) }
    }

    fn cast<U: Real>(&self) -> LoraPair<U> {
        LoraPair { a: self.a.cast(), b: self.b.cast() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraBlock<T> {
    pub q: LoraPair<T>,
    pub k: LoraPair<T>,
    pub v: LoraPair<T>,
    pub o: LoraPair<T>,
    pub up: LoraPair<T>,
    pub down: LoraPair<T>,
}

impl<T> LoraBlock<T> {
    pub(crate) fn pairs(&self) -> [(&'static str, &LoraPair<T>); 6] {
        [("q", &self.q), ("k", &self.k), ("v", &self.v), ("o", &self.o), ("up", &self.up), ("down", &self.down)]
    }

    pub(crate) fn pairs_mut(&mut self) -> [(&'static str, &mut LoraPair<T>); 6] {
        [
            ("q", &mut self.q),
            ("k", &mut self.k),
            ("v", &mut self.v),
            ("o", &mut self.o),
            ("up", &mut self.up),
            ("down", &mut self.down),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapters<T> {
    pub blocks: Vec<LoraBlock<T>>,
}

impl<T: Real> LoraAdapters<T> {
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let (d, f, r) = (cfg.d_model, cfg.d_ff, cfg.lora_rank);
        let blocks = (0..cfg.n_layers)
            .map(|_| LoraBlock {
                q: LoraPair::init(d, d, r, rng),
                k: LoraPair::init(d, d, r, rng),
                v: LoraPair::init(d, d, r, rng),
                o: LoraPair::init(d, d, r, rng),
                up: LoraPair::init(d, f, r, rng),
                down: LoraPair::init(f, d, r, rng),
            })
            .collect();
        LoraAdapters { blocks }
    }

    pub fn rank(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.q.a.rows)
    }

    pub fn cast<U: Real>(&self) -> LoraAdapters<U> {
        LoraAdapters {
            blocks: self
                .blocks
                .iter()
                .map(|b| LoraBlock {
                    q: b.q.cast(),
                    k: b.k.cast(),
                    v: b.v.cast(),
                    o: b.o.cast(),
                    up: b.up.cast(),
                    down: b.down.cast(),
                })
                .collect(),
        }
    }
}

impl<T: Real> Params<T> for LoraAdapters<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, p) in b.pairs() {
                f(&format!("lora.blocks.{i}.{n}.a"), &[p.a.rows, p.a.cols], &p.a.data);
                f(&format!("lora.blocks.{i}.{n}.b"), &[p.b.rows, p.b.cols], &p.b.data);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (n, p) in b.pairs_mut() {
                f(&format!("lora.blocks.{i}.{n}.a"), &[p.a.rows, p.a.cols], &mut p.a.data);
                f(&format!("lora.blocks.{i}.{n}.b"), &[p.b.rows, p.b.cols], &mut p.b.data);
            }
        }
    }
}
