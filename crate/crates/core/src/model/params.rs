use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{stage_rng, Rng as StreamRng};

/// Width of the projected box descriptor `(x1, y1, x2, y2, w, h)`.
pub const SPATIAL_DIM: usize = 6;
/// Range of the uniform initializer.
pub const INIT_SCALE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub max_positions: usize,
    pub ffn_mult: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, feature_dim: usize) -> Self {
        Self {
            layers: 2,
            hidden: 32,
            heads: 4,
            vocab_size,
            feature_dim,
            max_positions: 100,
            ffn_mult: 4,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.ffn_mult == 0 {
            return bad("layers, hidden, heads and ffn_mult must be positive".into());
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return bad(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            ));
        }
        if self.vocab_size < crate::textproc::FIRST_WORD_ID as usize {
            return bad("vocabulary smaller than the special tokens".into());
        }
        if self.feature_dim == 0 || self.max_positions == 0 {
            return bad("feature_dim and max_positions must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Encoder weights. Matrices are stored input-major: `y = x . W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub word_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub patch_w: Array2<f64>,
    pub patch_b: Array1<f64>,
    pub spatial_w: Array2<f64>,
    pub spatial_b: Array1<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Array1<f64>,
    pub lnf_b: Array1<f64>,
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
}

/// Visits every tensor of a `ModelParams` (or `&mut`) in a fixed order.
macro_rules! for_each_tensor {
    ($p:expr, $f:ident, $iter:ident, $($r:tt)*) => {{
        $f("word_emb".to_string(), $($r)* $p.word_emb);
        $f("pos_emb".to_string(), $($r)* $p.pos_emb);
        $f("patch_w".to_string(), $($r)* $p.patch_w);
        $f("patch_b".to_string(), $($r)* $p.patch_b);
        $f("spatial_w".to_string(), $($r)* $p.spatial_w);
        $f("spatial_b".to_string(), $($r)* $p.spatial_b);
        for (i, l) in $p.layers.$iter().enumerate() {
            let pre = format!("layer{i}.");
            $f(pre.clone() + "ln1_g", $($r)* l.ln1_g);
            $f(pre.clone() + "ln1_b", $($r)* l.ln1_b);
            $f(pre.clone() + "wq", $($r)* l.wq);
            $f(pre.clone() + "bq", $($r)* l.bq);
            $f(pre.clone() + "wk", $($r)* l.wk);
            $f(pre.clone() + "bk", $($r)* l.bk);
            $f(pre.clone() + "wv", $($r)* l.wv);
            $f(pre.clone() + "bv", $($r)* l.bv);
            $f(pre.clone() + "wo", $($r)* l.wo);
            $f(pre.clone() + "bo", $($r)* l.bo);
            $f(pre.clone() + "ln2_g", $($r)* l.ln2_g);
            $f(pre.clone() + "ln2_b", $($r)* l.ln2_b);
            $f(pre.clone() + "w1", $($r)* l.w1);
            $f(pre.clone() + "b1", $($r)* l.b1);
            $f(pre.clone() + "w2", $($r)* l.w2);
            $f(pre.clone() + "b2", $($r)* l.b2);
        }
        $f("lnf_g".to_string(), $($r)* $p.lnf_g);
        $f("lnf_b".to_string(), $($r)* $p.lnf_b);
        $f("head_w".to_string(), $($r)* $p.head_w);
        $f("head_b".to_string(), $($r)* $p.head_b);
    }};
}

trait FlatRef {
    fn flat(&self) -> &[f64];
}

trait FlatMut {
    fn flat_mut(&mut self) -> &mut [f64];
}

impl<D: ndarray::Dimension> FlatRef for ndarray::Array<f64, D> {
    fn flat(&self) -> &[f64] {
        self.as_slice().expect("parameters are kept in standard layout")
    }
}

impl<D: ndarray::Dimension> FlatMut for ndarray::Array<f64, D> {
    fn flat_mut(&mut self) -> &mut [f64] {
        self.as_slice_mut()
            .expect("parameters are kept in standard layout")
    }
}

fn uniform2(rng: &mut StreamRng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-INIT_SCALE..INIT_SCALE))
}

impl ModelParams {
    /// Weight matrices and embedding tables are drawn from
    /// `uniform(-0.05, 0.05)`; biases start at 0 and layer-norm gains at 1.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stage_rng(config.seed, "init-params");
        Ok(Self::build(config, &mut |r, c| uniform2(&mut rng, r, c)))
    }

    /// Same shapes as `config`, every entry zero.
    pub fn zeros(config: ModelConfig) -> Self {
        let mut zero = |r, c| Array2::zeros((r, c));
        let mut p = Self::build(config, &mut zero);
        p.fill(0.0);
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config)
    }

    fn build(config: ModelConfig, mat: &mut dyn FnMut(usize, usize) -> Array2<f64>) -> Self {
        let d = config.hidden;
        let f = d * config.ffn_mult;
        let ones = || Array1::from_elem(d, 1.0);
        let zeros = |n| Array1::zeros(n);
        let word_emb = mat(config.vocab_size, d);
        let pos_emb = mat(config.max_positions, d);
        let patch_w = mat(config.feature_dim, d);
        let spatial_w = mat(SPATIAL_DIM, d);
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                ln1_g: ones(),
                ln1_b: zeros(d),
                wq: mat(d, d),
                bq: zeros(d),
                wk: mat(d, d),
                bk: zeros(d),
                wv: mat(d, d),
                bv: zeros(d),
                wo: mat(d, d),
                bo: zeros(d),
                ln2_g: ones(),
                ln2_b: zeros(d),
                w1: mat(d, f),
                b1: zeros(f),
                w2: mat(f, d),
                b2: zeros(d),
            })
            .collect();
        let head_w = mat(d, config.vocab_size);
        Self {
            config,
            word_emb,
            pos_emb,
            patch_w,
            patch_b: zeros(d),
            spatial_w,
            spatial_b: zeros(d),
            layers,
            lnf_g: ones(),
            lnf_b: zeros(d),
            head_w,
            head_b: zeros(config.vocab_size),
        }
    }

    /// Named flat views of every tensor in canonical order.
    pub fn tensors<'a>(&'a self) -> Vec<(String, &'a [f64])> {
        let mut out = Vec::new();
        let mut push = |name: String, t: &'a dyn FlatRef| out.push((name, t.flat()));
        for_each_tensor!(self, push, iter, &);
        out
    }

    pub fn tensors_mut<'a>(&'a mut self) -> Vec<(String, &'a mut [f64])> {
        let mut out = Vec::new();
        let mut push = |name: String, t: &'a mut dyn FlatMut| out.push((name, t.flat_mut()));
        for_each_tensor!(self, push, iter_mut, &mut);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn fill(&mut self, value: f64) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = value);
        }
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &ModelParams) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::new(20, 8);
        let a = ModelParams::init(cfg).unwrap();
        let b = ModelParams::init(cfg).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::init(ModelConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, c);
        assert!(a
            .word_emb
            .iter()
            .all(|v| (-INIT_SCALE..INIT_SCALE).contains(v)));
    }

    #[test]
    fn head_dim_and_divisibility() {
        let cfg = ModelConfig::new(20, 8);
        assert_eq!(cfg.head_dim(), 8);
        let bad = ModelConfig { hidden: 33, ..cfg };
        assert!(matches!(ModelParams::init(bad), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn tensor_views_cover_every_parameter() {
        let cfg = ModelConfig {
            layers: 1,
            hidden: 4,
            heads: 2,
            ..ModelConfig::new(6, 3)
        };
        let p = ModelParams::init(cfg).unwrap();
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), 6 + 16 + 4);
        assert_eq!(names[6], "layer0.ln1_g");
        // 6*4 + 100*4 + 3*4 + 4 + 6*4 + 4 + layer + 4 + 4 + 4*6 + 6
        let layer = 4 * (4 * 4 + 4) + 4 * 4 + (4 * 16 + 16) + (16 * 4 + 4);
        assert_eq!(p.num_parameters(), 24 + 400 + 12 + 4 + 24 + 4 + layer + 8 + 24 + 6);
    }
}
