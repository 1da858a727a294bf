use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use dvc_core::dataset::{read_matrix_f64, write_matrix_f64};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable matrices in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    index: BTreeMap<String, usize>,
}

const INDEX_FILE: &str = "params.json";

impl ParamSet {
    pub const fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>) -> Result<ParamId, NnError> {
        if self.index.contains_key(name) {
            return Err(NnError::DuplicateParam(name.to_string()));
        }
        self.index.insert(name.to_string(), self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Array2<f64>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// One feature-format file per parameter plus an ordered name index.
    pub fn save(&self, dir: &Path) -> Result<(), NnError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        for (name, value) in self.names.iter().zip(&self.values) {
            write_matrix_f64(&dir.join(format!("{name}.dvcf")), value)?;
        }
        let path = dir.join(INDEX_FILE);
        let text = serde_json::to_string_pretty(&self.names).map_err(|e| json_err(&path, e))?;
        fs::write(&path, text).map_err(|e| io_err(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self, NnError> {
        let path = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let names: Vec<String> = serde_json::from_str(&text).map_err(|e| json_err(&path, e))?;
        let mut set = Self::new();
        for name in names {
            let value = read_matrix_f64(&dir.join(format!("{name}.dvcf")))?;
            set.insert(&name, value)?;
        }
        Ok(set)
    }
}

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> NnError {
    NnError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn json_err(path: &Path, source: serde_json::Error) -> NnError {
    NnError::Json {
        path: path.to_path_buf(),
        source,
    }
}

/// Gradient buffers aligned with a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    values: Vec<Array2<f64>>,
}

impl Grads {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            values: params
                .values
                .iter()
                .map(|v| Array2::zeros(v.dim()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub(crate) fn add_to(&mut self, id: ParamId, g: &Array2<f64>) {
        self.values[id.0] += g;
    }

    pub fn accumulate(&mut self, other: &Grads) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for v in &mut self.values {
            *v *= c;
        }
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|v| v.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    t: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Self {
        let zeros = || {
            params
                .values
                .iter()
                .map(|p| Array2::zeros(p.dim()))
                .collect()
        };
        Self {
            cfg,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads) {
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .values
            .iter_mut()
            .zip(&grads.values)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

/// How a freshly created parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in ±√(6 / (rows + cols)).
    Xavier,
    Zeros,
    Ones,
}

/// Creates parameters on first request, or looks them up in a loaded set.
pub struct ParamStore<'a> {
    set: &'a mut ParamSet,
    rng: Option<ChaCha8Rng>,
}

impl<'a> ParamStore<'a> {
    /// Fresh initialisation from `seed`.
    pub fn init(set: &'a mut ParamSet, seed: u64) -> Self {
        Self {
            set,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    /// Lookup only; every requested parameter must exist with the right shape.
    pub fn lookup(set: &'a mut ParamSet) -> Self {
        Self { set, rng: None }
    }

    pub fn take(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        init: Init,
    ) -> Result<ParamId, NnError> {
        if let Some(id) = self.set.id(name) {
            let found = self.set.get(id).dim();
            if found != (rows, cols) {
                return Err(NnError::Shape(format!(
                    "parameter `{name}` is {found:?}, expected ({rows}, {cols})"
                )));
            }
            return Ok(id);
        }
        let Some(rng) = self.rng.as_mut() else {
            return Err(NnError::MissingParam(name.to_string()));
        };
        let value = match init {
            Init::Xavier => {
                let a = (6.0 / (rows + cols) as f64).sqrt();
                Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-a..a))
            }
            Init::Zeros => Array2::zeros((rows, cols)),
            Init::Ones => Array2::ones((rows, cols)),
        };
        self.set.insert(name, value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamSet::new();
        ps.insert("w", array![[1.0]]).unwrap();
        assert!(matches!(
            ps.insert("w", array![[2.0]]),
            Err(NnError::DuplicateParam(_))
        ));
    }

    #[test]
    fn store_lookup_checks_shape_and_presence() {
        let mut ps = ParamSet::new();
        let id = ParamStore::init(&mut ps, 0)
            .take("w", 2, 3, Init::Xavier)
            .unwrap();
        let mut look = ParamStore::lookup(&mut ps);
        assert_eq!(look.take("w", 2, 3, Init::Zeros).unwrap(), id);
        assert!(matches!(
            look.take("w", 3, 2, Init::Zeros),
            Err(NnError::Shape(_))
        ));
        assert!(matches!(
            look.take("v", 1, 1, Init::Zeros),
            Err(NnError::MissingParam(_))
        ));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut ps = ParamSet::new();
        let id = ps.insert("w", array![[1.0, -1.0]]).unwrap();
        let mut g = Grads::zeros_like(&ps);
        g.add_to(id, &array![[0.5, -2.0]]);
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..Default::default()
            },
            &ps,
        );
        opt.step(&mut ps, &g);
        // bias-corrected first step is lr · sign(g)
        let w = ps.get(id);
        assert!((w[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((w[[0, 1]] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn adam_defaults() {
        let c = AdamConfig::default();
        assert_eq!((c.beta1, c.beta2, c.lr), (0.9, 0.999, 5e-5));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut ps = ParamSet::new();
        ps.insert("enc.0.w", array![[0.5, 0.25], [1.0, -2.0]])
            .unwrap();
        ps.insert("b", array![[3.0]]).unwrap();
        ps.save(dir.path()).unwrap();
        assert_eq!(ParamSet::load(dir.path()).unwrap(), ps);
    }
}
