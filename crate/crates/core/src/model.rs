//! Model configuration and the learnable parameter arrays of the prosody
//! predictor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::LOG_VAR_CLAMP;

/// Recurrent cell used by the predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CellType {
    #[default]
    Elman,
}

/// Shape of a predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Mixture components per phone.
    pub components: usize,
    /// Embedding dimension.
    pub dim: usize,
    /// Phone / speaker embedding width.
    pub hidden: usize,
    /// Recurrent state width.
    pub recurrent: usize,
    /// Phone inventory size.
    pub phones: usize,
    /// Number of speaker table rows.
    pub speakers: usize,
    #[serde(default)]
    pub cell: CellType,
    #[serde(default = "default_clamp")]
    pub log_var_clamp: (f64, f64),
}

fn default_clamp() -> (f64, f64) {
    LOG_VAR_CLAMP
}

impl ModelConfig {
    pub fn new(
        components: usize,
        dim: usize,
        hidden: usize,
        recurrent: usize,
        phones: usize,
        speakers: usize,
    ) -> Self {
        Self {
            components,
            dim,
            hidden,
            recurrent,
            phones,
            speakers,
            cell: CellType::Elman,
            log_var_clamp: LOG_VAR_CLAMP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("components", self.components),
            ("dim", self.dim),
            ("hidden", self.hidden),
            ("recurrent", self.recurrent),
            ("phones", self.phones),
            ("speakers", self.speakers),
        ];
        for (name, value) in fields {
            if value == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        let (lo, hi) = self.log_var_clamp;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::config(format!("invalid log-variance clamp ({lo}, {hi})")));
        }
        Ok(())
    }

    /// Width of the cell input `[h; e_prev; r_prev]`.
    pub fn cell_input(&self) -> usize {
        self.hidden + self.dim + self.recurrent
    }

    /// Outputs of the speaker-independent head: logits, means, log-variances.
    pub fn si_outputs(&self) -> usize {
        self.components + 2 * self.components * self.dim
    }

    /// Outputs of the speaker-dependent head: logits and the diagonal
    /// transform parameters `A, b, C, d`.
    pub fn sd_outputs(&self) -> usize {
        self.components + 4 * self.dim
    }
}

/// Names of the parameter arrays, in serialization order.
pub const ARRAY_NAMES: [&str; 13] = [
    "phone_table",
    "speaker_table",
    "start_embedding",
    "cell_weight",
    "cell_bias",
    "si_weight",
    "si_bias",
    "sd_weight",
    "sd_bias",
    "mean_map_weight",
    "mean_map_bias",
    "log_var_map_weight",
    "log_var_map_bias",
];

/// All learnable arrays of the predictor. Matrices are row-major with shape
/// `(outputs, inputs)`.
///
/// The same type doubles as a gradient accumulator and as Adam moment
/// storage.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    pub config: ModelConfig,
    /// `V x H`
    pub phone_table: Vec<f64>,
    /// `S x H`
    pub speaker_table: Vec<f64>,
    /// History vector fed to the first phone, `D`.
    pub start_embedding: Vec<f64>,
    /// `R x (H + D + R)`
    pub cell_weight: Vec<f64>,
    pub cell_bias: Vec<f64>,
    /// `(M + 2MD) x R`; rows are logits, then means, then log-variances.
    pub si_weight: Vec<f64>,
    pub si_bias: Vec<f64>,
    /// `(M + 4D) x R`; rows are logits, then `A`, `b`, `C`, `d`.
    pub sd_weight: Vec<f64>,
    pub sd_bias: Vec<f64>,
    /// `D x D`
    pub mean_map_weight: Vec<f64>,
    pub mean_map_bias: Vec<f64>,
    /// `D x D`
    pub log_var_map_weight: Vec<f64>,
    pub log_var_map_bias: Vec<f64>,
}

impl PredictorParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        let c = config;
        Self {
            config: c.clone(),
            phone_table: vec![0.0; c.phones * c.hidden],
            speaker_table: vec![0.0; c.speakers * c.hidden],
            start_embedding: vec![0.0; c.dim],
            cell_weight: vec![0.0; c.recurrent * c.cell_input()],
            cell_bias: vec![0.0; c.recurrent],
            si_weight: vec![0.0; c.si_outputs() * c.recurrent],
            si_bias: vec![0.0; c.si_outputs()],
            sd_weight: vec![0.0; c.sd_outputs() * c.recurrent],
            sd_bias: vec![0.0; c.sd_outputs()],
            mean_map_weight: vec![0.0; c.dim * c.dim],
            mean_map_bias: vec![0.0; c.dim],
            log_var_map_weight: vec![0.0; c.dim * c.dim],
            log_var_map_bias: vec![0.0; c.dim],
        }
    }

    /// Seeded initialization: every entry uniform in `(-0.1, 0.1)`, except the
    /// log-variance biases which start at zero so initial variances are near
    /// one.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, array) in params.arrays_mut() {
            for v in array.iter_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
        let (m, d) = (config.components, config.dim);
        params.si_bias[m + m * d..].fill(0.0);
        params.log_var_map_bias.fill(0.0);
        // diagonal transform scales start at one so every speaker's transform
        // begins with the same orientation
        params.sd_bias[m..m + d].fill(1.0);
        params.sd_bias[m + 2 * d..m + 3 * d].fill(1.0);
        Ok(params)
    }

    /// Parameter arrays in [`ARRAY_NAMES`] order.
    pub fn arrays(&self) -> [(&'static str, &Vec<f64>); 13] {
        [
            (ARRAY_NAMES[0], &self.phone_table),
            (ARRAY_NAMES[1], &self.speaker_table),
            (ARRAY_NAMES[2], &self.start_embedding),
            (ARRAY_NAMES[3], &self.cell_weight),
            (ARRAY_NAMES[4], &self.cell_bias),
            (ARRAY_NAMES[5], &self.si_weight),
            (ARRAY_NAMES[6], &self.si_bias),
            (ARRAY_NAMES[7], &self.sd_weight),
            (ARRAY_NAMES[8], &self.sd_bias),
            (ARRAY_NAMES[9], &self.mean_map_weight),
            (ARRAY_NAMES[10], &self.mean_map_bias),
            (ARRAY_NAMES[11], &self.log_var_map_weight),
            (ARRAY_NAMES[12], &self.log_var_map_bias),
        ]
    }

    pub fn arrays_mut(&mut self) -> [(&'static str, &mut Vec<f64>); 13] {
        [
            (ARRAY_NAMES[0], &mut self.phone_table),
            (ARRAY_NAMES[1], &mut self.speaker_table),
            (ARRAY_NAMES[2], &mut self.start_embedding),
            (ARRAY_NAMES[3], &mut self.cell_weight),
            (ARRAY_NAMES[4], &mut self.cell_bias),
            (ARRAY_NAMES[5], &mut self.si_weight),
            (ARRAY_NAMES[6], &mut self.si_bias),
            (ARRAY_NAMES[7], &mut self.sd_weight),
            (ARRAY_NAMES[8], &mut self.sd_bias),
            (ARRAY_NAMES[9], &mut self.mean_map_weight),
            (ARRAY_NAMES[10], &mut self.mean_map_bias),
            (ARRAY_NAMES[11], &mut self.log_var_map_weight),
            (ARRAY_NAMES[12], &mut self.log_var_map_bias),
        ]
    }

    pub fn array(&self, name: &str) -> Option<&Vec<f64>> {
        self.arrays().into_iter().find(|(n, _)| *n == name).map(|(_, a)| a)
    }

    pub fn array_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        self.arrays_mut()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, a)| a)
    }

    /// Checks that every array has the length implied by the config.
    pub fn check_shapes(&self) -> Result<()> {
        let reference = Self::zeros(&self.config);
        for ((name, have), (_, want)) in self.arrays().iter().zip(reference.arrays()) {
            if have.len() != want.len() {
                return Err(Error::shape(format!(
                    "{name} has {} entries, config implies {}",
                    have.len(),
                    want.len()
                )));
            }
        }
        Ok(())
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, array) in self.arrays() {
            if let Some(i) = array.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical {
                    what: name,
                    index: i,
                    detail: format!("non-finite value {}", array[i]),
                });
            }
        }
        Ok(())
    }

    pub fn scalar_count(&self) -> usize {
        self.arrays().iter().map(|(_, a)| a.len()).sum()
    }

    /// Euclidean norm over every array.
    pub fn global_norm(&self) -> f64 {
        self.arrays()
            .iter()
            .flat_map(|(_, a)| a.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, a) in self.arrays_mut() {
            a.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// `self += other`, array by array.
    pub fn add_assign(&mut self, other: &PredictorParams) {
        for ((_, a), (_, b)) in self.arrays_mut().into_iter().zip(other.arrays()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += y;
            }
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }
}
