//! Generator input layout: Gaussian noise followed by categorical one-hot
//! blocks and uniform continuous codes, plus traversal grids over one code.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Declared layout of the generator input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodeSpec {
    pub noise_dim: usize,
    /// Category count of each categorical code.
    pub categoricals: Vec<usize>,
    /// Sampling interval of each continuous code.
    pub continuous: Vec<(f64, f64)>,
    /// Sweep interval used by continuous traversals.
    pub traversal_range: (f64, f64),
}

impl CodeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.noise_dim == 0 {
            return Err(Error::Argument("noise_dim must be positive".into()));
        }
        if let Some(k) = self.categoricals.iter().find(|&&k| k < 2) {
            return Err(Error::Argument(format!("categorical code needs at least 2 classes, got {k}")));
        }
        for &(lo, hi) in self.continuous.iter().chain(std::iter::once(&self.traversal_range)) {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Argument(format!("invalid interval ({lo}, {hi})")));
            }
        }
        Ok(())
    }

    pub fn code_dim(&self) -> usize {
        self.categoricals.iter().sum::<usize>() + self.continuous.len()
    }

    /// `noise_dim + Σ K_i + |continuous|`.
    pub fn input_dim(&self) -> usize {
        self.noise_dim + self.code_dim()
    }

    /// Offset of categorical block `i` within the generator input.
    pub fn categorical_offset(&self, i: usize) -> usize {
        self.noise_dim + self.categoricals[..i].iter().sum::<usize>()
    }

    pub fn continuous_offset(&self) -> usize {
        self.noise_dim + self.categoricals.iter().sum::<usize>()
    }

    /// Same generator input and posterior layout; intervals may differ.
    pub fn same_layout(&self, other: &CodeSpec) -> bool {
        self.noise_dim == other.noise_dim
            && self.categoricals == other.categoricals
            && self.continuous.len() == other.continuous.len()
    }
}

/// One realisation of noise and codes.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub noise: Vec<f64>,
    pub cat_onehots: Vec<Vec<f64>>,
    pub cont_values: Vec<f64>,
}

pub fn one_hot(k: usize, class: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[class] = 1.0;
    v
}

impl LatentCode {
    /// Class index of each categorical block.
    pub fn classes(&self) -> Vec<usize> {
        self.cat_onehots
            .iter()
            .map(|h| h.iter().position(|&v| v == 1.0).unwrap_or(0))
            .collect()
    }
}

/// Flat generator input in the order noise, categoricals, continuous.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorInput {
    pub vector: Vec<f64>,
}

pub fn sample_code(spec: &CodeSpec, seed: u64) -> LatentCode {
    sample_code_with(spec, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Noise ~ N(0, I); each categorical uniform over its classes; each continuous
/// uniform over its interval.
pub fn sample_code_with(spec: &CodeSpec, rng: &mut impl Rng) -> LatentCode {
    let noise = (0..spec.noise_dim).map(|_| rng.sample(StandardNormal)).collect();
    let cat_onehots = spec
        .categoricals
        .iter()
        .map(|&k| one_hot(k, rng.gen_range(0..k)))
        .collect();
    let cont_values = spec
        .continuous
        .iter()
        .map(|&(lo, hi)| loop {
            // gen_range is half-open; reject the closed endpoint to stay strictly inside
            let v = rng.gen_range(lo..hi);
            if v > lo {
                break v;
            }
        })
        .collect();
    LatentCode {
        noise,
        cat_onehots,
        cont_values,
    }
}

pub fn assemble(code: &LatentCode, spec: &CodeSpec) -> Result<GeneratorInput> {
    if code.noise.len() != spec.noise_dim {
        return Err(Error::Argument(format!(
            "noise segment has length {}, expected {}",
            code.noise.len(),
            spec.noise_dim
        )));
    }
    if code.cat_onehots.len() != spec.categoricals.len() {
        return Err(Error::Argument(format!(
            "categorical segment has {} blocks, expected {}",
            code.cat_onehots.len(),
            spec.categoricals.len()
        )));
    }
    for (i, (h, &k)) in code.cat_onehots.iter().zip(&spec.categoricals).enumerate() {
        if h.len() != k {
            return Err(Error::Argument(format!(
                "categorical[{i}] has length {}, expected {k}",
                h.len()
            )));
        }
    }
    if code.cont_values.len() != spec.continuous.len() {
        return Err(Error::Argument(format!(
            "continuous segment has length {}, expected {}",
            code.cont_values.len(),
            spec.continuous.len()
        )));
    }
    let mut vector = Vec::with_capacity(spec.input_dim());
    vector.extend_from_slice(&code.noise);
    for h in &code.cat_onehots {
        vector.extend_from_slice(h);
    }
    vector.extend_from_slice(&code.cont_values);
    Ok(GeneratorInput { vector })
}

/// Stacks assembled inputs into an `N × input_dim` tensor.
pub fn input_batch<T: Real>(inputs: &[GeneratorInput]) -> Result<Tensor<T>> {
    let d = inputs.first().map_or(0, |g| g.vector.len());
    let mut data = Vec::with_capacity(inputs.len() * d);
    for g in inputs {
        if g.vector.len() != d {
            return Err(Error::Argument("generator inputs differ in length".into()));
        }
        data.extend(g.vector.iter().map(|&v| T::lit(v)));
    }
    Tensor::from_vec(&[inputs.len(), d], data)
}

/// Samples `n` codes and returns them with the assembled batch.
pub fn sample_batch<T: Real>(spec: &CodeSpec, n: usize, rng: &mut impl Rng) -> (Vec<LatentCode>, Tensor<T>) {
    let codes: Vec<LatentCode> = (0..n).map(|_| sample_code_with(spec, rng)).collect();
    let inputs: Vec<GeneratorInput> = codes
        .iter()
        .map(|c| assemble(c, spec).expect("sampled code conforms to its spec"))
        .collect();
    let batch = input_batch(&inputs).expect("uniform lengths");
    (codes, batch)
}

/// Which code a traversal sweeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CodeSelector {
    /// Zero-based categorical index, written `cat0`, `cat1`, ….
    Categorical(usize),
    /// Zero-based continuous index, written one-based as `u1`, `u2`, ….
    Continuous(usize),
}

impl FromStr for CodeSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Argument(format!("unknown code selector {s:?} (expected catN or uN)"));
        if let Some(rest) = s.strip_prefix("cat") {
            return rest.parse().map(CodeSelector::Categorical).map_err(|_| bad());
        }
        if let Some(rest) = s.strip_prefix('u') {
            let i: usize = rest.parse().map_err(|_| bad())?;
            if i == 0 {
                return Err(bad());
            }
            return Ok(CodeSelector::Continuous(i - 1));
        }
        Err(bad())
    }
}

impl fmt::Display for CodeSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CodeSelector::Categorical(i) => write!(f, "cat{i}"),
            CodeSelector::Continuous(i) => write!(f, "u{}", i + 1),
        }
    }
}

/// Builds a `rows × cols` grid, row-major. Each row starts from an independent
/// draw (row 0 is `sample_code(seed)`); columns replace only the varied code.
/// Categorical sweeps need `cols == K` and enumerate the classes; continuous
/// sweeps space `cols` values linearly over `range` (default: the spec's
/// traversal range). A single column leaves the sampled code untouched.
pub fn traversal_grid(
    spec: &CodeSpec,
    vary: CodeSelector,
    rows: usize,
    cols: usize,
    range: Option<(f64, f64)>,
    seed: u64,
) -> Result<Vec<GeneratorInput>> {
    if rows == 0 || cols == 0 {
        return Err(Error::Argument("traversal grid needs at least one row and column".into()));
    }
    match vary {
        CodeSelector::Categorical(i) => {
            let k = *spec
                .categoricals
                .get(i)
                .ok_or_else(|| Error::Argument(format!("no categorical code {vary} in this layout")))?;
            if cols != 1 && cols != k {
                return Err(Error::Argument(format!("{vary} has {k} classes; cols must be {k}")));
            }
        }
        CodeSelector::Continuous(i) => {
            if i >= spec.continuous.len() {
                return Err(Error::Argument(format!("no continuous code {vary} in this layout")));
            }
        }
    }
    let (lo, hi) = range.unwrap_or(spec.traversal_range);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let base = sample_code_with(spec, &mut rng);
        for c in 0..cols {
            let mut code = base.clone();
            if cols > 1 {
                match vary {
                    CodeSelector::Categorical(i) => {
                        code.cat_onehots[i] = one_hot(spec.categoricals[i], c);
                    }
                    CodeSelector::Continuous(i) => {
                        code.cont_values[i] = lo + (hi - lo) * c as f64 / (cols - 1) as f64;
                    }
                }
            }
            grid.push(assemble(&code, spec)?);
        }
    }
    Ok(grid)
}
