//! Randomized self-verification of the convolution engine.
//!
//! Four suites, each over deterministic cases derived from one seed:
//!
//! - `equivalence`: masked and rearranged forward against the reference loop.
//! - `degenerate`: constant-pattern lattice against plain dilated convolution,
//!   required to agree bit-for-bit.
//! - `adjoint`: `⟨conv(F), U⟩` against `⟨F, ∂input(U)⟩` and `⟨G, ∂weight(U)⟩`.
//! - `gradient`: both backward passes against central differences of
//!   `L = ⟨conv(F), U⟩` on small instances.
//!
//! Case `i` is generated from [`case_seed`]`(seed, i)`, so a failing case can
//! be rebuilt on its own with [`EquivalenceCase::generate`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::conv::{
    conv2d_backward_input, conv2d_backward_weight, conv2d_dilated_reference, conv2d_reference,
    dilated_conv, masked_forward_impl, psconv_forward_rearranged, ConvSpec,
};
use crate::error::{Error, Result};
use crate::lattice::{DilationMatrix, DilationPattern};
use crate::tensor::{max_abs_diff, Rng, Tensor4};

pub const CHECK_SCHEMA: &str = "psconv.check/1";
pub const ADJOINT_TOL: f64 = 1e-10;
pub const GRADIENT_TOL: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-5;
pub const GRADIENT_CASES: usize = 50;
pub const DEGENERATE_CASES: usize = 100;

const PATTERNS: [&[u32]; 4] = [&[1], &[2], &[1, 2], &[1, 2, 1, 4]];
const CHANNELS: [usize; 3] = [4, 8, 16];

/// Deliberate defects for testing that the harness notices them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Negate one rate's branch in the masked strategy.
    MaskedSignFlip,
}

impl std::str::FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masked-sign-flip" => Ok(Fault::MaskedSignFlip),
            _ => Err(Error::invalid(format!("unknown fault {s:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckConfig {
    pub cases: usize,
    pub seed: u64,
    /// Tolerance for the forward equivalence suite.
    pub tol: f64,
    pub fault: Option<Fault>,
}

impl CheckConfig {
    pub fn new(cases: usize, seed: u64, tol: f64) -> Self {
        CheckConfig {
            cases,
            seed,
            tol,
            fault: None,
        }
    }
}

pub fn case_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// One randomized forward problem.
#[derive(Clone, Debug)]
pub struct EquivalenceCase {
    pub seed: u64,
    pub spec: ConvSpec,
    pub pattern: DilationPattern,
    pub input: Tensor4,
    pub weight: Tensor4,
    pub lattice: DilationMatrix,
}

impl EquivalenceCase {
    /// Draws N ≤ 2, Cin, Cout ∈ {4, 8, 16}, H, W ∈ 7..=14, K = 3,
    /// stride ∈ {1, 2}, g ∈ {1, 2} and a pattern from {1}, {2}, {1,2}, {1,2,1,4}.
    pub fn generate(seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let n = 1 + rng.below(2);
        let cin = *rng.choose(&CHANNELS);
        let cout = *rng.choose(&CHANNELS);
        let h = 7 + rng.below(8);
        let w = 7 + rng.below(8);
        let stride = 1 + rng.below(2);
        let groups = 1 + rng.below(2);
        let pattern = DilationPattern::new(rng.choose(&PATTERNS).to_vec())?;
        Self::build(seed, &mut rng, [n, cin, h, w], cout, stride, groups, pattern)
    }

    /// Smaller problems for finite differencing: N = 1, Cin, Cout ∈ {4, 8},
    /// H, W ∈ 5..=8.
    pub fn generate_small(seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let cin = *rng.choose(&CHANNELS[..2]);
        let cout = *rng.choose(&CHANNELS[..2]);
        let h = 5 + rng.below(4);
        let w = 5 + rng.below(4);
        let stride = 1 + rng.below(2);
        let groups = 1 + rng.below(2);
        let pattern = DilationPattern::new(rng.choose(&PATTERNS).to_vec())?;
        Self::build(seed, &mut rng, [1, cin, h, w], cout, stride, groups, pattern)
    }

    fn build(
        seed: u64,
        rng: &mut Rng,
        input_dims: [usize; 4],
        cout: usize,
        stride: usize,
        groups: usize,
        pattern: DilationPattern,
    ) -> Result<Self> {
        let spec = ConvSpec::new(input_dims[1], cout, 3, stride, groups)?;
        let lattice = DilationMatrix::psconv_grouped(cout, spec.cin, groups, &pattern)?;
        let input = Tensor4::randn(input_dims, rng, 1.0)?;
        let weight = Tensor4::randn(spec.weight_dims(), rng, 1.0)?;
        Ok(EquivalenceCase {
            seed,
            spec,
            pattern,
            input,
            weight,
            lattice,
        })
    }

    pub fn describe(&self) -> String {
        format!(
            "input {:?} cout {} K {} stride {} groups {} pattern {}",
            self.input.dims(),
            self.spec.cout,
            self.spec.kernel,
            self.spec.stride,
            self.spec.groups,
            self.pattern
        )
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FailingCase {
    pub index: usize,
    pub seed: u64,
    pub error: f64,
    pub description: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub cases: usize,
    /// Cases where a strategy did not apply (rearranged needs the interval
    /// to divide the per-group channel counts).
    pub skipped: usize,
    pub max_error: f64,
    pub tol: f64,
    pub passed: bool,
    pub failing_case: Option<FailingCase>,
    /// Extra per-strategy maxima.
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub details: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckReport {
    pub schema: String,
    pub seed: u64,
    pub cases: usize,
    pub passed: bool,
    pub fault: Option<Fault>,
    pub suites: Vec<SuiteResult>,
}

impl CheckReport {
    pub fn suite(&self, name: &str) -> Option<&SuiteResult> {
        self.suites.iter().find(|s| s.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

struct Tracker {
    name: &'static str,
    tol: f64,
    cases: usize,
    skipped: usize,
    max_error: f64,
    worst: Option<FailingCase>,
    details: BTreeMap<String, f64>,
}

impl Tracker {
    fn new(name: &'static str, tol: f64) -> Self {
        Tracker {
            name,
            tol,
            cases: 0,
            skipped: 0,
            max_error: 0.0,
            worst: None,
            details: BTreeMap::new(),
        }
    }

    fn record(&mut self, index: usize, case: &EquivalenceCase, error: f64) {
        // Non-finite errors fail and stay representable in JSON.
        let error = if error.is_finite() { error } else { f64::MAX };
        self.max_error = self.max_error.max(error);
        let worse = self.worst.as_ref().is_none_or(|w| error > w.error);
        if error > self.tol && worse {
            self.worst = Some(FailingCase {
                index,
                seed: case.seed,
                error,
                description: case.describe(),
            });
        }
    }

    fn detail(&mut self, key: &str, value: f64) {
        let v = self.details.entry(key.to_string()).or_insert(0.0);
        *v = v.max(value);
    }

    fn finish(self) -> SuiteResult {
        SuiteResult {
            name: self.name.to_string(),
            cases: self.cases,
            skipped: self.skipped,
            max_error: self.max_error,
            tol: self.tol,
            passed: self.worst.is_none() && self.max_error <= self.tol,
            failing_case: self.worst,
            details: self.details,
        }
    }
}

/// `|a − b| / max(|a|, |b|)`, zero when both are zero.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn equivalence_suite(config: &CheckConfig) -> Result<SuiteResult> {
    let mut t = Tracker::new("equivalence", config.tol);
    let fault = config.fault == Some(Fault::MaskedSignFlip);
    for i in 0..config.cases {
        let case = EquivalenceCase::generate(case_seed(config.seed, i))?;
        let oracle = conv2d_reference(&case.input, &case.weight, &case.spec, &case.lattice)?;
        let (masked, _) =
            masked_forward_impl(&case.input, &case.weight, &case.spec, &case.lattice, fault)?;
        let e_masked = max_abs_diff(&masked, &oracle)?;
        t.detail("masked", e_masked);
        let mut err = e_masked;
        match case.lattice.rearrangement() {
            Ok(plan) => {
                let r = psconv_forward_rearranged(
                    &case.input,
                    &case.weight,
                    &case.spec,
                    &case.lattice,
                    &plan,
                )?;
                let e = max_abs_diff(&r, &oracle)?;
                t.detail("rearranged", e);
                err = err.max(e);
            }
            Err(Error::NotDivisible { .. }) => t.skipped += 1,
            Err(e) => return Err(e),
        }
        t.cases += 1;
        t.record(i, &case, err);
    }
    Ok(t.finish())
}

fn degenerate_suite(config: &CheckConfig) -> Result<SuiteResult> {
    let mut t = Tracker::new("degenerate", 0.0);
    for i in 0..config.cases.min(DEGENERATE_CASES) {
        let mut case = EquivalenceCase::generate(case_seed(config.seed ^ 0xD1, i))?;
        let d = 1 + (i % 4) as u32;
        case.pattern = DilationPattern::constant(d)?;
        case.lattice =
            DilationMatrix::psconv_grouped(case.spec.cout, case.spec.cin, case.spec.groups, &case.pattern)?;
        let ps = conv2d_reference(&case.input, &case.weight, &case.spec, &case.lattice)?;
        let dil = conv2d_dilated_reference(&case.input, &case.weight, &case.spec, d)?;
        let fast = dilated_conv(&case.input, &case.weight, &case.spec, d)?;
        let bits = |x: &Tensor4| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        let err = if bits(&ps) == bits(&dil) && bits(&ps) == bits(&fast) {
            0.0
        } else {
            max_abs_diff(&ps, &dil)?.max(max_abs_diff(&ps, &fast)?).max(f64::MIN_POSITIVE)
        };
        t.cases += 1;
        t.record(i, &case, err);
    }
    Ok(t.finish())
}

fn adjoint_suite(config: &CheckConfig) -> Result<SuiteResult> {
    let mut t = Tracker::new("adjoint", ADJOINT_TOL);
    for i in 0..config.cases {
        let case = EquivalenceCase::generate(case_seed(config.seed ^ 0xAD, i))?;
        let out = conv2d_reference(&case.input, &case.weight, &case.spec, &case.lattice)?;
        let mut rng = Rng::new(case.seed.rotate_left(17));
        let u = Tensor4::randn(out.dims(), &mut rng, 1.0)?;
        let [_, _, h, w] = case.input.dims();
        let gi = conv2d_backward_input(&u, &case.weight, &case.spec, &case.lattice, (h, w))?;
        let gw = conv2d_backward_weight(&u, &case.input, &case.spec, &case.lattice)?;
        let lhs = out.dot(&u)?;
        let e_in = relative_error(lhs, case.input.dot(&gi)?);
        let e_w = relative_error(lhs, case.weight.dot(&gw)?);
        t.detail("input", e_in);
        t.detail("weight", e_w);
        t.cases += 1;
        t.record(i, &case, e_in.max(e_w));
    }
    Ok(t.finish())
}

/// Coordinates probed per tensor in the gradient suite.
const FD_PROBES: usize = 6;

fn gradient_suite(config: &CheckConfig) -> Result<SuiteResult> {
    let mut t = Tracker::new("gradient", GRADIENT_TOL);
    for i in 0..config.cases.min(GRADIENT_CASES) {
        let case = EquivalenceCase::generate_small(case_seed(config.seed ^ 0xFD, i))?;
        let spec = &case.spec;
        let lattice = &case.lattice;
        let out_dims = spec.output_dims(case.input.dims());
        let mut rng = Rng::new(case.seed.rotate_left(29));
        let u = Tensor4::randn(out_dims, &mut rng, 1.0)?;
        let [_, _, h, w] = case.input.dims();
        let gi = conv2d_backward_input(&u, &case.weight, spec, lattice, (h, w))?;
        let gw = conv2d_backward_weight(&u, &case.input, spec, lattice)?;
        let loss = |f: &Tensor4, g: &Tensor4| -> Result<f64> {
            conv2d_reference(f, g, spec, lattice)?.dot(&u)
        };

        let mut worst = 0.0f64;
        for _ in 0..FD_PROBES {
            let idx = rng.below(case.input.len());
            let mut f = case.input.clone();
            f.data_mut()[idx] += FD_STEP;
            let plus = loss(&f, &case.weight)?;
            f.data_mut()[idx] -= 2.0 * FD_STEP;
            let minus = loss(&f, &case.weight)?;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let e = fd_error(fd, gi.data()[idx]);
            t.detail("input", e);
            worst = worst.max(e);

            let idx = rng.below(case.weight.len());
            let mut g = case.weight.clone();
            g.data_mut()[idx] += FD_STEP;
            let plus = loss(&case.input, &g)?;
            g.data_mut()[idx] -= 2.0 * FD_STEP;
            let minus = loss(&case.input, &g)?;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let e = fd_error(fd, gw.data()[idx]);
            t.detail("weight", e);
            worst = worst.max(e);
        }
        t.cases += 1;
        t.record(i, &case, worst);
    }
    Ok(t.finish())
}

/// Relative error with the denominator floored at 1, so coordinates whose
/// true gradient is zero (inputs no tap reaches at stride 2) are judged on
/// the absolute difference.
pub fn fd_error(fd: f64, analytic: f64) -> f64 {
    (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1.0)
}

pub fn run_check(config: &CheckConfig) -> Result<CheckReport> {
    if config.cases == 0 {
        return Err(Error::invalid("cases must be >= 1"));
    }
    if !(config.tol >= 0.0) {
        return Err(Error::invalid(format!("tolerance must be >= 0, got {}", config.tol)));
    }
    let suites = vec![
        equivalence_suite(config)?,
        degenerate_suite(config)?,
        adjoint_suite(config)?,
        gradient_suite(config)?,
    ];
    Ok(CheckReport {
        schema: CHECK_SCHEMA.into(),
        seed: config.seed,
        cases: config.cases,
        passed: suites.iter().all(|s| s.passed),
        fault: config.fault,
        suites,
    })
}
