//! Wall-clock comparison of the forward strategies on one layer shape.
//!
//! Each strategy gets `warmup` untimed runs followed by `repeats` timed runs
//! on the same random input and weights. Headline numbers are medians;
//! ratios divide each median by the `standard` (rate 1) median.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::conv::{conv2d_reference, dilated_conv, psconv_forward_masked, ConvSpec, RearrangedLayer};
use crate::error::{Error, Result};
use crate::lattice::{DilationMatrix, DilationPattern};
use crate::tensor::{Rng, Tensor4};

pub const BENCH_SCHEMA: &str = "psconv.bench/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchStrategy {
    Reference,
    Masked,
    Rearranged,
    /// Plain dilated convolution at [`BenchConfig::dilation`].
    Dilated,
    /// Plain convolution, rate 1.
    Standard,
}

impl BenchStrategy {
    pub const ALL: [BenchStrategy; 5] = [
        BenchStrategy::Reference,
        BenchStrategy::Masked,
        BenchStrategy::Rearranged,
        BenchStrategy::Dilated,
        BenchStrategy::Standard,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BenchStrategy::Reference => "reference",
            BenchStrategy::Masked => "masked",
            BenchStrategy::Rearranged => "rearranged",
            BenchStrategy::Dilated => "dilated",
            BenchStrategy::Standard => "standard",
        }
    }
}

impl std::str::FromStr for BenchStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BenchStrategy::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown strategy {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// `[N, C, H, W]`.
    pub input: [usize; 4],
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
    pub pattern: Vec<u32>,
    /// Rate used by the `dilated` baseline.
    pub dilation: u32,
    pub strategies: Vec<BenchStrategy>,
    pub repeats: usize,
    pub warmup: usize,
    /// `None` uses the ambient rayon pool.
    pub threads: Option<usize>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            input: [200, 64, 56, 56],
            cout: 64,
            kernel: 3,
            stride: 1,
            groups: 1,
            pattern: vec![1, 2, 1, 4],
            dilation: 2,
            strategies: BenchStrategy::ALL.to_vec(),
            repeats: 5,
            warmup: 1,
            threads: None,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::invalid("repeats must be >= 1"));
        }
        if self.input.contains(&0) || self.cout == 0 {
            return Err(Error::invalid(format!(
                "shape must be positive, got input {:?} cout {}",
                self.input, self.cout
            )));
        }
        if self.dilation == 0 {
            return Err(Error::invalid("dilation must be >= 1"));
        }
        if self.strategies.is_empty() {
            return Err(Error::invalid("no strategies selected"));
        }
        if self.threads == Some(0) {
            return Err(Error::invalid("threads must be >= 1"));
        }
        self.spec()?;
        self.pattern()?;
        Ok(())
    }

    pub fn spec(&self) -> Result<ConvSpec> {
        ConvSpec::new(self.input[1], self.cout, self.kernel, self.stride, self.groups)
    }

    pub fn pattern(&self) -> Result<DilationPattern> {
        DilationPattern::new(self.pattern.clone())
    }

    /// Noisy when there is nothing to take a median over or no warmup.
    pub fn is_noisy(&self) -> bool {
        self.repeats == 1 || self.warmup == 0
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StrategyTiming {
    pub strategy: BenchStrategy,
    pub median_ms: Option<f64>,
    pub mean_ms: Option<f64>,
    pub p95_ms: Option<f64>,
    pub ratio_vs_standard: Option<f64>,
    pub samples_ms: Vec<f64>,
    pub error: Option<String>,
}

impl StrategyTiming {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchMetadata {
    pub threads: usize,
    pub host: String,
    pub noisy: bool,
    pub repeats: usize,
    pub warmup: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema: String,
    pub config: BenchConfig,
    pub metadata: BenchMetadata,
    pub results: Vec<StrategyTiming>,
}

impl BenchReport {
    pub fn get(&self, strategy: BenchStrategy) -> Option<&StrategyTiming> {
        self.results.iter().find(|r| r.strategy == strategy)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from("strategy,median_ms,mean_ms,p95_ms,ratio_vs_standard,error\n");
        for r in &self.results {
            let err = r.error.as_deref().unwrap_or("").replace(['"', '\n'], " ");
            out.push_str(&format!(
                "{},{},{},{},{},\"{}\"\n",
                r.strategy.name(),
                cell(r.median_ms),
                cell(r.mean_ms),
                cell(r.p95_ms),
                cell(r.ratio_vs_standard),
                err
            ));
        }
        out
    }
}

/// Median, mean and nearest-rank 95th percentile.
pub fn summarize(samples: &[f64]) -> Option<(f64, f64, f64)> {
    if samples.is_empty() {
        return None;
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let median = if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    };
    let mean = s.iter().sum::<f64>() / n as f64;
    let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
    Some((median, mean, s[rank - 1]))
}

pub fn host_tag() -> String {
    let name = std::fs::read_to_string("/etc/hostname")
        .ok()
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .or_else(|| std::env::var("HOSTNAME").ok())
        .unwrap_or_else(|| "unknown".into());
    format!("{name}/{}-{}", std::env::consts::OS, std::env::consts::ARCH)
}

type Runner<'a> = Box<dyn Fn() -> Result<Tensor4> + 'a>;

fn time_runner(run: &Runner<'_>, warmup: usize, repeats: usize) -> Result<Vec<f64>> {
    for _ in 0..warmup {
        std::hint::black_box(run()?);
    }
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        let out = run()?;
        samples.push(start.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }
    Ok(samples)
}

/// Runs the benchmark. Configuration errors fail the whole run; a strategy
/// that cannot handle the configuration gets an error entry instead.
pub fn run_bench(config: &BenchConfig) -> Result<BenchReport> {
    config.validate()?;
    match config.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::invalid(e.to_string()))?
            .install(|| run_in_pool(config)),
        None => run_in_pool(config),
    }
}

fn run_in_pool(config: &BenchConfig) -> Result<BenchReport> {
    let spec = config.spec()?;
    let pattern = config.pattern()?;
    let mut rng = Rng::new(config.seed);
    let input = Tensor4::randn(config.input, &mut rng, 1.0)?;
    let weight = Tensor4::randn(spec.weight_dims(), &mut rng, 0.1)?;
    let lattice = DilationMatrix::psconv_grouped(spec.cout, spec.cin, spec.groups, &pattern);
    let lattice = || {
        lattice
            .as_ref()
            .cloned()
            .map_err(|e| Error::invalid(e.to_string()))
    };
    let (input, weight, spec) = (&input, &weight, &spec);

    let mut results: Vec<StrategyTiming> = Vec::new();
    for &strategy in &config.strategies {
        let runner: Result<Runner> = match strategy {
            BenchStrategy::Reference => lattice().map(|l| -> Runner {
                Box::new(move || conv2d_reference(input, weight, spec, &l))
            }),
            BenchStrategy::Masked => lattice().map(|l| -> Runner {
                Box::new(move || psconv_forward_masked(input, weight, spec, &l))
            }),
            BenchStrategy::Rearranged => lattice()
                .and_then(|l| {
                    let plan = l.rearrangement()?;
                    RearrangedLayer::new(weight, spec, &l, &plan)
                })
                .map(|layer| -> Runner { Box::new(move || layer.forward(input)) }),
            BenchStrategy::Dilated => {
                let d = config.dilation;
                Ok(Box::new(move || dilated_conv(input, weight, spec, d)) as Runner)
            }
            BenchStrategy::Standard => {
                Ok(Box::new(move || dilated_conv(input, weight, spec, 1)) as Runner)
            }
        };
        let outcome = runner.and_then(|r| time_runner(&r, config.warmup, config.repeats));
        results.push(match outcome {
            Ok(samples) => {
                let (median, mean, p95) = summarize(&samples).expect("repeats >= 1");
                StrategyTiming {
                    strategy,
                    median_ms: Some(median),
                    mean_ms: Some(mean),
                    p95_ms: Some(p95),
                    ratio_vs_standard: None,
                    samples_ms: samples,
                    error: None,
                }
            }
            Err(e) => StrategyTiming {
                strategy,
                median_ms: None,
                mean_ms: None,
                p95_ms: None,
                ratio_vs_standard: None,
                samples_ms: Vec::new(),
                error: Some(e.to_string()),
            },
        });
    }

    let baseline = results
        .iter()
        .find(|r| r.strategy == BenchStrategy::Standard)
        .and_then(|r| r.median_ms)
        .filter(|&m| m > 0.0);
    if let Some(base) = baseline {
        for r in &mut results {
            r.ratio_vs_standard = r.median_ms.map(|m| m / base);
        }
    }

    Ok(BenchReport {
        schema: BENCH_SCHEMA.into(),
        config: config.clone(),
        metadata: BenchMetadata {
            threads: rayon::current_num_threads(),
            host: host_tag(),
            noisy: config.is_noisy(),
            repeats: config.repeats,
            warmup: config.warmup,
        },
        results,
    })
}
