//! Decoding overhead of the former relative to the plain decoder, measured
//! on matched workloads, plus analytic multiply-add counts.

use std::fmt::Write as _;
use std::time::Instant;

use crate::error::{Result, VifError};
use crate::model::{generate, GenerationConfig, Mode, ModelParams, VisualCacheStrategy};
use crate::synthgrid::GridImage;
use crate::vif::VifParams;

/// Reported alongside for context; measured at 7B scale on GPUs.
pub const REFERENCE_TIME_RATIO: f64 = 1.04;
pub const REFERENCE_MEMORY_RATIO: f64 = 1.05;

/// Below this much total baseline time the medians are mostly timer noise.
pub const MIN_TIMED_NS: u128 = 10_000_000;

/// Multiply-adds the former adds to one decoding step with a prebuilt cache:
/// query and output projections `2 d²`, scores and weighted values
/// `2 N_v d`, and the fusion norm `2 d` (variance accumulation and gain).
pub fn cached_step_macs(n_visual: usize, d: usize) -> u64 {
    let (n, d) = (n_visual as u64, d as u64);
    2 * d * d + 2 * n * d + 2 * d
}

/// Multiply-adds of building the visual cache: key/value projections
/// `2 N_v d²`, plus (with self-attention) its four projections `4 N_v d²`,
/// scores and weighted values `2 N_v² d`, and the refine norm `2 N_v d`.
pub fn cache_build_macs(n_visual: usize, d: usize, self_attn: bool) -> u64 {
    let (n, d) = (n_visual as u64, d as u64);
    let kv = 2 * n * d * d;
    if self_attn {
        kv + 4 * n * d * d + 2 * n * n * d + 2 * n * d
    } else {
        kv
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchArm {
    Baseline,
    Passthrough,
    VifCached,
    VifNaive,
}

impl BenchArm {
    pub const ALL: [BenchArm; 4] = [BenchArm::Baseline, BenchArm::Passthrough, BenchArm::VifCached, BenchArm::VifNaive];

    pub fn as_str(self) -> &'static str {
        match self {
            BenchArm::Baseline => "baseline",
            BenchArm::Passthrough => "passthrough",
            BenchArm::VifCached => "vif_cached",
            BenchArm::VifNaive => "vif_naive",
        }
    }

    fn config(self, steps: usize) -> GenerationConfig {
        let mode = match self {
            BenchArm::Baseline => Mode::Baseline,
            BenchArm::Passthrough => Mode::Passthrough,
            BenchArm::VifCached | BenchArm::VifNaive => Mode::Vif,
        };
        let mut c = GenerationConfig::new(mode, steps);
        c.stop_at_eos = false;
        if self == BenchArm::VifNaive {
            c.cache = VisualCacheStrategy::RecomputeEachStep;
        }
        c
    }

    /// Analytic extra multiply-adds per step over the plain decoder.
    pub fn extra_macs(self, n_visual: usize, d: usize, self_attn: bool) -> u64 {
        match self {
            BenchArm::Baseline | BenchArm::Passthrough => 0,
            BenchArm::VifCached => cached_step_macs(n_visual, d),
            BenchArm::VifNaive => cached_step_macs(n_visual, d) + cache_build_macs(n_visual, d, self_attn),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Workload {
    pub items: Vec<(GridImage, Vec<usize>)>,
    /// Decoding steps per item, EOS ignored.
    pub steps: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct BenchOptions {
    pub warmups: usize,
    pub reps: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions { warmups: 3, reps: 7 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmResult {
    pub arm: BenchArm,
    pub params: usize,
    pub extra_macs_per_step: u64,
    pub median_step_ns: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverheadReport {
    pub n_visual: usize,
    pub d_model: usize,
    pub vif_heads: usize,
    pub self_attn: bool,
    pub steps: usize,
    pub samples: usize,
    pub options: (usize, usize),
    pub arms: Vec<ArmResult>,
    /// Cached and naive VIF decoding produced the same tokens everywhere.
    pub cache_tokens_match: bool,
}

impl OverheadReport {
    pub fn arm(&self, arm: BenchArm) -> &ArmResult {
        self.arms.iter().find(|a| a.arm == arm).expect("every arm is measured")
    }

    pub fn time_ratio(&self) -> f64 {
        self.arm(BenchArm::VifCached).median_step_ns / self.arm(BenchArm::Baseline).median_step_ns
    }

    pub fn param_ratio(&self) -> f64 {
        self.arm(BenchArm::VifCached).params as f64 / self.arm(BenchArm::Baseline).params as f64
    }

    /// `timing = false` drops every wall-time field, leaving a
    /// deterministic report.
    pub fn to_csv(&self, seed: u64, timing: bool) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "# overhead seed={seed} n_visual={} d_model={} vif_heads={} self_attn={} steps={} samples={} warmups={} reps={}",
            self.n_visual, self.d_model, self.vif_heads, self.self_attn, self.steps, self.samples, self.options.0, self.options.1
        )
        .unwrap();
        out.push_str(
            "# extra_macs_per_step: cached = 2*d^2 + 2*n_v*d + 2*d; \
             naive adds 2*n_v*d^2 + [self-attn] 4*n_v*d^2 + 2*n_v^2*d + 2*n_v*d\n",
        );
        out.push_str(if timing {
            "arm,params,extra_macs_per_step,median_step_us,time_ratio_vs_baseline\n"
        } else {
            "arm,params,extra_macs_per_step\n"
        });
        let base = self.arm(BenchArm::Baseline).median_step_ns;
        for a in &self.arms {
            write!(out, "{},{},{}", a.arm.as_str(), a.params, a.extra_macs_per_step).unwrap();
            if timing {
                write!(out, ",{:.3},{:.4}", a.median_step_ns / 1e3, a.median_step_ns / base).unwrap();
            }
            out.push('\n');
        }
        writeln!(out, "# cache_tokens_match={}", self.cache_tokens_match).unwrap();
        writeln!(out, "# param_ratio={:.4}", self.param_ratio()).unwrap();
        writeln!(
            out,
            "# reference time_ratio={REFERENCE_TIME_RATIO} memory_ratio={REFERENCE_MEMORY_RATIO} (7B scale, not comparable)"
        )
        .unwrap();
        out
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times every arm on the same workload, interleaving arms within each
/// repetition so drift affects them alike.
pub fn measure_overhead(
    model: &ModelParams,
    vif: &VifParams,
    workload: &Workload,
    opts: &BenchOptions,
) -> Result<OverheadReport> {
    if workload.items.is_empty() || workload.steps == 0 {
        return Err(VifError::invalid("empty benchmark workload"));
    }
    if opts.warmups < 3 || opts.reps == 0 {
        return Err(VifError::invalid("benchmark needs at least 3 warmups and 1 timed repetition"));
    }
    let per_run_steps = (workload.items.len() * workload.steps) as f64;
    let mut samples: Vec<Vec<f64>> = vec![Vec::new(); BenchArm::ALL.len()];
    let mut baseline_total: u128 = 0;
    let mut cached_tokens = Vec::new();
    let mut naive_tokens = Vec::new();
    for rep in 0..opts.warmups + opts.reps {
        for (k, arm) in BenchArm::ALL.iter().enumerate() {
            let cfg = arm.config(workload.steps);
            let start = Instant::now();
            for (img, prompt) in &workload.items {
                let tr = generate(img, prompt, model, Some(vif), &cfg)?;
                if rep == 0 {
                    match arm {
                        BenchArm::VifCached => cached_tokens.push(tr.tokens()),
                        BenchArm::VifNaive => naive_tokens.push(tr.tokens()),
                        _ => {}
                    }
                }
            }
            let elapsed = start.elapsed().as_nanos();
            if rep >= opts.warmups {
                samples[k].push(elapsed as f64 / per_run_steps);
                if *arm == BenchArm::Baseline {
                    baseline_total += elapsed;
                }
            }
        }
    }
    if baseline_total < MIN_TIMED_NS {
        return Err(VifError::invalid(format!(
            "workload too short to time: {:.2} ms of baseline decoding (need 10 ms)",
            baseline_total as f64 / 1e6
        )));
    }
    let n_visual = workload.items[0].0.n_cells();
    if workload.items.iter().any(|(img, _)| img.n_cells() != n_visual) {
        return Err(VifError::invalid("benchmark images must share one grid size"));
    }
    let d = model.config.d_model;
    let arms = BenchArm::ALL
        .iter()
        .zip(samples)
        .map(|(&arm, s)| ArmResult {
            arm,
            params: match arm {
                BenchArm::Baseline => model.num_params(),
                _ => model.num_params() + vif.num_params(),
            },
            extra_macs_per_step: arm.extra_macs(n_visual, d, vif.enable_self_attn),
            median_step_ns: median(s),
        })
        .collect();
    Ok(OverheadReport {
        n_visual,
        d_model: d,
        vif_heads: vif.cross_attn.n_heads,
        self_attn: vif.enable_self_attn,
        steps: workload.steps,
        samples: workload.items.len(),
        options: (opts.warmups, opts.reps),
        arms,
        cache_tokens_match: cached_tokens == naive_tokens,
    })
}
