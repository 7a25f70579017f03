//! Commands behind the `cnnjit` binary. Each returns a value the binary
//! prints; nothing here writes to stdout.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cnnjit::{
    build_graph, interpret, ActivationMode, ApproximationOptions, CodegenOptions, CompiledNetwork,
    ComputationGraph, Model, SoftmaxExp, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_RUNS: usize = 100;
pub const DEFAULT_WARMUP: usize = 10;
pub const DEFAULT_TRIALS: usize = 100;
pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_TOL_ABS: f32 = 1e-5;

/// Relative errors divide by at least this much.
pub const REL_ERROR_FLOOR: f32 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Cnnjit(#[from] cnnjit::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("input file holds {got} bytes, network inputs need {expected}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        2
    }
}

pub struct Loaded {
    /// File stem of the manifest.
    pub id: String,
    pub model: Model,
    pub graph: ComputationGraph,
}

pub fn load(manifest: &Path, weights: Option<&Path>) -> Result<Loaded, CliError> {
    let model = Model::load(manifest, weights)?;
    let graph = build_graph(&model.manifest, &model.weights).map_err(cnnjit::Error::from)?;
    let id = manifest
        .file_stem()
        .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    Ok(Loaded { id, model, graph })
}

pub fn codegen_options(mode: ActivationMode, softmax_exp: SoftmaxExp) -> CodegenOptions {
    CodegenOptions {
        approximations: ApproximationOptions {
            activation_mode: mode,
            softmax_exp,
        },
        ..Default::default()
    }
}

fn compile(loaded: &Loaded, options: &CodegenOptions) -> Result<CompiledNetwork, CliError> {
    Ok(CompiledNetwork::from_graph(&loaded.graph, options)?)
}

fn random_inputs(graph: &ComputationGraph, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    graph
        .input_shapes()
        .into_iter()
        .map(|s| {
            let data = (0..s.element_count())
                .map(|_| rng.gen_range(-1.0f32..=1.0))
                .collect();
            Tensor::new(s, data)
        })
        .collect()
}

fn run_compiled(net: &mut CompiledNetwork, inputs: &[Tensor]) -> Vec<Vec<f32>> {
    for (i, t) in inputs.iter().enumerate() {
        net.input_view(i)
            .expect("input count matches the graph")
            .copy_from_slice(&t.data);
    }
    net.apply();
    (0..net.outputs().len())
        .map(|i| net.output_view(i).expect("output index in range").to_vec())
        .collect()
}

/// Unit schedule, buffer plan, instruction listing and sizes.
pub fn cmd_inspect(loaded: &Loaded, options: &CodegenOptions) -> Result<String, CliError> {
    let net = compile(loaded, options)?;
    let mut out = String::new();
    let m = net.metadata();
    let _ = writeln!(out, "model {}", loaded.id);
    let _ = writeln!(out, "# units ({})", m.units);
    out.push_str(&net.plan().dump());
    let _ = writeln!(out, "# buffers");
    out.push_str(&net.assignment().dump());
    let _ = writeln!(
        out,
        "# code ({} bytes, pool {} bytes)",
        m.code_bytes, m.pool_bytes
    );
    out.push_str(&net.artifact().trace.listing());
    let _ = writeln!(out, "arena_bytes {}", m.arena_bytes);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputError {
    pub index: usize,
    pub max_abs: f32,
    pub max_rel: f32,
    /// Compiled and interpreted argmax agreed on every trial.
    pub argmax_agrees: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub model: String,
    pub trials: usize,
    pub seed: u64,
    pub tol_abs: f32,
    pub activation_mode: String,
    pub softmax_exp: String,
    pub outputs: Vec<OutputError>,
    pub passed: bool,
}

impl VerifyReport {
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "verify {} trials={} seed={} tol_abs={:e} mode={} softmax_exp={}",
            self.model,
            self.trials,
            self.seed,
            self.tol_abs,
            self.activation_mode,
            self.softmax_exp
        );
        let _ = writeln!(out, "output  max_abs       max_rel       argmax");
        for o in &self.outputs {
            let _ = writeln!(
                out,
                "{:<6}  {:<12e}  {:<12e}  {}",
                o.index,
                o.max_abs,
                o.max_rel,
                if o.argmax_agrees { "agree" } else { "differ" }
            );
        }
        let _ = writeln!(out, "{}", if self.passed { "PASS" } else { "FAIL" });
        out
    }
}

fn argmax(v: &[f32]) -> Option<usize> {
    (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b]))
}

/// Compiled against interpreted on `trials` seeded random inputs.
pub fn cmd_verify(
    loaded: &Loaded,
    trials: usize,
    seed: u64,
    tol_abs: f32,
    options: &CodegenOptions,
) -> Result<VerifyReport, CliError> {
    let mut net = compile(loaded, options)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut outputs: Vec<OutputError> = (0..net.outputs().len())
        .map(|index| OutputError {
            index,
            max_abs: 0.0,
            max_rel: 0.0,
            argmax_agrees: true,
        })
        .collect();
    for _ in 0..trials {
        let inputs = random_inputs(&loaded.graph, &mut rng);
        let expected = interpret(&loaded.graph, &inputs).map_err(cnnjit::Error::from)?;
        let got = run_compiled(&mut net, &inputs);
        for ((o, g), e) in outputs.iter_mut().zip(&got).zip(&expected) {
            for (&a, &b) in g.iter().zip(&e.data) {
                let abs = if a == b { 0.0 } else { (a - b).abs() };
                o.max_abs = o.max_abs.max(abs);
                o.max_rel = o.max_rel.max(abs / b.abs().max(REL_ERROR_FLOOR));
            }
            o.argmax_agrees &= argmax(g) == argmax(&e.data);
        }
    }
    let passed = outputs.iter().all(|o| o.max_abs <= tol_abs);
    Ok(VerifyReport {
        model: loaded.id.clone(),
        trials,
        seed,
        tol_abs,
        activation_mode: options.approximations.activation_mode.as_str().into(),
        softmax_exp: options.approximations.softmax_exp.as_str().into(),
        outputs,
        passed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub activation_mode: String,
    pub softmax_exp: String,
    pub n_xmm: usize,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model: String,
    pub compile_ms: f64,
    pub mean_us: f64,
    pub std_dev_us: f64,
    pub runs: usize,
    pub warmup: usize,
    pub interpreter_mean_us: f64,
    /// `interpreter_mean_us / mean_us`.
    pub speedup: f64,
    pub host_cpu: String,
    pub options: BenchOptions,
}

impl BenchReport {
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "bench {} on {}", self.model, self.host_cpu);
        let _ = writeln!(
            out,
            "options mode={} softmax_exp={} n_xmm={} k={}",
            self.options.activation_mode,
            self.options.softmax_exp,
            self.options.n_xmm,
            self.options.k
        );
        let _ = writeln!(out, "runs {} warmup {}", self.runs, self.warmup);
        let _ = writeln!(out, "compile_ms          {:.3}", self.compile_ms);
        let _ = writeln!(out, "mean_us             {:.3}", self.mean_us);
        let _ = writeln!(out, "std_dev_us          {:.3}", self.std_dev_us);
        let _ = writeln!(out, "interpreter_mean_us {:.3}", self.interpreter_mean_us);
        let _ = writeln!(out, "speedup             {:.1}", self.speedup);
        out
    }
}

fn mean_std(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Compile time once, `warmup` untimed applies, then `runs` timed ones.
/// The interpreter is timed the same way on the same input.
pub fn cmd_bench(
    loaded: &Loaded,
    runs: usize,
    warmup: usize,
    seed: u64,
    options: &CodegenOptions,
) -> Result<BenchReport, CliError> {
    if runs == 0 {
        return Err(CliError::Usage("--runs must be at least 1".into()));
    }
    let start = Instant::now();
    let mut net = CompiledNetwork::compile(&loaded.model, options)?;
    let compile_ms = start.elapsed().as_secs_f64() * 1e3;

    let inputs = random_inputs(&loaded.graph, &mut ChaCha8Rng::seed_from_u64(seed));
    for (i, t) in inputs.iter().enumerate() {
        net.input_view(i)
            .expect("input count matches the graph")
            .copy_from_slice(&t.data);
    }
    for _ in 0..warmup {
        net.apply();
    }
    let compiled: Vec<f64> = (0..runs)
        .map(|_| {
            let t = Instant::now();
            net.apply();
            t.elapsed().as_secs_f64() * 1e6
        })
        .collect();

    for _ in 0..warmup {
        std::hint::black_box(interpret(&loaded.graph, &inputs).map_err(cnnjit::Error::from)?);
    }
    let mut interpreted = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t = Instant::now();
        std::hint::black_box(interpret(&loaded.graph, &inputs).map_err(cnnjit::Error::from)?);
        interpreted.push(t.elapsed().as_secs_f64() * 1e6);
    }

    let (mean_us, std_dev_us) = mean_std(&compiled);
    let (interpreter_mean_us, _) = mean_std(&interpreted);
    Ok(BenchReport {
        model: loaded.id.clone(),
        compile_ms,
        mean_us,
        std_dev_us,
        runs,
        warmup,
        interpreter_mean_us,
        speedup: interpreter_mean_us / mean_us.max(1e-3),
        host_cpu: host_cpu(),
        options: BenchOptions {
            activation_mode: options.approximations.activation_mode.as_str().into(),
            softmax_exp: options.approximations.softmax_exp.as_str().into(),
            n_xmm: options.budget.n_xmm,
            k: options.budget.k,
        },
    })
}

/// Applies the network to the little-endian f32 values in `input`, which
/// hold every network input back to back.
pub fn cmd_run(
    loaded: &Loaded,
    input: &[u8],
    options: &CodegenOptions,
) -> Result<Vec<Vec<f32>>, CliError> {
    let mut net = compile(loaded, options)?;
    let sizes: Vec<usize> = net
        .inputs()
        .iter()
        .map(|d| d.shape.element_count())
        .collect();
    let expected = 4 * sizes.iter().sum::<usize>();
    if input.len() != expected {
        return Err(CliError::SizeMismatch {
            expected,
            got: input.len(),
        });
    }
    let mut values = input
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    for (i, &n) in sizes.iter().enumerate() {
        let view = net.input_view(i).expect("input index in range");
        for (dst, v) in view.iter_mut().zip(values.by_ref().take(n)) {
            *dst = v;
        }
    }
    net.apply();
    Ok((0..net.outputs().len())
        .map(|i| net.output_view(i).expect("output index in range").to_vec())
        .collect())
}

pub fn format_outputs(outputs: &[Vec<f32>]) -> String {
    let mut out = String::new();
    for o in outputs {
        let line: Vec<String> = o.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

/// CPU brand string from `cpuid`, or the architecture name elsewhere.
pub fn host_cpu() -> String {
    #[cfg(target_arch = "x86_64")]
    {
        use std::arch::x86_64::__cpuid;
        #[allow(unused_unsafe)]
        // SAFETY: cpuid is available on every x86-64 processor.
        let brand = unsafe {
            if __cpuid(0x8000_0000).eax >= 0x8000_0004 {
                let mut bytes = Vec::with_capacity(48);
                for leaf in 0x8000_0002u32..=0x8000_0004 {
                    let r = __cpuid(leaf);
                    for word in [r.eax, r.ebx, r.ecx, r.edx] {
                        bytes.extend_from_slice(&word.to_le_bytes());
                    }
                }
                Some(bytes)
            } else {
                None
            }
        };
        if let Some(bytes) = brand {
            let text = String::from_utf8_lossy(&bytes);
            let text = text.trim_matches(char::from(0)).trim();
            if !text.is_empty() {
                return text.to_string();
            }
        }
    }
    std::env::consts::ARCH.to_string()
}
