use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use selconv::conv::conv2d_dense;
use selconv::data::{generate_dataset, read_dataset, read_ppm, write_dataset, SceneParams};
use selconv::detect::DecodeParams;
use selconv::flops::{report, Convention};
use selconv::gradcheck::standard_suites;
use selconv::graph::Graph;
use selconv::mask::SaliencyMask;
use selconv::masked::masked_conv2d;
use selconv::params::ParamStore;
use selconv::spec::{NetworkSpec, Supervision};
use selconv::train::{evaluate, history_csv, train_toy, TrainConfig};
use selconv::{ConvParams, Error, Tensor};

#[derive(Parser)]
#[command(name = "scn", version, about = "Selective convolution toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Dense FLOPs of a network spec, per layer and total.
    CountFlops {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value = "macs")]
        convention: Convention,
        /// Also write the report as CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Randomized masked-vs-dense convolution trials.
    CheckEquiv {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Finite-difference checks of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Writes a synthetic shapes dataset.
    GenData {
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains a spec on a dataset directory and writes weights and history.
    Train {
        #[arg(long)]
        spec: PathBuf,
        /// Dataset directory; 200 synthetic scenes from `--seed` when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        strategy: Option<Supervision>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for weights.scnw and history.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs one image and writes detections and saliency maps.
    Infer {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// Input image (binary PPM).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        score: f32,
    },
}

/// Failure with its exit code: 1 for violated contracts, 2 for bad input.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Schema { .. } | Error::Io(_) => 2,
            _ => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

fn violation(message: impl Into<String>) -> Failure {
    Failure { code: 1, message: message.into() }
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure { code: 2, message: format!("{}: {e}", path.display()) }
}

fn load_graph(path: &Path) -> Result<Graph, Failure> {
    let text = fs::read_to_string(path).map_err(io_at(path))?;
    Ok(Graph::build(&NetworkSpec::from_json(&text)?)?)
}

fn count_flops(spec: &Path, convention: Convention, out: Option<&Path>) -> Result<(), Failure> {
    let g = load_graph(spec)?;
    let r = report(&g.costs(), &[], convention)?;
    print!("{}", r.to_table());
    for c in [Convention::Macs, Convention::TwoMacs] {
        println!("total ({}): {:.4} G", c.name(), report(&g.costs(), &[], c)?.dense_giga());
    }
    if let Some(p) = out {
        fs::write(p, r.to_csv()).map_err(io_at(p))?;
    }
    Ok(())
}

fn check_equiv(seed: u64, trials: usize) -> Result<(), Failure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut exact = 0;
    for _ in 0..trials {
        let (n, cin, cout) = (rng.gen_range(1..=2), rng.gen_range(1..=8), rng.gen_range(1..=8));
        let (h, w) = (rng.gen_range(3..=16), rng.gen_range(3..=16));
        let k = [1, 3][rng.gen_range(0..2)];
        let p = ConvParams::square(k, rng.gen_range(1..=2), k / 2, 1);
        let (ho, wo) = p.output_dims(h, w)?;
        let x = Tensor::from_fn([n, cin, h, w], |_, _, _, _| rng.gen_range(-1.0f32..1.0));
        let wt = Tensor::from_fn([cout, cin, k, k], |_, _, _, _| rng.gen_range(-1.0f32..1.0));
        let b: Vec<f32> = (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d = rng.gen_range(0.0..=1.0);
        let m = SaliencyMask::from_fn(ho, wo, |_, _| rng.gen_bool(d));
        let dense = conv2d_dense(&x, &wt, &b, &p)?;
        let masked = masked_conv2d(&x, &wt, &b, &m, &p)?;
        let plane = ho * wo;
        let ok = masked.data().iter().zip(dense.data()).enumerate().all(|(i, (a, b))| {
            let cell = i % plane;
            let want = if m.get(cell / wo, cell % wo) { *b } else { 0.0 };
            a.to_bits() == want.to_bits()
        });
        exact += ok as usize;
    }
    println!("{exact}/{trials} exact");
    if exact == trials {
        Ok(())
    } else {
        Err(violation(format!("{} trials differ from the dense oracle", trials - exact)))
    }
}

fn gradcheck(seed: u64) -> Result<(), Failure> {
    let tol = 1e-4;
    let mut failed = Vec::new();
    for (name, c) in standard_suites(seed)? {
        let pass = c.passes(tol);
        println!("{name:<16} {:>5} coords  max rel error {:.3e}  {}", c.checked, c.max_rel_error, if pass { "ok" } else { "FAIL" });
        if !pass {
            failed.push(name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(violation(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn gen_data(count: usize, seed: u64, out: &Path) -> Result<(), Failure> {
    let scenes = generate_dataset(count, seed, &SceneParams::default());
    write_dataset(out, &scenes)?;
    println!("wrote {count} scenes to {}", out.display());
    Ok(())
}

fn train(
    spec: &Path,
    data: Option<&Path>,
    strategy: Option<Supervision>,
    epochs: Option<usize>,
    seed: u64,
    out: &Path,
) -> Result<(), Failure> {
    let g = load_graph(spec)?;
    let scenes = match data {
        Some(d) => read_dataset(d)?,
        None => generate_dataset(200, seed, &SceneParams::default()),
    };
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        strategy: strategy.unwrap_or(g.spec().supervision),
        epochs: epochs.unwrap_or(defaults.epochs),
        seed,
        ..defaults
    };
    let outcome = train_toy(&g, g.init_params(seed), &scenes, &cfg)?;
    fs::create_dir_all(out).map_err(io_at(out))?;
    let weights = out.join("weights.scnw");
    let file = fs::File::create(&weights).map_err(io_at(&weights))?;
    outcome.params.write_scnw(BufWriter::new(file))?;
    fs::write(out.join("history.csv"), history_csv(&outcome.history)).map_err(io_at(out))?;
    if let Some(last) = outcome.history.last() {
        println!(
            "epoch {}: L {:.4} Lc {:.4} Ll {:.4} Lm {:.4}",
            last.epoch, last.loss.total, last.loss.cls, last.loss.loc, last.loss.mask
        );
    }
    if g.selective().is_some() {
        let e = evaluate(&g, &outcome.params, &scenes)?;
        println!(
            "train set: Lm {:.4}, recall {:.4}, density {:.3}, guided reduction {:.1}%",
            e.mask_loss, e.recall, e.density_mean, e.flops.guided_reduced_percent
        );
    }
    println!("wrote {}", weights.display());
    Ok(())
}

fn write_prob_pgm(path: &Path, h: usize, w: usize, values: &[f32]) -> Result<(), Failure> {
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes).map_err(io_at(path))
}

fn infer(spec: &Path, weights: &Path, image: &Path, out: &Path, score: f32) -> Result<(), Failure> {
    let g = load_graph(spec)?;
    let file = fs::File::open(weights).map_err(io_at(weights))?;
    let params = ParamStore::read_scnw(std::io::BufReader::new(file))?;
    params.validate(&g.param_specs())?;
    let bytes = fs::read(image).map_err(io_at(image))?;
    let img = read_ppm(&bytes, &image.display().to_string())?;
    let decode = DecodeParams { score_thresh: score, ..DecodeParams::default() };
    let r = g.infer(&params, &img, &decode, None)?;
    fs::create_dir_all(out).map_err(io_at(out))?;
    let json = serde_json::to_string_pretty(&r.detections).expect("detections serialize");
    fs::write(out.join("detections.json"), &json).map_err(io_at(out))?;
    println!("{json}");
    if let Some(p) = &r.prob {
        let (h, w) = p.dims();
        write_prob_pgm(&out.join("prob.pgm"), h, w, p.values())?;
    }
    if let Some(pyr) = &r.pyramid {
        for (i, m) in pyr.levels.iter().enumerate() {
            let path = out.join(format!("mask_l{i}.pgm"));
            let f = fs::File::create(&path).map_err(io_at(&path))?;
            m.write_pgm(BufWriter::new(f))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let res = match &cli.cmd {
        Cmd::CountFlops { spec, convention, out } => count_flops(spec, *convention, out.as_deref()),
        Cmd::CheckEquiv { seed, trials } => check_equiv(*seed, *trials),
        Cmd::Gradcheck { seed } => gradcheck(*seed),
        Cmd::GenData { count, seed, out } => gen_data(*count, *seed, out),
        Cmd::Train { spec, data, strategy, epochs, seed, out } => {
            train(spec, data.as_deref(), *strategy, *epochs, *seed, out)
        }
        Cmd::Infer { spec, weights, data, out, score } => infer(spec, weights, data, out, *score),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
