use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use attrop::data::{
    generate_synthetic, load_checkpoint, load_dataset, load_pool, load_vector_file,
    save_checkpoint, save_dataset, save_ground_truth, SyntheticSpec,
};
use attrop::error::{Error, Result};
use attrop::evaluation;
use attrop::linalg::Vector;
use attrop::losses::LossWeights;
use attrop::model::{init_params, ModelParams, PairId};
use attrop::training::{gradcheck, train, Preset, TrainConfig};

#[derive(Parser)]
#[command(name = "attrop", about = "Attribute-operator composition engine", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic planted-model dataset
    Synth(SynthArgs),
    /// Train a model on a dataset directory
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset's test split
    Eval(EvalArgs),
    /// Retrieve nearest pool images for a composed query
    Retrieve(RetrieveArgs),
    /// Certify analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Dump composed pair embeddings from a checkpoint
    DumpEmbeddings(DumpArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    attrs: usize,
    #[arg(long, default_value_t = 15)]
    objs: usize,
    #[arg(long, default_value_t = 12)]
    dim: usize,
    #[arg(long = "images-per-pair", default_value_t = 50)]
    images_per_pair: usize,
    #[arg(long = "unseen-frac", default_value_t = 0.2)]
    unseen_frac: f64,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0.2)]
    perturb: f64,
    /// Warp features with a fixed random nonlinearity
    #[arg(long)]
    misspecified: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, ValueEnum)]
enum PresetArg {
    MitLike,
    ZapposLike,
    Synthetic,
}

impl PresetArg {
    fn to_preset(self) -> Preset {
        match self {
            PresetArg::MitLike => Preset::MitLike,
            PresetArg::ZapposLike => Preset::ZapposLike,
            PresetArg::Synthetic => Preset::Synthetic,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "synthetic")]
    preset: PresetArg,
    /// Embedding dimension (defaults to the object-vector dimension if the
    /// dataset ships vectors, else the feature dimension)
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long = "lr-attr")]
    lr_attr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long = "w-aux")]
    w_aux: Option<f64>,
    #[arg(long = "w-inv")]
    w_inv: Option<f64>,
    #[arg(long = "w-comm")]
    w_comm: Option<f64>,
    #[arg(long = "w-ant")]
    w_ant: Option<f64>,
    /// Antonym list file (overrides any antonyms.txt in the data directory)
    #[arg(long)]
    antonyms: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Zero out wall-clock columns so stats files are reproducible
    #[arg(long)]
    deterministic: bool,
    /// Keep object vectors fixed at their initialization
    #[arg(long = "freeze-objects")]
    freeze_objects: bool,
    /// Block gradient flow through the matrix inverse in the inverse term
    #[arg(long = "detach-inverse")]
    detach_inverse: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, ValueEnum)]
enum WorldArg {
    Open,
    Closed,
    Both,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    world: WorldArg,
    /// Also report accuracy with the true object given
    #[arg(long = "obj-oracle")]
    obj_oracle: bool,
    /// Write the full report as CSV
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    attr: String,
    /// Object name from the checkpoint vocabulary
    #[arg(long, conflicts_with = "obj_vec")]
    obj: Option<String>,
    /// File with a raw object vector (one line of values)
    #[arg(long = "obj-vec")]
    obj_vec: Option<PathBuf>,
    #[arg(long)]
    pool: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 6)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    attrs: usize,
    #[arg(long, default_value_t = 5)]
    objs: usize,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn write_text(path: &PathBuf, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        num_attrs: args.attrs,
        num_objs: args.objs,
        dim: args.dim,
        images_per_pair: args.images_per_pair,
        unseen_fraction: args.unseen_frac,
        noise_sigma: args.noise,
        operator_perturbation: args.perturb,
        misspecified: args.misspecified,
        seed: args.seed,
    };
    let (bundle, truth) = generate_synthetic(&spec)?;
    save_dataset(&bundle, &args.out)?;
    save_ground_truth(&bundle.vocab, &truth, &args.out)?;
    println!(
        "wrote {} train / {} test instances over {} seen + {} unseen pairs to {}",
        bundle.train.len(),
        bundle.test.len(),
        bundle.seen_pairs.len(),
        bundle.unseen_pairs.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut bundle = load_dataset(&args.data)?;
    if let Some(path) = &args.antonyms {
        bundle.antonyms = Some(attrop::data::load_antonyms(path, &bundle.vocab)?);
    }

    let mut cfg = TrainConfig::from_preset(args.preset.to_preset());
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.lr {
        cfg.lr_main = v;
    }
    if let Some(v) = args.lr_attr {
        cfg.lr_attr = v;
    }
    if let Some(v) = args.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = args.w_aux {
        cfg.weights.w_aux = v;
    }
    if let Some(v) = args.w_inv {
        cfg.weights.w_inv = v;
    }
    if let Some(v) = args.w_comm {
        cfg.weights.w_comm = v;
    }
    if let Some(v) = args.w_ant {
        cfg.weights.w_ant = v;
    }
    cfg.seed = args.seed;
    cfg.deterministic = args.deterministic;
    cfg.freeze_objects = args.freeze_objects;
    cfg.detach_inverse = args.detach_inverse;

    let vec_dim = bundle
        .object_vectors
        .as_ref()
        .and_then(|m| m.values().next().map(|v| v.len()));
    let dim = args.dim.or(vec_dim).unwrap_or(bundle.feat_dim);
    // only seed objects from dataset vectors when the dimensions line up
    let object_init: Option<&HashMap<String, Vector>> = match (&bundle.object_vectors, vec_dim) {
        (Some(m), Some(d)) if d == dim => Some(m),
        _ => None,
    };

    let params = init_params(
        bundle.vocab.clone(),
        dim,
        bundle.feat_dim,
        object_init,
        cfg.seed,
    )?;
    let (trained, stats) = train(params, &bundle, &cfg)?;
    save_checkpoint(&trained, &args.out)?;
    let stats_path = args.out.with_extension("stats.csv");
    write_text(&stats_path, &stats.to_csv())?;
    if let Some(last) = stats.epochs.last() {
        println!(
            "trained {} epochs, final loss {:.6}",
            stats.epochs.len(),
            last.loss.total
        );
    } else {
        println!("trained 0 epochs");
    }
    println!("checkpoint: {}", args.out.display());
    println!("stats: {}", stats_path.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let bundle = load_dataset(&args.data)?;
    let params = load_checkpoint(&args.ckpt)?;
    if params.feat_dim != bundle.feat_dim {
        return Err(Error::validation(format!(
            "checkpoint expects {}-dim features but dataset has {}",
            params.feat_dim, bundle.feat_dim
        )));
    }
    let test: Vec<(Vector, PairId)> = bundle
        .test
        .iter()
        .map(|inst| {
            let pair = remap_pair(&params, &bundle.vocab, inst.pair, &inst.id)?;
            Ok((inst.feat.clone(), pair))
        })
        .collect::<Result<_>>()?;
    let seen = remap_pairs(&params, &bundle.vocab, &bundle.seen_pairs)?;
    let unseen = remap_pairs(&params, &bundle.vocab, &bundle.unseen_pairs)?;

    let report = evaluation::evaluate(&params, &test, &seen, &unseen)?;
    match args.world {
        WorldArg::Closed => println!("closed {:5.1}%", report.closed_top1 * 100.0),
        WorldArg::Open => println!("open {:5.1}%", report.open_top1 * 100.0),
        WorldArg::Both => {
            println!("closed {:5.1}%", report.closed_top1 * 100.0);
            println!("open {:5.1}%", report.open_top1 * 100.0);
            println!("h-mean {:5.1}%", report.h_mean * 100.0);
        }
    }
    if args.obj_oracle {
        println!("+obj {:5.1}%", report.obj_oracle_top1 * 100.0);
    }
    if let Some(path) = &args.report {
        write_text(path, &report.to_csv(&params))?;
        println!("report: {}", path.display());
    }
    Ok(())
}

/// Datasets and checkpoints may order names differently; evaluation indices
/// must follow the checkpoint vocabulary.
fn remap_pair(
    params: &ModelParams,
    data_vocab: &attrop::model::Vocab,
    pair: PairId,
    context: &str,
) -> Result<PairId> {
    let attr_name = &data_vocab.attributes[pair.attr];
    let obj_name = &data_vocab.objects[pair.obj];
    let attr = params.vocab.attr_index(attr_name).ok_or_else(|| {
        Error::validation(format!(
            "checkpoint has no attribute '{attr_name}' (needed by '{context}')"
        ))
    })?;
    let obj = params.vocab.obj_index(obj_name).ok_or_else(|| {
        Error::validation(format!(
            "checkpoint has no object '{obj_name}' (needed by '{context}')"
        ))
    })?;
    Ok(PairId { attr, obj })
}

fn remap_pairs(
    params: &ModelParams,
    data_vocab: &attrop::model::Vocab,
    pairs: &[PairId],
) -> Result<Vec<PairId>> {
    pairs
        .iter()
        .map(|&p| remap_pair(params, data_vocab, p, "pair list"))
        .collect()
}

fn cmd_retrieve(args: RetrieveArgs) -> Result<()> {
    let params = load_checkpoint(&args.ckpt)?;
    let attr = params
        .vocab
        .attr_index(&args.attr)
        .ok_or_else(|| Error::validation(format!("unknown attribute '{}'", args.attr)))?;
    let obj_vec = match (&args.obj, &args.obj_vec) {
        (Some(name), None) => {
            let obj = params
                .vocab
                .obj_index(name)
                .ok_or_else(|| Error::validation(format!("unknown object '{name}'")))?;
            params.objects.vectors[obj].clone()
        }
        (None, Some(path)) => {
            let v = load_vector_file(path)?;
            if v.len() != params.dim {
                return Err(Error::validation(format!(
                    "object vector has length {} but the model dimension is {}",
                    v.len(),
                    params.dim
                )));
            }
            v
        }
        _ => return Err(Error::validation("provide exactly one of --obj or --obj-vec")),
    };
    let pool = load_pool(&args.pool)?;
    if pool.iter().any(|(_, f)| f.len() != params.feat_dim) {
        return Err(Error::validation(format!(
            "pool features must have dimension {}",
            params.feat_dim
        )));
    }
    if args.k == 0 || args.k > pool.len() {
        return Err(Error::validation(format!(
            "k must be in 1..={}, got {}",
            pool.len(),
            args.k
        )));
    }
    for id in evaluation::retrieve_topk(&params, attr, &obj_vec, &pool, args.k)? {
        println!("{id}");
    }
    Ok(())
}

const GRADCHECK_SEEDS: u64 = 20;
const GRADCHECK_GATE: f64 = 1e-4;

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    if args.attrs < 2 || args.objs < 1 || args.dim < 1 {
        return Err(Error::validation(
            "gradcheck needs >=2 attributes, >=1 object, dim >= 1",
        ));
    }
    if !(1e-7..=1e-3).contains(&args.eps) {
        return Err(Error::validation("eps must be in [1e-7, 1e-3]"));
    }
    let weights = LossWeights {
        margin: gradcheck::CHECK_MARGIN,
        ..LossWeights::default()
    };
    let worst = gradcheck::run(
        args.dim,
        args.attrs,
        args.objs,
        &weights,
        args.eps,
        args.seed,
        GRADCHECK_SEEDS,
    )?;
    println!("max relative error over {GRADCHECK_SEEDS} seeds: {worst:.3e}");
    if worst > GRADCHECK_GATE {
        return Err(Error::NonFinite(format!(
            "gradient check failed: {worst:.3e} > {GRADCHECK_GATE:.0e}"
        )));
    }
    println!("PASS (gate {GRADCHECK_GATE:.0e})");
    Ok(())
}

fn cmd_dump(args: DumpArgs) -> Result<()> {
    let params = load_checkpoint(&args.ckpt)?;
    write_text(&args.out, &evaluation::dump_embeddings(&params))?;
    println!(
        "wrote {} pair embeddings to {}",
        params.vocab.all_pairs().len(),
        args.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Retrieve(a) => cmd_retrieve(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::DumpEmbeddings(a) => cmd_dump(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
