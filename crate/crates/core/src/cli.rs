//! Command-line entry point.
//!
//! Every subcommand resolves its settings (preset, then `--config`, then
//! `--set` and `--seed`), writes a manifest of them under `--out`, and reads
//! its inputs from `<out>` unless a path key points elsewhere.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::{Preset, Settings};
use crate::diffcore::ParamStore;
use crate::evalkit::{
    ablation_csv, ablation_report, accuracy_at_iou, bins_csv, evaluate, iou_histogram,
    median_delta_iou, read_lines, write_lines, MetricsReport, Prediction, SELECTION_BUCKETS,
};
use crate::geometry::{iou_unchecked, BBox, ThresholdMode};
use crate::grounder::Grounder;
use crate::optibox::Refiner;
use crate::synthdata::{generate_dataset, load_dataset, records_in, write_dataset, SampleRecord};
use crate::textenc::{
    pretrain_autoencoder, pretrain_projections, Autoencoder, Projections, Vocabulary,
};
use crate::train::{
    autoencoder_corpus, grid_search_grounder, grounder_from_pretrained, independent_pairs, predict,
    projection_pairs, refinements, refiner_from_pretrained, selection_table, train_grounder,
    train_optibox, train_optibox_independent, Stage, TrainHistory,
};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "optibox",
    version,
    about = "Query-guided box refinement on a proposal grounder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Output directory; also the default location of inputs.
    #[arg(long, default_value = "out", global = true)]
    out: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = PresetArg::Desk, global = true)]
    preset: PresetArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Generate the synthetic dataset and vocabulary.
    GenData,
    /// Pretrain the query autoencoder on training queries.
    PretrainAutoencoder,
    /// Pretrain the visual and query projections with a ranking loss.
    PretrainProjections,
    /// Train the grounder.
    TrainGrounder,
    /// Train the refiner on the converged grounder's selections.
    TrainOptibox,
    /// Train the refiner on every proposal overlapping its ground truth.
    TrainOptiboxIndependent,
    /// Evaluate a predictions file, or the trained models.
    Eval,
    /// Refine overlapping proposals and report IoU distributions.
    Refine,
    /// Feature ablation report.
    Analyze,
    /// Grid search over lambda and weight decay.
    GridSearch,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::PretrainAutoencoder => "pretrain-autoencoder",
            Command::PretrainProjections => "pretrain-projections",
            Command::TrainGrounder => "train-grounder",
            Command::TrainOptibox => "train-optibox",
            Command::TrainOptiboxIndependent => "train-optibox-independent",
            Command::Eval => "eval",
            Command::Refine => "refine",
            Command::Analyze => "analyze",
            Command::GridSearch => "grid-search",
        }
    }

    fn stage(self) -> Stage {
        match self {
            Command::PretrainAutoencoder => Stage::Autoencoder,
            Command::PretrainProjections => Stage::Projections,
            Command::TrainOptibox | Command::Eval => Stage::Optibox,
            Command::TrainOptiboxIndependent | Command::Refine | Command::Analyze => {
                Stage::OptiboxIndependent
            }
            Command::GenData | Command::TrainGrounder | Command::GridSearch => Stage::Grounder,
        }
    }

    /// Default refiner checkpoint file for commands that use one.
    fn refiner_file(self) -> &'static str {
        match self.stage() {
            Stage::OptiboxIndependent => "optibox_independent.ckpt",
            _ => "optibox.ckpt",
        }
    }
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Diverged(_) | Error::NonFinite(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

/// Runs one command; `argv` excludes the program name.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let args = std::iter::once(OsString::from("optibox")).chain(argv.into_iter().map(Into::into));
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn resolve(cli: &Cli) -> Result<Settings> {
    let preset = match cli.preset {
        PresetArg::Desk => Preset::Desk,
        PresetArg::Paper => Preset::Paper,
    };
    let mut s = Settings::new(preset, cli.command.stage());
    if let Some(path) = &cli.config {
        s.apply_file(path)?;
    }
    for kv in &cli.set {
        s.apply_override(kv)?;
    }
    if let Some(seed) = cli.seed {
        s.set("seed", &seed.to_string())?;
    }
    Ok(s)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_store(path: &Path, what: &str) -> Result<ParamStore> {
    if !path.exists() {
        return Err(Error::MissingAsset(format!(
            "{what} checkpoint {}",
            path.display()
        )));
    }
    ParamStore::load(path)
}

fn visual_dims(records: &[SampleRecord]) -> Result<(usize, usize)> {
    let r = records
        .iter()
        .find(|r| !r.proposals.is_empty())
        .ok_or_else(|| Error::Empty("dataset has no proposals".into()))?;
    let channels = r.global_map.as_ref().map_or(0, |m| m.channels);
    Ok((r.proposals[0].feature.len(), channels))
}

fn pretrain_csv(initial: f64, losses: &[f64]) -> String {
    let mut s = format!("epoch,loss\n0,{initial}\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{},{l}\n", i + 1));
    }
    s
}

fn histogram_files(out: &Path, prefix: &str, before: &[f64], after: &[f64]) -> Result<()> {
    for d in iou_histogram(before, after, &SELECTION_BUCKETS)? {
        write(
            &out.join(format!("{prefix}_{:.2}_{:.2}.csv", d.low, d.high)),
            &bins_csv(&d.bins),
        )?;
    }
    Ok(())
}

struct Ctx<'a> {
    cli: &'a Cli,
    s: Settings,
}

impl Ctx<'_> {
    fn out(&self) -> &Path {
        &self.cli.out
    }

    fn path(&self, key: &str, default: &str) -> PathBuf {
        self.s.path(key, self.out(), default)
    }

    fn dataset(&self) -> Result<Vec<SampleRecord>> {
        load_dataset(&self.path("dataset", "dataset.jsonl"))
    }

    fn vocab(&self) -> Result<Vocabulary> {
        Vocabulary::load(&self.path("vocab", "vocab.txt"))
    }

    fn autoencoder(&self) -> Result<Autoencoder> {
        Autoencoder::from_store(load_store(
            &self.path("autoencoder", "autoencoder.ckpt"),
            "autoencoder",
        )?)
    }

    fn projections(&self) -> Result<Projections> {
        Projections::from_store(load_store(
            &self.path("projections", "projections.ckpt"),
            "projection",
        )?)
    }

    fn grounder(&self) -> Result<Grounder> {
        Grounder::from_store(load_store(
            &self.path("grounder", "grounder.ckpt"),
            "grounder",
        )?)
    }

    fn refiner_path(&self) -> PathBuf {
        self.path("optibox", self.cli.command.refiner_file())
    }

    fn refiner(&self) -> Result<Refiner> {
        Refiner::from_store(load_store(&self.refiner_path(), "refiner")?)
    }

    fn initial_grounder(&self, records: &[SampleRecord]) -> Result<Grounder> {
        let vocab = self.vocab()?;
        let (visual, _) = visual_dims(records)?;
        let dims = self.s.grounder_dims(vocab.len(), visual)?;
        grounder_from_pretrained(
            dims,
            &self.autoencoder()?,
            Some(&self.projections()?),
            self.s.seed()?,
        )
    }

    fn initial_refiner(&self, records: &[SampleRecord]) -> Result<Refiner> {
        let vocab = self.vocab()?;
        let (visual, channels) = visual_dims(records)?;
        let dims = self.s.refiner_dims(vocab.len(), visual, channels)?;
        refiner_from_pretrained(
            dims,
            &self.autoencoder()?,
            self.s.mask()?,
            self.s.seed()?.wrapping_add(1),
        )
    }

    fn history(&self, name: &str, h: &TrainHistory) -> Result<()> {
        write(&self.out().join(format!("{name}_history.csv")), &h.to_csv())
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let s = resolve(cli)?;
    std::fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    let manifest = format!(
        "command = {}\nversion = {}\npreset = {}\n{}",
        cli.command.name(),
        env!("CARGO_PKG_VERSION"),
        s.preset,
        s.to_text()
    );
    write(
        &cli.out.join(format!("manifest_{}.txt", cli.command.name())),
        &manifest,
    )?;
    let ctx = Ctx { cli, s };
    match cli.command {
        Command::GenData => gen_data(&ctx),
        Command::PretrainAutoencoder => pretrain_ae(&ctx),
        Command::PretrainProjections => pretrain_proj(&ctx),
        Command::TrainGrounder => {
            let records = ctx.dataset()?;
            let init = ctx.initial_grounder(&records)?;
            let (g, h) = train_grounder(init, &records, &ctx.s.train_config()?)?;
            g.store.save(&ctx.path("grounder", "grounder.ckpt"))?;
            ctx.history("grounder", &h)?;
            println!(
                "best epoch {} validation accuracy {:.2}%",
                h.best_epoch,
                h.val_acc[h.best_epoch - 1]
            );
            Ok(())
        }
        Command::TrainOptibox => {
            let records = ctx.dataset()?;
            let g = ctx.grounder()?;
            let init = ctx.initial_refiner(&records)?;
            let (r, h) = train_optibox(&g, init, &records, &ctx.s.train_config()?)?;
            r.store.save(&ctx.refiner_path())?;
            ctx.history("optibox", &h)?;
            println!(
                "best epoch {} refined validation accuracy {:.2}%",
                h.best_epoch,
                h.val_acc[h.best_epoch - 1]
            );
            Ok(())
        }
        Command::TrainOptiboxIndependent => {
            let records = ctx.dataset()?;
            let init = ctx.initial_refiner(&records)?;
            let (r, h) = train_optibox_independent(init, &records, &ctx.s.train_config()?)?;
            r.store.save(&ctx.refiner_path())?;
            ctx.history("optibox_independent", &h)?;
            println!(
                "best epoch {} validation pairs at IoU >= 0.5: {:.2}%",
                h.best_epoch,
                h.val_acc[h.best_epoch - 1]
            );
            Ok(())
        }
        Command::Eval => eval(&ctx),
        Command::Refine => refine(&ctx),
        Command::Analyze => {
            let records = ctx.dataset()?;
            let base = ctx.initial_refiner(&records)?;
            let rows = ablation_report(&records, &base, &ctx.s.train_config()?, &ctx.s.masks()?)?;
            let csv = ablation_csv(&rows);
            write(&ctx.out().join("ablation.csv"), &csv)?;
            print!("{csv}");
            Ok(())
        }
        Command::GridSearch => {
            let records = ctx.dataset()?;
            let init = ctx.initial_grounder(&records)?;
            let cfg = ctx.s.train_config()?;
            let result = grid_search_grounder(
                &init,
                &records,
                &cfg,
                &ctx.s.f64_list("grid_lambda")?,
                &ctx.s.f64_list("grid_weight_decay")?,
            )?;
            write(&ctx.out().join("grid.csv"), &result.to_csv())?;
            let table = selection_table(&[(cfg.p, result.best)]);
            write(&ctx.out().join("grid_selection.csv"), &table)?;
            print!("{table}");
            Ok(())
        }
    }
}

fn gen_data(ctx: &Ctx) -> Result<()> {
    let cfg = ctx.s.scene_config()?;
    let (records, vocab) = generate_dataset(&cfg, ctx.s.split_sizes()?, ctx.s.seed()?)?;
    write_dataset(&records, &ctx.path("dataset", "dataset.jsonl"))?;
    vocab.save(&ctx.path("vocab", "vocab.txt"))?;
    let queries: usize = records.iter().map(|r| r.queries.len()).sum();
    println!(
        "{} scenes, {queries} queries, vocabulary {}",
        records.len(),
        vocab.len()
    );
    Ok(())
}

fn pretrain_ae(ctx: &Ctx) -> Result<()> {
    let records = ctx.dataset()?;
    let vocab = ctx.vocab()?;
    let (ae, rep) = pretrain_autoencoder(
        &autoencoder_corpus(&records),
        vocab.len(),
        ctx.s.usize("embed")?,
        ctx.s.usize("hidden")?,
        &ctx.s.pretrain_config()?,
    )?;
    ae.store
        .save(&ctx.path("autoencoder", "autoencoder.ckpt"))?;
    write(
        &ctx.out().join("autoencoder_history.csv"),
        &pretrain_csv(rep.initial_loss, &rep.epoch_losses),
    )?;
    println!(
        "reconstruction loss {} -> {}",
        rep.initial_loss,
        rep.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn pretrain_proj(ctx: &Ctx) -> Result<()> {
    let records = ctx.dataset()?;
    let ae = ctx.autoencoder()?;
    let (image, query) = projection_pairs(&records, &ae.encoder, &ae.store)?;
    let (proj, rep) = pretrain_projections(
        &image,
        &query,
        ctx.s.usize("proj")?,
        ctx.s.f64("margin")?,
        &ctx.s.pretrain_config()?,
    )?;
    proj.store
        .save(&ctx.path("projections", "projections.ckpt"))?;
    write(
        &ctx.out().join("projections_history.csv"),
        &pretrain_csv(rep.initial_loss, &rep.epoch_losses),
    )?;
    println!(
        "ranking loss {} -> {}",
        rep.initial_loss,
        rep.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn report_files(ctx: &Ctx, report: &MetricsReport) -> Result<()> {
    write(&ctx.out().join("metrics.csv"), &report.to_csv())?;
    let summary = report.to_summary();
    write(&ctx.out().join("metrics.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn eval(ctx: &Ctx) -> Result<()> {
    let records = ctx.dataset()?;
    let split = ctx.s.split()?;
    let threshold = ctx.s.f64("threshold")?;
    let evaluated = records_in(&records, split);
    let predictions: Vec<Prediction> = match ctx.s.get("predictions") {
        "" => {
            let g = ctx.grounder()?;
            let refiner = if ctx.s.bool("refine")? {
                Some(ctx.refiner()?)
            } else {
                None
            };
            let iterations = ctx.s.usize("iterations")?;
            let preds = predict(
                &g,
                refiner.as_ref().map(|r| (r, iterations)),
                &records,
                split,
            )?;
            write_lines(&preds, &ctx.out().join("predictions.jsonl"))?;
            preds
        }
        p => read_lines(Path::new(p))?,
    };
    let report = evaluate(&evaluated, &predictions, threshold)?;
    if report.median_delta_iou.is_some() {
        let gt: std::collections::HashMap<&str, BBox> = evaluated
            .iter()
            .flat_map(|r| r.queries.iter().map(|q| (q.id.as_str(), q.gt)))
            .collect();
        let mut before = Vec::new();
        let mut after = Vec::new();
        for p in &predictions {
            let g = gt[p.query_id.as_str()];
            let (b, a) = (
                BBox::from_array(p.selected)?,
                BBox::from_array(p.refined.expect("refined"))?,
            );
            before.push(iou_unchecked(&b, &g));
            after.push(iou_unchecked(&a, &g));
        }
        histogram_files(ctx.out(), "eval_histogram", &before, &after)?;
    }
    report_files(ctx, &report)
}

fn refine(ctx: &Ctx) -> Result<()> {
    let records = ctx.dataset()?;
    let model = ctx.refiner()?;
    let pairs = independent_pairs(
        &records,
        ctx.s.split()?,
        ctx.s.f64("pair_threshold")?,
        ctx.s.threshold_mode()?,
    );
    if pairs.is_empty() {
        return Err(Error::Empty("no regression pairs in the split".into()));
    }
    let rows = refinements(&model, &records, &pairs, ctx.s.usize("iterations")?)?;
    write_lines(&rows, &ctx.out().join("refinements.jsonl"))?;
    let before: Vec<f64> = rows.iter().map(|r| r.iou_before).collect();
    let after: Vec<f64> = rows.iter().map(|r| r.iou_after).collect();
    histogram_files(ctx.out(), "refine_histogram", &before, &after)?;

    let mut summary = String::from("bucket_low,bucket_high,pairs,reach_iou_0.5,median_delta_iou\n");
    for (lo, hi) in SELECTION_BUCKETS {
        let idx: Vec<usize> = (0..rows.len())
            .filter(|&i| {
                let v = rows[i].iou_before;
                v >= lo && (v < hi || (hi >= 1.0 && v <= hi))
            })
            .collect();
        if idx.is_empty() {
            summary.push_str(&format!("{lo},{hi},0,,\n"));
            continue;
        }
        let before = idx
            .iter()
            .map(|&i| BBox::from_array(rows[i].before))
            .collect::<Result<Vec<_>>>()?;
        let after = idx
            .iter()
            .map(|&i| BBox::from_array(rows[i].after))
            .collect::<Result<Vec<_>>>()?;
        let gt: Vec<BBox> = idx.iter().map(|&i| *pairs[i].gt(&records)).collect();
        summary.push_str(&format!(
            "{lo},{hi},{},{},{}\n",
            idx.len(),
            accuracy_at_iou(&after, &gt, 0.5, ThresholdMode::Inclusive)?,
            median_delta_iou(&before, &after, &gt)?
        ));
    }
    write(&ctx.out().join("refine_summary.csv"), &summary)?;
    print!("{summary}");
    Ok(())
}
