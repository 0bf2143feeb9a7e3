use crate::run::{load_dataset, meta_path, write_json, write_text, CheckpointMeta, Job, Preset, RunConfig, RunManifest};
use crate::{
    AblateArgs, AttnbenchArgs, AttndumpArgs, Command, EvalArgs, GenArgs, GradcheckArgs, RunArgs, SeedArg, TrainArgs,
    TransferArgs,
};
use anyhow::{anyhow, bail, Context, Result};
use molmix_core::attention::{measure_stats, synthetic_batch, AttentionKind};
use molmix_core::config::ModelConfig;
use molmix_core::data::{generate, load_jsonl, write_jsonl, Dataset, GeneratorConfig, Split, TargetSpec};
use molmix_core::fusion::{ModalityMask, MolMix};
use molmix_core::smiles::SmilesVocab;
use molmix_core::tensor::{read_checkpoint, InitMode, ParamStore, Precision, Scalar};
use molmix_core::trainer::{
    ablate, evaluate, gradcheck_fn, gradcheck_model, median, train, transfer, GradcheckOptions, GradcheckReport,
    RunReport, TrainOutcome, TransferReport,
};
use serde::Serialize;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

macro_rules! with_precision {
    ($p:expr, $f:ident($($arg:expr),* $(,)?)) => {
        match $p {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Transfer(a) => cmd_transfer(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Attnbench(a) => cmd_attnbench(a),
        Command::Attndump(a) => cmd_attndump(a),
    }
}

fn prepare_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating output directory {}", out.display()))
}

fn attention_kind(name: Option<&str>, block: Option<usize>, current: AttentionKind) -> Result<AttentionKind> {
    let cur_block = match current {
        AttentionKind::Tiled { block } => block,
        AttentionKind::Naive => 32,
    };
    Ok(match (name, block) {
        (Some("naive"), _) => AttentionKind::Naive,
        (Some("tiled"), b) => AttentionKind::Tiled {
            block: b.unwrap_or(cur_block),
        },
        (None, Some(b)) => match current {
            AttentionKind::Naive => bail!("--block needs the tiled attention kernel"),
            AttentionKind::Tiled { .. } => AttentionKind::Tiled { block: b },
        },
        (None, None) => current,
        (Some(other), _) => bail!("unknown attention kernel `{other}`"),
    })
}

impl RunArgs {
    /// Preset or `base`, then the config file, then flags.
    fn resolve(&self, seed: &SeedArg, base: Option<RunConfig>) -> Result<RunConfig> {
        let mut base = base.unwrap_or_else(|| RunConfig::with_model(self.preset.unwrap_or_default().model()));
        if let Some(p) = self.preset {
            base.model = p.model();
        }
        if let Some(s) = SeedArg::env_fallback()? {
            base.train.seed = s;
        }
        let mut c = RunConfig::resolve(base, self.config.as_deref())?;
        let t = &mut c.train;
        macro_rules! set {
            ($($field:ident),*) => { $(if let Some(v) = self.$field.clone() { t.$field = v; })* };
        }
        set!(max_steps, eval_every, batch_size, max_tokens, lr, weight_decay, warmup_steps, loss, metric, precision);
        if let Some(m) = self.modalities {
            t.mask = m;
        }
        if let Some(s) = seed.seed {
            t.seed = s;
        }
        if self.target.is_some() {
            t.target = self.target.clone();
        }
        if self.stop_at_train_mae.is_some() {
            t.stop_at_train_mae = self.stop_at_train_mae;
        }
        if let Some(s) = self.split {
            c.split = s;
        }
        if let Some(s) = self.split_seed {
            c.split_seed = s;
        }
        c.model.attention = attention_kind(self.attention.as_deref(), self.block, c.model.attention)?;
        c.train.validate()?;
        Ok(c)
    }

    fn data(&self) -> Result<PathBuf> {
        self.data.clone().ok_or_else(|| anyhow!("--data is required"))
    }
}

fn default_seeds(seeds: &[u64], seed: &SeedArg, run: &RunConfig) -> Vec<u64> {
    if !seeds.is_empty() {
        return seeds.to_vec();
    }
    let base = seed.seed.unwrap_or(run.train.seed);
    (base..base + 5).collect()
}

fn vocab_of(ds: &Dataset) -> Result<SmilesVocab> {
    let corpus: Vec<&str> = ds.molecules.iter().map(|m| m.smiles.as_str()).collect();
    Ok(SmilesVocab::build(&corpus)?)
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let out = &a.out.out;
    let generator = match &a.manifest {
        Some(p) => match RunManifest::load(p, "gen")?.job {
            Job::Gen { generator } => generator,
            _ => unreachable!(),
        },
        None => {
            let mut g = match &a.config {
                Some(p) => serde_json::from_str::<GeneratorConfig>(&std::fs::read_to_string(p)?)
                    .with_context(|| format!("parsing {}", p.display()))?,
                None => GeneratorConfig::default(),
            };
            if a.config.is_none() {
                if let Some(s) = SeedArg::env_fallback()? {
                    g.seed = s;
                }
            }
            macro_rules! set {
                ($($field:ident),*) => { $(if let Some(v) = a.$field { g.$field = v; })* };
            }
            set!(count, min_atoms, max_atoms, k_conformers, target, noise, ring_prob);
            if let Some(s) = a.seed.seed {
                g.seed = s;
            }
            g
        }
    };
    generator.validate()?;
    prepare_out(out)?;
    RunManifest::new(Job::Gen { generator: generator.clone() }, vec![generator.seed], out)?.save(out)?;
    let ds = generate(&generator)?;
    let path = out.join("dataset.jsonl");
    write_jsonl(&path, &ds, Some(&generator))?;
    println!("wrote {} molecules with targets {:?} to {}", ds.len(), ds.target_names, path.display());
    Ok(())
}

fn save_checkpoint<T: Scalar>(out: &Path, model: &MolMix, outcome: &TrainOutcome<T>, run: &RunConfig, ds: &Dataset) -> Result<PathBuf> {
    let path = out.join("checkpoint.bin");
    outcome.state.write_checkpoint(BufWriter::new(File::create(&path)?))?;
    let meta = CheckpointMeta {
        model: model.config.clone(),
        vocab: model.vocab.to_file_string(),
        train: run.train.clone(),
        target: outcome.report.target.clone(),
        normalization: outcome.report.normalization.clone(),
        step: outcome.state.step,
        best_step: outcome.state.best_step,
        val: outcome.report.val,
        splits: ds.split_file(),
    };
    write_json(&meta_path(&path), &meta)?;
    Ok(path)
}

fn summary(r: &RunReport) -> String {
    let test = r
        .test
        .map_or(String::new(), |t| format!(" test_mae={:.6} test_rmse={:.6}", t.mae, t.rmse));
    format!(
        "target={} mask={} seed={} steps={} train_mae={:.6} val_mae={:.6}{test}",
        r.target, r.mask, r.seed, r.steps, r.train.mae, r.val.mae
    )
}

/// The manifest named by `--manifest`, checked against its recorded inputs.
fn replay(run_args: &RunArgs, command: &str) -> Result<Option<RunManifest>> {
    run_args.manifest.as_deref().map(|p| RunManifest::load(p, command)).transpose()
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let out = &a.out.out;
    let (data, split_file, run) = match replay(&a.run, "train")?.map(|m| m.job) {
        Some(Job::Train { data, split_file, run }) => (data, split_file, run),
        Some(_) => unreachable!(),
        None => (a.run.data()?, a.run.split_file.clone(), a.run.resolve(&a.seed, None)?),
    };
    prepare_out(out)?;
    let job = Job::Train {
        data: data.clone(),
        split_file: split_file.clone(),
        run: run.clone(),
    };
    RunManifest::new(job, vec![run.train.seed], out)?.save(out)?;
    let ds = load_dataset(&data, split_file.as_deref(), &run)?;
    ds.split_file().save(&out.join("splits.json"))?;
    with_precision!(run.train.precision, train_and_save(&ds, &run, out))
}

fn train_and_save<T: Scalar>(ds: &Dataset, run: &RunConfig, out: &Path) -> Result<()> {
    let (params, model) = MolMix::init::<T>(&run.model, vocab_of(ds)?, run.train.seed, InitMode::Glorot)?;
    let outcome = train(&model, params, None, ds, &run.train)?;
    write_text(&out.join("metrics.csv"), &outcome.metrics_csv())?;
    write_json(&out.join("report.json"), &outcome.report)?;
    let ck = save_checkpoint(out, &model, &outcome, run, ds)?;
    println!("{}", summary(&outcome.report));
    println!("checkpoint: {}", ck.display());
    Ok(())
}

/// Model, parameters and sidecar of a saved checkpoint.
fn load_model<T: Scalar>(checkpoint: &Path, meta: &CheckpointMeta, model_cfg: &ModelConfig) -> Result<(MolMix, ParamStore<T>, ParamStore<T>)> {
    let vocab = SmilesVocab::from_file_string(&meta.vocab)?;
    let (mut params, model) = MolMix::init::<T>(model_cfg, vocab, 0, InitMode::Zeros)?;
    let file = read_checkpoint::<T, _>(std::io::BufReader::new(
        File::open(checkpoint).with_context(|| format!("opening {}", checkpoint.display()))?,
    ))?;
    params.load_from(&file)?;
    Ok((model, params, file))
}

#[derive(Serialize)]
struct EvalReport {
    checkpoint: PathBuf,
    split: Split,
    target: String,
    mask: ModalityMask,
    mae: f64,
    rmse: f64,
    count: usize,
    /// Whether the val metrics equal the ones stored with the checkpoint, bit for bit.
    #[serde(skip_serializing_if = "Option::is_none")]
    reproduces_stored_val: Option<bool>,
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let meta = CheckpointMeta::load(&a.checkpoint)?;
    prepare_out(&a.out.out)?;
    with_precision!(meta.train.precision, eval_checkpoint(&a, &meta))
}

fn eval_checkpoint<T: Scalar>(a: &EvalArgs, meta: &CheckpointMeta) -> Result<()> {
    let (model, params, _) = load_model::<T>(&a.checkpoint, meta, &meta.model)?;
    let ds = load_jsonl(&a.data)?.apply_split_file(&meta.splits)?;
    let target = ds.target_index(&meta.target)?;
    let mask = a.modalities.unwrap_or(meta.train.mask);
    let idx = ds.indices(a.split);
    if idx.is_empty() {
        bail!("split `{}` is empty", a.split.name());
    }
    let m = evaluate(&model, &params, &ds, &idx, &meta.normalization, target, mask, &meta.train)?;
    let same = (a.split == Split::Val && mask == meta.train.mask)
        .then(|| m.mae.to_bits() == meta.val.mae.to_bits() && m.rmse.to_bits() == meta.val.rmse.to_bits());
    let rep = EvalReport {
        checkpoint: a.checkpoint.clone(),
        split: a.split,
        target: meta.target.clone(),
        mask,
        mae: m.mae,
        rmse: m.rmse,
        count: m.count,
        reproduces_stored_val: same,
    };
    write_json(&a.out.out.join("eval.json"), &rep)?;
    let split = a.split.name();
    write_text(
        &a.out.out.join("eval.csv"),
        &format!("step,split,metric,value\n{0},{split},mae,{1}\n{0},{split},rmse,{2}\n", meta.step, m.mae, m.rmse),
    )?;
    println!("{split}: mae={:.6} rmse={:.6} n={}", m.mae, m.rmse, m.count);
    if same == Some(false) {
        println!("note: differs from the stored val metric mae={:.6}", meta.val.mae);
    }
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let out = &a.out.out;
    let (data, split_file, run, masks, seeds) = match replay(&a.run, "ablate")?.map(|m| (m.job, m.seeds)) {
        Some((Job::Ablate { data, split_file, run, masks }, seeds)) => (data, split_file, run, masks, seeds),
        Some(_) => unreachable!(),
        None => {
            let run = a.run.resolve(&a.seed, None)?;
            let masks = if a.masks.is_empty() {
                ModalityMask::all_combinations().to_vec()
            } else {
                a.masks.clone()
            };
            let seeds = default_seeds(&a.seeds, &a.seed, &run);
            (a.run.data()?, a.run.split_file.clone(), run, masks, seeds)
        }
    };
    prepare_out(out)?;
    let job = Job::Ablate {
        data: data.clone(),
        split_file: split_file.clone(),
        run: run.clone(),
        masks: masks.clone(),
    };
    RunManifest::new(job, seeds.clone(), out)?.save(out)?;
    let ds = load_dataset(&data, split_file.as_deref(), &run)?;
    with_precision!(run.train.precision, ablate_and_save(&ds, &run, &masks, &seeds, out))
}

fn ablate_and_save<T: Scalar>(ds: &Dataset, run: &RunConfig, masks: &[ModalityMask], seeds: &[u64], out: &Path) -> Result<()> {
    let (_, model) = MolMix::init::<T>(&run.model, vocab_of(ds)?, 0, InitMode::Zeros)?;
    let runs = out.join("runs");
    prepare_out(&runs)?;
    let mut io_err = None;
    let rows = ablate::<T>(&model, ds, masks, &run.train, seeds, |mask, seed, o| {
        let r = write_text(&runs.join(format!("{mask}_seed{seed}.csv")), &o.metrics_csv());
        if let Err(e) = r {
            io_err.get_or_insert(e);
        }
        eprintln!("{}", summary(&o.report));
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }
    let metric = serde_json::to_value(run.train.metric)?;
    let metric = metric.as_str().unwrap_or("mae");
    let mut csv = format!("mask,metric,median,mean,std,{}\n", seeds.iter().map(|s| format!("seed{s}")).collect::<Vec<_>>().join(","));
    for r in &rows {
        let vals: Vec<String> = r.values.iter().map(|v| v.to_string()).collect();
        csv.push_str(&format!("{},{metric},{},{},{},{}\n", r.mask, r.median, r.mean, r.std, vals.join(",")));
    }
    write_text(&out.join("ablation.csv"), &csv)?;
    write_json(&out.join("ablation.json"), &rows)?;
    println!("{:<10} {:>10} {:>10} {:>10}", "mask", "median", "mean", "std");
    for r in &rows {
        println!("{:<10} {:>10.5} {:>10.5} {:>10.5}", r.mask.to_string(), r.median, r.mean, r.std);
    }
    Ok(())
}

#[derive(Serialize)]
struct TransferSummary {
    runs: Vec<TransferReport>,
    pretrained_wins: usize,
    median_pretrained: f64,
    median_random: f64,
}

fn cmd_transfer(a: TransferArgs) -> Result<()> {
    let out = &a.out.out;
    let (data, split_file, checkpoint, run, seeds) = match replay(&a.run, "transfer")?.map(|m| (m.job, m.seeds)) {
        Some((
            Job::Transfer {
                data,
                split_file,
                checkpoint,
                run,
            },
            seeds,
        )) => (data, split_file, checkpoint, run, seeds),
        Some(_) => unreachable!(),
        None => {
            let checkpoint = a.checkpoint.clone().ok_or_else(|| anyhow!("--checkpoint is required"))?;
            let meta = CheckpointMeta::load(&checkpoint)?;
            let mut base = RunConfig::with_model(meta.model.clone());
            base.train.precision = meta.train.precision;
            base.train.mask = meta.train.mask;
            let run = a.run.resolve(&a.seed, Some(base))?;
            let seeds = default_seeds(&a.seeds, &a.seed, &run);
            (a.run.data()?, a.run.split_file.clone(), checkpoint, run, seeds)
        }
    };
    prepare_out(out)?;
    let job = Job::Transfer {
        data: data.clone(),
        split_file: split_file.clone(),
        checkpoint: checkpoint.clone(),
        run: run.clone(),
    };
    RunManifest::new(job, seeds.clone(), out)?.save(out)?;
    let meta = CheckpointMeta::load(&checkpoint)?;
    let ds = load_dataset(&data, split_file.as_deref(), &run)?;
    with_precision!(run.train.precision, transfer_and_save(&checkpoint, &meta, &ds, &run, &seeds, out))
}

fn transfer_and_save<T: Scalar>(checkpoint: &Path, meta: &CheckpointMeta, ds: &Dataset, run: &RunConfig, seeds: &[u64], out: &Path) -> Result<()> {
    let vocab = SmilesVocab::from_file_string(&meta.vocab)?;
    let (_, model) = MolMix::init::<T>(&run.model, vocab, 0, InitMode::Zeros)?;
    let pretrained = read_checkpoint::<T, _>(std::io::BufReader::new(File::open(checkpoint)?))?;
    let mut runs = Vec::new();
    let mut csv = String::from("seed,arm,split,metric,value\n");
    for &seed in seeds {
        let cfg = molmix_core::trainer::TrainConfig {
            seed,
            ..run.train.clone()
        };
        let (rep, _) = transfer(&model, &pretrained, ds, &cfg)?;
        for (arm, r) in [("pretrained", &rep.pretrained), ("random", &rep.random)] {
            for (split, m) in [("val", Some(&r.val)), ("test", r.test.as_ref())] {
                if let Some(m) = m {
                    csv.push_str(&format!("{seed},{arm},{split},mae,{}\n{seed},{arm},{split},rmse,{}\n", m.mae, m.rmse));
                }
            }
        }
        eprintln!(
            "seed {seed}: pretrained {:.6} random {:.6}",
            rep.pretrained.headline(cfg.metric),
            rep.random.headline(cfg.metric)
        );
        runs.push(rep);
    }
    let (p, r): (Vec<f64>, Vec<f64>) = runs
        .iter()
        .map(|x| (x.pretrained.headline(run.train.metric), x.random.headline(run.train.metric)))
        .unzip();
    let summary = TransferSummary {
        pretrained_wins: p.iter().zip(&r).filter(|(a, b)| a < b).count(),
        median_pretrained: median(&p),
        median_random: median(&r),
        runs,
    };
    write_text(&out.join("transfer.csv"), &csv)?;
    write_json(&out.join("transfer.json"), &summary)?;
    println!(
        "pretrained beats random in {}/{} seeds; median {:.6} vs {:.6}",
        summary.pretrained_wins,
        seeds.len(),
        summary.median_pretrained,
        summary.median_random
    );
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let seed = match a.seed.seed {
        Some(s) => s,
        None => SeedArg::env_fallback()?.unwrap_or(0),
    };
    let opts = GradcheckOptions {
        h: a.h,
        tolerance: a.tolerance,
        max_per_group: a.max_per_group,
        corrupt: a.corrupt.clone(),
        seed,
    };
    let kind = attention_kind(Some(&a.attention), Some(a.block), AttentionKind::default())?;
    prepare_out(&a.out.out)?;
    let report = if a.empty {
        let store = ParamStore::<f64>::new();
        gradcheck_fn(
            &store,
            kind,
            |ctx| Ok(ctx.constant(molmix_core::tensor::Tensor::new(vec![1], vec![0.0])?)),
            &opts,
        )?
    } else {
        let mol = generate(&GeneratorConfig {
            count: 1,
            min_atoms: 5,
            max_atoms: 8,
            k_conformers: 2,
            target: TargetSpec::Mix,
            seed,
            ..GeneratorConfig::default()
        })?
        .molecules
        .remove(0);
        let cfg = ModelConfig {
            attention: kind,
            ..Preset::Minimal.model()
        };
        gradcheck_model(&cfg, &mol, a.modalities.unwrap_or(ModalityMask::ALL), seed, &opts)?
    };
    write_json(&a.out.out.join("gradcheck.json"), &report)?;
    print_gradcheck(&report);
    if !report.passed {
        let w = report.worst.as_ref().expect("a failing check has a worst group");
        bail!(
            "gradient check failed: parameter group `{}` has relative error {:.3e} > {:.1e}",
            w.name,
            w.error,
            report.tolerance
        );
    }
    Ok(())
}

fn print_gradcheck(r: &GradcheckReport) {
    for g in &r.groups {
        println!("{:<48} {:>11.3e} ({} coords)", g.name, g.error, g.probed);
    }
    match &r.worst {
        Some(w) => println!("worst: {} {:.3e} (tolerance {:.1e})", w.name, w.error, r.tolerance),
        None => println!("no parameters: vacuous pass"),
    }
    println!("{}", if r.passed { "PASS" } else { "FAIL" });
}

fn cmd_attnbench(a: AttnbenchArgs) -> Result<()> {
    if a.lengths.is_empty() || a.lengths.contains(&0) {
        bail!("--lengths needs positive values");
    }
    let seed = match a.seed.seed {
        Some(s) => s,
        None => SeedArg::env_fallback()?.unwrap_or(0),
    };
    prepare_out(&a.out.out)?;
    let mut csv = String::from("impl,block,batch,length,heads,peak_scratch_elements,flops_estimate\n");
    println!("{:<6} {:>6} {:>6} {:>12} {:>12} {:>7}", "batch", "length", "block", "naive", "tiled", "ratio");
    for &b in &a.batch_sizes {
        for &len in &a.lengths {
            let packed = synthetic_batch::<f32>(b, len, a.dim, seed)?;
            let naive = measure_stats(AttentionKind::Naive, &packed, a.heads)?;
            let tiled = measure_stats(AttentionKind::Tiled { block: a.block }, &packed, a.heads)?;
            csv.push_str(&format!(
                "naive,,{b},{len},{},{},{}\ntiled,{},{b},{len},{},{},{}\n",
                a.heads, naive.peak_scratch_elements, naive.flops_estimate, a.block, a.heads, tiled.peak_scratch_elements, tiled.flops_estimate
            ));
            println!(
                "{b:<6} {len:>6} {:>6} {:>12} {:>12} {:>7.3}",
                a.block,
                naive.peak_scratch_elements,
                tiled.peak_scratch_elements,
                tiled.peak_scratch_elements as f64 / naive.peak_scratch_elements as f64
            );
        }
    }
    write_text(&a.out.out.join("attnbench.csv"), &csv)
}

fn cmd_attndump(a: AttndumpArgs) -> Result<()> {
    let meta = CheckpointMeta::load(&a.checkpoint)?;
    prepare_out(&a.out.out)?;
    with_precision!(meta.train.precision, dump_scores(&a, &meta))
}

fn dump_scores<T: Scalar>(a: &AttndumpArgs, meta: &CheckpointMeta) -> Result<()> {
    let (model, params, _) = load_model::<T>(&a.checkpoint, meta, &meta.model)?;
    let ds = load_jsonl(&a.data)?;
    let mol = ds
        .molecules
        .iter()
        .find(|m| m.id == a.molecule)
        .ok_or_else(|| anyhow!("molecule `{}` not found in {}", a.molecule, a.data.display()))?;
    let mask = a.modalities.unwrap_or(meta.train.mask);
    let dumps = model.attention_dumps(&params, mol, mask)?;
    for (layer, head, d) in &dumps {
        write_text(&a.out.out.join(format!("layer{layer}_head{head}.txt")), &d.to_text())?;
    }
    let b = dumps.first().map(|(_, _, d)| d.boundaries.clone()).unwrap_or_default();
    println!("wrote {} score matrices for `{}` (boundaries {:?})", dumps.len(), a.molecule, b);
    Ok(())
}
