//! Subcommand implementations.

use std::path::Path;

use cda_core::io::{self, Format};
use cda_core::{
    bandwidth_ladder, cluster_quality, cmc, export_projection, hidden_features, loss_history_csv,
    median_bandwidth, mmd_biased, mmd_linear_streaming, mmd_unbiased_quadratic,
    pseudo_label_pipeline, roc_points, run_cda, run_stage2, sweep_alpha, synthesize_domain_pair,
    tar_at_far, tpir_at_fpir, verification_scores, AdapterParams, CdaError, CdaOutcome,
    ClusterConfig, EmbeddingSet, EvalReport, KernelPolicy, KernelSpec, SweepRow, SynthConfig,
    TrainConfig,
};

use crate::config::{self, parse_f64_list, parse_usize_list, Settings};
use crate::{AdaptArgs, ClusterArgs, EvalArgs, MmdArgs, PipelineArgs, SynthArgs};

type Result<T> = std::result::Result<T, CdaError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CdaError + '_ {
    move |e| CdaError::Io {
        path: path.display().to_string(),
        source: e,
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_text(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content).map_err(io_err(path))
}

fn require_labels<'a>(set: &'a EmbeddingSet, what: &str) -> Result<&'a [i64]> {
    set.labels()
        .ok_or_else(|| CdaError::Invalid(format!("{what} must be labeled")))
}

/// Probes whose identity is enrolled in the gallery. Open-set runs report
/// rank metrics over this subset; the rest form the unenrolled set.
fn enrolled_subset(probe: &EmbeddingSet, gallery: &EmbeddingSet) -> Result<EmbeddingSet> {
    let plabels = probe.labels().unwrap_or(&[]);
    let glabels = gallery.labels().unwrap_or(&[]);
    let mut mated = EmbeddingSet::new(probe.dim())?;
    for (i, &label) in plabels.iter().enumerate() {
        if glabels.contains(&label) {
            mated.push_row(probe.row(i), Some(label))?;
        }
    }
    Ok(mated)
}

fn join_f64(values: &[f64], sep: &str) -> String {
    values
        .iter()
        .map(f64::to_string)
        .collect::<Vec<_>>()
        .join(sep)
}

pub fn mmd(args: &MmdArgs) -> Result<()> {
    let format: Format = args.format.into();
    let a = io::load_embeddings(&args.a, format, args.labeled)?;
    let b = io::load_embeddings(&args.b, format, args.labeled)?;
    let spec = match args.gamma {
        Some(g) => KernelSpec::single(g)?,
        None => bandwidth_ladder(median_bandwidth(&a, &b)?, args.kernels)?,
    };
    println!("samples\t{} vs {}\tdim {}", a.len(), b.len(), a.dim());
    println!("bandwidths\t{}", join_f64(spec.bandwidths(), ","));
    println!("biased\t{}", mmd_biased(&a, &b, &spec)?.value);
    println!(
        "unbiased_quadratic\t{}",
        mmd_unbiased_quadratic(&a, &b, &spec)?.value
    );
    match mmd_linear_streaming(&a, &b, &spec) {
        Ok(e) => println!(
            "linear_streaming\t{}\ttruncated {}",
            e.value, e.truncated_samples
        ),
        Err(CdaError::Invalid(detail)) => {
            println!("linear_streaming\tunavailable ({detail})");
        }
        Err(e) => return Err(e),
    }
    Ok(())
}

pub fn cluster(args: &ClusterArgs) -> Result<()> {
    let set = io::load_embeddings(&args.input, args.format.into(), args.labeled)?;
    let cfg = ClusterConfig {
        alpha: args.alpha,
        beta: args.beta,
        min_component_size: args.min_size,
        ..ClusterConfig::default()
    };
    let labeling = pseudo_label_pipeline(&set.without_labels(), &cfg)?;
    print!("{}", labeling.report());
    if let Some(truth) = set.labels() {
        let q = cluster_quality(&labeling, truth)?;
        println!("pairwise_precision\t{}", q.pairwise_precision);
        println!("pairwise_recall\t{}", q.pairwise_recall);
        println!("pairwise_f\t{}", q.pairwise_f);
        println!("purity\t{}", q.purity);
    }
    if let Some(out) = &args.out {
        io::save_labels(&labeling.to_labels(), out)?;
        println!("pseudo_labels\t{}", out.display());
    }
    Ok(())
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        num_classes: args.classes,
        samples_per_class: args.samples,
        dim: args.dim,
        class_spread: args.spread,
        shift_vector_scale: args.shift,
        shift_noise: args.shift_noise,
        seed: args.seed,
    };
    let (source, target) = synthesize_domain_pair(&cfg)?;
    ensure_dir(&args.out)?;
    let ext = match args.format {
        crate::FileFormat::Binary => "emb",
        crate::FileFormat::Csv => "csv",
    };
    let format: Format = args.format.into();
    let sp = args.out.join(format!("source.{ext}"));
    let tp = args.out.join(format!("target.{ext}"));
    io::save_embeddings(&source, &sp, format)?;
    io::save_embeddings(&target, &tp, format)?;
    println!(
        "source\t{}\t{} samples, dim {}",
        sp.display(),
        source.len(),
        source.dim()
    );
    println!(
        "target\t{}\t{} samples, dim {}",
        tp.display(),
        target.len(),
        target.dim()
    );
    Ok(())
}

struct RunArtifacts<'a> {
    out: &'a Path,
    outcome: &'a CdaOutcome,
}

impl RunArtifacts<'_> {
    fn write(&self) -> Result<()> {
        ensure_dir(self.out)?;
        self.outcome.params.save(&self.out.join("adapter.cdap"))?;
        self.outcome
            .baseline
            .save(&self.out.join("baseline.cdap"))?;
        io::save_labels(
            &self.outcome.pseudo.to_labels(),
            &self.out.join("pseudo_labels.lab"),
        )?;
        write_text(
            &self.out.join("stage2_loss.csv"),
            &loss_history_csv(&self.outcome.stage2_history),
        )?;
        write_text(
            &self.out.join("stage4_loss.csv"),
            &loss_history_csv(&self.outcome.stage4_history),
        )?;
        Ok(())
    }
}

pub fn adapt(args: &AdaptArgs) -> Result<()> {
    let format: Format = args.format.into();
    let source = io::load_embeddings(&args.source, format, true)?;
    require_labels(&source, "the source set")?;
    let target = io::load_embeddings(&args.target, format, args.target_labels)?;
    let cfg = TrainConfig {
        lambda: args.lambda,
        learning_rate: args.learning_rate,
        max_iters: args.iters,
        batch_size: args.batch,
        seed: args.seed,
        mmd_layers: args.mmd_layers.into(),
        warmup_frac: args.warmup,
        ..TrainConfig::default()
    };
    let ccfg = ClusterConfig {
        alpha: args.alpha,
        beta: args.beta,
        min_component_size: args.min_size,
        ..ClusterConfig::default()
    };
    let outcome = run_cda(
        &source,
        &target,
        &cfg,
        &ccfg,
        KernelPolicy::MedianLadder {
            kernels: args.kernels,
        },
    )?;
    RunArtifacts {
        out: &args.out,
        outcome: &outcome,
    }
    .write()?;
    write_text(&args.out.join("report.txt"), &outcome.report)?;
    print!("{}", outcome.report);
    println!("artifacts\t{}", args.out.display());
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let format: Format = args.format.into();
    let mut set = io::load_embeddings(&args.input, format, true)?;
    require_labels(&set, "the scored set")?;
    let mut gallery = match &args.gallery {
        Some(p) => {
            let g = io::load_embeddings(p, format, true)?;
            require_labels(&g, "the gallery")?;
            Some(g)
        }
        None => None,
    };
    let mut notes = vec![format!("probe: {} samples, dim {}", set.len(), set.dim())];
    if let Some(ckpt) = &args.params {
        let params = AdapterParams::load(ckpt)?;
        set = hidden_features(&params, &set)?;
        if let Some(g) = gallery.take() {
            gallery = Some(hidden_features(&params, &g)?);
        }
        notes.push(format!("checkpoint applied: {}", ckpt.display()));
    }

    let fars = parse_f64_list(&args.far, "far")?;
    let scores = verification_scores(&set)?;
    notes.push(format!(
        "verification pairs: {} genuine, {} impostor",
        scores.genuine.len(),
        scores.impostor.len()
    ));
    let mut report = EvalReport {
        roc_points: roc_points(&scores)?,
        tar_at_far: tar_at_far(&scores, &fars)?,
        cmc: Vec::new(),
        tpir_at_fpir: Vec::new(),
        notes: Vec::new(),
    };
    if let Some(g) = &gallery {
        let ranks = parse_usize_list(&args.ranks, "ranks")?;
        if let Some(raw) = &args.fpir {
            let fpirs = parse_f64_list(raw, "fpir")?;
            report.tpir_at_fpir = tpir_at_fpir(&set, g, &fpirs)?;
            let mated = enrolled_subset(&set, g)?;
            report.cmc = cmc(&mated, g, &ranks)?;
            notes.push(format!("cmc over {} mated probes", mated.len()));
        } else {
            report.cmc = cmc(&set, g, &ranks)?;
        }
        notes.push(format!("gallery: {} samples", g.len()));
    }
    report.notes = notes;

    print!("{}", report.to_tsv());
    if let Some(dir) = &args.out {
        ensure_dir(dir)?;
        write_text(&dir.join("eval_report.tsv"), &report.to_tsv())?;
        write_text(&dir.join("roc.csv"), &report.roc_csv())?;
        if !report.cmc.is_empty() {
            write_text(&dir.join("cmc.csv"), &report.cmc_csv())?;
        }
    }
    if let Some(path) = &args.pca {
        let proj = export_projection(&set)?;
        let mut csv = String::from("x,y,label\n");
        let labels = set.labels();
        for i in 0..set.len() {
            let label = labels.map_or(-1, |l| l[i]);
            csv.push_str(&format!("{},{},{label}\n", proj[2 * i], proj[2 * i + 1]));
        }
        write_text(path, &csv)?;
    }
    Ok(())
}

fn merge_overrides(s: &mut Settings, args: &PipelineArgs) -> Result<()> {
    if let Some(v) = &args.source {
        s.source = Some(v.clone());
    }
    if let Some(v) = &args.target {
        s.target = Some(v.clone());
    }
    if let Some(v) = &args.out {
        s.out = Some(v.clone());
    }
    if let Some(v) = args.alpha {
        s.cluster.alpha = v;
    }
    if let Some(v) = args.beta {
        s.cluster.beta = v;
    }
    if let Some(v) = args.min_size {
        s.cluster.min_component_size = v;
    }
    if let Some(v) = args.lambda {
        s.train.lambda = v;
    }
    if let Some(v) = args.learning_rate {
        s.train.learning_rate = v;
    }
    if let Some(v) = args.iters {
        s.train.max_iters = v;
    }
    if let Some(v) = args.batch {
        s.train.batch_size = v;
    }
    if let Some(v) = args.seed {
        s.train.seed = v;
    }
    if let Some(v) = args.mmd_layers {
        s.train.mmd_layers = v.into();
    }
    if let Some(v) = args.kernels {
        s.kernels = v;
    }
    if let Some(raw) = &args.far {
        s.far = parse_f64_list(raw, "far")?;
    }
    Ok(())
}

fn parse_sweep(raw: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = raw.split(':').collect();
    let [lo, hi, step] = parts[..] else {
        return Err(CdaError::Invalid(format!(
            "--sweep-alpha expects lo:hi:step, got {raw:?}"
        )));
    };
    let parse = |s: &str| -> Result<f64> {
        s.trim()
            .parse()
            .map_err(|_| CdaError::Invalid(format!("bad sweep bound {s:?}")))
    };
    let (lo, hi, step) = (parse(lo)?, parse(hi)?, parse(step)?);
    if !(step > 0.0 && lo <= hi) {
        return Err(CdaError::Invalid(
            "sweep needs lo <= hi and step > 0".into(),
        ));
    }
    let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    if count > 200 {
        return Err(CdaError::Invalid(format!(
            "sweep of {count} points exceeds the 200-point cap"
        )));
    }
    let alphas: Vec<f64> = (0..count).map(|i| lo + i as f64 * step).collect();
    if let Some(a) = alphas.iter().find(|a| a.abs() >= 1.0) {
        return Err(CdaError::Invalid(format!(
            "sweep alpha {a} falls outside (-1, 1)"
        )));
    }
    Ok(alphas)
}

fn render_sweep(rows: &[SweepRow], far: f64) -> String {
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| v.to_string());
    let mut out = format!("alpha\tclusters\tassigned\tpairwise_f\ttar@far={far}\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.alpha,
            r.cluster_count,
            r.assigned_count,
            cell(r.pairwise_f),
            cell(r.tar)
        ));
    }
    out
}

pub fn pipeline(args: &PipelineArgs) -> Result<()> {
    let mut s = config::load(&args.config)?;
    merge_overrides(&mut s, args)?;
    let missing =
        |key: &str| CdaError::Invalid(format!("{key} is not set (config file or --{key})"));
    let source_path = s.source.clone().ok_or_else(|| missing("source"))?;
    let target_path = s.target.clone().ok_or_else(|| missing("target"))?;
    let out = s.out.clone().ok_or_else(|| missing("out"))?;

    let source = io::load_embeddings(&source_path, s.format, true)?;
    require_labels(&source, "the source set")?;
    let target = io::load_embeddings(&target_path, s.format, s.csv_labeled_target)?;
    let policy = KernelPolicy::MedianLadder { kernels: s.kernels };

    if let Some(raw) = &args.sweep_alpha {
        let alphas = parse_sweep(raw)?;
        let stage2 = run_stage2(&source, &target, &s.train, policy)?;
        let rows = sweep_alpha(
            &stage2.params,
            &target,
            &s.train,
            &s.cluster,
            &alphas,
            s.far[0],
        )?;
        let table = render_sweep(&rows, s.far[0]);
        ensure_dir(&out)?;
        write_text(&out.join("sweep.tsv"), &table)?;
        print!("{table}");
        println!("artifacts\t{}", out.display());
        return Ok(());
    }

    let outcome = run_cda(&source, &target, &s.train, &s.cluster, policy)?;
    RunArtifacts {
        out: &out,
        outcome: &outcome,
    }
    .write()?;

    let mut report = outcome.report.clone();
    if let Some(truth) = target.labels() {
        let q = cluster_quality(&outcome.pseudo, truth)?;
        report.push_str(&format!("eval\tpairwise_f\t{}\n", q.pairwise_f));
        report.push_str(&format!("eval\tpurity\t{}\n", q.purity));

        let hidden_base = hidden_features(&outcome.baseline, &target)?;
        let hidden_adapted = hidden_features(&outcome.params, &target)?;
        let base_scores = verification_scores(&hidden_base)?;
        let adapted_scores = verification_scores(&hidden_adapted)?;
        let base_tar = tar_at_far(&base_scores, &s.far)?;
        let adapted_tar = tar_at_far(&adapted_scores, &s.far)?;
        for ((far, b), (_, a)) in base_tar.iter().zip(&adapted_tar) {
            report.push_str(&format!("eval\tbaseline tar@far={far}\t{b}\n"));
            report.push_str(&format!("eval\tadapted tar@far={far}\t{a}\n"));
        }

        let eval_report = EvalReport {
            roc_points: roc_points(&adapted_scores)?,
            tar_at_far: adapted_tar,
            cmc: Vec::new(),
            tpir_at_fpir: Vec::new(),
            notes: vec![
                "adapted target, all-pairs verification".to_string(),
                format!(
                    "baseline tar at the same points: {}",
                    join_f64(&base_tar.iter().map(|&(_, t)| t).collect::<Vec<_>>(), ", ")
                ),
            ],
        };
        write_text(&out.join("eval_report.tsv"), &eval_report.to_tsv())?;
        write_text(&out.join("roc.csv"), &eval_report.roc_csv())?;
    } else {
        report.push_str("eval\tskipped\ttarget has no ground-truth labels\n");
    }

    write_text(&out.join("report.txt"), &report)?;
    print!("{report}");
    println!("artifacts\t{}", out.display());
    Ok(())
}
