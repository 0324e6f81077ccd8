use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use percept_core::analysis::{
    elbow_k, hopkins, kmeans, project_2d, save_clusters_csv, save_projection_csv, save_summary, suggest, summarize,
    Band, FeatureIndex, HopkinsConfig, HopkinsReport, KMeansConfig,
};
use percept_core::answers::AnswerStore;
use percept_core::data::{load_dataset, save_dataset, split_views, DatasetBundle, DescriptorFormat};
use percept_core::encoder::{load_checkpoint, save_checkpoint, EncoderModel};
use percept_core::gamut::{gamut_solve, Constraint, GamutConfig, GamutProblemFile};
use percept_core::losses::LossConfig;
use percept_core::metrics::{
    distance_matrix_from_model, mean_matrix_error, oracle, EvaluationReport, PredictorDistances,
};
use percept_core::sampling::{save_convergence_log, Sampler, SamplerConfig, SamplingPlan};
use percept_core::synth::{generate_synthetic, sample_triplets, simulate_answers, LatentGroundTruth, SynthConfig};
use percept_core::train::{initial_model, train_with, TrainConfig};
use percept_core::tste::{tste_fit_with, TsteConfig, TsteEmbedding};
use percept_service::{AppState, ServiceConfig};

use crate::args::*;
use crate::Failure;

type Outcome = Result<(), Failure>;

fn invalid(message: impl std::fmt::Display) -> Failure {
    Failure::Validation(anyhow!("{message}"))
}

struct Ctx {
    seed: u64,
    data_dir: PathBuf,
    out: Option<PathBuf>,
}

impl Ctx {
    fn out(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }

    fn dataset(&self) -> Result<DatasetBundle, Failure> {
        Ok(load_dataset(self.data_dir.join("manifest.json"))?)
    }

    fn answers(&self, arg: &AnswersArg) -> Result<AnswerStore, Failure> {
        let path = arg
            .answers
            .clone()
            .unwrap_or_else(|| self.data_dir.join("answers.jsonl"));
        Ok(AnswerStore::load_jsonl(path)?)
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Outcome {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.into()))?;
    fs::write(path, text + "\n").map_err(|e| Failure::Runtime(anyhow!("{}: {e}", path.display())))
}

pub fn run(cli: Cli) -> Outcome {
    let ctx = Ctx {
        seed: cli.seed,
        data_dir: cli.data_dir,
        out: cli.out,
    };
    match cli.command {
        Command::GenSynth(a) => gen_synth(&ctx, a),
        Command::Simulate(a) => simulate(&ctx, a),
        Command::Split(a) => split(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Embed(a) => embed(&ctx, a),
        Command::Tste(a) => tste(&ctx, a),
        Command::SampleNext(a) => sample_next(&ctx, a),
        Command::Suggest(a) => suggest_cmd(&ctx, a),
        Command::Project(a) => project(&ctx, a),
        Command::Cluster(a) => cluster(&ctx, a),
        Command::Elbow(a) => elbow(&ctx, a),
        Command::Hopkins(a) => hopkins_cmd(&ctx, a),
        Command::Summarize(a) => summarize_cmd(&ctx, a),
        Command::Gamut(a) => gamut(&ctx, a),
        Command::Serve(a) => serve(&ctx, a),
    }
}

fn gen_synth(ctx: &Ctx, a: GenSynthArgs) -> Outcome {
    let (bundle, truth) = generate_synthetic(&SynthConfig {
        n_materials: a.materials,
        views_per_material: a.views,
        latent_dim: a.latent_dim,
        descriptor_dim: a.descriptor_dim,
        noise_sigma: a.noise_sigma,
        seed: ctx.seed,
    })?;
    let dir = ctx.out("synth");
    let format = match a.format {
        Format::Csv => DescriptorFormat::Csv,
        Format::Binary => DescriptorFormat::Binary,
    };
    save_dataset(&bundle, &dir, format)?;
    truth.save(dir.join("truth.json"))?;
    Ok(())
}

fn simulate(ctx: &Ctx, a: SimulateArgs) -> Outcome {
    let truth = LatentGroundTruth::load(a.truth.unwrap_or_else(|| ctx.data_dir.join("truth.json")))?;
    let triplets = sample_triplets(&truth.material_ids, a.triplets, ctx.seed);
    let store = simulate_answers(&truth, &triplets, a.votes, a.noise, ctx.seed)?;
    store.save_jsonl(ctx.out("answers.jsonl"))?;
    Ok(())
}

fn split(ctx: &Ctx, a: SplitArgs) -> Outcome {
    let bundle = ctx.dataset()?;
    let (train, held) = split_views(&bundle, &a.holdout)?;
    let dir = ctx.out("split");
    save_dataset(&train, dir.join("train"), DescriptorFormat::Csv)?;
    save_dataset(&held, dir.join("held"), DescriptorFormat::Csv)?;
    Ok(())
}

fn train(ctx: &Ctx, a: TrainArgs) -> Outcome {
    let bundle = ctx.dataset()?;
    let config = TrainConfig {
        learning_rate_initial: a.lr,
        epochs: a.epochs,
        lr_step_epochs: a.lr_step,
        lr_decay_factor: a.lr_decay,
        batch_materials: a.batch_materials,
        batch_views: a.batch_views,
        steps_per_epoch: a.steps_per_epoch,
        hidden_dims: a.hidden,
        output_dim: a.dim,
        seed: ctx.seed,
        loss: LossConfig {
            margin_mu: a.margin,
            weight_tl: a.w_tl,
            weight_p: a.w_p,
            weight_ce: a.w_ce,
            weight_btl: a.w_btl,
            label_smoothing_epsilon: a.smoothing,
            n_classes: a.classes,
        },
        parallel: a.parallel,
        ..TrainConfig::default()
    };
    config.validate()?;
    let out = ctx.out("model.ckpt");
    if config.epochs == 0 {
        let model = initial_model(&bundle, &config)?;
        save_checkpoint(&out, &model, config.seed, 0, &config.loss)?;
        return Ok(());
    }
    let answers = ctx.answers(&a.answers)?;
    // Checkpoint after every epoch so an interrupted run keeps its progress.
    let outcome = train_with(&bundle, &answers, &config, |epoch, model| {
        save_checkpoint(&out, model, config.seed, epoch + 1, &config.loss)
    })?;
    let mut trace = String::from("epoch,learning_rate,loss,tl,p,ce,btl,instantiated_triplets\n");
    for s in &outcome.trace {
        trace.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            s.epoch, s.learning_rate, s.loss, s.terms.tl, s.terms.p, s.terms.ce, s.terms.btl, s.instantiated_triplets
        ));
    }
    let trace_path = out.with_extension("trace.csv");
    fs::write(&trace_path, trace).map_err(|e| Failure::Runtime(anyhow!("{}: {e}", trace_path.display())))
}

fn squared_truth(path: &Path) -> Result<PredictorDistances, Failure> {
    let truth = LatentGroundTruth::load(path)?;
    let squared = truth.distances.iter().map(|d| d * d).collect();
    Ok(PredictorDistances::new(truth.material_ids, squared)?)
}

fn eval(ctx: &Ctx, a: EvalArgs) -> Outcome {
    let answers = ctx.answers(&a.answers)?;
    let bundle = ctx.dataset()?;
    let p = &a.predictor;
    let (mut report, distances) = if let Some(ckpt) = &p.checkpoint {
        let (model, _) = load_checkpoint(ckpt)?;
        let d = distance_matrix_from_model(&model, &bundle)?;
        let prob = |r: &str, x: &str, y: &str| d.similarity_probability(r, x, y);
        let report = EvaluationReport::evaluate(
            "encoder",
            &answers,
            &bundle.materials,
            |r, x, y| d.choose(r, x, y),
            Some(&prob),
        )?;
        (report, Some(d))
    } else if let Some(path) = &p.embedding {
        let emb = TsteEmbedding::load(path)?;
        let d = emb.distance_matrix()?;
        let prob = |r: &str, x: &str, y: &str| emb.probability(r, x, y);
        let report = EvaluationReport::evaluate(
            "tste",
            &answers,
            &bundle.materials,
            |r, x, y| d.choose(r, x, y),
            Some(&prob),
        )?;
        (report, Some(d))
    } else {
        let report = EvaluationReport::evaluate("oracle", &answers, &bundle.materials, oracle(&answers), None)?;
        (report, None)
    };
    if let (Some(truth), Some(d)) = (&a.truth, &distances) {
        report.matrix_error = Some(mean_matrix_error(d, &squared_truth(truth)?)?);
    }
    report.save(ctx.out("report.json"))?;
    Ok(())
}

fn embed(ctx: &Ctx, a: EmbedArgs) -> Outcome {
    let bundle = ctx.dataset()?;
    let (model, _) = load_checkpoint(&a.checkpoint)?;
    FeatureIndex::from_model(&model, &bundle)?.save_view_features_csv(ctx.out("features.csv"))?;
    Ok(())
}

fn tste_config(alpha: f64, dim: usize, seed: u64) -> TsteConfig {
    TsteConfig {
        alpha,
        dim,
        seed,
        ..TsteConfig::default()
    }
}

fn tste(ctx: &Ctx, a: TsteArgs) -> Outcome {
    let answers = ctx.answers(&a.answers)?;
    let ids = match ctx.dataset() {
        Ok(bundle) => bundle.materials.iter().map(|m| m.id.clone()).collect(),
        Err(_) => answers.material_ids(),
    };
    let config = TsteConfig {
        learning_rate: a.lr,
        max_iters: a.max_iters,
        ..tste_config(a.alpha, a.dim, ctx.seed)
    };
    let emb = tste_fit_with(&answers, &ids, &config, None)?;
    emb.save(ctx.out("embedding.csv"))?;
    Ok(())
}

fn sample_next(ctx: &Ctx, a: SampleNextArgs) -> Outcome {
    let bundle = ctx.dataset()?;
    let config = SamplerConfig {
        pairs_per_reference: a.pairs,
        candidate_pool: (a.pool > 0).then_some(a.pool),
        seed: ctx.seed,
        tste: tste_config(a.alpha, a.dim, ctx.seed),
    };
    let mut sampler = Sampler::new(bundle.materials.iter().map(|m| m.id.clone()).collect(), config)?;
    let mut plans = a.plan.iter().map(SamplingPlan::load).collect::<Result<Vec<_>, _>>()?;
    plans.sort_by_key(|p| p.iteration);
    for p in &plans {
        sampler.record_plan(p);
    }
    let answers = match &a.answers {
        Some(path) => AnswerStore::load_jsonl(path)?,
        None => AnswerStore::new(),
    };
    let plan = sampler.next_plan(&answers)?;
    plan.save(ctx.out("plan.json"))?;
    if let Some(log) = &a.log {
        save_convergence_log(sampler.convergence_log(), log)?;
    }
    Ok(())
}

fn feature_index(ctx: &Ctx, f: &FeatureArgs) -> Result<FeatureIndex, Failure> {
    if let Some(ckpt) = &f.checkpoint {
        let (model, _): (EncoderModel, _) = load_checkpoint(ckpt)?;
        Ok(FeatureIndex::from_model(&model, &ctx.dataset()?)?)
    } else {
        let path = f.embedding.as_ref().expect("clap requires one feature source");
        let emb = TsteEmbedding::load(path)?;
        Ok(FeatureIndex::from_points(emb.material_ids, emb.points)?)
    }
}

fn kmeans_config(ctx: &Ctx, k: &KMeansArgs) -> KMeansConfig {
    KMeansConfig {
        restarts: k.restarts,
        max_iters: k.max_iters,
        tol: k.tol,
        seed: ctx.seed,
    }
}

fn suggest_cmd(ctx: &Ctx, a: SuggestArgs) -> Outcome {
    let index = feature_index(ctx, &a.features)?;
    let band = match (&a.quantile, a.band) {
        (Some(q), _) => {
            let (lo, hi) = (q[0], q[1]);
            if !(0.0 <= lo && lo < hi && hi <= 1.0) {
                return Err(invalid("--quantile needs 0 <= LO < HI <= 1"));
            }
            Band::Quantile(lo, hi)
        }
        (None, BandArg::Near) => Band::Near,
        (None, BandArg::Mid) => Band::Mid,
        (None, BandArg::Far) => Band::Far,
    };
    let ids = suggest(&index, &a.reference, band, a.count, ctx.seed)?;
    match &ctx.out {
        Some(path) => save_summary(&ids, path)?,
        None => ids.iter().for_each(|id| println!("{id}")),
    }
    Ok(())
}

fn project(ctx: &Ctx, f: FeatureArgs) -> Outcome {
    let index = feature_index(ctx, &f)?;
    let projection = project_2d(&index.representatives)?;
    save_projection_csv(&index.material_ids, &projection.coords, ctx.out("projection.csv"))?;
    Ok(())
}

fn cluster(ctx: &Ctx, a: ClusterArgs) -> Outcome {
    let index = feature_index(ctx, &a.features)?;
    let result = kmeans(&index.representatives, a.k, &kmeans_config(ctx, &a.kmeans))?;
    save_clusters_csv(&index.material_ids, &result.assignments, ctx.out("clusters.csv"))?;
    Ok(())
}

fn elbow(ctx: &Ctx, a: ElbowArgs) -> Outcome {
    let index = feature_index(ctx, &a.features)?;
    let k_max = a.k_max.unwrap_or(index.n());
    let result = elbow_k(
        &index.representatives,
        a.threshold,
        k_max,
        &kmeans_config(ctx, &a.kmeans),
    )?;
    write_json(&ctx.out("elbow.json"), &result)
}

fn hopkins_cmd(ctx: &Ctx, a: HopkinsArgs) -> Outcome {
    let index = feature_index(ctx, &a.features)?;
    let config = HopkinsConfig {
        sample_fraction: a.fraction,
        min_sample: a.min_sample,
        max_sample: a.max_sample,
        repetitions: a.repetitions,
        seed: ctx.seed,
    };
    let value = hopkins(&index.representatives, &config)?;
    let report = HopkinsReport {
        value,
        sample_size: config.sample_size(index.n()),
        config,
    };
    write_json(&ctx.out("hopkins.json"), &report)
}

fn summarize_cmd(ctx: &Ctx, a: SummarizeArgs) -> Outcome {
    let index = feature_index(ctx, &a.features)?;
    let config = kmeans_config(ctx, &a.kmeans);
    let k = match a.k {
        Some(k) => k,
        None => elbow_k(&index.representatives, a.threshold, index.n(), &config)?.k,
    };
    let ids = summarize(&index, k, &config)?;
    save_summary(&ids, ctx.out("summary.txt"))?;
    Ok(())
}

fn gamut(ctx: &Ctx, a: GamutArgs) -> Outcome {
    let (model, _) = load_checkpoint(&a.checkpoint)?;
    let file = GamutProblemFile::load(&a.problem)?;
    // View ids need the dataset; inline descriptors do not.
    let bundle = ctx.dataset().ok();
    let problem = file.resolve(bundle.as_ref())?;
    let config = GamutConfig {
        max_iters: a.max_iters,
        step: a.step,
        tol: a.tol,
        constraint: match a.constraint {
            ConstraintArg::Simplex => Constraint::Simplex,
            ConstraintArg::Box => Constraint::Box,
        },
    };
    gamut_solve(&problem, &model, &config)?.save(ctx.out("solution.json"))?;
    Ok(())
}

fn serve(ctx: &Ctx, a: ServeArgs) -> Outcome {
    let bundle = ctx.dataset()?;
    let mut config = ServiceConfig::new(&a.state_dir);
    config.hit.hit_size = a.hit_size;
    config.hit.n_training = a.training;
    config.hit.n_control = a.controls;
    config.sampler = SamplerConfig {
        pairs_per_reference: a.pairs,
        candidate_pool: (a.pool > 0).then_some(a.pool),
        seed: ctx.seed,
        ..SamplerConfig::default()
    };
    config.coverage_threshold = a.coverage;
    config.asymmetric = a.asymmetric;
    config.admin_token = std::env::var("PERCEPT_ADMIN_TOKEN").ok().filter(|t| !t.is_empty());
    config.ui_dir = a.ui_dir;
    config.seed = ctx.seed;
    let state = AppState::open(bundle, config)?;
    let addr = SocketAddr::new(a.addr, a.port);
    let runtime = tokio::runtime::Runtime::new()?;
    eprintln!("listening on http://{addr}");
    runtime.block_on(percept_service::serve(state, addr))?;
    Ok(())
}
