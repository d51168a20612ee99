//! Command implementations. Each returns the machine-readable summary that
//! `main` prints to stdout; artifacts land in the configured out directory.
//!
//! Determinism contract: given the same inputs, config, and `--seed`, every
//! command writes byte-identical artifacts. All randomness flows through
//! seeded ChaCha8 streams, directory listings are sorted, and map/JSON keys
//! serialize in a fixed order.

use crate::config::{ensure_out_dir, require, DirectiveSpec, RunConfig};
use crate::error::{read_err, CliError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use riskforge_core::controller::{
    describe_scene, parse_directive_and_weights, query_llm, rule_based_weights, select_weights,
    BehaviorKb, EndpointConfig, ExemplarLibrary, LossWeightVector, ManeuverDirective,
    ManeuverSide, ManeuverType, CONFIDENCE_THRESHOLD,
};
use riskforge_core::io::{
    export_plot_data, generate_synthetic_corpus, load_checkpoint, load_corpus, load_scenario,
    parse_highd, save_checkpoint, save_corpus, save_scenario, Provenance, ScenarioDocument,
    ScenarioSource,
};
use riskforge_core::metrics::{
    classify, interaction_consistency, long_tail_coverage, sim_to_real, step_worst_indicators,
    trajectory_realism, worst_case_indicators, InteractionConfig, LatentSample, LongTailCut,
    RiskHistogram, RiskLevel, RiskThresholds,
};
use riskforge_core::motion_prior::{LatentDistribution, MotionPriorModel};
use riskforge_core::optimizer::{
    select_victim, AdversarialOptimizer, LossTermParams, OptimizationResult, OptimizerConfig,
    OptimizerError,
};
use riskforge_core::risk_field::{
    build_target_vector, IndicatorSet, PotentialFieldConfig, TimeToEvent,
};
use riskforge_core::scene::{Scene, Trajectory};
use riskforge_core::Vec2r;
use serde_json::{json, Value};
use std::path::{Path, PathBuf};

/// Default scenario count for `generate` and `attack` when neither the
/// config nor the flag names one.
const DEFAULT_COUNT: usize = 10;

/// Attack retries per slot before the distribution loop accepts a
/// near-miss; caps the work spent on bands the prior cannot reach.
const RETRY_CAP: usize = 5;

/// Directive strength when none is configured: near the critical end, since
/// the point of an attack is to leave the safe regime.
const DEFAULT_STRENGTH: f64 = 0.9;

// ---------------------------------------------------------------------------
// shared plumbing

/// Every scenario document under `dir` (files matching `*.json`), sorted by
/// file name so batch order never depends on directory enumeration.
fn load_scenario_dir(dir: &PathBuf) -> Result<Vec<(PathBuf, ScenarioDocument)>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| read_err(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no scenario documents (*.json) found",
            dir.display()
        )));
    }
    paths
        .into_iter()
        .map(|p| Ok((p.clone(), load_scenario(&p)?)))
        .collect()
}

fn scene_count_check(scenes: &[Scene<f64>], path: &Path) -> Result<(), CliError> {
    if scenes.is_empty() {
        return Err(CliError::Data(format!(
            "{}: corpus contains no scenes",
            path.display()
        )));
    }
    Ok(())
}

fn write_doc(out: &Path, idx: usize, doc: &ScenarioDocument) -> Result<PathBuf, CliError> {
    let path = out.join(format!("scenario_{idx:04}.json"));
    save_scenario(doc, &path)?;
    Ok(path)
}

/// Positive scenario count or a config error naming the knob.
fn resolve_count(cfg: &RunConfig) -> Result<usize, CliError> {
    let count = cfg.count.unwrap_or(DEFAULT_COUNT);
    if count == 0 {
        return Err(CliError::config("count must be positive"));
    }
    Ok(count)
}

fn histogram_value(h: &RiskHistogram) -> Value {
    serde_json::to_value(h).expect("histogram serializes")
}

/// The decoded part of the ego's motion, shaped for the realism metric.
fn ego_latent_sample(doc: &ScenarioDocument) -> Option<LatentSample<f64>> {
    let z = doc.provenance.latent.clone()?;
    let positions = doc.scene.future_positions(doc.scene.ego_index())?;
    let dt = doc.scene.dt();
    Some(LatentSample { z, positions, dt })
}

// ---------------------------------------------------------------------------
// attack planning (directive –> weights)

fn parse_directive(spec: &DirectiveSpec) -> Result<ManeuverDirective, CliError> {
    let side: ManeuverSide = serde_json::from_value(Value::String(spec.side.clone()))
        .map_err(|e| CliError::Config(format!("directive side: {e}")))?;
    let kind: ManeuverType = serde_json::from_value(Value::String(spec.kind.clone()))
        .map_err(|e| CliError::Config(format!("directive type: {e}")))?;
    Ok(ManeuverDirective::new(side, kind, spec.strength)?)
}

/// Pick an adversarial intent from scene geometry: cut in from the victim's
/// side when it has lateral room, brake ahead of a tailing ego, merge into
/// the ego's lane from behind otherwise.
fn derive_directive(scene: &Scene<f64>, strength: f64) -> Result<ManeuverDirective, CliError> {
    let victim_id = select_victim(scene)?;
    let t = scene.last_history_step();
    let ego = scene.ego().state(t)?;
    let victim = scene
        .agent(victim_id)
        .expect("victim id comes from this scene")
        .state(t)?;
    let u = Vec2r::new(ego.heading.cos(), ego.heading.sin());
    let d = victim.position - ego.position;
    let lateral = d.dot(u.perp());
    let (side, kind) = if lateral.abs() >= 1.0 {
        let side = if lateral > 0.0 {
            ManeuverSide::Left
        } else {
            ManeuverSide::Right
        };
        (side, ManeuverType::CutIn)
    } else if d.dot(u) >= 0.0 {
        (ManeuverSide::Front, ManeuverType::SuddenBrake)
    } else {
        (ManeuverSide::Rear, ManeuverType::UnsafeMerge)
    };
    Ok(ManeuverDirective::new(side, kind, strength)?)
}

struct AttackPlan {
    weights: LossWeightVector,
    trace: String,
}

/// Resolve the loss weights for one scene. Fixed config weights win
/// outright; otherwise the rule engine prices the directive, and — when the
/// LLM path is enabled — the endpoint may override it at sufficient
/// confidence. Endpoint trouble of any kind falls back to the rule engine
/// rather than failing the run.
fn plan_attack(
    cfg: &RunConfig,
    scene: &Scene<f64>,
    strength_override: Option<f64>,
) -> Result<AttackPlan, CliError> {
    if let Some(w) = cfg.weights {
        w.validate()?;
        return Ok(AttackPlan {
            weights: w,
            trace: "fixed weights from config".to_string(),
        });
    }
    let directive = match &cfg.directive {
        Some(spec) => parse_directive(spec)?,
        None => derive_directive(scene, strength_override.unwrap_or(DEFAULT_STRENGTH))?,
    };
    let target = build_target_vector(scene, &directive, &PotentialFieldConfig::default())?;
    let rule = rule_based_weights(&target, &directive);
    let (weights, trace) = if cfg.llm_enabled() {
        let indicators: IndicatorSet<f64> =
            step_worst_indicators(scene)?[scene.last_history_step()];
        let narrative = describe_scene(scene, &indicators);
        let llm = EndpointConfig::from_env().and_then(|endpoint| {
            let text = query_llm(
                &narrative,
                &BehaviorKb::builtin(),
                &ExemplarLibrary::builtin(),
                &endpoint,
            )?;
            let (_, weights, confidence) = parse_directive_and_weights(&text)?;
            Ok((weights, confidence))
        });
        select_weights(llm, rule, CONFIDENCE_THRESHOLD)
    } else {
        rule
    };
    Ok(AttackPlan {
        weights,
        trace: format!(
            "directive {:?} {:?} strength {:?} [{:?}]: {}",
            directive.side,
            directive.kind,
            directive.strength,
            trace.source,
            trace.steps.join("; ")
        ),
    })
}

// ---------------------------------------------------------------------------
// ingest / train

pub fn cmd_ingest(cfg: &RunConfig) -> Result<Value, CliError> {
    let out = cfg.out_dir();
    ensure_out_dir(&out)?;
    let (scenes, source) = match (&cfg.tracks, &cfg.synthetic) {
        (Some(_), Some(_)) => {
            return Err(CliError::config(
                "both recorded tracks and a synthetic section are configured; pick one",
            ))
        }
        (Some(tracks), None) => {
            let meta = require(&cfg.recording_meta, "recording_meta (--meta)")?;
            let opts = cfg.highd.unwrap_or_default();
            (parse_highd(tracks, &meta, &opts)?, "recorded")
        }
        (None, synthetic) => {
            let mut gen_cfg = (*synthetic).unwrap_or_default();
            if let Some(n) = cfg.count {
                gen_cfg.num_scenes = n;
            }
            if let Some(seed) = cfg.seed {
                gen_cfg.seed = seed;
            }
            (generate_synthetic_corpus(&gen_cfg)?, "synthetic")
        }
    };
    if scenes.is_empty() {
        return Err(CliError::data(
            "ingestion produced no scenes (inputs too short for the requested windows?)",
        ));
    }
    let corpus_path = out.join("corpus.jsonl");
    save_corpus(&scenes, &corpus_path)?;
    let maps: std::collections::BTreeSet<u64> =
        scenes.iter().map(|s| s.map.map_id).collect();
    Ok(json!({
        "command": "ingest",
        "source": source,
        "scenes": scenes.len(),
        "maps": maps.len(),
        "corpus": corpus_path,
    }))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<Value, CliError> {
    let out = cfg.out_dir();
    ensure_out_dir(&out)?;
    let corpus_path = require(&cfg.corpus, "corpus (--corpus)")?;
    let scenes = load_corpus(&corpus_path)?;
    scene_count_check(&scenes, &corpus_path)?;

    // Unconfigured model dimensions adapt to the corpus horizons; an
    // explicit model section is taken verbatim (and will be rejected by
    // training if it disagrees with the data).
    let mut model_cfg = cfg.model.unwrap_or_default();
    if cfg.model.is_none() {
        model_cfg.history_horizon = scenes[0].history_horizon;
        model_cfg.future_horizon = scenes[0].future_horizon;
    }
    let mut train_cfg = cfg.training.unwrap_or_default();
    if let Some(seed) = cfg.seed {
        train_cfg.seed = seed;
    }

    let (model, history) = MotionPriorModel::train(&scenes, &model_cfg, &train_cfg)?;
    let ckpt = out.join("model.ckpt");
    save_checkpoint(&model, &ckpt)?;
    let mse = model.reconstruction_mse(&scenes)?;
    let last = history.last().expect("at least one epoch");
    Ok(json!({
        "command": "train",
        "scenes": scenes.len(),
        "epochs": history.len(),
        "final_loss": last.total,
        "final_recon": last.recon,
        "reconstruction_mse": mse,
        "params": model.num_params(),
        "checkpoint": ckpt,
    }))
}

// ---------------------------------------------------------------------------
// generate / attack

fn load_model_and_scenes(
    cfg: &RunConfig,
) -> Result<(MotionPriorModel<f64>, Vec<Scene<f64>>), CliError> {
    let ckpt = require(&cfg.checkpoint, "checkpoint (--model)")?;
    let corpus_path = require(&cfg.corpus, "corpus (--corpus)")?;
    let model = load_checkpoint(&ckpt)?;
    let scenes = load_corpus(&corpus_path)?;
    scene_count_check(&scenes, &corpus_path)?;
    Ok((model, scenes))
}

/// Decode one prior sample against `scene` into a finished document.
fn sample_prior_doc(
    model: &MotionPriorModel<f64>,
    scene: &Scene<f64>,
    rng: &mut ChaCha8Rng,
    seed: u64,
    thresholds: &RiskThresholds<f64>,
    cut: LongTailCut,
) -> Result<ScenarioDocument, CliError> {
    let ctx = model.conditioning(scene)?;
    let prior = model.prior(&ctx.c)?;
    let z = prior.sample(rng);
    let decoded = model.decode(&z, &ctx)?;
    let scenario = model.materialize_scene(scene, &decoded)?;
    let mut prov = Provenance::new(ScenarioSource::Cvae);
    prov.seed = Some(seed);
    prov.latent = Some(z);
    Ok(ScenarioDocument::from_scene(
        scenario, prov, None, thresholds, cut,
    )?)
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<Value, CliError> {
    let out = cfg.out_dir();
    ensure_out_dir(&out)?;
    let (model, scenes) = load_model_and_scenes(cfg)?;
    let count = resolve_count(cfg)?;
    let thresholds = cfg.thresholds()?;
    let cut = cfg.cut();
    let seed = cfg.seed();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut histogram = RiskHistogram::default();
    for i in 0..count {
        let scene = &scenes[i % scenes.len()];
        let doc = sample_prior_doc(&model, scene, &mut rng, seed, &thresholds, cut)?;
        histogram.record(doc.risk_label);
        write_doc(&out, i, &doc)?;
    }
    Ok(json!({
        "command": "generate",
        "scenarios": count,
        "risk_histogram": histogram_value(&histogram),
        "out": out,
    }))
}

/// Run one optimizer attack against `scene` under the plan's weights.
fn run_optimize(
    model: &MotionPriorModel<f64>,
    scene: &Scene<f64>,
    plan: &AttackPlan,
    loss_params: LossTermParams<f64>,
    opt_cfg: &OptimizerConfig<f64>,
) -> Result<OptimizationResult<f64>, OptimizerError> {
    AdversarialOptimizer::new(loss_params, plan.weights).optimize(model, scene, opt_cfg)
}

/// Package an optimization outcome as a persisted document.
fn package_attack(
    result: OptimizationResult<f64>,
    plan: &AttackPlan,
    opt_seed: u64,
    thresholds: &RiskThresholds<f64>,
    cut: LongTailCut,
) -> Result<(ScenarioDocument, bool, usize), CliError> {
    let mut prov = Provenance::new(ScenarioSource::Optimizer);
    prov.seed = Some(opt_seed);
    prov.weights = Some(result.weights);
    prov.controller_trace = Some(plan.trace.clone());
    prov.latent = Some(result.z_final.clone());
    let losses: Vec<f64> = result.history.iter().map(|r| r.total).collect();
    let accepted_steps = result.history.len() - 1;
    let doc =
        ScenarioDocument::from_scene(result.scenario, prov, Some(losses), thresholds, cut)?;
    Ok((doc, result.converged, accepted_steps))
}

pub fn cmd_attack(cfg: &RunConfig) -> Result<Value, CliError> {
    let out = cfg.out_dir();
    ensure_out_dir(&out)?;
    let (model, scenes) = load_model_and_scenes(cfg)?;
    let count = resolve_count(cfg)?;
    let thresholds = cfg.thresholds()?;
    let cut = cfg.cut();
    let seed = cfg.seed();
    let loss_params = cfg.loss_params.unwrap_or_default();
    let base_opt = cfg.optimizer.unwrap_or_default();

    let mut histogram = RiskHistogram::default();
    let mut converged = 0usize;
    let mut steps_total = 0usize;
    for i in 0..count {
        let scene = &scenes[i % scenes.len()];
        let plan = plan_attack(cfg, scene, None)?;
        let mut opt_cfg = base_opt;
        opt_cfg.seed = seed.wrapping_add(i as u64);
        let result = run_optimize(&model, scene, &plan, loss_params, &opt_cfg)?;
        let (doc, did_converge, steps) =
            package_attack(result, &plan, opt_cfg.seed, &thresholds, cut)?;
        histogram.record(doc.risk_label);
        converged += did_converge as usize;
        steps_total += steps;
        write_doc(&out, i, &doc)?;
    }
    Ok(json!({
        "command": "attack",
        "scenarios": count,
        "converged": converged,
        "mean_accepted_steps": steps_total as f64 / count as f64,
        "risk_histogram": histogram_value(&histogram),
        "out": out,
    }))
}

// ---------------------------------------------------------------------------
// classify / evaluate / report

pub fn cmd_classify(cfg: &RunConfig) -> Result<Value, CliError> {
    let thresholds = cfg.thresholds()?;
    let cut = cfg.cut();
    let mut labels = Vec::new();
    let mut levels = Vec::new();
    match (&cfg.scenarios, &cfg.triples) {
        (Some(_), Some(_)) => {
            return Err(CliError::config(
                "both a scenarios directory and raw triples are configured; pick one",
            ))
        }
        (Some(dir), None) => {
            for (path, doc) in load_scenario_dir(dir)? {
                let worst = worst_case_indicators(&doc.indicators).ok_or_else(|| {
                    CliError::Data(format!(
                        "{}: document has an empty indicator series",
                        path.display()
                    ))
                })?;
                let level = classify(&worst, &thresholds, cut);
                levels.push(level);
                let name = path
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                labels.push(json!({ "item": name, "level": level }));
            }
        }
        (None, Some(triples)) => {
            for (i, t) in triples.iter().enumerate() {
                // Banding reads only the three timing axes; the distance
                // fields are irrelevant here and filled with +inf.
                let set = IndicatorSet {
                    ttc: TimeToEvent::Finite(t.ttc),
                    thw: TimeToEvent::Finite(t.thw),
                    tlc: TimeToEvent::Finite(t.tlc),
                    min_distance: f64::INFINITY,
                    lateral_gap: f64::INFINITY,
                };
                let level = classify(&set, &thresholds, cut);
                levels.push(level);
                labels.push(json!({ "item": i, "level": level }));
            }
        }
        (None, None) => {
            return Err(CliError::config(
                "missing required setting: scenarios (--scenarios) or triples",
            ))
        }
    }
    let histogram = RiskHistogram::from_levels(levels);
    Ok(json!({
        "command": "classify",
        "count": labels.len(),
        "labels": labels,
        "risk_histogram": histogram_value(&histogram),
    }))
}

/// Reference side of an evaluation: a directory of documents or a corpus
/// file. Returns the scenes plus each one's latent when it has one.
#[allow(clippy::type_complexity)]
fn load_reference(
    path: &PathBuf,
) -> Result<(Vec<Scene<f64>>, Vec<Option<LatentSample<f64>>>), CliError> {
    if path.is_dir() {
        let docs = load_scenario_dir(path)?;
        let latents = docs.iter().map(|(_, d)| ego_latent_sample(d)).collect();
        Ok((docs.into_iter().map(|(_, d)| d.scene).collect(), latents))
    } else {
        let scenes = load_corpus(path)?;
        scene_count_check(&scenes, path)?;
        let latents = vec![None; scenes.len()];
        Ok((scenes, latents))
    }
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<Value, CliError> {
    let gen_dir = require(&cfg.generated, "generated (--generated)")?;
    let ref_path = require(&cfg.reference, "reference (--reference)")?;
    let thresholds = cfg.thresholds()?;
    let cut = cfg.cut();

    let gen_docs = load_scenario_dir(&gen_dir)?;
    let (ref_scenes, ref_latents) = load_reference(&ref_path)?;

    let worst: Vec<IndicatorSet<f64>> = gen_docs
        .iter()
        .map(|(path, d)| {
            worst_case_indicators(&d.indicators).ok_or_else(|| {
                CliError::Data(format!(
                    "{}: document has an empty indicator series",
                    path.display()
                ))
            })
        })
        .collect::<Result<_, _>>()?;
    let lcr = long_tail_coverage(&worst, &thresholds, cut)?;
    let histogram =
        RiskHistogram::from_levels(worst.iter().map(|w| classify(w, &thresholds, cut)));

    let gen_scenes: Vec<Scene<f64>> = gen_docs.iter().map(|(_, d)| d.scene.clone()).collect();
    let interaction = interaction_consistency(&gen_scenes, &InteractionConfig::default())?;

    let gen_trajectories: Vec<Trajectory<f64>> =
        gen_scenes.iter().map(|s| s.ego().clone()).collect();
    let ref_trajectories: Vec<Trajectory<f64>> =
        ref_scenes.iter().map(|s| s.ego().clone()).collect();
    let sim = sim_to_real(&gen_trajectories, &ref_trajectories)?;

    // Realism needs a latent on every document of both sides, paired
    // one-to-one; recorded references have none, so the score is omitted
    // rather than invented.
    let gen_latents: Vec<Option<LatentSample<f64>>> =
        gen_docs.iter().map(|(_, d)| ego_latent_sample(d)).collect();
    let realism = if gen_latents.len() == ref_latents.len()
        && gen_latents.iter().all(|l| l.is_some())
        && ref_latents.iter().all(|l| l.is_some())
    {
        let generated: Vec<LatentSample<f64>> =
            gen_latents.into_iter().map(|l| l.expect("checked")).collect();
        let reference: Vec<LatentSample<f64>> =
            ref_latents.into_iter().map(|l| l.expect("checked")).collect();
        let prior = LatentDistribution::standard(generated[0].z.len());
        Some(trajectory_realism(&generated, &reference, &prior)?)
    } else {
        None
    };

    Ok(json!({
        "command": "evaluate",
        "generated": gen_docs.len(),
        "reference": ref_scenes.len(),
        "long_tail_coverage": lcr,
        "risk_histogram": histogram_value(&histogram),
        "interaction": serde_json::to_value(&interaction).expect("score serializes"),
        "sim_to_real": serde_json::to_value(&sim).expect("score serializes"),
        "realism": realism.map(|r| serde_json::to_value(r).expect("score serializes")),
    }))
}

pub fn cmd_report(cfg: &RunConfig) -> Result<Value, CliError> {
    let out = cfg.out_dir();
    ensure_out_dir(&out)?;
    let dir = require(&cfg.scenarios, "scenarios (--scenarios)")?;
    let docs: Vec<ScenarioDocument> = load_scenario_dir(&dir)?
        .into_iter()
        .map(|(_, d)| d)
        .collect();
    let files = export_plot_data(&docs, &out)?;
    let histogram = RiskHistogram::from_levels(docs.iter().map(|d| d.risk_label));
    Ok(json!({
        "command": "report",
        "scenarios": docs.len(),
        "files": files,
        "risk_histogram": histogram_value(&histogram),
        "out": out,
    }))
}

// ---------------------------------------------------------------------------
// distribute

fn band_index(level: RiskLevel) -> usize {
    match level {
        RiskLevel::Low => 0,
        RiskLevel::Intermediate => 1,
        RiskLevel::High => 2,
        RiskLevel::LongTail => 3,
    }
}

const BANDS: [RiskLevel; 4] = [
    RiskLevel::Low,
    RiskLevel::Intermediate,
    RiskLevel::High,
    RiskLevel::LongTail,
];

/// Integer per-band quotas that sum exactly to `budget`: floor each share,
/// then hand the leftover slots to the largest remainders (severest band
/// first on ties).
fn apportion(fractions: [f64; 4], budget: usize) -> [usize; 4] {
    let mut quota = [0usize; 4];
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(4);
    let mut assigned = 0usize;
    for (i, f) in fractions.iter().enumerate() {
        let exact = f * budget as f64;
        let floor = exact.floor() as usize;
        quota[i] = floor;
        assigned += floor;
        remainders.push((i, exact - floor as f64));
    }
    // Severity descending on equal remainders: index 3 is the long tail.
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(b.0.cmp(&a.0)));
    for k in 0..budget.saturating_sub(assigned) {
        quota[remainders[k % 4].0] += 1;
    }
    quota
}

/// How hard to push when attacking toward a band. Low never routes through
/// an attack (optimization only escalates risk).
fn band_strength(level: RiskLevel) -> f64 {
    match level {
        RiskLevel::Low => 0.0,
        RiskLevel::Intermediate => 0.3,
        RiskLevel::High => 0.6,
        RiskLevel::LongTail => 0.95,
    }
}

pub fn cmd_distribute(cfg: &RunConfig) -> Result<Value, CliError> {
    let out = cfg.out_dir();
    ensure_out_dir(&out)?;
    let (model, scenes) = load_model_and_scenes(cfg)?;
    let mix = require(&cfg.target_mix, "target_mix")?;
    mix.validate()?;
    let budget = require(&cfg.budget, "budget (--budget)")?;
    if budget < 10 {
        return Err(CliError::Config(format!(
            "budget must be at least 10, got {budget}"
        )));
    }
    let thresholds = cfg.thresholds()?;
    let cut = cfg.cut();
    let seed = cfg.seed();
    let loss_params = cfg.loss_params.unwrap_or_default();
    let base_opt = cfg.optimizer.unwrap_or_default();

    let quota = apportion(mix.fractions(), budget);
    let mut counts = [0usize; 4];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut attacks_invoked = 0usize;
    let mut mismatched_slots = 0usize;

    for slot in 0..budget {
        let scene = &scenes[slot % scenes.len()];
        let prior_doc = sample_prior_doc(&model, scene, &mut rng, seed, &thresholds, cut)?;
        let prior_band = band_index(prior_doc.risk_label);

        let accepted = if counts[prior_band] < quota[prior_band] {
            prior_doc
        } else {
            // This band already met its target: aim the slot at the most
            // underfilled band instead (severest first on ties).
            let deficit = (0..4)
                .max_by_key(|&b| (quota[b].saturating_sub(counts[b]), b))
                .expect("four bands");
            if BANDS[deficit] <= prior_doc.risk_label {
                // An attack only escalates risk; a calmer band than the
                // sample cannot be reached that way. Keep the sample and
                // let the final mix carry the mismatch.
                mismatched_slots += 1;
                prior_doc
            } else {
                let plan =
                    plan_attack(cfg, scene, Some(band_strength(BANDS[deficit])))?;
                let mut landed = None;
                let mut last_try = None;
                for attempt in 0..RETRY_CAP {
                    let mut opt_cfg = base_opt;
                    opt_cfg.seed = seed
                        .wrapping_add(1 + (slot as u64) * 2 * (RETRY_CAP as u64) + attempt as u64);
                    attacks_invoked += 1;
                    let result =
                        match run_optimize(&model, scene, &plan, loss_params, &opt_cfg) {
                            Ok(r) => r,
                            // A numerically dead attempt burns a retry; the
                            // next seed may land. Anything else is a real
                            // failure.
                            Err(OptimizerError::OptimizationAborted { .. }) => continue,
                            Err(e) => return Err(e.into()),
                        };
                    let (doc, _, _) =
                        package_attack(result, &plan, opt_cfg.seed, &thresholds, cut)?;
                    let b = band_index(doc.risk_label);
                    if counts[b] < quota[b] {
                        landed = Some(doc);
                        break;
                    }
                    last_try = Some(doc);
                }
                match landed {
                    Some(doc) => doc,
                    None => {
                        mismatched_slots += 1;
                        last_try.unwrap_or(prior_doc)
                    }
                }
            }
        };

        counts[band_index(accepted.risk_label)] += 1;
        write_doc(&out, slot, &accepted)?;
    }

    let achieved: Vec<f64> = counts.iter().map(|&c| c as f64 / budget as f64).collect();
    let warning = (mismatched_slots > 0).then(|| {
        format!(
            "{mismatched_slots} of {budget} slots missed their target band \
             (retry cap {RETRY_CAP}); the achieved mix is partial"
        )
    });
    if let Some(w) = &warning {
        eprintln!("riskforge: warning: {w}");
    }
    Ok(json!({
        "command": "distribute",
        "budget": budget,
        "target": { "low": mix.low, "intermediate": mix.intermediate,
                     "high": mix.high, "long_tail": mix.long_tail },
        "achieved": { "low": achieved[0], "intermediate": achieved[1],
                       "high": achieved[2], "long_tail": achieved[3] },
        "counts": { "low": counts[0], "intermediate": counts[1],
                     "high": counts[2], "long_tail": counts[3] },
        "attacks_invoked": attacks_invoked,
        "mismatched_slots": mismatched_slots,
        "warning": warning,
        "out": out,
    }))
}
