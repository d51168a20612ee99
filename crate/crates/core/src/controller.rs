//! Scene narration, maneuver directives, and loss-weight selection.
//!
//! The controller sits between scene understanding and adversarial
//! optimization. It renders scenes into structured text, obtains a
//! `ManeuverDirective` plus `LossWeightVector` from either a deterministic
//! rule engine or an external LLM endpoint, validates whatever comes back,
//! and always falls back to the rule engine when the external path is
//! unavailable or rejected.

use crate::risk_field::{IndicatorSet, RiskTarget, TimeToEvent, T_SAFE_S};
use crate::scalar::Scalar;
use crate::scene::{build_scene_graph, relative_kinematics, Scene};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("directive strength {0} outside [0,1]")]
    InvalidStrength(f64),
    #[error("maneuver {kind:?} cannot come from side {side:?}")]
    IllegalCombination { side: ManeuverSide, kind: ManeuverType },
    #[error("weight vector rejected: {0}")]
    InvalidWeights(String),
    #[error("exemplar library lacks an entry for {0:?}")]
    MissingExemplar(ManeuverType),
    #[error("LLM response rejected: {reason}")]
    ParseRejected { reason: String },
    #[error("LLM endpoint unavailable: {0}")]
    EndpointUnavailable(String),
    #[error("LLM endpoint not configured (set RISKFORGE_LLM_URL)")]
    LlmNotConfigured,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManeuverSide {
    Left,
    Right,
    Front,
    Rear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManeuverType {
    CutIn,
    SuddenBrake,
    UnsafeMerge,
    DangerousLaneChange,
    HeadOn,
    None,
}

impl ManeuverType {
    pub const ALL: [ManeuverType; 6] = [
        ManeuverType::CutIn,
        ManeuverType::SuddenBrake,
        ManeuverType::UnsafeMerge,
        ManeuverType::DangerousLaneChange,
        ManeuverType::HeadOn,
        ManeuverType::None,
    ];
}

/// What the adversary should do, from which side, and how hard.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManeuverDirective {
    pub side: ManeuverSide,
    #[serde(rename = "type")]
    pub kind: ManeuverType,
    /// 0 = gentle end of the maneuver's risk band, 1 = critical.
    pub strength: f64,
}

impl ManeuverDirective {
    pub fn new(
        side: ManeuverSide,
        kind: ManeuverType,
        strength: f64,
    ) -> Result<Self, ControllerError> {
        let d = Self { side, kind, strength };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), ControllerError> {
        if !self.strength.is_finite() || !(0.0..=1.0).contains(&self.strength) {
            return Err(ControllerError::InvalidStrength(self.strength));
        }
        // Braking happens in the ego's lane: ahead of it or behind it.
        if self.kind == ManeuverType::SuddenBrake
            && !matches!(self.side, ManeuverSide::Front | ManeuverSide::Rear)
        {
            return Err(ControllerError::IllegalCombination {
                side: self.side,
                kind: self.kind,
            });
        }
        Ok(())
    }

    /// Neutral directive: no maneuver, zero strength.
    pub fn none() -> Self {
        Self {
            side: ManeuverSide::Front,
            kind: ManeuverType::None,
            strength: 0.0,
        }
    }
}

/// Per-term and group weights handed to the adversarial optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeightVector {
    pub w_collision_point: f64,
    pub w_side_impact: f64,
    pub w_ttc: f64,
    pub w_lateral: f64,
    pub w_yaw: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    /// Weight of an injected behavior prior; 0 disables it.
    pub w_new: f64,
}

impl Default for LossWeightVector {
    fn default() -> Self {
        Self {
            w_collision_point: 1.0,
            w_side_impact: 1.0,
            w_ttc: 1.0,
            w_lateral: 1.0,
            w_yaw: 1.0,
            alpha1: 1.0,
            alpha2: 1.0,
            alpha3: 1.0,
            w_new: 0.0,
        }
    }
}

impl LossWeightVector {
    fn components(&self) -> [f64; 9] {
        [
            self.w_collision_point,
            self.w_side_impact,
            self.w_ttc,
            self.w_lateral,
            self.w_yaw,
            self.alpha1,
            self.alpha2,
            self.alpha3,
            self.w_new,
        ]
    }

    pub fn validate(&self) -> Result<(), ControllerError> {
        let c = self.components();
        if c.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(ControllerError::InvalidWeights(
                "weights must be finite and non-negative".into(),
            ));
        }
        if c.iter().all(|v| *v == 0.0) {
            return Err(ControllerError::InvalidWeights(
                "at least one weight must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceSource {
    RuleEngine,
    Llm,
}

/// Why the controller chose what it chose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub steps: Vec<String>,
    pub confidence: f64,
    pub source: TraceSource,
}

impl ReasoningTrace {
    pub fn validate(&self) -> Result<(), ControllerError> {
        if !self.confidence.is_finite() || !(0.0..=1.0).contains(&self.confidence) {
            return Err(ControllerError::ParseRejected {
                reason: format!("confidence {} outside [0,1]", self.confidence),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarEntry {
    pub maneuver: ManeuverType,
    pub summary: String,
    pub weights: LossWeightVector,
}

/// Few-shot {scenario, weights} exemplars used to prompt the LLM and to
/// sanity-check its answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarLibrary {
    pub entries: Vec<ExemplarEntry>,
}

impl ExemplarLibrary {
    /// Must cover every maneuver type at least once.
    pub fn validate(&self) -> Result<(), ControllerError> {
        for kind in ManeuverType::ALL {
            if !self.entries.iter().any(|e| e.maneuver == kind) {
                return Err(ControllerError::MissingExemplar(kind));
            }
        }
        for e in &self.entries {
            e.weights.validate()?;
        }
        Ok(())
    }

    pub fn for_maneuver(&self, kind: ManeuverType) -> Option<&ExemplarEntry> {
        self.entries.iter().find(|e| e.maneuver == kind)
    }

    /// One curated exemplar per maneuver type.
    pub fn builtin() -> Self {
        let w = |cp: f64, si: f64, ttc: f64, lat: f64, yaw: f64| LossWeightVector {
            w_collision_point: cp,
            w_side_impact: si,
            w_ttc: ttc,
            w_lateral: lat,
            w_yaw: yaw,
            ..LossWeightVector::default()
        };
        let entry = |maneuver, summary: &str, weights| ExemplarEntry {
            maneuver,
            summary: summary.to_string(),
            weights,
        };
        Self {
            entries: vec![
                entry(
                    ManeuverType::CutIn,
                    "adjacent-lane vehicle merges 8 m ahead of the ego at a 1.1 s headway, \
                     lateral gap closing from 3.5 m to 0.4 m over two seconds",
                    w(1.0, 3.0, 3.0, 4.0, 2.0),
                ),
                entry(
                    ManeuverType::SuddenBrake,
                    "lead vehicle brakes at 6 m/s^2 from 25 m/s while the ego follows at a \
                     1.4 s headway in the same lane",
                    w(3.0, 1.0, 4.0, 1.0, 1.0),
                ),
                entry(
                    ManeuverType::UnsafeMerge,
                    "ramp vehicle forces into a 15 m gap between two mainline vehicles \
                     moving 8 m/s faster",
                    w(1.5, 2.0, 2.5, 3.0, 1.0),
                ),
                entry(
                    ManeuverType::DangerousLaneChange,
                    "vehicle swerves across a solid boundary through the ego's lane with \
                     0.6 s to lane crossing and high yaw rate",
                    w(1.0, 2.0, 2.0, 3.5, 3.0),
                ),
                entry(
                    ManeuverType::HeadOn,
                    "overtaking vehicle stays in the opposing lane, closing on the ego at \
                     the sum of both speeds with 2.1 s to contact",
                    w(3.0, 1.0, 5.0, 1.0, 1.0),
                ),
                entry(
                    ManeuverType::None,
                    "free-flow traffic, all headways above 2.5 s and no conflicts",
                    LossWeightVector::default(),
                ),
            ],
        }
    }
}

/// A predefined driving-behavior pattern the LLM can anchor its analysis on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorEntry {
    pub name: String,
    pub description: String,
    pub indicator_cues: String,
}

/// Static library of known behavior patterns, shipped with the crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorKb {
    pub entries: Vec<BehaviorEntry>,
}

impl BehaviorKb {
    pub fn builtin() -> Self {
        serde_json::from_str(include_str!("../data/behavior_kb.json"))
            .expect("bundled behavior KB is valid JSON")
    }
}

/// Scene rendered as text for the controller, alongside the numeric
/// indicators it was derived from. `numbers` is the audit trail of every
/// numeric literal printed, in print order, so narration can be checked to
/// round-trip exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneNarrative {
    pub dynamic: String,
    pub static_context: String,
    pub relational: String,
    pub indicators: IndicatorSet<f64>,
    pub numbers: Vec<f64>,
}

impl SceneNarrative {
    pub fn text(&self) -> String {
        format!(
            "{}\n\n{}\n\n{}",
            self.dynamic, self.static_context, self.relational
        )
    }
}

/// Render the scene into the three narrative sections (states, map,
/// interactions) plus the given indicator set. Deterministic: agents in
/// scene order, numbers printed with their exact shortest representation.
pub fn describe_scene<F: Scalar>(
    scene: &Scene<F>,
    indicators: &IndicatorSet<F>,
) -> SceneNarrative {
    let t = scene.last_history_step();
    let mut numbers = Vec::new();
    let num = |v: f64, numbers: &mut Vec<f64>| -> String {
        numbers.push(v);
        format!("{v:?}")
    };

    let mut dynamic = String::from("Dynamic state at the last observed step:\n");
    for (idx, tr) in scene.agents.iter().enumerate() {
        let s = tr.state(t).expect("scene validated");
        let tag = if idx == scene.ego_index() { " (ego)" } else { "" };
        let _ = writeln!(
            dynamic,
            "agent {}{}: position ({}, {}) m, velocity ({}, {}) m/s, speed {} m/s, \
             heading {} rad, footprint {} m by {} m",
            tr.agent_id,
            tag,
            num(s.position.x.as_f64(), &mut numbers),
            num(s.position.y.as_f64(), &mut numbers),
            num(s.velocity.x.as_f64(), &mut numbers),
            num(s.velocity.y.as_f64(), &mut numbers),
            num(s.speed().as_f64(), &mut numbers),
            num(s.heading.as_f64(), &mut numbers),
            num(s.length.as_f64(), &mut numbers),
            num(s.width.as_f64(), &mut numbers),
        );
    }

    let mut static_context = String::from("Static context:\n");
    let grid = &scene.map.grid;
    let (rows, cols) = grid.shape();
    let drivable =
        grid.drivable_area.count_ones() as f64 / (rows.max(1) * cols.max(1)) as f64;
    let _ = writeln!(
        static_context,
        "map {} with {} lane(s), drivable fraction {}",
        scene.map.map_id,
        scene.map.lanes.len(),
        num(drivable, &mut numbers),
    );
    for lane in &scene.map.lanes {
        let a = lane.centerline.first().expect("validated lane");
        let b = lane.centerline.last().expect("validated lane");
        let _ = writeln!(
            static_context,
            "lane {} ({:?} boundary): centerline from ({}, {}) to ({}, {})",
            lane.lane_id,
            lane.boundary_kind,
            num(a.x.as_f64(), &mut numbers),
            num(a.y.as_f64(), &mut numbers),
            num(b.x.as_f64(), &mut numbers),
            num(b.y.as_f64(), &mut numbers),
        );
    }

    let mut relational = String::from("Relational cues:\n");
    let ego_state = scene.ego().state(t).expect("scene validated");
    let graph = build_scene_graph(scene, t).expect("scene validated");
    for (idx, tr) in scene.agents.iter().enumerate() {
        if idx == scene.ego_index() {
            continue;
        }
        let s = tr.state(t).expect("scene validated");
        let rel = relative_kinematics(ego_state, s);
        let conflict = graph
            .edges
            .iter()
            .find(|e| e.from == scene.ego_index() && e.to == idx)
            .map(|e| e.features[3] > F::cast(0.5))
            .unwrap_or(false);
        let _ = writeln!(
            relational,
            "ego to agent {}: footprint gap {} m, closing speed {} m/s, lateral offset {} m, \
             bearing {} rad, path conflict within 3 s: {}",
            tr.agent_id,
            num(rel.gap.as_f64(), &mut numbers),
            num(rel.closing_speed.as_f64(), &mut numbers),
            num(rel.lateral_offset.as_f64(), &mut numbers),
            num(rel.bearing.as_f64(), &mut numbers),
            if conflict { "yes" } else { "no" },
        );
    }
    let ind = indicators.to_f64();
    let time_field = |v: TimeToEvent<f64>, numbers: &mut Vec<f64>| match v {
        TimeToEvent::Finite(x) => format!("{} s", num(x, numbers)),
        TimeToEvent::Unbounded => "unbounded".to_string(),
    };
    let _ = writeln!(
        relational,
        "primary interaction indicators: ttc {}, thw {}, tlc {}, min distance {} m, \
         lateral gap {} m",
        time_field(ind.ttc, &mut numbers),
        time_field(ind.thw, &mut numbers),
        time_field(ind.tlc, &mut numbers),
        num(ind.min_distance, &mut numbers),
        num(ind.lateral_gap, &mut numbers),
    );

    SceneNarrative {
        dynamic,
        static_context,
        relational,
        indicators: ind,
        numbers,
    }
}

/// Deterministic weight assignment mirroring the written policy: boost the
/// TTC penalty when the target TTC is urgent, the lateral penalty when the
/// target gap is narrow, and the contact terms appropriate to the maneuver.
pub fn rule_based_weights<F: Scalar>(
    target: &RiskTarget<F>,
    directive: &ManeuverDirective,
) -> (LossWeightVector, ReasoningTrace) {
    let mut w = LossWeightVector::default();
    let mut steps = Vec::new();

    if let Some(ttc) = target.ttc_star.finite() {
        let ttc = ttc.as_f64();
        if ttc < T_SAFE_S {
            let m = 1.0 + (1.0 - ttc / T_SAFE_S) * 5.0;
            w.w_ttc *= m;
            steps.push(format!(
                "target ttc {ttc:?} s is under the {T_SAFE_S:?} s safety margin: w_ttc scaled by {m:?}"
            ));
        }
    }
    let d_lat = target.d_lat_star.as_f64();
    if d_lat < 1.0 {
        let m = 1.0 + (1.0 - d_lat) * 5.0;
        w.w_lateral *= m;
        steps.push(format!(
            "target lateral gap {d_lat:?} m is under 1 m: w_lateral scaled by {m:?}"
        ));
    }
    match directive.kind {
        ManeuverType::CutIn => {
            w.w_side_impact *= 3.0;
            steps.push("cut-in maneuver: w_side_impact boosted x3".to_string());
        }
        ManeuverType::SuddenBrake | ManeuverType::HeadOn => {
            w.w_collision_point *= 3.0;
            steps.push("longitudinal-contact maneuver: w_collision_point boosted x3".to_string());
        }
        _ => {}
    }
    if steps.is_empty() {
        steps.push("no rule fired: neutral weights".to_string());
    }
    (
        w,
        ReasoningTrace {
            steps,
            confidence: 1.0,
            source: TraceSource::RuleEngine,
        },
    )
}

/// Connection parameters for the external LLM endpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct EndpointConfig {
    pub url: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub model: String,
}

impl EndpointConfig {
    /// Read RISKFORGE_LLM_URL / RISKFORGE_LLM_KEY / RISKFORGE_LLM_TIMEOUT_MS
    /// (and optionally RISKFORGE_LLM_MODEL) from the environment.
    pub fn from_env() -> Result<Self, ControllerError> {
        let url = std::env::var("RISKFORGE_LLM_URL").map_err(|_| ControllerError::LlmNotConfigured)?;
        let timeout_ms = std::env::var("RISKFORGE_LLM_TIMEOUT_MS")
            .ok()
            .and_then(|v| v.parse::<u64>().ok())
            .unwrap_or(20_000);
        Ok(Self {
            url,
            api_key: std::env::var("RISKFORGE_LLM_KEY").ok(),
            timeout: Duration::from_millis(timeout_ms),
            model: std::env::var("RISKFORGE_LLM_MODEL")
                .unwrap_or_else(|_| "gpt-4o-mini".to_string()),
        })
    }
}

/// The JSON shape the endpoint is asked to produce.
const OUTPUT_SCHEMA: &str = r#"{"side": "left|right|front|rear", "type": "cut_in|sudden_brake|unsafe_merge|dangerous_lane_change|head_on|none", "strength": <0..1>, "weights": {"w_collision_point": <real>, "w_side_impact": <real>, "w_ttc": <real>, "w_lateral": <real>, "w_yaw": <real>, "alpha1": <real>, "alpha2": <real>, "alpha3": <real>, "w_new": <real>}, "confidence": <0..1>}"#;

fn build_prompt(
    narrative: &SceneNarrative,
    kb: &BehaviorKb,
    exemplars: &ExemplarLibrary,
) -> String {
    let mut user = String::new();
    let _ = writeln!(user, "Scene description:\n{}", narrative.text());
    let _ = writeln!(user, "\nKnown behavior patterns:");
    for e in &kb.entries {
        let _ = writeln!(user, "- {}: {} Cues: {}", e.name, e.description, e.indicator_cues);
    }
    let _ = writeln!(user, "\nWeighting exemplars:");
    for e in &exemplars.entries {
        let _ = writeln!(
            user,
            "- maneuver {:?}: {} -> {}",
            e.maneuver,
            e.summary,
            serde_json::to_string(&e.weights).expect("weights serialize"),
        );
    }
    let _ = writeln!(
        user,
        "\nAnalyze the scene step by step: identify the riskiest interaction, decide which \
         maneuver an adversarial agent should perform, from which side, and how aggressively; \
         then assign loss weights. Reply with exactly one JSON object of the form:\n{OUTPUT_SCHEMA}"
    );
    user
}

/// POST the narrative, behavior KB, and exemplars to the configured
/// chat-completions style endpoint; return the raw text to be parsed.
pub fn query_llm(
    narrative: &SceneNarrative,
    kb: &BehaviorKb,
    exemplars: &ExemplarLibrary,
    cfg: &EndpointConfig,
) -> Result<String, ControllerError> {
    let body = serde_json::json!({
        "model": cfg.model,
        "messages": [
            {
                "role": "system",
                "content": "You are a traffic-safety analyst generating adversarial but \
                            physically plausible maneuver directives for scenario testing."
            },
            { "role": "user", "content": build_prompt(narrative, kb, exemplars) }
        ]
    });

    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(cfg.timeout))
        .build()
        .into();
    let mut req = agent.post(&cfg.url);
    if let Some(key) = &cfg.api_key {
        req = req.header("authorization", format!("Bearer {key}"));
    }
    let mut resp = req
        .send_json(&body)
        .map_err(|e| ControllerError::EndpointUnavailable(e.to_string()))?;
    let text = resp
        .body_mut()
        .read_to_string()
        .map_err(|e| ControllerError::EndpointUnavailable(e.to_string()))?;

    // Chat-completions responses wrap the text; tolerate bare payloads too.
    if let Ok(v) = serde_json::from_str::<serde_json::Value>(&text) {
        if let Some(content) = v
            .pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
        {
            return Ok(content.to_string());
        }
    }
    Ok(text)
}

/// Scan for the first balanced `{…}` substring that parses as a JSON object.
fn first_json_object(text: &str) -> Option<&str> {
    let bytes = text.as_bytes();
    let mut start = None;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate() {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' if start.is_some() => in_string = true,
            b'{' => {
                if start.is_none() {
                    start = Some(i);
                }
                depth += 1;
            }
            b'}' if start.is_some() => {
                depth -= 1;
                if depth == 0 {
                    let s = start.take().expect("start set");
                    let candidate = &text[s..=i];
                    if serde_json::from_str::<serde_json::Value>(candidate)
                        .map(|v| v.is_object())
                        .unwrap_or(false)
                    {
                        return Some(candidate);
                    }
                    // keep scanning after a non-JSON balanced blob
                }
            }
            _ => {}
        }
    }
    None
}

fn reject(reason: impl Into<String>) -> ControllerError {
    ControllerError::ParseRejected {
        reason: reason.into(),
    }
}

fn weight_field(
    obj: &serde_json::Map<String, serde_json::Value>,
    key: &str,
    default: f64,
) -> Result<f64, ControllerError> {
    match obj.get(key) {
        None => Ok(default),
        Some(v) => {
            let x = v
                .as_f64()
                .ok_or_else(|| reject(format!("weight {key} is not a number")))?;
            if !x.is_finite() || x < 0.0 {
                return Err(reject(format!("weight {key} = {x} is negative or non-finite")));
            }
            Ok(x)
        }
    }
}

/// Extract and validate the first JSON object in free-form model output.
/// Unknown fields are ignored; missing individual weights fall back to the
/// neutral defaults.
pub fn parse_directive_and_weights(
    text: &str,
) -> Result<(ManeuverDirective, LossWeightVector, f64), ControllerError> {
    let blob = first_json_object(text).ok_or_else(|| reject("no JSON object in response"))?;
    let v: serde_json::Value = serde_json::from_str(blob).expect("pre-validated JSON");
    let obj = v.as_object().expect("pre-validated object");

    let side: ManeuverSide = serde_json::from_value(
        obj.get("side").cloned().ok_or_else(|| reject("missing key: side"))?,
    )
    .map_err(|e| reject(format!("side: {e}")))?;
    let kind: ManeuverType = serde_json::from_value(
        obj.get("type").cloned().ok_or_else(|| reject("missing key: type"))?,
    )
    .map_err(|e| reject(format!("type: {e}")))?;
    let strength = obj
        .get("strength")
        .and_then(|s| s.as_f64())
        .ok_or_else(|| reject("missing or non-numeric strength"))?;
    let directive = ManeuverDirective::new(side, kind, strength)
        .map_err(|e| reject(format!("directive: {e}")))?;

    let weights_obj = obj
        .get("weights")
        .and_then(|w| w.as_object())
        .ok_or_else(|| reject("missing key: weights"))?;
    let weights = LossWeightVector {
        w_collision_point: weight_field(weights_obj, "w_collision_point", 1.0)?,
        w_side_impact: weight_field(weights_obj, "w_side_impact", 1.0)?,
        w_ttc: weight_field(weights_obj, "w_ttc", 1.0)?,
        w_lateral: weight_field(weights_obj, "w_lateral", 1.0)?,
        w_yaw: weight_field(weights_obj, "w_yaw", 1.0)?,
        alpha1: weight_field(weights_obj, "alpha1", 1.0)?,
        alpha2: weight_field(weights_obj, "alpha2", 1.0)?,
        alpha3: weight_field(weights_obj, "alpha3", 1.0)?,
        w_new: weight_field(weights_obj, "w_new", 0.0)?,
    };
    weights
        .validate()
        .map_err(|e| reject(format!("weights: {e}")))?;

    let confidence = obj
        .get("confidence")
        .and_then(|c| c.as_f64())
        .ok_or_else(|| reject("missing or non-numeric confidence"))?;
    if !confidence.is_finite() || !(0.0..=1.0).contains(&confidence) {
        return Err(reject(format!("confidence {confidence} outside [0,1]")));
    }
    Ok((directive, weights, confidence))
}

/// Choose between the LLM's weights and the rule engine's: the LLM wins only
/// when its output parsed, cleared the confidence threshold, and satisfies
/// the weight invariants. Never fails.
pub fn select_weights(
    llm: Result<(LossWeightVector, f64), ControllerError>,
    rule: (LossWeightVector, ReasoningTrace),
    threshold: f64,
) -> (LossWeightVector, ReasoningTrace) {
    match llm {
        Ok((weights, confidence))
            if confidence >= threshold && weights.validate().is_ok() =>
        {
            (
                weights,
                ReasoningTrace {
                    steps: vec![format!(
                        "accepted llm weights at confidence {confidence:?} (threshold {threshold:?})"
                    )],
                    confidence,
                    source: TraceSource::Llm,
                },
            )
        }
        Ok((_, confidence)) => {
            let (w, mut trace) = rule;
            trace.steps.push(format!(
                "llm confidence {confidence:?} under threshold {threshold:?}: using rule engine"
            ));
            (w, trace)
        }
        Err(e) => {
            let (w, mut trace) = rule;
            trace.steps.push(format!("llm path failed ({e}): using rule engine"));
            (w, trace)
        }
    }
}

/// Default confidence gate for accepting LLM output.
pub const CONFIDENCE_THRESHOLD: f64 = 0.5;

#[cfg(test)]
mod type_tests {
    use super::*;

    #[test]
    fn directive_legality() {
        assert!(ManeuverDirective::new(ManeuverSide::Left, ManeuverType::CutIn, 0.5).is_ok());
        assert!(matches!(
            ManeuverDirective::new(ManeuverSide::Left, ManeuverType::SuddenBrake, 0.5),
            Err(ControllerError::IllegalCombination { .. })
        ));
        assert!(
            ManeuverDirective::new(ManeuverSide::Front, ManeuverType::SuddenBrake, 0.5).is_ok()
        );
        assert!(matches!(
            ManeuverDirective::new(ManeuverSide::Left, ManeuverType::CutIn, 1.2),
            Err(ControllerError::InvalidStrength(_))
        ));
        assert!(matches!(
            ManeuverDirective::new(ManeuverSide::Left, ManeuverType::CutIn, f64::NAN),
            Err(ControllerError::InvalidStrength(_))
        ));
    }

    #[test]
    fn weight_vector_validation() {
        assert!(LossWeightVector::default().validate().is_ok());
        let zeroed = LossWeightVector {
            w_collision_point: 0.0,
            w_side_impact: 0.0,
            w_ttc: 0.0,
            w_lateral: 0.0,
            w_yaw: 0.0,
            alpha1: 0.0,
            alpha2: 0.0,
            alpha3: 0.0,
            w_new: 0.0,
        };
        assert!(zeroed.validate().is_err());
        let negative = LossWeightVector {
            w_ttc: -1.0,
            ..LossWeightVector::default()
        };
        assert!(negative.validate().is_err());
    }

    #[test]
    fn directive_serializes_with_type_key() {
        let d = ManeuverDirective::new(ManeuverSide::Right, ManeuverType::CutIn, 0.9).unwrap();
        let json = serde_json::to_string(&d).unwrap();
        assert!(json.contains("\"type\":\"cut_in\""), "{json}");
        assert!(json.contains("\"side\":\"right\""), "{json}");
        let back: ManeuverDirective = serde_json::from_str(&json).unwrap();
        assert_eq!(back, d);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{Pose, Vec2};
    use crate::risk_field::indicators_for_states;
    use crate::scene::{
        rasterize_map, AgentState, BoundaryKind, LaneGeometry, SceneMap, Trajectory,
    };
    use proptest::prelude::*;
    use std::io::{Read as IoRead, Write as IoWrite};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};
    use std::thread;
    use std::time::Instant;

    fn straight_lane(half_width: f64) -> LaneGeometry<f64> {
        LaneGeometry {
            lane_id: 0,
            centerline: vec![Vec2::new(-210.0, 0.0), Vec2::new(210.0, 0.0)],
            left_boundary: vec![Vec2::new(-210.0, half_width), Vec2::new(210.0, half_width)],
            right_boundary: vec![
                Vec2::new(-210.0, -half_width),
                Vec2::new(210.0, -half_width),
            ],
            boundary_kind: BoundaryKind::Dashed,
        }
    }

    fn wide_map() -> Arc<SceneMap<f64>> {
        let lane = straight_lane(12.0);
        let grid = rasterize_map(
            &[lane.clone()],
            Pose::new(Vec2::zero(), 0.0),
            420.0,
            100.0,
            2.0,
        )
        .unwrap();
        Arc::new(SceneMap {
            map_id: 7,
            lanes: vec![lane],
            grid,
        })
    }

    fn cv_traj(id: i64, start: Vec2<f64>, vel: Vec2<f64>, heading: f64) -> Trajectory<f64> {
        let dt = 0.2;
        let states = (0..12)
            .map(|k| {
                AgentState::new(id, start + vel * (k as f64 * dt), vel, heading, 4.5, 2.0)
                    .unwrap()
            })
            .collect();
        Trajectory::new(id, 5.0, 0.0, states, 0.5).unwrap()
    }

    fn scene_with(agents: Vec<Trajectory<f64>>) -> Scene<f64> {
        Scene::new(agents, wide_map(), 1, 12, 0).unwrap()
    }

    /// Two stationary cars 12.0 m apart bumper to bumper, plus the matching
    /// indicator set.
    fn two_car_scene() -> (Scene<f64>, IndicatorSet<f64>) {
        let ego = cv_traj(1, Vec2::new(0.0, 0.0), Vec2::zero(), 0.0);
        let other = cv_traj(2, Vec2::new(16.5, 0.0), Vec2::zero(), 0.0);
        let scene = scene_with(vec![ego, other]);
        let t = scene.last_history_step();
        let e = *scene.agents[0].state(t).unwrap();
        let o = *scene.agents[1].state(t).unwrap();
        let ind = indicators_for_states(&e, &o, &scene.map.lanes[0]);
        (scene, ind)
    }

    fn neutral_indicators() -> IndicatorSet<f64> {
        IndicatorSet {
            ttc: TimeToEvent::Unbounded,
            thw: TimeToEvent::Unbounded,
            tlc: TimeToEvent::Unbounded,
            min_distance: 100.0,
            lateral_gap: 3.5,
        }
    }

    fn neutral_target() -> RiskTarget<f64> {
        RiskTarget {
            p_star: Vec2::new(0.0, 0.0),
            d_lat_star: 3.5,
            ttc_star: TimeToEvent::Unbounded,
            kappa_star: 0.0,
        }
    }

    // ---- narrative ----

    #[test]
    fn narrative_mentions_exact_gap_and_sections() {
        let (scene, ind) = two_car_scene();
        let n = describe_scene(&scene, &ind);
        assert!(
            n.relational.contains("ego to agent 2: footprint gap 12.0 m"),
            "{}",
            n.relational
        );
        assert!(n.dynamic.contains("agent 1 (ego)"), "{}", n.dynamic);
        assert!(n.dynamic.contains("agent 2:"), "{}", n.dynamic);
        assert!(n.static_context.contains("map 7 with 1 lane(s)"));
        // both cars stationary: every time-based indicator is open-ended
        assert!(n.relational.contains("ttc unbounded"), "{}", n.relational);
        assert!(n.relational.contains("min distance 12.0 m"), "{}", n.relational);
        let text = n.text();
        assert!(text.contains("Dynamic state") && text.contains("Static context"));
    }

    #[test]
    fn narrative_single_agent_has_no_relational_rows() {
        let scene = scene_with(vec![cv_traj(1, Vec2::zero(), Vec2::zero(), 0.0)]);
        let n = describe_scene(&scene, &neutral_indicators());
        assert!(!n.relational.contains("ego to agent"), "{}", n.relational);
        assert_eq!(n.dynamic.matches("agent ").count(), 1, "{}", n.dynamic);
    }

    #[test]
    fn narrative_is_deterministic() {
        let (scene, ind) = two_car_scene();
        let a = describe_scene(&scene, &ind);
        let b = describe_scene(&scene, &ind);
        assert_eq!(a.text(), b.text());
        assert_eq!(a.numbers, b.numbers);
    }

    /// Scan for `token` after `cursor`, requiring that the match is not
    /// embedded in a longer numeric literal, and advance the cursor past it.
    fn advance_past_number(text: &str, cursor: &mut usize, v: f64) {
        let token = format!("{v:?}");
        let hay = &text[*cursor..];
        let mut from = 0usize;
        loop {
            let rel = hay[from..]
                .find(&token)
                .unwrap_or_else(|| panic!("{token} missing after position {cursor}"));
            let at = from + rel;
            let not_numeric = |b: Option<&u8>| match b {
                Some(&c) => !(c.is_ascii_digit() || c == b'.' || c == b'-'),
                None => true,
            };
            let before_ok = at == 0 || not_numeric(hay.as_bytes().get(at - 1));
            let after_ok = not_numeric(hay.as_bytes().get(at + token.len()));
            if before_ok && after_ok {
                *cursor += at + token.len();
                return;
            }
            from = at + 1;
        }
    }

    #[test]
    fn narrative_numbers_round_trip_exactly() {
        let ego = cv_traj(1, Vec2::new(-3.7, 0.25), Vec2::new(13.1, -0.2), -0.01);
        let other = cv_traj(2, Vec2::new(21.3, 3.4), Vec2::new(9.7, 0.0), 0.0);
        let scene = scene_with(vec![ego, other]);
        let t = scene.last_history_step();
        let e = *scene.agents[0].state(t).unwrap();
        let o = *scene.agents[1].state(t).unwrap();
        let ind = indicators_for_states(&e, &o, &scene.map.lanes[0]);
        let n = describe_scene(&scene, &ind);
        assert!(!n.numbers.is_empty());
        let text = n.text();
        let mut cursor = 0usize;
        for &v in &n.numbers {
            advance_past_number(&text, &mut cursor, v);
            let parsed: f64 = format!("{v:?}").parse().unwrap();
            assert_eq!(parsed.to_bits(), v.to_bits(), "lossy rendering of {v:?}");
        }
    }

    // ---- rule engine ----

    #[test]
    fn neutral_target_fires_no_rule() {
        let (w, trace) = rule_based_weights(&neutral_target(), &ManeuverDirective::none());
        assert_eq!(w, LossWeightVector::default());
        assert_eq!(trace.steps, vec!["no rule fired: neutral weights".to_string()]);
        assert_eq!(trace.confidence, 1.0);
        assert_eq!(trace.source, TraceSource::RuleEngine);
    }

    #[test]
    fn urgent_ttc_target_scales_w_ttc() {
        let target = RiskTarget {
            ttc_star: TimeToEvent::Finite(0.5),
            ..neutral_target()
        };
        let (w, trace) = rule_based_weights(&target, &ManeuverDirective::none());
        // 1 + (1 - 0.5/2.0) * 5
        assert_eq!(w.w_ttc, 4.75);
        assert_eq!(w.w_lateral, 1.0);
        assert_eq!(trace.steps.len(), 1);
    }

    #[test]
    fn narrow_lateral_target_scales_w_lateral() {
        let target = RiskTarget {
            d_lat_star: 0.1,
            ..neutral_target()
        };
        let (w, _) = rule_based_weights(&target, &ManeuverDirective::none());
        assert!((w.w_lateral - 5.5).abs() < 1e-12, "{}", w.w_lateral);
        assert_eq!(w.w_ttc, 1.0);
    }

    #[test]
    fn maneuver_kind_selects_contact_term() {
        let cut_in =
            ManeuverDirective::new(ManeuverSide::Right, ManeuverType::CutIn, 0.9).unwrap();
        let (w, _) = rule_based_weights(&neutral_target(), &cut_in);
        assert_eq!(w.w_side_impact, 3.0);
        assert_eq!(w.w_collision_point, 1.0);

        let brake =
            ManeuverDirective::new(ManeuverSide::Front, ManeuverType::SuddenBrake, 0.5).unwrap();
        let (w, _) = rule_based_weights(&neutral_target(), &brake);
        assert_eq!(w.w_collision_point, 3.0);
        assert_eq!(w.w_side_impact, 1.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn tighter_ttc_target_never_relaxes_w_ttc(a in 0.01f64..6.0, b in 0.01f64..6.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let mk = |ttc| RiskTarget { ttc_star: TimeToEvent::Finite(ttc), ..neutral_target() };
            let d = ManeuverDirective::none();
            let (w_lo, _) = rule_based_weights(&mk(lo), &d);
            let (w_hi, _) = rule_based_weights(&mk(hi), &d);
            prop_assert!(w_lo.w_ttc >= w_hi.w_ttc);
            prop_assert!(w_lo.w_ttc >= 1.0 && w_lo.w_ttc <= 6.0);
        }

        #[test]
        fn narrower_lateral_target_never_relaxes_w_lateral(a in 0.0f64..2.0, b in 0.0f64..2.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let mk = |d_lat| RiskTarget { d_lat_star: d_lat, ..neutral_target() };
            let d = ManeuverDirective::none();
            let (w_lo, _) = rule_based_weights(&mk(lo), &d);
            let (w_hi, _) = rule_based_weights(&mk(hi), &d);
            prop_assert!(w_lo.w_lateral >= w_hi.w_lateral);
            prop_assert!(w_lo.w_lateral >= 1.0 && w_lo.w_lateral <= 6.0);
        }
    }

    // ---- parsing ----

    #[test]
    fn parse_accepts_prose_wrapped_json() {
        let text = "Step 1: the right-lane car is closest.\nStep 2: a cut-in is feasible.\n\
                    {\"side\": \"right\", \"type\": \"cut_in\", \"strength\": 0.9, \
                     \"weights\": {\"w_ttc\": 4.0, \"w_lateral\": 2.0}, \
                     \"confidence\": 0.9}\nDone.";
        let (d, w, c) = parse_directive_and_weights(text).unwrap();
        assert_eq!(d.side, ManeuverSide::Right);
        assert_eq!(d.kind, ManeuverType::CutIn);
        assert_eq!(d.strength, 0.9);
        assert_eq!(w.w_ttc, 4.0);
        assert_eq!(w.w_lateral, 2.0);
        assert_eq!(w.w_collision_point, 1.0);
        assert_eq!(w.w_new, 0.0);
        assert_eq!(c, 0.9);
    }

    #[test]
    fn parse_skips_balanced_non_json_blobs() {
        let text = "{not json at all} but later: {\"side\":\"left\",\"type\":\"none\",\
                    \"strength\":0.0,\"weights\":{},\"confidence\":1.0}";
        let (d, w, c) = parse_directive_and_weights(text).unwrap();
        assert_eq!(d.kind, ManeuverType::None);
        assert_eq!(w, LossWeightVector::default());
        assert_eq!(c, 1.0);
    }

    #[test]
    fn parse_tolerates_braces_inside_strings() {
        let text = "{\"side\":\"left\",\"type\":\"none\",\"strength\":0.0,\
                    \"weights\":{},\"confidence\":0.8,\"note\":\"ignore {this} blob\"}";
        let (_, _, c) = parse_directive_and_weights(text).unwrap();
        assert_eq!(c, 0.8);
    }

    fn assert_rejected(text: &str, needle: &str) {
        match parse_directive_and_weights(text) {
            Err(ControllerError::ParseRejected { reason }) => {
                assert!(reason.contains(needle), "reason {reason:?} lacks {needle:?}")
            }
            other => panic!("expected ParseRejected, got {other:?}"),
        }
    }

    #[test]
    fn parse_rejects_bad_payloads() {
        assert_rejected("no structured content here", "no JSON object");
        assert_rejected(
            "{\"side\":\"right\",\"type\":\"cut_in\",\"strength\":1.7,\
             \"weights\":{},\"confidence\":0.9}",
            "directive",
        );
        assert_rejected(
            "{\"side\":\"right\",\"type\":\"teleport\",\"strength\":0.5,\
             \"weights\":{},\"confidence\":0.9}",
            "type",
        );
        assert_rejected(
            "{\"side\":\"left\",\"type\":\"sudden_brake\",\"strength\":0.5,\
             \"weights\":{},\"confidence\":0.9}",
            "directive",
        );
        assert_rejected(
            "{\"side\":\"right\",\"type\":\"cut_in\",\"strength\":0.5,\
             \"weights\":{\"w_ttc\":-2.0},\"confidence\":0.9}",
            "w_ttc",
        );
        assert_rejected(
            "{\"side\":\"right\",\"type\":\"cut_in\",\"strength\":0.5,\
             \"weights\":{},\"confidence\":1.4}",
            "confidence",
        );
        assert_rejected(
            "{\"side\":\"right\",\"type\":\"cut_in\",\"strength\":0.5,\
             \"weights\":{}}",
            "confidence",
        );
        assert_rejected(
            "{\"side\":\"right\",\"type\":\"cut_in\",\"strength\":0.5,\
             \"confidence\":0.9}",
            "weights",
        );
    }

    // ---- selection ----

    #[test]
    fn confident_llm_output_wins() {
        let llm_w = LossWeightVector {
            w_ttc: 4.0,
            ..LossWeightVector::default()
        };
        let (w, trace) = select_weights(
            Ok((llm_w.clone(), 0.9)),
            rule_based_weights(&neutral_target(), &ManeuverDirective::none()),
            CONFIDENCE_THRESHOLD,
        );
        assert_eq!(w, llm_w);
        assert_eq!(trace.source, TraceSource::Llm);
        assert_eq!(trace.confidence, 0.9);
    }

    #[test]
    fn low_confidence_falls_back_to_rules() {
        let llm_w = LossWeightVector {
            w_ttc: 4.0,
            ..LossWeightVector::default()
        };
        let (w, trace) = select_weights(
            Ok((llm_w, 0.4)),
            rule_based_weights(&neutral_target(), &ManeuverDirective::none()),
            CONFIDENCE_THRESHOLD,
        );
        assert_eq!(w, LossWeightVector::default());
        assert_eq!(trace.source, TraceSource::RuleEngine);
        assert!(trace.steps.last().unwrap().contains("under threshold"));
    }

    #[test]
    fn llm_failure_falls_back_to_rules() {
        let (w, trace) = select_weights(
            Err(ControllerError::ParseRejected {
                reason: "no JSON object in response".into(),
            }),
            rule_based_weights(&neutral_target(), &ManeuverDirective::none()),
            CONFIDENCE_THRESHOLD,
        );
        assert_eq!(w, LossWeightVector::default());
        assert_eq!(trace.source, TraceSource::RuleEngine);
        assert!(trace.steps.last().unwrap().contains("using rule engine"));
    }

    // ---- built-in knowledge ----

    #[test]
    fn exemplar_library_covers_every_maneuver() {
        let lib = ExemplarLibrary::builtin();
        lib.validate().unwrap();
        for kind in ManeuverType::ALL {
            let e = lib.for_maneuver(kind).unwrap();
            assert!(!e.summary.is_empty());
            e.weights.validate().unwrap();
        }
    }

    #[test]
    fn behavior_kb_is_well_formed() {
        let kb = BehaviorKb::builtin();
        assert!(kb.entries.len() >= 10, "{}", kb.entries.len());
        for e in &kb.entries {
            assert!(!e.name.is_empty() && !e.description.is_empty() && !e.indicator_cues.is_empty());
        }
    }

    // ---- endpoint plumbing ----

    fn find_subslice(hay: &[u8], needle: &[u8]) -> Option<usize> {
        hay.windows(needle.len()).position(|w| w == needle)
    }

    /// One-shot HTTP/1.1 server: reads a full request, optionally stalls,
    /// then replies with `body` and closes.
    fn spawn_stub(
        body: String,
        delay: Duration,
        captured: Arc<Mutex<String>>,
    ) -> (String, thread::JoinHandle<()>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = thread::spawn(move || {
            let (mut stream, _) = match listener.accept() {
                Ok(conn) => conn,
                Err(_) => return,
            };
            let mut buf = Vec::new();
            let mut tmp = [0u8; 4096];
            loop {
                let n = match stream.read(&mut tmp) {
                    Ok(0) | Err(_) => break,
                    Ok(n) => n,
                };
                buf.extend_from_slice(&tmp[..n]);
                if let Some(he) = find_subslice(&buf, b"\r\n\r\n") {
                    let headers = String::from_utf8_lossy(&buf[..he]).to_lowercase();
                    let clen = headers
                        .lines()
                        .find_map(|l| l.strip_prefix("content-length:"))
                        .and_then(|v| v.trim().parse::<usize>().ok())
                        .unwrap_or(0);
                    if buf.len() >= he + 4 + clen {
                        break;
                    }
                }
            }
            *captured.lock().unwrap() = String::from_utf8_lossy(&buf).to_string();
            thread::sleep(delay);
            let resp = format!(
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\n\
                 content-length: {}\r\nconnection: close\r\n\r\n{}",
                body.len(),
                body
            );
            let _ = stream.write_all(resp.as_bytes());
        });
        (format!("http://{addr}/v1/chat/completions"), handle)
    }

    fn endpoint(url: String, timeout_ms: u64) -> EndpointConfig {
        EndpointConfig {
            url,
            api_key: Some("test-key".to_string()),
            timeout: Duration::from_millis(timeout_ms),
            model: "stub-model".to_string(),
        }
    }

    #[test]
    fn query_round_trip_parses_downstream_and_sends_knowledge() {
        let content = "The right-lane car should cut in hard. \
                       {\"side\": \"right\", \"type\": \"cut_in\", \"strength\": 0.9, \
                        \"weights\": {\"w_ttc\": 4.0}, \"confidence\": 0.9}";
        let body = serde_json::json!({
            "choices": [{ "message": { "role": "assistant", "content": content } }]
        })
        .to_string();
        let captured = Arc::new(Mutex::new(String::new()));
        let (url, handle) = spawn_stub(body, Duration::ZERO, captured.clone());

        let (scene, ind) = two_car_scene();
        let narrative = describe_scene(&scene, &ind);
        let kb = BehaviorKb::builtin();
        let lib = ExemplarLibrary::builtin();
        let text = query_llm(&narrative, &kb, &lib, &endpoint(url, 5_000)).unwrap();
        handle.join().unwrap();

        assert_eq!(text, content);
        let (d, w, c) = parse_directive_and_weights(&text).unwrap();
        assert_eq!(d.side, ManeuverSide::Right);
        assert_eq!(d.kind, ManeuverType::CutIn);
        assert_eq!(w.w_ttc, 4.0);
        assert_eq!(c, 0.9);

        let request = captured.lock().unwrap().clone();
        assert!(request.contains("authorization: Bearer test-key") ||
                request.contains("Authorization: Bearer test-key"), "{request}");
        assert!(request.contains("stub-model"));
        assert!(request.contains("footprint gap 12.0 m"));
        for e in &kb.entries {
            assert!(request.contains(&e.name), "kb entry {} not sent", e.name);
        }
        for e in &lib.entries {
            assert!(request.contains(&e.summary), "exemplar for {:?} not sent", e.maneuver);
        }
    }

    #[test]
    fn query_returns_raw_body_without_chat_wrapper() {
        let captured = Arc::new(Mutex::new(String::new()));
        let (url, handle) =
            spawn_stub("no chat wrapper here".to_string(), Duration::ZERO, captured);
        let (scene, ind) = two_car_scene();
        let narrative = describe_scene(&scene, &ind);
        let text = query_llm(
            &narrative,
            &BehaviorKb::builtin(),
            &ExemplarLibrary::builtin(),
            &endpoint(url, 5_000),
        )
        .unwrap();
        handle.join().unwrap();
        assert_eq!(text, "no chat wrapper here");
    }

    #[test]
    fn unreachable_endpoint_reports_unavailable() {
        let port = {
            let l = TcpListener::bind("127.0.0.1:0").unwrap();
            l.local_addr().unwrap().port()
        };
        let (scene, ind) = two_car_scene();
        let narrative = describe_scene(&scene, &ind);
        let err = query_llm(
            &narrative,
            &BehaviorKb::builtin(),
            &ExemplarLibrary::builtin(),
            &endpoint(format!("http://127.0.0.1:{port}/v1/chat/completions"), 2_000),
        )
        .unwrap_err();
        assert!(matches!(err, ControllerError::EndpointUnavailable(_)), "{err:?}");
    }

    #[test]
    fn stalled_endpoint_hits_the_timeout() {
        let captured = Arc::new(Mutex::new(String::new()));
        let (url, handle) = spawn_stub(
            "{}".to_string(),
            Duration::from_millis(1_500),
            captured,
        );
        let (scene, ind) = two_car_scene();
        let narrative = describe_scene(&scene, &ind);
        let start = Instant::now();
        let err = query_llm(
            &narrative,
            &BehaviorKb::builtin(),
            &ExemplarLibrary::builtin(),
            &endpoint(url, 200),
        )
        .unwrap_err();
        assert!(matches!(err, ControllerError::EndpointUnavailable(_)), "{err:?}");
        assert!(start.elapsed() < Duration::from_secs(3), "{:?}", start.elapsed());
        handle.join().unwrap();
    }

    #[test]
    fn endpoint_config_reads_environment() {
        std::env::remove_var("RISKFORGE_LLM_URL");
        assert!(matches!(
            EndpointConfig::from_env(),
            Err(ControllerError::LlmNotConfigured)
        ));

        std::env::set_var("RISKFORGE_LLM_URL", "http://example.test/v1");
        std::env::set_var("RISKFORGE_LLM_KEY", "shhh");
        std::env::set_var("RISKFORGE_LLM_TIMEOUT_MS", "1234");
        let cfg = EndpointConfig::from_env().unwrap();
        assert_eq!(cfg.url, "http://example.test/v1");
        assert_eq!(cfg.api_key.as_deref(), Some("shhh"));
        assert_eq!(cfg.timeout, Duration::from_millis(1234));
        assert_eq!(cfg.model, "gpt-4o-mini");
        std::env::remove_var("RISKFORGE_LLM_URL");
        std::env::remove_var("RISKFORGE_LLM_KEY");
        std::env::remove_var("RISKFORGE_LLM_TIMEOUT_MS");
    }
}
