//! Consistency probing: answer the question, generate `k` questions
//! conditioned on that answer, answer each of them, and count agreement.

use futures::stream::{self, Stream, StreamExt};
use futures::future::join_all;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendClient, BackendError, DEFAULT_PARALLELISM};
use crate::digest::hash_u64;
use crate::domain::{
    ConsistencyResult, DomainError, EvaluationRecord, Prediction, Rephrasing,
    VisualQuestionInstance,
};
use crate::metrics::{vqa_soft_score, MetricsError};

pub const DEFAULT_K: u32 = 5;
pub const DEFAULT_TOP_P: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub k: u32,
    pub top_p: f64,
    pub base_seed: u64,
    pub parallelism: usize,
    pub fail_fast: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            top_p: DEFAULT_TOP_P,
            base_seed: 0,
            parallelism: DEFAULT_PARALLELISM,
            fail_fast: false,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<(), ProbeError> {
        if self.k == 0 {
            return Err(ProbeError::Config("k must be at least 1".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(ProbeError::Config(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if self.parallelism == 0 {
            return Err(ProbeError::Config("parallelism must be at least 1".into()));
        }
        Ok(())
    }
}

/// `base_seed XOR hash(instance_id)`: independent of position in the dataset.
pub fn derive_seed(base_seed: u64, instance_id: &str) -> u64 {
    base_seed ^ hash_u64(&[instance_id.as_bytes()])
}

/// Some rephrased questions could not be answered. Carries everything that
/// did complete; consistency is deliberately not computed over fewer than `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialProbe {
    pub instance_id: String,
    pub prediction: Prediction,
    pub rephrasings: Vec<Rephrasing>,
    /// Index-aligned with `rephrasings`; `None` where the call failed.
    pub answers: Vec<Option<Prediction>>,
    pub errors: Vec<(u32, BackendError)>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProbeError {
    #[error("invalid probe config: {0}")]
    Config(String),
    #[error("no instances to probe")]
    NoInstances,
    #[error("instance {instance_id}: {source}")]
    InvalidInstance {
        instance_id: String,
        source: DomainError,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("instance {}: {} of {} rephrasings failed; first: {}",
        .0.instance_id, .0.errors.len(), .0.rephrasings.len(),
        .0.errors.first().map(|e| e.1.to_string()).unwrap_or_default())]
    Partial(Box<PartialProbe>),
    #[error("scoring: {0}")]
    Metrics(#[from] MetricsError),
}

impl ProbeError {
    /// Errors after which no further instance should be attempted.
    pub fn is_fatal(&self) -> bool {
        match self {
            ProbeError::Backend(BackendError::BudgetExhausted(_)) => true,
            ProbeError::Partial(p) => p
                .errors
                .iter()
                .any(|(_, e)| matches!(e, BackendError::BudgetExhausted(_))),
            ProbeError::Config(_) | ProbeError::NoInstances => true,
            _ => false,
        }
    }
}

/// Runs the probe for one instance with an explicit generation seed.
pub async fn probe_consistency(
    instance: &VisualQuestionInstance,
    vqa: &BackendClient,
    vqg: &BackendClient,
    config: &ProbeConfig,
    seed: u64,
) -> Result<(Prediction, ConsistencyResult), ProbeError> {
    config.validate()?;
    let a0 = vqa
        .query_answer(&instance.image, &instance.question, &instance.candidates)
        .await?;
    let rephrasings = vqg
        .generate_rephrasings(&instance.image, &a0.answer, config.k, config.top_p, seed)
        .await?;
    let results = join_all(
        rephrasings
            .iter()
            .map(|r| vqa.query_answer(&instance.image, &r.text, &instance.candidates)),
    )
    .await;

    let mut answers = Vec::with_capacity(results.len());
    let mut errors = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(p) => answers.push(Some(p)),
            Err(e) => {
                answers.push(None);
                errors.push((i as u32, e));
            }
        }
    }
    if !errors.is_empty() {
        return Err(ProbeError::Partial(Box::new(PartialProbe {
            instance_id: instance.instance_id.clone(),
            prediction: a0,
            rephrasings,
            answers,
            errors,
        })));
    }
    let rephrased: Vec<String> = answers
        .into_iter()
        .map(|p| p.expect("no errors").answer)
        .collect();
    let consistency = ConsistencyResult::from_answers(&a0.answer, rephrasings, rephrased).map_err(
        |source| ProbeError::InvalidInstance {
            instance_id: instance.instance_id.clone(),
            source,
        },
    )?;
    Ok((a0, consistency))
}

/// Probes one instance and scores its answer against the annotations.
pub async fn probe_instance(
    instance: &VisualQuestionInstance,
    vqa: &BackendClient,
    vqg: &BackendClient,
    config: &ProbeConfig,
) -> Result<EvaluationRecord, ProbeError> {
    instance
        .validate()
        .map_err(|source| ProbeError::InvalidInstance {
            instance_id: instance.instance_id.clone(),
            source,
        })?;
    let seed = derive_seed(config.base_seed, &instance.instance_id);
    let (prediction, consistency) = probe_consistency(instance, vqa, vqg, config, seed).await?;
    let soft = vqa_soft_score(&prediction.answer, &instance.annotations)?;
    Ok(EvaluationRecord::new(
        instance.instance_id.clone(),
        prediction,
        soft,
        Some(consistency),
    ))
}

/// Probes instances concurrently (up to `config.parallelism`), yielding
/// `(input index, result)` in input order regardless of completion order.
pub fn probe_stream<'a>(
    instances: &'a [VisualQuestionInstance],
    vqa: &'a BackendClient,
    vqg: &'a BackendClient,
    config: &'a ProbeConfig,
) -> impl Stream<Item = (usize, Result<EvaluationRecord, ProbeError>)> + 'a {
    stream::iter(instances.iter().enumerate())
        .map(move |(i, inst)| async move { (i, probe_instance(inst, vqa, vqg, config).await) })
        .buffered(config.parallelism.max(1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceFailure {
    pub instance_id: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunReport {
    pub records: Vec<EvaluationRecord>,
    pub failures: Vec<InstanceFailure>,
}

/// A run stopped early, by budget exhaustion or by fail-fast. `report`
/// holds everything completed before the stop.
#[derive(Debug, Clone, PartialEq)]
pub struct RunAborted {
    pub report: RunReport,
    pub cause: ProbeError,
}

/// Probes every instance. Per-instance failures are collected in the report
/// unless `config.fail_fast` is set; budget exhaustion always aborts.
pub async fn probe_dataset(
    instances: &[VisualQuestionInstance],
    vqa: &BackendClient,
    vqg: &BackendClient,
    config: &ProbeConfig,
) -> Result<RunReport, Box<RunAborted>> {
    let abort = |report, cause| Err(Box::new(RunAborted { report, cause }));
    if instances.is_empty() {
        return abort(RunReport::default(), ProbeError::NoInstances);
    }
    if let Err(e) = config.validate() {
        return abort(RunReport::default(), e);
    }
    let mut report = RunReport::default();
    let mut results = std::pin::pin!(probe_stream(instances, vqa, vqg, config));
    while let Some((i, result)) = results.next().await {
        match result {
            Ok(r) => report.records.push(r),
            Err(e) => {
                if e.is_fatal() || config.fail_fast {
                    return abort(report, e);
                }
                report.failures.push(InstanceFailure {
                    instance_id: instances[i].instance_id.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{BackendEndpoint, InProcessTransport, RawResponse, SharedBudget};
    use crate::simbench::{handle_request, make_world, Regime, SimWorld};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn client(
        id: &str,
        budget: &SharedBudget,
        handler: impl Fn(&str, &[u8]) -> RawResponse + Send + Sync + 'static,
    ) -> BackendClient {
        let mut ep = BackendEndpoint::new("inproc://sim", id);
        ep.max_retries = 0;
        BackendClient::new(ep, Arc::new(InProcessTransport::new(handler)), budget.clone(), None)
            .unwrap()
    }

    fn sim_pair(world: Arc<SimWorld>, budget: &SharedBudget) -> (BackendClient, BackendClient) {
        let w = world.clone();
        let vqa = client("vqa", budget, move |p, b| handle_request(&w, p, b));
        let vqg = client("vqg", budget, move |p, b| handle_request(&world, p, b));
        (vqa, vqg)
    }

    fn scripted_answers(agree: &'static [bool]) -> impl Fn(&str, &[u8]) -> RawResponse {
        // Candidates are ["yes", "no"]; the original question answers "yes",
        // rephrasing j answers "yes" iff agree[j].
        move |_, body| {
            let req: serde_json::Value = serde_json::from_slice(body).unwrap();
            let q = req["question"].as_str().unwrap();
            let yes = match q.strip_prefix("r") {
                Some(j) => agree[j.parse::<usize>().unwrap()],
                None => true,
            };
            let scores = if yes { "[0.6,0.1]" } else { "[0.1,0.6]" };
            RawResponse {
                status: 200,
                body: format!("{{\"scores\":{scores}}}"),
            }
        }
    }

    fn numbered_generator(_: &str, body: &[u8]) -> RawResponse {
        let req: serde_json::Value = serde_json::from_slice(body).unwrap();
        let n = req["num_samples"].as_u64().unwrap();
        let qs: Vec<String> = (0..n).map(|j| format!("r{j}")).collect();
        RawResponse {
            status: 200,
            body: serde_json::json!({ "questions": qs }).to_string(),
        }
    }

    fn yes_no_instance() -> VisualQuestionInstance {
        VisualQuestionInstance {
            instance_id: "t/1".into(),
            image: crate::domain::ImageRef::new("img://1").unwrap(),
            question: "orig".into(),
            annotations: vec!["yes".into(); 10],
            candidates: vec!["yes".into(), "no".into()],
        }
    }

    async fn scripted(agree: &'static [bool]) -> ConsistencyResult {
        let budget = SharedBudget::new(None);
        let vqa = client("vqa", &budget, scripted_answers(agree));
        let vqg = client("vqg", &budget, numbered_generator);
        let cfg = ProbeConfig::default();
        probe_consistency(&yes_no_instance(), &vqa, &vqg, &cfg, 7).await.unwrap().1
    }

    #[tokio::test]
    async fn agreement_counting_examples() {
        let all = scripted(&[true; 5]).await;
        assert_eq!((all.agree_count, all.consistency), (5, 1.0));
        let none = scripted(&[false; 5]).await;
        assert_eq!((none.agree_count, none.consistency), (0, 0.0));
        // Agreement on rephrasings 1, 3 and 4.
        let some = scripted(&[false, true, false, true, true]).await;
        assert_eq!((some.agree_count, some.consistency), (3, 0.6));
    }

    #[tokio::test]
    async fn cold_cache_call_counts() {
        let world = Arc::new(make_world(3, 20, Regime::InDistribution).unwrap());
        let budget = SharedBudget::new(None);
        let (vqa, vqg) = sim_pair(world.clone(), &budget);
        let cfg = ProbeConfig::default();
        let report = probe_dataset(&world.dataset(), &vqa, &vqg, &cfg).await.unwrap();
        assert_eq!(report.records.len(), 20);
        assert_eq!(budget.calls("vqa"), 20 * 6);
        assert_eq!(budget.calls("vqg"), 20);
    }

    #[tokio::test]
    async fn generation_is_conditioned_on_the_first_answer() {
        let seen = Arc::new(std::sync::Mutex::new(Vec::new()));
        let budget = SharedBudget::new(None);
        let vqa = client("vqa", &budget, scripted_answers(&[true; 5]));
        let log = seen.clone();
        let vqg = client("vqg", &budget, move |p, b| {
            let req: serde_json::Value = serde_json::from_slice(b).unwrap();
            log.lock().unwrap().push(req["answer"].as_str().unwrap().to_owned());
            numbered_generator(p, b)
        });
        let mut inst = yes_no_instance();
        inst.annotations = vec!["no".into(); 10];
        let rec = probe_instance(&inst, &vqa, &vqg, &ProbeConfig::default()).await.unwrap();
        assert_eq!(*seen.lock().unwrap(), vec!["yes".to_string()]);
        assert_eq!(rec.soft_score.value(), 0.0);
    }

    #[tokio::test]
    async fn failed_rephrasing_is_partial_not_rescaled() {
        let budget = SharedBudget::new(None);
        let answers = scripted_answers(&[true; 5]);
        let vqa = client("vqa", &budget, move |p, b| {
            if b.windows(4).any(|w| w == b"\"r2\"") {
                RawResponse {
                    status: 503,
                    body: "{}".into(),
                }
            } else {
                answers(p, b)
            }
        });
        let vqg = client("vqg", &budget, numbered_generator);
        let err = probe_consistency(&yes_no_instance(), &vqa, &vqg, &ProbeConfig::default(), 1)
            .await
            .unwrap_err();
        let ProbeError::Partial(p) = err else {
            panic!("expected partial, got {err:?}");
        };
        assert_eq!(p.errors.len(), 1);
        assert_eq!(p.errors[0].0, 2);
        assert_eq!(p.answers.iter().filter(|a| a.is_some()).count(), 4);
        assert!(p.answers[2].is_none());
    }

    #[tokio::test]
    async fn runs_are_reproducible_and_order_invariant() {
        let world = Arc::new(make_world(5, 100, Regime::InDistribution).unwrap());
        let cfg = ProbeConfig {
            base_seed: 42,
            ..ProbeConfig::default()
        };
        let run = |instances: Vec<VisualQuestionInstance>| {
            let world = world.clone();
            let cfg = cfg.clone();
            async move {
                let budget = SharedBudget::new(None);
                let (vqa, vqg) = sim_pair(world, &budget);
                probe_dataset(&instances, &vqa, &vqg, &cfg).await.unwrap().records
            }
        };
        let a = run(world.dataset()).await;
        let b = run(world.dataset()).await;
        assert_eq!(a, b);
        let mut reversed = world.dataset();
        reversed.reverse();
        let mut c = run(reversed).await;
        c.reverse();
        assert_eq!(a, c);
    }

    #[tokio::test]
    async fn empty_dataset_rejected() {
        let budget = SharedBudget::new(None);
        let vqa = client("vqa", &budget, numbered_generator);
        let vqg = client("vqg", &budget, numbered_generator);
        let err = probe_dataset(&[], &vqa, &vqg, &ProbeConfig::default()).await.unwrap_err();
        assert_eq!(err.cause, ProbeError::NoInstances);
    }

    #[tokio::test]
    async fn budget_exhaustion_aborts_the_run() {
        let world = Arc::new(make_world(3, 10, Regime::InDistribution).unwrap());
        let budget = SharedBudget::new(Some(7 * 3 + 2));
        let (vqa, vqg) = sim_pair(world.clone(), &budget);
        let cfg = ProbeConfig {
            parallelism: 1,
            ..ProbeConfig::default()
        };
        let err = probe_dataset(&world.dataset(), &vqa, &vqg, &cfg).await.unwrap_err();
        assert!(err.cause.is_fatal(), "{:?}", err.cause);
        assert_eq!(err.report.records.len(), 3);
        assert!(budget.total() <= 7 * 3 + 2);
    }

    #[tokio::test]
    async fn per_instance_failures_are_collected() {
        let world = Arc::new(make_world(3, 6, Regime::InDistribution).unwrap());
        let budget = SharedBudget::new(None);
        let (vqa, _) = sim_pair(world.clone(), &budget);
        let broken = world.dataset()[2].image.uri.clone();
        let w = world.clone();
        let calls = Arc::new(AtomicUsize::new(0));
        let counter = calls.clone();
        let vqg = client("vqg", &budget, move |p, b| {
            counter.fetch_add(1, Ordering::SeqCst);
            if std::str::from_utf8(b).unwrap().contains(&broken) {
                RawResponse {
                    status: 400,
                    body: "{\"error\":\"nope\"}".into(),
                }
            } else {
                handle_request(&w, p, b)
            }
        });
        let report = probe_dataset(&world.dataset(), &vqa, &vqg, &ProbeConfig::default())
            .await
            .unwrap();
        assert_eq!(report.records.len(), 5);
        assert_eq!(report.failures.len(), 1);
        assert_eq!(report.failures[0].instance_id, world.dataset()[2].instance_id);
        assert_eq!(calls.load(Ordering::SeqCst), 6);

        let strict = ProbeConfig {
            fail_fast: true,
            parallelism: 1,
            ..ProbeConfig::default()
        };
        let err = probe_dataset(&world.dataset(), &vqa, &vqg, &strict).await.unwrap_err();
        assert_eq!(err.report.records.len(), 2);
    }

    #[test]
    fn seeds_depend_on_id_not_position() {
        assert_eq!(derive_seed(9, "x/1"), derive_seed(9, "x/1"));
        assert_ne!(derive_seed(9, "x/1"), derive_seed(9, "x/2"));
        assert_ne!(derive_seed(9, "x/1"), derive_seed(10, "x/1"));
        assert_eq!(derive_seed(0, "x/1") ^ derive_seed(5, "x/1"), 5);
    }
}
