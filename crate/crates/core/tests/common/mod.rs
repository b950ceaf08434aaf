#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::Arc;

use consistency_probe::backends::{BackendClient, BackendEndpoint, SharedBudget};
use consistency_probe::cache::ResponseCache;
use consistency_probe::domain::{
    ConsistencyResult, EvaluationRecord, Prediction, Rephrasing, SoftScore,
};
use consistency_probe::probe::{probe_dataset, ProbeConfig};
use consistency_probe::simbench::{in_process_transport, make_world, Regime, SimWorld};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn sim_client(
    world: &Arc<SimWorld>,
    id: &str,
    budget: &SharedBudget,
    cache: Option<Arc<ResponseCache>>,
) -> BackendClient {
    BackendClient::new(
        BackendEndpoint::new("inproc://sim", id),
        Arc::new(in_process_transport(world.clone())),
        budget.clone(),
        cache,
    )
    .unwrap()
}

/// Probes a whole simulated world in-process.
pub async fn probe_world(
    seed: u64,
    n: usize,
    regime: Regime,
    config: &ProbeConfig,
) -> Vec<EvaluationRecord> {
    let world = Arc::new(make_world(seed, n, regime).unwrap());
    let budget = SharedBudget::new(None);
    let vqa = sim_client(&world, "vqa", &budget, None);
    let vqg = sim_client(&world, "vqg", &budget, None);
    probe_dataset(&world.dataset(), &vqa, &vqg, config)
        .await
        .unwrap()
        .records
}

/// Records with random confidences (two decimals, so ties occur), random
/// soft scores and random agreement counts.
pub fn random_records(n: usize, k: u32, seed: u64) -> Vec<EvaluationRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let conf = f64::from(rng.random_range(0..=100u32)) / 100.0;
            let score = SoftScore::from_matches(rng.random_range(0..=3usize));
            let agree = rng.random_range(0..=k);
            let rephrasings = (0..k)
                .map(|j| Rephrasing {
                    text: format!("q{i}-{j}"),
                    sample_index: j,
                    top_p: 0.9,
                    seed: 0,
                })
                .collect();
            let answers = (0..k)
                .map(|j| if j < agree { "a".to_owned() } else { "b".to_owned() })
                .collect();
            EvaluationRecord::new(
                format!("r/{i:04}"),
                Prediction {
                    answer: "a".into(),
                    confidence: conf,
                    scores: None,
                },
                score,
                Some(ConsistencyResult::from_answers("a", rephrasings, answers).unwrap()),
            )
        })
        .collect()
}

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_consistency-probe"))
}

pub struct Output {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn run_cli(args: &[&str], cwd: &Path) -> Output {
    let out = Command::new(bin())
        .args(args)
        .current_dir(cwd)
        .env_remove("CONSISTENCY_PROBE_CACHE")
        .output()
        .expect("binary runs");
    Output {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

/// A `serve-sim` child process, killed on drop.
pub struct SimServer {
    child: Child,
    pub url: String,
}

impl SimServer {
    pub fn start(regime: &str, seed: u64) -> Self {
        use std::io::BufRead;
        let mut child = Command::new(bin())
            .args(["serve-sim", "--regime", regime, "--seed", &seed.to_string(), "--port", "0"])
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .expect("serve-sim starts");
        let mut line = String::new();
        std::io::BufReader::new(child.stdout.take().unwrap())
            .read_line(&mut line)
            .unwrap();
        let url = line.trim().to_owned();
        assert!(url.starts_with("http://"), "unexpected serve-sim output {url:?}");
        Self { child, url }
    }
}

impl Drop for SimServer {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}
