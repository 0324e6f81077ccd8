//! Server state as a fold over an append-only event log. Every mutation is
//! first written as an [`Event`] and then applied by the same code that
//! replays the log at startup, so a restart reconstructs identical state.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use percept_core::answers::{AnswerStore, Choice, ComparisonKey, TrialKind, TripletAnswer};
use percept_core::data::DatasetBundle;
use percept_core::sampling::{
    build_hit, judge_hit, obvious_triplets, shuffled, HitConfig, HitPlan, PlannedPair, Sampler, SamplerConfig,
    SamplingPlan,
};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ServiceError;

pub const EVENT_LOG: &str = "events.jsonl";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub hit: HitConfig,
    pub sampler: SamplerConfig,
    /// Fraction of the current plan that must be answered before advancing.
    pub coverage_threshold: f64,
    /// Randomize the (shape, illumination) condition per triplet item.
    pub asymmetric: bool,
    pub admin_token: Option<String>,
    pub state_dir: PathBuf,
    pub ui_dir: Option<PathBuf>,
    pub seed: u64,
}

impl ServiceConfig {
    pub fn new(state_dir: impl Into<PathBuf>) -> Self {
        Self {
            hit: HitConfig::default(),
            sampler: SamplerConfig::default(),
            coverage_threshold: 0.8,
            asymmetric: false,
            admin_token: None,
            state_dir: state_dir.into(),
            ui_dir: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Active,
    Complete,
    Rejected,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Plan {
        plan: SamplingPlan,
        /// Fixed `(shape, illumination)` for the plan, absent in asymmetric mode.
        condition: Option<(String, String)>,
        /// Order in which plan pairs are handed to sessions.
        queue: Vec<PlannedPair>,
    },
    Session {
        session_id: String,
        worker: String,
        plan_iteration: usize,
        hit: HitPlan,
        /// `[reference, a, b]` view ids per trial.
        views: Vec<[String; 3]>,
    },
    Answer {
        session_id: String,
        trial_index: usize,
        chosen: Choice,
        timestamp: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub accepted: bool,
    pub remaining: usize,
}

#[derive(Debug)]
pub struct Session {
    pub id: String,
    pub worker: String,
    pub plan_iteration: usize,
    pub hit: HitPlan,
    pub views: Vec<[String; 3]>,
    pub answers: Vec<TripletAnswer>,
    pub acks: Vec<Ack>,
    pub status: Status,
    pub inconsistencies: Option<usize>,
}

impl Session {
    pub fn cursor(&self) -> usize {
        self.answers.len()
    }

    /// Records the answer at the cursor; returns true when it completed the HIT.
    fn record(&mut self, chosen: Choice, timestamp: String) -> Result<bool, ServiceError> {
        let trial = &self.hit.trials[self.cursor()];
        self.answers.push(TripletAnswer {
            reference: trial.reference.clone(),
            option_a: trial.a.clone(),
            option_b: trial.b.clone(),
            chosen,
            worker: self.worker.clone(),
            kind: trial.kind,
            timestamp,
        });
        self.acks.push(Ack {
            accepted: true,
            remaining: self.hit.len() - self.answers.len(),
        });
        if self.answers.len() < self.hit.len() {
            return Ok(false);
        }
        let verdict = judge_hit(&self.hit, &self.answers).map_err(ServiceError::internal)?;
        self.inconsistencies = Some(verdict.inconsistencies);
        self.status = if verdict.valid {
            Status::Complete
        } else {
            Status::Rejected
        };
        Ok(true)
    }
}

/// Global state guarded by one mutex: plan, queue, answer store and the
/// session table. Sessions carry their own mutex.
pub struct Global {
    pub bundle: Arc<DatasetBundle>,
    pub config: ServiceConfig,
    pub sampler: Sampler,
    pub plan: Option<SamplingPlan>,
    pub condition: Option<(String, String)>,
    pub queue: VecDeque<PlannedPair>,
    pub store: AnswerStore,
    pub sessions: HashMap<String, Arc<Mutex<Session>>>,
    /// Events applied so far; also the RNG stream for the next event.
    pub n_events: u64,
}

impl Global {
    fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.n_events);
        rng
    }

    pub fn coverage(&self) -> f64 {
        match &self.plan {
            Some(plan) if !plan.pairs.is_empty() => {
                let answered = plan
                    .pairs
                    .iter()
                    .filter(|p| self.store.tally(&p.key()).is_some())
                    .count();
                answered as f64 / plan.pairs.len() as f64
            }
            _ => 1.0,
        }
    }

    pub fn iteration(&self) -> Option<usize> {
        self.plan.as_ref().map(|p| p.iteration)
    }

    fn apply_plan(&mut self, plan: SamplingPlan, condition: Option<(String, String)>, queue: Vec<PlannedPair>) {
        self.plan = Some(plan);
        self.condition = condition;
        self.queue = queue.into();
    }

    fn apply_session(&mut self, session: Session) {
        if Some(session.plan_iteration) == self.iteration() {
            let taken: HashSet<ComparisonKey> = session
                .hit
                .trials
                .iter()
                .filter(|t| t.kind == TrialKind::Trial)
                .map(|t| t.key())
                .collect();
            self.queue.retain(|p| !taken.contains(&p.key()));
        }
        self.sessions.insert(session.id.clone(), Arc::new(Mutex::new(session)));
    }

    /// Merges a finished session: valid trial answers enter the store; a
    /// rejected session's pairs return to the queue of the current plan.
    fn finish(&mut self, session: &Session) -> Result<(), ServiceError> {
        let trials = session.answers.iter().filter(|a| a.kind == TrialKind::Trial);
        match session.status {
            Status::Complete => self.store.extend(trials.cloned()).map_err(ServiceError::internal)?,
            Status::Rejected if Some(session.plan_iteration) == self.iteration() => {
                for a in trials.rev() {
                    self.queue.push_front(PlannedPair {
                        reference: a.reference.clone(),
                        a: a.option_a.clone(),
                        b: a.option_b.clone(),
                    });
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Condition that covers the most materials, ties broken at random.
    fn pick_condition(&self, rng: &mut ChaCha8Rng) -> Option<(String, String)> {
        if self.config.asymmetric {
            return None;
        }
        let mut cover: BTreeMap<(&str, &str), HashSet<&str>> = BTreeMap::new();
        for v in &self.bundle.views {
            cover
                .entry((v.shape_tag.as_str(), v.illumination_tag.as_str()))
                .or_default()
                .insert(v.material_id.as_str());
        }
        let best = cover.values().map(HashSet::len).max()?;
        let top: Vec<(&str, &str)> = cover.iter().filter(|(_, m)| m.len() == best).map(|(c, _)| *c).collect();
        top.choose(rng).map(|(s, i)| (s.to_string(), i.to_string()))
    }

    fn view_for(&self, material: &str, rng: &mut ChaCha8Rng) -> Result<String, ServiceError> {
        let views: Vec<_> = self.bundle.views.iter().filter(|v| v.material_id == material).collect();
        if let Some((shape, illum)) = &self.condition {
            if let Some(v) = views
                .iter()
                .find(|v| &v.shape_tag == shape && &v.illumination_tag == illum)
            {
                return Ok(v.view_id.clone());
            }
            // Materials missing the plan condition fall back to their first view.
            if let Some(v) = views.first() {
                return Ok(v.view_id.clone());
            }
        }
        views
            .choose(rng)
            .map(|v| v.view_id.clone())
            .ok_or_else(|| ServiceError::internal(format!("material {material} has no views")))
    }

    fn training_pairs(&self, count: usize) -> Vec<PlannedPair> {
        let ids = self.sampler.material_ids();
        let points: Vec<Vec<f64>> = match self.sampler.embedding() {
            Some(e) => e.points.clone(),
            None => {
                // Before any fit, the material-mean descriptors stand in.
                let by_material = self.bundle.views_by_material();
                ids.iter()
                    .map(|id| {
                        let m = self
                            .bundle
                            .material_index(id)
                            .expect("sampler ids come from the bundle");
                        let rows = &by_material[m];
                        let mut mean = vec![0.0; self.bundle.descriptor_dim()];
                        for &v in rows {
                            for (acc, x) in mean.iter_mut().zip(self.bundle.descriptor(v)) {
                                *acc += x / rows.len() as f64;
                            }
                        }
                        mean
                    })
                    .collect()
            }
        };
        obvious_triplets(ids, &points, count)
    }
}

/// Shared server state: the global mutex plus the event log writer.
pub struct AppState {
    global: Mutex<Global>,
    log: Mutex<File>,
    pub log_path: PathBuf,
}

pub type SharedState = Arc<AppState>;

pub struct SessionView {
    pub trial_index: usize,
    pub total: usize,
    pub views: [String; 3],
}

pub enum NextTrial {
    Trial(SessionView),
    Done(Status),
}

impl AppState {
    /// Opens (or creates) the state directory and replays its event log. A
    /// fresh log starts with a bootstrap plan.
    pub fn open(bundle: DatasetBundle, config: ServiceConfig) -> Result<SharedState, ServiceError> {
        config.hit.unique_trials().map_err(ServiceError::bad_request)?;
        if !(0.0..=1.0).contains(&config.coverage_threshold) {
            return Err(ServiceError::bad_request("coverage threshold must lie in [0, 1]"));
        }
        fs::create_dir_all(&config.state_dir).map_err(ServiceError::internal)?;
        let log_path = config.state_dir.join(EVENT_LOG);
        let events = read_events(&log_path)?;
        let ids: Vec<String> = bundle.materials.iter().map(|m| m.id.clone()).collect();
        let sampler = Sampler::new(ids, config.sampler.clone()).map_err(ServiceError::bad_request)?;
        let mut global = Global {
            bundle: Arc::new(bundle),
            config,
            sampler,
            plan: None,
            condition: None,
            queue: VecDeque::new(),
            store: AnswerStore::new(),
            sessions: HashMap::new(),
            n_events: 0,
        };
        for event in events {
            replay(&mut global, event)?;
        }
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(ServiceError::internal)?;
        let state = Arc::new(AppState {
            global: Mutex::new(global),
            log: Mutex::new(log),
            log_path,
        });
        if state.lock().plan.is_none() {
            state.advance(true)?;
        }
        Ok(state)
    }

    pub fn lock(&self) -> MutexGuard<'_, Global> {
        self.global.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn append(&self, event: &Event) -> Result<(), ServiceError> {
        let mut line = serde_json::to_string(event).map_err(ServiceError::internal)?;
        line.push('\n');
        let mut log = self.log.lock().unwrap_or_else(|e| e.into_inner());
        log.write_all(line.as_bytes()).map_err(ServiceError::internal)?;
        log.sync_data().map_err(ServiceError::internal)
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ServiceError> {
        self.lock()
            .sessions
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::not_found(format!("unknown session {id}")))
    }

    /// Starts a HIT from the front of the plan queue. The last HIT of a plan
    /// may be shorter than `hit_size` when fewer pairs remain.
    pub fn create_session(&self, worker: &str, hit_size: Option<usize>) -> Result<String, ServiceError> {
        if worker.trim().is_empty() {
            return Err(ServiceError::bad_request("worker must be non-empty"));
        }
        let mut g = self.lock();
        let mut cfg = g.config.hit.clone();
        if let Some(size) = hit_size {
            cfg.hit_size = size;
        }
        let wanted = cfg.unique_trials().map_err(ServiceError::bad_request)?;
        let take = wanted.min(g.queue.len());
        if take == 0 {
            return Err(ServiceError::conflict("no trials remain in the current plan"));
        }
        if take < wanted {
            cfg.n_control = cfg.n_control.min(take);
            cfg.hit_size = take + cfg.n_control + if cfg.training_in_hit { cfg.n_training } else { 0 };
        }
        let mut rng = g.rng();
        let unique: Vec<PlannedPair> = g.queue.iter().take(take).cloned().collect();
        let training = g.training_pairs(cfg.n_training);
        let hit = build_hit(&unique, &training, &cfg, &mut rng).map_err(ServiceError::conflict)?;
        let views = hit
            .trials
            .iter()
            .map(|t| {
                Ok([
                    g.view_for(&t.reference, &mut rng)?,
                    g.view_for(&t.a, &mut rng)?,
                    g.view_for(&t.b, &mut rng)?,
                ])
            })
            .collect::<Result<Vec<_>, ServiceError>>()?;
        let session_id = format!("{:032x}", rng.random::<u128>());
        let event = Event::Session {
            session_id: session_id.clone(),
            worker: worker.to_string(),
            plan_iteration: g.iteration().expect("a plan exists once open"),
            hit,
            views,
        };
        self.append(&event)?;
        apply(&mut g, event);
        Ok(session_id)
    }

    pub fn next_trial(&self, id: &str) -> Result<NextTrial, ServiceError> {
        let session = self.session(id)?;
        let s = session.lock().unwrap_or_else(|e| e.into_inner());
        if s.status != Status::Active {
            return Ok(NextTrial::Done(s.status));
        }
        let i = s.cursor();
        Ok(NextTrial::Trial(SessionView {
            trial_index: i,
            total: s.hit.len(),
            views: s.views[i].clone(),
        }))
    }

    /// Idempotent per `(session, trial_index)`: an index below the cursor
    /// returns the acknowledgment it received the first time.
    pub fn answer(&self, id: &str, trial_index: usize, chosen: Choice) -> Result<Ack, ServiceError> {
        let session = self.session(id)?;
        let mut s = session.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(ack) = s.acks.get(trial_index) {
            return Ok(*ack);
        }
        if s.status != Status::Active {
            return Err(ServiceError::gone(format!("session is {:?}", s.status).to_lowercase()));
        }
        if trial_index != s.cursor() {
            return Err(ServiceError::conflict(format!(
                "expected trial_index {}, got {trial_index}",
                s.cursor()
            )));
        }
        let timestamp = chrono::Utc::now().to_rfc3339();
        self.append(&Event::Answer {
            session_id: id.to_string(),
            trial_index,
            chosen,
            timestamp: timestamp.clone(),
        })?;
        let done = s.record(chosen, timestamp)?;
        let mut g = self.lock();
        g.n_events += 1;
        if done {
            g.finish(&s)?;
        }
        Ok(*s.acks.last().expect("just recorded"))
    }

    pub fn result(&self, id: &str) -> Result<(Status, Option<usize>), ServiceError> {
        let session = self.session(id)?;
        let s = session.lock().unwrap_or_else(|e| e.into_inner());
        Ok((s.status, s.inconsistencies))
    }

    /// Refits and issues the next plan. `force` skips the coverage check.
    pub fn advance(&self, force: bool) -> Result<usize, ServiceError> {
        let mut g = self.lock();
        let coverage = g.coverage();
        if !force && coverage < g.config.coverage_threshold {
            return Err(ServiceError::conflict(format!(
                "plan coverage {coverage:.3} below threshold {}",
                g.config.coverage_threshold
            )));
        }
        let store = g.store.clone();
        let plan = g.sampler.next_plan(&store).map_err(ServiceError::internal)?;
        let mut rng = g.rng();
        let condition = g.pick_condition(&mut rng);
        let queue = shuffled(&plan.pairs, &mut rng);
        let iteration = plan.iteration;
        let event = Event::Plan { plan, condition, queue };
        self.append(&event)?;
        // The sampler already recorded the plan while computing it.
        if let Event::Plan { plan, condition, queue } = event {
            g.apply_plan(plan, condition, queue);
        }
        g.n_events += 1;
        Ok(iteration)
    }
}

fn apply(g: &mut Global, event: Event) {
    g.n_events += 1;
    match event {
        Event::Plan { plan, condition, queue } => g.apply_plan(plan, condition, queue),
        Event::Session {
            session_id,
            worker,
            plan_iteration,
            hit,
            views,
        } => g.apply_session(Session {
            id: session_id,
            worker,
            plan_iteration,
            hit,
            views,
            answers: Vec::new(),
            acks: Vec::new(),
            status: Status::Active,
            inconsistencies: None,
        }),
        Event::Answer { .. } => unreachable!("answers are applied through their session"),
    }
}

fn replay(g: &mut Global, event: Event) -> Result<(), ServiceError> {
    match event {
        Event::Plan { ref plan, .. } => {
            g.sampler.record_plan(plan);
            apply(g, event);
        }
        Event::Session { .. } => apply(g, event),
        Event::Answer {
            session_id,
            trial_index,
            chosen,
            timestamp,
        } => {
            let session = g
                .sessions
                .get(&session_id)
                .cloned()
                .ok_or_else(|| ServiceError::internal(format!("log answers unknown session {session_id}")))?;
            let mut s = session.lock().unwrap_or_else(|e| e.into_inner());
            if s.status != Status::Active || trial_index != s.cursor() {
                return Err(ServiceError::internal(format!(
                    "log answer {trial_index} out of order for session {session_id}"
                )));
            }
            let done = s.record(chosen, timestamp)?;
            g.n_events += 1;
            if done {
                g.finish(&s)?;
            }
        }
    }
    Ok(())
}

/// Reads the log. A final line without a newline is an interrupted write:
/// it is dropped and the file truncated to the last complete event.
fn read_events(path: &Path) -> Result<Vec<Event>, ServiceError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(ServiceError::internal(e)),
    };
    let mut reader = BufReader::new(file);
    let mut events = Vec::new();
    let mut complete_len = 0u64;
    let mut line = String::new();
    let mut lineno = 0;
    loop {
        line.clear();
        let read = reader.read_line(&mut line).map_err(ServiceError::internal)?;
        if read == 0 {
            break;
        }
        lineno += 1;
        if !line.ends_with('\n') {
            let f = OpenOptions::new()
                .write(true)
                .open(path)
                .map_err(ServiceError::internal)?;
            f.set_len(complete_len).map_err(ServiceError::internal)?;
            break;
        }
        complete_len += read as u64;
        if line.trim().is_empty() {
            continue;
        }
        let event = serde_json::from_str(&line)
            .map_err(|e| ServiceError::internal(format!("{}:{lineno}: {e}", path.display())))?;
        events.push(event);
    }
    Ok(events)
}
