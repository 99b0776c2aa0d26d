use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{oracle_rate, rubric, validate_rating, RatingRecord, RubricLevel};
use crate::data::Dataset;
use crate::error::{ensure, Error, Result};
use crate::protopnet::ProtoPNet;

type RatingKey = (String, usize, String, String);

/// Append-only line-delimited JSON file of ratings. Every append is flushed
/// to disk before it is acknowledged.
#[derive(Debug)]
pub struct RatingStore {
    path: PathBuf,
    file: File,
    records: Vec<RatingRecord>,
    keys: HashSet<RatingKey>,
}

impl RatingStore {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io_at(parent, e))?;
        }
        let records: Vec<RatingRecord> = if path.exists() { super::read_jsonl(path)? } else { Vec::new() };
        let mut keys = HashSet::new();
        for r in &records {
            ensure!(keys.insert(r.key()), Validation, "{} holds a duplicate rating {}", path.display(), r.rating_id);
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io_at(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            records,
            keys,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn records(&self) -> &[RatingRecord] {
        &self.records
    }

    pub fn contains(&self, record: &RatingRecord) -> bool {
        self.keys.contains(&record.key())
    }

    pub fn append(&mut self, record: RatingRecord) -> Result<()> {
        validate_rating(record.rating as i64)?;
        ensure!(
            !self.contains(&record),
            Conflict,
            "rater {} already rated image {} with prototype {} of model {}",
            record.rater_id,
            record.image_id,
            record.prototype_id,
            record.model_id
        );
        let mut line = serde_json::to_string(&record)?;
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.sync_data())
            .map_err(|e| Error::io_at(&self.path, e))?;
        self.keys.insert(record.key());
        self.records.push(record);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub image_id: String,
    pub prototype_id: usize,
}

/// The (image, prototype) pairs of one model that raters are asked about.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskPool {
    pub model_id: String,
    pub tasks: Vec<TaskSpec>,
}

/// Every class-matched pair of an un-augmented training image and a
/// prototype, in a seeded random order that fixes the task ids.
pub fn build_task_pool(model: &ProtoPNet, data: &Dataset, seed: u64) -> TaskPool {
    let mut pairs: Vec<(String, usize)> = data
        .train_originals()
        .flat_map(|im| model.prototypes_of_class(im.class_id).map(move |(_, p)| (im.id.clone(), p.id)))
        .collect();
    pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    TaskPool {
        model_id: model.model_id.clone(),
        tasks: pairs
            .into_iter()
            .enumerate()
            .map(|(task_id, (image_id, prototype_id))| TaskSpec {
                task_id,
                image_id,
                prototype_id,
            })
            .collect(),
    }
}

/// A task as handed to a rater.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingTask {
    pub task_id: usize,
    pub image_id: String,
    pub prototype_id: usize,
    pub model_id: String,
    pub image_url: String,
    pub heatmap_url: String,
    pub rubric: Vec<RubricLevel>,
}

/// Body of `POST /api/ratings`. The task is named either by `task_id` or by
/// `(image_id, prototype_id)`; missing ids and timestamps are filled in.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingSubmission {
    #[serde(default)]
    pub rating_id: Option<String>,
    #[serde(default)]
    pub task_id: Option<usize>,
    #[serde(default)]
    pub image_id: Option<String>,
    #[serde(default)]
    pub prototype_id: Option<usize>,
    #[serde(default)]
    pub model_id: Option<String>,
    pub rating: i64,
    pub rater_id: String,
    #[serde(default)]
    pub timestamp: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub total: usize,
    /// Tasks with at least one rating.
    pub rated: usize,
    pub per_rater: BTreeMap<String, usize>,
}

struct ServiceState {
    store: RatingStore,
    counts: Vec<usize>,
    rated_by: HashMap<String, HashSet<usize>>,
}

/// Task assignment and rating intake over one task pool. Safe to share
/// between request threads; the duplicate check and the append happen under
/// one lock.
pub struct FeedbackService {
    pool: TaskPool,
    index: HashMap<(String, usize), usize>,
    state: Mutex<ServiceState>,
}

impl FeedbackService {
    pub fn new(pool: TaskPool, store: RatingStore) -> Self {
        let index: HashMap<(String, usize), usize> = pool
            .tasks
            .iter()
            .enumerate()
            .map(|(i, t)| ((t.image_id.clone(), t.prototype_id), i))
            .collect();
        let mut counts = vec![0; pool.tasks.len()];
        let mut rated_by: HashMap<String, HashSet<usize>> = HashMap::new();
        for r in store.records().iter().filter(|r| r.model_id == pool.model_id) {
            if let Some(&i) = index.get(&(r.image_id.clone(), r.prototype_id)) {
                counts[i] += 1;
                rated_by.entry(r.rater_id.clone()).or_default().insert(i);
            }
        }
        Self {
            pool,
            index,
            state: Mutex::new(ServiceState { store, counts, rated_by }),
        }
    }

    pub fn pool(&self) -> &TaskPool {
        &self.pool
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, ServiceState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn task_view(&self, i: usize) -> RatingTask {
        let t = &self.pool.tasks[i];
        RatingTask {
            task_id: t.task_id,
            image_id: t.image_id.clone(),
            prototype_id: t.prototype_id,
            model_id: self.pool.model_id.clone(),
            image_url: format!("/api/images/{}", t.image_id),
            heatmap_url: format!("/api/heatmaps/{}/{}", t.image_id, t.prototype_id),
            rubric: rubric(),
        }
    }

    /// The least-rated task this rater has not rated yet, lowest id first.
    pub fn next_task(&self, rater_id: &str) -> Result<Option<RatingTask>> {
        ensure!(!self.pool.tasks.is_empty(), Service, "the task pool has not been initialised");
        let state = self.lock();
        let done = state.rated_by.get(rater_id);
        let best = (0..self.pool.tasks.len())
            .filter(|i| done.is_none_or(|d| !d.contains(i)))
            .min_by_key(|&i| (state.counts[i], self.pool.tasks[i].task_id));
        Ok(best.map(|i| self.task_view(i)))
    }

    pub fn submit_rating(&self, record: RatingRecord) -> Result<()> {
        self.submit(RatingSubmission {
            rating_id: Some(record.rating_id),
            task_id: None,
            image_id: Some(record.image_id),
            prototype_id: Some(record.prototype_id),
            model_id: Some(record.model_id),
            rating: record.rating as i64,
            rater_id: record.rater_id,
            timestamp: Some(record.timestamp),
        })
        .map(|_| ())
    }

    pub fn submit(&self, sub: RatingSubmission) -> Result<RatingRecord> {
        let rating = validate_rating(sub.rating)?;
        ensure!(!sub.rater_id.trim().is_empty(), Validation, "rater_id must not be empty");
        if let Some(m) = &sub.model_id {
            ensure!(
                *m == self.pool.model_id,
                Validation,
                "rating targets model {m} but this service rates {}",
                self.pool.model_id
            );
        }
        let i = match (sub.task_id, &sub.image_id, sub.prototype_id) {
            (Some(id), _, _) => self.pool.tasks.iter().position(|t| t.task_id == id),
            (None, Some(img), Some(p)) => self.index.get(&(img.clone(), p)).copied(),
            _ => None,
        }
        .ok_or_else(|| Error::Validation("rating does not name an existing task".into()))?;
        let task = &self.pool.tasks[i];
        if let (Some(img), Some(p)) = (&sub.image_id, sub.prototype_id) {
            ensure!(
                *img == task.image_id && p == task.prototype_id,
                Validation,
                "task {} is image {} prototype {}",
                task.task_id,
                task.image_id,
                task.prototype_id
            );
        }
        let mut state = self.lock();
        let record = RatingRecord {
            rating_id: sub.rating_id.unwrap_or_else(|| format!("r{:06}", state.store.records().len())),
            image_id: task.image_id.clone(),
            prototype_id: task.prototype_id,
            model_id: self.pool.model_id.clone(),
            rating,
            rater_id: sub.rater_id,
            timestamp: sub.timestamp.unwrap_or_else(|| {
                SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
            }),
        };
        state.store.append(record.clone())?;
        state.counts[i] += 1;
        state.rated_by.entry(record.rater_id.clone()).or_default().insert(i);
        Ok(record)
    }

    pub fn progress(&self) -> Progress {
        let state = self.lock();
        let mut per_rater = BTreeMap::new();
        for (rater, done) in &state.rated_by {
            per_rater.insert(rater.clone(), done.len());
        }
        Progress {
            total: self.pool.tasks.len(),
            rated: state.counts.iter().filter(|c| **c > 0).count(),
            per_rater,
        }
    }

    pub fn ratings(&self) -> Vec<RatingRecord> {
        self.lock()
            .store
            .records()
            .iter()
            .filter(|r| r.model_id == self.pool.model_id)
            .cloned()
            .collect()
    }
}

/// Rates up to `n` tasks with the mask-overlap oracle, as rater `rater_id`.
/// Returns how many ratings were stored.
pub fn oracle_rate_tasks(
    service: &FeedbackService,
    model: &ProtoPNet,
    data: &Dataset,
    n: usize,
    rater_id: &str,
) -> Result<usize> {
    ensure!(
        service.pool().model_id == model.model_id,
        Validation,
        "service rates model {} but the oracle was given {}",
        service.pool().model_id,
        model.model_id
    );
    let mut done = 0;
    while done < n {
        let Some(task) = service.next_task(rater_id)? else { break };
        let sample = data.sample(&task.image_id).ok_or_else(|| {
            Error::Validation(format!("image {} has no object mask; the oracle needs synthetic data", task.image_id))
        })?;
        let map = model.activation_map(model.prototype_index(task.prototype_id)?, sample.base)?;
        let rating = oracle_rate(&sample, &map)?;
        service.submit(RatingSubmission {
            task_id: Some(task.task_id),
            rating: rating as i64,
            rater_id: rater_id.into(),
            timestamp: Some(0),
            ..Default::default()
        })?;
        done += 1;
    }
    Ok(done)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn pool(n: usize) -> TaskPool {
        TaskPool {
            model_id: "m".into(),
            tasks: (0..n)
                .map(|i| TaskSpec {
                    task_id: i,
                    image_id: format!("img{i}"),
                    prototype_id: i % 2,
                })
                .collect(),
        }
    }

    fn service(dir: &Path, n: usize) -> FeedbackService {
        FeedbackService::new(pool(n), RatingStore::open(&dir.join("ratings.jsonl")).unwrap())
    }

    fn submit(s: &FeedbackService, task_id: usize, rating: i64, rater: &str) -> Result<RatingRecord> {
        s.submit(RatingSubmission {
            task_id: Some(task_id),
            rating,
            rater_id: rater.into(),
            ..Default::default()
        })
    }

    #[test]
    fn fresh_pool_hands_out_lowest_id() {
        let dir = tempfile::tempdir().unwrap();
        let s = service(dir.path(), 3);
        assert_eq!(s.next_task("a").unwrap().unwrap().task_id, 0);
        assert_eq!(s.next_task("b").unwrap().unwrap().task_id, 0);
        submit(&s, 0, 4, "a").unwrap();
        // Task 0 now has one rating, so b is steered to the least-rated task.
        assert_eq!(s.next_task("b").unwrap().unwrap().task_id, 1);
    }

    #[test]
    fn exhausted_rater_gets_none() {
        let dir = tempfile::tempdir().unwrap();
        let s = service(dir.path(), 2);
        submit(&s, 0, 4, "a").unwrap();
        submit(&s, 1, 2, "a").unwrap();
        assert!(s.next_task("a").unwrap().is_none());
        assert!(s.next_task("b").unwrap().is_some());
    }

    #[test]
    fn empty_pool_is_a_service_error() {
        let dir = tempfile::tempdir().unwrap();
        let s = service(dir.path(), 0);
        assert!(matches!(s.next_task("a"), Err(Error::Service(_))));
    }

    #[test]
    fn interleaved_raters_never_repeat() {
        let dir = tempfile::tempdir().unwrap();
        let s = service(dir.path(), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let raters = ["a", "b"];
        let mut active: Vec<&str> = raters.to_vec();
        while !active.is_empty() {
            let k = rng.gen_range(0..active.len());
            match s.next_task(active[k]).unwrap() {
                Some(t) => {
                    submit(&s, t.task_id, rng.gen_range(1..=5), active[k]).unwrap();
                }
                None => {
                    active.remove(k);
                }
            }
        }
        // Scan the store: each rater rated each task exactly once.
        let records = RatingStore::open(&dir.path().join("ratings.jsonl")).unwrap().records().to_vec();
        assert_eq!(records.len(), 14);
        for r in raters {
            let mut ids: Vec<&str> = records.iter().filter(|x| x.rater_id == r).map(|x| x.image_id.as_str()).collect();
            ids.sort();
            ids.dedup();
            assert_eq!(ids.len(), 7);
        }
    }

    #[test]
    fn submit_round_trip_range_and_conflict() {
        let dir = tempfile::tempdir().unwrap();
        let s = service(dir.path(), 3);
        let rec = submit(&s, 1, 5, "a").unwrap();
        assert_eq!(rec.rating, 5);
        assert_eq!(s.ratings(), vec![rec.clone()]);
        assert!(matches!(submit(&s, 2, 6, "a"), Err(Error::Validation(_))));
        assert!(matches!(submit(&s, 1, 3, "a"), Err(Error::Conflict(_))));
        assert!(matches!(submit(&s, 99, 3, "a"), Err(Error::Validation(_))));
        let p = s.progress();
        assert_eq!((p.total, p.rated, p.per_rater["a"]), (3, 1, 1));
    }

    #[test]
    fn acked_ratings_survive_restart() {
        let dir = tempfile::tempdir().unwrap();
        {
            let s = service(dir.path(), 4);
            for t in 0..3 {
                submit(&s, t, 3, "a").unwrap();
            }
        }
        let s = service(dir.path(), 4);
        assert_eq!(s.ratings().len(), 3);
        assert_eq!(s.next_task("a").unwrap().unwrap().task_id, 3);
        assert!(matches!(submit(&s, 0, 3, "a"), Err(Error::Conflict(_))));
    }

    #[test]
    fn concurrent_duplicate_submissions_store_one_record() {
        let dir = tempfile::tempdir().unwrap();
        let s = std::sync::Arc::new(service(dir.path(), 2));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let s = s.clone();
                std::thread::spawn(move || submit(&s, 0, 4, "a").is_ok())
            })
            .collect();
        let oks = handles.into_iter().map(|h| h.join().unwrap()).filter(|ok| *ok).count();
        assert_eq!(oks, 1);
        let reopened = RatingStore::open(&dir.path().join("ratings.jsonl")).unwrap();
        assert_eq!(reopened.records().len(), 1);
    }
}
