//! Class prototypes and cosine-similarity prediction over every seen task.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::diffgraph::Tape;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{Model, Route};
use crate::streams::Task;

/// Append-only map `(task, class) → prototype`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrototypeStore {
    entries: BTreeMap<(usize, u32), Vec<f64>>,
}

impl PrototypeStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, task: usize, class: u32, prototype: Vec<f64>) -> Result<()> {
        if self.entries.contains_key(&(task, class)) {
            return Err(Error::Protocol(format!(
                "prototype for task {task} class {class} already stored"
            )));
        }
        self.entries.insert((task, class), prototype);
        Ok(())
    }

    pub fn get(&self, task: usize, class: u32) -> Option<&[f64]> {
        self.entries.get(&(task, class)).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in ascending `(task, class)` order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, u32, &[f64])> {
        self.entries.iter().map(|(&(t, c), p)| (t, c, p.as_slice()))
    }

    pub fn for_task(&self, task: usize) -> impl Iterator<Item = (u32, &[f64])> {
        self.entries
            .range((task, 0)..=(task, u32::MAX))
            .map(|(&(_, c), p)| (c, p.as_slice()))
    }

    pub fn tasks(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.entries.keys().map(|&(t, _)| t).collect();
        t.dedup();
        t
    }

    /// `{"task.class": [..]}`.
    pub fn to_json(&self) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> = self
            .entries
            .iter()
            .map(|(&(t, c), p)| (format!("{t}.{c}"), serde_json::json!(p)))
            .collect();
        serde_json::Value::Object(map)
    }
}

/// Mean final [CLS] feature per class of `task`, using the model's shared
/// adapter and the stored adapters of `task`.
pub fn compute_prototypes(model: &Model, task: &Task, exec: Execution) -> Result<Vec<(u32, Vec<f64>)>> {
    model.task(task.index)?;
    let features = exec.map(&task.train, |_, s| {
        let tokens = model.backbone().patch_embed(&s.image)?;
        model.feature(&tokens.tokens, Some(task.index))
    });
    let d = model.backbone().config().width;
    let mut sums = vec![(vec![0.0; d], 0usize); task.classes.len()];
    for (s, f) in task.train.iter().zip(features) {
        let f = f?;
        let (acc, n) = &mut sums[s.local];
        for (a, v) in acc.iter_mut().zip(&f) {
            *a += v;
        }
        *n += 1;
    }
    task.classes
        .iter()
        .zip(sums)
        .map(|(&class, (sum, n))| {
            if n == 0 {
                return Err(Error::Data(format!("class {class} has no training samples")));
            }
            Ok((class, sum.into_iter().map(|v| v / n as f64).collect()))
        })
        .collect()
}

/// `l + (N − l)·T` adapter-block applications per query.
pub fn adapter_pass_count(position: usize, num_blocks: usize, tasks: usize) -> Result<usize> {
    if position > num_blocks {
        return Err(Error::Range {
            what: "position",
            index: position,
            range: format!("0..={num_blocks}"),
        });
    }
    Ok(position + (num_blocks - position) * tasks)
}

/// Cosine similarity; `-1` when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return -1.0;
    }
    dot / (na * nb)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassScore {
    pub task: usize,
    pub class: u32,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub class: u32,
    pub task: usize,
    /// Ascending `(task, class)` order.
    pub scores: Vec<ClassScore>,
    /// Adapter-block applications spent on this query.
    pub passes: usize,
}

fn decide(scores: Vec<ClassScore>, passes: usize) -> Result<Prediction> {
    let mut best: Option<&ClassScore> = None;
    for s in &scores {
        if best.is_none_or(|b| s.score > b.score) {
            best = Some(s);
        }
    }
    let best = best.ok_or_else(|| Error::Protocol("no prototypes to score against".into()))?;
    Ok(Prediction {
        class: best.class,
        task: best.task,
        passes,
        scores,
    })
}

fn score_task(store: &PrototypeStore, task: usize, feature: &[f64], out: &mut Vec<ClassScore>) {
    for (class, proto) in store.for_task(task) {
        out.push(ClassScore {
            task,
            class,
            score: cosine(proto, feature),
        });
    }
}

fn seen_tasks(model: &Model, store: &PrototypeStore) -> Result<Vec<usize>> {
    if store.is_empty() {
        return Err(Error::Protocol("prototype store is empty".into()));
    }
    let tasks = store.tasks();
    for &t in &tasks {
        model.task(t)?;
    }
    Ok(tasks)
}

/// Predicts the class of `image`; the shared prefix is computed once and
/// reused for every task's continuation.
pub fn predict(model: &Model, store: &PrototypeStore, image: &[f32]) -> Result<Prediction> {
    let tasks = seen_tasks(model, store)?;
    if !model.shared_is_prefix() {
        return predict_naive(model, store, image);
    }
    let tokens = model.backbone().patch_embed(image)?;
    let l = model.adapter_config().position;
    let n = model.num_blocks();
    let mut tape = Tape::new();
    let z0 = tape.constant(&tokens.tokens);
    let base = Route {
        shared: model.shared(),
        shared_trainable: false,
        specific: None,
        specific_trainable: false,
    };
    let (zl, mut passes) = model.run_blocks(&mut tape, z0, 1..=l, base)?;
    let mut scores = Vec::new();
    for t in tasks {
        let ta = model.task(t)?;
        let route = Route {
            specific: Some((&ta.specific, &ta.weights)),
            ..base
        };
        let (z, applied) = model.run_blocks(&mut tape, zl, l + 1..=n, route)?;
        passes += applied;
        let cls = model.backbone().cls_on_tape(&mut tape, z)?;
        score_task(store, t, tape.value(cls).data(), &mut scores);
    }
    decide(scores, passes)
}

/// Reference predictor that reruns every block for every task.
pub fn predict_naive(model: &Model, store: &PrototypeStore, image: &[f32]) -> Result<Prediction> {
    let tasks = seen_tasks(model, store)?;
    let tokens = model.backbone().patch_embed(image)?;
    let n = model.num_blocks();
    let mut passes = 0;
    let mut scores = Vec::new();
    for t in tasks {
        let ta = model.task(t)?;
        let route = Route {
            shared: model.shared(),
            shared_trainable: false,
            specific: Some((&ta.specific, &ta.weights)),
            specific_trainable: false,
        };
        let mut tape = Tape::new();
        let z0 = tape.constant(&tokens.tokens);
        let (z, applied) = model.run_blocks(&mut tape, z0, 1..=n, route)?;
        passes += applied;
        let cls = model.backbone().cls_on_tape(&mut tape, z)?;
        score_task(store, t, tape.value(cls).data(), &mut scores);
    }
    decide(scores, passes)
}

/// Fraction of `(image, class)` pairs predicted correctly.
pub fn accuracy(
    model: &Model,
    store: &PrototypeStore,
    samples: &[(&[f32], u32)],
    exec: Execution,
) -> Result<Accuracy> {
    if samples.is_empty() {
        return Err(Error::Data("no evaluation samples".into()));
    }
    let preds = exec.map(samples, |_, (img, _)| predict(model, store, img));
    let mut correct = 0;
    let mut passes = Vec::with_capacity(samples.len());
    for ((_, class), p) in samples.iter().zip(preds) {
        let p = p?;
        correct += usize::from(p.class == *class);
        passes.push(p.passes);
    }
    Ok(Accuracy {
        accuracy: correct as f64 / samples.len() as f64,
        correct,
        total: samples.len(),
        passes,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Accuracy {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub passes: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pass_count_examples() {
        assert_eq!(adapter_pass_count(0, 12, 20).unwrap(), 240);
        assert_eq!(adapter_pass_count(12, 12, 20).unwrap(), 12);
        assert_eq!(adapter_pass_count(6, 12, 20).unwrap(), 126);
        assert!(matches!(adapter_pass_count(13, 12, 1), Err(Error::Range { .. })));
    }

    #[test]
    fn cosine_degenerate_and_scale() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), -1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 0.0]), -1.0);
        assert!((cosine(&[2.0, 0.0], &[5.0, 0.0]) - 1.0).abs() < 1e-15);
        assert!((cosine(&[1.0, 1.0], &[-1.0, -1.0]) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn ties_go_to_lowest_task_then_class() {
        let s = |task, class, score| ClassScore { task, class, score };
        let p = decide(vec![s(1, 3, 0.5), s(1, 4, 0.9), s(2, 0, 0.9)], 0).unwrap();
        assert_eq!((p.task, p.class), (1, 4));
        assert!(decide(vec![], 0).is_err());
    }

    #[test]
    fn store_is_append_only_and_exports_json() {
        let mut store = PrototypeStore::new();
        store.insert(1, 0, vec![1.0, 2.0]).unwrap();
        store.insert(2, 5, vec![0.5]).unwrap();
        assert!(store.insert(1, 0, vec![3.0]).is_err());
        assert_eq!(store.tasks(), vec![1, 2]);
        let json = store.to_json();
        assert_eq!(json["1.0"], serde_json::json!([1.0, 2.0]));
        assert_eq!(json["2.5"], serde_json::json!([0.5]));
    }
}
