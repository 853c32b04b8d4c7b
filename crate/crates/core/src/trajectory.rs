//! Episode traces and their JSON-lines form.
//!
//! One JSONL record per primitive step:
//! `{"episode":0,"t":0,"x":..,"y":..,"vx":..,"vy":..,"ax":..,"ay":..,"reward":..,"done":false}`
//! where (x, y, vx, vy) describe the state the action was taken in.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::PrimitiveAction;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: u32,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub ax: f64,
    pub ay: f64,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<StepRecord>,
    pub map_size: f64,
    pub start: [f64; 2],
    pub goal: [f64; 2],
}

impl Trajectory {
    pub fn actions(&self) -> Vec<PrimitiveAction> {
        self.steps
            .iter()
            .map(|s| PrimitiveAction::new(s.ax, s.ay))
            .collect()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Line {
    episode: usize,
    #[serde(flatten)]
    step: StepRecord,
}

/// Per-episode metadata stored next to the step lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub id: usize,
    pub map_size: f64,
    pub start: [f64; 2],
    pub goal: [f64; 2],
    pub len: usize,
}

pub fn write_jsonl(path: &Path, trajectories: &[Trajectory]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for (episode, traj) in trajectories.iter().enumerate() {
        for step in &traj.steps {
            let line = Line {
                episode,
                step: *step,
            };
            serde_json::to_writer(&mut f, &line)?;
            f.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Reads step lines back; episode metadata comes from the manifest.
pub fn read_jsonl(path: &Path, metas: &[EpisodeMeta]) -> Result<Vec<Trajectory>> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut per_episode: Vec<Vec<StepRecord>> = vec![Vec::new(); metas.len()];
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Line = serde_json::from_str(&line)?;
        let slot = per_episode
            .get_mut(rec.episode)
            .ok_or_else(|| Error::config(format!("episode {} not in manifest", rec.episode)))?;
        slot.push(rec.step);
    }
    metas
        .iter()
        .zip(per_episode)
        .map(|(m, steps)| {
            if steps.len() != m.len {
                return Err(Error::config(format!(
                    "episode {}: manifest says {} steps, file has {}",
                    m.id,
                    m.len,
                    steps.len()
                )));
            }
            Ok(Trajectory {
                steps,
                map_size: m.map_size,
                start: m.start,
                goal: m.goal,
            })
        })
        .collect()
}
