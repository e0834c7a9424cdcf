//! Offline transition datasets: generation from a behavior process,
//! distribution-shift resampling, train/validation splitting, and CSV
//! serialization.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Policy, StateEmbedding, TabularMdp};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// One logged step. States are stored as indices; feature encodings are
/// applied downstream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
    /// Whether `next_state` is absorbing (the episode ended here).
    pub terminal: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitTag {
    Train,
    Valid,
}

/// Ordered collection of logged transitions plus provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionDataset {
    pub transitions: Vec<Transition>,
    pub seed: u64,
    pub source: String,
    pub split: Option<SplitTag>,
}

impl TransitionDataset {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Random disjoint partition with `floor(ratio * n)` rows in train.
    /// The two parts preserve the original row order; their multiset union
    /// equals the input.
    pub fn split(&self, ratio: f64, seed: u64) -> Result<(TransitionDataset, TransitionDataset)> {
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(Error::invalid(format!("ratio must be in (0,1), got {ratio}")));
        }
        let n = self.len();
        if n < 2 {
            return Err(Error::invalid("dataset smaller than 2 rows cannot be split"));
        }
        let n_train = (ratio * n as f64).floor() as usize;
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = stream_rng(seed, Stream::Split);
        idx.shuffle(&mut rng);
        let mut train_idx = idx[..n_train].to_vec();
        let mut valid_idx = idx[n_train..].to_vec();
        train_idx.sort_unstable();
        valid_idx.sort_unstable();
        let pick = |ids: &[usize], tag: SplitTag| TransitionDataset {
            transitions: ids.iter().map(|&i| self.transitions[i]).collect(),
            seed: self.seed,
            source: format!("{}/{:?}", self.source, tag),
            split: Some(tag),
        };
        Ok((
            pick(&train_idx, SplitTag::Train),
            pick(&valid_idx, SplitTag::Valid),
        ))
    }

    /// Writes the dataset as CSV with header `s_0,a,r,sp_0,terminal`.
    /// Reals use the shortest decimal that round-trips exactly.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        writeln!(w, "s_0,a,r,sp_0,terminal")?;
        for t in &self.transitions {
            writeln!(
                w,
                "{},{},{},{},{}",
                t.state, t.action, t.reward, t.next_state, t.terminal
            )?;
        }
        w.flush()?;
        Ok(())
    }

    /// Parses a CSV produced by [`save_csv`]. Malformed rows report their
    /// 1-based line number.
    pub fn load_csv(path: &Path) -> Result<TransitionDataset> {
        let file = std::fs::File::open(path)?;
        let reader = BufReader::new(file);
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse {
                line: 1,
                message: "empty file, expected header".into(),
            })??;
        if header.trim() != "s_0,a,r,sp_0,terminal" {
            return Err(Error::Parse {
                line: 1,
                message: format!("unexpected header `{header}`"),
            });
        }
        let mut transitions = Vec::new();
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("expected 5 fields, got {}", fields.len()),
                });
            }
            let parse_usize = |s: &str, what: &str| {
                s.trim().parse::<usize>().map_err(|e| Error::Parse {
                    line: lineno,
                    message: format!("bad {what} `{s}`: {e}"),
                })
            };
            let reward = fields[2].trim().parse::<f64>().map_err(|e| Error::Parse {
                line: lineno,
                message: format!("bad reward `{}`: {e}", fields[2]),
            })?;
            if !reward.is_finite() {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("non-finite reward `{}`", fields[2]),
                });
            }
            let terminal = match fields[4].trim() {
                "true" | "1" => true,
                "false" | "0" => false,
                other => {
                    return Err(Error::Parse {
                        line: lineno,
                        message: format!("bad terminal flag `{other}`"),
                    })
                }
            };
            transitions.push(Transition {
                state: parse_usize(fields[0], "state")?,
                action: parse_usize(fields[1], "action")?,
                reward,
                next_state: parse_usize(fields[3], "next state")?,
                terminal,
            });
        }
        Ok(TransitionDataset {
            transitions,
            seed: 0,
            source: path.display().to_string(),
            split: None,
        })
    }
}

/// Rolls episodes from `mdp.initial_dist` under `policy`, pooling
/// transitions until exactly `n_transitions` are collected (truncating
/// mid-episode, never padding). Pure function of `(mdp, policy, n, seed)`.
pub fn generate_dataset(
    mdp: &TabularMdp,
    policy: &Policy,
    n_transitions: usize,
    seed: u64,
) -> Result<TransitionDataset> {
    if n_transitions == 0 {
        return Err(Error::invalid("n_transitions must be at least 1"));
    }
    let mut rng = stream_rng(seed, Stream::Rollout);
    let mut transitions = Vec::with_capacity(n_transitions);
    while transitions.len() < n_transitions {
        let mut s = mdp.sample_initial(&mut rng);
        while !mdp.terminal[s] && transitions.len() < n_transitions {
            let a = policy.sample(s, &mut rng);
            let r = mdp.reward[[s, a]];
            let sp = mdp.sample_next(s, a, &mut rng);
            transitions.push(Transition {
                state: s,
                action: a,
                reward: r,
                next_state: sp,
                terminal: mdp.terminal[sp],
            });
            s = sp;
        }
    }
    Ok(TransitionDataset {
        transitions,
        seed,
        source: "rollout".into(),
        split: None,
    })
}

/// Chain-specific wrapper: the chain has a single action, so the behavior
/// process is fully determined by the MDP.
pub fn generate_chain_dataset(
    mdp: &TabularMdp,
    n_transitions: usize,
    seed: u64,
) -> Result<TransitionDataset> {
    if mdp.n_actions != 1 {
        return Err(Error::invalid(
            "generate_chain_dataset expects a single-action MDP",
        ));
    }
    let policy = Policy::single_action(mdp.n_states);
    let mut ds = generate_dataset(mdp, &policy, n_transitions, seed)?;
    ds.source = "chain-rollout".into();
    Ok(ds)
}

/// Creates a shifted offline dataset: states drawn i.i.d. over non-terminal
/// states with weight proportional to `exp(alpha * position)`, one simulated
/// step per drawn state. `alpha = 0` recovers the uniform draw.
pub fn resample_shifted(
    mdp: &TabularMdp,
    embedding: &StateEmbedding,
    policy: &Policy,
    alpha: f64,
    n_transitions: usize,
    seed: u64,
) -> Result<TransitionDataset> {
    if n_transitions == 0 {
        return Err(Error::invalid("n_transitions must be at least 1"));
    }
    if embedding.n_states() != mdp.n_states {
        return Err(Error::ShapeMismatch("embedding does not match MDP".into()));
    }
    let states: Vec<usize> = (0..mdp.n_states).filter(|&s| !mdp.terminal[s]).collect();
    if states.is_empty() {
        return Err(Error::invalid("MDP has no non-terminal states"));
    }
    // Stabilized softmax weights over embedded positions.
    let logits: Vec<f64> = states
        .iter()
        .map(|&s| alpha * embedding.embed(s))
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let cdf: Vec<f64> = weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w / total;
            Some(*acc)
        })
        .collect();

    let mut rng = stream_rng(seed, Stream::Rollout);
    let mut transitions = Vec::with_capacity(n_transitions);
    for _ in 0..n_transitions {
        let u: f64 = rng.gen();
        let k = cdf.partition_point(|&c| c < u).min(states.len() - 1);
        let s = states[k];
        let a = policy.sample(s, &mut rng);
        let r = mdp.reward[[s, a]];
        let sp = mdp.sample_next(s, a, &mut rng);
        transitions.push(Transition {
            state: s,
            action: a,
            reward: r,
            next_state: sp,
            terminal: mdp.terminal[sp],
        });
    }
    Ok(TransitionDataset {
        transitions,
        seed,
        source: format!("shifted(alpha={alpha})"),
        split: None,
    })
}

/// Empirical state frequencies of the dataset's source states.
pub fn state_histogram(ds: &TransitionDataset, n_states: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_states];
    for t in &ds.transitions {
        counts[t.state] += 1;
    }
    let n = ds.len() as f64;
    counts.iter().map(|&c| c as f64 / n).collect()
}
