//! Synthetic keyed-aggregation classification tasks.
//!
//! Every sequence has the layout `[cue_a, cue_b, DELIM, s_1 .. s_n, MASK]`.
//! The label says which of two key symbols occurs more often among the
//! `s_i`. In the cued variant (used for backbone pretraining) the keys are
//! written in the cue slots; in the fixed variants the cue slots hold `PAD`
//! and the key pair is a property of the task, so a prompt has to supply it.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, StreamRng};

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const DELIM: usize = 2;
pub const FIRST_SYMBOL: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Rule {
    /// Keys are drawn per sequence and written into the cue slots.
    CuedMajority,
    /// Keys are fixed for the task; cue slots hold `PAD`.
    FixedMajority { first: usize, second: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub rule: Rule,
    /// Total sequence length including cue slots, delimiter and mask.
    pub seq_len: usize,
    pub vocab: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub data_seed: u64,
    /// Backbone blocks whose tokens may read prompt slots; `None` = all.
    #[serde(default)]
    pub visibility_window: Option<Vec<usize>>,
}

impl TaskSpec {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let key = |k: &str| format!("{prefix}.{k}");
        if self.seq_len < 6 {
            return Err(Error::config(key("seq_len"), "need at least 6 positions"));
        }
        if self.vocab < FIRST_SYMBOL + 4 {
            return Err(Error::config(key("vocab"), "too few symbols"));
        }
        if self.train < 2 {
            return Err(Error::config(key("train"), "need at least 2 training samples"));
        }
        if self.dev == 0 || self.test == 0 {
            return Err(Error::config(key("dev"), "dev and test splits must be non-empty"));
        }
        if let Rule::FixedMajority { first, second } = self.rule {
            for (k, v) in [("rule.first", first), ("rule.second", second)] {
                if v < FIRST_SYMBOL || v >= self.vocab {
                    return Err(Error::config(key(k), format!("{v} is not a symbol id")));
                }
            }
            if first == second {
                return Err(Error::config(key("rule.second"), "keys must differ"));
            }
        }
        Ok(())
    }

    fn body_len(&self) -> usize {
        self.seq_len - 4
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Dev,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
    #[serde(skip)]
    pub split: Option<SplitTag>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

pub const NUM_LABELS: usize = 2;

fn sample_example(spec: &TaskSpec, label: usize, rng: &mut StreamRng) -> Example {
    let n = spec.body_len();
    let (a, b, cue) = match spec.rule {
        Rule::CuedMajority => {
            let a = rng.gen_range(FIRST_SYMBOL..spec.vocab);
            let mut b = rng.gen_range(FIRST_SYMBOL..spec.vocab - 1);
            if b >= a {
                b += 1;
            }
            (a, b, [a, b])
        }
        Rule::FixedMajority { first, second } => (first, second, [PAD, PAD]),
    };
    // Strictly fewer occurrences for the losing key; ties never occur.
    let lo = rng.gen_range(0..=(n - 1) / 2);
    let hi = rng.gen_range(lo + 1..=n - lo);
    let (count_a, count_b) = if label == 1 { (lo, hi) } else { (hi, lo) };
    let mut body = Vec::with_capacity(n);
    body.extend(std::iter::repeat(a).take(count_a));
    body.extend(std::iter::repeat(b).take(count_b));
    while body.len() < n {
        let s = rng.gen_range(FIRST_SYMBOL..spec.vocab);
        if s != a && s != b {
            body.push(s);
        }
    }
    body.shuffle(rng);
    let mut tokens = Vec::with_capacity(spec.seq_len);
    tokens.extend(cue);
    tokens.push(DELIM);
    tokens.extend(body);
    tokens.push(MASK);
    Example {
        tokens,
        label,
        split: None,
    }
}

impl Dataset {
    /// Deterministic generation from `spec.data_seed`. Labels alternate so
    /// every split is balanced, and no token sequence appears in two splits.
    pub fn generate(spec: &TaskSpec) -> Result<Self> {
        spec.validate("task")?;
        let mut rng = stream(spec.data_seed, &format!("data/{}", spec.name));
        let mut seen = HashSet::new();
        let mut draw = |count: usize, tag: SplitTag, rng: &mut StreamRng| {
            let mut out = Vec::with_capacity(count);
            let mut attempts = 0usize;
            while out.len() < count {
                attempts += 1;
                if attempts > count * 1000 {
                    return Err(Error::config("task.seq_len", "cannot draw enough distinct sequences"));
                }
                let mut ex = sample_example(spec, out.len() % NUM_LABELS, rng);
                if seen.insert(ex.tokens.clone()) {
                    ex.split = Some(tag);
                    out.push(ex);
                }
            }
            out.shuffle(rng);
            Ok(out)
        };
        let train = draw(spec.train, SplitTag::Train, &mut rng)?;
        let dev = draw(spec.dev, SplitTag::Dev, &mut rng)?;
        let test = draw(spec.test, SplitTag::Test, &mut rng)?;
        Ok(Self {
            spec: spec.clone(),
            train,
            dev,
            test,
        })
    }

    pub fn split(&self, tag: SplitTag) -> &[Example] {
        match tag {
            SplitTag::Train => &self.train,
            SplitTag::Dev => &self.dev,
            SplitTag::Test => &self.test,
        }
    }

    /// Writes `train.jsonl`, `dev.jsonl` and `test.jsonl` under `dir`.
    pub fn save_jsonl(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (tag, name) in [
            (SplitTag::Train, "train"),
            (SplitTag::Dev, "dev"),
            (SplitTag::Test, "test"),
        ] {
            let path = dir.join(format!("{name}.jsonl"));
            let mut buf = Vec::new();
            for ex in self.split(tag) {
                serde_json::to_writer(&mut buf, ex)?;
                buf.push(b'\n');
            }
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            f.write_all(&buf).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

pub fn parse_jsonl(text: &str, tag: SplitTag) -> Result<Vec<Example>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut ex: Example = serde_json::from_str(l)?;
            ex.split = Some(tag);
            Ok(ex)
        })
        .collect()
}

pub fn label_fraction(examples: &[Example], label: usize) -> f64 {
    examples.iter().filter(|e| e.label == label).count() as f64 / examples.len() as f64
}
