//! Synthetic multiple-choice task families, record I/O and episodic
//! sampling.
//!
//! Every task is generated from a [`Rule`]: a family plus hidden
//! parameters. The prompt alone never reveals those parameters, so a model
//! has to infer them from a handful of labelled examples. Within a family
//! the hidden `mode` flips which option is correct, so the average over
//! tasks carries no information about any single task.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SPECIALS: [&str; 8] = ["<bos>", "=", "succ", "par", "cr", "maj", "even", "odd"];
const DIGITS: usize = 4;

/// Fixed 64-symbol vocabulary shared by every suite.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        let mut symbols: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        symbols.extend(('a'..='z').map(String::from));
        symbols.extend(('A'..='Z').map(String::from));
        symbols.extend((0..DIGITS).map(|d| d.to_string()));
        let index = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Self { symbols, index }
    }
}

impl Vocab {
    pub const BOS: usize = 0;
    pub const EQ: usize = 1;
    pub const SUCC: usize = 2;
    pub const PAR: usize = 3;
    pub const CR: usize = 4;
    pub const MAJ: usize = 5;
    pub const EVEN: usize = 6;
    pub const ODD: usize = 7;

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    /// Token id of the `i`-th letter of the lower (`upper = false`) or
    /// upper-case alphabet.
    pub fn letter(upper: bool, i: usize) -> usize {
        SPECIALS.len() + if upper { 26 } else { 0 } + i % 26
    }

    pub fn digit(d: usize) -> usize {
        SPECIALS.len() + 52 + d
    }

    fn letter_index(token: usize) -> Option<(bool, usize)> {
        let base = SPECIALS.len();
        match token.checked_sub(base)? {
            i @ 0..=25 => Some((false, i)),
            i @ 26..=51 => Some((true, i - 26)),
            _ => None,
        }
    }

    pub fn encode(&self, text: &str, line: usize) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|t| {
                self.id(t).ok_or_else(|| Error::Vocabulary {
                    token: t.to_string(),
                    line,
                })
            })
            .collect()
    }

    pub fn decode(&self, tokens: &[usize]) -> Result<String> {
        let parts: Result<Vec<&str>> = tokens
            .iter()
            .map(|&t| {
                self.symbol(t).ok_or(Error::Index {
                    op: "Vocab::decode",
                    index: t,
                    bound: self.len(),
                })
            })
            .collect();
        Ok(parts?.join(" "))
    }
}

/// Task family plus the hidden parameters that fix its answers.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Rule {
    /// Answer is the letter `offset` places away in a cyclic alphabet of
    /// one case. Options are the letters at offsets −2, −1, +1, +2.
    Successor { upper: bool, offset: i8 },
    /// The prompt lists letter/digit pairs; answer is `even`/`odd` for the
    /// digit paired with `marker`, swapped when `flip` is set.
    Parity { marker: usize, flip: bool },
    /// Three distinct letters from `pool`; answer is the copy, the reverse
    /// or the left rotation, chosen by `mode`.
    CopyReverse { pool: [usize; 5], mode: u8 },
    /// Five symbols over `pair`; answer is the more frequent one, or the
    /// less frequent one when `minority` is set.
    Majority { pair: [usize; 2], minority: bool },
}

const SUCC_OFFSETS: [i8; 4] = [-2, -1, 1, 2];
const PARITY_PAIRS: usize = 3;
const MAJORITY_LEN: usize = 5;

impl Rule {
    pub fn family(&self) -> &'static str {
        match self {
            Rule::Successor { .. } => "successor",
            Rule::Parity { .. } => "parity",
            Rule::CopyReverse { .. } => "copy_reverse",
            Rule::Majority { .. } => "majority",
        }
    }

    pub fn n_modes(family: usize) -> usize {
        [4, 2, 3, 2][family % 4]
    }

    /// A rule of `family` (0..4) with the given mode and random surface
    /// parameters.
    pub fn random<R: Rng + ?Sized>(family: usize, mode: usize, rng: &mut R) -> Rule {
        match family % 4 {
            0 => Rule::Successor {
                upper: rng.gen(),
                offset: SUCC_OFFSETS[mode % 4],
            },
            1 => Rule::Parity {
                marker: Vocab::letter(rng.gen(), rng.gen_range(0..26)),
                flip: mode % 2 == 1,
            },
            2 => {
                let upper = rng.gen();
                let mut letters: Vec<usize> = (0..26).collect();
                letters.shuffle(rng);
                let mut pool = [0; 5];
                for (slot, &l) in pool.iter_mut().zip(&letters) {
                    *slot = Vocab::letter(upper, l);
                }
                pool.sort_unstable();
                Rule::CopyReverse {
                    pool,
                    mode: (mode % 3) as u8,
                }
            }
            _ => {
                let upper = rng.gen();
                let x = rng.gen_range(0..26);
                let y = (x + rng.gen_range(1..26)) % 26;
                let mut pair = [Vocab::letter(upper, x), Vocab::letter(upper, y)];
                pair.sort_unstable();
                Rule::Majority {
                    pair,
                    minority: mode % 2 == 1,
                }
            }
        }
    }

    /// Draws a prompt and its candidate options (correct one first).
    fn instance<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<usize>, Vec<Vec<usize>>) {
        match *self {
            Rule::Successor { upper, offset } => {
                let x = rng.gen_range(0..26usize);
                let at = |o: i8| vec![Vocab::letter(upper, (x as i64 + 26 + o as i64) as usize)];
                let mut options = vec![at(offset)];
                options.extend(SUCC_OFFSETS.iter().filter(|&&o| o != offset).map(|&o| at(o)));
                (
                    vec![Vocab::BOS, Vocab::SUCC, Vocab::letter(upper, x), Vocab::EQ],
                    options,
                )
            }
            Rule::Parity { marker, .. } => {
                let (upper, m) = Vocab::letter_index(marker).expect("marker is a letter");
                let mut others: Vec<usize> = (0..26).filter(|&i| i != m).collect();
                others.shuffle(rng);
                let mut letters = vec![marker];
                letters.extend(others[..PARITY_PAIRS - 1].iter().map(|&i| Vocab::letter(upper, i)));
                letters.shuffle(rng);
                let mut prompt = vec![Vocab::BOS, Vocab::PAR];
                for l in letters {
                    prompt.push(l);
                    prompt.push(Vocab::digit(rng.gen_range(0..DIGITS)));
                }
                prompt.push(Vocab::EQ);
                let answer = self.answer(&prompt).expect("well-formed prompt");
                let other = if answer[0] == Vocab::EVEN { Vocab::ODD } else { Vocab::EVEN };
                (prompt, vec![answer, vec![other]])
            }
            Rule::CopyReverse { pool, mode } => {
                let mut p = pool.to_vec();
                p.shuffle(rng);
                let x = &p[..3];
                let forms = [
                    x.to_vec(),
                    vec![x[2], x[1], x[0]],
                    vec![x[1], x[2], x[0]],
                ];
                let mut prompt = vec![Vocab::BOS, Vocab::CR];
                prompt.extend_from_slice(x);
                prompt.push(Vocab::EQ);
                let m = mode as usize;
                let mut options = vec![forms[m].clone()];
                options.extend((0..3).filter(|&i| i != m).map(|i| forms[i].clone()));
                (prompt, options)
            }
            Rule::Majority { pair, .. } => {
                let heavy = rng.gen_range(0..2);
                let n_heavy = rng.gen_range(MAJORITY_LEN / 2 + 1..=MAJORITY_LEN - 1);
                let mut seq = vec![pair[heavy]; n_heavy];
                seq.extend(std::iter::repeat_n(pair[1 - heavy], MAJORITY_LEN - n_heavy));
                seq.shuffle(rng);
                let mut prompt = vec![Vocab::BOS, Vocab::MAJ];
                prompt.extend(seq);
                prompt.push(Vocab::EQ);
                let answer = self.answer(&prompt).expect("well-formed prompt");
                let other = if answer[0] == pair[0] { pair[1] } else { pair[0] };
                (prompt, vec![answer, vec![other]])
            }
        }
    }

    /// The correct continuation for `prompt`, computed from the rule alone.
    pub fn answer(&self, prompt: &[usize]) -> Result<Vec<usize>> {
        let bad = || Error::Data(format!("prompt {prompt:?} does not fit rule {self:?}"));
        let body = prompt
            .get(2..prompt.len().saturating_sub(1))
            .filter(|_| prompt.len() >= 3 && prompt[0] == Vocab::BOS && prompt[prompt.len() - 1] == Vocab::EQ)
            .ok_or_else(bad)?;
        match *self {
            Rule::Successor { upper, offset } => {
                let (u, x) = body
                    .first()
                    .and_then(|&t| Vocab::letter_index(t))
                    .filter(|_| body.len() == 1)
                    .ok_or_else(bad)?;
                if u != upper {
                    return Err(bad());
                }
                Ok(vec![Vocab::letter(upper, (x as i64 + 26 + offset as i64) as usize)])
            }
            Rule::Parity { marker, flip } => {
                let pos = body.chunks(2).position(|c| c[0] == marker).ok_or_else(bad)?;
                let digit = body
                    .get(2 * pos + 1)
                    .and_then(|d| d.checked_sub(Vocab::digit(0)))
                    .filter(|&d| d < DIGITS)
                    .ok_or_else(bad)?;
                let odd = digit % 2 == 1;
                Ok(vec![if odd ^ flip { Vocab::ODD } else { Vocab::EVEN }])
            }
            Rule::CopyReverse { mode, .. } => {
                if body.len() != 3 {
                    return Err(bad());
                }
                Ok(match mode {
                    0 => body.to_vec(),
                    1 => vec![body[2], body[1], body[0]],
                    _ => vec![body[1], body[2], body[0]],
                })
            }
            Rule::Majority { pair, minority } => {
                let n0 = body.iter().filter(|&&t| t == pair[0]).count();
                let n1 = body.iter().filter(|&&t| t == pair[1]).count();
                if n0 + n1 != body.len() || n0 == n1 {
                    return Err(bad());
                }
                Ok(vec![if (n0 > n1) ^ minority { pair[0] } else { pair[1] }])
            }
        }
    }
}

/// One multiple-choice question.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub id: usize,
    pub prompt: Vec<usize>,
    pub options: Vec<Vec<usize>>,
    pub answer: usize,
}

impl Example {
    pub fn new(id: usize, prompt: Vec<usize>, options: Vec<Vec<usize>>, answer: usize) -> Result<Self> {
        if !(2..=4).contains(&options.len()) {
            return Err(Error::Data(format!("example {id}: {} options, need 2-4", options.len())));
        }
        if answer >= options.len() {
            return Err(Error::Data(format!(
                "example {id}: answer {answer} out of range for {} options",
                options.len()
            )));
        }
        if prompt.is_empty() || options.iter().any(Vec::is_empty) {
            return Err(Error::Data(format!("example {id}: empty prompt or option")));
        }
        for i in 0..options.len() {
            if options[i + 1..].contains(&options[i]) {
                return Err(Error::Data(format!("example {id}: duplicate options")));
            }
        }
        Ok(Self {
            id,
            prompt,
            options,
            answer,
        })
    }

    pub fn correct(&self) -> &[usize] {
        &self.options[self.answer]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub id: String,
    pub examples: Vec<Example>,
    /// Generating rule; `None` for ingested records.
    pub rule: Option<Rule>,
}

impl Task {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Fraction of examples whose marked answer agrees with the rule.
    pub fn oracle_accuracy(&self) -> Result<f64> {
        let rule = self
            .rule
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("task {} has no rule", self.id)))?;
        let mut hits = 0;
        for ex in &self.examples {
            let want = rule.answer(&ex.prompt)?;
            if ex.options.iter().position(|o| *o == want) == Some(ex.answer) {
                hits += 1;
            }
        }
        Ok(hits as f64 / self.len().max(1) as f64)
    }

    /// Accuracy of always picking the most frequent answer position.
    pub fn majority_class_accuracy(&self) -> f64 {
        let mut counts = [0usize; 4];
        for ex in &self.examples {
            counts[ex.answer] += 1;
        }
        *counts.iter().max().unwrap_or(&0) as f64 / self.len().max(1) as f64
    }

    pub fn max_tokens(&self) -> usize {
        self.examples
            .iter()
            .map(|e| e.prompt.len() + e.options.iter().map(Vec::len).max().unwrap_or(0))
            .max()
            .unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaDataset {
    pub seen: Vec<Task>,
    pub unseen: Vec<Task>,
    pub vocab: Vocab,
}

pub const MIN_EXAMPLES: usize = 40;

/// Builds `n` examples of `rule` with answer positions spread evenly.
pub fn generate_task(id: String, rule: Rule, n: usize, rng: &mut ChaCha8Rng) -> Result<Task> {
    let mut examples = Vec::with_capacity(n);
    let mut seen_prompts = HashSet::new();
    let mut positions = Vec::with_capacity(n);
    let mut attempts = 0;
    while examples.len() < n {
        let (prompt, mut options) = rule.instance(rng);
        attempts += 1;
        // Prefer distinct prompts; small instance spaces allow repeats.
        if !seen_prompts.insert(prompt.clone()) && attempts < 20 * n {
            continue;
        }
        if positions.is_empty() {
            let k = options.len();
            positions = (0..n).map(|i| i % k).collect();
            positions.shuffle(rng);
        }
        let pos = positions[examples.len()];
        let correct = options.remove(0);
        options.shuffle(rng);
        options.insert(pos, correct);
        examples.push(Example::new(examples.len(), prompt, options, pos)?);
    }
    Ok(Task {
        id,
        examples,
        rule: Some(rule),
    })
}

/// Deterministic suite of `n_seen` training tasks and `n_unseen` held-out
/// tasks. Held-out rules never coincide with a training rule.
pub fn generate_suite(seed: u64, n_seen: usize, n_unseen: usize, examples_per_task: usize) -> Result<MetaDataset> {
    if n_seen < 2 {
        return Err(Error::Config(format!("need at least 2 seen tasks, got {n_seen}")));
    }
    if examples_per_task < MIN_EXAMPLES {
        return Err(Error::Config(format!(
            "need at least {MIN_EXAMPLES} examples per task, got {examples_per_task}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rules: HashSet<Rule> = HashSet::new();
    let mut seen = Vec::with_capacity(n_seen);
    for i in 0..n_seen {
        let family = i % 4;
        let mode = (i / 4) % Rule::n_modes(family);
        let rule = fresh_rule(family, mode, &rules, &mut rng)?;
        rules.insert(rule.clone());
        let id = format!("seen-{i:02}-{}", rule.family());
        seen.push(generate_task(id, rule, examples_per_task, &mut rng)?);
    }
    let mut unseen = Vec::with_capacity(n_unseen);
    for j in 0..n_unseen {
        let family = (seed as usize + j) % 4;
        let mode = rng.gen_range(0..Rule::n_modes(family));
        let rule = fresh_rule(family, mode, &rules, &mut rng)?;
        rules.insert(rule.clone());
        let id = format!("unseen-{j:02}-{}", rule.family());
        unseen.push(generate_task(id, rule, examples_per_task, &mut rng)?);
    }
    Ok(MetaDataset {
        seen,
        unseen,
        vocab: Vocab::default(),
    })
}

fn fresh_rule(family: usize, mode: usize, taken: &HashSet<Rule>, rng: &mut ChaCha8Rng) -> Result<Rule> {
    for _ in 0..1000 {
        let r = Rule::random(family, mode, rng);
        if !taken.contains(&r) {
            return Ok(r);
        }
    }
    // Exhausted this mode; any unused mode of the family will do.
    for m in 0..Rule::n_modes(family) {
        for _ in 0..1000 {
            let r = Rule::random(family, m, rng);
            if !taken.contains(&r) {
                return Ok(r);
            }
        }
    }
    Err(Error::Config(format!("no unused rule left in family {family}")))
}

/// Solved instances per pretraining document; all share one rule, so the
/// hidden parameters can be read off earlier instances in context.
pub const DOC_INSTANCES: usize = 4;

/// Token stream of `n_docs` documents, each a run of solved instances of
/// one random rule, for next-token pretraining.
pub fn pretrain_corpus(seed: u64, n_docs: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for i in 0..n_docs {
        let family = i % 4;
        let mode = rng.gen_range(0..Rule::n_modes(family));
        let rule = Rule::random(family, mode, &mut rng);
        for _ in 0..DOC_INSTANCES {
            let (prompt, options) = rule.instance(&mut rng);
            out.extend(prompt);
            out.extend(&options[0]);
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct Record {
    prompt: String,
    options: Vec<String>,
    answer: usize,
}

/// Reads one example per line of `{"prompt", "options", "answer"}` JSON,
/// tokens separated by whitespace.
pub fn load_records(path: &Path, vocab: &Vocab) -> Result<Task> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut examples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            detail: e.to_string(),
        })?;
        let prompt = vocab.encode(&rec.prompt, line_no)?;
        let options = rec
            .options
            .iter()
            .map(|o| vocab.encode(o, line_no))
            .collect::<Result<Vec<_>>>()?;
        let ex = Example::new(examples.len(), prompt, options, rec.answer).map_err(|e| Error::Parse {
            line: line_no,
            detail: e.to_string(),
        })?;
        examples.push(ex);
    }
    if examples.is_empty() {
        return Err(Error::Data(format!("{} holds no records", path.display())));
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "records".into());
    Ok(Task {
        id,
        examples,
        rule: None,
    })
}

pub fn write_records(task: &Task, vocab: &Vocab, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for ex in &task.examples {
        let rec = Record {
            prompt: vocab.decode(&ex.prompt)?,
            options: ex.options.iter().map(|o| vocab.decode(o)).collect::<Result<_>>()?,
            answer: ex.answer,
        };
        serde_json::to_writer(&mut out, &rec).map_err(|e| Error::Format(e.to_string()))?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Support and query batches of example indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub support: Vec<Vec<usize>>,
    pub query: Vec<Vec<usize>>,
}

impl Episode {
    pub fn support_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.support.iter().flatten().copied()
    }

    pub fn query_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.query.iter().flatten().copied()
    }
}

/// Disjoint support and query batches drawn without replacement.
pub fn sample_episode(
    task: &Task,
    batch_size: usize,
    n_support: usize,
    n_query: usize,
    seed: u64,
) -> Result<Episode> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let need = batch_size * (n_support + n_query);
    if need > task.len() {
        return Err(Error::Data(format!(
            "task {} has {} examples, episode needs {need}",
            task.id,
            task.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..task.len()).collect();
    idx.shuffle(&mut rng);
    let mut batches = idx[..need].chunks(batch_size).map(<[usize]>::to_vec);
    let support = batches.by_ref().take(n_support).collect();
    let query = batches.collect();
    Ok(Episode { support, query })
}
