//! Exact computations on enumerable instances: the state graph, terminal
//! distributions by forward DP, string likelihood by segmentation DP, path
//! counts, distances and text metrics.

pub mod toy;

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::corpus::{TokenId, Vocab};
use crate::dynvocab::{ActionId, ActionKind, DynamicVocabulary};
use crate::error::{Error, Result};
use crate::nn::mat::log_sum_exp;
use crate::policy::{log_backward_prob, ContentDistribution, ForwardPolicy, State};
use crate::reward::RewardFn;

pub const DEFAULT_BOUND: u128 = 1_000_000;

/// Terminal probabilities keyed by generated tokens.
pub type Distribution = BTreeMap<Vec<TokenId>, f64>;

/// `Σ_{l=0..max_len} n^l`, saturating.
pub fn terminal_count(num_tokens: usize, max_len: usize) -> u128 {
    let mut total: u128 = 0;
    let mut layer: u128 = 1;
    for _ in 0..=max_len {
        total = total.saturating_add(layer);
        layer = layer.saturating_mul(num_tokens as u128);
    }
    total
}

fn fixed_tokens(vocab: &DynamicVocabulary) -> Vec<(TokenId, ActionId)> {
    let mut t: Vec<(TokenId, ActionId)> = vocab
        .actions()
        .iter()
        .enumerate()
        .filter(|(_, a)| a.kind == ActionKind::FixedToken)
        .map(|(i, a)| (a.content[0], i))
        .collect();
    t.sort_unstable();
    t
}

/// All states reachable from the prefix within `max_len` generated tokens,
/// ordered by generated length then token ids, with every content edge.
#[derive(Clone, Debug)]
pub struct EnumeratedSpace {
    pub prefix: Vec<TokenId>,
    pub max_len: usize,
    pub states: Vec<Vec<TokenId>>,
    index: HashMap<Vec<TokenId>, usize>,
    /// `(from, action, to)`, sorted by `from`.
    pub edges: Vec<(usize, ActionId, usize)>,
}

impl EnumeratedSpace {
    pub fn build(vocab: &DynamicVocabulary, prefix: &[TokenId], max_len: usize, bound: u128) -> Result<Self> {
        let tokens = fixed_tokens(vocab);
        let count = terminal_count(tokens.len(), max_len);
        if count > bound {
            return Err(Error::EnumerationBound { count, bound });
        }
        let mut states: Vec<Vec<TokenId>> = vec![Vec::new()];
        let mut start = 0;
        for _ in 0..max_len {
            let end = states.len();
            for s in start..end {
                for &(t, _) in &tokens {
                    let mut next = states[s].clone();
                    next.push(t);
                    states.push(next);
                }
            }
            start = end;
        }
        let index: HashMap<Vec<TokenId>, usize> = states.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
        let mut edges = Vec::new();
        for (i, s) in states.iter().enumerate() {
            for (a, act) in vocab.actions().iter().enumerate() {
                if act.kind == ActionKind::Terminal || s.len() + act.content.len() > max_len {
                    continue;
                }
                let mut next = s.clone();
                next.extend_from_slice(&act.content);
                if let Some(&j) = index.get(&next) {
                    edges.push((i, a, j));
                }
            }
        }
        Ok(Self {
            prefix: prefix.to_vec(),
            max_len,
            states,
            index,
            edges,
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn index_of(&self, generated: &[TokenId]) -> Option<usize> {
        self.index.get(generated).copied()
    }

    pub fn state(&self, i: usize) -> State {
        State {
            prefix: self.prefix.clone(),
            generated: self.states[i].clone(),
            terminated: false,
        }
    }

    /// Every state can be closed with ⊤.
    pub fn terminal_states(&self) -> Vec<State> {
        (0..self.len()).map(|i| self.state(i).terminate()).collect()
    }

    /// Number of distinct action paths from the initial state to each state.
    pub fn in_path_counts(&self) -> Vec<u128> {
        let mut c = vec![0u128; self.len()];
        c[0] = 1;
        for &(i, _, j) in &self.edges {
            c[j] += c[i];
        }
        c
    }

    pub fn in_degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.len()];
        for &(_, _, j) in &self.edges {
            d[j] += 1;
        }
        d
    }
}

/// Generated sequences of every terminal state, in topological order.
pub fn enumerate_terminal_states(
    vocab: &DynamicVocabulary,
    prefix: &[TokenId],
    max_len: usize,
    bound: u128,
) -> Result<Vec<Vec<TokenId>>> {
    Ok(EnumeratedSpace::build(vocab, prefix, max_len, bound)?.states)
}

/// Forward policy stored as a table over the states of an enumerated space.
#[derive(Clone, Debug)]
pub struct TablePolicy {
    vocab: DynamicVocabulary,
    max_len: usize,
    prefix: Vec<TokenId>,
    table: HashMap<Vec<TokenId>, ContentDistribution>,
}

impl TablePolicy {
    /// Evaluates `policy` at every state of `space`.
    pub fn tabulate<P: ForwardPolicy + ?Sized>(policy: &P, space: &EnumeratedSpace) -> Result<Self> {
        let mut table = HashMap::with_capacity(space.len());
        for s in space.states.iter().rev() {
            if table.contains_key(s) {
                continue;
            }
            let dists = policy.distributions_along(&space.prefix, s)?;
            for (j, d) in dists.into_iter().enumerate() {
                table.entry(s[..j].to_vec()).or_insert(d);
            }
        }
        Ok(Self {
            vocab: policy.vocab().clone(),
            max_len: policy.max_len(),
            prefix: space.prefix.clone(),
            table,
        })
    }

    pub fn log_probs(&self, generated: &[TokenId]) -> Option<&[f64]> {
        self.table.get(generated).map(|d| d.log_probs.as_slice())
    }
}

impl ForwardPolicy for TablePolicy {
    fn vocab(&self) -> &DynamicVocabulary {
        &self.vocab
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn distributions_along(&self, prefix: &[TokenId], generated: &[TokenId]) -> Result<Vec<ContentDistribution>> {
        if prefix != self.prefix.as_slice() {
            return Err(Error::UnknownPrefix);
        }
        (0..=generated.len())
            .map(|j| {
                self.table
                    .get(&generated[..j])
                    .cloned()
                    .ok_or_else(|| Error::InvalidState("state outside the tabulated space".into()))
            })
            .collect()
    }
}

/// The forward policy whose flows balance exactly against `reward` under the
/// uniform-suffix backward policy: `F(s) = R(s⊤) + Σ_a F(s·a)·P_B(s | s·a)`,
/// `P_F(a | s) = F(s·a)·P_B(s | s·a) / F(s)`, `P_F(⊤ | s) = R(s⊤) / F(s)`.
pub fn consistent_policy(
    vocab: &DynamicVocabulary,
    space: &EnumeratedSpace,
    reward: &dyn RewardFn,
) -> Result<TablePolicy> {
    let n = space.len();
    let mut log_r = Vec::with_capacity(n);
    for i in 0..n {
        log_r.push(reward.log_reward(&space.state(i).terminate())?);
    }
    let log_pb: Vec<f64> = space.states.iter().map(|g| log_backward_prob(vocab, g)).collect();
    let mut out: Vec<Vec<(ActionId, usize)>> = vec![Vec::new(); n];
    for &(i, a, j) in &space.edges {
        out[i].push((a, j));
    }
    let mut log_f = vec![f64::NEG_INFINITY; n];
    for i in (0..n).rev() {
        let terms = std::iter::once(log_r[i]).chain(out[i].iter().map(|&(_, j)| log_f[j] + log_pb[j]));
        log_f[i] = log_sum_exp(terms.collect::<Vec<_>>());
    }
    let mut table = HashMap::with_capacity(n);
    for i in 0..n {
        let mut lp = vec![f64::NEG_INFINITY; vocab.len()];
        lp[vocab.terminal()] = log_r[i] - log_f[i];
        for &(a, j) in &out[i] {
            lp[a] = log_f[j] + log_pb[j] - log_f[i];
        }
        table.insert(space.states[i].clone(), ContentDistribution { log_probs: lp });
    }
    Ok(TablePolicy {
        vocab: vocab.clone(),
        max_len: space.max_len,
        prefix: space.prefix.clone(),
        table,
    })
}

/// Terminal distribution by forward DP over the state graph.
pub fn exact_terminal_distribution<P: ForwardPolicy + ?Sized>(policy: &P, space: &EnumeratedSpace) -> Result<Distribution> {
    let vocab = policy.vocab();
    let table = TablePolicy::tabulate(policy, space)?;
    let mut rho = vec![0.0; space.len()];
    rho[0] = 1.0;
    let mut out = Distribution::new();
    let mut e = 0;
    for i in 0..space.len() {
        let lp = table.log_probs(&space.states[i]).expect("tabulated");
        while e < space.edges.len() && space.edges[e].0 == i {
            let (_, a, j) = space.edges[e];
            rho[j] += rho[i] * lp[a].exp();
            e += 1;
        }
        out.insert(space.states[i].clone(), rho[i] * lp[vocab.terminal()].exp());
    }
    Ok(out)
}

/// `log` of the probability that the policy generates exactly `text` and
/// stops, summed over every segmentation of `text` into vocabulary contents.
pub fn marginal_log_likelihood<P: ForwardPolicy + ?Sized>(text: &[TokenId], policy: &P, prefix: &[TokenId]) -> Result<f64> {
    let vocab = policy.vocab();
    if text.len() > policy.max_len() {
        return Ok(f64::NEG_INFINITY);
    }
    let dists = policy.distributions_along(prefix, text)?;
    let mut m = vec![f64::NEG_INFINITY; text.len() + 1];
    m[0] = 0.0;
    for j in 1..=text.len() {
        let terms: Vec<f64> = vocab
            .actions_ending_at(text, j)
            .into_iter()
            .map(|a| {
                let i = j - vocab.action(a).content.len();
                m[i] + dists[i].log_probs[a]
            })
            .collect();
        m[j] = log_sum_exp(terms);
    }
    Ok(m[text.len()] + dists[text.len()].log_probs[vocab.terminal()])
}

pub fn marginal_likelihood<P: ForwardPolicy + ?Sized>(text: &[TokenId], policy: &P, prefix: &[TokenId]) -> Result<f64> {
    Ok(marginal_log_likelihood(text, policy, prefix)?.exp())
}

/// Number of action sequences whose concatenation is `text`.
pub fn count_segmentations(text: &[TokenId], vocab: &DynamicVocabulary) -> u128 {
    let mut c = vec![0u128; text.len() + 1];
    c[0] = 1;
    for j in 1..=text.len() {
        c[j] = vocab
            .actions_ending_at(text, j)
            .into_iter()
            .map(|a| c[j - vocab.action(a).content.len()])
            .sum();
    }
    c[text.len()]
}

/// `R / Z` over every terminal state of `space`.
pub fn reward_distribution(space: &EnumeratedSpace, reward: &dyn RewardFn) -> Result<Distribution> {
    let mut logs = Vec::with_capacity(space.len());
    for s in space.terminal_states() {
        logs.push(reward.log_reward(&s)?);
    }
    let log_z = log_sum_exp(logs.clone());
    Ok(space
        .states
        .iter()
        .cloned()
        .zip(logs)
        .map(|(g, l)| (g, (l - log_z).exp()))
        .collect())
}

/// `½ Σ |p − q|`; keys missing on one side count as zero mass.
pub fn tv_distance<K: Ord>(p: &BTreeMap<K, f64>, q: &BTreeMap<K, f64>) -> f64 {
    let keys: std::collections::BTreeSet<&K> = p.keys().chain(q.keys()).collect();
    0.5 * keys
        .into_iter()
        .map(|k| (p.get(k).copied().unwrap_or(0.0) - q.get(k).copied().unwrap_or(0.0)).abs())
        .sum::<f64>()
}

/// `100 · Π_{n=2..4} (1 − Rep-n / 100)`, where Rep-n is the percentage of
/// duplicate n-grams.
pub fn diversity<T: std::hash::Hash + Eq>(tokens: &[T]) -> f64 {
    let mut factor = 1.0;
    for n in 2..=4 {
        if tokens.len() < n {
            continue;
        }
        let total = tokens.len() - n + 1;
        let unique: HashSet<&[T]> = tokens.windows(n).collect();
        factor *= unique.len() as f64 / total as f64;
    }
    100.0 * factor
}

/// Index of the option with the highest marginal likelihood; ties go to the
/// lower index.
pub fn choose_option<P: ForwardPolicy + ?Sized>(prompt: &[TokenId], options: &[Vec<TokenId>], policy: &P) -> Result<usize> {
    if options.is_empty() {
        return Err(Error::EmptyInput("options"));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, o) in options.iter().enumerate() {
        let l = marginal_log_likelihood(o, policy, prompt)?;
        if i == 0 || l > best.1 {
            best = (i, l);
        }
    }
    Ok(best.0)
}

/// Distribution as a JSON object from space-joined surfaces to probability.
pub fn distribution_json(dist: &Distribution, vocab: &Vocab) -> serde_json::Value {
    let map: serde_json::Map<String, serde_json::Value> = dist
        .iter()
        .map(|(k, &v)| (vocab.decode(k), serde_json::Value::from(v)))
        .collect();
    serde_json::Value::Object(map)
}
