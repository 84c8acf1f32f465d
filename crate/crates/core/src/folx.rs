//! Logic explanations for entropy experts.
//!
//! Rules are distilled from the expert's own predictions: for each class the
//! concepts with enough attention are binarized at 0.5, every observed pattern
//! predicted as that class becomes a conjunction, and the union is simplified
//! by repeated single-variable absorption and subsumption removal.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::models::EntropyExpert;

pub const DEFAULT_ATTENTION_THRESHOLD: f64 = 0.5;

const MAX_ARITY: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Literal {
    pub concept: usize,
    pub positive: bool,
}

/// A conjunction of literals as two bitmasks: `mask` marks the concepts it
/// mentions, `values` their required truth values (`values ⊆ mask`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "Vec<Literal>", try_from = "Vec<Literal>")]
pub struct Conjunction {
    mask: u64,
    values: u64,
}

impl Conjunction {
    pub fn new(literals: &[Literal]) -> Result<Self> {
        let mut mask = 0u64;
        let mut values = 0u64;
        for lit in literals {
            if lit.concept >= MAX_ARITY {
                return Err(Error::invalid(format!("concept index {} exceeds {MAX_ARITY}", lit.concept)));
            }
            let bit = 1u64 << lit.concept;
            if mask & bit != 0 {
                if (values & bit != 0) != lit.positive {
                    return Err(Error::invalid(format!("concept {} appears with both polarities", lit.concept)));
                }
                continue;
            }
            mask |= bit;
            if lit.positive {
                values |= bit;
            }
        }
        Ok(Conjunction { mask, values })
    }

    pub fn literals(&self) -> Vec<Literal> {
        (0..MAX_ARITY)
            .filter(|&j| self.mask >> j & 1 == 1)
            .map(|j| Literal { concept: j, positive: self.values >> j & 1 == 1 })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.mask.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.mask == 0
    }

    pub fn mentions(&self, concept: usize) -> bool {
        concept < MAX_ARITY && self.mask >> concept & 1 == 1
    }

    /// True when the packed assignment `bits` satisfies every literal.
    pub fn satisfied_by(&self, bits: u64) -> bool {
        bits & self.mask == self.values
    }

    /// True when every assignment satisfying `other` satisfies `self`.
    fn subsumes(&self, other: &Conjunction) -> bool {
        self.mask & other.mask == self.mask && other.values & self.mask == self.values
    }

    fn sort_key(&self) -> (u32, u64, u64) {
        (self.mask.count_ones(), self.mask, self.values)
    }
}

impl From<Conjunction> for Vec<Literal> {
    fn from(c: Conjunction) -> Self {
        c.literals()
    }
}

impl TryFrom<Vec<Literal>> for Conjunction {
    type Error = Error;

    fn try_from(lits: Vec<Literal>) -> Result<Self> {
        Conjunction::new(&lits)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FOLRule {
    pub class: usize,
    /// Concepts eligible to appear, i.e. those passing the attention threshold.
    pub selected: Vec<usize>,
    pub dnf: Vec<Conjunction>,
    /// Covered samples the expert assigns to this class.
    pub support: usize,
    /// Fraction of covered samples on which "rule holds" agrees with
    /// "expert predicts this class".
    pub fidelity: f64,
    pub warning: Option<String>,
}

/// Packs the first `arity` entries of a concept vector, cutting at 0.5.
pub fn binarize(c: &[f64]) -> u64 {
    c.iter().take(MAX_ARITY).enumerate().filter(|(_, &v)| v >= 0.5).fold(0u64, |acc, (j, _)| acc | 1u64 << j)
}

pub fn pack(bits: &[bool]) -> u64 {
    bits.iter().take(MAX_ARITY).enumerate().filter(|(_, &b)| b).fold(0u64, |acc, (j, _)| acc | 1u64 << j)
}

pub fn rule_eval_packed(rule: &FOLRule, bits: u64) -> bool {
    rule.dnf.iter().any(|c| c.satisfied_by(bits))
}

/// True iff some conjunction of `rule` holds on the boolean concept vector.
pub fn rule_eval(rule: &FOLRule, c_bool: &[bool]) -> bool {
    rule_eval_packed(rule, pack(c_bool))
}

/// Single-variable absorption to a fixpoint, then subsumption removal.
///
/// Every merge combines two implicants of the input set, so the result
/// describes exactly the same boolean function.
pub fn simplify(terms: &[Conjunction]) -> Vec<Conjunction> {
    let mut current: BTreeSet<Conjunction> = terms.iter().copied().collect();
    loop {
        let mut merged_away: BTreeSet<Conjunction> = BTreeSet::new();
        let mut produced: BTreeSet<Conjunction> = BTreeSet::new();
        for t in &current {
            let mut m = t.mask;
            while m != 0 {
                let bit = m & m.wrapping_neg();
                m &= m - 1;
                let partner = Conjunction { mask: t.mask, values: t.values ^ bit };
                if current.contains(&partner) {
                    merged_away.insert(*t);
                    produced.insert(Conjunction { mask: t.mask & !bit, values: t.values & !bit });
                }
            }
        }
        if produced.is_empty() {
            break;
        }
        let next: BTreeSet<Conjunction> = current.difference(&merged_away).copied().chain(produced).collect();
        current = next;
    }
    remove_subsumed(current.into_iter().collect())
}

fn remove_subsumed(mut terms: Vec<Conjunction>) -> Vec<Conjunction> {
    terms.sort_by_key(Conjunction::sort_key);
    let mut kept: Vec<Conjunction> = Vec::with_capacity(terms.len());
    for t in terms {
        // shorter terms come first, so anything that could subsume `t` is already kept
        if !kept.iter().any(|k| k.subsumes(&t)) {
            kept.push(t);
        }
    }
    kept
}

/// Distills per-class rules from `expert` on the concept vectors of the
/// samples it covers.
pub fn extract_fol(expert: &EntropyExpert, covered: &Tensor, attention_threshold: f64) -> Result<Vec<FOLRule>> {
    extract_with(expert, covered, attention_threshold, true)
}

/// Same as [`extract_fol`] but keeps the raw pattern union unsimplified.
pub fn extract_fol_raw(expert: &EntropyExpert, covered: &Tensor, attention_threshold: f64) -> Result<Vec<FOLRule>> {
    extract_with(expert, covered, attention_threshold, false)
}

fn extract_with(expert: &EntropyExpert, covered: &Tensor, threshold: f64, simplified: bool) -> Result<Vec<FOLRule>> {
    let (n, m) = covered.dims2()?;
    if n == 0 {
        return Err(Error::invalid("rule extraction needs at least one covered sample"));
    }
    if m > MAX_ARITY {
        return Err(Error::invalid(format!("rule extraction supports at most {MAX_ARITY} concepts, got {m}")));
    }
    let preds = expert.forward(covered)?.argmax_rows();
    let att = expert.attention()?;
    let bits: Vec<u64> = (0..n).map(|i| binarize(covered.row(i))).collect();

    let mut rules = Vec::new();
    for y in 0..expert.n_classes() {
        let members: Vec<usize> = (0..n).filter(|&i| preds[i] == y).collect();
        if members.is_empty() {
            continue;
        }
        let selected: Vec<usize> = (0..m).filter(|&j| att.scaled.get(y, j) >= threshold).collect();
        let mut rule = FOLRule {
            class: y,
            selected: selected.clone(),
            dnf: Vec::new(),
            support: members.len(),
            fidelity: 0.0,
            warning: None,
        };
        if selected.is_empty() {
            rule.warning = Some(format!("no concept reaches attention {threshold} for class {y}"));
        } else {
            let mask = selected.iter().fold(0u64, |acc, &j| acc | 1u64 << j);
            let patterns: BTreeSet<Conjunction> =
                members.iter().map(|&i| Conjunction { mask, values: bits[i] & mask }).collect();
            let patterns: Vec<Conjunction> = patterns.into_iter().collect();
            rule.dnf = if simplified { simplify(&patterns) } else { patterns };
        }
        let agree = (0..n).filter(|&i| rule_eval_packed(&rule, bits[i]) == (preds[i] == y)).count();
        rule.fidelity = agree as f64 / n as f64;
        rules.push(rule);
    }
    Ok(rules)
}

/// Fraction of samples whose predicted class has a rule that holds on them.
pub fn fidelity(rules: &[FOLRule], expert: &EntropyExpert, samples: &Tensor) -> Result<f64> {
    let n = samples.rows();
    if n == 0 {
        return Err(Error::invalid("fidelity on an empty sample set"));
    }
    let preds = expert.forward(samples)?.argmax_rows();
    let by_class: BTreeMap<usize, &FOLRule> = rules.iter().map(|r| (r.class, r)).collect();
    let hits = (0..n)
        .filter(|&i| by_class.get(&preds[i]).is_some_and(|r| rule_eval_packed(r, binarize(samples.row(i)))))
        .count();
    Ok(hits as f64 / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mentions {
    /// `(class, mentions any queried concept)` per rule.
    pub per_class: Vec<(usize, bool)>,
    /// `(concept, literal count)` for each queried concept.
    pub counts: Vec<(usize, usize)>,
}

impl Mentions {
    pub fn any(&self) -> bool {
        self.per_class.iter().any(|(_, b)| *b)
    }
}

pub fn rule_mentions(rules: &[FOLRule], concepts: &[usize]) -> Mentions {
    let per_class =
        rules.iter().map(|r| (r.class, r.dnf.iter().any(|c| concepts.iter().any(|&j| c.mentions(j))))).collect();
    let counts =
        concepts.iter().map(|&j| (j, rules.iter().flat_map(|r| &r.dnf).filter(|c| c.mentions(j)).count())).collect();
    Mentions { per_class, counts }
}

/// The shortest satisfied conjunction of `rule` on `bits`, as a local explanation.
pub fn local_explanation(rule: &FOLRule, bits: u64) -> Option<Conjunction> {
    rule.dnf.iter().filter(|c| c.satisfied_by(bits)).min_by_key(|c| c.sort_key()).copied()
}

/// Renders a conjunction with `labels[j]` naming concept `j`.
pub fn render_conjunction(c: &Conjunction, labels: &[String]) -> String {
    if c.is_empty() {
        return "⊤".to_string();
    }
    let parts: Vec<String> = c
        .literals()
        .iter()
        .map(|l| {
            let name = labels.get(l.concept).cloned().unwrap_or_else(|| format!("c{}", l.concept));
            if l.positive {
                name
            } else {
                format!("¬{name}")
            }
        })
        .collect();
    format!("({})", parts.join(" ∧ "))
}

/// `class_y ↔ (…) ∨ (…)`; an empty rule renders as `⊥`.
pub fn render(rule: &FOLRule, labels: &[String]) -> String {
    let mut out = String::new();
    let _ = write!(out, "class_{} ↔ ", rule.class);
    if rule.dnf.is_empty() {
        out.push('⊥');
    } else {
        let parts: Vec<String> = rule.dnf.iter().map(|c| render_conjunction(c, labels)).collect();
        out.push_str(&parts.join(" ∨ "));
    }
    out
}
