//! Synthetic multi-hop question answering.
//!
//! Each instance is a chain `e0 -r0-> e1 -r1-> ... -> e_h` over invented
//! entity names. The question mentions only `e0` and the relations, so the
//! answer is reachable only by querying the oracle one hop at a time.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::hfm::{parse_query, AnswerStyle, DialogueInput, ExpertBackend, ExpertResponse, ExpertTimeout, Query, Slot, UNKNOWN};

pub const MIN_HOPS: usize = 2;
pub const MAX_HOPS: usize = 4;

const RELATIONS: [&str; 8] = ["mentor", "rival", "sibling", "employer", "founder", "neighbor", "creator", "owner"];
const ONSETS: [&str; 12] = ["v", "k", "z", "th", "br", "m", "l", "dr", "s", "qu", "f", "g"];
const NUCLEI: [&str; 6] = ["a", "e", "i", "o", "u", "ae"];
const CODAS: [&str; 8] = ["r", "n", "x", "th", "l", "sk", "v", "m"];
const DISTRACTORS: usize = 4;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HopQaError {
    #[error("hop count {0} outside [{MIN_HOPS}, {MAX_HOPS}]")]
    InvalidHops(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactChain {
    pub hops: Vec<Fact>,
    pub question: String,
    pub distractors: Vec<Fact>,
}

impl FactChain {
    pub fn answer(&self) -> &str {
        &self.hops.last().expect("chains have at least two hops").object
    }

    pub fn start(&self) -> &str {
        &self.hops[0].subject
    }

    /// Dialogue input whose slots are the chain's relations in order.
    pub fn dialogue_input(&self, id_prefix: &str) -> DialogueInput {
        let slots = self
            .hops
            .iter()
            .enumerate()
            .map(|(k, h)| Slot {
                subject: (k == 0).then(|| h.subject.clone()),
                relation: h.relation.clone(),
                value: None,
            })
            .collect();
        DialogueInput {
            prompt: self.question.clone(),
            slots,
            chained: true,
            style: AnswerStyle::Terminal,
            id_prefix: id_prefix.to_owned(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleKb {
    pub facts: BTreeMap<String, String>,
}

fn key(subject: &str, relation: &str) -> String {
    format!("{relation} of {subject}")
}

impl OracleKb {
    pub fn lookup(&self, subject: &str, relation: &str) -> Option<&str> {
        self.facts.get(&key(subject, relation)).map(String::as_str)
    }
}

/// One generated instance, as stored in JSON-lines dumps.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HopInstance {
    pub seed: u64,
    pub chain: FactChain,
    pub kb: OracleKb,
}

fn entity_name(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.gen_range(2..=3);
    let mut s = String::new();
    for _ in 0..syllables {
        s.push_str(ONSETS.choose(rng).unwrap());
        s.push_str(NUCLEI.choose(rng).unwrap());
    }
    s.push_str(CODAS.choose(rng).unwrap());
    s
}

pub fn generate(seed: u64, hops: usize) -> Result<(FactChain, OracleKb), HopQaError> {
    if !(MIN_HOPS..=MAX_HOPS).contains(&hops) {
        return Err(HopQaError::InvalidHops(hops));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6f70_7161);
    let mut entities: Vec<String> = Vec::new();
    while entities.len() < hops + 1 + DISTRACTORS {
        let e = entity_name(&mut rng);
        if !entities.contains(&e) {
            entities.push(e);
        }
    }
    let chain_facts: Vec<Fact> = (0..hops)
        .map(|k| Fact {
            subject: entities[k].clone(),
            relation: RELATIONS.choose(&mut rng).unwrap().to_string(),
            object: entities[k + 1].clone(),
        })
        .collect();
    let mut facts: BTreeMap<String, String> =
        chain_facts.iter().map(|f| (key(&f.subject, &f.relation), f.object.clone())).collect();

    let mut distractors = vec![];
    while distractors.len() < DISTRACTORS {
        let subject = entities.choose(&mut rng).unwrap().clone();
        let object = entities.choose(&mut rng).unwrap().clone();
        let relation = RELATIONS.choose(&mut rng).unwrap().to_string();
        let k = key(&subject, &relation);
        if subject == object || facts.contains_key(&k) {
            continue;
        }
        facts.insert(k, object.clone());
        distractors.push(Fact { subject, relation, object });
    }

    let mut question = format!("the {} of {}", chain_facts[0].relation, chain_facts[0].subject);
    for f in &chain_facts[1..] {
        question = format!("the {} of {}", f.relation, question);
    }
    let question = format!("Who is {question}?");
    Ok((FactChain { hops: chain_facts, question, distractors }, OracleKb { facts }))
}

pub fn instance(seed: u64, hops: usize) -> Result<HopInstance, HopQaError> {
    let (chain, kb) = generate(seed, hops)?;
    Ok(HopInstance { seed, chain, kb })
}

/// Oracle reply to a query of the form `<relation> of <entity>`. Anything
/// else, or an absent pair, gets the `unknown` reply. Takes no simulated time.
pub fn oracle_answer(kb: &OracleKb, query: &Query) -> ExpertResponse {
    let text = parse_query(&query.text)
        .and_then(|(relation, subject)| kb.lookup(&subject, &relation))
        .unwrap_or(UNKNOWN)
        .to_owned();
    ExpertResponse { query_id: query.id.clone(), text, t_review_start: 0, t_submit: 0 }
}

/// Exact-match reward head: 1 for the gold entity, 0 otherwise.
pub fn score(answer: &str, chain: &FactChain) -> f64 {
    if answer == chain.answer() { 1.0 } else { 0.0 }
}

/// The scripted oracle as an expert backend.
#[derive(Clone, Debug)]
pub struct HopOracle {
    pub kb: OracleKb,
}

impl ExpertBackend for HopOracle {
    fn ask(&mut self, query: &Query, _timeout: Duration) -> Result<ExpertResponse, ExpertTimeout> {
        Ok(oracle_answer(&self.kb, query))
    }
}

pub fn write_jsonl<W: Write>(mut out: W, instances: &[HopInstance]) -> io::Result<()> {
    for inst in instances {
        serde_json::to_writer(&mut out, inst)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> io::Result<Vec<HopInstance>> {
    input
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| l.and_then(|l| serde_json::from_str(&l).map_err(io::Error::other)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::craftworld::RuleSet;

    fn q(text: &str) -> Query {
        Query { id: "t-q0".into(), text: text.into(), context_snapshot: String::new() }
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(generate(1, 2).unwrap(), generate(1, 2).unwrap());
        assert_ne!(generate(1, 2).unwrap(), generate(2, 2).unwrap());
    }

    #[test]
    fn rejects_bad_hop_counts() {
        assert_eq!(generate(0, 1), Err(HopQaError::InvalidHops(1)));
        assert_eq!(generate(0, 5), Err(HopQaError::InvalidHops(5)));
    }

    #[test]
    fn vocabulary_disjoint_from_items() {
        let rules = RuleSet::standard();
        for seed in 0..500 {
            for hops in MIN_HOPS..=MAX_HOPS {
                let (chain, _) = generate(seed, hops).unwrap();
                for f in chain.hops.iter().chain(&chain.distractors) {
                    assert!(!rules.is_known(&f.subject.as_str().into()));
                    assert!(!rules.is_known(&f.object.as_str().into()));
                }
            }
        }
    }

    #[test]
    fn terminal_entity_not_in_question() {
        for seed in 0..200 {
            let (chain, _) = generate(seed, 3).unwrap();
            assert!(!chain.question.contains(chain.answer()));
            assert!(chain.question.contains(chain.start()));
        }
    }

    #[test]
    fn hop_by_hop_walk_reaches_gold() {
        for seed in 0..100 {
            for hops in MIN_HOPS..=MAX_HOPS {
                let (chain, kb) = generate(seed, hops).unwrap();
                let mut entity = chain.start().to_owned();
                let mut queries = 0;
                for h in &chain.hops {
                    let r = oracle_answer(&kb, &q(&format!("{} of {}", h.relation, entity)));
                    queries += 1;
                    entity = r.text;
                }
                assert_eq!(queries, hops);
                assert_eq!(score(&entity, &chain), 1.0);
            }
        }
    }

    #[test]
    fn unknown_replies() {
        let (chain, kb) = generate(4, 2).unwrap();
        assert_eq!(oracle_answer(&kb, &q(&format!("{} of {}", chain.hops[0].relation, chain.answer()))).text, UNKNOWN);
        assert_eq!(oracle_answer(&kb, &q("what is going on")).text, UNKNOWN);
        let r = oracle_answer(&kb, &q(&format!("{} of {}", chain.hops[0].relation, chain.start())));
        assert_eq!(r.text, chain.hops[0].object);
        assert_eq!(r.t_review_start, r.t_submit);
    }

    #[test]
    fn exact_match_scoring() {
        let (chain, _) = generate(9, 2).unwrap();
        assert_eq!(score(chain.answer(), &chain), 1.0);
        assert_eq!(score("nobody", &chain), 0.0);
        assert_eq!(score(&chain.answer().to_uppercase(), &chain), 0.0);
    }

    #[test]
    fn jsonl_round_trip() {
        let insts: Vec<_> = (0..5).map(|s| instance(s, 3).unwrap()).collect();
        let mut buf = vec![];
        write_jsonl(&mut buf, &insts).unwrap();
        assert_eq!(buf.iter().filter(|b| **b == b'\n').count(), 5);
        assert_eq!(read_jsonl(&buf[..]).unwrap(), insts);
    }
}
