//! Invariants checked over generated inputs.

use std::collections::BTreeMap;

use proptest::prelude::*;

use ahce::craftworld::{shortest_plan, spawn_world, Action, Biome, BiomeMix, ItemId, Outcome, RuleSet, WorldConfig, WorldState};
use ahce::grpo::{collect_group, normalize_advantages, objective_and_gradient, trajectory_kl, PolicySnapshot, SnapshotRole, TrainerConfig};
use ahce::hfm::{parse_transcript, parse_transcript_bytes, sanitize, serialize_segments, DialogueLimits, DialoguePolicy, Segment, SegmentKind, FEATURE_DIM};
use ahce::hopqa;
use ahce::pim::{should_seek_help, FailureTracker, NMax};
use ahce::planner::{decompose, ContextInjection, GapProfile, KnowledgeBase, PlanningContext};
use ahce::qem::{route, Guidance, GuidanceSource};

fn alphabet(rules: &RuleSet) -> Vec<Action> {
    let mut a = vec![
        Action::Move { dx: 1, dy: 0 },
        Action::Move { dx: -1, dy: 0 },
        Action::Move { dx: 0, dy: 1 },
        Action::Move { dx: 0, dy: -1 },
        Action::DigDown,
        Action::ClimbUp,
        Action::Noop,
    ];
    for m in rules.mining() {
        // Mining is listed several times so that crafting has something to consume.
        for _ in 0..3 {
            a.push(Action::Mine(m.resource.clone()));
        }
    }
    for r in rules.recipes() {
        a.push(Action::Craft(r.output.clone()));
        a.push(Action::Place(r.output.clone()));
    }
    a
}

fn run(seed: u64, cfg: &WorldConfig, picks: &[usize]) -> (WorldState, Vec<(Action, Outcome)>) {
    let mut s = spawn_world(seed, cfg).unwrap();
    let actions = alphabet(&s.rules);
    let mut log = vec![];
    for &p in picks {
        let a = actions[p % actions.len()].clone();
        let o = s.step(&a).unwrap();
        log.push((a, o));
    }
    (s, log)
}

fn biome_cfg(b: u8) -> WorldConfig {
    let spawn = [Biome::Forest, Biome::Plains, Biome::Desert][b as usize % 3];
    WorldConfig { spawn_biome: Some(spawn), ..WorldConfig::default() }
}

fn delta(before: &BTreeMap<ItemId, u32>, after: &BTreeMap<ItemId, u32>) -> BTreeMap<ItemId, i64> {
    let mut d: BTreeMap<ItemId, i64> = BTreeMap::new();
    for (k, v) in before {
        *d.entry(k.clone()).or_default() -= i64::from(*v);
    }
    for (k, v) in after {
        *d.entry(k.clone()).or_default() += i64::from(*v);
    }
    d.retain(|_, v| *v != 0);
    d
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn world_is_deterministic(seed in 0u64..1000, b in 0u8..3, picks in prop::collection::vec(any::<usize>(), 0..120)) {
        let cfg = biome_cfg(b);
        let (a, la) = run(seed, &cfg, &picks);
        let (c, lc) = run(seed, &cfg, &picks);
        prop_assert_eq!(a, c);
        prop_assert_eq!(la, lc);
    }

    #[test]
    fn items_are_conserved_and_tools_gate_mining(seed in 0u64..1000, b in 0u8..3, picks in prop::collection::vec(any::<usize>(), 0..200)) {
        let cfg = biome_cfg(b);
        let mut s = spawn_world(seed, &cfg).unwrap();
        let actions = alphabet(&s.rules);
        let rules = s.rules.clone();
        for p in picks {
            let a = &actions[p % actions.len()];
            let before = s.clone();
            let o = s.step(a).unwrap();
            let d = delta(&before.inventory, &s.inventory);
            let expected: BTreeMap<ItemId, i64> = match (a, &o) {
                (_, Outcome::Failed(_)) => BTreeMap::new(),
                (Action::Mine(r), Outcome::Ok) => {
                    let rule = rules.mining_rule(r).unwrap();
                    prop_assert!(before.tool_tier() >= rule.tier, "mined {} at tier {}", r, before.tool_tier());
                    BTreeMap::from([(rule.drop_item().clone(), 1)])
                }
                (Action::Craft(x), Outcome::Ok) => {
                    let r = rules.recipe_for(x).unwrap();
                    let mut m: BTreeMap<ItemId, i64> = BTreeMap::new();
                    for (i, n) in &r.inputs {
                        *m.entry(i.clone()).or_default() -= i64::from(*n);
                    }
                    *m.entry(r.output.clone()).or_default() += i64::from(r.count);
                    m.retain(|_, v| *v != 0);
                    m
                }
                (Action::Place(x), Outcome::Ok) => BTreeMap::from([(x.clone(), -1)]),
                _ => BTreeMap::new(),
            };
            prop_assert_eq!(d, expected, "{:?}", a);
            if !o.is_ok() {
                prop_assert_eq!(&s.placed, &before.placed);
                prop_assert_eq!((s.agent_pos, s.agent_depth), (before.agent_pos, before.agent_depth));
            }
        }
    }

    #[test]
    fn pure_desert_has_no_surface_logs(seed in 0u64..1000, picks in prop::collection::vec(0usize..4, 0..80)) {
        let cfg = WorldConfig {
            biome_mix: BiomeMix { forest: 0.0, plains: 0.0, desert: 1.0 },
            spawn_biome: Some(Biome::Desert),
            ..WorldConfig::default()
        };
        let log: ItemId = "log".into();
        let (mut s, _) = run(seed, &cfg, &picks);
        prop_assert_eq!(s.biome_here(), Biome::Desert);
        prop_assert!(!s.visible(&log));
        prop_assert!(!s.step(&Action::Mine(log)).unwrap().is_ok());
    }

    #[test]
    fn tracker_counts_are_monotone_between_successes(
        s_max in 1u32..20,
        n in 0u32..6,
        events in prop::collection::vec(prop::bool::weighted(0.02), 0..400),
    ) {
        let mut t = FailureTracker::new(s_max, NMax::Finite(n));
        let mut prev_fail = 0;
        let mut timeouts = 0;
        for done in events {
            let timed_out = t.observe_step(done);
            prop_assert!(t.s_sub() <= s_max);
            if done {
                prop_assert_eq!(t.n_fail(), 0);
                timeouts = 0;
            } else {
                prop_assert!(t.n_fail() >= prev_fail);
                timeouts += u32::from(timed_out);
                prop_assert_eq!(t.n_fail(), timeouts);
            }
            prop_assert_eq!(t.should_seek_help(), t.n_fail() > n);
            prev_fail = t.n_fail();
        }
    }

    #[test]
    fn threshold_is_monotone(k in 0u32..50, m in 0u32..50) {
        if should_seek_help(k, NMax::Finite(m)) {
            prop_assert!(should_seek_help(k + 1, NMax::Finite(m)));
            prop_assert!((0..m).all(|lower| should_seek_help(k, NMax::Finite(lower))));
        }
        prop_assert!(!should_seek_help(k, NMax::Infinite));
    }

    #[test]
    fn adding_knowledge_keeps_a_correct_plan_correct(
        seed in 0u64..200,
        b in 0u8..3,
        drop in prop::collection::btree_set(any::<prop::sample::Index>().prop_map(|i| i.index(1 << 16)), 0..4),
        pick in any::<usize>(),
    ) {
        let s = spawn_world(seed, &biome_cfg(b)).unwrap();
        let full = KnowledgeBase::full(&s.rules);
        let items: Vec<ItemId> = s.rules.items().cloned().collect();
        let target = &items[pick % items.len()];
        let ctx = PlanningContext::observe(&s);
        let Ok(truth) = shortest_plan(target, &s, &s.rules) else { return Ok(()) };
        let mut partial = full.clone();
        let n = full.entries.len();
        let drop: Vec<usize> = drop.into_iter().map(|i| i % n).collect();
        partial.entries = full.entries.iter().enumerate().filter(|(i, _)| !drop.contains(i)).map(|(_, k)| k.clone()).collect();
        let withheld: Vec<_> = full.entries.iter().filter(|k| !partial.entries.contains(k)).cloned().collect();
        let plan = decompose(target, &partial, &[], &ctx).map(|p| p.subtasks);
        if plan.as_ref() == Ok(&truth) {
            for k in withheld {
                let more = partial.clone().with(k.clone());
                let p = decompose(target, &more, &[], &ctx).map(|p| p.subtasks);
                prop_assert_eq!(p.as_ref(), Ok(&truth), "adding {} broke the plan for {}", k.id(), target);
            }
        }
    }

    #[test]
    fn transcripts_round_trip(parts in prop::collection::vec((0u8..2, "[ -~]{0,24}", "[ -~]{0,24}"), 0..6), answer in "[ -~]{0,24}") {
        let mut segs = vec![];
        for (kind, a, b) in parts {
            if kind == 0 {
                segs.push(Segment::new(SegmentKind::Think, sanitize(&a)));
            } else {
                segs.push(Segment::new(SegmentKind::Search, sanitize(&a)));
                segs.push(Segment::new(SegmentKind::Result, sanitize(&b)));
            }
        }
        segs.push(Segment::new(SegmentKind::Answer, sanitize(&answer)));
        let text = serialize_segments(&segs);
        let parsed = parse_transcript(&text).unwrap();
        prop_assert_eq!(&parsed.segments, &segs);
        prop_assert_eq!(parsed.serialize(), text);
    }

    #[test]
    fn transcript_parser_is_total(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = parse_transcript_bytes(&bytes);
    }

    #[test]
    fn advantages_ignore_reward_affine_maps(rewards in prop::collection::vec(-2.0f64..2.0, 2..16), scale in 0.01f64..100.0, shift in -10.0f64..10.0) {
        let a = normalize_advantages(&rewards).unwrap();
        let b = normalize_advantages(&rewards.iter().map(|r| scale * r + shift).collect::<Vec<_>>()).unwrap();
        let spread = rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - rewards.iter().cloned().fold(f64::INFINITY, f64::min);
        if spread > 1e-6 {
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-6, "{} vs {}", x, y);
            }
        }
        let mean: f64 = a.iter().sum::<f64>() / a.len() as f64;
        prop_assert!(mean.abs() < 1e-9);
    }

    #[test]
    fn kl_is_non_negative(theta in prop::collection::vec(-3.0f64..3.0, FEATURE_DIM), reference in prop::collection::vec(-3.0f64..3.0, FEATURE_DIM), seed in 0u64..500) {
        let task = hopqa::instance(seed, 2 + (seed % 3) as usize).unwrap();
        let r = ahce::grpo::rollout(&DialoguePolicy { theta: theta.clone() }, &task, DialogueLimits::default(), None);
        let (kl, _) = trajectory_kl(&theta, &reference, &r.steps);
        prop_assert!(kl >= -1e-12, "{}", kl);
        let (self_kl, g) = trajectory_kl(&theta, &theta, &r.steps);
        prop_assert!(self_kl.abs() < 1e-12 && g.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn routing_is_deterministic(text in "[a-z ,.]{0,60}", which in 0usize..4) {
        let fixed = ["use a wooden pickaxe for stone", "dig down to find iron ore, then search wider for log", "get out of the desert to find log", "make plank first"];
        let t = if which < 4 && text.len() % 2 == 0 { fixed[which].to_owned() } else { text };
        for source in [GuidanceSource::HfmSynthesized, GuidanceSource::RawLogReply] {
            let g = Guidance { text: t.clone(), source };
            prop_assert_eq!(route(&g).ok(), route(&g).ok());
        }
    }
}

#[test]
fn injected_fact_equals_built_in_fact() {
    for b in 0..3 {
        let s = spawn_world(11, &biome_cfg(b)).unwrap();
        let ctx = PlanningContext::observe(&s);
        let full = KnowledgeBase::full(&s.rules);
        for k in &full.entries {
            let mut without = full.clone();
            without.entries.retain(|e| e != k);
            let inj = ContextInjection::new(k.id(), vec![k.clone()]);
            for item in s.rules.items() {
                let built_in = decompose(item, &full, &[], &ctx).map(|p| p.subtasks);
                let injected = decompose(item, &without, std::slice::from_ref(&inj), &ctx).map(|p| p.subtasks);
                assert_eq!(built_in, injected, "{} for {item}", k.id());
            }
        }
    }
}

#[test]
fn gap_profiles_only_remove_knowledge() {
    let rules = RuleSet::standard();
    let full = KnowledgeBase::full(&rules);
    for p in [GapProfile::gap_fact(), GapProfile::gap_strat()] {
        let kb = KnowledgeBase::with_profile(&rules, p);
        assert!(kb.entries.iter().all(|k| full.entries.contains(k)));
        assert!(kb.entries.len() < full.entries.len());
    }
}

#[test]
fn fully_clipped_group_has_only_kl_gradient() {
    let cfg = TrainerConfig { beta: 0.0, ..TrainerConfig::default() };
    let old = PolicySnapshot::new(&DialoguePolicy::zeros(), SnapshotRole::Old);
    let reference = PolicySnapshot::new(&DialoguePolicy::zeros(), SnapshotRole::Reference);
    let theta = DialoguePolicy::zeros().theta;
    let mut found = 0;
    for seed in 0..50 {
        let task = hopqa::instance(seed, 2).unwrap();
        let mut group = collect_group(&old, &task, 8, seed, cfg.limits).unwrap();
        let adv = normalize_advantages(&group.rewards()).unwrap();
        if adv.iter().all(|a| *a == 0.0) {
            continue;
        }
        found += 1;
        // Push every ratio past the clip on the side its advantage favours.
        for (r, a) in group.rollouts.iter_mut().zip(&adv) {
            r.log_prob_old += if *a > 0.0 { -1.0 } else { 1.0 };
        }
        let obj = objective_and_gradient(&theta, &group, &reference, &cfg).unwrap();
        assert!(obj.grad.iter().all(|g| *g == 0.0), "seed {seed}");
        assert!(obj.clip_fraction > 0.0);
        // Inside the trust region the same group does move the policy.
        for (r, a) in group.rollouts.iter_mut().zip(&adv) {
            r.log_prob_old -= if *a > 0.0 { -1.0 } else { 1.0 };
        }
        let obj = objective_and_gradient(&theta, &group, &reference, &cfg).unwrap();
        assert!(obj.grad.iter().any(|g| *g != 0.0));
    }
    assert!(found >= 10, "only {found} groups with mixed rewards");
}
