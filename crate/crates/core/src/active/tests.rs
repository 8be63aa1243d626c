use std::sync::Arc;

use proptest::prelude::*;

use super::*;
use crate::gateway::mock::{Cohort, MockBackend};
use crate::gateway::{BackendError, GatewayConfig};
use crate::model::{Subscore, SubscoreKind};
use crate::prompt::{PromptMode, PromptText, EXEMPLAR_DELIMITER};

fn rubric() -> Rubric {
    Rubric::new(
        "q",
        "Where does the rain go?",
        vec![
            Subscore::new("a", SubscoreKind::Concept, "names absorption"),
            Subscore::new("b", SubscoreKind::Concept, "names runoff"),
        ],
    )
    .unwrap()
}

fn item(id: &str, a: u8, b: u8) -> PoolItem {
    PoolItem {
        response: StudentResponse::new(id, "q", format!("answer from {id}")).unwrap(),
        gold: ScoreVector::from_scores(id, [("a", a), ("b", b)]),
    }
}

fn exemplar(id: &str, a: u8, b: u8) -> CotExemplar {
    let PoolItem { response, gold } = item(id, a, b);
    CotExemplar {
        reasoning: draft_reasoning(&response, &gold, &rubric()),
        response,
        gold,
        source: ExemplarSource::IrrAgreed,
    }
}

fn spec(extra: &[(&str, u8, u8)]) -> PromptSpec {
    let mut ex = vec![exemplar("e1", 1, 1), exemplar("e2", 0, 0)];
    ex.extend(extra.iter().map(|&(id, a, b)| exemplar(id, a, b)));
    PromptSpec::new(rubric(), PromptMode::FewShotCot, ex)
}

/// v01..v12; `a` is 0 for v01..v06 and v10, `b` is 1 for v07, v08, v11.
fn pool() -> Vec<PoolItem> {
    (1..=12)
        .map(|i| {
            let a = u8::from(!(1..=6).contains(&i) && i != 10);
            let b = u8::from([7, 8, 11].contains(&i));
            item(&format!("v{i:02}"), a, b)
        })
        .collect()
}

fn state(config: ALConfig) -> ALState {
    ALState::new(spec(&[]), pool(), BTreeSet::from(["t1".to_string()]), config).unwrap()
}

fn gateway(mock: MockBackend) -> Gateway {
    Gateway::new(Arc::new(mock), GatewayConfig::mock()).unwrap()
}

fn items(state: &ALState) -> Vec<(StudentResponse, ScoreVector)> {
    state.pool.values().map(|p| (p.response.clone(), p.gold.clone())).collect()
}

fn cohort(subscore: &str, ids: &[&str]) -> Cohort {
    Cohort {
        subscore: subscore.into(),
        members: ids.iter().map(|s| s.to_string()).collect(),
    }
}

fn tag_of(id: &str, subscore: &str, direction: ErrorDirection, ids: &[&str]) -> ErrorTag {
    ErrorTag {
        pattern_id: id.into(),
        description: format!("pattern {id}"),
        instance_ids: ids.iter().map(|s| s.to_string()).collect(),
        subscore: subscore.into(),
        direction,
    }
}

#[tokio::test]
async fn echo_gold_validation_converges() {
    let mut st = state(ALConfig::default());
    let (responses, golds): (Vec<_>, Vec<_>) = items(&st).into_iter().unzip();
    let gw = gateway(MockBackend::echo_gold(&st.spec, &responses, &golds).unwrap());
    let mut log = MemoryLog::default();
    let it = run_validation(&mut st, &gw, &mut log).await.unwrap();
    assert_eq!(it.error_count, 0);
    assert_eq!(it.decision.status, StopStatus::Converged);
    assert_eq!(log.snapshots.len(), 1);
    assert_eq!(log.runs.len(), 1);
    assert_eq!(it.run_digest, log.runs[0].digest());
    assert_eq!(st.validation_ratio(), Some(6.0));
}

#[tokio::test]
async fn three_flipped_instances_give_three_tuples() {
    let mut st = state(ALConfig::default());
    let gw = gateway(MockBackend::repaired_after_exemplar(
        st.rubric(),
        &items(&st),
        vec![cohort("a", &["v01", "v02", "v03"])],
    ));
    let it = run_validation(&mut st, &gw, &mut MemoryLog::default()).await.unwrap();
    assert_eq!(it.error_count, 3);
    assert!(it.misclassified.iter().all(|m| m.subscore == "a" && m.direction() == Some(ErrorDirection::Fp)));
    let a = it.trends.iter().find(|t| t.subscore == "a").unwrap();
    assert_eq!((a.fp_count, a.fn_count), (3, 0));
    assert_eq!(it.reports.as_ref().unwrap().by_subscore["b"].accuracy, 1.0);
}

#[tokio::test]
async fn parse_failure_counts_on_every_subscore() {
    let mut st = state(ALConfig::default());
    let all = items(&st);
    let echo = MockBackend::repaired_after_exemplar(st.rubric(), &all, vec![]);
    let echo = Arc::new(echo);
    let inner = echo.clone();
    let mock = MockBackend::new().with_fallback(move |p: &PromptText| {
        if p.target_response() == Some("answer from v04") {
            return Ok("I would rather not say.".into());
        }
        let req = crate::gateway::CompletionRequest {
            prompt: p.clone(),
            model_id: "m".into(),
            temperature: 0.0,
        };
        futures::executor::block_on(crate::gateway::Backend::complete(&*inner, &req)).map(|r| r.text)
    });
    let it = run_validation(&mut st, &gateway(mock), &mut MemoryLog::default()).await.unwrap();
    assert_eq!(it.error_count, 2);
    assert!(it.misclassified.iter().all(|m| m.response_id == "v04" && m.pred.is_none()));
    assert_eq!(it.reports.as_ref().unwrap().total.n, 11);
}

#[tokio::test]
async fn gateway_failures_beyond_tolerance_abort() {
    let mut st = state(ALConfig::default());
    let mock = MockBackend::new().with_fallback(|_| Err(BackendError::Transient { status: Some(503), message: "down".into() }));
    let mut log = MemoryLog::default();
    let err = run_validation(&mut st, &gateway(mock), &mut log).await.unwrap_err();
    assert_eq!(err, ALError::TooManyFailures { failures: 12, tolerance: 0 });
    assert!(st.iterations.is_empty());
    assert!(log.snapshots.is_empty());
}

fn iteration(index: u32, misclassified: Vec<Misclassification>, tags: Vec<ErrorTag>) -> ALIteration {
    ALIteration {
        index,
        prompt_spec_digest: Digest::of_bytes(index.to_string()),
        run_digest: Digest::of_bytes("run"),
        validation_ids: BTreeSet::new(),
        reports: None,
        trends: Vec::new(),
        error_count: misclassified.len(),
        misclassified,
        unscored: Vec::new(),
        tags,
        selection: None,
        added_exemplars: Vec::new(),
        decision: StopDecision::new(StopStatus::Continue, ""),
    }
}

fn wrong(ids: &[&str], subscore: &str, gold: u8) -> Vec<Misclassification> {
    ids.iter()
        .map(|id| Misclassification {
            response_id: id.to_string(),
            subscore: subscore.into(),
            pred: Some(1 - gold),
            gold,
        })
        .collect()
}

fn pool_map() -> BTreeMap<String, PoolItem> {
    pool().into_iter().map(|p| (p.response.id.clone(), p)).collect()
}

fn chosen(sel: &Selection) -> Vec<&str> {
    match sel {
        Selection::Candidates { candidates, .. } => candidates.iter().map(|c| c.exemplar.id()).collect(),
        Selection::Exhausted { reason } => panic!("exhausted: {reason}"),
    }
}

#[test]
fn greedy_takes_the_heavy_pattern_first() {
    let p1 = ["v01", "v02", "v03", "v04", "v05", "v06"];
    let mut m = wrong(&p1, "a", 0);
    m.extend(wrong(&["v07", "v08"], "b", 1));
    let tags = vec![
        tag_of("P2", "b", ErrorDirection::Fn, &["v08", "v07"]),
        tag_of("P1", "a", ErrorDirection::Fp, &p1),
    ];
    let it = iteration(0, m, tags);
    validate_tags(&it, &it.tags, &rubric()).unwrap();
    let sel = select_candidates(&it, &spec(&[]).exemplars, &pool_map(), &rubric(), &BalancePolicy::default(), 2).unwrap();
    assert_eq!(chosen(&sel), vec!["v01", "v07"]);
    let Selection::Candidates { candidates, certificate } = sel else { unreachable!() };
    assert_eq!(candidates[0].gain, 6);
    assert_eq!(candidates[1].gain, 2);
    assert_eq!(certificate.stop, CoverStop::FullCover);
    assert_eq!(certificate.covered, vec!["P1", "P2"]);
    assert!(candidates[0].exemplar.missing_reasoning(&rubric()).is_empty());
}

#[test]
fn budget_stops_the_cover() {
    let mut m = wrong(&["v01", "v02"], "a", 0);
    m.extend(wrong(&["v07"], "b", 1));
    let it = iteration(
        0,
        m,
        vec![tag_of("P1", "a", ErrorDirection::Fp, &["v01", "v02"]), tag_of("P2", "b", ErrorDirection::Fn, &["v07"])],
    );
    let sel = select_candidates(&it, &spec(&[]).exemplars, &pool_map(), &rubric(), &BalancePolicy::default(), 1).unwrap();
    let Selection::Candidates { candidates, certificate } = sel else { panic!() };
    assert_eq!(candidates.len(), 1);
    assert_eq!(certificate.stop, CoverStop::Budget);
    assert_eq!(certificate.uncovered, vec!["P2"]);
}

#[test]
fn shared_instance_covers_everything() {
    let mut m = wrong(&["v01", "v02"], "a", 0);
    m.extend(wrong(&["v02", "v07"], "b", 0));
    // v07 has gold b = 1, so make its error an underscore of b
    m.retain(|x| x.response_id != "v07");
    m.extend(wrong(&["v07"], "b", 1));
    m.iter_mut().filter(|x| x.response_id == "v02" && x.subscore == "b").for_each(|x| x.gold = 0);
    let it = iteration(
        0,
        m,
        vec![
            tag_of("P1", "a", ErrorDirection::Fp, &["v01", "v02"]),
            tag_of("P2", "b", ErrorDirection::Fp, &["v02"]),
        ],
    );
    let sel = select_candidates(&it, &spec(&[]).exemplars, &pool_map(), &rubric(), &BalancePolicy::default(), 5).unwrap();
    assert_eq!(chosen(&sel), vec!["v02"]);
}

#[test]
fn unbalancing_candidates_exhaust_selection() {
    // prompt: a 2+/1-, b 1+/2-; every tagged instance has b = 0
    let ex = spec(&[("e3", 1, 0)]).exemplars;
    let it = iteration(
        0,
        wrong(&["v01", "v02", "v03"], "a", 0),
        vec![tag_of("P1", "a", ErrorDirection::Fp, &["v01", "v02", "v03"])],
    );
    let sel = select_candidates(&it, &ex, &pool_map(), &rubric(), &BalancePolicy::uniform(1.0), 3).unwrap();
    let Selection::Exhausted { reason } = sel else { panic!("{sel:?}") };
    assert!(reason.contains("subscore b"), "{reason}");
    assert!(!reason.contains("subscore a"), "{reason}");
}

#[test]
fn no_tagged_instance_left_is_exhausted() {
    let it = iteration(0, wrong(&["zz"], "a", 0), vec![tag_of("P1", "a", ErrorDirection::Fp, &["zz"])]);
    let sel = select_candidates(&it, &[], &pool_map(), &rubric(), &BalancePolicy::default(), 3).unwrap();
    assert!(matches!(sel, Selection::Exhausted { .. }));
    assert_eq!(
        select_candidates(&it, &[], &pool_map(), &rubric(), &BalancePolicy::default(), 0),
        Err(ALError::ZeroBudget)
    );
}

#[test]
fn tag_validation() {
    let it = iteration(0, wrong(&["v01"], "a", 0), vec![]);
    let r = rubric();
    assert!(validate_tags(&it, &[tag_of("P", "a", ErrorDirection::Fp, &["v01"])], &r).is_ok());
    for bad in [
        tag_of("P", "a", ErrorDirection::Fn, &["v01"]),
        tag_of("P", "b", ErrorDirection::Fp, &["v01"]),
        tag_of("P", "a", ErrorDirection::Fp, &["v02"]),
        tag_of("P", "a", ErrorDirection::Fp, &[]),
        tag_of("P", "c", ErrorDirection::Fp, &["v01"]),
        tag_of(" ", "a", ErrorDirection::Fp, &["v01"]),
    ] {
        assert!(matches!(validate_tags(&it, &[bad], &r), Err(ALError::InvalidTag { .. })));
    }
    let dup = tag_of("P", "a", ErrorDirection::Fp, &["v01"]);
    assert!(validate_tags(&it, &[dup.clone(), dup], &r).is_err());
}

fn counts(history: &[usize]) -> Vec<ALIteration> {
    history
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let ids: Vec<String> = (0..n).map(|k| format!("v{k:02}")).collect();
            let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
            iteration(i as u32, wrong(&refs, "a", 0), vec![])
        })
        .collect()
}

#[test]
fn stop_rules() {
    let loose = ALConfig { max_iterations: 5, ..ALConfig::default() };
    assert_eq!(check_stop(&counts(&[7, 0]), &loose).status, StopStatus::Converged);
    let overfit = check_stop(&counts(&[5, 8]), &loose);
    assert_eq!(overfit.status, StopStatus::OverfitRevert);
    assert_eq!(overfit.revert_to, Some(0));
    assert!(overfit.reason.contains("iteration 0"));
    assert_eq!(overfit.subscore_deltas["a"], 3);
    assert_eq!(check_stop(&counts(&[5, 3]), &loose).status, StopStatus::Continue);
    assert_eq!(check_stop(&counts(&[5, 3]), &ALConfig::default()).status, StopStatus::Exhausted);
    assert_eq!(check_stop(&counts(&[5]), &ALConfig::default()).status, StopStatus::Continue);
    assert_eq!(check_stop(&[], &loose).status, StopStatus::Continue);
    let mut h = counts(&[5, 3]);
    h[1].selection = Some(Selection::Exhausted { reason: "pool is dry".into() });
    let d = check_stop(&h, &loose);
    assert_eq!((d.status, d.reason.as_str()), (StopStatus::Exhausted, "pool is dry"));
}

#[tokio::test]
async fn advance_moves_accepted_candidates() {
    let mut st = state(ALConfig::default());
    let gw = gateway(MockBackend::repaired_after_exemplar(
        st.rubric(),
        &items(&st),
        vec![cohort("a", &["v01", "v02"]), cohort("b", &["v07"])],
    ));
    let mut log = MemoryLog::default();
    run_validation(&mut st, &gw, &mut log).await.unwrap();
    tag(
        &mut st,
        vec![
            tag_of("P1", "a", ErrorDirection::Fp, &["v01", "v02"]),
            tag_of("P2", "b", ErrorDirection::Fn, &["v07"]),
        ],
        &mut log,
    )
    .unwrap();
    let sel = select(&mut st, &mut log).unwrap();
    assert_eq!(chosen(&sel), vec!["v01", "v07"]);

    let mut missing = st.last().unwrap().candidates()[0].exemplar.clone();
    missing.reasoning.remove("b");
    assert!(matches!(advance(&mut st, vec![missing], &mut log), Err(ALError::MissingReasoning { .. })));
    let mut relabeled = st.last().unwrap().candidates()[0].exemplar.clone();
    relabeled.gold = ScoreVector::from_scores("v01", [("a", 1), ("b", 0)]);
    assert_eq!(advance(&mut st, vec![relabeled], &mut log), Err(ALError::GoldMismatch("v01".into())));
    let outsider = exemplar("v03", 0, 0);
    assert_eq!(advance(&mut st, vec![outsider], &mut log), Err(ALError::NotACandidate("v03".into())));

    let before = (st.pool.len(), st.spec.exemplars.len());
    advance(&mut st, vec![], &mut log).unwrap();
    assert_eq!((st.pool.len(), st.spec.exemplars.len()), before);
    assert!(matches!(st.events.last(), Some(ALEvent::NoOp { iteration: 0 })));

    let mut edited = st.last().unwrap().candidates()[0].exemplar.clone();
    edited.reasoning.insert("a".into(), "The student says it soaks in. The rubric wants absorption named. Score 0.".into());
    advance(&mut st, vec![edited.clone()], &mut log).unwrap();
    assert_eq!(st.pool.len(), before.0 - 1);
    assert_eq!(st.spec.exemplars.len(), before.1 + 1);
    assert_eq!(st.spec.exemplars.last().unwrap(), &edited);
    assert!(!st.pool.contains_key("v01"));
    st.check_disjoint().unwrap();
    assert_eq!(log.snapshots.last().unwrap(), &st);
}

/// A model that errs on the first `errors[k]` responses not shown in the
/// prompt when the prompt holds `k` added exemplars.
fn scripted_by_prompt_size(st: &ALState, errors: Vec<usize>) -> MockBackend {
    let rubric = st.rubric().clone();
    let base = st.spec.exemplars.len();
    let all: Vec<(StudentResponse, ScoreVector)> = items(st);
    MockBackend::new().with_fallback(move |p: &PromptText| {
        let shown = p.as_str().matches(EXEMPLAR_DELIMITER).count() - base;
        let target = p.target_response().unwrap();
        let head = p.as_str().split(crate::prompt::TARGET_HEADER).next().unwrap();
        let unseen: Vec<&(StudentResponse, ScoreVector)> =
            all.iter().filter(|(r, _)| !head.contains(&format!("\n{}\n\nScoring:", r.text))).collect();
        let pos = unseen.iter().position(|(r, _)| r.text == target).unwrap();
        let mut gold = unseen[pos].1.clone();
        if pos < errors[shown] {
            let v = gold.by_subscore.get_mut("a").unwrap();
            *v = 1 - *v;
        }
        Ok(crate::prompt::render_score_block(&ScoreVector::from_scores(gold.response_id.clone(), gold.by_subscore), &rubric))
    })
}

#[tokio::test]
async fn overfit_is_reverted_to_the_exact_prior_prompt() {
    let mut st = state(ALConfig { max_iterations: 3, ..ALConfig::default() });
    let gw = gateway(scripted_by_prompt_size(&st, vec![5, 8]));
    let mut log = MemoryLog::default();
    let first = run_validation(&mut st, &gw, &mut log).await.unwrap();
    assert_eq!(first.error_count, 5);
    let ids: Vec<String> = first.misclassified.iter().map(|m| m.response_id.clone()).collect();
    let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
    tag(&mut st, vec![tag_of("P1", "a", ErrorDirection::Fp, &refs)], &mut log).unwrap();
    select(&mut st, &mut log).unwrap();
    let accepted = st.last().unwrap().candidates().iter().map(|c| c.exemplar.clone()).collect();
    advance(&mut st, accepted, &mut log).unwrap();
    let second = run_validation(&mut st, &gw, &mut log).await.unwrap();
    assert_eq!(second.error_count, 8);
    assert_eq!(second.decision.status, StopStatus::OverfitRevert);
    assert_eq!(second.decision.revert_to, Some(0));

    revert(&mut st, 0, &mut log).unwrap();
    assert_eq!(st.spec.digest(), first.prompt_spec_digest);
    assert_eq!(st.pool.len(), 12);
    assert_eq!(st.iterations.len(), 2);
    assert_eq!(revert(&mut st, 0, &mut log), Err(ALError::NothingToRevert(0)));

    let persisted = log.snapshots.last().unwrap();
    let live: Vec<StopDecision> = persisted.iterations.iter().map(|i| i.decision.clone()).collect();
    assert_eq!(replay(&persisted.iterations, &persisted.config), live);
}

#[tokio::test]
async fn repaired_after_exemplar_converges_within_pattern_count() {
    let cohorts = vec![
        cohort("a", &["v01", "v02", "v03", "v04", "v05", "v06"]),
        cohort("b", &["v07", "v08"]),
        cohort("a", &["v09"]),
    ];
    for max_additions in [1, 3] {
        let mut st = state(ALConfig { max_iterations: 3, max_additions, ..ALConfig::default() });
        let gw = gateway(MockBackend::repaired_after_exemplar(st.rubric(), &items(&st), cohorts.clone()));
        let mut log = MemoryLog::default();
        let mut advances = 0;
        loop {
            let it = run_validation(&mut st, &gw, &mut log).await.unwrap();
            if it.decision.status != StopStatus::Continue {
                assert_eq!(it.decision.status, StopStatus::Converged, "{:?}", it.decision);
                break;
            }
            let tags: Vec<ErrorTag> = cohorts
                .iter()
                .enumerate()
                .filter_map(|(k, c)| {
                    let hit: BTreeSet<String> = it
                        .misclassified
                        .iter()
                        .filter(|m| m.subscore == c.subscore && c.members.contains(&m.response_id))
                        .map(|m| m.response_id.clone())
                        .collect();
                    let direction = it.misclassified.iter().find(|m| hit.contains(&m.response_id))?.direction()?;
                    Some(ErrorTag {
                        pattern_id: format!("P{}", k + 1),
                        description: String::new(),
                        instance_ids: hit,
                        subscore: c.subscore.clone(),
                        direction,
                    })
                })
                .collect();
            tag(&mut st, tags, &mut log).unwrap();
            select(&mut st, &mut log).unwrap();
            let accepted = st.last().unwrap().candidates().iter().map(|c| c.exemplar.clone()).collect();
            advance(&mut st, accepted, &mut log).unwrap();
            advances += 1;
        }
        assert!(advances <= 3, "{advances} iterations with max_additions {max_additions}");
        let expected = if max_additions == 1 { 3 } else { 1 };
        assert_eq!(advances, expected);
    }
}

#[test]
fn overlapping_partitions_are_rejected() {
    let err = ALState::new(spec(&[]), pool(), BTreeSet::from(["v03".to_string()]), ALConfig::default());
    assert_eq!(err, Err(ALError::Overlap("v03".into())));
    let mut p = pool();
    p.push(item("e1", 1, 1));
    assert_eq!(ALState::new(spec(&[]), p, BTreeSet::new(), ALConfig::default()), Err(ALError::Overlap("e1".into())));
    assert_eq!(ALState::new(spec(&[]), vec![], BTreeSet::new(), ALConfig::default()), Err(ALError::EmptyPool));
}

#[test]
fn worksheet_lists_candidates() {
    let mut it = iteration(0, wrong(&["v01"], "a", 0), vec![tag_of("P1", "a", ErrorDirection::Fp, &["v01"])]);
    it.selection = Some(
        select_candidates(&it, &spec(&[]).exemplars, &pool_map(), &rubric(), &BalancePolicy::default(), 1).unwrap(),
    );
    let csv = candidate_worksheet(&it);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("pattern_id,description,covered_instances,proposed_exemplar,draft_cot"));
    assert!(lines.next().unwrap().starts_with("P1,pattern P1,1,v01,"));
}

fn tagged_iteration() -> impl Strategy<Value = ALIteration> {
    let ids: Vec<String> = (1..=12).map(|i| format!("v{i:02}")).collect();
    proptest::collection::vec(proptest::sample::subsequence(ids, 1..5), 1..5).prop_map(|groups| {
        let p = pool_map();
        let mut mis = BTreeMap::new();
        let mut tags = Vec::new();
        for (k, g) in groups.iter().enumerate() {
            let subscore = if k % 2 == 0 { "a" } else { "b" };
            for id in g {
                let gold = p[id].gold.get(subscore).unwrap();
                mis.insert((id.clone(), subscore), Misclassification {
                    response_id: id.clone(),
                    subscore: subscore.into(),
                    pred: Some(1 - gold),
                    gold,
                });
            }
            // instances with mixed directions are split per direction
            for dir in [ErrorDirection::Fp, ErrorDirection::Fn] {
                let ids: BTreeSet<String> = g
                    .iter()
                    .filter(|id| mis[&((*id).clone(), subscore)].direction() == Some(dir))
                    .cloned()
                    .collect();
                if !ids.is_empty() {
                    tags.push(ErrorTag {
                        pattern_id: format!("P{k}{dir:?}"),
                        description: String::new(),
                        instance_ids: ids,
                        subscore: subscore.into(),
                        direction: dir,
                    });
                }
            }
        }
        iteration(0, mis.into_values().collect(), tags)
    })
}

proptest! {
    #[test]
    fn selection_respects_budget_and_pattern_count(it in tagged_iteration(), budget in 1usize..6) {
        validate_tags(&it, &it.tags, &rubric()).unwrap();
        let sel = select_candidates(&it, &spec(&[]).exemplars, &pool_map(), &rubric(), &BalancePolicy::default(), budget).unwrap();
        let Selection::Candidates { candidates, certificate } = sel else { panic!("min-constraint never blocks") };
        prop_assert!(candidates.len() <= budget);
        prop_assert!(candidates.len() <= it.tags.len());
        prop_assert!(candidates.iter().all(|c| c.gain > 0 && !c.covers.is_empty()));
        let gains: Vec<usize> = candidates.iter().map(|c| c.gain).collect();
        prop_assert!(gains.windows(2).all(|w| w[0] >= w[1]));
        if certificate.stop == CoverStop::FullCover {
            prop_assert!(certificate.uncovered.is_empty());
        }
    }

    #[test]
    fn replay_matches_live(history in proptest::collection::vec(0usize..10, 1..8), max in 1u32..8) {
        let config = ALConfig { max_iterations: max, ..ALConfig::default() };
        let mut its = counts(&history);
        for n in 1..=its.len() {
            let d = check_stop(&its[..n], &config);
            its[n - 1].decision = d;
        }
        let live: Vec<StopDecision> = its.iter().map(|i| i.decision.clone()).collect();
        prop_assert_eq!(replay(&its, &config), live);
    }
}

#[test]
fn advance_rechecks_balance_on_the_accepted_set() {
    let mut st = state(ALConfig { balance: BalancePolicy::uniform(1.0), ..ALConfig::default() });
    let offered: Vec<Candidate> = ["v01", "v02"]
        .iter()
        .map(|id| {
            let PoolItem { response, gold } = st.pool[*id].clone();
            Candidate {
                exemplar: CotExemplar {
                    reasoning: draft_reasoning(&response, &gold, &rubric()),
                    response,
                    gold,
                    source: ExemplarSource::ActiveLearning,
                },
                covers: vec!["P1".into()],
                gain: 1,
            }
        })
        .collect();
    let mut it = iteration(0, wrong(&["v01", "v02"], "a", 0), vec![]);
    it.prompt_spec_digest = st.spec.digest();
    it.selection = Some(Selection::Candidates {
        candidates: offered.clone(),
        certificate: CoverCertificate {
            order: vec!["v01".into(), "v02".into()],
            covered: vec!["P1".into()],
            uncovered: vec![],
            stop: CoverStop::FullCover,
            rejected: BTreeMap::new(),
        },
    });
    st.iterations.push(it);
    let mut log = MemoryLog::default();
    let both: Vec<CotExemplar> = offered.iter().map(|c| c.exemplar.clone()).collect();
    let err = advance(&mut st, both, &mut log).unwrap_err();
    let ALError::Unbalanced(problems) = err else { panic!("{err:?}") };
    assert!(problems.iter().any(|p| p.contains("subscore a")), "{problems:?}");
    assert!(log.snapshots.is_empty());
    advance(&mut st, vec![offered[0].exemplar.clone()], &mut log).unwrap();
    assert_eq!(st.spec.exemplars.len(), 3);
}
