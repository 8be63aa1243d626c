use std::collections::BTreeMap;
use std::path::PathBuf;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rubric_loop_core::gateway::{parse_generation, ParseError};
use rubric_loop_core::model::{cot_sentence, CotExemplar, ExemplarSource, Rubric, ScoreVector, StudentResponse};
use rubric_loop_core::prompt::{render_cot_block, render_score_block};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn rubric() -> Rubric {
    toml::from_str(&std::fs::read_to_string(fixtures().join("rubric.toml")).unwrap()).unwrap()
}

const WORDS: &[&str] = &[
    "rain", "ground", "soaks", "runs", "off", "arrow", "big", "small", "water", "the", "some", "total",
    "subscore", "reasoning", "score:", "1", "0", "because", "\"quoted\"", "*bold*",
];

fn exemplar(rng: &mut ChaCha8Rng, i: usize, rubric: &Rubric) -> CotExemplar {
    let id = format!("gen-{i:03}");
    let scores: Vec<(String, u8)> = rubric.subscore_names().map(|n| (n.to_string(), rng.gen_range(0..=1))).collect();
    let reasoning = scores
        .iter()
        .map(|(name, v)| {
            let evidence: Vec<&str> = (0..rng.gen_range(1..8)).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect();
            let criteria = &rubric.subscore(name).unwrap().criteria;
            (name.clone(), cot_sentence(&evidence.join(" "), criteria, *v))
        })
        .collect::<BTreeMap<_, _>>();
    CotExemplar {
        response: StudentResponse::new(&id, &rubric.question_id, "a generated response").unwrap(),
        gold: ScoreVector::from_scores(id, scores),
        reasoning,
        source: ExemplarSource::ActiveLearning,
    }
}

#[test]
fn hundred_generated_exemplars_round_trip() {
    let rubric = rubric();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..100 {
        let e = exemplar(&mut rng, i, &rubric);
        let block = render_cot_block(&e, &rubric).unwrap();
        let parsed = parse_generation(&block, &rubric).unwrap();
        assert_eq!(parsed.by_subscore, e.gold.by_subscore, "exemplar {i}:\n{block}");
        assert_eq!(parsed.total, e.gold.total);
        assert!(parsed.flags.is_empty());
        for (name, text) in &e.reasoning {
            assert_eq!(&parsed.reasoning[name], text, "exemplar {i}");
        }
    }
}

#[test]
fn malformed_corpora_raise_designated_errors() {
    let rubric = rubric();
    let dir = fixtures().join("parser");
    let expected: BTreeMap<String, ParseError> =
        serde_json::from_str(&std::fs::read_to_string(dir.join("expected.json")).unwrap()).unwrap();
    assert_eq!(expected.len(), 10);
    for (file, want) in expected {
        let raw = std::fs::read_to_string(dir.join("malformed").join(&file)).unwrap();
        assert_eq!(parse_generation(&raw, &rubric), Err(want), "{file}");
    }
}

fn any_gold(rubric: Rubric) -> impl Strategy<Value = (Rubric, ScoreVector, Vec<String>)> {
    let n = rubric.subscores.len();
    (proptest::collection::vec(0u8..=1, n), proptest::collection::vec("[A-Za-z0-9 ,.'\"?!:-]{0,60}", n)).prop_map(
        move |(values, texts)| {
            let gold = ScoreVector::from_scores("p", rubric.subscore_names().zip(values));
            (rubric.clone(), gold, texts)
        },
    )
}

proptest! {
    #[test]
    fn score_blocks_round_trip((rubric, gold, _) in any_gold(rubric())) {
        let parsed = parse_generation(&render_score_block(&gold, &rubric), &rubric).unwrap();
        prop_assert_eq!(parsed.by_subscore, gold.by_subscore);
        prop_assert!(parsed.flags.is_empty());
    }

    #[test]
    fn cot_blocks_round_trip_with_arbitrary_reasoning((rubric, gold, texts) in any_gold(rubric())) {
        let reasoning: BTreeMap<String, String> = rubric
            .subscore_names()
            .zip(texts)
            .map(|(n, t)| (n.to_string(), format!("The student says \"{t}\".")))
            .collect();
        let e = CotExemplar {
            response: StudentResponse::new("p", &rubric.question_id, "x").unwrap(),
            gold: gold.clone(),
            reasoning,
            source: ExemplarSource::IrrAgreed,
        };
        let parsed = parse_generation(&render_cot_block(&e, &rubric).unwrap(), &rubric).unwrap();
        prop_assert_eq!(parsed.by_subscore, gold.by_subscore);
        prop_assert_eq!(parsed.total, gold.total);
    }
}
