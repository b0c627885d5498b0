use tta_core::metrics::mean_cer;
use tta_core::model::{FieldName, FieldSet};
use tta_core::selection::{kfold_split, select_oracle, select_top_individual, CandidatePool, PoolRecord};
use tta_core::transcriber::{simulate_transcribe, NoiseModel};

const NAMES: [&str; 6] = ["nydia", "helen", "carl", "marguerite", "otto", "beatrix"];

/// Ten simulated candidates with error rates spread from 0.02 to 0.38.
fn pool(records: usize) -> CandidatePool {
    let truths: Vec<FieldSet> = (0..records)
        .map(|r| {
            FieldSet::new()
                .with(FieldName::SelfGivenName, NAMES[r % 6])
                .with(FieldName::FatherSurname, NAMES[(r + 2) % 6])
        })
        .collect();
    let specs = (0..10)
        .map(|s| {
            let model = NoiseModel::new(0.02 + 0.04 * f64::from(s), 0.2, 100 + s as u64);
            let outs = truths
                .iter()
                .enumerate()
                .map(|(r, t)| simulate_transcribe(t, &model.for_record(&format!("r{r}")), 0))
                .collect();
            (format!("spec{s:02}"), outs)
        })
        .collect();
    let records = truths
        .into_iter()
        .enumerate()
        .map(|(r, truth)| PoolRecord {
            id: format!("r{r:03}"),
            truth,
        })
        .collect();
    CandidatePool::new(records, specs).unwrap()
}

#[test]
fn top_individual_matches_brute_force_ranking() {
    let pool = pool(60);
    let records = pool.all_records();
    let mut scored: Vec<(f64, String)> = pool
        .spec_keys()
        .iter()
        .map(|k| {
            (
                mean_cer(&pool.individual_outcomes(k, &records).unwrap()).unwrap(),
                k.clone(),
            )
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for k in 1..=10 {
        let want: Vec<String> = scored.iter().take(k).map(|s| s.1.clone()).collect();
        let mut got = select_top_individual(&pool, k, &records).unwrap();
        got.sort_by_key(|g| scored.iter().position(|s| &s.1 == g));
        assert_eq!(got, want, "k = {k}");
    }
}

#[test]
fn oracle_single_member_is_the_best_spec() {
    let pool = pool(60);
    let records: Vec<usize> = (0..30).collect();
    let best = pool
        .spec_keys()
        .iter()
        .map(|k| {
            (
                mean_cer(&pool.consensus_outcomes(std::slice::from_ref(k), &records).unwrap()).unwrap(),
                k.clone(),
            )
        })
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .unwrap();
    assert_eq!(select_oracle(&pool, 1, &records).unwrap(), vec![best.1]);
}

#[test]
fn kfold_split_is_a_balanced_seeded_partition() {
    let ids: Vec<String> = (0..23).map(|i| format!("id{i}")).collect();
    let plan = kfold_split(&ids, 5, 8).unwrap();
    assert_eq!(plan.assignment.len(), 23);
    let mut sizes = plan.sizes();
    sizes.sort();
    assert_eq!(sizes, vec![4, 4, 5, 5, 5]);
    let mut reversed = ids.clone();
    reversed.reverse();
    assert_eq!(kfold_split(&reversed, 5, 8).unwrap(), plan);
    assert_ne!(kfold_split(&ids, 5, 9).unwrap().assignment, plan.assignment);
    assert!(kfold_split(&ids, 1, 8).is_err());
    assert!(kfold_split(&ids[..3], 5, 8).is_err());
}
