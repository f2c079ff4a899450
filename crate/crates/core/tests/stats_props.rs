use std::collections::BTreeMap;

use proptest::prelude::*;
use uts_core::parser::TagList;
use uts_core::stats::{compare_vocabularies, frequency_report};
use uts_core::uts::{accumulate_df, select_top_k};

fn tag_lists() -> impl Strategy<Value = Vec<TagList>> {
    let list = prop::sample::subsequence(&["rain", "dog", "car", "wind", "bird", "bell", "hum"][..], 1..=7)
        .prop_map(|v| TagList::new(v.into_iter().map(String::from).collect()).unwrap());
    prop::collection::vec(list, 1..40)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn counts_match_a_recount(lists in tag_lists()) {
        let table = accumulate_df(lists.iter()).unwrap();
        let per_record: Vec<usize> = lists.iter().map(|t| t.len()).collect();
        let report = frequency_report(&table, &per_record).unwrap();

        let mut recount: BTreeMap<&str, u64> = BTreeMap::new();
        for t in &lists {
            for tag in t.iter() {
                *recount.entry(tag).or_default() += 1;
            }
        }
        prop_assert_eq!(report.rows.len(), recount.len());
        for row in &report.rows {
            prop_assert_eq!(recount[row.tag.as_str()], row.count);
        }
        let rows_total: u64 = report.rows.iter().map(|r| r.count).sum();
        prop_assert_eq!(rows_total, report.summary.total_occurrences);
        prop_assert_eq!(rows_total, per_record.iter().sum::<usize>() as u64);
        prop_assert!(report.rows.windows(2).all(|w| w[0].count > w[1].count || (w[0].count == w[1].count && w[0].tag < w[1].tag)));
        prop_assert!(report.rows.iter().enumerate().all(|(i, r)| r.rank == i + 1));
        let s = &report.summary;
        prop_assert!(s.min_tags_per_record as f64 <= s.median_tags_per_record);
        prop_assert!(s.median_tags_per_record <= s.max_tags_per_record as f64);
    }

    #[test]
    fn jaccard_is_symmetric(a in tag_lists(), b in tag_lists(), ka in 1usize..7, kb in 1usize..7) {
        let va = select_top_k(&accumulate_df(a.iter()).unwrap(), ka).unwrap();
        let vb = select_top_k(&accumulate_df(b.iter()).unwrap(), kb).unwrap();
        let ab = compare_vocabularies(&va, &vb);
        let ba = compare_vocabularies(&vb, &va);
        prop_assert_eq!(ab.jaccard, ba.jaccard);
        prop_assert_eq!((ab.only_first, ab.only_second), (ba.only_second, ba.only_first));
        prop_assert!((0.0..=1.0).contains(&ab.jaccard));
        prop_assert_eq!(compare_vocabularies(&va, &va).jaccard, 1.0);
    }
}

#[test]
fn loglog_rows_follow_the_table() {
    let lists: Vec<TagList> = [vec!["a", "b"], vec!["a"], vec!["a", "c"]]
        .into_iter()
        .map(|v| TagList::new(v.into_iter().map(String::from).collect()).unwrap())
        .collect();
    let report = frequency_report(&accumulate_df(lists.iter()).unwrap(), &[2, 1, 2]).unwrap();
    let mut out = Vec::new();
    report.write_loglog_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "log10_rank,log10_count");
    assert_eq!(lines[1], format!("0.000000000,{:.9}", 3f64.log10()));
    assert_eq!(lines.len(), 4);
}
