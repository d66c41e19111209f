use std::collections::BTreeSet;

use crate::needs_memo::NeedId;
use crate::protocol::{GroupQuestion, QuestionGroup};

/// Upper bound on questions posted at once.
pub const MAX_BATCH: usize = 4;

/// Size of the next batch for a group with `remaining` questions left.
///
/// Groups of up to four go out whole; larger groups are split into the
/// fewest batches of at most four, as evenly as possible, so a group of 5
/// becomes 3 + 2 rather than 4 + 1.
pub fn next_batch_size(remaining: usize) -> usize {
    if remaining <= MAX_BATCH {
        remaining
    } else {
        let batches = remaining.div_ceil(MAX_BATCH);
        remaining.div_ceil(batches)
    }
}

/// Where the next batch comes from relative to the current one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NextBatch {
    pub topic: String,
    pub questions: Vec<GroupQuestion>,
    /// True when the batch continues the group of the excluded questions.
    pub same_group: bool,
}

/// The batch that follows once `exclude` has been answered.
pub fn next_batch(groups: &[QuestionGroup], exclude: &BTreeSet<NeedId>) -> Option<NextBatch> {
    groups.iter().enumerate().find_map(|(i, group)| {
        let rest: Vec<GroupQuestion> = group
            .questions
            .iter()
            .filter(|q| !exclude.contains(&q.need_id))
            .cloned()
            .collect();
        if rest.is_empty() {
            return None;
        }
        let n = next_batch_size(rest.len());
        Some(NextBatch {
            topic: group.topic.clone(),
            questions: rest.into_iter().take(n).collect(),
            same_group: i == 0 && group.questions.iter().any(|q| exclude.contains(&q.need_id)),
        })
    })
}

/// Counts numbered list items ("1." or "2)") at line starts.
pub fn count_numbered_items(text: &str) -> usize {
    text.lines()
        .filter(|line| {
            let t = line.trim_start();
            let digits = t.bytes().take_while(u8::is_ascii_digit).count();
            digits > 0 && matches!(t.as_bytes().get(digits), Some(b'.') | Some(b')'))
        })
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn group(topic: &str, ids: std::ops::Range<u32>) -> QuestionGroup {
        QuestionGroup {
            topic: topic.into(),
            questions: ids
                .map(|i| GroupQuestion {
                    need_id: NeedId::new(i),
                    question: format!("q{i}"),
                })
                .collect(),
        }
    }

    #[test]
    fn batch_sizes() {
        let sizes: Vec<usize> = (0..=9).map(next_batch_size).collect();
        assert_eq!(sizes, [0, 1, 2, 3, 4, 3, 3, 4, 4, 3]);
    }

    #[test]
    fn next_batch_walks_groups() {
        let groups = vec![group("a", 0..5), group("b", 5..6)];
        let first = next_batch(&groups, &BTreeSet::new()).unwrap();
        assert_eq!(first.questions.len(), 3);
        assert!(!first.same_group);
        let asked: BTreeSet<NeedId> = first.questions.iter().map(|q| q.need_id).collect();
        let second = next_batch(&groups, &asked).unwrap();
        assert_eq!(second.topic, "a");
        assert!(second.same_group);
        assert_eq!(second.questions.len(), 2);
        let all_a: BTreeSet<NeedId> = (0..5).map(NeedId::new).collect();
        let third = next_batch(&groups[1..], &all_a).unwrap();
        assert_eq!(third.topic, "b");
        assert!(!third.same_group);
    }

    #[test]
    fn numbered_items() {
        assert_eq!(count_numbered_items("Hi!\n1. a\n2) b\n  3. c\nnot 4. this\n10.x"), 4);
        assert_eq!(count_numbered_items("no list"), 0);
    }

    proptest! {
        #[test]
        fn batches_partition_a_group_within_bound(n in 0usize..200) {
            let mut remaining = n;
            let mut batches = Vec::new();
            while remaining > 0 {
                let b = next_batch_size(remaining);
                prop_assert!(b >= 1 && b <= MAX_BATCH);
                batches.push(b);
                remaining -= b;
            }
            prop_assert_eq!(batches.iter().sum::<usize>(), n);
            prop_assert_eq!(batches.len(), n.div_ceil(MAX_BATCH));
        }
    }
}
