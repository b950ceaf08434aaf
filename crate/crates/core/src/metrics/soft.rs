use super::MetricsError;
use crate::domain::{normalize_answer, SoftScore};

/// Standard multi-annotator VQA accuracy: `min(matches / 3, 1)`.
pub fn vqa_soft_score(predicted: &str, annotations: &[String]) -> Result<SoftScore, MetricsError> {
    if annotations.is_empty() {
        return Err(MetricsError::NoAnnotations);
    }
    let target = normalize_answer(predicted);
    let matches = annotations
        .iter()
        .filter(|a| normalize_answer(a) == target)
        .count();
    Ok(SoftScore::from_matches(matches))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ann(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn examples() {
        assert_eq!(vqa_soft_score("dog", &ann(&["dog"; 10])).unwrap().value(), 1.0);
        assert_eq!(
            vqa_soft_score("dog", &ann(&["dog", "cat", "cat", "bird", "cat"])).unwrap().value(),
            1.0 / 3.0
        );
        assert_eq!(vqa_soft_score("fish", &ann(&["dog"; 10])).unwrap().value(), 0.0);
        assert_eq!(
            vqa_soft_score("Dog", &ann(&["dog", "the dog", "cat"])).unwrap().value(),
            2.0 / 3.0
        );
        assert_eq!(vqa_soft_score("dog", &[]), Err(MetricsError::NoAnnotations));
    }

    proptest! {
        #[test]
        fn monotone_in_matches_and_capped(matches in 0usize..10, others in 1usize..10) {
            let mut a = vec!["dog".to_string(); matches];
            a.extend(std::iter::repeat_n("cat".to_string(), others));
            let s = vqa_soft_score("dog", &a).unwrap();
            a.push("dog".into());
            let more = vqa_soft_score("dog", &a).unwrap();
            prop_assert!(more >= s);
            prop_assert!(more.value() <= 1.0);
        }
    }
}
