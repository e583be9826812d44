//! Final-answer extraction and answer comparison.

/// Returns the trimmed text after the last `marker`, up to the first line
/// break. `None` when the marker is missing or followed only by whitespace.
pub fn extract_final_answer(text: &str, marker: &str) -> Option<String> {
    if marker.is_empty() {
        return None;
    }
    let start = text.rfind(marker)? + marker.len();
    let rest = &text[start..];
    let line = rest.split(['\n', '\r']).next().unwrap_or("");
    let answer = line.trim();
    (!answer.is_empty()).then(|| answer.to_string())
}

const NUMERIC_REL_TOL: f64 = 1e-6;

fn normalize(s: &str) -> String {
    let lowered = s.to_lowercase();
    let collapsed = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed.trim_end_matches('.').trim_end().to_string()
}

/// Plain decimal numbers only: no fractions, no `inf`/`nan` spellings.
fn parse_number(s: &str) -> Option<f64> {
    if !s.bytes().any(|b| b.is_ascii_digit()) {
        return None;
    }
    if !s.bytes().all(|b| b.is_ascii_digit() || matches!(b, b'.' | b'-' | b'+' | b'e')) {
        return None;
    }
    s.parse::<f64>().ok().filter(|x| x.is_finite())
}

/// Compares a predicted answer with the gold answer after normalization
/// (case, surrounding and repeated whitespace, trailing period) and, when both
/// sides parse as decimals, numerically with relative tolerance `1e-6`.
pub fn answers_match(predicted: &str, gold: &str) -> bool {
    let p = normalize(predicted);
    let g = normalize(gold);
    if p.is_empty() || g.is_empty() {
        return false;
    }
    if let (Some(a), Some(b)) = (parse_number(&p), parse_number(&g)) {
        let scale = a.abs().max(b.abs());
        return (a - b).abs() <= NUMERIC_REL_TOL * scale;
    }
    p == g
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const M: &str = "Final answer:";

    #[test]
    fn single_marker() {
        assert_eq!(extract_final_answer("so x=4. Final answer: 4", M).as_deref(), Some("4"));
    }

    #[test]
    fn missing_marker() {
        assert_eq!(extract_final_answer("no marker here", M), None);
        assert_eq!(extract_final_answer("Final answer:   \nmore", M), None);
    }

    #[test]
    fn stops_at_line_break() {
        assert_eq!(extract_final_answer("Final answer: 12\nbecause", M).as_deref(), Some("12"));
    }

    /// Places the marker at every subset of slots among filler chunks and
    /// checks that the answer attached to the last placed marker wins.
    #[test]
    fn last_marker_wins_over_all_placements() {
        let fillers = ["a", "b c", "x=1"];
        let answers = ["3", "7", "11"];
        for mask in 0u32..(1 << 3) {
            let mut text = String::new();
            let mut expected = None;
            for i in 0..3 {
                text.push_str(fillers[i]);
                text.push(' ');
                if mask & (1 << i) != 0 {
                    text.push_str(&format!("{M} {}\n", answers[i]));
                    expected = Some(answers[i].to_string());
                }
            }
            assert_eq!(extract_final_answer(&text, M), expected, "mask {mask:03b}");
        }
        assert_eq!(extract_final_answer("Final answer: 3 then reconsider. Final answer: 7", M).as_deref(), Some("7"));
    }

    #[test]
    fn numeric_canonicalization() {
        assert!(answers_match("4", "4.0"));
        assert!(answers_match("1000000", "1000000.5"));
        assert!(!answers_match("4", "4.1"));
    }

    #[test]
    fn text_normalization() {
        assert!(answers_match(" Yes.", "yes"));
        assert!(answers_match("New   York", "new york"));
    }

    /// Normalization-rule table: fractions are not parsed.
    #[test]
    fn fractions_are_not_numbers() {
        let table = [("3/4", "0.75", false), ("3/4", "3/4", true), ("0.75", "0.750", true), ("inf", "inf", true)];
        for (a, b, want) in table {
            assert_eq!(answers_match(a, b), want, "{a} vs {b}");
        }
    }

    proptest! {
        #[test]
        fn match_is_symmetric(a in "[ a-zA-Z0-9.]{1,12}", b in "[ a-zA-Z0-9.]{1,12}") {
            prop_assert_eq!(answers_match(&a, &b), answers_match(&b, &a));
        }

        #[test]
        fn match_is_reflexive(a in "[a-zA-Z0-9]{1,12}") {
            prop_assert!(answers_match(&a, &a));
        }

        #[test]
        fn extraction_is_idempotent(ans in "[a-z0-9][a-z0-9 ]{0,10}[a-z0-9]") {
            let first = extract_final_answer(&format!("reasoning {M} {ans}"), M).unwrap();
            let again = extract_final_answer(&format!("{M} {first}"), M).unwrap();
            prop_assert_eq!(first, again);
        }
    }
}
