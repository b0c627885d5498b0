//! Text normalization used for scoring and for case-insensitive voting.

use unicode_general_category::{get_general_category, GeneralCategory as Gc};

/// Unicode simple case folding of a single code point.
pub fn fold_case(c: char) -> char {
    unicode_case_mapping::case_folded(c)
        .and_then(|cp| char::from_u32(cp.get()))
        .unwrap_or(c)
}

/// True for code points in the P* and S* general categories.
pub fn is_punct_or_symbol(c: char) -> bool {
    matches!(
        get_general_category(c),
        Gc::ConnectorPunctuation
            | Gc::DashPunctuation
            | Gc::OpenPunctuation
            | Gc::ClosePunctuation
            | Gc::InitialPunctuation
            | Gc::FinalPunctuation
            | Gc::OtherPunctuation
            | Gc::MathSymbol
            | Gc::CurrencySymbol
            | Gc::ModifierSymbol
            | Gc::OtherSymbol
    )
}

/// Case-folds `raw` and strips whitespace, punctuation and symbols.
///
/// Letters, digits and combining marks are kept as-is (no diacritic
/// stripping).
pub fn normalize_text(raw: &str) -> String {
    raw.chars()
        .filter(|&c| !c.is_whitespace() && !is_punct_or_symbol(c))
        .map(fold_case)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(normalize_text("Mary A."), "marya");
        assert_eq!(normalize_text(""), "");
        assert_eq!(normalize_text("O'Brien "), "obrien");
        assert_eq!(normalize_text("Anne-Marie\t$5"), "annemarie5");
    }

    #[test]
    fn diacritics_are_kept() {
        assert_eq!(normalize_text("JOSÉ"), "josé");
        assert_eq!(fold_case('Σ'), 'σ');
    }

    proptest! {
        #[test]
        fn idempotent(s in "\\PC{0,24}") {
            let once = normalize_text(&s);
            prop_assert_eq!(normalize_text(&once), once);
        }

        #[test]
        fn output_has_no_space_or_punctuation(s in "\\PC{0,24}") {
            for c in normalize_text(&s).chars() {
                prop_assert!(!c.is_whitespace());
                prop_assert!(!is_punct_or_symbol(c));
            }
        }
    }
}
